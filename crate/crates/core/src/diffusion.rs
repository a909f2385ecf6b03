//! Closed-form forward/reverse diffusion algebra.
//!
//! Images are single precision; every coefficient is evaluated in double
//! precision from the [`VarianceSchedule`] and cast once.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{ensure_same_shape, Image};
use crate::schedule::VarianceSchedule;

/// Anything that predicts the injected noise from `(x_t, t)`.
pub trait NoisePredictor: Sync {
    fn predict(&self, xt: &Image, t: usize) -> Result<Image>;

    /// Batched prediction; the default loops over [`predict`](Self::predict).
    fn predict_batch(&self, xs: &[Image], ts: &[usize]) -> Result<Vec<Image>> {
        xs.iter().zip(ts).map(|(x, &t)| self.predict(x, t)).collect()
    }
}

/// Predictor that always returns zero noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict(&self, xt: &Image, _t: usize) -> Result<Image> {
        Ok(Image::zeros(xt.height(), xt.width()))
    }
}

/// Predictor that knows the clean image and returns the exact noise that
/// maps it to `x_t`. Useful as a perfect-model reference.
#[derive(Debug, Clone)]
pub struct OraclePredictor<'a> {
    pub x0: &'a Image,
    pub sched: &'a VarianceSchedule,
}

impl NoisePredictor for OraclePredictor<'_> {
    fn predict(&self, xt: &Image, t: usize) -> Result<Image> {
        self.sched.check_step(t)?;
        let ab = self.sched.alpha_bar(t);
        let inv = 1.0 / (1.0 - ab).sqrt();
        xt.axpby(inv as f32, self.x0, -(ab.sqrt() * inv) as f32)
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(x0: &Image, t: usize, eps: &Image, sched: &VarianceSchedule) -> Result<Image> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    x0.axpby(ab.sqrt() as f32, eps, (1.0 - ab).sqrt() as f32)
}

/// One forward transition `x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) eps`.
pub fn q_step_sample(
    x_prev: &Image,
    t: usize,
    eps: &Image,
    sched: &VarianceSchedule,
) -> Result<Image> {
    sched.check_step(t)?;
    x_prev.axpby(sched.alpha(t).sqrt() as f32, eps, sched.beta(t).sqrt() as f32)
}

/// Mean and (isotropic) variance of `q(x_t | x0)`.
pub fn q_mean_variance(x0: &Image, t: usize, sched: &VarianceSchedule) -> Result<(Image, f64)> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    Ok((x0.scale(ab.sqrt() as f32), 1.0 - ab))
}

/// Mean and variance of the forward posterior `q(x_{t-1} | x_t, x0)`.
pub fn q_posterior(
    x0: &Image,
    xt: &Image,
    t: usize,
    sched: &VarianceSchedule,
) -> Result<(Image, f64)> {
    sched.check_step(t)?;
    ensure_same_shape(x0, xt)?;
    let mu = x0.axpby(
        sched.post_coef_x0(t) as f32,
        xt,
        sched.post_coef_xt(t) as f32,
    )?;
    Ok((mu, sched.tilde_beta(t)))
}

/// Invert [`q_sample`] given a noise estimate.
pub fn predict_x0_from_eps(
    xt: &Image,
    t: usize,
    eps_hat: &Image,
    sched: &VarianceSchedule,
) -> Result<Image> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    xt.axpby(inv as f32, eps_hat, -((1.0 - ab).sqrt() * inv) as f32)
}

/// Reverse-step mean `(x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)`.
pub fn predict_mu_from_eps(
    xt: &Image,
    t: usize,
    eps_hat: &Image,
    sched: &VarianceSchedule,
) -> Result<Image> {
    sched.check_step(t)?;
    let inv = 1.0 / sched.alpha(t).sqrt();
    let eps_coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt() * inv;
    xt.axpby(inv as f32, eps_hat, -eps_coef as f32)
}

/// KL divergence between two isotropic Gaussians, summed over components:
/// `sum_i (var1 + (mu1_i - mu2_i)^2) / (2 var2) + 0.5 ln(var2 / var1) - 0.5`.
pub fn kl_gaussian(mu1: &[f64], var1: f64, mu2: &[f64], var2: f64) -> Result<f64> {
    if mu1.len() != mu2.len() {
        return Err(Error::Contract(format!(
            "mean lengths differ: {} vs {}",
            mu1.len(),
            mu2.len()
        )));
    }
    kl_isotropic(mu1.iter().zip(mu2).map(|(a, b)| a - b), mu1.len(), var1, var2)
}

fn kl_isotropic(
    diffs: impl Iterator<Item = f64>,
    n: usize,
    var1: f64,
    var2: f64,
) -> Result<f64> {
    if !(var1 > 0.0 && var2 > 0.0) {
        return Err(Error::Domain(format!(
            "variances must be positive, got {var1} and {var2}"
        )));
    }
    let sq: f64 = diffs.map(|d| d * d).sum();
    let per_component = var1 / (2.0 * var2) + 0.5 * (var2 / var1).ln() - 0.5;
    // Clamp tiny negative roundoff of the variance-only term.
    Ok((per_component * n as f64).max(0.0) + sq / (2.0 * var2))
}

fn kl_images(mu1: &Image, var1: f64, mu2: &Image, var2: f64) -> Result<f64> {
    ensure_same_shape(mu1, mu2)?;
    kl_isotropic(
        mu1.iter().zip(mu2.iter()).map(|(&a, &b)| a as f64 - b as f64),
        mu1.len(),
        var1,
        var2,
    )
}

/// Per-term decomposition of the variational bound for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboTerms {
    /// Prior matching term `KL(q(x_T|x0) || N(0, I))`.
    pub l_t: f64,
    /// `L_{t-1}` for `t = 2..=T` (index 0 holds `t = 2`), Monte Carlo means.
    pub l_mid: Vec<f64>,
    /// Mean squared error of the `t = 1` reconstruction.
    pub l_0: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.l_t + self.l_mid.iter().sum::<f64>() + self.l_0
    }
}

/// Evaluate the bound terms for `x0` under `model` by Monte Carlo.
///
/// Each `L_{t-1}` is the full Gaussian KL between the forward posterior
/// (variance `beta~_t`) and the model step (variance `beta_t`), so a perfect
/// model leaves only the variance-ratio part.
pub fn elbo_terms<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    x0: &Image,
    model: &P,
    sched: &VarianceSchedule,
    mc_samples: usize,
    rng: &mut R,
) -> Result<ElboTerms> {
    if mc_samples < 1 {
        return Err(Error::Config("mc_samples must be at least 1".into()));
    }
    let (h, w) = x0.shape();
    let steps = sched.steps();

    let (mean_t, var_t) = q_mean_variance(x0, steps, sched)?;
    let zeros = Image::zeros(h, w);
    let l_t = kl_images(&mean_t, var_t, &zeros, 1.0)?;

    let mut l_mid = Vec::with_capacity(steps - 1);
    for t in 2..=steps {
        let mut acc = 0.0;
        for _ in 0..mc_samples {
            let eps = Image::randn(h, w, rng);
            let xt = q_sample(x0, t, &eps, sched)?;
            let (mu_post, var_post) = q_posterior(x0, &xt, t, sched)?;
            let eps_hat = model.predict(&xt, t)?;
            let mu_model = predict_mu_from_eps(&xt, t, &eps_hat, sched)?;
            acc += kl_images(&mu_post, var_post, &mu_model, sched.beta(t))?;
        }
        l_mid.push(acc / mc_samples as f64);
    }

    let mut l_0 = 0.0;
    for _ in 0..mc_samples {
        let eps = Image::randn(h, w, rng);
        let x1 = q_sample(x0, 1, &eps, sched)?;
        let eps_hat = model.predict(&x1, 1)?;
        l_0 += predict_x0_from_eps(&x1, 1, &eps_hat, sched)?.mse(x0)?;
    }
    l_0 /= mc_samples as f64;

    Ok(ElboTerms { l_t, l_mid, l_0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn q_sample_degenerate_cases() {
        let s = VarianceSchedule::oct();
        let x0 = rand_image(4, 5, 1);
        let eps = Image::randn(4, 5, &mut ChaCha8Rng::seed_from_u64(2));
        let zero = Image::zeros(4, 5);
        for t in [1, 37, 100] {
            let a = s.alpha_bar(t).sqrt() as f32;
            let b = (1.0 - s.alpha_bar(t)).sqrt() as f32;
            assert_eq!(q_sample(&x0, t, &zero, &s).unwrap(), x0.scale(a));
            assert_eq!(q_sample(&zero, t, &eps, &s).unwrap(), eps.scale(b));
        }
        assert!(q_sample(&x0, 0, &zero, &s).is_err());
        assert!(q_sample(&x0, 101, &zero, &s).is_err());
        assert!(matches!(
            q_sample(&x0, 3, &Image::zeros(5, 4), &s),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn q_mean_variance_cases() {
        let s = VarianceSchedule::oct();
        let (_, v) = q_mean_variance(&Image::zeros(2, 2), 1, &s).unwrap();
        assert!((v - 1e-4).abs() < 1e-15);
        let (m, _) = q_mean_variance(&Image::zeros(2, 2), 50, &s).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
        // sqrt(prod(1 - beta_t)) from a 50-digit evaluation.
        let (m, v) = q_mean_variance(&Image::filled(3, 3, 1.0), 100, &s).unwrap();
        assert!(m.iter().all(|&x| (x as f64 - 0.858_294_948_326_462_5).abs() < 1e-6));
        assert!((v - 0.263_329_781_677_275_07).abs() < 1e-12);
        assert!(matches!(
            q_mean_variance(&Image::zeros(1, 1), 0, &s),
            Err(Error::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn posterior_at_step_one_is_deterministic() {
        let s = VarianceSchedule::oct();
        let (mu, var) = q_posterior(&rand_image(3, 3, 4), &rand_image(3, 3, 5), 1, &s).unwrap();
        assert_eq!(var, 0.0);
        assert!(mu.is_finite());
    }

    #[test]
    fn x0_roundtrip_small_cases() {
        let s = VarianceSchedule::oct();
        let x0 = rand_image(3, 3, 7);
        let zero = Image::zeros(3, 3);
        for t in [1, 50, 100] {
            let xt = x0.scale(s.alpha_bar(t).sqrt() as f32);
            assert!(predict_x0_from_eps(&xt, t, &zero, &s).unwrap().max_abs_diff(&x0) < 1e-6);
            let eps = rand_image(3, 3, 8);
            let xt = eps.scale((1.0 - s.alpha_bar(t)).sqrt() as f32);
            let back = predict_x0_from_eps(&xt, t, &eps, &s).unwrap();
            assert!(back.iter().all(|v| v.abs() < 1e-5));
        }
    }

    #[test]
    fn mu_with_zero_eps() {
        let s = VarianceSchedule::oct();
        let xt = rand_image(4, 4, 9);
        let mu = predict_mu_from_eps(&xt, 30, &Image::zeros(4, 4), &s).unwrap();
        assert_eq!(mu, xt.scale((1.0 / s.alpha(30).sqrt()) as f32));
    }

    #[test]
    fn mu_scalar_hand_value() {
        let s = VarianceSchedule::oct();
        let one = Image::filled(1, 1, 1.0);
        let mu = predict_mu_from_eps(&one, 1, &one, &s).unwrap();
        // (1 - 1e-4 / sqrt(1e-4)) / sqrt(1 - 1e-4)
        assert!((mu.get(0, 0) as f64 - 0.990_049_503_712_809_4).abs() < 1e-7);
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(kl_gaussian(&[0.3, -1.0], 0.7, &[0.3, -1.0], 0.7).unwrap(), 0.0);
        assert!((kl_gaussian(&[0.0], 1.0, &[1.0], 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            kl_gaussian(&[0.0], 0.0, &[0.0], 1.0),
            Err(Error::Domain(_))
        ));
        assert!(kl_gaussian(&[0.0], 1.0, &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn elbo_prior_term_closed_form() {
        let s = VarianceSchedule::oct();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let terms = elbo_terms(&Image::filled(8, 8, 1.0), &ZeroPredictor, &s, 1, &mut rng).unwrap();
        // 64 * -0.5 ln(1 - abar_100), evaluated at 50 digits. The mean passes
        // through an f32 image, which bounds the agreement to ~1e-6.
        assert!((terms.l_t - 42.699_139_506_611_876).abs() < 1e-5, "{}", terms.l_t);
        assert_eq!(terms.l_mid.len(), 99);

        let terms = elbo_terms(&Image::zeros(2, 2), &ZeroPredictor, &s, 1, &mut rng).unwrap();
        let v = 1.0 - s.alpha_bar(100);
        let expected = kl_gaussian(&[0.0; 4], v, &[0.0; 4], 1.0).unwrap();
        assert!((terms.l_t - expected).abs() < 1e-12);
        assert!(elbo_terms(&Image::zeros(2, 2), &ZeroPredictor, &s, 0, &mut rng).is_err());
    }

    #[test]
    fn elbo_perfect_model_leaves_variance_constant() {
        let s = VarianceSchedule::linear(10, 1e-3, 2e-2).unwrap();
        let x0 = rand_image(4, 4, 11);
        let oracle = OraclePredictor { x0: &x0, sched: &s };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let terms = elbo_terms(&x0, &oracle, &s, 3, &mut rng).unwrap();
        for (i, l) in terms.l_mid.iter().enumerate() {
            let t = i + 2;
            let (vq, vp) = (s.tilde_beta(t), s.beta(t));
            let constant = 16.0 * (vq / (2.0 * vp) + 0.5 * (vp / vq).ln() - 0.5);
            // Means agree up to single-precision roundoff divided by beta_t.
            assert!((l - constant).abs() < 1e-3 * constant.max(1.0), "t={t}: {l} vs {constant}");
        }
        assert!(terms.l_0 < 1e-10);
    }
}
