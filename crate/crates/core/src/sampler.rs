//! Partial reverse chain: a noisy scan is taken as `x_{t_start}` and walked
//! back to `x_0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{predict_mu_from_eps, NoisePredictor};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::schedule::VarianceSchedule;

/// Slack allowed outside `[-1, 1]` on denoiser input.
pub const INPUT_TOLERANCE: f32 = 1e-3;

/// One reverse step `mu_theta(x_t, t) + sqrt(beta_t) z`; the noise term is
/// skipped when `add_noise` is false or `t == 1`.
pub fn p_sample_step<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    xt: &Image,
    t: usize,
    model: &P,
    sched: &VarianceSchedule,
    rng: &mut R,
    add_noise: bool,
) -> Result<Image> {
    sched.check_step(t)?;
    let eps = model.predict(xt, t)?;
    let mu = predict_mu_from_eps(xt, t, &eps, sched)?;
    if !add_noise || t == 1 {
        return Ok(mu);
    }
    let z = Image::randn(xt.height(), xt.width(), rng);
    mu.axpby(1.0, &z, sched.beta(t).sqrt() as f32)
}

/// Run `p_sample_step` for `t_start, ..., 1` and clamp to `[-1, 1]`.
/// `t_start == 0` returns the input unchanged.
pub fn denoise<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    x_noisy: &Image,
    t_start: usize,
    model: &P,
    sched: &VarianceSchedule,
    rng: &mut R,
) -> Result<Image> {
    denoise_with(x_noisy, t_start, model, sched, rng, true)
}

/// [`denoise`] with control over the stochastic term.
pub fn denoise_with<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    x_noisy: &Image,
    t_start: usize,
    model: &P,
    sched: &VarianceSchedule,
    rng: &mut R,
    add_noise: bool,
) -> Result<Image> {
    if !x_noisy.is_normalized(INPUT_TOLERANCE) {
        let (lo, hi) = x_noisy.min_max();
        return Err(Error::Contract(format!(
            "denoiser input must lie in [-1, 1], got [{lo}, {hi}]"
        )));
    }
    if t_start == 0 {
        return Ok(x_noisy.clone());
    }
    sched.check_step(t_start)?;
    let mut x = x_noisy.clone();
    for t in (1..=t_start).rev() {
        x = p_sample_step(&x, t, model, sched, rng, add_noise)?;
    }
    if !x.is_finite() {
        return Err(Error::Domain(format!(
            "reverse chain from t = {t_start} produced non-finite pixels"
        )));
    }
    Ok(x.clamp(-1.0, 1.0))
}

/// The RNG used for starting step `t` of a sweep seeded with `seed`.
pub fn sweep_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    rng
}

/// Denoise `x_noisy` once per starting step. Each `t` draws from its own
/// stream derived from `(seed, t)`, so results do not depend on the order
/// of `t_list`.
pub fn sweep_t<P: NoisePredictor + ?Sized>(
    x_noisy: &Image,
    t_list: &[usize],
    model: &P,
    sched: &VarianceSchedule,
    seed: u64,
) -> Result<Vec<(usize, Image)>> {
    if t_list.is_empty() {
        return Err(Error::Config("sweep needs at least one starting step".into()));
    }
    for &t in t_list {
        if t != 0 {
            sched.check_step(t)?;
        }
    }
    crate::par::map_slice(t_list, |&t| {
        denoise(x_noisy, t, model, sched, &mut sweep_rng(seed, t)).map(|img| (t, img))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{q_posterior, q_sample, OraclePredictor, ZeroPredictor};

    fn sched() -> VarianceSchedule {
        VarianceSchedule::oct()
    }

    fn input() -> Image {
        Image::from_fn(8, 8, |(r, c)| ((r * 8 + c) as f32 / 64.0) - 0.5)
    }

    #[test]
    fn zero_model_step() {
        let s = sched();
        let x = input();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = p_sample_step(&x, 10, &ZeroPredictor, &s, &mut rng, false).unwrap();
        let k = 1.0 / s.alpha(10).sqrt();
        assert!(y.max_abs_diff(&x.scale(k as f32)) < 1e-6);
        let a = p_sample_step(&x, 1, &ZeroPredictor, &s, &mut rng, true).unwrap();
        let b = p_sample_step(&x, 1, &ZeroPredictor, &s, &mut rng, false).unwrap();
        assert_eq!(a, b);
        assert!(p_sample_step(&x, 0, &ZeroPredictor, &s, &mut rng, false).is_err());
        assert!(p_sample_step(&x, 101, &ZeroPredictor, &s, &mut rng, false).is_err());
    }

    #[test]
    fn seeded_step_deterministic() {
        let s = sched();
        let x = input();
        let run = || p_sample_step(&x, 30, &ZeroPredictor, &s, &mut ChaCha8Rng::seed_from_u64(4), true).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_model_chain() {
        let s = sched();
        let x = input().scale(0.5);
        let k = 7;
        let y = denoise_with(&x, k, &ZeroPredictor, &s, &mut ChaCha8Rng::seed_from_u64(0), false).unwrap();
        let factor: f64 = (1..=k).map(|t| 1.0 / s.alpha(t).sqrt()).product();
        assert!(y.max_abs_diff(&x.scale(factor as f32)) < 1e-6);
    }

    #[test]
    fn identity_and_contract() {
        let s = sched();
        let x = input();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(denoise(&x, 0, &ZeroPredictor, &s, &mut rng).unwrap(), x);
        let bad = x.map(|v| v * 4.0);
        assert!(matches!(denoise(&bad, 5, &ZeroPredictor, &s, &mut rng), Err(Error::Contract(_))));
        assert!(denoise(&x, 101, &ZeroPredictor, &s, &mut rng).is_err());
        let out = denoise(&x, 60, &ZeroPredictor, &s, &mut rng).unwrap();
        assert!(out.is_normalized(0.0));
    }

    #[test]
    fn sweep_order_independent() {
        let s = sched();
        let x = input();
        let a = sweep_t(&x, &[20, 41, 5], &ZeroPredictor, &s, 9).unwrap();
        let b = sweep_t(&x, &[5, 20, 41], &ZeroPredictor, &s, 9).unwrap();
        for (t, img) in &a {
            let other = &b.iter().find(|(u, _)| u == t).unwrap().1;
            assert_eq!(img, other);
        }
        let zero = sweep_t(&x, &[0], &ZeroPredictor, &s, 1).unwrap();
        assert_eq!(zero, vec![(0, x.clone())]);
        assert!(sweep_t(&x, &[], &ZeroPredictor, &s, 1).is_err());
    }

    #[test]
    fn oracle_step_lands_near_posterior_mean() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x0 = Image::from_fn(32, 32, |(r, c)| ((r as f32 * 0.3).sin() * (c as f32 * 0.2).cos()) * 0.8);
        // The step injects variance beta_t, which exceeds the posterior's
        // tilde_beta_t; near t = 1 the gap makes a 3-sigma band too narrow,
        // so the tail check starts once the two are within 10%.
        for t in [20, 40, 90] {
            let eps = Image::randn(32, 32, &mut rng);
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let oracle = OraclePredictor { x0: &x0, sched: &s };
            let step = p_sample_step(&xt, t, &oracle, &s, &mut rng, true).unwrap();
            let (mu, var) = q_posterior(&x0, &xt, t, &s).unwrap();
            let bound = 3.0 * var.sqrt() as f32;
            let inside = step.iter().zip(mu.iter()).filter(|(a, b)| (*a - *b).abs() <= bound).count();
            assert!(inside as f64 / step.len() as f64 >= 0.99, "t = {t}: {inside}");
        }
        for t in [2, 20, 90] {
            let eps = Image::randn(32, 32, &mut rng);
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let oracle = OraclePredictor { x0: &x0, sched: &s };
            let mean = p_sample_step(&xt, t, &oracle, &s, &mut rng, false).unwrap();
            let (mu, _) = q_posterior(&x0, &xt, t, &s).unwrap();
            assert!(mean.max_abs_diff(&mu) < 1e-4, "t = {t}");
        }
    }
}
