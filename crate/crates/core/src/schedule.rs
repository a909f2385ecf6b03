//! Variance schedule and its precomputed derived quantities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters that fully determine a [`VarianceSchedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    /// 100 steps rising linearly from 1e-4 to 6e-3.
    pub const OCT: ScheduleSpec = ScheduleSpec {
        steps: 100,
        beta_start: 1e-4,
        beta_end: 6e-3,
    };

    pub fn build(&self) -> Result<VarianceSchedule> {
        VarianceSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Noise schedule `beta_1..beta_T` with every derived array precomputed in
/// double precision. All accessors take the 1-based step `t`.
///
/// The convention `alpha_bar_0 = 1` makes the step-1 posterior variance zero.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    tilde_betas: Vec<f64>,
    post_coef_x0: Vec<f64>,
    post_coef_xt: Vec<f64>,
}

impl VarianceSchedule {
    /// Linear schedule with inclusive endpoints over `steps` points.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let span = beta_end - beta_start;
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if i == steps - 1 {
                    beta_end
                } else {
                    beta_start + span * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(
            ScheduleSpec {
                steps,
                beta_start,
                beta_end,
            },
            betas,
        ))
    }

    /// The schedule used for OCT b-scans: T = 100, 1e-4 to 6e-3.
    pub fn oct() -> Self {
        ScheduleSpec::OCT.build().expect("valid preset")
    }

    fn from_betas(spec: ScheduleSpec, betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0f64, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let prev = |i: usize| if i == 0 { 1.0 } else { alpha_bars[i - 1] };
        let n = betas.len();
        let tilde_betas = (0..n)
            .map(|i| (1.0 - prev(i)) / (1.0 - alpha_bars[i]) * betas[i])
            .collect();
        let post_coef_x0 = (0..n)
            .map(|i| prev(i).sqrt() * betas[i] / (1.0 - alpha_bars[i]))
            .collect();
        let post_coef_xt = (0..n)
            .map(|i| alphas[i].sqrt() * (1.0 - prev(i)) / (1.0 - alpha_bars[i]))
            .collect();
        VarianceSchedule {
            spec,
            betas,
            alphas,
            alpha_bars,
            tilde_betas,
            post_coef_x0,
            post_coef_xt,
        }
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                lo: 1,
                hi: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// `alpha_bar_{t-1}`, equal to 1 at `t = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    /// Posterior variance `beta~_t`.
    pub fn tilde_beta(&self, t: usize) -> f64 {
        self.tilde_betas[t - 1]
    }

    pub fn post_coef_x0(&self, t: usize) -> f64 {
        self.post_coef_x0[t - 1]
    }

    pub fn post_coef_xt(&self, t: usize) -> f64 {
        self.post_coef_xt[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn tilde_betas(&self) -> &[f64] {
        &self.tilde_betas
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oct_endpoints() {
        let s = VarianceSchedule::oct();
        assert_eq!(s.steps(), 100);
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(100), 6e-3);
        assert!(s.betas().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn constant_two_step() {
        let s = VarianceSchedule::linear(2, 0.1, 0.1).unwrap();
        assert_eq!(s.betas(), &[0.1, 0.1]);
        assert!((s.alpha_bar(2) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(VarianceSchedule::linear(1, 0.1, 0.1).is_err());
        assert!(VarianceSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(VarianceSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(VarianceSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn derived_arrays() {
        let s = VarianceSchedule::oct();
        assert_eq!(s.tilde_beta(1), 0.0);
        for t in 1..=s.steps() {
            assert!(s.tilde_beta(t) <= s.beta(t));
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
        let last = s.alpha_bar(100);
        assert!(last > 0.0 && last < 1.0);
        // Mean coefficient identity: applied to x0 = 1 and the noiseless
        // x_t = sqrt(abar_t), the posterior mean is sqrt(abar_{t-1}).
        for t in 1..=s.steps() {
            let mu = s.post_coef_x0(t) + s.post_coef_xt(t) * s.alpha_bar(t).sqrt();
            assert!((mu - s.alpha_bar_prev(t).sqrt()).abs() < 1e-12, "t={t}");
        }
    }
}
