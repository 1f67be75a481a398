//! Noise schedule tables and DDIM index arithmetic.
//!
//! Timesteps are 1-based (`1..=T`); index 0 denotes the clean sample, with
//! `alpha_bar(0) = 1`.

use crate::error::{config_err, Result};
use serde::{Deserialize, Serialize};

/// Linear-β noise schedule over `T` diffusion steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Serializable description of a [`Schedule`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        Schedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl Schedule {
    /// β interpolated linearly from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(config_err!("schedule needs at least 2 steps, got {steps}"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(config_err!(
                "beta endpoints must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            ));
        }
        let denom = (steps - 1) as f64;
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / denom)
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Schedule {
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product ᾱ_t; `alpha_bar(0)` is 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(config_err!("timestep {t} outside [1, {}]", self.steps()));
        }
        Ok(())
    }
}

/// A DDIM sub-sequence of DDPM timesteps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DdimPlan {
    total_steps: usize,
    steps: Vec<usize>,
}

impl DdimPlan {
    /// `d(i) = (T/D)·(i − 1) + 1` for `i = 1..=D`. Requires `D | T`.
    pub fn new(ddim_steps: usize, total_steps: usize) -> Result<Self> {
        if ddim_steps == 0 || ddim_steps > total_steps {
            return Err(config_err!(
                "DDIM step count {ddim_steps} must lie in [1, {total_steps}]"
            ));
        }
        if total_steps % ddim_steps != 0 {
            return Err(config_err!(
                "DDIM step count {ddim_steps} does not divide T = {total_steps}"
            ));
        }
        let stride = total_steps / ddim_steps;
        let steps = (0..ddim_steps).map(|i| stride * i + 1).collect();
        Ok(DdimPlan { total_steps, steps })
    }

    /// `D`.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// All DDPM indices in ascending order.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    /// `d(i)` with 1-based `i`; `d(0)` is 0, the clean endpoint.
    pub fn step(&self, i: usize) -> usize {
        if i == 0 {
            0
        } else {
            self.steps[i - 1]
        }
    }

    /// Maps a noise level τ to `(t_noi, k)` where `k = round(τ·D)` clamped to
    /// `[1, D]` (halves round up) and `t_noi = d(k)`.
    pub fn noise_level_to_step(&self, tau: f64) -> Result<NoiseLevel> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(config_err!("noise level tau must lie in (0, 1], got {tau}"));
        }
        let d = self.len();
        let k = ((tau * d as f64) + 0.5).floor() as usize;
        let k = k.clamp(1, d);
        Ok(NoiseLevel {
            t_noise: self.step(k),
            start_index: k,
        })
    }
}

/// Result of [`DdimPlan::noise_level_to_step`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseLevel {
    /// DDPM step the data is corrupted to.
    pub t_noise: usize,
    /// Sub-sequence index `k`; the edit runs `k` reverse steps.
    pub start_index: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use proptest::prelude::*;

    #[test]
    fn linear_endpoints() {
        let s = Schedule::linear(1000, 1e-4, 2e-2).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 2e-2);
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn alpha_bar_matches_extended_precision_product() {
        // Independent product: compensated (double-double) accumulation.
        let s = Schedule::linear(1000, 1e-4, 2e-2).unwrap();
        let (mut hi, mut lo) = (1.0f64, 0.0f64);
        for i in 0..1000 {
            let beta = 1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0;
            let a = 1.0 - beta;
            let p = hi * a;
            let err = hi.mul_add(a, -p);
            let q = lo * a + err;
            hi = p + q;
            lo = q - (hi - p);
        }
        let reference = hi + lo;
        let rel = (s.alpha_bar(1000) - reference).abs() / reference;
        assert!(rel < 1e-12, "{rel}");
        assert!(s.alpha_bar(1000) > 0.0 && s.alpha_bar(1000) < s.alpha_bar(1));
    }

    #[test]
    fn schedule_invariants() {
        let s = Schedule::linear(1000, 1e-4, 2e-2).unwrap();
        for t in 1..=1000 {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
            assert!(((s.alpha_bar(t) / s.alpha_bar(t - 1)) - s.alpha(t)).abs() <= 1e-15);
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }

    #[test]
    fn bad_schedules() {
        assert!(matches!(Schedule::linear(1, 1e-4, 2e-2), Err(Error::Config(_))));
        assert!(matches!(Schedule::linear(10, 0.0, 2e-2), Err(Error::Config(_))));
        assert!(matches!(Schedule::linear(10, 0.3, 0.2), Err(Error::Config(_))));
        assert!(matches!(Schedule::linear(10, 0.1, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn ddim_20_of_1000() {
        let p = DdimPlan::new(20, 1000).unwrap();
        assert_eq!(&p.steps()[..3], &[1, 51, 101]);
        assert_eq!(&p.steps()[18..], &[901, 951]);
        assert_eq!(p.step(2), 51);
    }

    #[test]
    fn ddim_full_and_50() {
        let p = DdimPlan::new(1000, 1000).unwrap();
        assert!(p.steps().iter().copied().eq(1..=1000));
        let p = DdimPlan::new(50, 1000).unwrap();
        assert_eq!(p.step(2), 21);
        assert_eq!(p.step(50), 981);
        assert!(matches!(DdimPlan::new(30, 1000), Err(Error::Config(_))));
    }

    #[test]
    fn noise_levels() {
        let p = DdimPlan::new(20, 1000).unwrap();
        let n = p.noise_level_to_step(0.6).unwrap();
        assert_eq!((n.t_noise, n.start_index), (551, 12));
        assert_eq!(p.noise_level_to_step(1.0).unwrap().t_noise, 951);
        let n = p.noise_level_to_step(0.05).unwrap();
        assert_eq!((n.t_noise, n.start_index), (1, 1));
        assert!(p.noise_level_to_step(0.0).is_err());
        assert!(p.noise_level_to_step(1.01).is_err());
        assert!(p.noise_level_to_step(f64::NAN).is_err());
    }

    #[test]
    fn integral_tau_hits_each_step() {
        for d in [1, 4, 10, 20, 50] {
            let p = DdimPlan::new(d, 1000).unwrap();
            for i in 1..=d {
                let n = p.noise_level_to_step(i as f64 / d as f64).unwrap();
                assert_eq!(n.start_index, i);
                assert_eq!(n.t_noise, p.steps()[i - 1]);
            }
        }
    }

    proptest! {
        #[test]
        fn t_noise_monotone_in_tau(a in 0.001f64..=1.0, b in 0.001f64..=1.0) {
            let p = DdimPlan::new(20, 1000).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(p.noise_level_to_step(lo).unwrap().t_noise
                <= p.noise_level_to_step(hi).unwrap().t_noise);
        }
    }
}
