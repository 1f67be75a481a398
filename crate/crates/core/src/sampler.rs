//! Forward corruption, DDIM reverse steps, classifier-free guidance, full
//! generation and partial-chain editing.

pub use crate::latent::{LatentVideo, VideoShape};

use crate::denoiser::{Bound, Condition, Denoiser, NoisePredictor};
use crate::error::{contract_err, shape_err, Result};
use crate::latent::{stack_rows, unstack_rows};
use crate::schedule::{DdimPlan, Schedule};
use crate::tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub enabled: bool,
    pub weight: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            enabled: true,
            weight: 5.0,
        }
    }
}

impl GuidanceConfig {
    pub fn off() -> Self {
        GuidanceConfig {
            enabled: false,
            weight: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.weight.is_finite() || self.weight < 0.0 {
            return Err(crate::error::config_err!(
                "guidance weight must be finite and non-negative, got {}",
                self.weight
            ));
        }
        Ok(())
    }

    /// Denoiser evaluations per guided prediction.
    pub fn evals_per_step(&self) -> u64 {
        if self.enabled {
            2
        } else {
            1
        }
    }
}

/// `z_t = √ᾱ_t·z + √(1−ᾱ_t)·ε`.
pub fn q_sample(
    z: &LatentVideo,
    t: usize,
    eps: &LatentVideo,
    sched: &Schedule,
) -> Result<LatentVideo> {
    sched.check_step(t)?;
    LatentVideo::new(q_sample_tensor(z.tensor(), t, eps.tensor(), sched)?)
}

pub(crate) fn q_sample_tensor(z: &Tensor, t: usize, eps: &Tensor, sched: &Schedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z.zip_map(eps, |x, e| a * x + b * e)
}

/// Scalar coefficients of one reverse step from `t` to `t_prev`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DdimCoeffs {
    pub sqrt_alpha_bar: f64,
    pub sqrt_one_minus_alpha_bar: f64,
    pub sqrt_alpha_bar_prev: f64,
    /// Coefficient of ε̂ in the mean of `z_prev`.
    pub direction: f64,
    /// Std of the injected noise.
    pub sigma: f64,
}

impl DdimCoeffs {
    /// With `eta > 0` the variance is `σ² = η²·(1−ᾱ_prev)/(1−ᾱ_t)·(1−ᾱ_t/ᾱ_prev)`.
    /// That expression vanishes on the step into `t_prev = 0`; there the
    /// step uses `σ = η·√β_t` instead so every stochastic transition has a
    /// proper density.
    pub fn new(t: usize, t_prev: usize, sched: &Schedule, eta: f64) -> Result<Self> {
        if t_prev >= t {
            return Err(contract_err!("reverse step needs t_prev < t, got {t_prev} >= {t}"));
        }
        if !(eta >= 0.0) {
            return Err(contract_err!("eta must be non-negative, got {eta}"));
        }
        sched.check_step(t)?;
        let ab = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(t_prev);
        let mut var = if eta > 0.0 {
            eta * eta * (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)
        } else {
            0.0
        };
        if eta > 0.0 && t_prev == 0 {
            var = eta * eta * sched.beta(t);
        }
        Ok(DdimCoeffs {
            sqrt_alpha_bar: ab.sqrt(),
            sqrt_one_minus_alpha_bar: (1.0 - ab).sqrt(),
            sqrt_alpha_bar_prev: ab_prev.sqrt(),
            direction: (1.0 - ab_prev - var).max(0.0).sqrt(),
            sigma: var.sqrt(),
        })
    }

    pub fn x0(&self, z_t: f64, eps: f64) -> f64 {
        (z_t - self.sqrt_one_minus_alpha_bar * eps) / self.sqrt_alpha_bar
    }

    pub fn mean(&self, z_t: f64, eps: f64) -> f64 {
        self.sqrt_alpha_bar_prev * self.x0(z_t, eps) + self.direction * eps
    }
}

/// Output of one reverse step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub prev: LatentVideo,
    pub x0: LatentVideo,
}

/// One DDIM step. `rng` is required when `eta > 0`.
pub fn ddim_step(
    z_t: &LatentVideo,
    eps_hat: &LatentVideo,
    t: usize,
    t_prev: usize,
    sched: &Schedule,
    eta: f64,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<StepOutput> {
    let c = DdimCoeffs::new(t, t_prev, sched, eta)?;
    let (mean, x0) = step_mean(z_t.tensor(), eps_hat.tensor(), &c)?;
    let prev = if c.sigma > 0.0 {
        let rng = rng.ok_or_else(|| contract_err!("stochastic step (eta = {eta}) needs an rng"))?;
        add_noise(&mean, c.sigma, rng)
    } else {
        mean
    };
    Ok(StepOutput {
        prev: LatentVideo::new(prev)?,
        x0: LatentVideo::new(x0)?,
    })
}

/// `(mean of z_prev, x̂₀)` for any tensor layout.
pub(crate) fn step_mean(z_t: &Tensor, eps: &Tensor, c: &DdimCoeffs) -> Result<(Tensor, Tensor)> {
    let x0 = z_t.zip_map(eps, |z, e| c.x0(z, e))?;
    let mean = x0.zip_map(eps, |x, e| c.sqrt_alpha_bar_prev * x + c.direction * e)?;
    Ok((mean, x0))
}

fn add_noise(mean: &Tensor, sigma: f64, rng: &mut dyn rand::RngCore) -> Tensor {
    let noise = Tensor::randn(mean.shape(), rng);
    let mut out = mean.clone();
    out.axpy(sigma, &noise).expect("same shape");
    out
}

/// The same step recorded on a tape; returns `(mean of z_prev, x̂₀)`.
pub fn ddim_step_on_tape(tape: &mut Tape, z_t: Var, eps: Var, c: &DdimCoeffs) -> Result<(Var, Var)> {
    let a = tape.scale(z_t, 1.0 / c.sqrt_alpha_bar)?;
    let b = tape.scale(eps, -c.sqrt_one_minus_alpha_bar / c.sqrt_alpha_bar)?;
    let x0 = tape.add(a, b)?;
    let m0 = tape.scale(x0, c.sqrt_alpha_bar_prev)?;
    let m1 = tape.scale(eps, c.direction)?;
    let mean = tape.add(m0, m1)?;
    Ok((mean, x0))
}

/// `ε_u + w·(ε_c − ε_u)`, or the conditional prediction when disabled.
pub fn guided_eps<P: NoisePredictor + ?Sized>(
    model: &P,
    z_t: &LatentVideo,
    c: Condition,
    t: usize,
    g: &GuidanceConfig,
) -> Result<LatentVideo> {
    let out = guided_rows(model, &z_t.as_matrix(), &[c], t, g)?;
    LatentVideo::from_matrix(out, model.video_shape())
}

/// Guided prediction on a `(B·F) × P` block with a shared timestep.
pub fn guided_rows<P: NoisePredictor + ?Sized>(
    model: &P,
    z: &Tensor,
    conds: &[Condition],
    t: usize,
    g: &GuidanceConfig,
) -> Result<Tensor> {
    let ts = vec![t; conds.len()];
    let cond = model.predict_rows(z, conds, &ts)?;
    if !g.enabled {
        return Ok(cond);
    }
    let nulls = vec![Condition::NULL; conds.len()];
    let uncond = model.predict_rows(z, &nulls, &ts)?;
    let w = g.weight;
    uncond.zip_map(&cond, |u, c| u + w * (c - u))
}

/// Guided prediction recorded on a tape.
pub fn guided_on_tape(
    model: &Denoiser<'_>,
    tape: &mut Tape,
    bound: &Bound,
    z: Var,
    conds: &[Condition],
    t: usize,
    g: &GuidanceConfig,
) -> Result<Var> {
    let ts = vec![t; conds.len()];
    let cond = model.forward(tape, bound, z, conds, &ts)?;
    if !g.enabled {
        return Ok(cond);
    }
    let nulls = vec![Condition::NULL; conds.len()];
    let uncond = model.forward(tape, bound, z, &nulls, &ts)?;
    let diff = tape.sub(cond, uncond)?;
    let diff = tape.scale(diff, g.weight)?;
    tape.add(uncond, diff)
}

/// Runs reverse steps from sub-sequence index `from` down to index `to`
/// (`0` is the clean endpoint), i.e. `from − to` guided evaluations.
/// With `eta > 0` noise is drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn denoise_rows<P: NoisePredictor + ?Sized>(
    model: &P,
    mut z: Tensor,
    conds: &[Condition],
    sched: &Schedule,
    plan: &DdimPlan,
    from: usize,
    to: usize,
    g: &GuidanceConfig,
    eta: f64,
    mut rng: Option<&mut dyn rand::RngCore>,
) -> Result<Tensor> {
    if from > plan.len() || to > from {
        return Err(contract_err!("chain range {from} -> {to} invalid for D = {}", plan.len()));
    }
    check_plan(plan, sched)?;
    for i in (to + 1..=from).rev() {
        let (t, t_prev) = (plan.step(i), plan.step(i - 1));
        let eps = guided_rows(model, &z, conds, t, g)?;
        let c = DdimCoeffs::new(t, t_prev, sched, eta)?;
        let (mean, _) = step_mean(&z, &eps, &c)?;
        z = if c.sigma > 0.0 {
            let r = rng
                .as_deref_mut()
                .ok_or_else(|| contract_err!("stochastic chain needs an rng"))?;
            add_noise(&mean, c.sigma, r)
        } else {
            mean
        };
    }
    Ok(z)
}

pub(crate) fn check_plan(plan: &DdimPlan, sched: &Schedule) -> Result<()> {
    if plan.total_steps() != sched.steps() {
        return Err(crate::error::config_err!(
            "plan built for T = {} used with a T = {} schedule",
            plan.total_steps(),
            sched.steps()
        ));
    }
    Ok(())
}

/// Generates one video from seeded Gaussian noise at `t = d(D)` with `D`
/// deterministic reverse steps.
pub fn sample_full<P: NoisePredictor + ?Sized>(
    model: &P,
    c: Condition,
    sched: &Schedule,
    plan: &DdimPlan,
    g: &GuidanceConfig,
    seed: u64,
) -> Result<LatentVideo> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = model.video_shape();
    let z = LatentVideo::randn(shape, &mut rng).as_matrix();
    let out = denoise_rows(model, z, &[c], sched, plan, plan.len(), 0, g, 0.0, None)?;
    LatentVideo::from_matrix(out, shape)
}

/// Batched [`sample_full`]; `seeds[i]` drives video `i`.
pub fn sample_full_batch<P: NoisePredictor + ?Sized>(
    model: &P,
    conds: &[Condition],
    sched: &Schedule,
    plan: &DdimPlan,
    g: &GuidanceConfig,
    seeds: &[u64],
) -> Result<Vec<LatentVideo>> {
    if conds.len() != seeds.len() {
        return Err(shape_err!("{} conditions vs {} seeds", conds.len(), seeds.len()));
    }
    let shape = model.video_shape();
    let noise: Vec<LatentVideo> = seeds
        .iter()
        .map(|&s| LatentVideo::randn(shape, &mut ChaCha8Rng::seed_from_u64(s)))
        .collect();
    let out = denoise_rows(model, stack_rows(&noise)?, conds, sched, plan, plan.len(), 0, g, 0.0, None)?;
    unstack_rows(&out, shape)
}

/// Corrupts `z` to `t_noi = d(k)` with seeded noise, then runs the `k`
/// remaining reverse steps to a clean sample.
#[allow(clippy::too_many_arguments)]
pub fn edit_sample<P: NoisePredictor + ?Sized>(
    model: &P,
    z: &LatentVideo,
    c: Condition,
    tau: f64,
    sched: &Schedule,
    plan: &DdimPlan,
    g: &GuidanceConfig,
    seed: u64,
) -> Result<LatentVideo> {
    let level = plan.noise_level_to_step(tau)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = LatentVideo::randn(z.shape(), &mut rng);
    let z_t = q_sample(z, level.t_noise, &eps, sched)?;
    let out = denoise_rows(
        model,
        z_t.as_matrix(),
        &[c],
        sched,
        plan,
        level.start_index,
        0,
        g,
        0.0,
        None,
    )?;
    LatentVideo::from_matrix(out, z.shape())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserConfig, DenoiserParams};

    fn sched() -> Schedule {
        Schedule::linear(1000, 1e-4, 2e-2).unwrap()
    }

    fn vid(shape: [usize; 4], seed: u64) -> LatentVideo {
        LatentVideo::new(Tensor::randn(&shape, &mut ChaCha8Rng::seed_from_u64(seed))).unwrap()
    }

    #[test]
    fn q_sample_branches() {
        let s = sched();
        let z = vid([2, 2, 2, 1], 1);
        let zero = LatentVideo::zeros(z.shape());
        let out = q_sample(&z, 300, &zero, &s).unwrap();
        let expect = z.tensor().scale(s.alpha_bar(300).sqrt());
        assert_eq!(out.tensor(), &expect);
        let eps = vid([2, 2, 2, 1], 2);
        let out = q_sample(&zero, 300, &eps, &s).unwrap();
        assert_eq!(out.tensor(), &eps.tensor().scale((1.0 - s.alpha_bar(300)).sqrt()));
        assert!(q_sample(&z, 300, &vid([1, 2, 2, 1], 3), &s).is_err());
        assert!(q_sample(&z, 0, &eps, &s).is_err());
    }

    #[test]
    fn terminal_step_returns_x0() {
        let s = sched();
        let z = vid([2, 2, 2, 1], 4);
        let e = vid([2, 2, 2, 1], 5);
        let out = ddim_step(&z, &e, 51, 0, &s, 0.0, None).unwrap();
        assert_eq!(out.prev, out.x0);
    }

    #[test]
    fn perfect_oracle_inverts_corruption() {
        let s = sched();
        let z = vid([3, 2, 2, 1], 6);
        let e = vid([3, 2, 2, 1], 7);
        for t in [1, 51, 551, 951, 1000] {
            let z_t = q_sample(&z, t, &e, &s).unwrap();
            let out = ddim_step(&z_t, &e, t, 0, &s, 0.0, None).unwrap();
            assert!(out.x0.tensor().max_abs_diff(z.tensor()).unwrap() < 1e-10, "t = {t}");
        }
    }

    #[test]
    fn step_contracts() {
        let s = sched();
        let z = vid([1, 1, 1, 1], 8);
        assert!(matches!(
            ddim_step(&z, &z, 51, 51, &s, 0.0, None),
            Err(crate::Error::Contract(_))
        ));
        assert!(matches!(
            ddim_step(&z, &z, 101, 51, &s, 1.0, None),
            Err(crate::Error::Contract(_))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ddim_step(&z, &z, 101, 51, &s, 1.0, Some(&mut rng)).is_ok());
    }

    #[test]
    fn stochastic_terminal_step_has_positive_sigma() {
        let s = sched();
        let c = DdimCoeffs::new(1, 0, &s, 1.0).unwrap();
        assert!((c.sigma - s.beta(1).sqrt()).abs() < 1e-15);
        assert_eq!(c.direction, 0.0);
        let c = DdimCoeffs::new(51, 1, &s, 1.0).unwrap();
        let (ab, abp) = (s.alpha_bar(51), s.alpha_bar(1));
        let var = (1.0 - abp) / (1.0 - ab) * (1.0 - ab / abp);
        assert!((c.sigma * c.sigma - var).abs() < 1e-18);
    }

    #[test]
    fn guidance_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = DenoiserParams::init(DenoiserConfig::default(), &mut rng).unwrap();
        let model = Denoiser::new(&params, None).unwrap();
        let z = LatentVideo::randn(params.config.video, &mut rng);
        let c = Condition(2);
        let ec = model.predict_eps(&z, c, 300).unwrap();
        let eu = model.predict_eps(&z, Condition::NULL, 300).unwrap();
        let g0 = guided_eps(&model, &z, c, 300, &GuidanceConfig { enabled: true, weight: 0.0 }).unwrap();
        assert_eq!(g0, eu);
        let g1 = guided_eps(&model, &z, c, 300, &GuidanceConfig { enabled: true, weight: 1.0 }).unwrap();
        assert!(g1.tensor().max_abs_diff(ec.tensor()).unwrap() < 1e-12);
        model.reset_calls();
        let g5 = guided_eps(&model, &z, c, 300, &GuidanceConfig::default()).unwrap();
        assert_eq!(model.calls(), 2);
        let manual = eu.tensor().zip_map(ec.tensor(), |u, v| u + 5.0 * (v - u)).unwrap();
        assert!(g5.tensor().max_abs_diff(&manual).unwrap() < 1e-12);
        let off = guided_eps(&model, &z, c, 300, &GuidanceConfig::off()).unwrap();
        assert_eq!(off, ec);
    }
}
