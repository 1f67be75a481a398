mod common;

use common::*;
use std::cell::Cell;
use vidtune::denoiser::{Condition, Denoiser, DenoiserConfig, DenoiserParams, NoisePredictor};
use vidtune::latent::{LatentVideo, VideoShape};
use vidtune::sampler::{edit_sample, q_sample, sample_full, GuidanceConfig};
use vidtune::schedule::{DdimPlan, Schedule};
use vidtune::tensor::Tensor;
use vidtune::Result;

fn sched() -> Schedule {
    Schedule::linear(1000, 1e-4, 2e-2).unwrap()
}

fn one_pixel_video() -> VideoShape {
    VideoShape {
        frames: 1,
        height: 2,
        width: 2,
        channels: 1,
    }
}

#[test]
fn q_sample_moments_match_closed_form() {
    let s = sched();
    let shape = one_pixel_video();
    let z = LatentVideo::new(Tensor::new(vec![1, 2, 2, 1], vec![0.7, -1.2, 0.0, 2.5]).unwrap()).unwrap();
    let n = 10_000;
    for t in [51, 551, 951] {
        let mut r = rng(t as u64);
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let eps = LatentVideo::randn(shape, &mut r);
            let x = q_sample(&z, t, &eps, &s).unwrap();
            for (i, v) in x.data().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let ab = s.alpha_bar(t);
        let var = 1.0 - ab;
        for i in 0..4 {
            let m = sum[i] / n as f64;
            let v = sq[i] / n as f64 - m * m;
            let mean_tol = 3.0 * (var / n as f64).sqrt();
            let var_tol = 3.0 * var * (2.0 / (n - 1) as f64).sqrt();
            assert!((m - ab.sqrt() * z.data()[i]).abs() < mean_tol, "t {t} element {i} mean {m}");
            assert!((v - var).abs() < var_tol, "t {t} element {i} variance {v}");
        }
    }
}

/// Posterior-mean noise for data distributed as `N(mu, s²)` per element.
struct Ideal<'a> {
    sched: &'a Schedule,
    mu: f64,
    s2: f64,
}

impl NoisePredictor for Ideal<'_> {
    fn video_shape(&self) -> VideoShape {
        one_pixel_video()
    }

    fn predict_rows(&self, z: &Tensor, _: &[Condition], ts: &[usize]) -> Result<Tensor> {
        let ab = self.sched.alpha_bar(ts[0]);
        let k = (1.0 - ab).sqrt() / (ab * self.s2 + 1.0 - ab);
        Ok(z.map(|v| k * (v - ab.sqrt() * self.mu)))
    }
}

#[test]
fn linear_ideal_denoiser_matches_hand_rolled_chain() {
    let s = Schedule::linear(30, 1e-3, 0.2).unwrap();
    let plan = DdimPlan::new(3, 30).unwrap();
    assert_eq!(plan.steps(), &[1, 11, 21]);
    let model = Ideal {
        sched: &s,
        mu: 0.3,
        s2: 0.5,
    };
    let seed = 9;
    let out = sample_full(&model, Condition(1), &s, &plan, &GuidanceConfig::off(), seed).unwrap();

    // Independent recomputation from the betas.
    let beta = |t: usize| 1e-3 + (0.2 - 1e-3) * (t - 1) as f64 / 29.0;
    let alpha_bar = |t: usize| (1..=t).map(|u| 1.0 - beta(u)).product::<f64>();
    let mut z: Vec<f64> = LatentVideo::randn(one_pixel_video(), &mut rng(seed)).data().to_vec();
    for (t, t_prev) in [(21, 11), (11, 1), (1, 0)] {
        let ab = alpha_bar(t);
        let abp = if t_prev == 0 { 1.0 } else { alpha_bar(t_prev) };
        for v in z.iter_mut() {
            let eps = (1.0 - ab).sqrt() * (*v - ab.sqrt() * 0.3) / (ab * 0.5 + 1.0 - ab);
            let x0 = (*v - (1.0 - ab).sqrt() * eps) / ab.sqrt();
            *v = abp.sqrt() * x0 + (1.0 - abp).sqrt() * eps;
        }
    }
    for (a, b) in out.data().iter().zip(&z) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn full_sampling_makes_forty_calls_and_is_deterministic() {
    let params = DenoiserParams::init(DenoiserConfig::default(), &mut rng(3)).unwrap();
    let model = Denoiser::new(&params, None).unwrap();
    let s = sched();
    let plan = DdimPlan::new(20, 1000).unwrap();
    let g = GuidanceConfig::default();
    let a = sample_full(&model, Condition(2), &s, &plan, &g, 5).unwrap();
    assert_eq!(model.calls(), 40);
    let b = sample_full(&model, Condition(2), &s, &plan, &g, 5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fifty_step_plan_runs_on_the_same_weights() {
    let params = DenoiserParams::init(DenoiserConfig::default(), &mut rng(4)).unwrap();
    let model = Denoiser::new(&params, None).unwrap();
    let s = sched();
    let plan = DdimPlan::new(50, 1000).unwrap();
    let v = sample_full(&model, Condition(1), &s, &plan, &GuidanceConfig::default(), 1).unwrap();
    assert!(v.tensor().is_finite());
    assert_eq!(model.calls(), 100);
}

/// Knows the clean video and returns exactly the noise in `z_t`.
struct Oracle<'a> {
    sched: &'a Schedule,
    clean: &'a LatentVideo,
    calls: Cell<usize>,
}

impl NoisePredictor for Oracle<'_> {
    fn video_shape(&self) -> VideoShape {
        self.clean.shape()
    }

    fn predict_rows(&self, z: &Tensor, _: &[Condition], ts: &[usize]) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        let ab = self.sched.alpha_bar(ts[0]);
        z.zip_map(&self.clean.as_matrix(), |zt, x| (zt - ab.sqrt() * x) / (1.0 - ab).sqrt())
    }
}

#[test]
fn perfect_oracle_edit_recovers_the_clean_video() {
    let s = sched();
    let plan = DdimPlan::new(20, 1000).unwrap();
    let clean = LatentVideo::randn(tiny_shape(), &mut rng(12));
    let oracle = Oracle {
        sched: &s,
        clean: &clean,
        calls: Cell::new(0),
    };
    let out = edit_sample(&oracle, &clean, Condition(1), 0.6, &s, &plan, &GuidanceConfig::off(), 3).unwrap();
    assert_eq!(oracle.calls.get(), 12);
    assert!(out.tensor().max_abs_diff(clean.tensor()).unwrap() < 1e-8);

    oracle.calls.set(0);
    edit_sample(&oracle, &clean, Condition(1), 1.0, &s, &plan, &GuidanceConfig::off(), 3).unwrap();
    assert_eq!(oracle.calls.get(), 20);
}

#[test]
fn linear_predictor_output_is_finite_over_a_full_chain() {
    let model = Linear {
        shape: tiny_shape(),
        a: 0.5,
        b: 0.0,
    };
    let s = sched();
    let plan = DdimPlan::new(20, 1000).unwrap();
    let v = sample_full(&model, Condition(1), &s, &plan, &GuidanceConfig::default(), 2).unwrap();
    assert!(v.tensor().is_finite());
}
