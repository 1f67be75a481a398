//! Tape gradients against central finite differences for the three losses
//! training relies on.

use super::config::ExperimentConfig;
use super::experiment::{derive_seed, setup};
use crate::denoiser::{Denoiser, DenoiserParams, Layer, LoraAdapter, LoraConfig, ParamSet};
use crate::error::{contract_err, Result};
use crate::finetune::{draw_noise, edit_objective, pretrain_objective, Algorithm, StepEnv, TrainConfig};
use crate::latent::LatentVideo;
use crate::schedule::DdimPlan;
use crate::tensor::{finite_diff, max_relative_error, record, Gradients, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub target: &'static str,
    pub point: usize,
    pub parameters: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

fn worst(grads: &Gradients, fd: &BTreeMap<String, Tensor>) -> Result<f64> {
    let mut w: f64 = 0.0;
    for (name, reference) in fd {
        let g = grads
            .get(name)
            .ok_or_else(|| contract_err!("no tape gradient for `{name}`"))?;
        w = w.max(max_relative_error(g, reference)?);
    }
    Ok(w)
}

fn random_adapter<R: Rng + ?Sized>(params: &DenoiserParams, rng: &mut R) -> Result<LoraAdapter> {
    let mut a = LoraAdapter::init(&params.config, LoraConfig::default(), rng)?;
    for f in &mut a.layers {
        f.down = Tensor::randn_scaled(f.down.shape(), 0.1, rng);
        f.up = Tensor::randn_scaled(f.up.shape(), 0.1, rng);
    }
    Ok(a)
}

/// Checks the pretraining loss (all base weights), the frame reward (the
/// frame), and the truncated edit loss (adapter factors, chain prefix
/// replayed unchanged) at `gradcheck.points` random points each.
pub fn run_gradcheck(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<GradcheckRow>> {
    cfg.validate()?;
    let gc = &cfg.gradcheck;
    let s = setup(cfg, seed)?;
    let sched = cfg.schedule.build()?;
    let plan = DdimPlan::new(gc.ddim_steps, sched.steps())?;
    let train = TrainConfig {
        algorithm: Algorithm::Edit,
        ddim_steps: gc.ddim_steps,
        schedule: cfg.schedule,
        reward: cfg.reward.id.clone(),
        ..cfg.finetune.clone()
    };
    let env = StepEnv {
        cfg: &train,
        sched: &sched,
        plan: &plan,
        reward: &s.reward,
    };
    let data = s.data.fine_tune_split();
    let mut rows = Vec::new();
    let mut push = |target, point, parameters, err: f64| {
        rows.push(GradcheckRow {
            target,
            point,
            parameters,
            max_relative_error: err,
            passed: err < gc.tolerance,
        })
    };
    for point in 0..gc.points {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 100 + point as u64));
        let params = DenoiserParams::init(cfg.denoiser, &mut rng)?;
        let batch: Vec<_> = (0..gc.batch_size)
            .map(|_| data[rng.random_range(0..data.len())].clone())
            .collect();

        let videos: Vec<LatentVideo> = batch.iter().map(|b| b.0.clone()).collect();
        let conds: Vec<_> = batch.iter().map(|b| b.1).collect();
        let draw = draw_noise(&conds, cfg.denoiser.video, &sched, train.p_drop, &mut rng)?;
        let obj = pretrain_objective(&params, &videos, &draw, &sched)?;
        let leaves: BTreeMap<String, Tensor> = params.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let fd = finite_diff(|l| obj.tape.replay(l), &leaves, gc.fd_step)?;
        push("pretrain_loss", point, params.num_params(), worst(&obj.grads()?, &fd)?);

        let c = conds[0];
        let frame = Tensor::randn(&[s.reward.frame_len()], &mut rng);
        let (_, tape): (Tensor, Tape) = record(&[("frame", frame.clone(), true)], |t, v| {
            s.reward.frame_reward_on_tape(t, v[0], c)
        })?;
        let leaves = BTreeMap::from([("frame".to_string(), frame)]);
        let fd = finite_diff(|l| tape.replay(l), &leaves, gc.fd_step)?;
        push("frame_reward", point, s.reward.frame_len(), worst(&tape.grad(&Tensor::scalar(1.0))?, &fd)?);

        let adapter = random_adapter(&params, &mut rng)?;
        let model = Denoiser::new(&params, Some(&adapter))?;
        let obj = edit_objective(&model, &batch, &env, &mut rng)?;
        let mut leaves = BTreeMap::new();
        for layer in Layer::ALL {
            if let Some(f) = adapter.factors(layer) {
                leaves.insert(LoraAdapter::down_name(layer), f.down.clone());
                leaves.insert(LoraAdapter::up_name(layer), f.up.clone());
            }
        }
        let n = leaves.values().map(Tensor::len).sum();
        let fd = finite_diff(|l| obj.tape.replay(l), &leaves, gc.fd_step)?;
        push("edit_loss", point, n, worst(&obj.grads()?, &fd)?);
    }
    Ok(rows)
}
