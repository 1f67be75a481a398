//! Pretraining and reward fine-tuning.
//!
//! Four reward fine-tuning algorithms share one adapter-only update path:
//!
//! * `edit`: corrupt a real sample to `t_noi`, run the remaining `k` DDIM
//!   steps, and back-propagate the segmental reward through the last step only.
//! * `draft1`: the same truncated gradient, but starting from pure noise and
//!   running all `D` steps.
//! * `rwr`: reward-weighted denoising regression on generated samples.
//! * `ddpo`: REINFORCE over stochastic (`η > 0`) DDIM trajectories.
//!
//! Base weights stay bit-identical under all four.

mod algorithms;

pub use algorithms::{
    ddpo_objective, ddpo_step, denoising_loss, draft1_objective, draft1_step, draw_noise, edit_objective, edit_step,
    gaussian_log_density, gaussian_log_density_on_tape, pretrain_objective, pretrain_step, rwr_step,
    rwr_weights, NoiseDraw, Objective, StepEnv, StepOutcome, DDIM_STEP, LOG_DENSITY,
};

use crate::checkpoint::Checkpoint;
use crate::denoiser::{Condition, LoraAdapter, LoraConfig};
use crate::error::{config_err, contract_err, Error, Result};
use crate::latent::LatentVideo;
use crate::metrics::{mean_std, temporal_smoothness, watermark_score};
use crate::reward::{Aggregation, RewardSpec};
use crate::sampler::GuidanceConfig;
use crate::schedule::{DdimPlan, ScheduleConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Pretrain,
    Edit,
    Draft1,
    Rwr,
    Ddpo,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Pretrain => "pretrain",
            Algorithm::Edit => "edit",
            Algorithm::Draft1 => "draft1",
            Algorithm::Rwr => "rwr",
            Algorithm::Ddpo => "ddpo",
        }
    }

    pub fn is_reward(self) -> bool {
        self != Algorithm::Pretrain
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub steps: usize,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub ddim_steps: usize,
    /// Noise level of the edit algorithm.
    pub tau: f64,
    pub segments: usize,
    /// Random frame per segment; off scores every frame.
    pub segvr: bool,
    pub aggregation: Aggregation,
    pub lambda_tar: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Condition dropout during pretraining.
    pub p_drop: f64,
    pub rwr_beta: f64,
    pub ddpo_eta: f64,
    pub guidance: GuidanceConfig,
    pub adapter: bool,
    pub lora: LoraConfig,
    /// Reward id the run expects.
    pub reward: String,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Fill `wall_ms`; off keeps report streams reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::Edit,
            steps: 500,
            seed: 0,
            schedule: ScheduleConfig::default(),
            ddim_steps: 20,
            tau: 0.6,
            segments: 4,
            segvr: true,
            aggregation: Aggregation::Tar,
            lambda_tar: 1.0,
            learning_rate: 1e-5,
            batch_size: 8,
            p_drop: 0.1,
            rwr_beta: 0.2,
            ddpo_eta: 1.0,
            guidance: GuidanceConfig::default(),
            adapter: true,
            lora: LoraConfig::default(),
            reward: "template".into(),
            checkpoint_every: 0,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        DdimPlan::new(self.ddim_steps, self.schedule.steps)?;
        self.schedule.build()?;
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(config_err!("tau must lie in (0, 1], got {}", self.tau));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(config_err!("learning_rate must be finite and non-negative"));
        }
        if !(self.lambda_tar >= 0.0) {
            return Err(config_err!("lambda_tar must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(config_err!("p_drop must lie in [0, 1]"));
        }
        if self.segments == 0 {
            return Err(config_err!("segments must be positive"));
        }
        match self.algorithm {
            Algorithm::Pretrain => {}
            alg if !self.adapter => {
                return Err(config_err!(
                    "{alg} updates adapters only; full-parameter reward tuning is not supported"
                ))
            }
            Algorithm::Rwr if !(self.rwr_beta > 0.0) => {
                return Err(config_err!("rwr_beta must be positive, got {}", self.rwr_beta))
            }
            Algorithm::Ddpo if !(self.ddpo_eta > 0.0) => {
                return Err(config_err!("ddpo needs a stochastic sampler (eta > 0), got {}", self.ddpo_eta))
            }
            _ => {}
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub algorithm: Algorithm,
    pub loss: f64,
    pub mean_reward: Option<f64>,
    pub reward_std: Option<f64>,
    pub denoiser_calls: u64,
    pub adapter_grad_norm: f64,
    pub base_grad_norm: f64,
    pub smoothness: Option<f64>,
    pub watermark_score: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Serialize)]
struct CsvRow {
    step: usize,
    algorithm: &'static str,
    loss: f64,
    mean_reward: Option<f64>,
    reward_std: Option<f64>,
    denoiser_calls: u64,
    smoothness: Option<f64>,
    watermark_score: Option<f64>,
    wall_ms: u64,
}

/// Writes reports as CSV with a header row.
pub fn write_reports_csv<W: Write>(w: W, reports: &[StepReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    if reports.is_empty() {
        out.write_record([
            "step",
            "algorithm",
            "loss",
            "mean_reward",
            "reward_std",
            "denoiser_calls",
            "smoothness",
            "watermark_score",
            "wall_ms",
        ])
        .map_err(fmt)?;
    }
    for r in reports {
        out.serialize(CsvRow {
            step: r.step,
            algorithm: r.algorithm.name(),
            loss: r.loss,
            mean_reward: r.mean_reward,
            reward_std: r.reward_std,
            denoiser_calls: r.denoiser_calls,
            smoothness: r.smoothness,
            watermark_score: r.watermark_score,
            wall_ms: r.wall_ms,
        })
        .map_err(fmt)?;
    }
    out.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn save_reports_csv(path: impl AsRef<Path>, reports: &[StepReport]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_reports_csv(std::io::BufWriter::new(file), reports)
}

fn make_report(
    step: usize,
    algorithm: Algorithm,
    out: &StepOutcome,
    reward: &RewardSpec,
    wall_ms: u64,
) -> StepReport {
    let has_reward = !out.rewards.is_empty();
    let (m, s) = mean_std(&out.rewards);
    let per_video = |f: &dyn Fn(&LatentVideo) -> f64| {
        (!out.videos.is_empty())
            .then(|| out.videos.iter().map(f).sum::<f64>() / out.videos.len() as f64)
    };
    StepReport {
        step,
        algorithm,
        loss: out.loss,
        mean_reward: has_reward.then_some(m),
        reward_std: has_reward.then_some(s),
        denoiser_calls: out.calls,
        adapter_grad_norm: out.grads.norm_where(|n| n.starts_with("lora.")),
        base_grad_norm: out.grads.norm_where(|n| !n.starts_with("lora.")),
        smoothness: per_video(&temporal_smoothness),
        watermark_score: per_video(&|v| watermark_score(v, &reward.watermark)),
        wall_ms,
    }
}

/// Runs `config.steps` steps of plain gradient descent from `init`.
///
/// Batches are drawn with replacement from `data`. With `checkpoint_dir`
/// set and `checkpoint_every > 0`, intermediate checkpoints are written to
/// `checkpoint_dir/step-NNNNN`.
pub fn run_training(
    config: &TrainConfig,
    data: &[(LatentVideo, Condition)],
    reward: &RewardSpec,
    init: &Checkpoint,
    checkpoint_dir: Option<&Path>,
) -> Result<(Checkpoint, Vec<StepReport>)> {
    config.validate()?;
    if init.schedule.steps != config.schedule.steps {
        return Err(config_err!(
            "checkpoint was trained with T = {}, config uses T = {}",
            init.schedule.steps,
            config.schedule.steps
        ));
    }
    if init.schedule != config.schedule {
        return Err(config_err!("checkpoint and config disagree on the noise schedule"));
    }
    if reward.name != config.reward {
        return Err(config_err!(
            "config expects reward `{}`, got `{}`",
            config.reward,
            reward.name
        ));
    }
    if config.steps == 0 {
        return Ok((init.clone(), Vec::new()));
    }
    if data.is_empty() {
        return Err(contract_err!("training needs a non-empty dataset"));
    }
    let sched = config.schedule.build()?;
    let plan = DdimPlan::new(config.ddim_steps, sched.steps())?;
    let env = StepEnv {
        cfg: config,
        sched: &sched,
        plan: &plan,
        reward,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ck = init.clone();
    ck.ddim_steps = config.ddim_steps;
    if config.algorithm.is_reward() && ck.adapter.is_none() {
        ck.adapter = Some(LoraAdapter::init(&ck.params.config, config.lora, &mut rng)?);
    }
    let mut reports = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let batch: Vec<(LatentVideo, Condition)> = (0..config.batch_size)
            .map(|_| data[rng.random_range(0..data.len())].clone())
            .collect();
        let started = Instant::now();
        let out = match config.algorithm {
            Algorithm::Pretrain => pretrain_step(&mut ck.params, &batch, &env, &mut rng)?,
            alg => {
                let adapter = ck.adapter.as_mut().expect("adapter created above");
                match alg {
                    Algorithm::Edit => edit_step(&ck.params, adapter, &batch, &env, &mut rng)?,
                    Algorithm::Draft1 => {
                        let conds: Vec<Condition> = batch.iter().map(|b| b.1).collect();
                        draft1_step(&ck.params, adapter, &conds, &env, &mut rng)?
                    }
                    Algorithm::Rwr => {
                        let conds: Vec<Condition> = batch.iter().map(|b| b.1).collect();
                        rwr_step(&ck.params, adapter, &conds, &env, &mut rng)?
                    }
                    Algorithm::Ddpo => {
                        let conds: Vec<Condition> = batch.iter().map(|b| b.1).collect();
                        ddpo_step(&ck.params, adapter, &conds, &env, &mut rng)?
                    }
                    Algorithm::Pretrain => unreachable!(),
                }
            }
        };
        let wall_ms = if config.record_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        reports.push(make_report(step, config.algorithm, &out, reward, wall_ms));
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                ck.save(dir.join(format!("step-{step:05}")))?;
            }
        }
    }
    Ok((ck, reports))
}
