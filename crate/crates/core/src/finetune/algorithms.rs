use super::TrainConfig;
use crate::denoiser::{drop_condition, Binding, Bound, Condition, Denoiser, DenoiserParams, LoraAdapter, ParamSet};
use crate::error::{config_err, contract_err, shape_err, Result};
use crate::latent::{stack_rows, unstack_rows, LatentVideo, VideoShape};
use crate::reward::{segvr_sample, tar_coefficients, video_reward, video_reward_on_tape, RewardSpec, SegPlan};
use crate::sampler::{ddim_step_on_tape, denoise_rows, guided_on_tape, q_sample_tensor, DdimCoeffs};
use crate::schedule::{DdimPlan, Schedule};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use rand::Rng;

/// Tape label of every recorded reverse step.
pub const DDIM_STEP: &str = "ddim_step";
/// Tape label of every DDPO transition log-density.
pub const LOG_DENSITY: &str = "log_density";

/// Everything a step needs besides parameters and data.
#[derive(Clone, Copy)]
pub struct StepEnv<'a> {
    pub cfg: &'a TrainConfig,
    pub sched: &'a Schedule,
    pub plan: &'a DdimPlan,
    pub reward: &'a RewardSpec,
}

/// A recorded loss with the by-products needed for reporting. The tape's
/// output is the scalar loss.
pub struct Objective {
    pub tape: Tape,
    pub rewards: Vec<f64>,
    pub videos: Vec<LatentVideo>,
    pub calls: u64,
}

impl Objective {
    pub fn loss(&self) -> f64 {
        let out = self.tape.output().expect("objective tapes record an output");
        self.tape.value(out).data()[0]
    }

    pub fn grads(&self) -> Result<Gradients> {
        self.tape.grad(&Tensor::scalar(1.0))
    }
}

pub struct StepOutcome {
    pub loss: f64,
    pub rewards: Vec<f64>,
    pub videos: Vec<LatentVideo>,
    pub grads: Gradients,
    pub calls: u64,
}

/// Per-item timestep, noise and (possibly dropped) condition.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub ts: Vec<usize>,
    pub eps: Vec<Tensor>,
    pub conds: Vec<Condition>,
}

pub fn draw_noise<R: Rng + ?Sized>(
    conds: &[Condition],
    shape: VideoShape,
    sched: &Schedule,
    p_drop: f64,
    rng: &mut R,
) -> Result<NoiseDraw> {
    let mut draw = NoiseDraw {
        ts: Vec::new(),
        eps: Vec::new(),
        conds: Vec::new(),
    };
    for &c in conds {
        draw.ts.push(rng.random_range(1..=sched.steps()));
        draw.eps.push(LatentVideo::randn(shape, rng).as_matrix());
        draw.conds.push(drop_condition(c, p_drop, rng)?);
    }
    Ok(draw)
}

/// Per-item mean squared error between injected and predicted noise.
pub fn denoising_loss(
    model: &Denoiser<'_>,
    tape: &mut Tape,
    bound: &Bound,
    videos: &[LatentVideo],
    draw: &NoiseDraw,
    sched: &Schedule,
) -> Result<Vec<Var>> {
    if videos.is_empty() || videos.len() != draw.ts.len() {
        return Err(shape_err!("{} videos vs {} noise draws", videos.len(), draw.ts.len()));
    }
    let f = model.config().video.frames;
    let mut noisy = Vec::with_capacity(videos.len());
    for ((v, &t), e) in videos.iter().zip(&draw.ts).zip(&draw.eps) {
        noisy.push(LatentVideo::from_matrix(
            q_sample_tensor(&v.as_matrix(), t, e, sched)?,
            v.shape(),
        )?);
    }
    let z = tape.constant(stack_rows(&noisy)?)?;
    let pred = model.forward(tape, bound, z, &draw.conds, &draw.ts)?;
    let mut losses = Vec::with_capacity(videos.len());
    for (i, e) in draw.eps.iter().enumerate() {
        let target = tape.constant(e.clone())?;
        let p = tape.slice(pred, 0, i * f, f)?;
        let d = tape.sub(target, p)?;
        let sq = tape.square(d)?;
        losses.push(tape.mean(sq)?);
    }
    Ok(losses)
}

fn mean_of(tape: &mut Tape, vars: &[Var], weights: Option<&[f64]>) -> Result<Var> {
    let n = vars.len() as f64;
    let mut acc: Option<Var> = None;
    for (i, &v) in vars.iter().enumerate() {
        let w = weights.map_or(1.0 / n, |w| w[i]);
        let term = tape.scale(v, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| contract_err!("empty batch"))
}

/// Pretraining loss over `videos` with every base weight trainable.
pub fn pretrain_objective(
    params: &DenoiserParams,
    videos: &[LatentVideo],
    draw: &NoiseDraw,
    sched: &Schedule,
) -> Result<Objective> {
    let model = Denoiser::new(params, None)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Binding::Named(true), Binding::Frozen)?;
    let losses = denoising_loss(&model, &mut tape, &bound, videos, draw, sched)?;
    let loss = mean_of(&mut tape, &losses, None)?;
    tape.set_output(loss);
    Ok(Objective {
        tape,
        rewards: Vec::new(),
        videos: Vec::new(),
        calls: model.calls(),
    })
}

pub fn pretrain_step<R: Rng + ?Sized>(
    params: &mut DenoiserParams,
    batch: &[(LatentVideo, Condition)],
    env: &StepEnv<'_>,
    rng: &mut R,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(contract_err!("pretraining batch is empty"));
    }
    let conds: Vec<Condition> = batch.iter().map(|b| b.1).collect();
    let videos: Vec<LatentVideo> = batch.iter().map(|b| b.0.clone()).collect();
    let draw = draw_noise(&conds, params.config.video, env.sched, env.cfg.p_drop, rng)?;
    let obj = pretrain_objective(params, &videos, &draw, env.sched)?;
    let grads = obj.grads()?;
    params.descend(&grads, env.cfg.learning_rate)?;
    Ok(StepOutcome {
        loss: obj.loss(),
        rewards: Vec::new(),
        videos: Vec::new(),
        grads,
        calls: obj.calls,
    })
}

/// Records `from` guided reverse steps for one video. Every step but the
/// last uses frozen copies of the weights and its result passes through a
/// stop-gradient; the last uses `live`. Returns the clean estimate.
#[allow(clippy::too_many_arguments)]
fn truncated_chain(
    model: &Denoiser<'_>,
    tape: &mut Tape,
    frozen: &Bound,
    live: &Bound,
    z: Tensor,
    c: Condition,
    from: usize,
    env: &StepEnv<'_>,
) -> Result<Var> {
    let (plan, sched, g) = (env.plan, env.sched, &env.cfg.guidance);
    let mut z = tape.constant(z)?;
    for i in (2..=from).rev() {
        let (t, t_prev) = (plan.step(i), plan.step(i - 1));
        let eps = guided_on_tape(model, tape, frozen, z, &[c], t, g)?;
        let (mean, _) = ddim_step_on_tape(tape, z, eps, &DdimCoeffs::new(t, t_prev, sched, 0.0)?)?;
        tape.mark(mean, DDIM_STEP);
        z = mean;
    }
    let z = tape.stop_grad(z)?;
    let t = plan.step(1);
    let eps = guided_on_tape(model, tape, live, z, &[c], t, g)?;
    let (out, _) = ddim_step_on_tape(tape, z, eps, &DdimCoeffs::new(t, 0, sched, 0.0)?)?;
    tape.mark(out, DDIM_STEP);
    Ok(out)
}

fn reward_plan<R: Rng + ?Sized>(cfg: &TrainConfig, frames: usize, rng: &mut R) -> Result<SegPlan> {
    if cfg.segvr {
        segvr_sample(frames, cfg.segments, rng)
    } else {
        SegPlan::segment_starts(frames, frames)
    }
}

fn segment_reward_on_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    env: &StepEnv<'_>,
    video: Var,
    c: Condition,
    rng: &mut R,
) -> Result<Var> {
    let frames = tape.shape(video)[0];
    let plan = reward_plan(env.cfg, frames, rng)?;
    let coeffs = tar_coefficients(&plan, env.cfg.lambda_tar)?;
    video_reward_on_tape(tape, env.reward, video, c, &plan, &coeffs, env.cfg.aggregation)
}

fn segment_reward<R: Rng + ?Sized>(
    env: &StepEnv<'_>,
    video: &LatentVideo,
    c: Condition,
    rng: &mut R,
) -> Result<f64> {
    let plan = reward_plan(env.cfg, video.frames(), rng)?;
    let coeffs = tar_coefficients(&plan, env.cfg.lambda_tar)?;
    video_reward(env.reward, video, c, &plan, &coeffs, env.cfg.aggregation)
}

/// Shared body of the two truncated-gradient algorithms: `starts[i]` is
/// the noisy latent of item `i` at sub-sequence index `from`.
fn truncated_objective<R: Rng + ?Sized>(
    model: &Denoiser<'_>,
    starts: Vec<Tensor>,
    conds: &[Condition],
    from: usize,
    env: &StepEnv<'_>,
    rng: &mut R,
) -> Result<Objective> {
    if model.adapter.is_none() {
        return Err(config_err!("reward fine-tuning needs an adapter"));
    }
    let shape = model.config().video;
    let before = model.calls();
    let mut tape = Tape::new();
    let frozen = model.bind(&mut tape, Binding::Frozen, Binding::Frozen)?;
    let live = model.bind(&mut tape, Binding::Named(false), Binding::Named(true))?;
    let mut rewards = Vec::with_capacity(conds.len());
    let mut videos = Vec::with_capacity(conds.len());
    for (z, &c) in starts.into_iter().zip(conds) {
        let out = truncated_chain(model, &mut tape, &frozen, &live, z, c, from, env)?;
        videos.push(LatentVideo::from_matrix(tape.value(out).clone(), shape)?);
        rewards.push(segment_reward_on_tape(&mut tape, env, out, c, rng)?);
    }
    let mean = mean_of(&mut tape, &rewards, None)?;
    let loss = tape.scale(mean, -1.0)?;
    tape.set_output(loss);
    let rewards = rewards.iter().map(|&r| tape.value(r).data()[0]).collect();
    Ok(Objective {
        tape,
        rewards,
        videos,
        calls: model.calls() - before,
    })
}

/// `−mean R` after corrupting each sample to `t_noi` and running the `k`
/// remaining steps, with gradient through the last step only.
pub fn edit_objective<R: Rng + ?Sized>(
    model: &Denoiser<'_>,
    batch: &[(LatentVideo, Condition)],
    env: &StepEnv<'_>,
    rng: &mut R,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(contract_err!("fine-tuning batch is empty"));
    }
    let level = env.plan.noise_level_to_step(env.cfg.tau)?;
    let mut starts = Vec::with_capacity(batch.len());
    for (z, _) in batch {
        let eps = LatentVideo::randn(z.shape(), rng);
        starts.push(q_sample_tensor(&z.as_matrix(), level.t_noise, &eps.as_matrix(), env.sched)?);
    }
    let conds: Vec<Condition> = batch.iter().map(|b| b.1).collect();
    truncated_objective(model, starts, &conds, level.start_index, env, rng)
}

/// Like [`edit_objective`] but from pure noise through all `D` steps.
pub fn draft1_objective<R: Rng + ?Sized>(
    model: &Denoiser<'_>,
    conds: &[Condition],
    env: &StepEnv<'_>,
    rng: &mut R,
) -> Result<Objective> {
    if conds.is_empty() {
        return Err(contract_err!("fine-tuning batch is empty"));
    }
    let shape = model.config().video;
    let starts = conds
        .iter()
        .map(|_| LatentVideo::randn(shape, rng).as_matrix())
        .collect();
    truncated_objective(model, starts, conds, env.plan.len(), env, rng)
}

fn descend_adapter(obj: Objective, adapter: &mut LoraAdapter, lr: f64) -> Result<StepOutcome> {
    let grads = obj.grads()?;
    adapter.descend(&grads, lr)?;
    Ok(StepOutcome {
        loss: obj.loss(),
        rewards: obj.rewards,
        videos: obj.videos,
        grads,
        calls: obj.calls,
    })
}

pub fn edit_step<R: Rng + ?Sized>(
    params: &DenoiserParams,
    adapter: &mut LoraAdapter,
    batch: &[(LatentVideo, Condition)],
    env: &StepEnv<'_>,
    rng: &mut R,
) -> Result<StepOutcome> {
    let obj = edit_objective(&Denoiser::new(params, Some(adapter))?, batch, env, rng)?;
    descend_adapter(obj, adapter, env.cfg.learning_rate)
}

pub fn draft1_step<R: Rng + ?Sized>(
    params: &DenoiserParams,
    adapter: &mut LoraAdapter,
    conds: &[Condition],
    env: &StepEnv<'_>,
    rng: &mut R,
) -> Result<StepOutcome> {
    let obj = draft1_objective(&Denoiser::new(params, Some(adapter))?, conds, env, rng)?;
    descend_adapter(obj, adapter, env.cfg.learning_rate)
}

/// `softmax(R / β)`.
pub fn rwr_weights(rewards: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0) {
        return Err(config_err!("rwr_beta must be positive, got {beta}"));
    }
    let m = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = rewards.iter().map(|r| ((r - m) / beta).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

fn generate<R: Rng + ?Sized>(
    model: &Denoiser<'_>,
    conds: &[Condition],
    env: &StepEnv<'_>,
    rng: &mut R,
) -> Result<Vec<LatentVideo>> {
    let shape = model.config().video;
    let noise: Vec<LatentVideo> = conds.iter().map(|_| LatentVideo::randn(shape, rng)).collect();
    let out = denoise_rows(
        model,
        stack_rows(&noise)?,
        conds,
        env.sched,
        env.plan,
        env.plan.len(),
        0,
        &env.cfg.guidance,
        0.0,
        None,
    )?;
    unstack_rows(&out, shape)
}

/// Generates, scores, and regresses the adapter toward high-reward samples.
pub fn rwr_step<R: Rng + ?Sized>(
    params: &DenoiserParams,
    adapter: &mut LoraAdapter,
    conds: &[Condition],
    env: &StepEnv<'_>,
    rng: &mut R,
) -> Result<StepOutcome> {
    if conds.is_empty() {
        return Err(contract_err!("fine-tuning batch is empty"));
    }
    let obj = {
        let model = Denoiser::new(params, Some(adapter))?;
        let videos = generate(&model, conds, env, rng)?;
        let rewards = videos
            .iter()
            .zip(conds)
            .map(|(v, &c)| segment_reward(env, v, c, rng))
            .collect::<Result<Vec<_>>>()?;
        let weights = rwr_weights(&rewards, env.cfg.rwr_beta)?;
        let draw = draw_noise(conds, params.config.video, env.sched, 0.0, rng)?;
        let mut tape = Tape::new();
        let live = model.bind(&mut tape, Binding::Named(false), Binding::Named(true))?;
        let losses = denoising_loss(&model, &mut tape, &live, &videos, &draw, env.sched)?;
        let loss = mean_of(&mut tape, &losses, Some(&weights))?;
        tape.set_output(loss);
        Objective {
            tape,
            rewards,
            videos,
            calls: model.calls(),
        }
    };
    descend_adapter(obj, adapter, env.cfg.learning_rate)
}

/// `log N(x; mean, σ²I)`.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], sigma: f64) -> f64 {
    let n = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -sq / (2.0 * sigma * sigma) - 0.5 * n * (2.0 * std::f64::consts::PI * sigma * sigma).ln()
}

pub fn gaussian_log_density_on_tape(tape: &mut Tape, x: Var, mean: Var, sigma: f64) -> Result<Var> {
    let n = tape.value(x).len() as f64;
    let d = tape.sub(x, mean)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    let s = tape.scale(s, -1.0 / (2.0 * sigma * sigma))?;
    tape.offset(s, -0.5 * n * (2.0 * std::f64::consts::PI * sigma * sigma).ln())
}

/// REINFORCE with a batch-mean baseline over stochastic DDIM trajectories.
pub fn ddpo_step<R: Rng + ?Sized>(
    params: &DenoiserParams,
    adapter: &mut LoraAdapter,
    conds: &[Condition],
    env: &StepEnv<'_>,
    rng: &mut R,
) -> Result<StepOutcome> {
    let obj = ddpo_objective(&Denoiser::new(params, Some(adapter))?, conds, env, rng)?;
    descend_adapter(obj, adapter, env.cfg.learning_rate)
}

pub fn ddpo_objective<R: Rng + ?Sized>(
    model: &Denoiser<'_>,
    conds: &[Condition],
    env: &StepEnv<'_>,
    rng: &mut R,
) -> Result<Objective> {
    let eta = env.cfg.ddpo_eta;
    if !(eta > 0.0) {
        return Err(config_err!("ddpo needs a stochastic sampler (eta > 0), got {eta}"));
    }
    if conds.is_empty() {
        return Err(contract_err!("fine-tuning batch is empty"));
    }
    if model.adapter.is_none() {
        return Err(config_err!("reward fine-tuning needs an adapter"));
    }
    let shape = model.config().video;
    let f = shape.frames;
    let before = model.calls();
    let mut tape = Tape::new();
    let live = model.bind(&mut tape, Binding::Named(false), Binding::Named(true))?;
    let noise: Vec<LatentVideo> = conds.iter().map(|_| LatentVideo::randn(shape, rng)).collect();
    let mut z = stack_rows(&noise)?;
    let mut log_p: Vec<Option<Var>> = vec![None; conds.len()];
    for i in (1..=env.plan.len()).rev() {
        let (t, t_prev) = (env.plan.step(i), env.plan.step(i - 1));
        let zv = tape.constant(z)?;
        let eps = guided_on_tape(model, &mut tape, &live, zv, conds, t, &env.cfg.guidance)?;
        let co = DdimCoeffs::new(t, t_prev, env.sched, eta)?;
        let (mean, _) = ddim_step_on_tape(&mut tape, zv, eps, &co)?;
        let noise = Tensor::randn(tape.shape(mean), rng);
        let mut next = tape.value(mean).clone();
        next.axpy(co.sigma, &noise)?;
        for (b, acc) in log_p.iter_mut().enumerate() {
            let p = next.shape()[1];
            let x = tape.constant(Tensor::from_parts(
                vec![f, p],
                next.data()[b * f * p..(b + 1) * f * p].to_vec(),
            ))?;
            let m = tape.slice(mean, 0, b * f, f)?;
            let lp = gaussian_log_density_on_tape(&mut tape, x, m, co.sigma)?;
            tape.mark(lp, LOG_DENSITY);
            *acc = Some(match *acc {
                None => lp,
                Some(a) => tape.add(a, lp)?,
            });
        }
        z = next;
    }
    let videos = unstack_rows(&z, shape)?;
    let rewards = videos
        .iter()
        .zip(conds)
        .map(|(v, &c)| segment_reward(env, v, c, rng))
        .collect::<Result<Vec<_>>>()?;
    let baseline = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let terms: Vec<Var> = log_p.into_iter().map(|v| v.expect("D >= 1")).collect();
    let adv: Vec<f64> = rewards
        .iter()
        .map(|r| -(r - baseline) / rewards.len() as f64)
        .collect();
    let loss = mean_of(&mut tape, &terms, Some(&adv))?;
    tape.set_output(loss);
    Ok(Objective {
        tape,
        rewards,
        videos,
        calls: model.calls() - before,
    })
}
