//! Held-out style evaluation of a checkpoint.

use super::dataset::{DatasetSpec, Split};
use crate::checkpoint::Checkpoint;
use crate::denoiser::{Condition, Denoiser};
use crate::error::{config_err, Error, Result};
use crate::latent::LatentVideo;
use crate::metrics::{mean_std, temporal_smoothness, watermark_score};
use crate::reward::{tar_coefficients, video_reward, Aggregation, RewardSpec, SegPlan};
use crate::sampler::{sample_full_batch, GuidanceConfig};
use crate::schedule::DdimPlan;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ddim_steps: usize,
    pub segments: usize,
    pub seeds_per_condition: usize,
    pub seed: u64,
    pub guidance: GuidanceConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ddim_steps: 20,
            segments: 4,
            seeds_per_condition: 6,
            seed: 1_000,
            guidance: GuidanceConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stats {
    pub mean_reward: f64,
    pub reward_std: f64,
    pub smoothness: f64,
    pub watermark_score: f64,
    pub videos: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionStats {
    pub condition: Condition,
    pub split: Split,
    pub stats: Stats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ddim_steps: usize,
    pub per_condition: Vec<ConditionStats>,
    pub per_split: Vec<(Split, Stats)>,
    pub overall: Stats,
}

impl EvalReport {
    pub fn split(&self, split: Split) -> Option<&Stats> {
        self.per_split.iter().find(|(s, _)| *s == split).map(|(_, st)| st)
    }
}

/// Per-video generation seed; distinct for every `(base, condition, index)`.
pub fn video_seed(base: u64, c: Condition, i: usize) -> u64 {
    let mut x = base ^ ((c.0 as u64) << 32) ^ i as u64;
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn stats(rewards: &[f64], videos: &[LatentVideo], reward: &RewardSpec) -> Stats {
    let (m, s) = mean_std(rewards);
    let n = videos.len() as f64;
    Stats {
        mean_reward: m,
        reward_std: s,
        smoothness: videos.iter().map(temporal_smoothness).sum::<f64>() / n,
        watermark_score: videos.iter().map(|v| watermark_score(v, &reward.watermark)).sum::<f64>() / n,
        videos: videos.len(),
    }
}

/// Generates `seeds_per_condition` videos per condition with the adapter
/// merged into the base, and scores the first frame of every segment.
pub fn evaluate(
    ck: &Checkpoint,
    conditions: &[Condition],
    data: &DatasetSpec,
    reward: &RewardSpec,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if conditions.is_empty() {
        return Err(config_err!("evaluation needs at least one condition"));
    }
    if cfg.seeds_per_condition == 0 {
        return Err(config_err!("seeds_per_condition must be positive"));
    }
    let sched = ck.schedule.build()?;
    let plan = DdimPlan::new(cfg.ddim_steps, sched.steps())?;
    let merged = ck.merged()?;
    let model = Denoiser::new(&merged, None)?;
    let frames = merged.config.video.frames;
    let seg = SegPlan::segment_starts(frames, cfg.segments)?;
    let coeffs = tar_coefficients(&seg, 0.0)?;

    let mut per_condition = Vec::new();
    let mut all: Vec<(Split, f64, LatentVideo)> = Vec::new();
    for &c in conditions {
        let seeds: Vec<u64> = (0..cfg.seeds_per_condition).map(|i| video_seed(cfg.seed, c, i)).collect();
        let videos = sample_full_batch(&model, &vec![c; seeds.len()], &sched, &plan, &cfg.guidance, &seeds)?;
        let rewards = videos
            .iter()
            .map(|v| video_reward(reward, v, c, &seg, &coeffs, Aggregation::Mean))
            .collect::<Result<Vec<_>>>()?;
        let split = data.split_of(c);
        per_condition.push(ConditionStats {
            condition: c,
            split,
            stats: stats(&rewards, &videos, reward),
        });
        all.extend(rewards.into_iter().zip(videos).map(|(r, v)| (split, r, v)));
    }
    let summarize = |pred: &dyn Fn(Split) -> bool| {
        let (r, v): (Vec<f64>, Vec<LatentVideo>) = all
            .iter()
            .filter(|(s, _, _)| pred(*s))
            .map(|(_, r, v)| (*r, v.clone()))
            .unzip();
        (!v.is_empty()).then(|| stats(&r, &v, reward))
    };
    let mut per_split = Vec::new();
    for split in [Split::InDomain, Split::HeldOutClass] {
        if let Some(s) = summarize(&|x| x == split) {
            per_split.push((split, s));
        }
    }
    Ok(EvalReport {
        ddim_steps: cfg.ddim_steps,
        per_condition,
        per_split,
        overall: summarize(&|_| true).expect("non-empty"),
    })
}

#[derive(Serialize)]
struct EvalRow<'a> {
    run: &'a str,
    ddim_steps: usize,
    split: &'a str,
    condition: String,
    mean_reward: f64,
    reward_std: f64,
    smoothness: f64,
    watermark_score: f64,
    videos: usize,
}

/// Appends per-condition, per-split and overall rows for one report.
pub fn write_eval_rows<W: Write>(out: &mut csv::Writer<W>, run: &str, rep: &EvalReport) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    let row = |split: &'static str, condition: String, s: &Stats| EvalRow {
        run,
        ddim_steps: rep.ddim_steps,
        split,
        condition,
        mean_reward: s.mean_reward,
        reward_std: s.reward_std,
        smoothness: s.smoothness,
        watermark_score: s.watermark_score,
        videos: s.videos,
    };
    for c in &rep.per_condition {
        out.serialize(row(c.split.tag(), c.condition.0.to_string(), &c.stats)).map_err(fmt)?;
    }
    for (split, s) in &rep.per_split {
        out.serialize(row(split.tag(), "all".into(), s)).map_err(fmt)?;
    }
    out.serialize(row("all", "all".into(), &rep.overall)).map_err(fmt)?;
    Ok(())
}
