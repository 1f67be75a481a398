//! Experiment files: TOML with one table per pipeline stage.
//!
//! ```toml
//! name = "tau-sweep"
//! seed = 0
//!
//! [pretrain]
//! steps = 2000
//! learning_rate = 0.3
//!
//! [finetune]
//! algorithm = "edit"
//! steps = 500
//! learning_rate = 10.0
//!
//! [sweep]
//! key = "tau"
//! values = [0.1, 0.5, 0.6, 0.9]
//! ```
//!
//! Every `[[runs]]` entry and every sweep value is layered over `[finetune]`.

use super::dataset::{DatasetSpec, RewardConfig, Split};
use super::eval::EvalConfig;
use crate::denoiser::{Condition, DenoiserConfig};
use crate::error::{config_err, Error, Result};
use crate::finetune::{Algorithm, TrainConfig};
use crate::sampler::GuidanceConfig;
use crate::schedule::ScheduleConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub p_drop: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2_000,
            learning_rate: 0.3,
            batch_size: 8,
            p_drop: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// One evaluation pass per entry.
    pub ddim_steps: Vec<usize>,
    pub splits: Vec<Split>,
    pub segments: usize,
    pub seeds_per_condition: usize,
    pub seed: u64,
    pub guidance: GuidanceConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        EvalSection {
            ddim_steps: vec![e.ddim_steps],
            splits: vec![Split::InDomain, Split::HeldOutClass],
            segments: e.segments,
            seeds_per_condition: e.seeds_per_condition,
            seed: e.seed,
            guidance: e.guidance,
        }
    }
}

impl EvalSection {
    pub fn at(&self, ddim_steps: usize) -> EvalConfig {
        EvalConfig {
            ddim_steps,
            segments: self.segments,
            seeds_per_condition: self.seeds_per_condition,
            seed: self.seed,
            guidance: self.guidance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotConfig {
    /// CSV column on the horizontal axis.
    pub x: String,
    /// One SVG per column.
    pub y: Vec<String>,
    /// Trailing moving-average window; 1 plots raw values.
    pub window: usize,
}

impl Default for PlotConfig {
    fn default() -> Self {
        PlotConfig {
            x: "step".into(),
            y: vec!["mean_reward".into(), "smoothness".into()],
            window: 25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FramesConfig {
    /// Defaults to the first held-out class.
    pub condition: Option<usize>,
    pub seed: u64,
    /// Pixels per latent cell.
    pub zoom: usize,
    /// Values mapped to black and white.
    pub range: [f64; 2],
}

impl Default for FramesConfig {
    fn default() -> Self {
        FramesConfig {
            condition: None,
            seed: 0,
            zoom: 4,
            range: [-0.25, 1.25],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub points: usize,
    pub batch_size: usize,
    pub ddim_steps: usize,
    pub fd_step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            points: 5,
            batch_size: 2,
            ddim_steps: 5,
            fd_step: crate::tensor::DEFAULT_FD_STEP,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Raw {
    #[serde(default = "default_name")]
    name: String,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    checkpoint: Option<PathBuf>,
    #[serde(default)]
    schedule: ScheduleConfig,
    #[serde(default)]
    dataset: DatasetSpec,
    #[serde(default)]
    denoiser: DenoiserConfig,
    #[serde(default)]
    reward: RewardConfig,
    #[serde(default)]
    pretrain: PretrainConfig,
    #[serde(default)]
    finetune: toml::Table,
    #[serde(default)]
    runs: Vec<toml::Table>,
    #[serde(default)]
    sweep: Option<Sweep>,
    #[serde(default)]
    eval: EvalSection,
    #[serde(default)]
    plot: PlotConfig,
    #[serde(default)]
    frames: FramesConfig,
    #[serde(default)]
    gradcheck: GradcheckConfig,
}

fn default_name() -> String {
    "experiment".into()
}

/// A named fine-tuning run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub name: String,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Base checkpoint; when set, pretraining is skipped.
    pub checkpoint: Option<PathBuf>,
    pub schedule: ScheduleConfig,
    pub dataset: DatasetSpec,
    pub denoiser: DenoiserConfig,
    pub reward: RewardConfig,
    pub pretrain: PretrainConfig,
    /// The `[finetune]` table on its own.
    pub finetune: TrainConfig,
    /// Runs in file order, then sweep values; `finetune` alone when both are empty.
    pub runs: Vec<RunSpec>,
    pub sweep_key: Option<String>,
    pub eval: EvalSection,
    pub plot: PlotConfig,
    pub frames: FramesConfig,
    pub gradcheck: GradcheckConfig,
}

fn parse_err(path: &str, message: impl ToString) -> Error {
    Error::Parse {
        path: path.into(),
        message: message.to_string(),
    }
}

fn typed<T: DeserializeOwned>(value: toml::Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let path = match (prefix.is_empty(), inner.as_str()) {
            (true, _) => inner.clone(),
            (false, ".") => prefix.to_string(),
            (false, _) => format!("{prefix}.{inner}"),
        };
        parse_err(&path, e.into_inner())
    })
}

/// Keys the experiment sets itself.
const MANAGED: [&str; 3] = ["schedule", "seed", "reward"];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| parse_err("", e.message()))?;
        let raw: Raw = serde_path_to_error::deserialize(de)
            .map_err(|e| parse_err(&e.path().to_string(), e.inner().message()))?;
        for key in MANAGED {
            if raw.finetune.contains_key(key) {
                return Err(parse_err(
                    &format!("finetune.{key}"),
                    format!("`{key}` is set at the top level of the experiment"),
                ));
            }
        }
        let resolve = |overlay: &toml::Table, label: &str| -> Result<TrainConfig> {
            let mut merged = raw.finetune.clone();
            for (k, v) in overlay {
                if k == "name" {
                    continue;
                }
                if MANAGED.contains(&k.as_str()) {
                    return Err(parse_err(
                        &format!("{label}.{k}"),
                        format!("`{k}` is set at the top level of the experiment"),
                    ));
                }
                merged.insert(k.clone(), v.clone());
            }
            let mut cfg: TrainConfig = typed(toml::Value::Table(merged), label).map_err(|e| match e {
                // Point at the table the bad key came from.
                Error::Parse { path, message } => {
                    let key = path.trim_start_matches(label).trim_start_matches('.');
                    let top = key.split(['.', '[']).next().unwrap_or_default();
                    let path = if !overlay.contains_key(top) && raw.finetune.contains_key(top) {
                        format!("finetune.{key}")
                    } else {
                        path
                    };
                    Error::Parse { path, message }
                }
                e => e,
            })?;
            cfg.schedule = raw.schedule;
            cfg.reward = raw.reward.id.clone();
            Ok(cfg)
        };
        let finetune = resolve(&toml::Table::new(), "finetune")?;
        let mut runs = Vec::new();
        for (i, table) in raw.runs.iter().enumerate() {
            let label = format!("runs[{i}]");
            let name = match table.get("name") {
                Some(toml::Value::String(s)) => s.clone(),
                Some(_) => return Err(parse_err(&format!("{label}.name"), "expected a string")),
                None => return Err(parse_err(&label, "missing field `name`")),
            };
            runs.push(RunSpec {
                name,
                train: resolve(table, &label)?,
            });
        }
        if let Some(sweep) = &raw.sweep {
            if sweep.values.is_empty() {
                return Err(parse_err("sweep.values", "sweep needs at least one value"));
            }
            for (i, v) in sweep.values.iter().enumerate() {
                let mut t = toml::Table::new();
                t.insert(sweep.key.clone(), v.clone());
                let label = format!("sweep.values[{i}]");
                let train = resolve(&t, &label).map_err(|e| match e {
                    Error::Parse { message, .. } => Error::Parse { path: label.clone(), message },
                    e => e,
                })?;
                runs.push(RunSpec {
                    name: format!("{}={}", sweep.key, value_label(v)),
                    train,
                });
            }
        }
        if runs.is_empty() {
            runs.push(RunSpec {
                name: finetune.algorithm.name().to_string(),
                train: finetune.clone(),
            });
        }
        let cfg = ExperimentConfig {
            name: raw.name,
            seed: raw.seed,
            checkpoint: raw.checkpoint,
            schedule: raw.schedule,
            dataset: raw.dataset,
            denoiser: raw.denoiser,
            reward: raw.reward,
            pretrain: raw.pretrain,
            finetune,
            runs,
            sweep_key: raw.sweep.map(|s| s.key),
            eval: raw.eval,
            plot: raw.plot,
            frames: raw.frames,
            gradcheck: raw.gradcheck,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a file; a relative `checkpoint` is resolved against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let (Some(ck), Some(dir)) = (&cfg.checkpoint, path.parent()) {
            if ck.is_relative() {
                cfg.checkpoint = Some(dir.join(ck));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.dataset.validate()?;
        self.denoiser.validate()?;
        if self.denoiser.video != self.dataset.video {
            return Err(config_err!(
                "denoiser video shape {:?} differs from dataset video shape {:?}",
                self.denoiser.video,
                self.dataset.video
            ));
        }
        if self.denoiser.classes != self.dataset.classes {
            return Err(config_err!(
                "denoiser has {} classes, dataset has {}",
                self.denoiser.classes,
                self.dataset.classes
            ));
        }
        self.reward.build(&self.dataset)?;
        let mut names = std::collections::BTreeSet::new();
        for run in &self.runs {
            let ok = !run.name.is_empty()
                && run.name != "base"
                && run.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.=".contains(c));
            if !ok {
                return Err(config_err!(
                    "run name `{}` must be non-empty, not `base`, and use only [A-Za-z0-9-_.=]",
                    run.name
                ));
            }
            if !names.insert(run.name.as_str()) {
                return Err(config_err!("duplicate run name `{}`", run.name));
            }
            if run.train.algorithm == Algorithm::Pretrain {
                return Err(config_err!("run `{}`: fine-tuning runs cannot use `pretrain`", run.name));
            }
            run.train.validate()?;
        }
        if self.eval.ddim_steps.is_empty() || self.eval.splits.is_empty() {
            return Err(config_err!("eval needs at least one step count and one split"));
        }
        self.eval.guidance.validate()?;
        if self.plot.window == 0 {
            return Err(config_err!("plot window must be at least 1"));
        }
        if let Some(c) = self.frames.condition {
            if c == 0 || c > self.dataset.classes {
                return Err(config_err!("frames.condition {c} is not a class id"));
            }
        }
        if self.frames.zoom == 0 || !(self.frames.range[0] < self.frames.range[1]) {
            return Err(config_err!("frames need a positive zoom and an increasing range"));
        }
        let g = &self.gradcheck;
        if g.points == 0 || g.batch_size == 0 || !(g.fd_step > 0.0) || !(g.tolerance > 0.0) {
            return Err(config_err!("gradcheck settings must be positive"));
        }
        Ok(())
    }

    /// The conditions named by `eval.splits`, ascending.
    pub fn eval_conditions(&self) -> Vec<Condition> {
        let mut out: Vec<Condition> = self
            .eval
            .splits
            .iter()
            .flat_map(|&s| self.dataset.conditions_in(s))
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn frame_condition(&self) -> Condition {
        let held = self.dataset.conditions_in(Split::HeldOutClass);
        match self.frames.condition {
            Some(c) => Condition(c),
            None => held.first().copied().unwrap_or(Condition(1)),
        }
    }

    pub fn pretrain_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            algorithm: Algorithm::Pretrain,
            steps: self.pretrain.steps,
            seed,
            schedule: self.schedule,
            learning_rate: self.pretrain.learning_rate,
            batch_size: self.pretrain.batch_size,
            p_drop: self.pretrain.p_drop,
            reward: self.reward.id.clone(),
            ..TrainConfig::default()
        }
    }
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
