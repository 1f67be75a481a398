//! The pretrain → fine-tune → evaluate pipeline and its artifacts.
//!
//! Layout of an output directory:
//!
//! ```text
//! manifest.toml            resolved run settings
//! base/train.csv           pretraining reports (absent when a checkpoint is given)
//! base/checkpoint/
//! runs/<name>/train.csv    fine-tuning reports
//! runs/<name>/checkpoint/
//! comparison.csv           evaluation of base and every run
//! plots/<column>.svg       one line per run, rebuilt from the train CSVs
//! frames/*.pgm             one generated video per checkpoint, plus data
//! ```

use super::config::{ExperimentConfig, RunSpec};
use super::dataset::{gen_dataset, Dataset};
use super::eval::{evaluate, write_eval_rows, EvalReport};
use super::plot::{frame_strip_pgm, line_plot_svg, read_series, smooth};
use crate::checkpoint::Checkpoint;
use crate::denoiser::{Denoiser, DenoiserParams};
use crate::error::{Error, Result};
use crate::finetune::{run_training, save_reports_csv, StepReport, TrainConfig};
use crate::latent::LatentVideo;
use crate::reward::RewardSpec;
use crate::sampler::sample_full;
use crate::schedule::DdimPlan;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Independent seed for stream `stream` of an experiment seeded with `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut x = base ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const DATA_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const PRETRAIN_STREAM: u64 = 3;
const FINETUNE_STREAM: u64 = 4;

/// Dataset and reward shared by every stage.
pub struct Setup {
    pub data: Dataset,
    pub reward: RewardSpec,
}

pub fn setup(cfg: &ExperimentConfig, seed: u64) -> Result<Setup> {
    let data = gen_dataset(&cfg.dataset, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, DATA_STREAM)))?;
    let reward = cfg.reward.build(&cfg.dataset)?;
    Ok(Setup { data, reward })
}

/// Pretrains a freshly initialized denoiser on the whole dataset.
pub fn pretrain(cfg: &ExperimentConfig, s: &Setup, seed: u64) -> Result<(Checkpoint, Vec<StepReport>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, INIT_STREAM));
    let params = DenoiserParams::init(cfg.denoiser, &mut rng)?;
    let ddim = cfg.eval.ddim_steps[0];
    let init = Checkpoint::new(cfg.schedule, ddim, params);
    let train = cfg.pretrain_config(derive_seed(seed, PRETRAIN_STREAM));
    run_training(&train, &s.data.samples, &s.reward, &init, None)
}

/// The configured checkpoint, or a pretrained one when none is set.
pub fn base_checkpoint(
    cfg: &ExperimentConfig,
    s: &Setup,
    seed: u64,
) -> Result<(Checkpoint, Option<Vec<StepReport>>)> {
    match &cfg.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.params.config != cfg.denoiser {
                return Err(crate::error::config_err!(
                    "checkpoint {} was built for a different denoiser",
                    path.display()
                ));
            }
            Ok((ck, None))
        }
        None => pretrain(cfg, s, seed).map(|(ck, r)| (ck, Some(r))),
    }
}

/// Every run shares one fine-tuning seed, so runs differ only in settings.
pub fn run_train_config(run: &RunSpec, seed: u64) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(seed, FINETUNE_STREAM),
        ..run.train.clone()
    }
}

/// Fine-tunes `base` on the in-domain classes.
pub fn fine_tune(s: &Setup, base: &Checkpoint, run: &RunSpec, seed: u64) -> Result<(Checkpoint, Vec<StepReport>)> {
    let data = s.data.fine_tune_split();
    s.data.check_split(&data)?;
    run_training(&run_train_config(run, seed), &data, &s.reward, base, None)
}

/// One report per configured step count.
pub fn evaluate_all(cfg: &ExperimentConfig, s: &Setup, ck: &Checkpoint) -> Result<Vec<EvalReport>> {
    let conditions = cfg.eval_conditions();
    cfg.eval
        .ddim_steps
        .iter()
        .map(|&d| evaluate(ck, &conditions, &cfg.dataset, &s.reward, &cfg.eval.at(d)))
        .collect()
}

/// One video generated at the first evaluation step count.
pub fn frame_video(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<LatentVideo> {
    let sched = ck.schedule.build()?;
    let plan = DdimPlan::new(cfg.eval.ddim_steps[0], sched.steps())?;
    let merged = ck.merged()?;
    let model = Denoiser::new(&merged, None)?;
    sample_full(&model, cfg.frame_condition(), &sched, &plan, &cfg.eval.guidance, cfg.frames.seed)
}

pub struct RunOutcome {
    pub name: String,
    pub train: TrainConfig,
    pub reports: Vec<StepReport>,
    pub checkpoint: Checkpoint,
    pub evals: Vec<EvalReport>,
}

pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub seed: u64,
    pub base: Checkpoint,
    pub base_evals: Vec<EvalReport>,
    pub runs: Vec<RunOutcome>,
}

impl ExperimentOutcome {
    pub fn run(&self, name: &str) -> Option<&RunOutcome> {
        self.runs.iter().find(|r| r.name == name)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'a str,
    seed: u64,
    runs: Vec<ManifestRun<'a>>,
}

#[derive(Serialize)]
struct ManifestRun<'a> {
    name: &'a str,
    train: &'a TrainConfig,
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn run_one(cfg: &ExperimentConfig, s: &Setup, base: &Checkpoint, run: &RunSpec, seed: u64) -> Result<RunOutcome> {
    let (checkpoint, reports) = fine_tune(s, base, run, seed)?;
    let evals = evaluate_all(cfg, s, &checkpoint)?;
    Ok(RunOutcome {
        name: run.name.clone(),
        train: run_train_config(run, seed),
        reports,
        checkpoint,
        evals,
    })
}

/// Runs the whole pipeline into `out`. Independent runs execute on
/// separate threads; every artifact is a function of the config and seed.
pub fn run_experiment_config(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    mkdir(out)?;
    let s = setup(cfg, seed)?;
    let (base, pre_reports) = base_checkpoint(cfg, &s, seed)?;
    let base_dir = out.join("base");
    mkdir(&base_dir)?;
    if let Some(r) = &pre_reports {
        save_reports_csv(base_dir.join("train.csv"), r)?;
    }
    base.save(base_dir.join("checkpoint"))?;
    let base_evals = evaluate_all(cfg, &s, &base)?;

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).max(1);
    let mut runs = Vec::with_capacity(cfg.runs.len());
    for chunk in cfg.runs.chunks(workers) {
        let results: Vec<Result<RunOutcome>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|run| scope.spawn(|| run_one(cfg, &s, &base, run, seed)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fine-tuning thread panicked"))
                .collect()
        });
        for r in results {
            runs.push(r?);
        }
    }

    let manifest = Manifest {
        name: &cfg.name,
        seed,
        runs: runs
            .iter()
            .map(|r| ManifestRun {
                name: &r.name,
                train: &r.train,
            })
            .collect(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    write(&out.join("manifest.toml"), &text)?;

    for r in &runs {
        let dir = out.join("runs").join(&r.name);
        mkdir(&dir)?;
        save_reports_csv(dir.join("train.csv"), &r.reports)?;
        r.checkpoint.save(dir.join("checkpoint"))?;
    }

    let cmp = out.join("comparison.csv");
    let mut w = csv::Writer::from_path(&cmp).map_err(|e| Error::Format(e.to_string()))?;
    for rep in &base_evals {
        write_eval_rows(&mut w, "base", rep)?;
    }
    for r in &runs {
        for rep in &r.evals {
            write_eval_rows(&mut w, &r.name, rep)?;
        }
    }
    w.flush().map_err(|e| Error::io(&cmp, e))?;

    write_plots(cfg, out, &runs.iter().map(|r| r.name.as_str()).collect::<Vec<_>>())?;

    let frames = out.join("frames");
    mkdir(&frames)?;
    let (zoom, range) = (cfg.frames.zoom, cfg.frames.range);
    let c = cfg.frame_condition();
    let sample = s
        .data
        .samples
        .iter()
        .find(|(_, sc)| *sc == c)
        .map(|(v, _)| v.clone())
        .unwrap_or_else(|| cfg.dataset.clean_video(c));
    let clean = cfg.dataset.clean_video(c);
    write(&frames.join("data.pgm"), &frame_strip_pgm(&[&clean, &sample], zoom, range)?)?;
    let base_video = frame_video(cfg, &base)?;
    write(&frames.join("base.pgm"), &frame_strip_pgm(&[&base_video], zoom, range)?)?;
    for r in &runs {
        let v = frame_video(cfg, &r.checkpoint)?;
        write(
            &frames.join(format!("{}.pgm", r.name)),
            &frame_strip_pgm(&[&base_video, &v], zoom, range)?,
        )?;
    }

    Ok(ExperimentOutcome {
        dir: out.to_path_buf(),
        seed,
        base,
        base_evals,
        runs,
    })
}

/// Reads the runs' train CSVs back and draws one SVG per plotted column.
pub fn write_plots(cfg: &ExperimentConfig, out: &Path, runs: &[&str]) -> Result<()> {
    let dir = out.join("plots");
    mkdir(&dir)?;
    let title = match &cfg.sweep_key {
        Some(k) => format!("{} ({k} sweep)", cfg.name),
        None => cfg.name.clone(),
    };
    for y in &cfg.plot.y {
        let mut series = Vec::with_capacity(runs.len());
        for name in runs {
            let path = out.join("runs").join(name).join("train.csv");
            series.push(smooth(&read_series(&path, &cfg.plot.x, y, name)?, cfg.plot.window));
        }
        let y_label = if cfg.plot.window > 1 {
            format!("{y} (mean of last {})", cfg.plot.window)
        } else {
            y.clone()
        };
        write(&dir.join(format!("{y}.svg")), &line_plot_svg(&title, &cfg.plot.x, &y_label, &series))?;
    }
    Ok(())
}

/// Loads `path` and runs it; `seed` overrides the file's seed.
pub fn run_experiment(path: impl AsRef<Path>, seed: Option<u64>, out: impl AsRef<Path>) -> Result<ExperimentOutcome> {
    let cfg = ExperimentConfig::load(path)?;
    let seed = seed.unwrap_or(cfg.seed);
    run_experiment_config(&cfg, seed, out.as_ref())
}
