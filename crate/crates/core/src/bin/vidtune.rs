use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use vidtune::checkpoint::Checkpoint;
use vidtune::error::{Error, Result};
use vidtune::finetune::save_reports_csv;
use vidtune::tensor::save_tensor;
use vidtune::workbench::plot::frame_strip_pgm;
use vidtune::workbench::*;

#[derive(Parser)]
#[command(version, about = "Reward fine-tuning of a toy latent video diffusion model")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Train a base denoiser on the synthetic dataset.
    Pretrain(Common),
    /// Fine-tune the base checkpoint once per configured run.
    Finetune(Common),
    /// Evaluate the base checkpoint.
    Eval(Common),
    /// Generate one video per evaluated condition.
    Sample(Common),
    /// Pretrain, fine-tune every run, evaluate, plot.
    Experiment(Common),
    /// Compare tape gradients with finite differences.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn load(c: &Common) -> Result<(ExperimentConfig, u64)> {
    let cfg = ExperimentConfig::load(&c.config)?;
    let seed = c.seed.unwrap_or(cfg.seed);
    mkdir(&c.out)?;
    Ok((cfg, seed))
}

fn base(cfg: &ExperimentConfig, s: &Setup, seed: u64, out: &Path) -> Result<Checkpoint> {
    let (ck, reports) = base_checkpoint(cfg, s, seed)?;
    if let Some(r) = reports {
        save_reports_csv(out.join("pretrain.csv"), &r)?;
        ck.save(out.join("base"))?;
        println!("pretrained base: {} steps", r.len());
    }
    Ok(ck)
}

fn write_eval(out: &Path, rows: &[(&str, &EvalReport)]) -> Result<()> {
    let path = out.join("eval.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(e.to_string()))?;
    for (run, rep) in rows {
        write_eval_rows(&mut w, run, rep)?;
        for (split, st) in &rep.per_split {
            println!(
                "{run} D={} {}: reward {:.4} ± {:.4}, TS {:.3}, watermark {:.4}",
                rep.ddim_steps,
                split.tag(),
                st.mean_reward,
                st.reward_std,
                st.smoothness,
                st.watermark_score
            );
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn run(verb: Verb) -> Result<()> {
    match verb {
        Verb::Pretrain(c) => {
            let (cfg, seed) = load(&c)?;
            let s = setup(&cfg, seed)?;
            let (ck, reports) = pretrain(&cfg, &s, seed)?;
            save_reports_csv(c.out.join("train.csv"), &reports)?;
            ck.save(c.out.join("checkpoint"))?;
            let tail = &reports[reports.len().saturating_sub(100)..];
            let loss = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64;
            println!("{} steps, mean loss over the last {}: {loss:.5}", reports.len(), tail.len());
        }
        Verb::Finetune(c) => {
            let (cfg, seed) = load(&c)?;
            let s = setup(&cfg, seed)?;
            let ck = base(&cfg, &s, seed, &c.out)?;
            for r in &cfg.runs {
                let (tuned, reports) = fine_tune(&s, &ck, r, seed)?;
                let dir = c.out.join("runs").join(&r.name);
                mkdir(&dir)?;
                save_reports_csv(dir.join("train.csv"), &reports)?;
                tuned.save(dir.join("checkpoint"))?;
                let rewards: Vec<f64> = reports.iter().filter_map(|r| r.mean_reward).collect();
                let tail = &rewards[rewards.len().saturating_sub(50)..];
                println!(
                    "{}: {} steps, mean training reward over the last {}: {:.4}",
                    r.name,
                    reports.len(),
                    tail.len(),
                    tail.iter().sum::<f64>() / tail.len().max(1) as f64
                );
            }
        }
        Verb::Eval(c) => {
            let (cfg, seed) = load(&c)?;
            let s = setup(&cfg, seed)?;
            let ck = base(&cfg, &s, seed, &c.out)?;
            let reps = evaluate_all(&cfg, &s, &ck)?;
            write_eval(&c.out, &reps.iter().map(|r| ("base", r)).collect::<Vec<_>>())?;
        }
        Verb::Sample(c) => {
            let (mut cfg, seed) = load(&c)?;
            let s = setup(&cfg, seed)?;
            let ck = base(&cfg, &s, seed, &c.out)?;
            for cond in cfg.eval_conditions() {
                cfg.frames.condition = Some(cond.0);
                let v = frame_video(&cfg, &ck)?;
                save_tensor(c.out.join(format!("class-{}.tnsr", cond.0)), v.tensor())?;
                let pgm = frame_strip_pgm(&[&v], cfg.frames.zoom, cfg.frames.range)?;
                let path = c.out.join(format!("class-{}.pgm", cond.0));
                std::fs::write(&path, pgm).map_err(|e| Error::io(&path, e))?;
                println!("class {}: reward {:.4}", cond.0, {
                    let plan = vidtune::reward::SegPlan::segment_starts(v.frames(), cfg.eval.segments)?;
                    let co = vidtune::reward::tar_coefficients(&plan, 0.0)?;
                    vidtune::reward::video_reward(&s.reward, &v, cond, &plan, &co, vidtune::reward::Aggregation::Mean)?
                });
            }
        }
        Verb::Experiment(c) => {
            let (cfg, seed) = load(&c)?;
            let out = run_experiment_config(&cfg, seed, &c.out)?;
            let mut rows: Vec<(&str, &EvalReport)> = out.base_evals.iter().map(|r| ("base", r)).collect();
            for r in &out.runs {
                rows.extend(r.evals.iter().map(|e| (r.name.as_str(), e)));
            }
            for (run, rep) in rows {
                if let Some(st) = rep.split(Split::HeldOutClass) {
                    println!("{run} D={}: held-out reward {:.4}, watermark {:.4}", rep.ddim_steps, st.mean_reward, st.watermark_score);
                }
            }
            println!("artifacts in {}", out.dir.display());
        }
        Verb::Gradcheck(c) => {
            let (cfg, seed) = load(&c)?;
            let rows = run_gradcheck(&cfg, seed)?;
            let path = c.out.join("gradcheck.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(e.to_string()))?;
            for r in &rows {
                w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
                println!(
                    "{:<14} point {} ({} parameters): max relative error {:.2e} {}",
                    r.target,
                    r.point,
                    r.parameters,
                    r.max_relative_error,
                    if r.passed { "ok" } else { "FAIL" }
                );
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            let failed = rows.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Error::Contract(format!("{failed} gradient checks exceeded the tolerance")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
