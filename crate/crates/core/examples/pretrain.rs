//! Pretrain the base denoiser on the degraded synthetic data and look at
//! what it generates. Pass a step count to train longer (default 600).

use vidtune::finetune::save_reports_csv;
use vidtune::workbench::*;

fn main() -> vidtune::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let mut cfg = ExperimentConfig::parse("")?;
    cfg.pretrain.steps = steps;
    let s = setup(&cfg, 0)?;
    let (ck, reports) = pretrain(&cfg, &s, 0)?;
    for r in reports.iter().step_by((steps / 6).max(1)).chain(reports.last()) {
        println!("step {:>5}: loss {:.4}", r.step, r.loss);
    }

    let rep = &evaluate_all(&cfg, &s, &ck)?[0];
    for (split, st) in &rep.per_split {
        println!(
            "{}: reward {:.4} ± {:.4}, smoothness {:.3}, watermark {:.4}",
            split.tag(),
            st.mean_reward,
            st.reward_std,
            st.smoothness,
            st.watermark_score
        );
    }
    let out = std::env::temp_dir().join("vidtune-pretrain-example");
    std::fs::create_dir_all(&out).map_err(|e| vidtune::Error::io(&out, e))?;
    save_reports_csv(out.join("train.csv"), &reports)?;
    ck.save(out.join("checkpoint"))?;
    println!("wrote {}", out.display());
    Ok(())
}
