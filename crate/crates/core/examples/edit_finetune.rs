//! Fine-tune a pretrained base by editing data videos: corrupt each one to
//! the noise level, denoise the rest of the chain, score the result, and
//! backpropagate through the last step only. Reports held-out reward and
//! watermark before and after.

use vidtune::workbench::*;

fn main() -> vidtune::Result<()> {
    let cfg = ExperimentConfig::parse(
        r#"
[pretrain]
steps = 1000
learning_rate = 0.3

[finetune]
algorithm = "edit"
steps = 200
learning_rate = 10.0
tau = 0.6
aggregation = "tar"
"#,
    )?;
    let seed = 0;
    let s = setup(&cfg, seed)?;
    let (base, _) = pretrain(&cfg, &s, seed)?;
    let (tuned, reports) = fine_tune(&s, &base, &cfg.runs[0], seed)?;
    for r in reports.iter().step_by(40) {
        println!(
            "step {:>4}: training reward {:.4}, {} denoiser calls",
            r.step,
            r.mean_reward.unwrap_or(f64::NAN),
            r.denoiser_calls
        );
    }
    let unchanged = tuned.params == base.params;
    println!("base weights untouched: {unchanged}");

    let before = &evaluate_all(&cfg, &s, &base)?[0];
    let after = &evaluate_all(&cfg, &s, &tuned)?[0];
    for split in [Split::InDomain, Split::HeldOutClass] {
        let (b, a) = (before.split(split).unwrap(), after.split(split).unwrap());
        println!(
            "{:>14}: reward {:.4} -> {:.4}, watermark {:.4} -> {:.4}",
            split.tag(),
            b.mean_reward,
            a.mean_reward,
            b.watermark_score,
            a.watermark_score
        );
    }
    Ok(())
}
