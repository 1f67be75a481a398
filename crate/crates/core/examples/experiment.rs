//! Run an experiment file end to end: pretrain (or load a checkpoint),
//! fine-tune every run, evaluate, and write CSVs, SVG plots and frame
//! strips.
//!
//! cargo run --release --example experiment -- configs/tau_sweep.toml /tmp/tau

use vidtune::workbench::*;

fn main() -> vidtune::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/smoke.toml").to_string());
    let out = args
        .next()
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("vidtune-experiment"));
    let result = run_experiment(&config, None, &out)?;

    println!("{:<16} {:>4} {:>10} {:>10} {:>10}", "run", "D", "reward", "smooth", "watermark");
    let base = result.base_evals.iter().map(|e| ("base", e));
    let runs = result.runs.iter().flat_map(|r| r.evals.iter().map(move |e| (r.name.as_str(), e)));
    for (name, e) in base.chain(runs) {
        let st = e.split(Split::HeldOutClass).unwrap_or(&e.overall);
        println!(
            "{name:<16} {:>4} {:>10.4} {:>10.3} {:>10.4}",
            e.ddim_steps, st.mean_reward, st.smoothness, st.watermark_score
        );
    }
    println!("artifacts in {}", result.dir.display());
    Ok(())
}
