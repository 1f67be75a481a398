//! Tape gradients of the pretraining loss, the frame reward and the
//! truncated edit loss against finite differences.

use vidtune::workbench::{run_gradcheck, ExperimentConfig};

fn main() -> vidtune::Result<()> {
    let cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/gradcheck.toml"))?;
    for row in run_gradcheck(&cfg, 0)? {
        println!(
            "{:<14} point {} ({:>4} parameters): {:.2e} {}",
            row.target,
            row.point,
            row.parameters,
            row.max_relative_error,
            if row.passed { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
