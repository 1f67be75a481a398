//! A LoRA adapter starts as an exact no-op, changes the output once its
//! factors move, and folds into the base weights for inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidtune::checkpoint::Checkpoint;
use vidtune::denoiser::{adapter_fraction, lora_merge, Condition, Denoiser, DenoiserConfig, DenoiserParams, LoraAdapter, LoraConfig, ParamSet};
use vidtune::latent::LatentVideo;
use vidtune::schedule::ScheduleConfig;
use vidtune::tensor::Tensor;

fn main() -> vidtune::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = DenoiserConfig::default();
    let params = DenoiserParams::init(cfg, &mut rng)?;
    let mut adapter = LoraAdapter::init(&cfg, LoraConfig::default(), &mut rng)?;
    println!(
        "base {} parameters, adapter {} ({:.1}%)",
        params.num_params(),
        adapter.num_params(),
        100.0 * adapter_fraction(&params, &adapter)
    );

    let z = LatentVideo::randn(cfg.video, &mut rng);
    let base = Denoiser::new(&params, None)?.predict_eps(&z, Condition(2), 301)?;
    let fresh = Denoiser::new(&params, Some(&adapter))?.predict_eps(&z, Condition(2), 301)?;
    println!("fresh adapter changes the output by {}", base.tensor().max_abs_diff(fresh.tensor())?);

    for f in &mut adapter.layers {
        f.up = Tensor::randn_scaled(f.up.shape(), 0.05, &mut rng);
    }
    let adapted = Denoiser::new(&params, Some(&adapter))?.predict_eps(&z, Condition(2), 301)?;
    let merged = lora_merge(&params, &adapter)?;
    let folded = Denoiser::new(&merged, None)?.predict_eps(&z, Condition(2), 301)?;
    println!("moved adapter changes it by {:.4}", base.tensor().max_abs_diff(adapted.tensor())?);
    println!("merged weights match the adapter within {:.1e}", adapted.tensor().max_abs_diff(folded.tensor())?);

    let dir = std::env::temp_dir().join("vidtune-lora-example");
    let mut ck = Checkpoint::new(ScheduleConfig::default(), 20, params);
    ck.adapter = Some(adapter);
    ck.save(&dir)?;
    let back = Checkpoint::load(&dir)?;
    println!("checkpoint round trip through {}: {}", dir.display(), back == ck);
    Ok(())
}
