#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use vidtune::denoiser::{Condition, DenoiserConfig, DenoiserParams, Layer, LoraAdapter, LoraConfig, NoisePredictor};
use vidtune::finetune::{Algorithm, TrainConfig};
use vidtune::latent::{LatentVideo, VideoShape};
use vidtune::reward::{RewardKind, RewardSpec, Watermark};
use vidtune::sampler::GuidanceConfig;
use vidtune::tensor::Tensor;
use vidtune::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_shape() -> VideoShape {
    VideoShape {
        frames: 4,
        height: 2,
        width: 2,
        channels: 1,
    }
}

pub fn tiny_config() -> DenoiserConfig {
    DenoiserConfig {
        video: tiny_shape(),
        classes: 3,
        time_dim: 4,
        cond_dim: 2,
        hidden: 6,
    }
}

pub fn tiny_params(seed: u64) -> DenoiserParams {
    DenoiserParams::init(tiny_config(), &mut rng(seed)).unwrap()
}

/// An adapter with both factors random, so every adapter gradient is live.
pub fn random_adapter(config: &DenoiserConfig, seed: u64) -> LoraAdapter {
    let mut r = rng(seed);
    let mut a = LoraAdapter::init(config, LoraConfig::default(), &mut r).unwrap();
    for f in &mut a.layers {
        f.down = Tensor::randn_scaled(f.down.shape(), 0.3, &mut r);
        f.up = Tensor::randn_scaled(f.up.shape(), 0.3, &mut r);
    }
    a
}

pub fn adapter_leaves(a: &LoraAdapter) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for layer in Layer::ALL {
        let f = a.factors(layer).unwrap();
        out.insert(LoraAdapter::down_name(layer), f.down.clone());
        out.insert(LoraAdapter::up_name(layer), f.up.clone());
    }
    out
}

pub fn tiny_reward(name: &str, seed: u64) -> RewardSpec {
    let mut r = rng(seed);
    let templates = (0..3).map(|_| Tensor::randn_scaled(&[2, 2, 1], 0.5, &mut r)).collect();
    let watermark = Watermark {
        patch: Tensor::full(&[1, 1, 1], 0.6),
    };
    RewardSpec::new(name, RewardKind::TemplateMatchWatermark, templates, watermark, 0.5, 0.0).unwrap()
}

pub fn tiny_data(n: usize, seed: u64) -> Vec<(LatentVideo, Condition)> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let v = LatentVideo::new(Tensor::randn_scaled(&[4, 2, 2, 1], 0.5, &mut r)).unwrap();
            (v, Condition(1 + i % 3))
        })
        .collect()
}

pub fn tiny_train(algorithm: Algorithm, reward: &str) -> TrainConfig {
    TrainConfig {
        algorithm,
        steps: 3,
        ddim_steps: 5,
        batch_size: 2,
        segments: 2,
        learning_rate: 0.05,
        guidance: GuidanceConfig {
            enabled: true,
            weight: 2.0,
        },
        reward: reward.into(),
        ..Default::default()
    }
}

/// Predicts `ε̂ = a·z_t + b` elementwise, ignoring condition and time.
pub struct Linear {
    pub shape: VideoShape,
    pub a: f64,
    pub b: f64,
}

impl NoisePredictor for Linear {
    fn video_shape(&self) -> VideoShape {
        self.shape
    }

    fn predict_rows(&self, z: &Tensor, _: &[Condition], _: &[usize]) -> Result<Tensor> {
        Ok(z.map(|v| self.a * v + self.b))
    }
}
