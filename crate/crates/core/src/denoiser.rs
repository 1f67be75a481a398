//! Conditional noise predictor with low-rank adapters.
//!
//! Each frame is flattened and concatenated with a sinusoidal timestep
//! embedding and a learned condition embedding, passed through a two-layer
//! tanh trunk, and the per-frame outputs are then mixed across time by an
//! `F × F` affine map. The input latent is added back at the end, so the
//! network learns the residual `ε̂ − z_t`, which is close to zero at high
//! noise levels. The two trunk layers and the mixer can carry LoRA
//! adapters: the effective weight of an adapted layer is `W + s·B·A`.

use crate::error::{config_err, shape_err, Result};
use crate::latent::{stack_rows, unstack_rows, LatentVideo, VideoShape};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

/// Class code; 0 is the null condition used for unconditional prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Condition(pub usize);

impl Condition {
    pub const NULL: Condition = Condition(0);

    pub fn is_null(self) -> bool {
        self.0 == 0
    }
}

/// Replaces `c` by the null condition with probability `p`.
pub fn drop_condition<R: Rng + ?Sized>(c: Condition, p: f64, rng: &mut R) -> Result<Condition> {
    if !(0.0..=1.0).contains(&p) {
        return Err(config_err!("condition dropout probability {p} outside [0, 1]"));
    }
    Ok(if rng.random_bool(p) { Condition::NULL } else { c })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub video: VideoShape,
    /// Number of non-null classes `C`.
    pub classes: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            video: VideoShape::default(),
            classes: 8,
            time_dim: 32,
            cond_dim: 16,
            hidden: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn trunk_in(&self) -> usize {
        self.video.frame_len() + self.time_dim + self.cond_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.video.validate()?;
        if self.classes == 0 || self.hidden == 0 || self.cond_dim == 0 {
            return Err(config_err!("denoiser widths and class count must be positive"));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(config_err!("time embedding width must be positive and even"));
        }
        Ok(())
    }

    /// `(in, out)` of an adaptable layer.
    pub fn layer_dims(&self, layer: Layer) -> (usize, usize) {
        match layer {
            Layer::Trunk0 => (self.trunk_in(), self.hidden),
            Layer::Trunk1 => (self.hidden, self.video.frame_len()),
            Layer::Mixer => (self.video.frames, self.video.frames),
        }
    }
}

/// The affine layers an adapter can target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Trunk0,
    Trunk1,
    Mixer,
}

impl Layer {
    pub const ALL: [Layer; 3] = [Layer::Trunk0, Layer::Trunk1, Layer::Mixer];

    pub fn weight_name(self) -> &'static str {
        match self {
            Layer::Trunk0 => "trunk.0.weight",
            Layer::Trunk1 => "trunk.1.weight",
            Layer::Mixer => "mixer.weight",
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Layer::Trunk0 => "trunk.0",
            Layer::Trunk1 => "trunk.1",
            Layer::Mixer => "mixer",
        }
    }
}

pub const COND_EMBED: &str = "cond_embed";
pub const TRUNK0_BIAS: &str = "trunk.0.bias";
pub const TRUNK1_BIAS: &str = "trunk.1.bias";
pub const MIXER_BIAS: &str = "mixer.bias";

/// Names and tensors of a trainable parameter collection.
pub trait ParamSet {
    fn named(&self) -> Vec<(String, &Tensor)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Plain gradient descent on every tensor that has a gradient entry.
    fn descend(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        for (name, t) in self.named_mut() {
            if let Some(g) = grads.get(&name) {
                t.axpy(-lr, g)?;
            }
        }
        Ok(())
    }
}

/// Base weights. Affine weights are stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub cond_embed: Tensor,
    pub trunk0_weight: Tensor,
    pub trunk0_bias: Tensor,
    pub trunk1_weight: Tensor,
    pub trunk1_bias: Tensor,
    pub mixer_weight: Tensor,
    pub mixer_bias: Tensor,
}

impl DenoiserParams {
    pub fn init<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (in0, h) = config.layer_dims(Layer::Trunk0);
        let p = config.video.frame_len();
        let f = config.video.frames;
        let mut mixer = Tensor::randn_scaled(&[f, f], 0.05 / (f as f64).sqrt(), rng);
        for i in 0..f {
            mixer.data_mut()[i * f + i] += 1.0;
        }
        Ok(DenoiserParams {
            config,
            cond_embed: Tensor::randn(&[config.classes + 1, config.cond_dim], rng),
            trunk0_weight: Tensor::randn_scaled(&[h, in0], (1.0 / in0 as f64).sqrt(), rng),
            trunk0_bias: Tensor::zeros(&[h]),
            trunk1_weight: Tensor::randn_scaled(&[p, h], (1.0 / h as f64).sqrt(), rng),
            trunk1_bias: Tensor::zeros(&[p]),
            mixer_weight: mixer,
            mixer_bias: Tensor::zeros(&[f]),
        })
    }

    pub fn weight(&self, layer: Layer) -> &Tensor {
        match layer {
            Layer::Trunk0 => &self.trunk0_weight,
            Layer::Trunk1 => &self.trunk1_weight,
            Layer::Mixer => &self.mixer_weight,
        }
    }

    fn weight_mut(&mut self, layer: Layer) -> &mut Tensor {
        match layer {
            Layer::Trunk0 => &mut self.trunk0_weight,
            Layer::Trunk1 => &mut self.trunk1_weight,
            Layer::Mixer => &mut self.mixer_weight,
        }
    }

    /// Rebuilds parameters from named tensors, checking every shape.
    pub fn from_named(
        config: DenoiserConfig,
        mut get: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = get(name).ok_or_else(|| config_err!("missing parameter `{name}`"))?;
            if t.shape() != shape {
                return Err(shape_err!("`{name}` has shape {:?}, expected {shape:?}", t.shape()));
            }
            Ok(t)
        };
        let (in0, h) = config.layer_dims(Layer::Trunk0);
        let p = config.video.frame_len();
        let f = config.video.frames;
        Ok(DenoiserParams {
            config,
            cond_embed: take(COND_EMBED, &[config.classes + 1, config.cond_dim])?,
            trunk0_weight: take(Layer::Trunk0.weight_name(), &[h, in0])?,
            trunk0_bias: take(TRUNK0_BIAS, &[h])?,
            trunk1_weight: take(Layer::Trunk1.weight_name(), &[p, h])?,
            trunk1_bias: take(TRUNK1_BIAS, &[p])?,
            mixer_weight: take(Layer::Mixer.weight_name(), &[f, f])?,
            mixer_bias: take(MIXER_BIAS, &[f])?,
        })
    }
}

impl ParamSet for DenoiserParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            (COND_EMBED.into(), &self.cond_embed),
            (Layer::Trunk0.weight_name().into(), &self.trunk0_weight),
            (TRUNK0_BIAS.into(), &self.trunk0_bias),
            (Layer::Trunk1.weight_name().into(), &self.trunk1_weight),
            (TRUNK1_BIAS.into(), &self.trunk1_bias),
            (Layer::Mixer.weight_name().into(), &self.mixer_weight),
            (MIXER_BIAS.into(), &self.mixer_bias),
        ]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            (COND_EMBED.into(), &mut self.cond_embed),
            (Layer::Trunk0.weight_name().into(), &mut self.trunk0_weight),
            (TRUNK0_BIAS.into(), &mut self.trunk0_bias),
            (Layer::Trunk1.weight_name().into(), &mut self.trunk1_weight),
            (TRUNK1_BIAS.into(), &mut self.trunk1_bias),
            (Layer::Mixer.weight_name().into(), &mut self.mixer_weight),
            (MIXER_BIAS.into(), &mut self.mixer_bias),
        ]
    }
}

/// Low-rank factors for one layer: `down` is `r × in`, `up` is `out × r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    pub layer: Layer,
    pub down: Tensor,
    pub up: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub scale: f64,
    pub layers: Vec<LoraFactors>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub scale: f64,
    /// Std of the Gaussian init of the down-projection.
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            scale: 1.0,
            init_std: 0.02,
        }
    }
}

impl LoraAdapter {
    /// Gaussian `down`, zero `up` on every adaptable layer: the adapted model
    /// starts out identical to the base.
    pub fn init<R: Rng + ?Sized>(
        config: &DenoiserConfig,
        lora: LoraConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if lora.rank == 0 {
            return Err(config_err!("LoRA rank must be positive"));
        }
        let layers = Layer::ALL
            .iter()
            .map(|&layer| {
                let (inp, out) = config.layer_dims(layer);
                LoraFactors {
                    layer,
                    down: Tensor::randn_scaled(&[lora.rank, inp], lora.init_std, rng),
                    up: Tensor::zeros(&[out, lora.rank]),
                }
            })
            .collect();
        Ok(LoraAdapter {
            rank: lora.rank,
            scale: lora.scale,
            layers,
        })
    }

    pub fn factors(&self, layer: Layer) -> Option<&LoraFactors> {
        self.layers.iter().find(|f| f.layer == layer)
    }

    pub fn down_name(layer: Layer) -> String {
        format!("lora.{}.down", layer.tag())
    }

    pub fn up_name(layer: Layer) -> String {
        format!("lora.{}.up", layer.tag())
    }

    /// `s·B·A` for one layer, `out × in`.
    pub fn delta(&self, layer: Layer) -> Option<Result<Tensor>> {
        self.factors(layer)
            .map(|f| Ok(f.up.matmul(&f.down)?.scale(self.scale)))
    }

    pub fn check_against(&self, config: &DenoiserConfig) -> Result<()> {
        for f in &self.layers {
            let (inp, out) = config.layer_dims(f.layer);
            if f.down.shape() != [self.rank, inp] || f.up.shape() != [out, self.rank] {
                return Err(shape_err!(
                    "adapter for {:?} has down {:?} / up {:?}, layer is {out} x {inp} at rank {}",
                    f.layer,
                    f.down.shape(),
                    f.up.shape(),
                    self.rank
                ));
            }
        }
        Ok(())
    }
}

impl ParamSet for LoraAdapter {
    fn named(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .flat_map(|f| {
                [
                    (LoraAdapter::down_name(f.layer), &f.down),
                    (LoraAdapter::up_name(f.layer), &f.up),
                ]
            })
            .collect()
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .flat_map(|f| {
                let layer = f.layer;
                [
                    (LoraAdapter::down_name(layer), &mut f.down),
                    (LoraAdapter::up_name(layer), &mut f.up),
                ]
            })
            .collect()
    }
}

/// Folds the adapter into the base weights: `W' = W + s·B·A`.
pub fn lora_merge(params: &DenoiserParams, adapter: &LoraAdapter) -> Result<DenoiserParams> {
    adapter.check_against(&params.config)?;
    let mut merged = params.clone();
    for f in &adapter.layers {
        let delta = f.up.matmul(&f.down)?.scale(adapter.scale);
        merged.weight_mut(f.layer).axpy(1.0, &delta)?;
    }
    Ok(merged)
}

/// Sinusoidal embedding of a timestep: `[sin(t·ω_i)…, cos(t·ω_i)…]`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Anything that predicts noise for a `(B·F) × P` row block of videos.
pub trait NoisePredictor {
    fn video_shape(&self) -> VideoShape;

    /// One prediction per video; `conds` and `ts` have one entry per video.
    fn predict_rows(&self, z: &Tensor, conds: &[Condition], ts: &[usize]) -> Result<Tensor>;
}

/// Tape handles for base weights and (optionally) adapter factors.
pub struct Bound {
    cond_embed: Var,
    weights: [Var; 3],
    trunk0_bias: Var,
    trunk1_bias: Var,
    mixer_bias: Var,
    lora: Option<([(Var, Var); 3], f64)>,
}

/// How parameters enter a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    /// Anonymous constants: nothing is differentiable.
    Frozen,
    /// Named leaves; `true` marks them trainable.
    Named(bool),
}

/// A parameter set plus optional adapter, with a forward-call counter.
pub struct Denoiser<'a> {
    pub params: &'a DenoiserParams,
    pub adapter: Option<&'a LoraAdapter>,
    calls: AtomicU64,
}

impl<'a> Denoiser<'a> {
    pub fn new(params: &'a DenoiserParams, adapter: Option<&'a LoraAdapter>) -> Result<Self> {
        if let Some(a) = adapter {
            a.check_against(&params.config)?;
        }
        Ok(Denoiser {
            params,
            adapter,
            calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.params.config
    }

    /// Per-video forward evaluations since construction.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    /// Places parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape, base: Binding, adapter: Binding) -> Result<Bound> {
        let leaf = |tape: &mut Tape, name: &str, t: &Tensor, b: Binding| match b {
            Binding::Frozen => tape.constant(t.clone()),
            Binding::Named(true) => tape.param(name, t.clone()),
            Binding::Named(false) => tape.input(name, t.clone()),
        };
        let p = self.params;
        let f = p.config.video.frames;
        let cond_embed = leaf(tape, COND_EMBED, &p.cond_embed, base)?;
        let mut weights = Vec::with_capacity(3);
        for layer in Layer::ALL {
            weights.push(leaf(tape, layer.weight_name(), p.weight(layer), base)?);
        }
        let trunk0_bias = leaf(tape, TRUNK0_BIAS, &p.trunk0_bias, base)?;
        let trunk1_bias = leaf(tape, TRUNK1_BIAS, &p.trunk1_bias, base)?;
        let mixer_bias = leaf(tape, MIXER_BIAS, &p.mixer_bias, base)?;
        let mixer_bias = tape.reshape(mixer_bias, &[f, 1])?;
        let lora = match self.adapter {
            None => None,
            Some(a) => {
                let mut pairs = Vec::with_capacity(3);
                for layer in Layer::ALL {
                    let fac = a
                        .factors(layer)
                        .ok_or_else(|| config_err!("adapter lacks layer {layer:?}"))?;
                    let d = leaf(tape, &LoraAdapter::down_name(layer), &fac.down, adapter)?;
                    let u = leaf(tape, &LoraAdapter::up_name(layer), &fac.up, adapter)?;
                    pairs.push((d, u));
                }
                Some(([pairs[0], pairs[1], pairs[2]], a.scale))
            }
        };
        Ok(Bound {
            cond_embed,
            weights: [weights[0], weights[1], weights[2]],
            trunk0_bias,
            trunk1_bias,
            mixer_bias,
            lora,
        })
    }

    /// `x @ Wᵀ (+ s·(x @ Aᵀ) @ Bᵀ)` for a trunk layer.
    fn trunk_linear(&self, tape: &mut Tape, bound: &Bound, x: Var, i: usize) -> Result<Var> {
        let wt = tape.transpose(bound.weights[i])?;
        let mut y = tape.matmul(x, wt)?;
        if let Some((pairs, s)) = &bound.lora {
            let (d, u) = pairs[i];
            let dt = tape.transpose(d)?;
            let ut = tape.transpose(u)?;
            let low = tape.matmul(x, dt)?;
            let low = tape.matmul(low, ut)?;
            let low = tape.scale(low, *s)?;
            y = tape.add(y, low)?;
        }
        Ok(y)
    }

    /// Forward pass on a `(B·F) × P` row block holding `B` videos.
    /// Returns the predicted noise in the same layout.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z: Var,
        conds: &[Condition],
        ts: &[usize],
    ) -> Result<Var> {
        let cfg = &self.params.config;
        let (f, p) = (cfg.video.frames, cfg.video.frame_len());
        let b = conds.len();
        if ts.len() != b || b == 0 {
            return Err(shape_err!("{b} conditions vs {} timesteps", ts.len()));
        }
        if tape.shape(z) != [b * f, p] {
            return Err(shape_err!(
                "denoiser input {:?}, expected [{}, {p}]",
                tape.shape(z),
                b * f
            ));
        }
        let rows = b * f;
        let mut temb = Vec::with_capacity(rows * cfg.time_dim);
        let mut onehot = vec![0.0; rows * (cfg.classes + 1)];
        for (i, (c, &t)) in conds.iter().zip(ts).enumerate() {
            if c.0 > cfg.classes {
                return Err(config_err!("condition {} outside [0, {}]", c.0, cfg.classes));
            }
            let e = time_embedding(t, cfg.time_dim);
            for r in 0..f {
                temb.extend_from_slice(&e);
                onehot[(i * f + r) * (cfg.classes + 1) + c.0] = 1.0;
            }
        }
        let temb = tape.constant(Tensor::from_parts(vec![rows, cfg.time_dim], temb))?;
        let onehot = tape.constant(Tensor::from_parts(vec![rows, cfg.classes + 1], onehot))?;
        let cemb = tape.matmul(onehot, bound.cond_embed)?;
        let x = tape.concat(&[z, temb, cemb], 1)?;

        let h = self.trunk_linear(tape, bound, x, 0)?;
        let b0 = tape.broadcast(bound.trunk0_bias, &[rows, cfg.hidden])?;
        let h = tape.add(h, b0)?;
        let h = tape.tanh(h)?;
        let e = self.trunk_linear(tape, bound, h, 1)?;
        let b1 = tape.broadcast(bound.trunk1_bias, &[rows, p])?;
        let e = tape.add(e, b1)?;

        let mut mix = bound.weights[2];
        if let Some((pairs, s)) = &bound.lora {
            let (d, u) = pairs[2];
            let delta = tape.matmul(u, d)?;
            let delta = tape.scale(delta, *s)?;
            mix = tape.add(mix, delta)?;
        }
        let mb = tape.broadcast(bound.mixer_bias, &[f, p])?;
        let mut outs = Vec::with_capacity(b);
        for i in 0..b {
            let ei = if b == 1 { e } else { tape.slice(e, 0, i * f, f)? };
            let oi = tape.matmul(mix, ei)?;
            outs.push(tape.add(oi, mb)?);
        }
        let out = if b == 1 { outs[0] } else { tape.concat(&outs, 0)? };
        let out = tape.add(out, z)?;
        self.calls.fetch_add(b as u64, Ordering::Relaxed);
        Ok(out)
    }

    /// ε̂(z_t, c, t) for one video.
    pub fn predict_eps(&self, z_t: &LatentVideo, c: Condition, t: usize) -> Result<LatentVideo> {
        let shape = self.params.config.video;
        if z_t.shape() != shape {
            return Err(shape_err!("video {:?} vs model {:?}", z_t.shape(), shape));
        }
        let out = self.predict_rows(&z_t.as_matrix(), &[c], &[t])?;
        LatentVideo::from_matrix(out, shape)
    }

    /// Per-video predictions for a batch.
    pub fn predict_eps_batch(
        &self,
        z: &[LatentVideo],
        conds: &[Condition],
        ts: &[usize],
    ) -> Result<Vec<LatentVideo>> {
        let out = self.predict_rows(&stack_rows(z)?, conds, ts)?;
        unstack_rows(&out, self.params.config.video)
    }
}

impl NoisePredictor for Denoiser<'_> {
    fn video_shape(&self) -> VideoShape {
        self.params.config.video
    }

    fn predict_rows(&self, z: &Tensor, conds: &[Condition], ts: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Binding::Frozen, Binding::Frozen)?;
        let zv = tape.constant(z.clone())?;
        let out = self.forward(&mut tape, &bound, zv, conds, ts)?;
        Ok(tape.value(out).clone())
    }
}

/// Added-over-base parameter ratio of an adapter.
pub fn adapter_fraction(params: &DenoiserParams, adapter: &LoraAdapter) -> f64 {
    adapter.num_params() as f64 / params.num_params() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff, max_relative_error};
    use crate::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            video: VideoShape {
                frames: 4,
                height: 2,
                width: 2,
                channels: 1,
            },
            classes: 3,
            time_dim: 4,
            cond_dim: 3,
            hidden: 5,
        }
    }

    fn random_adapter(cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> LoraAdapter {
        let mut a = LoraAdapter::init(cfg, LoraConfig::default(), rng).unwrap();
        for f in &mut a.layers {
            f.down = Tensor::randn_scaled(f.down.shape(), 0.3, rng);
            f.up = Tensor::randn_scaled(f.up.shape(), 0.3, rng);
        }
        a
    }

    #[test]
    fn output_shape_default_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = DenoiserParams::init(DenoiserConfig::default(), &mut rng).unwrap();
        let model = Denoiser::new(&params, None).unwrap();
        let z = LatentVideo::randn(VideoShape::default(), &mut rng);
        let e = model.predict_eps(&z, Condition(3), 500).unwrap();
        assert_eq!(e.tensor().shape(), &[16, 8, 8, 1]);
        assert_eq!(model.calls(), 1);
        let again = model.predict_eps(&z, Condition(3), 500).unwrap();
        assert_eq!(e, again);
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = DenoiserParams::init(DenoiserConfig::default(), &mut rng).unwrap();
        let adapter =
            LoraAdapter::init(&params.config, LoraConfig::default(), &mut rng).unwrap();
        let base = Denoiser::new(&params, None).unwrap();
        let adapted = Denoiser::new(&params, Some(&adapter)).unwrap();
        let z = LatentVideo::randn(params.config.video, &mut rng);
        let a = base.predict_eps(&z, Condition(2), 37).unwrap();
        let b = adapted.predict_eps(&z, Condition(2), 37).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(lora_merge(&params, &adapter).unwrap(), params);
    }

    #[test]
    fn merge_matches_adapted_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = DenoiserParams::init(DenoiserConfig::default(), &mut rng).unwrap();
        let adapter = random_adapter(&params.config, &mut rng);
        let merged = lora_merge(&params, &adapter).unwrap();
        let adapted = Denoiser::new(&params, Some(&adapter)).unwrap();
        let folded = Denoiser::new(&merged, None).unwrap();
        for i in 0..10 {
            let z = LatentVideo::randn(params.config.video, &mut rng);
            let c = Condition(i % 9);
            let a = adapted.predict_eps(&z, c, 1 + 97 * i).unwrap();
            let b = folded.predict_eps(&z, c, 1 + 97 * i).unwrap();
            assert!(a.tensor().max_abs_diff(b.tensor()).unwrap() < 1e-9);
        }
    }

    #[test]
    fn merge_rejects_mismatched_adapter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = DenoiserParams::init(DenoiserConfig::default(), &mut rng).unwrap();
        let adapter = LoraAdapter::init(&small(), LoraConfig::default(), &mut rng).unwrap();
        assert!(matches!(lora_merge(&params, &adapter), Err(Error::Shape(_))));
        assert!(Denoiser::new(&params, Some(&adapter)).is_err());
    }

    #[test]
    fn batch_equals_per_item() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = DenoiserParams::init(small(), &mut rng).unwrap();
        let adapter = random_adapter(&params.config, &mut rng);
        let model = Denoiser::new(&params, Some(&adapter)).unwrap();
        let zs: Vec<_> = (0..3).map(|_| LatentVideo::randn(params.config.video, &mut rng)).collect();
        let cs = [Condition(0), Condition(2), Condition(3)];
        let ts = [1, 400, 999];
        let batch = model.predict_eps_batch(&zs, &cs, &ts).unwrap();
        for i in 0..3 {
            let single = model.predict_eps(&zs[i], cs[i], ts[i]).unwrap();
            assert!(single.tensor().max_abs_diff(batch[i].tensor()).unwrap() < 1e-12);
        }
        assert_eq!(model.calls(), 6);
    }

    #[test]
    fn perturbing_one_frame_moves_another() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = DenoiserParams::init(DenoiserConfig::default(), &mut rng).unwrap();
        let model = Denoiser::new(&params, None).unwrap();
        let z = LatentVideo::randn(params.config.video, &mut rng);
        let base = model.predict_eps(&z, Condition(1), 100).unwrap();
        let mut t = z.tensor().clone();
        t.data_mut()[3 * 64 + 10] += 0.5;
        let moved = model.predict_eps(&LatentVideo::new(t).unwrap(), Condition(1), 100).unwrap();
        let changed_other = (0..16)
            .filter(|&f| f != 3)
            .any(|f| base.frame(f).iter().zip(moved.frame(f)).any(|(a, b)| a != b));
        assert!(changed_other);
    }

    fn mse_of_output(
        params: &DenoiserParams,
        adapter: &LoraAdapter,
        z: &Tensor,
        base: Binding,
    ) -> Result<(Tensor, Tape)> {
        let model = Denoiser::new(params, Some(adapter))?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, base, Binding::Named(true))?;
        let zv = tape.constant(z.clone())?;
        let out = model.forward(&mut tape, &bound, zv, &[Condition(1), Condition(0)], &[3, 700])?;
        let sq = tape.square(out)?;
        let m = tape.mean(sq)?;
        tape.set_output(m);
        Ok((tape.value(m).clone(), tape))
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = DenoiserParams::init(small(), &mut rng).unwrap();
        let adapter = random_adapter(&params.config, &mut rng);
        let z = Tensor::randn(&[8, 4], &mut rng);
        let (_, tape) = mse_of_output(&params, &adapter, &z, Binding::Named(false)).unwrap();
        let grads = tape.grad(&Tensor::scalar(1.0)).unwrap();

        let leaves: BTreeMap<String, Tensor> = adapter
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let numeric = finite_diff(
            |l| {
                let mut a = adapter.clone();
                for (name, t) in a.named_mut() {
                    *t = l[&name].clone();
                }
                Ok(mse_of_output(&params, &a, &z, Binding::Frozen)?.0)
            },
            &leaves,
            1e-6,
        )
        .unwrap();
        for (name, num) in &numeric {
            let err = max_relative_error(grads.get(name).unwrap(), num).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
        // Frozen base leaves report exact zeros.
        for (name, _) in params.named() {
            assert!(grads.get(&name).unwrap().data().iter().all(|&v| v == 0.0), "{name}");
        }
    }

    #[test]
    fn dropout_extremes_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = Condition(4);
        assert!((0..1000).all(|_| drop_condition(c, 0.0, &mut rng).unwrap() == c));
        assert!((0..1000).all(|_| drop_condition(c, 1.0, &mut rng).unwrap().is_null()));
        let n = 100_000;
        let k = (0..n)
            .filter(|_| drop_condition(c, 0.1, &mut rng).unwrap().is_null())
            .count() as f64;
        let sigma = (n as f64 * 0.1 * 0.9).sqrt();
        assert!((k - 0.1 * n as f64).abs() < 3.0 * sigma, "{k}");
        assert!(drop_condition(c, 1.5, &mut rng).is_err());
    }

    #[test]
    fn adapter_fraction_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = DenoiserParams::init(DenoiserConfig::default(), &mut rng).unwrap();
        let adapter = LoraAdapter::init(&params.config, LoraConfig::default(), &mut rng).unwrap();
        // rank 4 over (112->64), (64->64), (16->16)
        assert_eq!(adapter.num_params(), 4 * (112 + 64) + 4 * (64 + 64) + 4 * (16 + 16));
        let frac = adapter_fraction(&params, &adapter);
        assert!(frac > 0.0 && frac < 1.0);
    }
}
