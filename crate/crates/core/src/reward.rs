//! Synthetic differentiable frame rewards and their aggregation over a video.
//!
//! A video is divided into `S` equal segments and one frame is drawn
//! uniformly from each ([`segvr_sample`]). Per-frame scores are combined
//! either by a plain mean or by the temporally attenuated mean
//! `R = (1/S)·Σ f_i·r_i` with `f_i = exp(−λ·|g(i) − F/2|)`, which favours
//! frames near the middle of the clip.
//!
//! The frame reward itself is
//!
//! ```text
//! r = 1 − mean((x − template_c)²) − ρ·⟨x, watermark⟩² + κ·mean|∇x|
//! ```
//!
//! where the watermark inner product only sees the corner patch.

use crate::denoiser::Condition;
use crate::latent::LatentVideo;
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    TemplateMatch,
    TemplateMatchWatermark,
}

/// A corner patch, anchored at pixel `(0, 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Watermark {
    /// `ph × pw × ch`.
    pub patch: Tensor,
}

impl Watermark {
    /// The patch embedded in an otherwise zero `h × w × ch` frame, flattened.
    pub fn full_frame(&self, height: usize, width: usize, channels: usize) -> Result<Vec<f64>> {
        let s = self.patch.shape();
        if s.len() != 3 || s[0] > height || s[1] > width || s[2] != channels {
            return Err(shape_err!(
                "watermark {:?} does not fit a {height}x{width}x{channels} frame",
                s
            ));
        }
        let mut out = vec![0.0; height * width * channels];
        for y in 0..s[0] {
            for x in 0..s[1] {
                for c in 0..channels {
                    out[(y * width + x) * channels + c] = self.patch.data()[(y * s[1] + x) * channels + c];
                }
            }
        }
        Ok(out)
    }
}

/// A named reward definition.
#[derive(Clone, Debug)]
pub struct RewardSpec {
    pub name: String,
    pub kind: RewardKind,
    /// `templates[c − 1]` is the `h × w × ch` target for condition `c`.
    pub templates: Vec<Tensor>,
    pub watermark: Watermark,
    pub rho: f64,
    pub kappa: f64,
    watermark_frame: Vec<f64>,
    gradient_op: Option<Tensor>,
}

impl RewardSpec {
    pub fn new(
        name: impl Into<String>,
        kind: RewardKind,
        templates: Vec<Tensor>,
        watermark: Watermark,
        rho: f64,
        kappa: f64,
    ) -> Result<Self> {
        let first = templates
            .first()
            .ok_or_else(|| config_err!("reward needs at least one template"))?;
        let dims = first.shape().to_vec();
        if dims.len() != 3 {
            return Err(shape_err!("templates must be h x w x ch, got {dims:?}"));
        }
        if templates.iter().any(|t| t.shape() != dims.as_slice() || !t.is_finite()) {
            return Err(config_err!("templates must share one finite h x w x ch shape"));
        }
        if !(rho >= 0.0 && kappa >= 0.0) {
            return Err(config_err!("reward weights must be non-negative (rho {rho}, kappa {kappa})"));
        }
        let rho = match kind {
            RewardKind::TemplateMatch => 0.0,
            RewardKind::TemplateMatchWatermark => rho,
        };
        let watermark_frame = watermark.full_frame(dims[0], dims[1], dims[2])?;
        let gradient_op = (kappa > 0.0).then(|| gradient_operator(dims[0], dims[1], dims[2]));
        Ok(RewardSpec {
            name: name.into(),
            kind,
            templates,
            watermark,
            rho,
            kappa,
            watermark_frame,
            gradient_op,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.templates[0].len()
    }

    pub fn template(&self, c: Condition) -> Result<&Tensor> {
        if c.is_null() {
            return Err(config_err!("the null condition has no reward template"));
        }
        self.templates
            .get(c.0 - 1)
            .ok_or_else(|| config_err!("no reward template for condition {}", c.0))
    }

    /// Records the reward of one frame (any shape with `h·w·ch` elements).
    pub fn frame_reward_on_tape(&self, tape: &mut Tape, frame: Var, c: Condition) -> Result<Var> {
        let n = self.frame_len();
        if tape.value(frame).len() != n {
            return Err(shape_err!(
                "frame has {} elements, reward expects {n}",
                tape.value(frame).len()
            ));
        }
        let x = tape.reshape(frame, &[n])?;
        let target = self.template(c)?.clone().reshape(&[n])?;
        let target = tape.constant(target)?;
        let diff = tape.sub(x, target)?;
        let sq = tape.square(diff)?;
        let mse = tape.mean(sq)?;
        let mut r = tape.scale(mse, -1.0)?;
        r = tape.offset(r, 1.0)?;
        if self.rho > 0.0 {
            let w = tape.constant(Tensor::from_parts(vec![n], self.watermark_frame.clone()))?;
            let prod = tape.mul(x, w)?;
            let ip = tape.sum(prod)?;
            let pen = tape.square(ip)?;
            let pen = tape.scale(pen, -self.rho)?;
            r = tape.add(r, pen)?;
        }
        if let Some(op) = &self.gradient_op {
            let g = tape.constant(op.clone())?;
            let col = tape.reshape(x, &[n, 1])?;
            let d = tape.matmul(g, col)?;
            let a = tape.abs(d)?;
            let m = tape.mean(a)?;
            let m = tape.scale(m, self.kappa)?;
            r = tape.add(r, m)?;
        }
        Ok(r)
    }

    /// Eager frame reward.
    pub fn frame_reward(&self, frame: &Tensor, c: Condition) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(frame.clone())?;
        let r = self.frame_reward_on_tape(&mut tape, x, c)?;
        tape.value(r).item()
    }
}

/// Forward differences along rows and columns as a dense matrix.
fn gradient_operator(h: usize, w: usize, ch: usize) -> Tensor {
    let n = h * w * ch;
    let idx = |y: usize, x: usize, c: usize| (y * w + x) * ch + c;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                if x + 1 < w {
                    let mut r = vec![0.0; n];
                    r[idx(y, x + 1, c)] = 1.0;
                    r[idx(y, x, c)] = -1.0;
                    rows.push(r);
                }
                if y + 1 < h {
                    let mut r = vec![0.0; n];
                    r[idx(y + 1, x, c)] = 1.0;
                    r[idx(y, x, c)] = -1.0;
                    rows.push(r);
                }
            }
        }
    }
    let m = rows.len();
    Tensor::from_parts(vec![m, n], rows.concat())
}

/// One sampled frame index per segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegPlan {
    pub frames: usize,
    pub indices: Vec<usize>,
}

impl SegPlan {
    fn check(frames: usize, segments: usize) -> Result<usize> {
        if segments == 0 || frames == 0 || frames % segments != 0 {
            return Err(config_err!("{segments} segments do not evenly divide {frames} frames"));
        }
        Ok(frames / segments)
    }

    /// The first frame of every segment.
    pub fn segment_starts(frames: usize, segments: usize) -> Result<Self> {
        let len = SegPlan::check(frames, segments)?;
        Ok(SegPlan {
            frames,
            indices: (0..segments).map(|i| i * len).collect(),
        })
    }

    pub fn segments(&self) -> usize {
        self.indices.len()
    }
}

/// Draws `g(i)` uniformly from `[(i−1)·F/S, i·F/S − 1]` for each segment.
pub fn segvr_sample<R: Rng + ?Sized>(frames: usize, segments: usize, rng: &mut R) -> Result<SegPlan> {
    let len = SegPlan::check(frames, segments)?;
    Ok(SegPlan {
        frames,
        indices: (0..segments)
            .map(|i| i * len + rng.random_range(0..len))
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TarCoeffs {
    pub lambda: f64,
    pub f: Vec<f64>,
}

/// `f_i = exp(−λ·|g(i) − F/2|)` with 0-based frame indices.
pub fn tar_coefficients(plan: &SegPlan, lambda: f64) -> Result<TarCoeffs> {
    if !(lambda >= 0.0) {
        return Err(config_err!("lambda_tar must be non-negative, got {lambda}"));
    }
    let center = plan.frames as f64 / 2.0;
    Ok(TarCoeffs {
        lambda,
        f: plan
            .indices
            .iter()
            .map(|&g| (-lambda * (g as f64 - center).abs()).exp())
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Plain mean over segments.
    Mean,
    /// `(1/S)·Σ f_i·r_i`.
    Tar,
}

pub fn aggregate_reward(scores: &[f64], coeffs: &TarCoeffs, mode: Aggregation) -> Result<f64> {
    let s = scores.len();
    if s == 0 || coeffs.f.len() != s {
        return Err(shape_err!("{s} scores vs {} coefficients", coeffs.f.len()));
    }
    Ok(match mode {
        Aggregation::Mean => scores.iter().sum::<f64>() / s as f64,
        Aggregation::Tar => {
            scores.iter().zip(&coeffs.f).map(|(r, f)| f * r).sum::<f64>() / s as f64
        }
    })
}

/// Tape version of [`aggregate_reward`].
pub fn aggregate_on_tape(
    tape: &mut Tape,
    scores: &[Var],
    coeffs: &TarCoeffs,
    mode: Aggregation,
) -> Result<Var> {
    let s = scores.len();
    if s == 0 || coeffs.f.len() != s {
        return Err(shape_err!("{s} scores vs {} coefficients", coeffs.f.len()));
    }
    let mut acc: Option<Var> = None;
    for (i, &r) in scores.iter().enumerate() {
        let w = match mode {
            Aggregation::Mean => 1.0,
            Aggregation::Tar => coeffs.f[i],
        };
        let term = tape.scale(r, w / s as f64)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Segmental reward of one video given as an `F × P` row block on the tape.
pub fn video_reward_on_tape(
    tape: &mut Tape,
    spec: &RewardSpec,
    video: Var,
    c: Condition,
    plan: &SegPlan,
    coeffs: &TarCoeffs,
    mode: Aggregation,
) -> Result<Var> {
    let mut scores = Vec::with_capacity(plan.segments());
    for &g in &plan.indices {
        let frame = tape.slice(video, 0, g, 1)?;
        scores.push(spec.frame_reward_on_tape(tape, frame, c)?);
    }
    aggregate_on_tape(tape, &scores, coeffs, mode)
}

/// Eager segmental reward of one video.
pub fn video_reward(
    spec: &RewardSpec,
    video: &LatentVideo,
    c: Condition,
    plan: &SegPlan,
    coeffs: &TarCoeffs,
    mode: Aggregation,
) -> Result<f64> {
    let scores = plan
        .indices
        .iter()
        .map(|&g| spec.frame_reward(&video.frame_tensor(g), c))
        .collect::<Result<Vec<_>>>()?;
    aggregate_reward(&scores, coeffs, mode)
}
