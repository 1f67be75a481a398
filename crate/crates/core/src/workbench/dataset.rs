//! Synthetic class-conditional videos: one moving Gaussian blob per class,
//! degraded by blur, additive noise, and a corner watermark.

use crate::denoiser::Condition;
use crate::error::{config_err, contract_err, Result};
use crate::latent::{LatentVideo, VideoShape};
use crate::reward::{RewardKind, RewardSpec, Watermark};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::f64::consts::PI;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub video: VideoShape,
    pub classes: usize,
    pub samples_per_class: usize,
    /// Blob width in pixels.
    pub blob_sigma: f64,
    pub blob_amplitude: f64,
    /// Distance of class anchors from the frame centre.
    pub anchor_radius: f64,
    /// Pixels travelled per frame.
    pub speed: f64,
    /// Box blur width; 0 or 1 disables it.
    pub blur_width: usize,
    pub noise_std: f64,
    /// Side of the square watermark patch.
    pub watermark_size: usize,
    pub watermark_value: f64,
    pub watermark_opacity: f64,
    /// Classes kept out of fine-tuning.
    pub held_out: Vec<usize>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            video: VideoShape::default(),
            classes: 8,
            samples_per_class: 20,
            blob_sigma: 0.9,
            blob_amplitude: 1.0,
            anchor_radius: 1.5,
            speed: 0.2,
            blur_width: 3,
            noise_std: 0.05,
            watermark_size: 2,
            watermark_value: 0.6,
            watermark_opacity: 0.5,
            held_out: vec![7, 8],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    InDomain,
    HeldOutClass,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::InDomain => "in-domain",
            Split::HeldOutClass => "held-out-class",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<(LatentVideo, Condition)>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.video.validate()?;
        if self.classes == 0 || self.samples_per_class == 0 {
            return Err(config_err!("dataset needs at least one class and one sample per class"));
        }
        if !(self.blob_sigma > 0.0) || self.noise_std < 0.0 || !self.speed.is_finite() {
            return Err(config_err!("blob_sigma must be positive and noise_std non-negative"));
        }
        if !(0.0..=1.0).contains(&self.watermark_opacity) {
            return Err(config_err!("watermark_opacity must lie in [0, 1]"));
        }
        if self.watermark_size == 0
            || self.watermark_size > self.video.height
            || self.watermark_size > self.video.width
        {
            return Err(config_err!("watermark does not fit the frame"));
        }
        let held: BTreeSet<usize> = self.held_out.iter().copied().collect();
        if held.len() != self.held_out.len() || held.iter().any(|&c| c == 0 || c > self.classes) {
            return Err(config_err!("held_out must list distinct classes in [1, {}]", self.classes));
        }
        if held.len() == self.classes {
            return Err(config_err!("every class is held out"));
        }
        Ok(())
    }

    pub fn conditions(&self) -> Vec<Condition> {
        (1..=self.classes).map(Condition).collect()
    }

    pub fn split_of(&self, c: Condition) -> Split {
        if self.held_out.contains(&c.0) {
            Split::HeldOutClass
        } else {
            Split::InDomain
        }
    }

    pub fn conditions_in(&self, split: Split) -> Vec<Condition> {
        self.conditions()
            .into_iter()
            .filter(|&c| self.split_of(c) == split)
            .collect()
    }

    pub fn watermark(&self) -> Watermark {
        let s = self.watermark_size;
        Watermark {
            patch: Tensor::full(&[s, s, self.video.channels], self.watermark_value),
        }
    }

    /// Blob centre of class `c` at frame `f`.
    fn centre(&self, c: Condition, f: usize) -> (f64, f64) {
        let v = self.video;
        let theta = 2.0 * PI * (c.0 - 1) as f64 / self.classes as f64;
        let (cy, cx) = (v.height as f64 / 2.0, v.width as f64 / 2.0);
        let (ay, ax) = (cy + self.anchor_radius * theta.sin(), cx + self.anchor_radius * theta.cos());
        // Direction turned a quarter from the anchor so classes move differently.
        let phase = theta + PI / 2.0;
        let dt = f as f64 - v.frames as f64 / 2.0;
        (ay + self.speed * dt * phase.sin(), ax + self.speed * dt * phase.cos())
    }

    /// The clean frame of class `c` at frame index `f`, `h × w × ch`.
    pub fn clean_frame(&self, c: Condition, f: usize) -> Tensor {
        let v = self.video;
        let (my, mx) = self.centre(c, f);
        let mut data = Vec::with_capacity(v.frame_len());
        for y in 0..v.height {
            for x in 0..v.width {
                let d2 = (y as f64 - my).powi(2) + (x as f64 - mx).powi(2);
                let val = self.blob_amplitude * (-d2 / (2.0 * self.blob_sigma * self.blob_sigma)).exp();
                data.extend(std::iter::repeat_n(val, v.channels));
            }
        }
        Tensor::from_parts(vec![v.height, v.width, v.channels], data)
    }

    pub fn clean_video(&self, c: Condition) -> LatentVideo {
        let v = self.video;
        let mut data = Vec::with_capacity(v.len());
        for f in 0..v.frames {
            data.extend_from_slice(self.clean_frame(c, f).data());
        }
        LatentVideo::new(Tensor::from_parts(v.dims().to_vec(), data)).expect("finite")
    }

    /// Reward templates: the clean centre frame of every class. `mirror`
    /// flips them left to right, giving a second, conflicting target set.
    pub fn templates(&self, mirror: bool) -> Vec<Tensor> {
        let v = self.video;
        self.conditions()
            .into_iter()
            .map(|c| {
                let t = self.clean_frame(c, v.frames / 2);
                if !mirror {
                    return t;
                }
                let mut out = t.clone();
                for y in 0..v.height {
                    for x in 0..v.width {
                        for ch in 0..v.channels {
                            out.data_mut()[(y * v.width + x) * v.channels + ch] =
                                t.data()[(y * v.width + (v.width - 1 - x)) * v.channels + ch];
                        }
                    }
                }
                out
            })
            .collect()
    }
}

fn box_blur(frame: &[f64], h: usize, w: usize, ch: usize, width: usize) -> Vec<f64> {
    if width <= 1 {
        return frame.to_vec();
    }
    let r = (width / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    let mut n = 0.0;
                    for k in -r..=r {
                        let (yy, xx) = if horizontal {
                            (y as isize, x as isize + k)
                        } else {
                            (y as isize + k, x as isize)
                        };
                        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                            acc += src[(yy as usize * w + xx as usize) * ch + c];
                            n += 1.0;
                        }
                    }
                    out[(y * w + x) * ch + c] = acc / n;
                }
            }
        }
        out
    };
    pass(&pass(frame, true), false)
}

/// Blur, noise, then composite the watermark: `(1 − a)·x + a·patch` on the corner.
pub fn degrade<R: Rng + ?Sized>(spec: &DatasetSpec, clean: &LatentVideo, rng: &mut R) -> LatentVideo {
    let v = spec.video;
    let wm = spec.watermark();
    let a = spec.watermark_opacity;
    let s = spec.watermark_size;
    let mut data = Vec::with_capacity(v.len());
    for f in 0..v.frames {
        let mut fr = box_blur(clean.frame(f), v.height, v.width, v.channels, spec.blur_width);
        if spec.noise_std > 0.0 {
            let n = Tensor::randn(&[fr.len()], rng);
            for (x, e) in fr.iter_mut().zip(n.data()) {
                *x += spec.noise_std * e;
            }
        }
        if a > 0.0 {
            for y in 0..s {
                for x in 0..s {
                    for c in 0..v.channels {
                        let i = (y * v.width + x) * v.channels + c;
                        fr[i] = (1.0 - a) * fr[i] + a * wm.patch.data()[(y * s + x) * v.channels + c];
                    }
                }
            }
        }
        data.extend(fr);
    }
    LatentVideo::new(Tensor::from_parts(v.dims().to_vec(), data)).expect("finite")
}

pub fn gen_dataset<R: Rng + ?Sized>(spec: &DatasetSpec, rng: &mut R) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.classes * spec.samples_per_class);
    for c in spec.conditions() {
        let clean = spec.clean_video(c);
        for _ in 0..spec.samples_per_class {
            samples.push((degrade(spec, &clean, rng), c));
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

impl Dataset {
    /// Samples usable for fine-tuning: held-out classes removed.
    pub fn fine_tune_split(&self) -> Vec<(LatentVideo, Condition)> {
        self.samples
            .iter()
            .filter(|(_, c)| self.spec.split_of(*c) == Split::InDomain)
            .cloned()
            .collect()
    }

    /// Fails if any held-out class slipped into `batch`.
    pub fn check_split(&self, batch: &[(LatentVideo, Condition)]) -> Result<()> {
        if let Some((_, c)) = batch.iter().find(|(_, c)| self.spec.split_of(*c) == Split::HeldOutClass) {
            return Err(contract_err!("held-out class {} found in fine-tuning data", c.0));
        }
        Ok(())
    }
}

/// Reward configuration as written in a run file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// `template`, or `template-mirror` for the flipped target set.
    pub id: String,
    pub kind: RewardKind,
    pub rho: f64,
    pub kappa: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            id: "template".into(),
            kind: RewardKind::TemplateMatchWatermark,
            rho: 0.5,
            kappa: 0.0,
        }
    }
}

/// Registered reward ids.
pub const REWARD_IDS: [&str; 2] = ["template", "template-mirror"];

impl RewardConfig {
    pub fn build(&self, spec: &DatasetSpec) -> Result<RewardSpec> {
        let mirror = match self.id.as_str() {
            "template" => false,
            "template-mirror" => true,
            other => {
                return Err(config_err!(
                    "unknown reward `{other}`; registered: {}",
                    REWARD_IDS.join(", ")
                ))
            }
        };
        RewardSpec::new(
            self.id.clone(),
            self.kind,
            spec.templates(mirror),
            spec.watermark(),
            self.rho,
            self.kappa,
        )
    }
}
