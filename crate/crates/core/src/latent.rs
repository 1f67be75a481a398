//! Latent videos and batches of them.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

/// An `F × h × w × ch` latent video.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo(Tensor);

/// Frame geometry shared by every video in a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for VideoShape {
    fn default() -> Self {
        VideoShape {
            frames: 16,
            height: 8,
            width: 8,
            channels: 1,
        }
    }
}

impl VideoShape {
    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    /// Elements per frame.
    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn len(&self) -> usize {
        self.frames * self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims().iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("video shape has a zero extent: {self:?}")));
        }
        Ok(())
    }
}

impl LatentVideo {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return Err(shape_err!(
                "latent video must be F x h x w x ch, got {:?}",
                t.shape()
            ));
        }
        if !t.is_finite() {
            return Err(Error::Construction("latent video has non-finite entries".into()));
        }
        Ok(LatentVideo(t))
    }

    pub fn zeros(shape: VideoShape) -> Self {
        LatentVideo(Tensor::zeros(&shape.dims()))
    }

    pub fn randn<R: Rng + ?Sized>(shape: VideoShape, rng: &mut R) -> Self {
        LatentVideo(Tensor::randn(&shape.dims(), rng))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn shape(&self) -> VideoShape {
        let s = self.0.shape();
        VideoShape {
            frames: s[0],
            height: s[1],
            width: s[2],
            channels: s[3],
        }
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn frame_len(&self) -> usize {
        self.shape().frame_len()
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    /// Flat view of frame `i`.
    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.frame_len();
        &self.0.data()[i * n..(i + 1) * n]
    }

    /// Frame `i` as an `h × w × ch` tensor.
    pub fn frame_tensor(&self, i: usize) -> Tensor {
        let s = self.shape();
        Tensor::from_parts(vec![s.height, s.width, s.channels], self.frame(i).to_vec())
    }

    /// `F × (h·w·ch)` matrix view (copied).
    pub fn as_matrix(&self) -> Tensor {
        Tensor::from_parts(vec![self.frames(), self.frame_len()], self.0.data().to_vec())
    }

    pub fn from_matrix(m: Tensor, shape: VideoShape) -> Result<Self> {
        LatentVideo::new(m.reshape(&shape.dims())?)
    }
}

/// Stacks videos into a `(B·F) × P` matrix, the row layout the denoiser consumes.
pub fn stack_rows(videos: &[LatentVideo]) -> Result<Tensor> {
    let first = videos
        .first()
        .ok_or_else(|| Error::Contract("empty video batch".into()))?
        .shape();
    let mut data = Vec::with_capacity(videos.len() * first.len());
    for v in videos {
        if v.shape() != first {
            return Err(shape_err!("batch mixes {:?} and {:?}", first, v.shape()));
        }
        data.extend_from_slice(v.data());
    }
    Ok(Tensor::from_parts(
        vec![videos.len() * first.frames, first.frame_len()],
        data,
    ))
}

/// Inverse of [`stack_rows`].
pub fn unstack_rows(m: &Tensor, shape: VideoShape) -> Result<Vec<LatentVideo>> {
    let n = shape.len();
    if m.len() % n != 0 {
        return Err(shape_err!("{:?} is not a whole number of {shape:?} videos", m.shape()));
    }
    Ok(m.data()
        .chunks(n)
        .map(|c| LatentVideo(Tensor::from_parts(shape.dims().to_vec(), c.to_vec())))
        .collect())
}
