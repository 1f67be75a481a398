//! Video statistics that are not rewards: temporal smoothness and watermark
//! visibility.

use crate::latent::LatentVideo;
use crate::reward::Watermark;

/// `TS = mean_t ‖frame_{t+1} − frame_t‖²`; zero for single-frame videos.
pub fn temporal_smoothness(v: &LatentVideo) -> f64 {
    let f = v.frames();
    if f < 2 {
        return 0.0;
    }
    let total: f64 = (0..f - 1)
        .map(|t| {
            v.frame(t + 1)
                .iter()
                .zip(v.frame(t))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    total / (f - 1) as f64
}

/// Squared cosine between the corner region of one frame and the patch.
/// An all-zero corner scores 0.
pub fn corner_correlation(frame: &[f64], height: usize, width: usize, channels: usize, wm: &Watermark) -> f64 {
    let s = wm.patch.shape();
    let (ph, pw) = (s[0], s[1]);
    let p = wm.patch.data();
    let (mut dot, mut nc, mut np) = (0.0, 0.0, 0.0);
    for y in 0..ph.min(height) {
        for x in 0..pw.min(width) {
            for c in 0..channels {
                let a = frame[(y * width + x) * channels + c];
                let b = p[(y * pw + x) * channels + c];
                dot += a * b;
                nc += a * a;
                np += b * b;
            }
        }
    }
    if nc == 0.0 || np == 0.0 {
        0.0
    } else {
        dot * dot / (nc * np)
    }
}

/// Mean over frames of [`corner_correlation`].
pub fn watermark_score(v: &LatentVideo, wm: &Watermark) -> f64 {
    let s = v.shape();
    (0..s.frames)
        .map(|f| corner_correlation(v.frame(f), s.height, s.width, s.channels, wm))
        .sum::<f64>()
        / s.frames as f64
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}
