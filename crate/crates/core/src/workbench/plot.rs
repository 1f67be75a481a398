//! Line plots rebuilt from recorded CSVs, and PGM frame strips.

use crate::error::{config_err, Error, Result};
use crate::latent::LatentVideo;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Reads columns `x` and `y` from a CSV file; rows with an empty `y` are
/// skipped.
pub fn read_series(path: &Path, x: &str, y: &str, label: &str) -> Result<Series> {
    let fmt = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut rd = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        k => Error::Format(format!("{}: {k:?}", path.display())),
    })?;
    let headers = rd.headers().map_err(fmt)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| config_err!("{} has no column `{name}`", path.display()))
    };
    let (xi, yi) = (col(x)?, col(y)?);
    let mut points = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(fmt)?;
        let (xs, ys) = (&rec[xi], &rec[yi]);
        if ys.is_empty() {
            continue;
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("{}: `{s}` is not a number", path.display())))
        };
        points.push((parse(xs)?, parse(ys)?));
    }
    Ok(Series {
        label: label.to_string(),
        points,
    })
}

/// Trailing moving average over `window` points.
pub fn smooth(s: &Series, window: usize) -> Series {
    let w = window.max(1);
    let mut acc = 0.0;
    let points = s
        .points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            acc += y;
            if i >= w {
                acc -= s.points[i - w].1;
            }
            (x, acc / (i + 1).min(w) as f64)
        })
        .collect();
    Series {
        label: s.label.clone(),
        points,
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Round tick positions covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn label(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One polyline per series with axes, ticks and a legend.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (720.0, 440.0);
    let (l, r, t, b) = (70.0, 170.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = (y1 - y0) * 0.05;
    let (y0, y1) = (y0 - pad, y1 + pad);
    let px = |x: f64| l + (x - x0) / (x1 - x0) * (w - l - r);
    let py = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        (l + w - r) / 2.0,
        escape(title)
    );
    for tx in ticks(x0, x1) {
        let x = px(tx);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{t}" x2="{x:.2}" y2="{}" stroke="#eeeeee"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"##,
            h - b,
            h - b + 16.0,
            label(tx)
        );
    }
    for ty in ticks(y0, y1) {
        let y = py(ty);
        let _ = writeln!(
            s,
            r##"<line x1="{l}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#eeeeee"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
            w - r,
            l - 6.0,
            y + 4.0,
            label(ty)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - l - r,
        h - t - b
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (l + w - r) / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        (t + h - b) / 2.0,
        escape(y_label)
    );
    for (i, se) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = se
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let ly = t + 10.0 + 18.0 * i as f64;
        let lx = w - r + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&se.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Plain PGM of a row of frames (first channel), each cell `zoom` pixels
/// wide, with `range` mapped linearly onto `0..=255`.
pub fn frame_strip_pgm(videos: &[&LatentVideo], zoom: usize, range: [f64; 2]) -> Result<String> {
    let first = videos.first().ok_or_else(|| config_err!("frame strip needs a video"))?;
    let shape = first.shape();
    if videos.iter().any(|v| v.shape() != shape) {
        return Err(config_err!("frame strip videos must share one shape"));
    }
    let gap = 1;
    let cols = shape.frames * (shape.width * zoom + gap) - gap;
    let rows = videos.len() * (shape.height * zoom + gap) - gap;
    let mut px = vec![255u8; cols * rows];
    let level = |v: f64| (((v - range[0]) / (range[1] - range[0])).clamp(0.0, 1.0) * 255.0).round() as u8;
    for (vi, v) in videos.iter().enumerate() {
        for f in 0..shape.frames {
            let frame = v.frame(f);
            for y in 0..shape.height * zoom {
                for x in 0..shape.width * zoom {
                    let value = frame[((y / zoom) * shape.width + x / zoom) * shape.channels];
                    let row = vi * (shape.height * zoom + gap) + y;
                    let col = f * (shape.width * zoom + gap) + x;
                    px[row * cols + col] = level(value);
                }
            }
        }
    }
    let mut s = format!("P2\n{cols} {rows}\n255\n");
    for row in px.chunks(cols) {
        let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn ticks_are_round() {
        assert_eq!(ticks(0.0, 500.0), vec![0.0, 100.0, 200.0, 300.0, 400.0, 500.0]);
        let t = ticks(-0.13, 0.42);
        assert_eq!(t.first(), Some(&-0.1));
        assert!(t.iter().all(|v| (v * 10.0 - (v * 10.0).round()).abs() < 1e-9));
    }

    #[test]
    fn moving_average() {
        let s = Series {
            label: "a".into(),
            points: vec![(1.0, 1.0), (2.0, 3.0), (3.0, 5.0), (4.0, 7.0)],
        };
        let m = smooth(&s, 2);
        let ys: Vec<f64> = m.points.iter().map(|p| p.1).collect();
        assert_eq!(ys, vec![1.0, 2.0, 4.0, 6.0]);
        assert_eq!(smooth(&s, 1), s);
    }

    #[test]
    fn svg_has_one_line_per_series() {
        let a = Series {
            label: "tau=0.1".into(),
            points: vec![(1.0, 0.2), (2.0, 0.3)],
        };
        let b = Series {
            label: "tau=0.9".into(),
            points: vec![(1.0, 0.1), (2.0, 0.5)],
        };
        let svg = line_plot_svg("t", "step", "mean_reward", &[a, b]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">mean_reward</text>") && svg.contains(">step</text>"));
        assert!(svg.contains("tau=0.9"));
    }

    #[test]
    fn pgm_levels_and_size() {
        let v = LatentVideo::new(Tensor::new(vec![2, 1, 2, 1], vec![0.0, 1.0, -5.0, 0.5]).unwrap()).unwrap();
        let pgm = frame_strip_pgm(&[&v], 1, [0.0, 1.0]).unwrap();
        let mut lines = pgm.lines();
        assert_eq!(lines.next(), Some("P2"));
        assert_eq!(lines.next(), Some("5 1"));
        assert_eq!(lines.next(), Some("255"));
        assert_eq!(lines.next(), Some("0 255 255 0 128"));
    }
}
