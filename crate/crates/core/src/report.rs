//! Result persistence: a schema-versioned evaluation document and small
//! static plots.
//!
//! The document is plain JSON with a fixed field order, so identical inputs
//! produce identical bytes; plots are PNG rendered by a tiny built-in
//! rasterizer (axes, ticks, a 3x5 digit font) to keep the output
//! self-contained.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eval::EvalResult;

pub const REPORT_SCHEMA: &str = "comloc.eval.v1";
pub const REPORT_FILE: &str = "eval.json";
pub const THRESHOLD_PLOT_FILE: &str = "map_vs_threshold.png";
pub const HISTOGRAM_PLOT_FILE: &str = "episode_ap_histogram.png";
pub const SWEEP_PLOT_FILE: &str = "map_vs_supports.png";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("document encoding: {0}")]
    Json(#[from] serde_json::Error),
    #[error("plot encoding: {0}")]
    Image(#[from] image::ImageError),
    #[error("document declares schema {0:?}, expected {REPORT_SCHEMA:?}")]
    WrongSchema(String),
}

/// Provenance stored beside every result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    /// The resolved run configuration, echoed verbatim.
    pub config: serde_json::Value,
    pub seed: u64,
    /// Content hash of the checkpoint that produced the predictions.
    pub checkpoint_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultDoc {
    pub schema: String,
    pub meta: RunMeta,
    pub result: EvalResult,
}

/// Hex SHA-256 of a file's bytes; identifies a checkpoint in result
/// documents without copying it around.
pub fn checkpoint_id(path: &Path) -> Result<String, ReportError> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    Ok(out)
}

/// Writes the result document into `dir` and returns its path. Bytes are a
/// pure function of the inputs.
pub fn write_report(
    dir: &Path,
    result: &EvalResult,
    meta: &RunMeta,
) -> Result<PathBuf, ReportError> {
    fs::create_dir_all(dir)?;
    let doc = ResultDoc {
        schema: REPORT_SCHEMA.to_string(),
        meta: meta.clone(),
        result: result.clone(),
    };
    let path = dir.join(REPORT_FILE);
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

pub fn read_report(path: &Path) -> Result<ResultDoc, ReportError> {
    let doc: ResultDoc = serde_json::from_str(&fs::read_to_string(path)?)?;
    if doc.schema != REPORT_SCHEMA {
        return Err(ReportError::WrongSchema(doc.schema));
    }
    Ok(doc)
}

/// Renders and writes the two per-run plots: the threshold curve and the
/// per-episode AP histogram (binned at the lowest threshold).
pub fn write_plots(dir: &Path, result: &EvalResult) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir)?;
    let curve = dir.join(THRESHOLD_PLOT_FILE);
    plot_threshold_curve(result).save(&curve)?;
    let hist = dir.join(HISTOGRAM_PLOT_FILE);
    plot_ap_histogram(result).save(&hist)?;
    Ok(vec![curve, hist])
}

/// Renders and writes the support-count sweep curve, one point per N.
pub fn write_sweep_plot(dir: &Path, points: &[(usize, f64)]) -> Result<PathBuf, ReportError> {
    fs::create_dir_all(dir)?;
    let path = dir.join(SWEEP_PLOT_FILE);
    plot_support_sweep(points).save(&path)?;
    Ok(path)
}

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 420;
const MARGIN_L: u32 = 48;
const MARGIN_R: u32 = 16;
const MARGIN_T: u32 = 16;
const MARGIN_B: u32 = 36;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const ACCENT: Rgb<u8> = Rgb([31, 119, 180]);

struct Frame {
    img: RgbImage,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        let mut img = RgbImage::new(PLOT_W, PLOT_H);
        for p in img.pixels_mut() {
            *p = BG;
        }
        Self {
            img,
            x_min,
            x_max,
            y_min,
            y_max,
        }
    }

    fn px(&self, x: f64) -> i64 {
        let w = (PLOT_W - MARGIN_L - MARGIN_R) as f64;
        let t = (x - self.x_min) / (self.x_max - self.x_min);
        MARGIN_L as i64 + (t * w).round() as i64
    }

    fn py(&self, y: f64) -> i64 {
        let h = (PLOT_H - MARGIN_T - MARGIN_B) as f64;
        let t = (y - self.y_min) / (self.y_max - self.y_min);
        (PLOT_H - MARGIN_B) as i64 - (t * h).round() as i64
    }

    fn put(&mut self, x: i64, y: i64, color: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < PLOT_W && (y as u32) < PLOT_H {
            self.img.put_pixel(x as u32, y as u32, color);
        }
    }

    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn fill(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, color);
            }
        }
    }

    fn dot(&mut self, x: i64, y: i64, color: Rgb<u8>) {
        self.fill(x - 2, y - 2, x + 2, y + 2, color);
    }

    // 3x5 digit font at 2x scale; enough for tick labels
    fn text(&mut self, x: i64, y: i64, s: &str, color: Rgb<u8>) {
        const S: i64 = 2;
        let mut cx = x;
        for ch in s.chars() {
            let glyph = glyph(ch);
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..3 {
                    if bits & (0b100 >> col) != 0 {
                        self.fill(
                            cx + col as i64 * S,
                            y + row as i64 * S,
                            cx + col as i64 * S + S - 1,
                            y + row as i64 * S + S - 1,
                            color,
                        );
                    }
                }
            }
            cx += 4 * S;
        }
    }

    fn axes(&mut self, x_ticks: &[(f64, String)], y_ticks: &[(f64, String)]) {
        let (left, right) = (MARGIN_L as i64, (PLOT_W - MARGIN_R) as i64);
        let (top, bottom) = (MARGIN_T as i64, (PLOT_H - MARGIN_B) as i64);
        for &(v, _) in y_ticks {
            let y = self.py(v);
            self.line(left, y, right, y, GRID);
        }
        self.line(left, top, left, bottom, AXIS);
        self.line(left, bottom, right, bottom, AXIS);
        for (v, label) in x_ticks {
            let x = self.px(*v);
            self.line(x, bottom, x, bottom + 4, AXIS);
            let w = label.chars().count() as i64 * 8;
            self.text(x - w / 2, bottom + 8, label, AXIS);
        }
        for (v, label) in y_ticks {
            let y = self.py(*v);
            self.line(left - 4, y, left, y, AXIS);
            let w = label.chars().count() as i64 * 8;
            self.text(left - 8 - w, y - 5, label, AXIS);
        }
    }

    fn polyline(&mut self, points: &[(f64, f64)]) {
        for pair in points.windows(2) {
            self.line(
                self.px(pair[0].0),
                self.py(pair[0].1),
                self.px(pair[1].0),
                self.py(pair[1].1),
                ACCENT,
            );
        }
        for &(x, y) in points {
            let (px, py) = (self.px(x), self.py(y));
            self.dot(px, py, ACCENT);
        }
    }
}

fn glyph(ch: char) -> [u8; 5] {
    match ch {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b001, 0b001, 0b001],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        _ => [0b000; 5],
    }
}

fn unit_y_ticks() -> Vec<(f64, String)> {
    [0.0, 0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|&v| (v, format!("{v:.2}")))
        .collect()
}

/// mAP against the overlap threshold, y fixed to `[0, 1]`.
pub fn plot_threshold_curve(result: &EvalResult) -> RgbImage {
    let (lo, hi) = (
        result.thresholds.first().copied().unwrap_or(0.0),
        result.thresholds.last().copied().unwrap_or(1.0),
    );
    let pad = ((hi - lo) * 0.05).max(0.02);
    let mut frame = Frame::new(lo - pad, hi + pad, 0.0, 1.0);
    let x_ticks: Vec<(f64, String)> = result
        .thresholds
        .iter()
        .map(|&t| (t, format!("{t:.1}")))
        .collect();
    frame.axes(&x_ticks, &unit_y_ticks());
    let points: Vec<(f64, f64)> = result
        .thresholds
        .iter()
        .zip(&result.map)
        .map(|(&t, &m)| (t, m))
        .collect();
    frame.polyline(&points);
    frame.img
}

/// Histogram of per-episode AP at the lowest threshold, ten bins across
/// `[0, 1]`.
pub fn plot_ap_histogram(result: &EvalResult) -> RgbImage {
    let mut bins = [0usize; 10];
    for row in &result.per_episode {
        if let Some(&ap) = row.ap.first() {
            let b = ((ap * 10.0).floor() as usize).min(9);
            bins[b] += 1;
        }
    }
    let top = bins.iter().copied().max().unwrap_or(0).max(1);
    let mut frame = Frame::new(0.0, 1.0, 0.0, top as f64);
    let x_ticks: Vec<(f64, String)> = [0.0, 0.5, 1.0]
        .iter()
        .map(|&v| (v, format!("{v:.1}")))
        .collect();
    let y_ticks: Vec<(f64, String)> = [0, top]
        .iter()
        .map(|&v| (v as f64, format!("{v}")))
        .collect();
    frame.axes(&x_ticks, &y_ticks);
    let base = frame.py(0.0);
    for (b, &count) in bins.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let x0 = frame.px(b as f64 / 10.0) + 2;
        let x1 = frame.px((b + 1) as f64 / 10.0) - 2;
        let y = frame.py(count as f64);
        frame.fill(x0, y, x1, base - 1, ACCENT);
    }
    frame.img
}

/// mAP at the primary threshold for each support count.
pub fn plot_support_sweep(points: &[(usize, f64)]) -> RgbImage {
    let lo = points.iter().map(|&(n, _)| n).min().unwrap_or(1) as f64;
    let hi = points.iter().map(|&(n, _)| n).max().unwrap_or(2) as f64;
    let pad = ((hi - lo) * 0.05).max(0.2);
    let mut frame = Frame::new(lo - pad, hi + pad, 0.0, 1.0);
    let x_ticks: Vec<(f64, String)> = points
        .iter()
        .map(|&(n, _)| (n as f64, format!("{n}")))
        .collect();
    frame.axes(&x_ticks, &unit_y_ticks());
    let xy: Vec<(f64, f64)> = points.iter().map(|&(n, m)| (n as f64, m)).collect();
    frame.polyline(&xy);
    frame.img
}
