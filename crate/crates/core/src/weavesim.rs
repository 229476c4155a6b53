//! Synthetic plain-weave canvases with exact ground truth.
//!
//! Vertical (warp) threads sit at a fixed spacing; horizontal (weft) threads
//! follow cumulative Gaussian gaps. Each thread is drawn as a raised-cosine
//! ridge, crossings are brightened multiplicatively, and the result can be
//! rotated, locally contrast-reduced and corrupted with Gaussian noise.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::raster::{clamp_pixel, GrayImage, CANONICAL_PPCM};

const BACKGROUND: f64 = 60.0;
const AMPLITUDE: f64 = 120.0;
/// Level around which contrast-drop regions are compressed.
const MID_LEVEL: f64 = BACKGROUND + AMPLITUDE / 2.0;
/// Weft gaps at or below this fraction of the mean gap are redrawn.
const MIN_GAP_FRACTION: f64 = 0.2;

const STREAM_WEFT: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeaveError {
    #[error("bad weave parameters: {0}")]
    BadParams(String),
    #[error("only {0} thread(s) inside the window, need at least 3")]
    TooFewThreads(usize),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, WeaveError>;

/// Axis-aligned rectangle (canvas centimetres) whose contrast is scaled by `gain`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastRegion {
    pub top_cm: f64,
    pub left_cm: f64,
    pub height_cm: f64,
    pub width_cm: f64,
    pub gain: f64,
}

impl ContrastRegion {
    fn contains(&self, y_cm: f64, x_cm: f64) -> bool {
        y_cm >= self.top_cm
            && y_cm < self.top_cm + self.height_cm
            && x_cm >= self.left_cm
            && x_cm < self.left_cm + self.width_cm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeaveParams {
    /// Vertical threads per cm, exactly periodic.
    pub warp_density: f64,
    /// Mean horizontal threads per cm.
    pub weft_mean_density: f64,
    /// Standard deviation of each weft gap, in cm.
    pub weft_spacing_sigma: f64,
    /// Ridge width as a fraction of the mean spacing.
    pub thread_width_frac: f64,
    pub noise_sigma: f64,
    /// Clockwise rotation of the weave about the canvas centre.
    pub rotation_deg: f64,
    pub contrast_drop_regions: Vec<ContrastRegion>,
    /// Multiplicative brightening where warp and weft cross.
    pub crossing_gain: f64,
    pub seed: u64,
}

impl Default for WeaveParams {
    fn default() -> Self {
        Self {
            warp_density: 12.0,
            weft_mean_density: 12.0,
            weft_spacing_sigma: 0.0,
            thread_width_frac: 0.7,
            noise_sigma: 0.0,
            rotation_deg: 0.0,
            contrast_drop_regions: Vec::new(),
            crossing_gain: 1.3,
            seed: 0,
        }
    }
}

impl WeaveParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WeaveError::BadParams(m));
        for (name, d) in [("warp_density", self.warp_density), ("weft_mean_density", self.weft_mean_density)] {
            if !(4.0..=30.0).contains(&d) {
                return bad(format!("{name} {d} outside [4, 30]"));
            }
        }
        if !(self.weft_spacing_sigma.is_finite() && self.weft_spacing_sigma >= 0.0) {
            return bad(format!("weft_spacing_sigma {}", self.weft_spacing_sigma));
        }
        if !(self.thread_width_frac > 0.1 && self.thread_width_frac < 0.9) {
            return bad(format!("thread_width_frac {} outside (0.1, 0.9)", self.thread_width_frac));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma {}", self.noise_sigma));
        }
        if !self.rotation_deg.is_finite() {
            return bad("rotation_deg is not finite".into());
        }
        if !(self.crossing_gain.is_finite() && self.crossing_gain >= 1.0) {
            return bad(format!("crossing_gain {} below 1", self.crossing_gain));
        }
        for r in &self.contrast_drop_regions {
            if !(0.0..=1.0).contains(&r.gain) || r.height_cm <= 0.0 || r.width_cm <= 0.0 {
                return bad(format!("contrast region {r:?}"));
            }
        }
        Ok(())
    }
}

/// Reciprocal mean gap of the sorted positions inside `[a, b]`.
pub fn sc_label(positions: &[f64], a: f64, b: f64) -> Result<f64> {
    let lo = positions.partition_point(|&p| p < a);
    let hi = positions.partition_point(|&p| p <= b);
    let n = hi.saturating_sub(lo);
    if n < 3 {
        return Err(WeaveError::TooFewThreads(n));
    }
    Ok((n - 1) as f64 / (positions[hi - 1] - positions[lo]))
}

/// Thread layout of a (possibly large) piece of fabric. Canvases are
/// rendered from rectangular regions of it.
#[derive(Debug, Clone)]
pub struct Weave {
    params: WeaveParams,
    width_cm: f64,
    height_cm: f64,
    /// Warp centres along the weave-frame u axis (cm).
    warp: Vec<f64>,
    /// Weft centres along the weave-frame v axis (cm).
    weft: Vec<f64>,
}

impl Weave {
    pub fn generate(params: &WeaveParams, width_cm: f64, height_cm: f64) -> Result<Self> {
        params.validate()?;
        if !(width_cm >= 2.0 && height_cm >= 2.0) {
            return Err(WeaveError::BadParams(format!("canvas {width_cm}x{height_cm} cm is below 2x2 cm")));
        }
        let frame = Frame::new(params.rotation_deg, width_cm, height_cm);
        // Weave-frame extent covering the rotated canvas, plus a margin.
        let corners = [(0.0, 0.0), (width_cm, 0.0), (0.0, height_cm), (width_cm, height_cm)];
        let (mut u_lo, mut u_hi, mut v_lo, mut v_hi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for (x, y) in corners {
            let (u, v) = frame.to_weave(x, y);
            u_lo = u_lo.min(u);
            u_hi = u_hi.max(u);
            v_lo = v_lo.min(v);
            v_hi = v_hi.max(v);
        }
        let margin = 1.0;
        let d = params.warp_density;
        let first = ((u_lo - margin) * d).floor() as i64;
        let last = ((u_hi + margin) * d).ceil() as i64;
        let warp: Vec<f64> = (first..=last).map(|i| (i as f64 + 0.5) / d).collect();

        let mean_gap = 1.0 / params.weft_mean_density;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(STREAM_WEFT);
        let gap_dist =
            Normal::new(mean_gap, params.weft_spacing_sigma).map_err(|e| WeaveError::BadParams(e.to_string()))?;
        let mut weft = Vec::new();
        let mut pos = v_lo - margin + 0.5 * mean_gap;
        while pos <= v_hi + margin {
            weft.push(pos);
            let gap = if params.weft_spacing_sigma == 0.0 {
                mean_gap
            } else {
                loop {
                    let g: f64 = gap_dist.sample(&mut rng);
                    if g > MIN_GAP_FRACTION * mean_gap {
                        break g;
                    }
                }
            };
            pos += gap;
        }
        Ok(Self { params: params.clone(), width_cm, height_cm, warp, weft })
    }

    pub fn params(&self) -> &WeaveParams {
        &self.params
    }

    pub fn warp_positions(&self) -> &[f64] {
        &self.warp
    }

    pub fn weft_positions(&self) -> &[f64] {
        &self.weft
    }

    pub fn width_px(&self) -> usize {
        (self.width_cm * CANONICAL_PPCM).round() as usize
    }

    pub fn height_px(&self) -> usize {
        (self.height_cm * CANONICAL_PPCM).round() as usize
    }

    fn frame(&self) -> Frame {
        Frame::new(self.params.rotation_deg, self.width_cm, self.height_cm)
    }

    /// Renders the pixel rectangle at `(top, left)` of size `height × width`
    /// (200 px/cm). `noise_tag` selects independent noise streams for
    /// different regions of the same fabric.
    pub fn render_region(&self, top: usize, left: usize, height: usize, width: usize, noise_tag: u32) -> GrayImage {
        let p = &self.params;
        let frame = self.frame();
        let warp_w = p.thread_width_frac / p.warp_density;
        let weft_w = p.thread_width_frac / p.weft_mean_density;
        let cross = p.crossing_gain - 1.0;
        let noise = (p.noise_sigma > 0.0).then(|| Normal::new(0.0, p.noise_sigma).expect("validated sigma"));
        let mut pixels = vec![0.0f32; height * width];
        pixels.par_chunks_mut(width).enumerate().for_each(|(ry, row)| {
            let y = top + ry;
            let y_cm = (y as f64 + 0.5) / CANONICAL_PPCM;
            let mut rng = noise.map(|_| {
                let mut r = ChaCha8Rng::seed_from_u64(p.seed);
                r.set_stream(STREAM_NOISE << 56 | (noise_tag as u64) << 32 | y as u64);
                r
            });
            let regions: Vec<&ContrastRegion> =
                p.contrast_drop_regions.iter().filter(|r| y_cm >= r.top_cm && y_cm < r.top_cm + r.height_cm).collect();
            for (rx, out) in row.iter_mut().enumerate() {
                let x_cm = ((left + rx) as f64 + 0.5) / CANONICAL_PPCM;
                let (u, v) = frame.to_weave(x_cm, y_cm);
                let a = ridge(nearest_distance(&self.warp, u), warp_w);
                let b = ridge(nearest_distance(&self.weft, v), weft_w);
                let mut val = BACKGROUND + AMPLITUDE * 0.5 * (a + b) * (1.0 + cross * a * b);
                for r in &regions {
                    if r.contains(y_cm, x_cm) {
                        val = MID_LEVEL + r.gain * (val - MID_LEVEL);
                    }
                }
                if let (Some(dist), Some(rng)) = (noise.as_ref(), rng.as_mut()) {
                    val += dist.sample(rng);
                }
                *out = clamp_pixel(val);
            }
        });
        GrayImage::from_raw(height, width, CANONICAL_PPCM, pixels)
    }

    /// Ground truth for a rendered region.
    pub fn truth_region(&self, top: usize, left: usize, height: usize, width: usize) -> GroundTruth {
        let mut truth = GroundTruth {
            warp: self.warp.clone(),
            weft: self.weft.clone(),
            frame: self.frame(),
            origin_cm: (top as f64 / CANONICAL_PPCM, left as f64 / CANONICAL_PPCM),
            rows: (height as f64 / CANONICAL_PPCM).floor() as usize,
            cols: (width as f64 / CANONICAL_PPCM).floor() as usize,
            v_map: Vec::new(),
            h_map: Vec::new(),
        };
        for i in 0..truth.rows {
            for j in 0..truth.cols {
                let (v, h) = truth.window_density(i as f64, j as f64, 1.0);
                truth.v_map.push(v);
                truth.h_map.push(h);
            }
        }
        truth
    }
}

/// Rotation between canvas centimetres (x right, y down) and the weave frame.
#[derive(Debug, Clone, Copy)]
struct Frame {
    cos: f64,
    sin: f64,
    cx: f64,
    cy: f64,
}

impl Frame {
    fn new(rotation_deg: f64, width_cm: f64, height_cm: f64) -> Self {
        let (sin, cos) = rotation_deg.to_radians().sin_cos();
        Self { cos, sin, cx: width_cm / 2.0, cy: height_cm / 2.0 }
    }

    /// Canvas point to weave coordinates (inverse of the clockwise rotation).
    #[inline]
    fn to_weave(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (self.cos * dx + self.sin * dy + self.cx, -self.sin * dx + self.cos * dy + self.cy)
    }
}

#[inline]
fn nearest_distance(sorted: &[f64], p: f64) -> f64 {
    let i = sorted.partition_point(|&s| s < p);
    let mut best = f64::INFINITY;
    if i < sorted.len() {
        best = sorted[i] - p;
    }
    if i > 0 {
        best = best.min(p - sorted[i - 1]);
    }
    best
}

/// Raised-cosine ridge of full width `width` evaluated at distance `d`.
#[inline]
fn ridge(d: f64, width: f64) -> f64 {
    if d >= width / 2.0 {
        0.0
    } else {
        0.5 * (1.0 + (2.0 * std::f64::consts::PI * d / width).cos())
    }
}

/// Exact densities of a rendered canvas.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    warp: Vec<f64>,
    weft: Vec<f64>,
    frame: Frame,
    /// Position of the canvas origin inside the fabric, (y, x) in cm.
    origin_cm: (f64, f64),
    pub rows: usize,
    pub cols: usize,
    /// Row-major per-cm² vertical densities (thr/cm).
    pub v_map: Vec<f64>,
    pub h_map: Vec<f64>,
}

impl GroundTruth {
    pub fn warp_positions(&self) -> &[f64] {
        &self.warp
    }

    pub fn weft_positions(&self) -> &[f64] {
        &self.weft
    }

    /// (vertical, horizontal) densities of the square window whose top-left
    /// corner is at canvas `(y_cm, x_cm)`, measured perpendicular to the
    /// threads. NaN where fewer than three threads fall inside.
    pub fn window_density(&self, y_cm: f64, x_cm: f64, size_cm: f64) -> (f64, f64) {
        let cy = self.origin_cm.0 + y_cm + size_cm / 2.0;
        let cx = self.origin_cm.1 + x_cm + size_cm / 2.0;
        let (u, v) = self.frame.to_weave(cx, cy);
        let half = size_cm / 2.0;
        let vd = sc_label(&self.warp, u - half, u + half).unwrap_or(f64::NAN);
        let hd = sc_label(&self.weft, v - half, v + half).unwrap_or(f64::NAN);
        (vd, hd)
    }

    /// Truth of the 200×200 px patch with top-left pixel `(top, left)`.
    pub fn patch_truth(&self, top: usize, left: usize) -> (f64, f64) {
        self.window_density(top as f64 / CANONICAL_PPCM, left as f64 / CANONICAL_PPCM, 1.0)
    }

    pub fn v_at(&self, i: usize, j: usize) -> f64 {
        self.v_map[i * self.cols + j]
    }

    pub fn h_at(&self, i: usize, j: usize) -> f64 {
        self.h_map[i * self.cols + j]
    }

    /// Writes `cm_y,cm_x,v_true,h_true` rows, one per 1 cm cell.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| WeaveError::Io(e.to_string());
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(f, "cm_y,cm_x,v_true,h_true").map_err(io)?;
        for i in 0..self.rows {
            for j in 0..self.cols {
                writeln!(f, "{i},{j},{},{}", self.v_at(i, j), self.h_at(i, j)).map_err(io)?;
            }
        }
        f.flush().map_err(io)
    }
}

/// Renders a whole canvas at 200 px/cm with its ground truth.
pub fn gen_canvas(params: &WeaveParams, width_cm: f64, height_cm: f64) -> Result<(GrayImage, GroundTruth)> {
    let weave = Weave::generate(params, width_cm, height_cm)?;
    let (h, w) = (weave.height_px(), weave.width_px());
    Ok((weave.render_region(0, 0, h, w, 0), weave.truth_region(0, 0, h, w)))
}

/// Draws a density uniformly from `[lo, hi]`; shared helper for corpus builders.
pub fn draw_density(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..=hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sc_label_examples() {
        let pos: Vec<f64> = (0..=12).map(|k| k as f64 / 12.0).collect();
        assert!((sc_label(&pos, 0.0, 1.0).unwrap() - 12.0).abs() < 1e-12);
        let v = sc_label(&[0.0, 0.1, 0.3], 0.0, 0.35).unwrap();
        assert!((v - 1.0 / 0.15).abs() < 1e-12);
        assert_eq!(sc_label(&[0.0, 0.5], 0.0, 1.0), Err(WeaveError::TooFewThreads(2)));
    }

    #[test]
    fn clean_truth_is_exact() {
        let p = WeaveParams { warp_density: 12.0, weft_mean_density: 12.0, ..Default::default() };
        let (img, truth) = gen_canvas(&p, 3.0, 2.0).unwrap();
        assert_eq!((img.height(), img.width()), (400, 600));
        assert_eq!((truth.rows, truth.cols), (2, 3));
        for (&v, &h) in truth.v_map.iter().zip(&truth.h_map) {
            assert!((v - 12.0).abs() < 1e-9 && (h - 12.0).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let p = WeaveParams {
            weft_mean_density: 10.0,
            weft_spacing_sigma: 0.01,
            noise_sigma: 5.0,
            rotation_deg: 2.0,
            seed: 77,
            ..Default::default()
        };
        let (a, ta) = gen_canvas(&p, 2.0, 2.0).unwrap();
        let (b, tb) = gen_canvas(&p, 2.0, 2.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.weft_positions(), tb.weft_positions());
        let (c, _) = gen_canvas(&WeaveParams { seed: 78, ..p }, 2.0, 2.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn jittered_weft_stays_near_mean() {
        let p = WeaveParams { weft_mean_density: 10.0, weft_spacing_sigma: 0.005, seed: 3, ..Default::default() };
        let (_, truth) = gen_canvas(&p, 6.0, 6.0).unwrap();
        for &h in &truth.h_map {
            assert!((8.0..=12.0).contains(&h), "{h}");
        }
        let mean = truth.h_map.iter().sum::<f64>() / truth.h_map.len() as f64;
        assert!((mean - 10.0).abs() <= 0.2, "{mean}");
    }

    #[test]
    fn rejects_bad_params() {
        let p = WeaveParams { warp_density: 40.0, ..Default::default() };
        assert!(matches!(gen_canvas(&p, 3.0, 3.0), Err(WeaveError::BadParams(_))));
        let p = WeaveParams { thread_width_frac: 0.95, ..Default::default() };
        assert!(gen_canvas(&p, 3.0, 3.0).is_err());
        assert!(gen_canvas(&WeaveParams::default(), 1.5, 3.0).is_err());
    }

    #[test]
    fn axis_counts_scale_with_rotation() {
        // Counting along the image axis of a rotated canvas sees gaps stretched
        // by 1/cos(theta); the perpendicular truth is unchanged.
        let theta = 3.0f64;
        let p = WeaveParams { warp_density: 12.0, rotation_deg: theta, ..Default::default() };
        let weave = Weave::generate(&p, 4.0, 4.0).unwrap();
        let frame = weave.frame();
        // Warp centre crossings along the horizontal line y = 2 cm.
        let mut crossings: Vec<f64> = weave
            .warp_positions()
            .iter()
            .map(|&u| {
                // Solve to_weave(x, 2).0 == u for x.
                (u - frame.cx - frame.sin * (2.0 - frame.cy)) / frame.cos + frame.cx
            })
            .collect();
        crossings.sort_by(f64::total_cmp);
        let along_axis = sc_label(&crossings, 1.0, 3.0).unwrap();
        let truth = weave.truth_region(0, 0, 800, 800);
        let perpendicular = truth.v_at(1, 1);
        assert!((along_axis / theta.to_radians().cos() - perpendicular).abs() < 0.1);
        assert!((perpendicular - 12.0).abs() < 1e-9);
    }
}
