//! Fourier-domain thread density estimation on 1×1 cm patches.
//!
//! A plain weave is quasi-periodic along both axes, so each thread family
//! produces a dominant peak in the 2D spectrum. Vertical threads repeat along
//! x and therefore show up close to the horizontal-frequency axis; horizontal
//! threads close to the vertical-frequency axis.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::raster::GrayImage;

/// FFT length along each axis (patches are zero-padded to this size).
pub const FFT_LEN: usize = 512;
/// Density search band in threads per centimetre.
pub const BAND: (f64, f64) = (4.0, 30.0);
/// Off-axis tolerance, in bins, when scanning one orientation.
pub const OFF_AXIS_BINS: i32 = 2;
/// A peak must exceed this multiple of the in-band median magnitude.
pub const PEAK_TO_MEDIAN: f64 = 3.0;
/// Histogram resolution used by [`aggregate_densities`] by default.
pub const DEFAULT_BINS: usize = 300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("no usable spectral peak (peak/median {ratio:.3})")]
    NoPeak { ratio: f64 },
    #[error("patch must be square with side <= {FFT_LEN}, got {0}x{1}")]
    BadPatch(usize, usize),
    #[error("need at least 4 values per orientation, got {vertical} vertical and {horizontal} horizontal")]
    TooFewValues { vertical: usize, horizontal: usize },
    #[error("no density survived the mode filter")]
    EmptyAfterFilter,
    #[error("reference density must be positive, got {0}")]
    NonPositiveReference(f64),
}

pub type Result<T> = std::result::Result<T, SpectralError>;

/// Densities of both thread families in one patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub v_density: f64,
    pub h_density: f64,
    /// Peak magnitude relative to the in-band median.
    pub v_peak_mag: f64,
    pub h_peak_mag: f64,
}

fn fft512() -> &'static Arc<dyn Fft<f64>> {
    static PLAN: OnceLock<Arc<dyn Fft<f64>>> = OnceLock::new();
    PLAN.get_or_init(|| FftPlanner::new().plan_fft_forward(FFT_LEN))
}

fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / (n - 1) as f64).cos())).collect()
}

struct AxisPeak {
    density: f64,
    ratio: f64,
}

/// Estimates vertical and horizontal thread densities of a patch.
///
/// The patch is mean-removed, Hann-windowed and zero-padded to 512×512. The
/// returned density is the radial frequency of the refined peak, i.e. threads
/// per centimetre measured perpendicular to the threads.
pub fn ft_density(patch: &GrayImage) -> Result<SpectralEstimate> {
    let (h, w) = (patch.height(), patch.width());
    if h != w || !(8..=FFT_LEN).contains(&h) {
        return Err(SpectralError::BadPatch(h, w));
    }
    let n = h;
    let mean = patch.mean();
    let win = hann(n);
    let mut windowed = vec![0.0f64; n * n];
    for y in 0..n {
        let row = patch.row(y);
        for x in 0..n {
            windowed[y * n + x] = (row[x] as f64 - mean) * win[y] * win[x];
        }
    }
    let ppcm = patch.ppcm();
    let v = axis_peak(&windowed, n, ppcm)?;
    let mut transposed = vec![0.0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            transposed[x * n + y] = windowed[y * n + x];
        }
    }
    let hz = axis_peak(&transposed, n, ppcm)?;
    Ok(SpectralEstimate { v_density: v.density, h_density: hz.density, v_peak_mag: v.ratio, h_peak_mag: hz.ratio })
}

/// Magnitudes of a slice of the zero-padded 2D DFT around the
/// horizontal-frequency axis: rows `ky in -reach..=reach`, columns
/// `kx in kx_first..kx_first + kx_count`.
struct AxisSpectrum {
    mag: Vec<f64>,
    kx_first: usize,
    kx_count: usize,
    ky_reach: i32,
}

impl AxisSpectrum {
    #[inline]
    fn at(&self, ky: i32, kx: usize) -> f64 {
        self.mag[(ky + self.ky_reach) as usize * self.kx_count + (kx - self.kx_first)]
    }
}

/// Only the spectrum rows close to the axis are needed, so rows are
/// transformed with the FFT and the column transform is evaluated directly at
/// those few bins. This is exactly the corresponding slice of the full 2D DFT.
fn axis_spectrum(grid: &[f64], n: usize, kx_first: usize, kx_count: usize, ky_reach: i32) -> AxisSpectrum {
    let ky_count = (2 * ky_reach + 1) as usize;
    let fft = fft512();
    let mut buf = vec![Complex64::new(0.0, 0.0); FFT_LEN];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut spectrum = vec![Complex64::new(0.0, 0.0); ky_count * kx_count];
    let twiddles: Vec<Complex64> = (0..ky_count)
        .flat_map(|ki| {
            let ky = ki as i32 - ky_reach;
            (0..n).map(move |y| Complex64::from_polar(1.0, -2.0 * PI * ky as f64 * y as f64 / FFT_LEN as f64))
        })
        .collect();

    for y in 0..n {
        for (b, &v) in buf.iter_mut().zip(&grid[y * n..(y + 1) * n]) {
            *b = Complex64::new(v, 0.0);
        }
        for b in buf[n..].iter_mut() {
            *b = Complex64::new(0.0, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        let row = &buf[kx_first..kx_first + kx_count];
        for ki in 0..ky_count {
            let t = twiddles[ki * n + y];
            let dst = &mut spectrum[ki * kx_count..(ki + 1) * kx_count];
            for (d, &r) in dst.iter_mut().zip(row) {
                *d += r * t;
            }
        }
    }
    AxisSpectrum { mag: spectrum.iter().map(|c| c.norm()).collect(), kx_first, kx_count, ky_reach }
}

fn band_bins(ppcm: f64) -> (usize, usize) {
    let bin_hz = ppcm / FFT_LEN as f64;
    let k_lo = ((BAND.0 / bin_hz).ceil() as usize).max(2);
    let k_hi = ((BAND.1 / bin_hz).floor() as usize).min(FFT_LEN / 2 - 2);
    (k_lo, k_hi)
}

/// Peak search near the horizontal-frequency axis of an n×n windowed grid.
fn axis_peak(grid: &[f64], n: usize, ppcm: f64) -> Result<AxisPeak> {
    let bin_hz = ppcm / FFT_LEN as f64;
    let (k_lo, k_hi) = band_bins(ppcm);
    let spec = axis_spectrum(grid, n, k_lo - 1, k_hi + 2 - (k_lo - 1), OFF_AXIS_BINS + 1);

    let mut best = (0i32, 0usize, f64::NEG_INFINITY);
    let mut in_band = Vec::with_capacity((2 * OFF_AXIS_BINS as usize + 1) * (k_hi - k_lo + 1));
    for ky in -OFF_AXIS_BINS..=OFF_AXIS_BINS {
        for kx in k_lo..=k_hi {
            let m = spec.at(ky, kx);
            in_band.push(m);
            if m > best.2 {
                best = (ky, kx, m);
            }
        }
    }
    let median = median_of(&mut in_band);
    let (ky, kx, peak) = best;
    let ratio = if median > 0.0 { peak / median } else { 0.0 };
    if !(peak > 0.0) || ratio < PEAK_TO_MEDIAN {
        return Err(SpectralError::NoPeak { ratio });
    }
    let fx = (kx as f64 + parabolic_offset(spec.at(ky, kx - 1), peak, spec.at(ky, kx + 1))) * bin_hz;
    let fy = (ky as f64 + parabolic_offset(spec.at(ky - 1, kx), peak, spec.at(ky + 1, kx))) * bin_hz;
    let density = fx.hypot(fy).clamp(BAND.0, BAND.1);
    Ok(AxisPeak { density, ratio })
}

/// Vertex offset of the parabola through three equally spaced log-magnitudes.
fn parabolic_offset(left: f64, centre: f64, right: f64) -> f64 {
    let floor = centre * 1e-12;
    let (a, b, c) = (left.max(floor).ln(), centre.ln(), right.max(floor).ln());
    let denom = a - 2.0 * b + c;
    if denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Robust mean density from a coarse scan: histogram each orientation over
/// the search band, drop values at or below `mode / 1.5`, average what
/// remains, then average the two orientations.
pub fn aggregate_densities(vertical: &[f64], horizontal: &[f64], bins: usize) -> Result<f64> {
    if vertical.len() < 4 || horizontal.len() < 4 {
        return Err(SpectralError::TooFewValues { vertical: vertical.len(), horizontal: horizontal.len() });
    }
    let v = mode_filtered_mean(vertical, bins.max(1))?;
    let h = mode_filtered_mean(horizontal, bins.max(1))?;
    Ok(0.5 * (v + h))
}

fn mode_filtered_mean(values: &[f64], bins: usize) -> Result<f64> {
    let (lo, hi) = BAND;
    let width = (hi - lo) / bins as f64;
    let in_band: Vec<f64> = values.iter().copied().filter(|v| (lo..=hi).contains(v)).collect();
    if in_band.is_empty() {
        return Err(SpectralError::EmptyAfterFilter);
    }
    let mut counts = vec![0usize; bins];
    for &v in &in_band {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let mode_bin = counts.iter().enumerate().fold((0, 0), |best, (i, &c)| if c > best.1 { (i, c) } else { best }).0;
    let mode = lo + (mode_bin as f64 + 0.5) * width;
    let threshold = mode / 1.5;
    let kept: Vec<f64> = in_band.into_iter().filter(|&v| v > threshold).collect();
    if kept.is_empty() {
        return Err(SpectralError::EmptyAfterFilter);
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// `|a - b| / b`, the relative disagreement of `a` against reference `b`.
pub fn relative_agreement(a: f64, b: f64) -> Result<f64> {
    if !(b > 0.0) {
        return Err(SpectralError::NonPositiveReference(b));
    }
    Ok((a - b).abs() / b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{flip_h, rot90_cw};

    fn grating(freq: f64, angle_deg: f64) -> GrayImage {
        let (s, c) = angle_deg.to_radians().sin_cos();
        GrayImage::from_fn_clamped(200, 200, 200.0, |y, x| {
            let (xc, yc) = (x as f64 / 200.0, y as f64 / 200.0);
            let u = c * xc - s * yc;
            128.0 + 100.0 * (2.0 * PI * freq * u).cos()
        })
    }

    /// Brute-force 2D DFT magnitude of the zero-padded windowed patch at one bin.
    fn dft_mag(patch: &GrayImage, ky: i32, kx: i32) -> f64 {
        let n = patch.height();
        let mean = patch.mean();
        let win = hann(n);
        let mut acc = Complex64::new(0.0, 0.0);
        for y in 0..n {
            for x in 0..n {
                let v = (patch.get(y, x) as f64 - mean) * win[y] * win[x];
                let ph = -2.0 * PI * (ky as f64 * y as f64 + kx as f64 * x as f64) / FFT_LEN as f64;
                acc += Complex64::from_polar(v, ph);
            }
        }
        acc.norm()
    }

    #[test]
    fn vertical_stripes_at_12() {
        let est = ft_density(&grating(12.0, 0.0)).unwrap();
        assert!((est.v_density - 12.0).abs() <= 0.1, "{est:?}");
    }

    #[test]
    fn rotated_stripes_at_12() {
        let est = ft_density(&grating(12.0, 3.0)).unwrap();
        let expected = 12.0 / 3f64.to_radians().cos();
        assert!((est.v_density - expected).abs() <= 0.15, "{est:?}");
    }

    #[test]
    fn constant_patch_has_no_peak() {
        let p = GrayImage::filled(200, 200, 200.0, 90.0);
        assert!(matches!(ft_density(&p), Err(SpectralError::NoPeak { .. })));
    }

    #[test]
    fn gratings_across_the_band() {
        let mut prev = 0.0;
        for f in 5..=25 {
            let est = ft_density(&grating(f as f64, 0.0)).unwrap();
            assert!((est.v_density - f as f64).abs() <= 0.15, "f={f} got {}", est.v_density);
            assert!(est.v_density > prev);
            prev = est.v_density;
            let h = ft_density(&rot90_cw(&grating(f as f64, 0.0))).unwrap();
            assert!((h.h_density - f as f64).abs() <= 0.15, "f={f} got {}", h.h_density);
        }
    }

    #[test]
    fn row_fft_slice_matches_full_dft() {
        let p = grating(9.3, 2.0);
        let n = 200;
        let win = hann(n);
        let mean = p.mean();
        let grid: Vec<f64> = (0..n * n).map(|i| (p.pixels()[i] as f64 - mean) * win[i / n] * win[i % n]).collect();
        let spec = axis_spectrum(&grid, n, 20, 10, 3);
        for ky in [-3, -1, 0, 2] {
            for kx in [20usize, 23, 24, 29] {
                let brute = dft_mag(&p, ky, kx as i32);
                assert!((spec.at(ky, kx) - brute).abs() <= 1e-9 * brute.max(1.0), "({ky},{kx})");
            }
        }
    }

    #[test]
    fn mean_shift_and_flip_invariance() {
        let p = grating(14.0, 1.0);
        let shifted = p.map(|v| v as f64 * 0.5 + 20.0);
        let base = ft_density(&p.map(|v| v as f64 * 0.5)).unwrap();
        let moved = ft_density(&shifted).unwrap();
        assert!((base.v_density - moved.v_density).abs() < 1e-9);
        let flipped = ft_density(&flip_h(&p)).unwrap();
        let orig = ft_density(&p).unwrap();
        assert!((flipped.v_density - orig.v_density).abs() < 1e-9);
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_densities(&[12.0; 4], &[12.0; 4], 300).unwrap(), 12.0);
        let t = aggregate_densities(&[12.0, 12.0, 12.0, 2.0], &[14.0, 14.0, 14.0, 14.0], 300).unwrap();
        assert!((t - 13.0).abs() < 1e-12);
        let t = aggregate_densities(&[12.0, 12.0, 12.0, 12.0, 7.9], &[12.0; 4], 300).unwrap();
        assert!((t - 12.0).abs() < 1e-12);
        assert!(matches!(aggregate_densities(&[1.0; 4], &[12.0; 4], 300), Err(SpectralError::EmptyAfterFilter)));
        assert!(matches!(aggregate_densities(&[12.0; 3], &[12.0; 4], 300), Err(SpectralError::TooFewValues { .. })));
    }

    #[test]
    fn agreement_examples() {
        assert_eq!(relative_agreement(10.0, 10.0).unwrap(), 0.0);
        assert!((relative_agreement(10.4, 10.0).unwrap() - 0.04).abs() < 1e-12);
        assert!(matches!(relative_agreement(1.0, 0.0), Err(SpectralError::NonPositiveReference(_))));
    }
}
