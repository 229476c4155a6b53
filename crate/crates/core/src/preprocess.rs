//! Plate preprocessing: local contrast normalization with a window adapted to
//! the mean thread spacing, followed by a global histogram equalization.

use rayon::prelude::*;
use thiserror::Error;

use crate::raster::{self, GrayImage, RasterError, CANONICAL_PPCM};
use crate::spectral::{self, SpectralError};

/// Initial window width of the two-pass kernel search.
pub const DEFAULT_K0: usize = 21;
/// Regularizer in the standard-deviation denominator.
pub const STD_EPS: f64 = 1e-3;
/// Smallest window emitted by the kernel-size rule.
pub const MIN_KERNEL: usize = 15;
/// Coarse-scan grid spacing in centimetres.
pub const SCAN_SPACING_CM: f64 = 7.0;

const PATCH_PX: usize = 200;
const BAND_ROWS: usize = 64;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("kernel size {k} must be odd and within 3..={max}")]
    BadKernel { k: usize, max: usize },
    #[error("coarse scan failed: only {valid} of {sampled} patches gave a spectral peak")]
    ScanFailed { valid: usize, sampled: usize },
    #[error("plate of {height_cm:.2}x{width_cm:.2} cm is smaller than 3x3 cm")]
    PlateTooSmall { height_cm: f64, width_cm: f64 },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T> = std::result::Result<T, PreprocessError>;

/// Outcome of the adaptive kernel search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelPlan {
    pub k0: usize,
    /// Window chosen by the first pass (started from `k0`).
    pub first_k: usize,
    /// Final window, from the second pass.
    pub k: usize,
    /// Mean density estimate of the second pass, thr/cm.
    pub t: f64,
}

/// 256-entry gray-level mapping produced by [`equalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct EqualizationLut {
    table: [f32; 256],
}

impl EqualizationLut {
    pub fn table(&self) -> &[f32; 256] {
        &self.table
    }

    #[inline]
    pub fn apply(&self, v: f32) -> f32 {
        self.table[v.round().clamp(0.0, 255.0) as usize]
    }
}

/// Real-valued grid with the shape of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct RealGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl RealGrid {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

fn check_kernel(img: &GrayImage, k: usize) -> Result<()> {
    let max = img.height().min(img.width());
    if k.is_multiple_of(2) || k < 3 || k > max {
        return Err(PreprocessError::BadKernel { k, max });
    }
    Ok(())
}

/// Visits the k×k window mean and population standard deviation of every
/// pixel in the rectangle `rows × cols`, with edge-clamped borders.
///
/// Windows are summed separably: first along x for each needed source row,
/// then along y. Each output depends only on its own window, summed in a
/// fixed order, so results do not depend on how rows are banded.
fn window_stats(
    img: &GrayImage,
    k: usize,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    mut visit: impl FnMut(usize, usize, f64, f64),
) {
    let r = (k / 2) as isize;
    let (h, w) = (img.height() as isize, img.width() as isize);
    let cw = cols.len();
    let src_lo = (rows.start as isize - r).max(0) as usize;
    let src_hi = ((rows.end as isize - 1 + r).min(h - 1)) as usize;
    let n_src = src_hi + 1 - src_lo;
    let mut hs = vec![0.0f64; n_src * cw];
    let mut hs2 = vec![0.0f64; n_src * cw];
    let mut padded = Vec::with_capacity(cw + k);
    for sy in src_lo..=src_hi {
        let row = img.row(sy);
        padded.clear();
        for x in (cols.start as isize - r)..(cols.end as isize + r) {
            padded.push(row[x.clamp(0, w - 1) as usize] as f64);
        }
        let base = (sy - src_lo) * cw;
        for i in 0..cw {
            let win = &padded[i..i + k];
            let mut s = 0.0;
            let mut s2 = 0.0;
            for &v in win {
                s += v;
                s2 += v * v;
            }
            hs[base + i] = s;
            hs2[base + i] = s2;
        }
    }
    let area = (k * k) as f64;
    let mut acc = vec![0.0f64; cw];
    let mut acc2 = vec![0.0f64; cw];
    for y in rows {
        acc.iter_mut().for_each(|a| *a = 0.0);
        acc2.iter_mut().for_each(|a| *a = 0.0);
        for dy in -r..=r {
            let sy = (y as isize + dy).clamp(0, h - 1) as usize - src_lo;
            let (a, b) = (&hs[sy * cw..(sy + 1) * cw], &hs2[sy * cw..(sy + 1) * cw]);
            for i in 0..cw {
                acc[i] += a[i];
                acc2[i] += b[i];
            }
        }
        for i in 0..cw {
            let mean = acc[i] / area;
            let var = (acc2[i] / area - mean * mean).max(0.0);
            visit(y, cols.start + i, mean, var.sqrt());
        }
    }
}

/// Per-pixel local mean and population standard deviation over a k×k window.
pub fn local_stats(img: &GrayImage, k: usize) -> Result<(RealGrid, RealGrid)> {
    check_kernel(img, k)?;
    let (h, w) = (img.height(), img.width());
    let mut mean = vec![0.0; h * w];
    let mut std = vec![0.0; h * w];
    window_stats(img, k, 0..h, 0..w, |y, x, m, s| {
        mean[y * w + x] = m;
        std[y * w + x] = s;
    });
    Ok((RealGrid { height: h, width: w, values: mean }, RealGrid { height: h, width: w, values: std }))
}

#[inline]
fn z_transfer(v: f64, mean: f64, std: f64) -> f32 {
    raster::clamp_pixel(128.0 + 64.0 * (v - mean) / (std + STD_EPS))
}

/// `128 + 64·(x − μ)/(σ + ε)`, clipped to `[0, 255]`, with μ and σ taken over
/// the k×k neighbourhood.
pub fn normalize_contrast(img: &GrayImage, k: usize) -> Result<GrayImage> {
    check_kernel(img, k)?;
    let (h, w) = (img.height(), img.width());
    let mut out = vec![0.0f32; h * w];
    out.par_chunks_mut(BAND_ROWS * w).enumerate().for_each(|(band, chunk)| {
        let y0 = band * BAND_ROWS;
        let y1 = (y0 + BAND_ROWS).min(h);
        window_stats(img, k, y0..y1, 0..w, |y, x, m, s| {
            chunk[(y - y0) * w + x] = z_transfer(img.get(y, x) as f64, m, s);
        });
    });
    Ok(GrayImage::from_raw(h, w, img.ppcm(), out))
}

/// [`normalize_contrast`] evaluated only inside a rectangle. Bit-identical to
/// cropping the fully normalized image.
pub fn normalize_contrast_region(
    img: &GrayImage,
    k: usize,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Result<GrayImage> {
    check_kernel(img, k)?;
    if height == 0 || width == 0 || top + height > img.height() || left + width > img.width() {
        return Err(
            RasterError::OutOfBounds { top, left, height, width, img_h: img.height(), img_w: img.width() }.into()
        );
    }
    let mut out = vec![0.0f32; height * width];
    window_stats(img, k, top..top + height, left..left + width, |y, x, m, s| {
        out[(y - top) * width + (x - left)] = z_transfer(img.get(y, x) as f64, m, s);
    });
    Ok(GrayImage::from_raw(height, width, img.ppcm(), out))
}

/// The kernel-size rule: `k_raw = 37.05 − 0.90·t`, then the largest odd
/// integer not above `k_raw`, never below [`MIN_KERNEL`].
pub fn kernel_from_density(t: f64) -> usize {
    let k_raw = -0.90 * t + 37.05;
    let mut k = k_raw.floor() as i64;
    if k % 2 == 0 {
        k -= 1;
    }
    k.max(MIN_KERNEL as i64) as usize
}

/// Top-left pixel offsets of the coarse-scan grid along one axis.
fn scan_offsets(dim_px: usize, ppcm: f64) -> Vec<usize> {
    let dim_cm = dim_px as f64 / ppcm;
    let mut spacing = SCAN_SPACING_CM;
    let mut n = ((dim_cm - 1.0) / spacing).floor() as usize + 1;
    if n < 3 {
        spacing = (dim_cm - 1.0) / 2.0;
        n = 3;
    }
    let max_off = dim_px - PATCH_PX;
    (0..n).map(|i| ((i as f64 * spacing * ppcm).round() as usize).min(max_off)).collect()
}

/// Runs one pass of the kernel search with normalization window `k_in`.
fn kernel_pass<F>(plate: &GrayImage, k_in: usize, scan: &F) -> Result<(f64, usize)>
where
    F: Fn(&GrayImage) -> std::result::Result<(f64, f64), SpectralError> + Sync,
{
    let ys = scan_offsets(plate.height(), plate.ppcm());
    let xs = scan_offsets(plate.width(), plate.ppcm());
    let cells: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
    let results: Vec<Option<(f64, f64)>> = cells
        .par_iter()
        .map(|&(y, x)| {
            let patch = normalize_contrast_region(plate, k_in, y, x, PATCH_PX, PATCH_PX).ok()?;
            scan(&patch).ok()
        })
        .collect();
    let (v, h): (Vec<f64>, Vec<f64>) = results.into_iter().flatten().unzip();
    if v.len() < 4 {
        return Err(PreprocessError::ScanFailed { valid: v.len(), sampled: cells.len() });
    }
    let t = spectral::aggregate_densities(&v, &h, spectral::DEFAULT_BINS)?;
    Ok((t, kernel_from_density(t)))
}

/// Adaptive window search, run twice: first from `k0`, then from the window
/// found by the first pass. `scan` maps a normalized 1×1 cm patch to
/// (vertical, horizontal) densities.
pub fn estimate_kernel_size<F>(plate: &GrayImage, k0: usize, scan: F) -> Result<KernelPlan>
where
    F: Fn(&GrayImage) -> std::result::Result<(f64, f64), SpectralError> + Sync,
{
    let (h_cm, w_cm) = (plate.height() as f64 / plate.ppcm(), plate.width() as f64 / plate.ppcm());
    if h_cm < 3.0 || w_cm < 3.0 || plate.height() < PATCH_PX || plate.width() < PATCH_PX {
        return Err(PreprocessError::PlateTooSmall { height_cm: h_cm, width_cm: w_cm });
    }
    check_kernel(plate, k0)?;
    let (_, first_k) = kernel_pass(plate, k0, &scan)?;
    let (t, k) = kernel_pass(plate, first_k, &scan)?;
    Ok(KernelPlan { k0, first_k, k, t })
}

/// [`estimate_kernel_size`] with the Fourier estimator as the scan.
pub fn estimate_kernel_size_ft(plate: &GrayImage, k0: usize) -> Result<KernelPlan> {
    estimate_kernel_size(plate, k0, |p| spectral::ft_density(p).map(|e| (e.v_density, e.h_density)))
}

/// Global histogram equalization through a 256-entry look-up table.
///
/// The histogram of rounded levels is scaled to sum 255 and integrated; the
/// output of a pixel `x` is the rounded integral at `round(x)`.
pub fn equalize(img: &GrayImage) -> (GrayImage, EqualizationLut) {
    let mut hist = [0u64; 256];
    for &v in img.pixels() {
        hist[v.round().clamp(0.0, 255.0) as usize] += 1;
    }
    let total = img.pixels().len() as f64;
    let mut table = [0.0f32; 256];
    let mut cum = 0u64;
    for (slot, &count) in table.iter_mut().zip(&hist) {
        cum += count;
        *slot = (255.0 * cum as f64 / total).round() as f32;
    }
    let lut = EqualizationLut { table };
    let out = img.map(|v| lut.apply(v) as f64);
    (out, lut)
}

/// Settings of the full plate preprocessing chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    pub k0: usize,
    /// Bypasses the kernel search with a fixed window.
    pub fixed_k: Option<usize>,
    pub equalize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { k0: DEFAULT_K0, fixed_k: None, equalize: true }
    }
}

#[derive(Debug, Clone)]
pub struct PreprocessReport {
    pub plan: Option<KernelPlan>,
    pub k: usize,
    pub lut: Option<EqualizationLut>,
}

/// Rescale to 200 px/cm, normalize with the adaptive (or fixed) window, then
/// equalize.
pub fn preprocess_plate(img: &GrayImage, cfg: &PreprocessConfig) -> Result<(GrayImage, PreprocessReport)> {
    let plate = raster::rescale(img, CANONICAL_PPCM)?;
    let (k, plan) = match cfg.fixed_k {
        Some(k) => {
            check_kernel(&plate, k)?;
            (k, None)
        }
        None => {
            let plan = estimate_kernel_size_ft(&plate, cfg.k0)?;
            (plan.k, Some(plan))
        }
    };
    let normalized = normalize_contrast(&plate, k)?;
    let (out, lut) = if cfg.equalize {
        let (o, l) = equalize(&normalized);
        (o, Some(l))
    } else {
        (normalized, None)
    };
    Ok((out, PreprocessReport { plan, k, lut }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_stats(img: &GrayImage, k: usize, y: usize, x: usize) -> (f64, f64) {
        let r = (k / 2) as isize;
        let mut vals = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let yy = (y as isize + dy).clamp(0, img.height() as isize - 1) as usize;
                let xx = (x as isize + dx).clamp(0, img.width() as isize - 1) as usize;
                vals.push(img.get(yy, xx) as f64);
            }
        }
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let v = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        (m, v.sqrt())
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> GrayImage {
        let mut s = seed;
        GrayImage::from_fn_clamped(h, w, 200.0, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) % 256) as f64
        })
    }

    #[test]
    fn constant_image_stats() {
        let img = GrayImage::filled(9, 11, 200.0, 77.0);
        for k in [3, 5, 9] {
            let (m, s) = local_stats(&img, k).unwrap();
            assert!(m.values.iter().all(|&v| v == 77.0));
            assert!(s.values.iter().all(|&v| v == 0.0));
        }
        assert!(normalize_contrast(&img, 5).unwrap().pixels().iter().all(|&v| v == 128.0));
    }

    #[test]
    fn stats_match_brute_force() {
        let vals: Vec<f32> = (0..25).map(|i| (i * 37 % 101) as f32).collect();
        let img = GrayImage::new(5, 5, 200.0, vals).unwrap();
        let (m, s) = local_stats(&img, 3).unwrap();
        let (bm, bs) = brute_stats(&img, 3, 2, 2);
        assert!((m.get(2, 2) - bm).abs() < 1e-12);
        assert!((s.get(2, 2) - bs).abs() < 1e-9);

        let img = noise_image(23, 31, 9);
        for k in [3, 7, 11] {
            let (m, s) = local_stats(&img, k).unwrap();
            for y in 0..23 {
                for x in 0..31 {
                    let (bm, bs) = brute_stats(&img, k, y, x);
                    assert!((m.get(y, x) - bm).abs() < 1e-9);
                    assert!((s.get(y, x) - bs).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn bad_kernels() {
        let img = GrayImage::filled(8, 8, 200.0, 1.0);
        assert!(matches!(local_stats(&img, 4), Err(PreprocessError::BadKernel { .. })));
        assert!(matches!(local_stats(&img, 1), Err(PreprocessError::BadKernel { .. })));
        assert!(matches!(local_stats(&img, 9), Err(PreprocessError::BadKernel { .. })));
    }

    #[test]
    fn checkerboard_is_symmetric_about_128() {
        let img = GrayImage::from_fn_clamped(12, 12, 200.0, |y, x| if (x + y) % 2 == 0 { 0.0 } else { 255.0 });
        let out = normalize_contrast(&img, 3).unwrap();
        let (a, b) = (out.get(5, 5) as f64, out.get(5, 6) as f64);
        assert!((a + b - 256.0).abs() < 1e-4, "{a} {b}");
    }

    #[test]
    fn region_matches_full_normalization() {
        let img = noise_image(40, 50, 3);
        let full = normalize_contrast(&img, 7).unwrap();
        let part = normalize_contrast_region(&img, 7, 3, 11, 20, 30).unwrap();
        assert_eq!(part, raster::crop(&full, 3, 11, 20, 30).unwrap());
    }

    #[test]
    fn banding_does_not_change_results() {
        let img = noise_image(150, 20, 5);
        let full = normalize_contrast(&img, 9).unwrap();
        let mut rows = Vec::new();
        for y in 0..150 {
            rows.extend_from_slice(normalize_contrast_region(&img, 9, y, 0, 1, 20).unwrap().pixels());
        }
        assert_eq!(full.pixels(), &rows[..]);
    }

    #[test]
    fn kernel_rule_examples() {
        assert_eq!(kernel_from_density(14.5), 23);
        assert_eq!(kernel_from_density(6.0), 31);
        assert_eq!(kernel_from_density(23.0), 15);
        assert_eq!(kernel_from_density(10.0), 27);
        assert_eq!(kernel_from_density(18.0), 19);
        assert_eq!(kernel_from_density(30.0), MIN_KERNEL);
    }

    #[test]
    fn scan_grid_shrinks_on_small_plates() {
        assert_eq!(scan_offsets(600, 200.0), vec![0, 200, 400]);
        let big = scan_offsets(6000, 200.0);
        assert_eq!(big, vec![0, 1400, 2800, 4200, 5600]);
    }

    #[test]
    fn equalize_constant_and_uniform() {
        let (out, lut) = equalize(&GrayImage::filled(4, 4, 200.0, 10.0));
        assert_eq!(lut.table()[10], 255.0);
        assert!(out.pixels().iter().all(|&v| v == 255.0));

        let ramp = GrayImage::from_fn_clamped(16, 16, 200.0, |y, x| (y * 16 + x) as f64);
        let (_, lut) = equalize(&ramp);
        for x in 0..256 {
            assert!((lut.table()[x] - x as f32).abs() <= 1.0);
        }
        assert!(lut.table().windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(lut.table()[255], 255.0);
    }
}
