//! Grayscale rasters and the geometric transforms used throughout the pipeline.
//!
//! Pixels are stored row-major as `f32` in the closed range `[0, 255]`, together
//! with the scan resolution in pixels per centimetre.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Canonical working resolution of every estimator.
pub const CANONICAL_PPCM: f64 = 200.0;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("unreadable file {path}: {source}")]
    UnreadableFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("image has a zero dimension")]
    ZeroDimension,
    #[error("rescaled image would be smaller than 1x1 ({0}x{1})")]
    ResultTooSmall(usize, usize),
    #[error("rectangle {top},{left} {height}x{width} outside {img_h}x{img_w} image")]
    OutOfBounds { top: usize, left: usize, height: usize, width: usize, img_h: usize, img_w: usize },
    #[error("invalid pixel data: {0}")]
    InvalidPixels(String),
    #[error("invalid ppcm {0}")]
    InvalidPpcm(f64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RasterError>;

/// A row-major grayscale image with its resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    ppcm: f64,
    pixels: Vec<f32>,
}

impl GrayImage {
    /// Builds an image after checking every invariant.
    pub fn new(height: usize, width: usize, ppcm: f64, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(RasterError::ZeroDimension);
        }
        if !(ppcm.is_finite() && ppcm > 0.0) {
            return Err(RasterError::InvalidPpcm(ppcm));
        }
        if pixels.len() != height * width {
            return Err(RasterError::InvalidPixels(format!(
                "expected {} values, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(v.is_finite() && (0.0..=255.0).contains(*v))) {
            return Err(RasterError::InvalidPixels(format!("value {bad} outside [0, 255]")));
        }
        Ok(Self { height, width, ppcm, pixels })
    }

    /// Builds an image from arbitrary values, clamping them into `[0, 255]`.
    /// Non-finite values become 0.
    pub fn from_fn_clamped(height: usize, width: usize, ppcm: f64, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "zero-sized image");
        assert!(ppcm > 0.0);
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(clamp_pixel(f(y, x)));
            }
        }
        Self { height, width, ppcm, pixels }
    }

    pub fn filled(height: usize, width: usize, ppcm: f64, value: f32) -> Self {
        Self::from_fn_clamped(height, width, ppcm, |_, _| value as f64)
    }

    /// Takes ownership of already-clamped pixels. Panics in debug builds if an
    /// invariant is broken.
    pub(crate) fn from_raw(height: usize, width: usize, ppcm: f64, pixels: Vec<f32>) -> Self {
        debug_assert_eq!(pixels.len(), height * width);
        debug_assert!(pixels.iter().all(|v| (0.0..=255.0).contains(v)));
        Self { height, width, ppcm, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ppcm(&self) -> f64 {
        self.ppcm
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[f32] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    /// Same pixels, different resolution tag.
    pub fn with_ppcm(mut self, ppcm: f64) -> Result<Self> {
        if !(ppcm.is_finite() && ppcm > 0.0) {
            return Err(RasterError::InvalidPpcm(ppcm));
        }
        self.ppcm = ppcm;
        Ok(self)
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f64) -> Self {
        let pixels = self.pixels.iter().map(|&v| clamp_pixel(f(v))).collect();
        Self::from_raw(self.height, self.width, self.ppcm, pixels)
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

#[inline]
pub(crate) fn clamp_pixel(v: f64) -> f32 {
    if v.is_finite() {
        v.clamp(0.0, 255.0) as f32
    } else {
        0.0
    }
}

/// Bilinear resampling to `target_ppcm`.
///
/// Output dimensions are `round(dim * target / ppcm)`; samples are taken at
/// pixel centres with edge clamping.
pub fn rescale(img: &GrayImage, target_ppcm: f64) -> Result<GrayImage> {
    if !(target_ppcm.is_finite() && target_ppcm > 0.0) {
        return Err(RasterError::InvalidPpcm(target_ppcm));
    }
    if target_ppcm == img.ppcm {
        return Ok(img.clone());
    }
    let factor = target_ppcm / img.ppcm;
    let out_h = (img.height as f64 * factor).round() as usize;
    let out_w = (img.width as f64 * factor).round() as usize;
    if out_h < 1 || out_w < 1 {
        return Err(RasterError::ResultTooSmall(out_h, out_w));
    }
    let mut out = resize_bilinear(img, out_h, out_w);
    out.ppcm = target_ppcm;
    Ok(out)
}

/// Bilinear resize to explicit dimensions, keeping the physical extent.
pub fn resize_bilinear(img: &GrayImage, out_h: usize, out_w: usize) -> GrayImage {
    assert!(out_h > 0 && out_w > 0);
    let sy = img.height as f64 / out_h as f64;
    let sx = img.width as f64 / out_w as f64;
    let ppcm = img.ppcm * out_w as f64 / img.width as f64;
    let mut pixels = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let fy = (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..out_w {
            let fx = (ox as f64 + 0.5) * sx - 0.5;
            pixels.push(clamp_pixel(sample_bilinear(img, fy, fx)));
        }
    }
    GrayImage::from_raw(out_h, out_w, ppcm, pixels)
}

/// Area-averaging resize: each output pixel is the coverage-weighted mean of
/// the source pixels under its footprint. Used for strong downsampling where
/// bilinear sampling would alias.
pub fn resize_area(img: &GrayImage, out_h: usize, out_w: usize) -> GrayImage {
    assert!(out_h > 0 && out_w > 0);
    if out_h == img.height && out_w == img.width {
        return img.clone();
    }
    let wy = area_weights(img.height, out_h);
    let wx = area_weights(img.width, out_w);
    let ppcm = img.ppcm * out_w as f64 / img.width as f64;
    // Horizontal pass then vertical pass, both with fixed summation order.
    let mut tmp = vec![0.0f64; img.height * out_w];
    for y in 0..img.height {
        let row = img.row(y);
        for (ox, taps) in wx.iter().enumerate() {
            tmp[y * out_w + ox] = taps.iter().map(|&(i, w)| row[i] as f64 * w).sum();
        }
    }
    let mut pixels = Vec::with_capacity(out_h * out_w);
    for taps in &wy {
        for ox in 0..out_w {
            let v: f64 = taps.iter().map(|&(i, w)| tmp[i * out_w + ox] * w).sum();
            pixels.push(clamp_pixel(v));
        }
    }
    GrayImage::from_raw(out_h, out_w, ppcm, pixels)
}

fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let a = o as f64 * scale;
            let b = a + scale;
            let mut taps = Vec::new();
            let mut i = a.floor() as usize;
            while (i as f64) < b && i < src {
                let lo = (i as f64).max(a);
                let hi = ((i + 1) as f64).min(b);
                if hi > lo {
                    taps.push((i, (hi - lo) / scale));
                }
                i += 1;
            }
            taps
        })
        .collect()
}

/// Bilinear sample at fractional coordinates, clamping to the border.
#[inline]
pub fn sample_bilinear(img: &GrayImage, fy: f64, fx: f64) -> f64 {
    let max_y = (img.height - 1) as f64;
    let max_x = (img.width - 1) as f64;
    let fy = fy.clamp(0.0, max_y);
    let fx = fx.clamp(0.0, max_x);
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(img.height - 1);
    let x1 = (x0 + 1).min(img.width - 1);
    let dy = fy - y0 as f64;
    let dx = fx - x0 as f64;
    let p00 = img.get(y0, x0) as f64;
    let p01 = img.get(y0, x1) as f64;
    let p10 = img.get(y1, x0) as f64;
    let p11 = img.get(y1, x1) as f64;
    let top = p00 + (p01 - p00) * dx;
    let bottom = p10 + (p11 - p10) * dx;
    top + (bottom - top) * dy
}

/// Rotation about the image centre; positive angles turn the content clockwise.
///
/// Multiples of 90° are exact index permutations (dimensions swap for odd
/// quarter turns). Other angles keep the input size and sample bilinearly with
/// clamp-to-edge borders.
pub fn rotate(img: &GrayImage, degrees: f64) -> GrayImage {
    let turns = degrees.rem_euclid(360.0);
    if turns == 0.0 {
        return img.clone();
    }
    if turns == 90.0 {
        return rot90_cw(img);
    }
    if turns == 180.0 {
        let mut pixels = img.pixels.clone();
        pixels.reverse();
        return GrayImage::from_raw(img.height, img.width, img.ppcm, pixels);
    }
    if turns == 270.0 {
        return rot90_ccw(img);
    }
    let theta = degrees.to_radians();
    let (s, c) = theta.sin_cos();
    let cy = (img.height as f64 - 1.0) / 2.0;
    let cx = (img.width as f64 - 1.0) / 2.0;
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        let dy = y as f64 - cy;
        for x in 0..img.width {
            let dx = x as f64 - cx;
            // Inverse map: rotate the output coordinate back by -theta.
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            pixels.push(clamp_pixel(sample_bilinear(img, sy, sx)));
        }
    }
    GrayImage::from_raw(img.height, img.width, img.ppcm, pixels)
}

/// Quarter turn clockwise: `out[i][j] = in[h-1-j][i]`.
pub fn rot90_cw(img: &GrayImage) -> GrayImage {
    let (h, w) = (img.height, img.width);
    let mut pixels = Vec::with_capacity(h * w);
    for i in 0..w {
        for j in 0..h {
            pixels.push(img.get(h - 1 - j, i));
        }
    }
    GrayImage::from_raw(w, h, img.ppcm, pixels)
}

fn rot90_ccw(img: &GrayImage) -> GrayImage {
    let (h, w) = (img.height, img.width);
    let mut pixels = Vec::with_capacity(h * w);
    for i in 0..w {
        for j in 0..h {
            pixels.push(img.get(j, w - 1 - i));
        }
    }
    GrayImage::from_raw(w, h, img.ppcm, pixels)
}

/// Mirror left-right.
pub fn flip_h(img: &GrayImage) -> GrayImage {
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        pixels.extend(img.row(y).iter().rev());
    }
    GrayImage::from_raw(img.height, img.width, img.ppcm, pixels)
}

/// Mirror top-bottom.
pub fn flip_v(img: &GrayImage) -> GrayImage {
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in (0..img.height).rev() {
        pixels.extend_from_slice(img.row(y));
    }
    GrayImage::from_raw(img.height, img.width, img.ppcm, pixels)
}

pub fn crop(img: &GrayImage, top: usize, left: usize, height: usize, width: usize) -> Result<GrayImage> {
    if height == 0 || width == 0 {
        return Err(RasterError::ZeroDimension);
    }
    if top + height > img.height || left + width > img.width {
        return Err(RasterError::OutOfBounds { top, left, height, width, img_h: img.height, img_w: img.width });
    }
    let mut pixels = Vec::with_capacity(height * width);
    for y in top..top + height {
        pixels.extend_from_slice(&img.row(y)[left..left + width]);
    }
    Ok(GrayImage::from_raw(height, width, img.ppcm, pixels))
}

// ---------------------------------------------------------------------------
// File IO

/// Reads an 8-bit grayscale PNG or a binary PGM (P5).
///
/// The resolution comes from a `<name>.meta` sidecar (`ppcm=<value>`) when
/// present, otherwise [`CANONICAL_PPCM`].
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let ppcm = read_meta_ppcm(path)?.unwrap_or(CANONICAL_PPCM);
    load_gray_with_ppcm(path, ppcm)
}

pub fn load_gray_with_ppcm(path: &Path, ppcm: f64) -> Result<GrayImage> {
    let unreadable = |source| RasterError::UnreadableFile { path: path.to_path_buf(), source };
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(unreadable)?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes, ppcm)
    } else if bytes.starts_with(b"P5") {
        decode_pgm(&bytes, ppcm)
    } else if bytes.len() >= 2 && bytes[0] == b'P' && bytes[1].is_ascii_digit() {
        Err(RasterError::UnsupportedFormat(format!(
            "netpbm variant P{} (only binary P5 is supported)",
            bytes[1] as char
        )))
    } else {
        Err(RasterError::UnsupportedFormat("not a PNG or PGM file".into()))
    }
}

fn decode_png(bytes: &[u8], ppcm: f64) -> Result<GrayImage> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| RasterError::UnsupportedFormat(format!("png: {e}")))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale {
        return Err(RasterError::UnsupportedFormat(format!("png color type {:?}", info.color_type)));
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(RasterError::UnsupportedFormat(format!("png bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    if w == 0 || h == 0 {
        return Err(RasterError::ZeroDimension);
    }
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(w * h)];
    let frame = reader.next_frame(&mut buf).map_err(|e| RasterError::UnsupportedFormat(format!("png: {e}")))?;
    let stride = frame.line_size;
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        pixels.extend(buf[y * stride..y * stride + w].iter().map(|&b| b as f32));
    }
    GrayImage::new(h, w, ppcm, pixels)
}

fn decode_pgm(bytes: &[u8], ppcm: f64) -> Result<GrayImage> {
    // Header: magic, width, height, maxval separated by whitespace; '#' comments.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| RasterError::UnsupportedFormat("malformed PGM header".into()))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(RasterError::ZeroDimension);
    }
    if maxval == 0 || maxval > 255 {
        return Err(RasterError::UnsupportedFormat(format!("PGM maxval {maxval} (8-bit only)")));
    }
    let data =
        bytes.get(pos..pos + w * h).ok_or_else(|| RasterError::UnsupportedFormat("truncated PGM raster".into()))?;
    GrayImage::new(h, w, ppcm, data.iter().map(|&b| b as f32).collect())
}

fn to_bytes(img: &GrayImage) -> Vec<u8> {
    img.pixels.iter().map(|&v| v.round() as u8).collect()
}

/// Writes an 8-bit grayscale PNG; values are rounded to the nearest level.
pub fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_io)?;
    writer.write_image_data(&to_bytes(img)).map_err(png_io)?;
    writer.finish().map_err(png_io)?;
    Ok(())
}

/// Writes an 8-bit RGB PNG from interleaved bytes.
pub fn save_rgb_png(width: usize, height: usize, rgb: &[u8], path: &Path) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_io)?;
    writer.write_image_data(rgb).map_err(png_io)?;
    writer.finish().map_err(png_io)?;
    Ok(())
}

fn png_io(e: png::EncodingError) -> RasterError {
    match e {
        png::EncodingError::IoError(io) => RasterError::Io(io),
        other => RasterError::Io(std::io::Error::other(other.to_string())),
    }
}

pub fn save_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    write!(file, "P5\n{} {}\n255\n", img.width, img.height)?;
    file.write_all(&to_bytes(img))?;
    file.flush()?;
    Ok(())
}

/// Saves as PGM when the extension is `.pgm`, PNG otherwise.
pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("pgm") => save_pgm(img, path),
        _ => save_png(img, path),
    }
}

/// `<dir>/<stem>.meta` for an image path.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

pub fn read_meta_ppcm(path: &Path) -> Result<Option<f64>> {
    let meta = meta_path(path);
    let file = match File::open(&meta) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(source) => return Err(RasterError::UnreadableFile { path: meta, source }),
    };
    let mut text = String::new();
    BufReader::new(file).read_to_string(&mut text)?;
    for line in text.lines() {
        if let Some(v) = line.trim().strip_prefix("ppcm=") {
            let ppcm: f64 = v
                .trim()
                .parse()
                .map_err(|_| RasterError::UnsupportedFormat(format!("bad ppcm in {}", meta.display())))?;
            if !(ppcm.is_finite() && ppcm > 0.0) {
                return Err(RasterError::InvalidPpcm(ppcm));
            }
            return Ok(Some(ppcm));
        }
    }
    Ok(None)
}

pub fn write_meta(path: &Path, ppcm: f64) -> Result<()> {
    std::fs::write(meta_path(path), format!("ppcm={ppcm}\n"))?;
    Ok(())
}
