//! Whole-plate sweeps into density maps, semi-supervised refinement of a
//! model on patches where it agrees with the spectral estimate, map
//! matching between canvases, and map export.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::raster::{self, GrayImage, RasterError, CANONICAL_PPCM};
use crate::regnet::{self, History, RegError, RegModel, TrainConfig, TrainSet};
use crate::spectral;

pub const PATCH_PX: usize = 200;

#[derive(Debug, Error)]
pub enum AnalyzerError {
    #[error("PlateTooSmall: plate is {height}x{width} px, patches need at least {PATCH_PX}x{PATCH_PX}")]
    PlateTooSmall { height: usize, width: usize },
    #[error("BadOverlap: overlap {0} outside [0, 1)")]
    BadOverlap(f64),
    #[error("plate must be at {CANONICAL_PPCM} px/cm, got {0}")]
    NotCanonical(f64),
    #[error("IncompatibleOrientations: cannot match a {0} map against a {1} map")]
    IncompatibleOrientations(Orientation, Orientation),
    #[error("cannot match a {0} map against a {1} map")]
    IncompatibleSources(MapSource, MapSource),
    #[error("maps share no offset with enough valid overlap")]
    NoOverlap,
    #[error("color range requires lo < hi, got ({0}, {1})")]
    BadRange(f64, f64),
    #[error("map file format error: {0}")]
    Format(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Reg(#[from] RegError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnalyzerError>;

/// Patch grid over a plate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepGeometry {
    pub height: usize,
    pub width: usize,
    pub overlap: f64,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
}

/// `stride = round(200(1-o))`, `p = floor((r-200)/stride) + 1`.
pub fn sweep_geometry(height: usize, width: usize, overlap: f64) -> Result<SweepGeometry> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(AnalyzerError::BadOverlap(overlap));
    }
    if height < PATCH_PX || width < PATCH_PX {
        return Err(AnalyzerError::PlateTooSmall { height, width });
    }
    let stride = ((PATCH_PX as f64 * (1.0 - overlap)).round() as usize).max(1);
    Ok(SweepGeometry {
        height,
        width,
        overlap,
        stride,
        rows: (height - PATCH_PX) / stride + 1,
        cols: (width - PATCH_PX) / stride + 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Vertical,
    Horizontal,
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Orientation::Vertical => "vertical",
            Orientation::Horizontal => "horizontal",
        })
    }
}

impl FromStr for Orientation {
    type Err = AnalyzerError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vertical" => Ok(Orientation::Vertical),
            "horizontal" => Ok(Orientation::Horizontal),
            o => Err(AnalyzerError::Format(format!("unknown orientation {o:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapSource {
    Ft,
    Model,
    ModelSs,
}

impl fmt::Display for MapSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapSource::Ft => "ft",
            MapSource::Model => "model",
            MapSource::ModelSs => "model_ss",
        })
    }
}

impl FromStr for MapSource {
    type Err = AnalyzerError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ft" => Ok(MapSource::Ft),
            "model" => Ok(MapSource::Model),
            "model_ss" => Ok(MapSource::ModelSs),
            o => Err(AnalyzerError::Format(format!("unknown map source {o:?}"))),
        }
    }
}

/// Grid of per-patch densities; missing cells hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub orientation: Orientation,
    pub source: MapSource,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DensityMap {
    pub fn new_missing(orientation: Orientation, source: MapSource, stride: usize, rows: usize, cols: usize) -> Self {
        Self { orientation, source, stride, rows, cols, values: vec![f64::NAN; rows * cols] }
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let v = self.values[i * self.cols + j];
        (!v.is_nan()).then_some(v)
    }

    pub fn set(&mut self, i: usize, j: usize, v: Option<f64>) {
        self.values[i * self.cols + j] = v.unwrap_or(f64::NAN);
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }
}

/// Estimates (vertical, horizontal) densities for a batch of 200×200 patches;
/// `None` marks a failed estimate.
pub trait PatchEstimator: Sync {
    fn estimate(&self, patches: &[GrayImage]) -> Result<Vec<Option<(f64, f64)>>>;
    fn source(&self) -> MapSource;
}

/// Spectral-peak estimator.
pub struct FtEstimator;

impl PatchEstimator for FtEstimator {
    fn estimate(&self, patches: &[GrayImage]) -> Result<Vec<Option<(f64, f64)>>> {
        Ok(patches.par_iter().map(|p| spectral::ft_density(p).ok().map(|e| (e.v_density, e.h_density))).collect())
    }

    fn source(&self) -> MapSource {
        MapSource::Ft
    }
}

/// Regressor estimator: the horizontal density is the model's vertical
/// estimate on the patch rotated 90° clockwise. Outputs are clamped to the
/// valid density band.
pub struct ModelEstimator<'a> {
    pub model: &'a RegModel,
    pub source: MapSource,
}

impl<'a> ModelEstimator<'a> {
    pub fn new(model: &'a RegModel) -> Self {
        Self { model, source: MapSource::Model }
    }
}

impl PatchEstimator for ModelEstimator<'_> {
    fn estimate(&self, patches: &[GrayImage]) -> Result<Vec<Option<(f64, f64)>>> {
        let v = self.model.predict(patches)?;
        let rotated: Vec<GrayImage> = patches.iter().map(raster::rot90_cw).collect();
        let h = self.model.predict(&rotated)?;
        let (lo, hi) = spectral::BAND;
        Ok(v.into_iter().zip(h).map(|(a, b)| Some((a.clamp(lo, hi), b.clamp(lo, hi)))).collect())
    }

    fn source(&self) -> MapSource {
        self.source
    }
}

/// Closure-backed estimator, mostly for tests and stubs.
pub struct FnEstimator<F>(pub F, pub MapSource);

impl<F> PatchEstimator for FnEstimator<F>
where
    F: Fn(&GrayImage) -> Option<(f64, f64)> + Sync,
{
    fn estimate(&self, patches: &[GrayImage]) -> Result<Vec<Option<(f64, f64)>>> {
        Ok(patches.iter().map(&self.0).collect())
    }

    fn source(&self) -> MapSource {
        self.1
    }
}

fn check_plate(plate: &GrayImage) -> Result<()> {
    if (plate.ppcm() - CANONICAL_PPCM).abs() > 1e-9 {
        return Err(AnalyzerError::NotCanonical(plate.ppcm()));
    }
    Ok(())
}

fn patch_row(plate: &GrayImage, g: &SweepGeometry, i: usize) -> Vec<GrayImage> {
    (0..g.cols)
        .map(|j| raster::crop(plate, i * g.stride, j * g.stride, PATCH_PX, PATCH_PX).expect("grid inside plate"))
        .collect()
}

/// Runs the estimator over the patch grid, returning (vertical, horizontal) maps.
pub fn sweep(plate: &GrayImage, estimator: &dyn PatchEstimator, overlap: f64) -> Result<(DensityMap, DensityMap)> {
    check_plate(plate)?;
    let g = sweep_geometry(plate.height(), plate.width(), overlap)?;
    let src = estimator.source();
    let mut vmap = DensityMap::new_missing(Orientation::Vertical, src, g.stride, g.rows, g.cols);
    let mut hmap = DensityMap::new_missing(Orientation::Horizontal, src, g.stride, g.rows, g.cols);
    for i in 0..g.rows {
        let est = estimator.estimate(&patch_row(plate, &g, i))?;
        for (j, e) in est.into_iter().enumerate() {
            vmap.set(i, j, e.map(|x| x.0));
            hmap.set(i, j, e.map(|x| x.1));
        }
    }
    Ok((vmap, hmap))
}

/// True when both orientations agree within `threshold` (strictly), with
/// agreement measured as `|ft - dl| / dl`.
pub fn agrees(ft: (f64, f64), dl: (f64, f64), threshold: f64) -> bool {
    let ok = |a: f64, b: f64| spectral::relative_agreement(a, b).map(|r| r < threshold).unwrap_or(false);
    ok(ft.0, dl.0) && ok(ft.1, dl.1)
}

/// Which estimate labels the pooled patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsLabel {
    Ft,
    Dl,
}

impl FromStr for SsLabel {
    type Err = AnalyzerError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ft" => Ok(SsLabel::Ft),
            "dl" => Ok(SsLabel::Dl),
            o => Err(AnalyzerError::Format(format!("unknown label source {o:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsConfig {
    pub overlap: f64,
    /// Patch rows per processing block.
    pub block_rows: usize,
    pub threshold: f64,
    pub pool_cap: usize,
    /// Minimum number of agreeing patch positions before fine-tuning.
    pub min_pool: usize,
    pub train_fraction: f64,
    pub label: SsLabel,
    pub train: TrainConfig,
}

impl Default for SsConfig {
    fn default() -> Self {
        Self {
            overlap: 0.5,
            block_rows: 40,
            threshold: 0.04,
            pool_cap: 60_000,
            min_pool: 100,
            train_fraction: 0.7,
            label: SsLabel::Ft,
            train: TrainConfig {
                lr: 1e-3,
                patience: 3,
                max_epochs: 20,
                freeze_last_dense: 3,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsStatus {
    Refined,
    /// Too few agreeing patches; the model is returned unchanged.
    NoAgreementPool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsReport {
    pub status: SsStatus,
    pub blocks: usize,
    pub positions: usize,
    pub agreeing_positions: usize,
    pub pool_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub history: Option<History>,
}

impl SsReport {
    pub fn val_nmae_before(&self) -> Option<f64> {
        self.history.as_ref().map(|h| h.initial_val_nmae)
    }

    pub fn val_nmae_after(&self) -> Option<f64> {
        self.history.as_ref().map(|h| h.best_val_nmae)
    }
}

#[derive(Debug, Clone, Copy)]
struct PoolItem {
    i: usize,
    j: usize,
    rot90: bool,
    label: f64,
}

/// Fine-tunes `model` on patches of `plate` where its estimate and the
/// spectral estimate agree. Agreeing patches (each contributing a vertical
/// and a 90°-rotated horizontal instance) are pooled across row blocks,
/// capped by seeded reservoir sampling, split and used for a short,
/// early-stopped training run with the last dense layers frozen.
pub fn ss_refine(plate: &GrayImage, model: &RegModel, cfg: &SsConfig) -> Result<(RegModel, SsReport)> {
    ss_refine_with(plate, model, &FtEstimator, cfg)
}

/// As [`ss_refine`] with an arbitrary reference estimator.
pub fn ss_refine_with(
    plate: &GrayImage,
    model: &RegModel,
    reference: &dyn PatchEstimator,
    cfg: &SsConfig,
) -> Result<(RegModel, SsReport)> {
    check_plate(plate)?;
    let g = sweep_geometry(plate.height(), plate.width(), cfg.overlap)?;
    cfg.train.validate()?;
    let block_rows = cfg.block_rows.max(1);
    let dl_est = ModelEstimator::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(7);
    let mut pool: Vec<PoolItem> = Vec::new();
    let mut offered = 0usize;
    let mut report = SsReport {
        status: SsStatus::NoAgreementPool,
        blocks: 0,
        positions: 0,
        agreeing_positions: 0,
        pool_size: 0,
        train_size: 0,
        val_size: 0,
        history: None,
    };
    let mut row = 0;
    while row < g.rows {
        let end = (row + block_rows).min(g.rows);
        report.blocks += 1;
        for i in row..end {
            let patches = patch_row(plate, &g, i);
            let ft = reference.estimate(&patches)?;
            let dl = dl_est.estimate(&patches)?;
            for (j, (f, d)) in ft.into_iter().zip(dl).enumerate() {
                report.positions += 1;
                let (Some(f), Some(d)) = (f, d) else { continue };
                if !agrees(f, d, cfg.threshold) {
                    continue;
                }
                report.agreeing_positions += 1;
                let (lv, lh) = match cfg.label {
                    SsLabel::Ft => f,
                    SsLabel::Dl => d,
                };
                for item in [PoolItem { i, j, rot90: false, label: lv }, PoolItem { i, j, rot90: true, label: lh }] {
                    // Reservoir sampling keeps a uniform sample of everything offered.
                    offered += 1;
                    if pool.len() < cfg.pool_cap {
                        pool.push(item);
                    } else {
                        let k = rng.random_range(0..offered);
                        if k < cfg.pool_cap {
                            pool[k] = item;
                        }
                    }
                }
            }
        }
        row = end;
    }
    report.pool_size = pool.len();
    if report.agreeing_positions < cfg.min_pool {
        return Ok((model.clone(), report));
    }

    pool.shuffle(&mut rng);
    let n_train = ((pool.len() as f64 * cfg.train_fraction).round() as usize).clamp(2, pool.len() - 1);
    let materialize = |items: &[PoolItem]| -> Result<TrainSet> {
        let patches: Vec<GrayImage> = items
            .iter()
            .map(|it| {
                let p = raster::crop(plate, it.i * g.stride, it.j * g.stride, PATCH_PX, PATCH_PX)
                    .expect("grid inside plate");
                if it.rot90 {
                    raster::rot90_cw(&p)
                } else {
                    p
                }
            })
            .collect();
        let labels: Vec<f64> = items.iter().map(|it| it.label).collect();
        Ok(TrainSet::new(model, &patches, &labels)?)
    };
    let train_set = materialize(&pool[..n_train])?;
    let val_set = materialize(&pool[n_train..])?;
    let mut refined = model.clone();
    let history = regnet::train(&mut refined, &train_set, &val_set, &cfg.train)?;
    report.status = SsStatus::Refined;
    report.train_size = train_set.len();
    report.val_size = val_set.len();
    report.history = Some(history);
    Ok((refined, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapTransform {
    None,
    FlipH,
    FlipV,
}

impl FromStr for MapTransform {
    type Err = AnalyzerError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MapTransform::None),
            "flip_h" => Ok(MapTransform::FlipH),
            "flip_v" => Ok(MapTransform::FlipV),
            o => Err(AnalyzerError::Format(format!("unknown transform {o:?}"))),
        }
    }
}

pub fn transform_map(m: &DensityMap, t: MapTransform) -> DensityMap {
    let mut out = m.clone();
    for i in 0..m.rows {
        for j in 0..m.cols {
            let (si, sj) = match t {
                MapTransform::None => (i, j),
                MapTransform::FlipH => (i, m.cols - 1 - j),
                MapTransform::FlipV => (m.rows - 1 - i, j),
            };
            out.values[i * m.cols + j] = m.values[si * m.cols + sj];
        }
    }
    out
}

/// Mean of each row (horizontal maps) or column (vertical maps), ignoring
/// missing cells; NaN where a line has no values.
pub fn profile(m: &DensityMap) -> Vec<f64> {
    let (lines, len) = match m.orientation {
        Orientation::Horizontal => (m.rows, m.cols),
        Orientation::Vertical => (m.cols, m.rows),
    };
    (0..lines)
        .map(|a| {
            let (mut sum, mut n) = (0.0, 0usize);
            for b in 0..len {
                let (i, j) = match m.orientation {
                    Orientation::Horizontal => (a, b),
                    Orientation::Vertical => (b, a),
                };
                if let Some(v) = m.get(i, j) {
                    sum += v;
                    n += 1;
                }
            }
            if n > 0 {
                sum / n as f64
            } else {
                f64::NAN
            }
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() < 2 || a.len() != b.len() {
        return None;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    pub correlation: f64,
    /// Line `k` of the transformed second map aligns with line `k + offset`
    /// of the first.
    pub offset: i64,
    /// Profile entries compared at the best offset.
    pub n_cells: usize,
    /// The two maps side by side (stacked for vertical maps) at the best
    /// offset, with a one-cell missing gap.
    pub composite: DensityMap,
}

/// Slides the profile of the transformed `b` over that of `a` and returns the
/// offset with the highest Pearson correlation. Offsets need at least
/// `max(3, shorter/2)` valid overlapping entries.
pub fn match_maps(a: &DensityMap, b: &DensityMap, transform: MapTransform) -> Result<MatchReport> {
    if a.orientation != b.orientation {
        return Err(AnalyzerError::IncompatibleOrientations(a.orientation, b.orientation));
    }
    if a.source != b.source {
        return Err(AnalyzerError::IncompatibleSources(a.source, b.source));
    }
    let bt = transform_map(b, transform);
    let (pa, pb) = (profile(a), profile(&bt));
    let min_overlap = 3.max(pa.len().min(pb.len()) / 2);
    let mut best: Option<(f64, i64, usize)> = None;
    for s in -(pb.len() as i64 - 1)..pa.len() as i64 {
        let (mut xa, mut xb) = (Vec::new(), Vec::new());
        for (k, &vb) in pb.iter().enumerate() {
            let ia = k as i64 + s;
            if ia < 0 || ia >= pa.len() as i64 {
                continue;
            }
            let va = pa[ia as usize];
            if va.is_nan() || vb.is_nan() {
                continue;
            }
            xa.push(va);
            xb.push(vb);
        }
        if xa.len() < min_overlap {
            continue;
        }
        if let Some(r) = pearson(&xa, &xb) {
            let better = match best {
                None => true,
                Some((br, bs, _)) => r > br || (r == br && s.abs() < bs.abs()),
            };
            if better {
                best = Some((r, s, xa.len()));
            }
        }
    }
    let (correlation, offset, n_cells) = best.ok_or(AnalyzerError::NoOverlap)?;
    Ok(MatchReport { correlation, offset, n_cells, composite: composite(a, &bt, offset) })
}

fn composite(a: &DensityMap, b: &DensityMap, offset: i64) -> DensityMap {
    // Work in "line" coordinates: rows for horizontal maps, columns for vertical.
    let horiz = a.orientation == Orientation::Horizontal;
    let (la, wa) = if horiz { (a.rows, a.cols) } else { (a.cols, a.rows) };
    let (lb, wb) = if horiz { (b.rows, b.cols) } else { (b.cols, b.rows) };
    let start = offset.min(0);
    let end = (la as i64).max(offset + lb as i64);
    let lines = (end - start) as usize;
    let width = wa + 1 + wb;
    let (rows, cols) = if horiz { (lines, width) } else { (width, lines) };
    let mut out = DensityMap::new_missing(a.orientation, a.source, a.stride, rows, cols);
    let mut put = |line: usize, pos: usize, v: Option<f64>| {
        if horiz {
            out.set(line, pos, v)
        } else {
            out.set(pos, line, v)
        }
    };
    let cell = |m: &DensityMap, line: usize, pos: usize| if horiz { m.get(line, pos) } else { m.get(pos, line) };
    for l in 0..la {
        for p in 0..wa {
            put((l as i64 - start) as usize, p, cell(a, l, p));
        }
    }
    for l in 0..lb {
        for p in 0..wb {
            put((l as i64 + offset - start) as usize, wa + 1 + p, cell(b, l, p));
        }
    }
    out
}

/// 256-entry color ramp: red at 0, yellow at 85, green at 170, blue at 255.
pub fn ramp() -> [[u8; 3]; 256] {
    const STOPS: [(usize, [f64; 3]); 4] =
        [(0, [255.0, 0.0, 0.0]), (85, [255.0, 255.0, 0.0]), (170, [0.0, 255.0, 0.0]), (255, [0.0, 0.0, 255.0])];
    let mut out = [[0u8; 3]; 256];
    for w in STOPS.windows(2) {
        let ((i0, c0), (i1, c1)) = (w[0], w[1]);
        for (i, slot) in out.iter_mut().enumerate().take(i1 + 1).skip(i0) {
            let t = (i - i0) as f64 / (i1 - i0) as f64;
            for k in 0..3 {
                slot[k] = (c0[k] + t * (c1[k] - c0[k])).round() as u8;
            }
        }
    }
    out
}

/// Ramp index of a value: `round((v - lo) / (hi - lo) · 255)`, clamped.
pub fn ramp_index(v: f64, lo: f64, hi: f64) -> usize {
    (((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0)) as usize
}

pub fn render_map_rgb(map: &DensityMap, lo: f64, hi: f64) -> Result<Vec<u8>> {
    if !(lo < hi) {
        return Err(AnalyzerError::BadRange(lo, hi));
    }
    let table = ramp();
    let mut rgb = Vec::with_capacity(map.rows * map.cols * 3);
    for &v in &map.values {
        let c = if v.is_nan() { [0, 0, 0] } else { table[ramp_index(v, lo, hi)] };
        rgb.extend_from_slice(&c);
    }
    Ok(rgb)
}

pub fn write_map_png(map: &DensityMap, path: &Path, lo: f64, hi: f64) -> Result<()> {
    let rgb = render_map_rgb(map, lo, hi)?;
    raster::save_rgb_png(map.cols, map.rows, &rgb, path)?;
    Ok(())
}

pub fn write_map_csv(map: &DensityMap, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "# orientation={} source={} stride={} rows={} cols={}",
        map.orientation, map.source, map.stride, map.rows, map.cols
    )?;
    writeln!(f, "i,j,value")?;
    for i in 0..map.rows {
        for j in 0..map.cols {
            match map.get(i, j) {
                Some(v) => writeln!(f, "{i},{j},{v}")?,
                None => writeln!(f, "{i},{j},NA")?,
            }
        }
    }
    f.flush()?;
    Ok(())
}

/// Writes the colored PNG and the CSV of a map.
pub fn export_map(map: &DensityMap, png: &Path, csv: &Path, range: (f64, f64)) -> Result<()> {
    if !(range.0 < range.1) {
        return Err(AnalyzerError::BadRange(range.0, range.1));
    }
    write_map_png(map, png, range.0, range.1)?;
    write_map_csv(map, csv)
}

pub fn read_map_csv(path: &Path) -> Result<DensityMap> {
    let f = std::fs::File::open(path)?;
    let mut lines = BufReader::new(f).lines();
    let bad = |m: &str| AnalyzerError::Format(format!("{}: {m}", path.display()));
    let head = lines.next().ok_or_else(|| bad("empty file"))??;
    let meta = head.strip_prefix('#').ok_or_else(|| bad("missing metadata line"))?;
    let (mut orientation, mut source, mut stride, mut rows, mut cols) = (None, None, None, None, None);
    for kv in meta.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad("bad metadata"))?;
        match k {
            "orientation" => orientation = Some(v.parse()?),
            "source" => source = Some(v.parse()?),
            "stride" => stride = v.parse().ok(),
            "rows" => rows = v.parse().ok(),
            "cols" => cols = v.parse().ok(),
            _ => return Err(bad("unknown metadata key")),
        }
    }
    let (Some(orientation), Some(source), Some(stride), Some(rows), Some(cols)) =
        (orientation, source, stride, rows, cols)
    else {
        return Err(bad("incomplete metadata"));
    };
    if lines.next().transpose()?.as_deref().map(str::trim) != Some("i,j,value") {
        return Err(bad("missing header"));
    }
    let mut map = DensityMap::new_missing(orientation, source, stride, rows, cols);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let (Some(i), Some(j), Some(v), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(bad("bad row"));
        };
        let (i, j): (usize, usize) = (i.parse().map_err(|_| bad("bad i"))?, j.parse().map_err(|_| bad("bad j"))?);
        if i >= rows || j >= cols {
            return Err(bad("cell outside the grid"));
        }
        let v = if v.trim() == "NA" { None } else { Some(v.trim().parse().map_err(|_| bad("bad value"))?) };
        map.set(i, j, v);
    }
    Ok(map)
}
