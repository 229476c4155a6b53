//! `weave-lab`: synthetic canvases, preprocessing, density maps, training and
//! refinement of thread-density regressors.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use weave_core::analyzer::{
    self, FtEstimator, MapSource, MapTransform, ModelEstimator, PatchEstimator, SsConfig, SsLabel,
};
use weave_core::dataset::{self, AugmentConfig, SynthCorpusConfig};
use weave_core::preprocess::{self, PreprocessConfig};
use weave_core::raster::{self, GrayImage};
use weave_core::regnet::{self, Arch, ArchConfig, RegModel, TrainConfig, TrainSet};
use weave_core::weavesim::{self, ContrastRegion, WeaveParams};

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (weight format WLW1)");

#[derive(Parser, Debug)]
#[command(name = "weave-lab", version = VERSION, about = "Thread density estimation for plain-weave canvases")]
#[command(args_override_self = true)]
struct Cli {
    /// Flat key=value file supplying flag defaults; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run on a single worker thread. Results never depend on the thread
    /// count; this only pins the schedule.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Render a synthetic canvas with its ground truth.
    Synth(SynthArgs),
    /// Contrast-normalize and equalize a plate.
    Preprocess(PreprocessArgs),
    /// Density maps from the spectral estimator.
    FtAnalyze(FtAnalyzeArgs),
    /// Build an augmented training corpus from synthetic canvases.
    BuildCorpus(BuildCorpusArgs),
    /// Train a regressor on a corpus.
    Train(TrainArgs),
    /// Density maps from the spectral estimator or a trained model.
    Analyze(AnalyzeArgs),
    /// Fine-tune a model on patches where it agrees with the spectral estimate.
    SsRefine(SsRefineArgs),
    /// Align two density maps by their line profiles.
    Match(MatchArgs),
    /// Compare backpropagated and finite-difference gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 12.0)]
    warp: f64,
    #[arg(long, default_value_t = 12.0)]
    weft: f64,
    /// Standard deviation of weft gaps in cm.
    #[arg(long, default_value_t = 0.0)]
    weft_sigma: f64,
    #[arg(long, default_value_t = 0.7)]
    thread_width: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    rotation: f64,
    #[arg(long, default_value_t = 1.3)]
    crossing_gain: f64,
    /// Contrast-drop rectangle `top,left,height,width,gain` in cm (repeatable).
    #[arg(long = "contrast-region", value_parser = parse_region)]
    regions: Vec<ContrastRegion>,
    #[arg(long, default_value_t = 4.0)]
    width_cm: f64,
    #[arg(long, default_value_t = 4.0)]
    height_cm: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output image (.png or .pgm); truth and meta files go next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct PrepArgs {
    /// Initial kernel width for the kernel search.
    #[arg(long, default_value_t = preprocess::DEFAULT_K0)]
    k0: usize,
    /// Skip the kernel search and use this odd window width.
    #[arg(long)]
    fixed_k: Option<usize>,
    #[arg(long)]
    no_equalize: bool,
    /// Pixels per cm of the input (default: sidecar .meta, else 200).
    #[arg(long)]
    ppcm: Option<f64>,
}

impl PrepArgs {
    fn config(&self) -> PreprocessConfig {
        PreprocessConfig { k0: self.k0, fixed_k: self.fixed_k, equalize: !self.no_equalize }
    }

    fn load(&self, path: &Path) -> Result<GrayImage, Box<dyn std::error::Error>> {
        Ok(match self.ppcm {
            Some(p) => raster::load_gray_with_ppcm(path, p)?,
            None => raster::load_gray(path)?,
        })
    }
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    prep: PrepArgs,
}

#[derive(Args, Debug)]
struct MapOutArgs {
    /// Sweep overlap fraction in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    overlap: f64,
    /// Output prefix: writes `<prefix>.v.csv/png` and `<prefix>.h.csv/png`.
    #[arg(long)]
    out_prefix: PathBuf,
    /// Color range `lo,hi` in threads/cm.
    #[arg(long, default_value = "4,30", value_parser = parse_range)]
    range: (f64, f64),
    /// Run contrast normalization and equalization before the sweep.
    #[arg(long)]
    preprocess: bool,
}

#[derive(Args, Debug)]
struct FtAnalyzeArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    maps: MapOutArgs,
    #[command(flatten)]
    prep: PrepArgs,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    input: PathBuf,
    /// `ft` or `model`.
    #[arg(long, default_value = "ft", value_parser = ["ft", "model"])]
    estimator: String,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Label the maps as coming from a refined model.
    #[arg(long)]
    refined: bool,
    #[command(flatten)]
    maps: MapOutArgs,
    #[command(flatten)]
    prep: PrepArgs,
}

#[derive(Args, Debug)]
struct BuildCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 24)]
    canvases: usize,
    #[arg(long, default_value_t = 1)]
    samples_per_canvas: usize,
    #[arg(long, default_value_t = 6.0)]
    density_min: f64,
    #[arg(long, default_value_t = 23.0)]
    density_max: f64,
    #[arg(long, default_value_t = 0.002)]
    weft_sigma: f64,
    #[arg(long, default_value_t = 4.0)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    max_rotation: f64,
    #[arg(long, default_value_t = 3.0)]
    canvas_cm: f64,
    /// Keep a seeded subset of at most this many records.
    #[arg(long)]
    max_records: Option<usize>,
    #[arg(long)]
    no_central_crops: bool,
    /// Double every random-rotation range endpoint.
    #[arg(long = "2x-angle")]
    double_angle: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    prep: PrepArgs,
}

#[derive(Args, Debug)]
struct ArchArgs {
    #[arg(long, default_value = "reg_vgg", value_parser = parse_from_str::<Arch>)]
    arch: Arch,
    #[arg(long)]
    filters: Option<usize>,
    /// Dense widths, comma separated, ending in 1.
    #[arg(long, value_delimiter = ',')]
    dense: Option<Vec<usize>>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    input_side: Option<usize>,
    /// Inception blocks per pooling stage, comma separated.
    #[arg(long, value_delimiter = ',')]
    stage_blocks: Option<Vec<usize>>,
}

impl ArchArgs {
    fn config(&self) -> Result<ArchConfig, Box<dyn std::error::Error>> {
        let mut c = ArchConfig::default_for(self.arch);
        if let Some(f) = self.filters {
            c.filters = f;
        }
        if let Some(d) = &self.dense {
            c.dense = d.clone();
        }
        if let Some(d) = self.dropout {
            c.dropout = d;
        }
        if let Some(s) = self.input_side {
            c.input_side = s;
        }
        if let Some(s) = &self.stage_blocks {
            c.stage_blocks = s.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    adam_eps: f64,
    #[arg(long, default_value_t = 450)]
    max_epochs: usize,
    #[arg(long, default_value_t = 65)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    freeze_last_dense: usize,
    /// Train/validation/test fractions by canvas.
    #[arg(long, default_value = "0.7,0.15,0.15", value_parser = parse_split)]
    split: (f64, f64, f64),
    /// Start from these weights instead of a fresh initialization.
    #[arg(long)]
    init_weights: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch history (default: `history.csv` next to the weights).
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SsRefineArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    /// Patch rows per processing block.
    #[arg(long, default_value_t = 40)]
    block_rows: usize,
    #[arg(long, default_value_t = 0.04)]
    threshold: f64,
    #[arg(long, default_value_t = 60_000)]
    pool_cap: usize,
    #[arg(long, default_value_t = 100)]
    min_pool: usize,
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
    /// Pseudo-label source: `ft` or `dl`.
    #[arg(long, default_value = "ft", value_parser = parse_from_str::<SsLabel>)]
    ss_label: SsLabel,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = 20)]
    max_epochs: usize,
    #[arg(long, default_value_t = 3)]
    freeze_last_dense: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    preprocess: bool,
    #[command(flatten)]
    prep: PrepArgs,
}

#[derive(Args, Debug)]
struct MatchArgs {
    /// First map CSV.
    #[arg(long)]
    a: PathBuf,
    /// Second map CSV (the one transformed).
    #[arg(long)]
    b: PathBuf,
    /// `none`, `flip_h` or `flip_v`.
    #[arg(long, default_value = "none", value_parser = parse_from_str::<MapTransform>)]
    transform: MapTransform,
    #[arg(long)]
    out_png: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "4,30", value_parser = parse_range)]
    range: (f64, f64),
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn parse_from_str<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

fn parse_region(s: &str) -> Result<ContrastRegion, String> {
    let v: Vec<f64> =
        s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    match v[..] {
        [top_cm, left_cm, height_cm, width_cm, gain] => {
            Ok(ContrastRegion { top_cm, left_cm, height_cm, width_cm, gain })
        }
        _ => Err("expected top,left,height,width,gain".into()),
    }
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected lo,hi")?;
    let (lo, hi) =
        (a.trim().parse::<f64>().map_err(|e| e.to_string())?, b.trim().parse::<f64>().map_err(|e| e.to_string())?);
    if lo < hi {
        Ok((lo, hi))
    } else {
        Err("lo must be below hi".into())
    }
}

fn parse_split(s: &str) -> Result<(f64, f64, f64), String> {
    let v: Vec<f64> =
        s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err("expected three fractions".into()),
    }
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn prefixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn synth(a: &SynthArgs) -> AnyResult<()> {
    let params = WeaveParams {
        warp_density: a.warp,
        weft_mean_density: a.weft,
        weft_spacing_sigma: a.weft_sigma,
        thread_width_frac: a.thread_width,
        noise_sigma: a.noise,
        rotation_deg: a.rotation,
        contrast_drop_regions: a.regions.clone(),
        crossing_gain: a.crossing_gain,
        seed: a.seed,
    };
    let (img, truth) = weavesim::gen_canvas(&params, a.width_cm, a.height_cm)?;
    raster::save_gray(&img, &a.out)?;
    raster::write_meta(&a.out, img.ppcm())?;
    truth.write_csv(&with_suffix(&a.out, ".truth.csv"))?;
    Ok(())
}

fn load_plate(input: &Path, prep: &PrepArgs, run_preprocess: bool) -> AnyResult<GrayImage> {
    let img = prep.load(input)?;
    if run_preprocess {
        let (plate, report) = preprocess::preprocess_plate(&img, &prep.config())?;
        eprintln!("preprocess: window {} px", report.k);
        Ok(plate)
    } else {
        Ok(raster::rescale(&img, raster::CANONICAL_PPCM)?)
    }
}

fn run_preprocess(a: &PreprocessArgs) -> AnyResult<()> {
    let img = a.prep.load(&a.input)?;
    let (plate, report) = preprocess::preprocess_plate(&img, &a.prep.config())?;
    raster::save_gray(&plate, &a.out)?;
    raster::write_meta(&a.out, plate.ppcm())?;
    match report.plan {
        Some(p) => println!("k0={} first_k={} k={} t={}", p.k0, p.first_k, p.k, p.t),
        None => println!("k={}", report.k),
    }
    Ok(())
}

fn write_maps(plate: &GrayImage, est: &dyn PatchEstimator, m: &MapOutArgs) -> AnyResult<()> {
    let (v, h) = analyzer::sweep(plate, est, m.overlap)?;
    for (map, tag) in [(&v, "v"), (&h, "h")] {
        analyzer::export_map(
            map,
            &prefixed(&m.out_prefix, &format!(".{tag}.png")),
            &prefixed(&m.out_prefix, &format!(".{tag}.csv")),
            m.range,
        )?;
    }
    println!("{} x {} cells, {} missing", v.rows, v.cols, v.missing_count() + h.missing_count());
    Ok(())
}

fn ft_analyze(a: &FtAnalyzeArgs) -> AnyResult<()> {
    let plate = load_plate(&a.input, &a.prep, a.maps.preprocess)?;
    write_maps(&plate, &FtEstimator, &a.maps)
}

fn analyze(a: &AnalyzeArgs) -> AnyResult<()> {
    let plate = load_plate(&a.input, &a.prep, a.maps.preprocess)?;
    match a.estimator.as_str() {
        "ft" => write_maps(&plate, &FtEstimator, &a.maps),
        "model" => {
            let path = a.weights.as_ref().ok_or("--weights is required with --estimator model")?;
            let model = regnet::load_weights(path)?;
            let mut est = ModelEstimator::new(&model);
            if a.refined {
                est.source = MapSource::ModelSs;
            }
            write_maps(&plate, &est, &a.maps)
        }
        other => Err(format!("unknown estimator {other:?} (expected ft or model)").into()),
    }
}

fn build_corpus(a: &BuildCorpusArgs) -> AnyResult<()> {
    let cfg = SynthCorpusConfig {
        canvases: a.canvases,
        samples_per_canvas: a.samples_per_canvas,
        density_range: (a.density_min, a.density_max),
        weft_sigma: a.weft_sigma,
        noise_sigma: a.noise,
        max_rotation_deg: a.max_rotation,
        canvas_cm: a.canvas_cm,
        preprocess: a.prep.config(),
        augment: AugmentConfig { central_crops: !a.no_central_crops, double_angle: a.double_angle },
        max_records: a.max_records,
        seed: a.seed,
    };
    let records = dataset::build_synthetic_corpus(&cfg)?;
    dataset::write_corpus(&a.out, &records)?;
    println!("{} records", records.len());
    Ok(())
}

fn train_set(model: &RegModel, recs: &[dataset::PatchRecord]) -> AnyResult<TrainSet> {
    let patches: Vec<GrayImage> = recs.iter().map(|r| r.patch.clone()).collect();
    let labels: Vec<f64> = recs.iter().map(|r| r.label).collect();
    Ok(TrainSet::new(model, &patches, &labels)?)
}

fn train(a: &TrainArgs) -> AnyResult<()> {
    let arch = a.arch.config()?;
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.adam_eps,
        max_epochs: a.max_epochs,
        patience: a.patience,
        seed: a.seed,
        freeze_last_dense: a.freeze_last_dense,
    };
    cfg.validate()?;
    let records = dataset::read_corpus(&a.corpus)?;
    let (tr, va, te) = dataset::split_by_canvas(records, a.split)?;
    let mut model = match &a.init_weights {
        Some(p) => regnet::load_weights_expecting(p, &arch)?,
        None => RegModel::new(arch, a.seed)?,
    };
    let (trs, vas) = (train_set(&model, &tr)?, train_set(&model, &va)?);
    eprintln!("train {} / val {} / test {} records", trs.len(), vas.len(), te.len());
    let history = regnet::train_logged(&mut model, &trs, &vas, &cfg, &mut |e| {
        eprintln!("epoch {:>4}  train {:.5}  val {:.5}", e.epoch, e.train_nmae, e.val_nmae)
    })?;
    regnet::save_weights(&model, &a.out)?;
    let hist_path = a.history.clone().unwrap_or_else(|| a.out.with_file_name("history.csv"));
    std::fs::write(&hist_path, history.to_csv())?;
    let test = if te.is_empty() {
        f64::NAN
    } else {
        let tes = train_set(&model, &te)?;
        regnet::nmae(&model.predict_prepared(&tes.inputs)?, &tes.labels)?
    };
    println!("best_epoch={} val_nmae={} test_nmae={}", history.best_epoch, history.best_val_nmae, test);
    Ok(())
}

fn json_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "null".into()
    }
}

fn ss_refine(a: &SsRefineArgs) -> AnyResult<()> {
    let plate = load_plate(&a.input, &a.prep, a.preprocess)?;
    let model = regnet::load_weights(&a.weights)?;
    let cfg = SsConfig {
        overlap: a.overlap,
        block_rows: a.block_rows,
        threshold: a.threshold,
        pool_cap: a.pool_cap,
        min_pool: a.min_pool,
        train_fraction: a.train_fraction,
        label: a.ss_label,
        train: TrainConfig {
            batch_size: a.batch_size,
            lr: a.lr,
            patience: a.patience,
            max_epochs: a.max_epochs,
            freeze_last_dense: a.freeze_last_dense,
            seed: a.seed,
            ..TrainConfig::default()
        },
    };
    let (refined, rep) = analyzer::ss_refine(&plate, &model, &cfg)?;
    regnet::save_weights(&refined, &a.out)?;
    let status = match rep.status {
        analyzer::SsStatus::Refined => "refined",
        analyzer::SsStatus::NoAgreementPool => {
            eprintln!("warning: NoAgreementPool ({} agreeing patches); weights unchanged", rep.agreeing_positions);
            "no_agreement_pool"
        }
    };
    let epochs = rep.history.as_ref().map_or(0, |h| h.epochs.len());
    let json = format!(
        "{{\"status\":\"{status}\",\"blocks\":{},\"positions\":{},\"agreeing_positions\":{},\"pool_size\":{},\
         \"train_size\":{},\"val_size\":{},\"epochs\":{epochs},\"val_nmae_before\":{},\"val_nmae_after\":{}}}\n",
        rep.blocks,
        rep.positions,
        rep.agreeing_positions,
        rep.pool_size,
        rep.train_size,
        rep.val_size,
        json_number(rep.val_nmae_before().unwrap_or(f64::NAN)),
        json_number(rep.val_nmae_after().unwrap_or(f64::NAN)),
    );
    match &a.report {
        Some(p) => std::fs::write(p, json)?,
        None => print!("{json}"),
    }
    Ok(())
}

fn match_cmd(a: &MatchArgs) -> AnyResult<()> {
    let ma = analyzer::read_map_csv(&a.a)?;
    let mb = analyzer::read_map_csv(&a.b)?;
    let rep = analyzer::match_maps(&ma, &mb, a.transform)?;
    analyzer::write_map_png(&rep.composite, &a.out_png, a.range.0, a.range.1)?;
    std::fs::write(
        &a.report,
        format!(
            "{{\"correlation\":{},\"offset\":{},\"n_cells\":{}}}\n",
            json_number(rep.correlation),
            rep.offset,
            rep.n_cells
        ),
    )?;
    println!("correlation={} offset={} n_cells={}", rep.correlation, rep.offset, rep.n_cells);
    Ok(())
}

fn grad_check(a: &GradCheckArgs) -> AnyResult<()> {
    let opts = regnet::GradCheckOptions { eps: a.eps, ..Default::default() };
    let mut worst = 0.0f64;
    for seed in 0..a.seeds {
        for case in regnet::standard_cases(seed) {
            let rep = regnet::grad_check(&case.net, &case.input, &case.loss, &opts)?;
            println!(
                "seed {seed:>3} {:<30} max_rel {:.3e} ({} checked, {} skipped)",
                case.name, rep.max_rel_error, rep.checked, rep.skipped
            );
            worst = worst.max(rep.max_rel_error);
        }
    }
    println!("worst {worst:.3e}");
    if worst > a.tolerance {
        return Err(format!("gradient mismatch {worst:.3e} exceeds {:.1e}", a.tolerance).into());
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> AnyResult<()> {
    match &cli.cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::Preprocess(a) => run_preprocess(a),
        Cmd::FtAnalyze(a) => ft_analyze(a),
        Cmd::BuildCorpus(a) => build_corpus(a),
        Cmd::Train(a) => train(a),
        Cmd::Analyze(a) => analyze(a),
        Cmd::SsRefine(a) => ss_refine(a),
        Cmd::Match(a) => match_cmd(a),
        Cmd::GradCheck(a) => grad_check(a),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match config::expand(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
