use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Ctx, Dense, Dropout, Flatten, Inception, Layer, MaxPool, Net, Relu};
use super::tensor::{Real, Tensor4};
use super::{RegError, Result};
use crate::raster::{self, GrayImage};

/// Pixel values are mapped to `(x - INPUT_MEAN) / INPUT_SCALE` before the net.
pub const INPUT_MEAN: f64 = 127.5;
pub const INPUT_SCALE: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Reg,
    RegVgg,
    RegRes,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Reg => "reg",
            Arch::RegVgg => "reg_vgg",
            Arch::RegRes => "reg_res",
        })
    }
}

impl FromStr for Arch {
    type Err = RegError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reg" => Ok(Arch::Reg),
            "reg_vgg" | "reg-vgg" => Ok(Arch::RegVgg),
            "reg_res" | "reg-res" => Ok(Arch::RegRes),
            other => Err(RegError::BadConfig(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Network shape plus the fixed normalization constants stored with it.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub arch: Arch,
    /// Filters per kernel size in the first stage.
    pub filters: usize,
    /// Dense layer widths; the last must be 1.
    pub dense: Vec<usize>,
    pub dropout: f64,
    pub input_side: usize,
    /// Inception blocks per pooling stage.
    pub stage_blocks: Vec<usize>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Predictions are `raw * label_scale + label_offset`.
    pub label_offset: f64,
    pub label_scale: f64,
}

impl ArchConfig {
    pub fn default_for(arch: Arch) -> Self {
        let (filters, dense, stage_blocks) = match arch {
            Arch::RegVgg => (8, vec![512, 512, 1], vec![2, 2, 3, 3, 3]),
            Arch::Reg | Arch::RegRes => (4, vec![100, 100, 80, 100, 1], vec![2; 6]),
        };
        Self {
            arch,
            filters,
            dense,
            dropout: 0.09,
            input_side: 200,
            stage_blocks,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
            label_offset: 14.5,
            label_scale: 4.0,
        }
    }

    /// Filter multiplier of pooling stage `s`.
    pub fn stage_multiplier(&self, s: usize) -> usize {
        let cap = match self.arch {
            Arch::RegVgg => 8,
            Arch::Reg | Arch::RegRes => 16,
        };
        (1usize << s.min(8)).min(cap)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RegError::BadConfig(m));
        if self.filters == 0 {
            return bad("filters must be positive".into());
        }
        if self.dense.last() != Some(&1) || self.dense.contains(&0) {
            return bad(format!("dense sizes {:?} must be positive and end in 1", self.dense));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.stage_blocks.is_empty() || self.stage_blocks.contains(&0) {
            return bad(format!("stage blocks {:?} must be non-empty and positive", self.stage_blocks));
        }
        let stages = self.stage_blocks.len();
        if stages >= usize::BITS as usize || self.input_side >> stages == 0 {
            return bad(format!("input side {} too small for {stages} pooling stages", self.input_side));
        }
        if !(self.bn_eps > 0.0 && (0.0..1.0).contains(&self.bn_momentum) && self.label_scale > 0.0) {
            return bad("batch-norm and label constants out of range".into());
        }
        Ok(())
    }

    /// Builds a freshly He-initialized network.
    pub fn build<T: Real>(&self, seed: u64) -> Result<Net<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual = self.arch == Arch::RegRes;
        let mut layers = Vec::new();
        let mut cin = 1;
        for (s, &blocks) in self.stage_blocks.iter().enumerate() {
            let f = self.filters * self.stage_multiplier(s);
            for _ in 0..blocks {
                let block = Inception::new(cin, f, residual, self.bn_eps, self.bn_momentum, &mut rng);
                cin = block.out_channels();
                layers.push(Layer::Inception(block));
            }
            layers.push(Layer::MaxPool(MaxPool::default()));
            layers.push(Layer::Dropout(Dropout::new(self.dropout)));
        }
        let side = self.input_side >> self.stage_blocks.len();
        let mut nin = side * side * cin;
        layers.push(Layer::Flatten(Flatten::default()));
        for (i, &nout) in self.dense.iter().enumerate() {
            layers.push(Layer::Dense(Dense::new(nin, nout, &mut rng)));
            if i + 1 < self.dense.len() {
                layers.push(Layer::Relu(Relu::default()));
            }
            nin = nout;
        }
        Ok(Net::new(layers))
    }

    /// Flat `key=value` lines; the inverse of [`ArchConfig::from_text`].
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "arch={}\nfilters={}\ndense={}\ndropout={}\ninput_side={}\nstage_blocks={}\nbn_eps={}\nbn_momentum={}\n\
             label_offset={}\nlabel_scale={}\ninput_mean={}\ninput_scale={}\n",
            self.arch,
            self.filters,
            list(&self.dense),
            self.dropout,
            self.input_side,
            list(&self.stage_blocks),
            self.bn_eps,
            self.bn_momentum,
            self.label_offset,
            self.label_scale,
            INPUT_MEAN,
            INPUT_SCALE,
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ArchConfig::default_for(Arch::RegVgg);
        let mut seen = 0u32;
        let bad = |k: &str| RegError::BadConfig(format!("bad value for {k}"));
        let list = |v: &str, k: &str| -> Result<Vec<usize>> {
            v.split(',').map(|x| x.trim().parse().map_err(|_| bad(k))).collect()
        };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| RegError::BadConfig(format!("bad line {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let slot = match k {
                "arch" => {
                    cfg.arch = v.parse()?;
                    0
                }
                "filters" => {
                    cfg.filters = v.parse().map_err(|_| bad(k))?;
                    1
                }
                "dense" => {
                    cfg.dense = list(v, k)?;
                    2
                }
                "dropout" => {
                    cfg.dropout = v.parse().map_err(|_| bad(k))?;
                    3
                }
                "input_side" => {
                    cfg.input_side = v.parse().map_err(|_| bad(k))?;
                    4
                }
                "stage_blocks" => {
                    cfg.stage_blocks = list(v, k)?;
                    5
                }
                "bn_eps" => {
                    cfg.bn_eps = v.parse().map_err(|_| bad(k))?;
                    6
                }
                "bn_momentum" => {
                    cfg.bn_momentum = v.parse().map_err(|_| bad(k))?;
                    7
                }
                "label_offset" => {
                    cfg.label_offset = v.parse().map_err(|_| bad(k))?;
                    8
                }
                "label_scale" => {
                    cfg.label_scale = v.parse().map_err(|_| bad(k))?;
                    9
                }
                "input_mean" | "input_scale" => {
                    let x: f64 = v.parse().map_err(|_| bad(k))?;
                    let want = if k == "input_mean" { INPUT_MEAN } else { INPUT_SCALE };
                    if x != want {
                        return Err(RegError::BadConfig(format!("{k}={x} differs from {want}")));
                    }
                    continue;
                }
                other => return Err(RegError::BadConfig(format!("unknown key {other:?}"))),
            };
            seen |= 1 << slot;
        }
        if seen != (1 << 10) - 1 {
            return Err(RegError::BadConfig("configuration block is incomplete".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A density regressor: network plus its configuration.
#[derive(Debug, Clone)]
pub struct RegModel {
    pub config: ArchConfig,
    pub net: Net<f32>,
}

impl RegModel {
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        let net = config.build(seed)?;
        Ok(Self { config, net })
    }

    /// Resizes (area averaging) and normalizes patches into network input.
    pub fn prepare(&self, patches: &[GrayImage]) -> Vec<f32> {
        let side = self.config.input_side;
        let mut out = Vec::with_capacity(patches.len() * side * side);
        for p in patches {
            let resized;
            let img = if p.height() == side && p.width() == side {
                p
            } else {
                resized = raster::resize_area(p, side, side);
                &resized
            };
            out.extend(img.pixels().iter().map(|&v| ((v as f64 - INPUT_MEAN) / INPUT_SCALE) as f32));
        }
        out
    }

    pub fn to_density(&self, raw: f32) -> f64 {
        raw as f64 * self.config.label_scale + self.config.label_offset
    }

    /// Densities for prepared inputs (see [`RegModel::prepare`]), in inference mode.
    pub fn predict_prepared(&self, inputs: &[f32]) -> Result<Vec<f64>> {
        let side = self.config.input_side;
        let per = side * side;
        if !inputs.len().is_multiple_of(per) {
            return Err(RegError::ShapeMismatch(format!("{} values is not a whole number of inputs", inputs.len())));
        }
        let mut out = Vec::with_capacity(inputs.len() / per);
        for chunk in inputs.chunks(per * 32) {
            let x = Tensor4::from_vec([chunk.len() / per, side, side, 1], chunk.to_vec())?;
            let y = self.net.infer(x)?;
            out.extend(y.data().iter().map(|&r| self.to_density(r)));
        }
        Ok(out)
    }

    pub fn predict(&self, patches: &[GrayImage]) -> Result<Vec<f64>> {
        self.predict_prepared(&self.prepare(patches))
    }

    /// Training-mode forward of one batch; returns raw outputs.
    pub(crate) fn forward_train(&mut self, x: Tensor4<f32>, ctx: &mut Ctx) -> Result<Vec<f32>> {
        Ok(self.net.forward(x, ctx)?.into_data())
    }

    pub fn param_count(&self) -> usize {
        self.net.params().iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchConfig {
        ArchConfig {
            filters: 1,
            dense: vec![4, 1],
            input_side: 16,
            stage_blocks: vec![1],
            dropout: 0.0,
            ..ArchConfig::default_for(Arch::RegVgg)
        }
    }

    #[test]
    fn config_text_roundtrip() {
        for arch in [Arch::Reg, Arch::RegVgg, Arch::RegRes] {
            let c = ArchConfig::default_for(arch);
            assert_eq!(ArchConfig::from_text(&c.to_text()).unwrap(), c);
        }
        assert!(ArchConfig::from_text("arch=reg\n").is_err());
        assert!(ArchConfig::from_text(&(tiny().to_text() + "bogus=1\n")).is_err());
    }

    #[test]
    fn default_vgg_shape() {
        let m = RegModel::new(ArchConfig::default_for(Arch::RegVgg), 0).unwrap();
        let out = m.net.output_dims([1, 200, 200, 1]).unwrap();
        assert_eq!(out, [1, 1, 1, 1]);
        // 200 -> 6 after five poolings, 3·64 channels.
        let flat = 6 * 6 * 3 * 64;
        let dense = flat * 512 + 512 + 512 * 512 + 512 + 512 + 1;
        assert!(m.param_count() > dense);
    }

    #[test]
    fn inference_is_deterministic_across_batch() {
        let m = RegModel::new(tiny(), 3).unwrap();
        let img = GrayImage::from_fn_clamped(16, 16, 200.0, |y, x| ((y * 7 + x * 3) % 40) as f64 * 5.0);
        let batch = vec![img.clone(), img.clone(), img];
        let a = m.predict(&batch).unwrap();
        let b = m.predict(&batch).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v == a[0]));
    }

    #[test]
    fn hand_set_tiny_model() {
        // One inception block (1 filter per kernel), pool, dense 4 -> 1.
        let mut m = RegModel::new(tiny(), 0).unwrap();
        for layer in &mut m.net.layers {
            match layer {
                Layer::Inception(b) => {
                    for c in &mut b.convs {
                        c.w.value.fill(0.0);
                        c.b.value.fill(0.0);
                    }
                    // 3×3 branch: centre tap weight 1.
                    b.convs[0].w.value[4] = 1.0;
                }
                Layer::Dense(d) if d.nout == 4 => {
                    // Average channel 0 over the 8×8 pooled grid into unit 0.
                    d.w.value.fill(0.0);
                    for i in (0..d.nin).step_by(3) {
                        d.w.value[i * 4] = 1.0 / 64.0;
                    }
                    d.b.value = vec![0.5, 0.0, 0.0, 0.0];
                }
                Layer::Dense(d) => {
                    d.w.value = vec![2.0, 0.0, 0.0, 0.0];
                    d.b.value = vec![0.25];
                }
                _ => {}
            }
        }
        let img = GrayImage::filled(16, 16, 200.0, 200.0);
        let z = (200.0 - 127.5) / 64.0 / (1.0f64 + 1e-5).sqrt();
        let raw = 2.0 * (z + 0.5) + 0.25;
        let p = m.predict(&[img]).unwrap();
        assert!((p[0] - (raw * 4.0 + 14.5)).abs() < 1e-4, "{} vs {}", p[0], raw * 4.0 + 14.5);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = tiny();
        c.dense = vec![4, 2];
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.input_side = 1;
        assert!(c.validate().is_err());
        assert!("vgg".parse::<Arch>().is_err());
    }
}
