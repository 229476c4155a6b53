use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Ctx, Layer, Net};
use super::model::RegModel;
use super::tensor::{Real, Tensor4};
use super::{RegError, Result};
use crate::raster::GrayImage;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Number of trailing dense layers whose parameters are not updated.
    pub freeze_last_dense: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 450,
            patience: 65,
            seed: 0,
            freeze_last_dense: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.max_epochs > 0
            && self.patience > 0
            && self.patience <= self.max_epochs;
        if ok {
            Ok(())
        } else {
            Err(RegError::BadConfig(format!("invalid training configuration {self:?}")))
        }
    }
}

/// Prepared network inputs with their density labels.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub inputs: Vec<f32>,
    pub labels: Vec<f64>,
    side: usize,
}

impl TrainSet {
    pub fn new(model: &RegModel, patches: &[GrayImage], labels: &[f64]) -> Result<Self> {
        if patches.len() != labels.len() {
            return Err(RegError::ShapeMismatch(format!("{} patches, {} labels", patches.len(), labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| !(l > 0.0)) {
            return Err(RegError::NonPositiveLabel(l));
        }
        Ok(Self { inputs: model.prepare(patches), labels: labels.to_vec(), side: model.config.input_side })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn item(&self, i: usize) -> &[f32] {
        let per = self.side * self.side;
        &self.inputs[i * per..(i + 1) * per]
    }
}

/// Mean of `|pred - label| / label`.
pub fn nmae(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(RegError::ShapeMismatch(format!("{} predictions, {} labels", preds.len(), labels.len())));
    }
    let mut sum = 0.0;
    for (&p, &l) in preds.iter().zip(labels) {
        if !(l > 0.0) {
            return Err(RegError::NonPositiveLabel(l));
        }
        sum += (p - l).abs() / l;
    }
    Ok(sum / preds.len() as f64)
}

/// Gradient of [`nmae`] with respect to each prediction; 0 where pred = label.
pub fn nmae_grad(preds: &[f64], labels: &[f64]) -> Vec<f64> {
    let n = preds.len() as f64;
    preds
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            let s = if p > l {
                1.0
            } else if p < l {
                -1.0
            } else {
                0.0
            };
            s / (l * n)
        })
        .collect()
}

/// Adam moment estimates, one entry per parameter block.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Real> AdamState<T> {
    pub fn new(net: &Net<T>) -> Self {
        let shapes: Vec<usize> = net.params().iter().map(|p| p.value.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }
}

/// One Adam update of every trainable, non-frozen parameter block.
pub fn adam_step<T: Real>(net: &mut Net<T>, state: &mut AdamState<T>, cfg: &TrainConfig, frozen: &[bool]) {
    state.t += 1;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let c1 = T::one() - b1.powi(state.t);
    let c2 = T::one() - b2.powi(state.t);
    let (lr, eps) = (T::from_f64(cfg.lr), T::from_f64(cfg.eps));
    let mut idx = 0;
    net.for_each_param(&mut |p| {
        let i = idx;
        idx += 1;
        if !p.trainable || frozen.get(i).copied().unwrap_or(false) {
            return;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.value.len() {
            let g = p.grad[j];
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p.value[j] = p.value[j] - lr * mhat / (vhat.sqrt() + eps);
        }
    });
}

/// Marks the parameter blocks of the last `k` dense layers.
pub(crate) fn frozen_mask<T: Real>(net: &mut Net<T>, k: usize) -> Vec<bool> {
    let n_dense = net.layers.iter().filter(|l| matches!(l, Layer::Dense(_))).count();
    let first_frozen = n_dense.saturating_sub(k);
    let mut mask = Vec::new();
    let mut dense_seen = 0;
    for layer in &mut net.layers {
        let frozen = if matches!(layer, Layer::Dense(_)) {
            dense_seen += 1;
            dense_seen > first_frozen
        } else {
            false
        };
        layer.for_each_param(&mut |_| mask.push(frozen));
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Epoch {
    pub epoch: usize,
    pub train_nmae: f64,
    pub val_nmae: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    /// Validation NMAE of the weights before training.
    pub initial_val_nmae: f64,
    pub epochs: Vec<Epoch>,
    /// Epoch whose weights were restored; 0 means the initial weights.
    pub best_epoch: usize,
    pub best_val_nmae: f64,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_nmae,val_nmae\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.train_nmae, e.val_nmae));
        }
        s
    }
}

pub fn train(model: &mut RegModel, train_set: &TrainSet, val_set: &TrainSet, cfg: &TrainConfig) -> Result<History> {
    train_logged(model, train_set, val_set, cfg, &mut |_| {})
}

/// Minibatch Adam on NMAE with early stopping on validation NMAE. The best
/// weights seen (including the starting ones) are restored at the end.
pub fn train_logged(
    model: &mut RegModel,
    train_set: &TrainSet,
    val_set: &TrainSet,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&Epoch),
) -> Result<History> {
    cfg.validate()?;
    if train_set.len() < 2 {
        return Err(RegError::EmptyCorpus("training set needs at least 2 records"));
    }
    if val_set.is_empty() {
        return Err(RegError::EmptyCorpus("validation set is empty"));
    }
    let side = model.config.input_side;
    let frozen = frozen_mask(&mut model.net, cfg.freeze_last_dense);
    let mut adam = AdamState::new(&model.net);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(1);

    let evaluate = |m: &RegModel| -> Result<f64> { nmae(&m.predict_prepared(&val_set.inputs)?, &val_set.labels) };
    let initial = evaluate(model)?;
    let mut best = (0usize, initial, snapshot(&model.net));
    let mut history = History { initial_val_nmae: initial, epochs: Vec::new(), best_epoch: 0, best_val_nmae: initial };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            // Batch statistics need at least two samples.
            if batch.len() < 2 {
                continue;
            }
            let mut x = Vec::with_capacity(batch.len() * side * side);
            for &i in batch {
                x.extend_from_slice(train_set.item(i));
            }
            let labels: Vec<f64> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let x = Tensor4::from_raw([batch.len(), side, side, 1], x);
            let mut ctx = Ctx { train: true, rng: Some(&mut drop_rng) };
            let raw = match model.forward_train(x, &mut ctx) {
                Ok(r) => r,
                Err(RegError::NonFiniteActivation(_)) => return Err(RegError::DivergedNaN { epoch }),
                Err(e) => return Err(e),
            };
            let preds: Vec<f64> = raw.iter().map(|&r| model.to_density(r)).collect();
            let loss = nmae(&preds, &labels)?;
            if !loss.is_finite() {
                return Err(RegError::DivergedNaN { epoch });
            }
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            let scale = model.config.label_scale;
            let grad: Vec<f32> = nmae_grad(&preds, &labels).iter().map(|g| (g * scale) as f32).collect();
            model.net.zero_grad();
            model.net.backward(Tensor4::from_raw([batch.len(), 1, 1, 1], grad))?;
            adam_step(&mut model.net, &mut adam, cfg, &frozen);
        }
        let val = match evaluate(model) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(RegError::NonFiniteActivation(_)) => return Err(RegError::DivergedNaN { epoch }),
            Err(e) => return Err(e),
        };
        let e = Epoch { epoch, train_nmae: loss_sum / seen.max(1) as f64, val_nmae: val };
        log(&e);
        history.epochs.push(e);
        if val < best.1 {
            best = (epoch, val, snapshot(&model.net));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    restore(&mut model.net, &best.2);
    history.best_epoch = best.0;
    history.best_val_nmae = best.1;
    Ok(history)
}

fn snapshot<T: Real>(net: &Net<T>) -> Vec<Vec<T>> {
    net.params().iter().map(|p| p.value.clone()).collect()
}

fn restore<T: Real>(net: &mut Net<T>, values: &[Vec<T>]) {
    let mut i = 0;
    net.for_each_param(&mut |p| {
        p.value.copy_from_slice(&values[i]);
        i += 1;
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regnet::{Arch, ArchConfig};

    fn tiny(side: usize) -> ArchConfig {
        ArchConfig {
            filters: 2,
            dense: vec![16, 8, 4, 1],
            input_side: side,
            stage_blocks: vec![1, 1],
            dropout: 0.0,
            ..ArchConfig::default_for(Arch::RegVgg)
        }
    }

    fn grating_set(model: &RegModel, n: usize, seed: u64) -> TrainSet {
        let side = model.config.input_side;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut patches = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let d: f64 = rand::Rng::random_range(&mut rng, 6.0..23.0);
            let phase: f64 = rand::Rng::random_range(&mut rng, 0.0..std::f64::consts::TAU);
            patches.push(GrayImage::from_fn_clamped(side, side, 200.0, |_, x| {
                128.0 + 100.0 * (2.0 * std::f64::consts::PI * d * x as f64 / 200.0 * 4.0 + phase).cos()
            }));
            labels.push(d);
        }
        TrainSet::new(model, &patches, &labels).unwrap()
    }

    #[test]
    fn nmae_examples() {
        assert!((nmae(&[10.2], &[10.0]).unwrap() - 0.02).abs() < 1e-12);
        assert!((nmae(&[10.2, 9.5], &[10.0, 10.0]).unwrap() - 0.035).abs() < 1e-12);
        assert_eq!(nmae(&[7.0], &[7.0]).unwrap(), 0.0);
        assert!(matches!(nmae(&[1.0], &[0.0]), Err(RegError::NonPositiveLabel(_))));
        assert_eq!(nmae_grad(&[7.0, 8.0, 6.0], &[7.0, 7.0, 7.0])[0], 0.0);
    }

    #[test]
    fn adam_zero_grad_is_a_no_op() {
        let mut net: Net<f64> = tiny(16).build(1).unwrap();
        let before: Vec<Vec<f64>> = net.params().iter().map(|p| p.value.clone()).collect();
        let mut st = AdamState::new(&net);
        net.zero_grad();
        adam_step(&mut net, &mut st, &TrainConfig::default(), &[]);
        let after: Vec<Vec<f64>> = net.params().iter().map(|p| p.value.clone()).collect();
        assert_eq!(before, after);
    }

    fn trainable(m: &RegModel) -> Vec<Vec<f32>> {
        m.net.params().iter().filter(|p| p.trainable).map(|p| p.value.clone()).collect()
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let mut m = RegModel::new(tiny(16), 4).unwrap();
        let tr = grating_set(&m, 12, 1);
        let va = grating_set(&m, 4, 2);
        let before = trainable(&m);
        let cfg = TrainConfig { lr: 0.0, max_epochs: 3, patience: 3, batch_size: 4, ..Default::default() };
        train(&mut m, &tr, &va, &cfg).unwrap();
        assert_eq!(before, trainable(&m));
    }

    #[test]
    fn frozen_dense_layers_do_not_move() {
        let mut m = RegModel::new(tiny(16), 4).unwrap();
        let tr = grating_set(&m, 12, 1);
        let dense_before: Vec<Vec<f32>> = m
            .net
            .layers
            .iter()
            .filter_map(|l| if let Layer::Dense(d) = l { Some(d.w.value.clone()) } else { None })
            .collect();
        let first_conv = trainable(&m)[0].clone();
        let cfg = TrainConfig { max_epochs: 3, patience: 3, batch_size: 4, freeze_last_dense: 3, ..Default::default() };
        let h = train(&mut m, &tr, &tr, &cfg).unwrap();
        assert!(h.best_epoch > 0);
        let dense_after: Vec<Vec<f32>> = m
            .net
            .layers
            .iter()
            .filter_map(|l| if let Layer::Dense(d) = l { Some(d.w.value.clone()) } else { None })
            .collect();
        assert_eq!(dense_before.len(), 4);
        assert_ne!(dense_before[0], dense_after[0]);
        assert_ne!(first_conv, trainable(&m)[0]);
        assert_eq!(&dense_before[1..], &dense_after[1..]);
    }

    #[test]
    fn overfits_small_corpus() {
        let cfg = ArchConfig { filters: 4, dense: vec![32, 16, 1], ..tiny(16) };
        let mut m = RegModel::new(cfg, 9).unwrap();
        let tr = grating_set(&m, 50, 3);
        let cfg = TrainConfig { max_epochs: 200, patience: 200, batch_size: 10, seed: 5, ..Default::default() };
        let h = train(&mut m, &tr, &tr, &cfg).unwrap();
        let fit = nmae(&m.predict_prepared(&tr.inputs).unwrap(), &tr.labels).unwrap();
        assert!(fit < 0.05, "train nmae {fit}, best epoch {}", h.best_epoch);
    }

    #[test]
    fn training_is_reproducible() {
        let run = || {
            let mut m = RegModel::new(ArchConfig { dropout: 0.2, ..tiny(16) }, 2).unwrap();
            let tr = grating_set(&m, 16, 1);
            let va = grating_set(&m, 6, 2);
            let cfg = TrainConfig { max_epochs: 4, patience: 4, batch_size: 5, seed: 3, ..Default::default() };
            let h = train(&mut m, &tr, &va, &cfg).unwrap();
            (crate::regnet::io::encode(&m), h)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(ha, hb);
        assert!(a == b);
    }

    #[test]
    fn batch_norm_training_output_moments() {
        let mut bn = crate::regnet::BatchNorm::<f64>::new(2, 1e-5, 0.9);
        bn.gamma.value = vec![1.5, 0.5];
        bn.beta.value = vec![-1.0, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<f64> = (0..2 * 8 * 8 * 2).map(|_| rand::Rng::random_range(&mut rng, -3.0..7.0)).collect();
        let x = Tensor4::from_raw([2, 8, 8, 2], data);
        let y = bn.forward(x, &Ctx { train: true, rng: None }).unwrap();
        for c in 0..2 {
            let v: Vec<f64> = y.data().iter().skip(c).step_by(2).copied().collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / v.len() as f64;
            assert!((mean - bn.beta.value[c]).abs() < 1e-3);
            assert!((var - bn.gamma.value[c].powi(2)).abs() < 1e-3);
        }
    }
}
