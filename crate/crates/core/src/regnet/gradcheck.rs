//! Central finite-difference check of the analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{BatchNorm, Conv, Ctx, Dense, Dropout, Flatten, Inception, Layer, MaxPool, Net, Relu};
use super::tensor::Tensor4;
use super::train::nmae_grad;
use super::Result;

/// Scalar objective used for the check.
#[derive(Debug, Clone)]
pub enum GradLoss {
    /// NMAE against these labels; the net must output one value per item.
    Nmae(Vec<f64>),
    /// Mean of `out_i · r_i` for a fixed weight vector `r` matching the
    /// output size. Mean reduction keeps the finite-difference noise of
    /// structurally zero gradients (a bias feeding batch norm) under the
    /// comparison floor.
    Projection(Vec<f64>),
}

impl GradLoss {
    fn value(&self, out: &[f64]) -> f64 {
        match self {
            GradLoss::Nmae(labels) => {
                out.iter().zip(labels).map(|(p, l)| (p - l).abs() / l).sum::<f64>() / labels.len() as f64
            }
            GradLoss::Projection(r) => out.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / r.len() as f64,
        }
    }

    fn grad(&self, out: &[f64]) -> Vec<f64> {
        match self {
            GradLoss::Nmae(labels) => nmae_grad(out, labels),
            GradLoss::Projection(r) => r.iter().map(|v| v / r.len() as f64).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Also check the gradient with respect to the input.
    pub check_input: bool,
    /// Negates convolution kernel gradients before comparing; a self-test of
    /// the harness.
    pub corrupt_conv_sign: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-4, check_input: true, corrupt_conv_sign: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the perturbation flipped a ReLU or a
    /// pooling choice.
    pub skipped: usize,
}

const DROPOUT_SEED: u64 = 0x5eed;

fn evaluate(net: &mut Net<f64>, x: &Tensor4<f64>, loss: &GradLoss) -> Result<(f64, Vec<f64>, Vec<u32>)> {
    // A fresh stream per call keeps dropout masks identical across evaluations.
    let mut rng = ChaCha8Rng::seed_from_u64(DROPOUT_SEED);
    let mut ctx = Ctx { train: true, rng: Some(&mut rng) };
    let out = net.forward(x.clone(), &mut ctx)?.into_data();
    Ok((loss.value(&out), out, net.activation_pattern()))
}

/// Compares backpropagated gradients of every trainable parameter (and
/// optionally the input) against central differences in training mode.
/// Returns the largest `|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)`.
pub fn grad_check(
    net: &Net<f64>,
    input: &Tensor4<f64>,
    loss: &GradLoss,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut net = net.clone();
    let (_, out, pattern) = evaluate(&mut net, input, loss)?;
    let dout = Tensor4::from_raw(net.output_dims(input.dims())?, loss.grad(&out));
    net.zero_grad();
    let dx = net.backward(dout)?;
    if opts.corrupt_conv_sign {
        for layer in &mut net.layers {
            match layer {
                Layer::Conv(c) => c.w.grad.iter_mut().for_each(|g| *g = -*g),
                Layer::Inception(b) => {
                    for c in &mut b.convs {
                        c.w.grad.iter_mut().for_each(|g| *g = -*g);
                    }
                }
                _ => {}
            }
        }
    }

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    let eps = opts.eps;
    let record = |ga: f64, plus: (f64, Vec<u32>), minus: (f64, Vec<u32>), report: &mut GradCheckReport| {
        if plus.1 != pattern || minus.1 != pattern {
            report.skipped += 1;
            return;
        }
        let gfd = (plus.0 - minus.0) / (2.0 * eps);
        let rel = (ga - gfd).abs() / (ga.abs() + gfd.abs()).max(1e-8);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    };

    let analytic: Vec<(Vec<f64>, bool)> = net.params().iter().map(|p| (p.grad.clone(), p.trainable)).collect();
    for (bi, (grads, trainable)) in analytic.iter().enumerate() {
        if !trainable {
            continue;
        }
        for (j, &ga) in grads.iter().enumerate() {
            let probe = |delta: f64| -> Result<(f64, Vec<u32>)> {
                let mut n2 = net.clone();
                let mut k = 0;
                n2.for_each_param(&mut |p| {
                    if k == bi {
                        p.value[j] += delta;
                    }
                    k += 1;
                });
                let (l, _, pat) = evaluate(&mut n2, input, loss)?;
                Ok((l, pat))
            };
            let plus = probe(eps)?;
            let minus = probe(-eps)?;
            record(ga, plus, minus, &mut report);
        }
    }
    if opts.check_input {
        for (j, &ga) in dx.data().iter().enumerate() {
            let probe = |delta: f64| -> Result<(f64, Vec<u32>)> {
                let mut x2 = input.clone();
                x2.data_mut()[j] += delta;
                let mut n2 = net.clone();
                let (l, _, pat) = evaluate(&mut n2, &x2, loss)?;
                Ok((l, pat))
            };
            let plus = probe(eps)?;
            let minus = probe(-eps)?;
            record(ga, plus, minus, &mut report);
        }
    }
    Ok(report)
}

/// A small randomized network with an input and objective, for checking
/// one layer type.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub name: &'static str,
    pub net: Net<f64>,
    pub input: Tensor4<f64>,
    pub loss: GradLoss,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn jitter_bn(bn: &mut BatchNorm<f64>, rng: &mut ChaCha8Rng) {
    let c = bn.c;
    bn.gamma.value = normal_vec(rng, c, 0.3).iter().map(|v| 1.0 + v).collect();
    bn.beta.value = normal_vec(rng, c, 0.3);
}

fn case(name: &'static str, layers: Vec<Layer<f64>>, dims: [usize; 4], rng: &mut ChaCha8Rng) -> GradCase {
    let net = Net::new(layers);
    let input = Tensor4::from_raw(dims, normal_vec(rng, dims.iter().product(), 1.0));
    let out: usize = net.output_dims(dims).expect("valid case").iter().product();
    let loss = GradLoss::Projection(normal_vec(rng, out, 1.0));
    GradCase { name, net, input, loss }
}

/// One case per layer and block type, randomized by `seed`.
pub fn standard_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = Vec::new();

    let dense = vec![Layer::Flatten(Flatten::default()), Layer::Dense(Dense::new(12, 1, r))];
    let mut c = case("dense", dense, [3, 2, 2, 3], r);
    // Labels well away from the outputs keep NMAE differentiable.
    c.loss = GradLoss::Nmae(vec![20.0, 25.0, 30.0]);
    cases.push(c);

    let mlp = vec![
        Layer::Flatten(Flatten::default()),
        Layer::Dense(Dense::new(12, 5, r)),
        Layer::Relu(Relu::default()),
        Layer::Dense(Dense::new(5, 1, r)),
    ];
    cases.push(case("dense_relu", mlp, [3, 2, 2, 3], r));

    for (name, k) in [("conv3", 3), ("conv5", 5), ("conv7", 7)] {
        cases.push(case(name, vec![Layer::Conv(Conv::new(k, 2, 3, r))], [2, 6, 5, 2], r));
    }

    let mut bn = BatchNorm::new(3, 1e-5, 0.9);
    jitter_bn(&mut bn, r);
    cases.push(case("batch_norm", vec![Layer::BatchNorm(bn)], [4, 3, 3, 3], r));

    let pool =
        vec![Layer::Conv(Conv::new(3, 2, 3, r)), Layer::Relu(Relu::default()), Layer::MaxPool(MaxPool::default())];
    cases.push(case("conv_relu_pool", pool, [2, 6, 7, 2], r));

    let drop =
        vec![Layer::Conv(Conv::new(3, 1, 2, r)), Layer::Dropout(Dropout::new(0.0)), Layer::MaxPool(MaxPool::default())];
    cases.push(case("dropout_off", drop, [2, 4, 4, 1], r));

    let mut inc = Inception::new(2, 2, false, 1e-5, 0.9, r);
    jitter_bn(&mut inc.bn, r);
    cases.push(case("inception", vec![Layer::Inception(inc)], [3, 6, 6, 2], r));

    let mut res = Inception::new(6, 2, true, 1e-5, 0.9, r);
    jitter_bn(&mut res.bn, r);
    cases.push(case("residual_inception", vec![Layer::Inception(res)], [3, 5, 5, 6], r));

    let mut proj = Inception::new(2, 2, true, 1e-5, 0.9, r);
    jitter_bn(&mut proj.bn, r);
    cases.push(case("residual_inception_projected", vec![Layer::Inception(proj)], [3, 5, 5, 2], r));

    cases
}
