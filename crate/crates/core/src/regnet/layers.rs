//! Layers with hand-written backward passes. Every layer caches what its
//! backward pass needs during a training-mode forward call.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::tensor::{Real, Tensor4};
use super::{RegError, Result};

/// A parameter block. Batch-norm running statistics are stored as
/// non-trainable blocks so that they travel with the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    fn new(shape: Vec<usize>, value: Vec<T>, trainable: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self { shape, value, grad, trainable }
    }

    fn zeros(shape: Vec<usize>, trainable: bool) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n], trainable)
    }

    fn he(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let value = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
        Self::new(shape, value, true)
    }
}

/// Per-call forward state: training flag and the dropout mask stream.
pub struct Ctx<'a> {
    pub train: bool,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Ctx<'_> {
    pub fn inference() -> Ctx<'static> {
        Ctx { train: false, rng: None }
    }
}

/// Same-padding, stride-1 convolution with a `k×k×cin×cout` kernel.
#[derive(Debug, Clone)]
pub struct Conv<T> {
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub w: Param<T>,
    pub b: Param<T>,
    input: Option<Tensor4<T>>,
}

/// Rows of the im2col buffer built at once; bounds scratch memory.
const COL_BUDGET: usize = 1 << 20;

impl<T: Real> Conv<T> {
    pub fn new(k: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            k,
            cin,
            cout,
            w: Param::he(vec![k, k, cin, cout], k * k * cin, rng),
            b: Param::zeros(vec![cout], true),
            input: None,
        }
    }

    fn chunk_rows(&self) -> usize {
        (COL_BUDGET / (self.k * self.k * self.cin)).max(1)
    }

    /// Valid `dx` range of a kernel row at column `x`: `x + dx - pad` stays inside `0..w`.
    #[inline]
    fn dx_range(&self, x: usize, w: usize) -> (usize, usize) {
        let pad = self.k / 2;
        (pad.saturating_sub(x), self.k.min(w + pad - x))
    }

    /// Fills `col` with the receptive fields of positions `p0..p0+rows` of one image.
    fn im2col(&self, img: &[T], h: usize, w: usize, p0: usize, rows: usize, col: &mut [T]) {
        let (k, cin) = (self.k, self.cin);
        let pad = k / 2;
        let width = k * k * cin;
        let (mut y, mut x) = (p0 / w, p0 % w);
        for dst in col[..rows * width].chunks_exact_mut(width) {
            let (dx0, dx1) = self.dx_range(x, w);
            for (dy, seg) in dst.chunks_exact_mut(k * cin).enumerate() {
                let sy = y + dy;
                if sy < pad || sy - pad >= h {
                    seg.fill(T::zero());
                    continue;
                }
                // The valid part of a kernel row is one contiguous run in the image.
                seg[..dx0 * cin].fill(T::zero());
                seg[dx1 * cin..].fill(T::zero());
                let s = ((sy - pad) * w + x + dx0 - pad) * cin;
                seg[dx0 * cin..dx1 * cin].copy_from_slice(&img[s..s + (dx1 - dx0) * cin]);
            }
            x += 1;
            if x == w {
                x = 0;
                y += 1;
            }
        }
    }

    fn col2im(&self, col: &[T], h: usize, w: usize, p0: usize, rows: usize, dimg: &mut [T]) {
        let (k, cin) = (self.k, self.cin);
        let pad = k / 2;
        let width = k * k * cin;
        let (mut y, mut x) = (p0 / w, p0 % w);
        for src in col[..rows * width].chunks_exact(width) {
            let (dx0, dx1) = self.dx_range(x, w);
            for (dy, seg) in src.chunks_exact(k * cin).enumerate() {
                let sy = y + dy;
                if sy < pad || sy - pad >= h {
                    continue;
                }
                let s = ((sy - pad) * w + x + dx0 - pad) * cin;
                let run = &seg[dx0 * cin..dx1 * cin];
                for (d, &v) in dimg[s..s + run.len()].iter_mut().zip(run) {
                    *d = *d + v;
                }
            }
            x += 1;
            if x == w {
                x = 0;
                y += 1;
            }
        }
    }

    pub fn forward(&mut self, x: Tensor4<T>, ctx: &Ctx) -> Result<Tensor4<T>> {
        let y = self.apply(&x)?;
        if ctx.train {
            self.input = Some(x);
        }
        Ok(y)
    }

    pub fn apply(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let [n, h, w, c] = x.dims();
        if c != self.cin {
            return Err(RegError::ShapeMismatch(format!("conv expects {} channels, got {c}", self.cin)));
        }
        let hw = h * w;
        let width = self.k * self.k * self.cin;
        let chunk = self.chunk_rows().min(hw);
        let mut out = vec![T::zero(); n * hw * self.cout];
        let this = self;
        let scratch = || vec![T::zero(); chunk * width];
        out.par_chunks_mut(hw * self.cout).zip(x.data().par_chunks(hw * c)).for_each_init(scratch, |col, (o, img)| {
            let mut p0 = 0;
            while p0 < hw {
                let rows = chunk.min(hw - p0);
                this.im2col(img, h, w, p0, rows, col);
                let dst = &mut o[p0 * this.cout..(p0 + rows) * this.cout];
                T::matmul(rows, width, this.cout, &col[..rows * width], false, &this.w.value, false, dst, false);
                for row in dst.chunks_mut(this.cout) {
                    for (v, &b) in row.iter_mut().zip(&this.b.value) {
                        *v = *v + b;
                    }
                }
                p0 += rows;
            }
        });
        Ok(Tensor4::from_raw([n, h, w, self.cout], out))
    }

    pub fn backward(&mut self, dout: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self.input.take().ok_or(RegError::NoForwardCache)?;
        let [n, h, w, c] = x.dims();
        let hw = h * w;
        let width = self.k * self.k * self.cin;
        let chunk = self.chunk_rows().min(hw);
        let mut dx = vec![T::zero(); x.data().len()];
        let this = &*self;
        let partials: Vec<Vec<T>> = dx
            .par_chunks_mut(hw * c)
            .zip(x.data().par_chunks(hw * c))
            .zip(dout.data().par_chunks(hw * this.cout))
            .map_init(
                || (vec![T::zero(); chunk * width], vec![T::zero(); chunk * width]),
                |(col, dcol), ((dimg, img), dimg_out)| {
                    let mut dw = vec![T::zero(); width * this.cout];
                    let mut p0 = 0;
                    while p0 < hw {
                        let rows = chunk.min(hw - p0);
                        let (col, dcol) = (&mut col[..rows * width], &mut dcol[..rows * width]);
                        this.im2col(img, h, w, p0, rows, col);
                        let d = &dimg_out[p0 * this.cout..(p0 + rows) * this.cout];
                        T::matmul(width, rows, this.cout, col, true, d, false, &mut dw, true);
                        T::matmul(rows, this.cout, width, d, false, &this.w.value, true, dcol, false);
                        this.col2im(dcol, h, w, p0, rows, dimg);
                        p0 += rows;
                    }
                    dw
                },
            )
            .collect();
        // Fixed-order reduction keeps gradients independent of thread count.
        for part in partials {
            for (g, v) in self.w.grad.iter_mut().zip(part) {
                *g = *g + v;
            }
        }
        for row in dout.data().chunks(self.cout) {
            for (g, &v) in self.b.grad.iter_mut().zip(row) {
                *g = *g + v;
            }
        }
        Ok(Tensor4::from_raw([n, h, w, c], dx))
    }

    fn params(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.w, &mut self.b]
    }
}

/// Per-channel batch normalization.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub c: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(c: usize, eps: f64, momentum: f64) -> Self {
        Self {
            c,
            gamma: Param::new(vec![c], vec![T::one(); c], true),
            beta: Param::zeros(vec![c], true),
            running_mean: Param::zeros(vec![c], false),
            running_var: Param::new(vec![c], vec![T::one(); c], false),
            eps,
            momentum,
            cache: None,
        }
    }

    pub fn forward(&mut self, mut x: Tensor4<T>, ctx: &Ctx) -> Result<Tensor4<T>> {
        let c = self.c;
        if x.dims()[3] != c {
            return Err(RegError::ShapeMismatch(format!("batch norm expects {c} channels, got {}", x.dims()[3])));
        }
        if !ctx.train {
            return self.apply(x);
        }
        let eps = T::from_f64(self.eps);
        let m = x.data().len() / c;
        let mf = T::from_f64(m as f64);
        let mut mean = vec![T::zero(); c];
        for row in x.data().chunks(c) {
            for i in 0..c {
                mean[i] = mean[i] + row[i];
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / mf);
        let mut var = vec![T::zero(); c];
        for row in x.data().chunks(c) {
            for i in 0..c {
                let d = row[i] - mean[i];
                var[i] = var[i] + d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / mf);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = x.data().to_vec();
        for (row, out) in xhat.chunks_mut(c).zip(x.data_mut().chunks_mut(c)) {
            for i in 0..c {
                row[i] = (row[i] - mean[i]) * inv_std[i];
                out[i] = row[i] * self.gamma.value[i] + self.beta.value[i];
            }
        }
        let mo = T::from_f64(self.momentum);
        let keep = T::one() - mo;
        for i in 0..c {
            self.running_mean.value[i] = mo * self.running_mean.value[i] + keep * mean[i];
            self.running_var.value[i] = mo * self.running_var.value[i] + keep * var[i];
        }
        self.cache = Some((xhat, inv_std));
        Ok(x)
    }

    /// Inference-mode normalization with the running statistics.
    pub fn apply(&self, mut x: Tensor4<T>) -> Result<Tensor4<T>> {
        let c = self.c;
        if x.dims()[3] != c {
            return Err(RegError::ShapeMismatch(format!("batch norm expects {c} channels, got {}", x.dims()[3])));
        }
        let eps = T::from_f64(self.eps);
        let scale: Vec<T> = (0..c).map(|i| self.gamma.value[i] / (self.running_var.value[i] + eps).sqrt()).collect();
        for row in x.data_mut().chunks_mut(c) {
            for i in 0..c {
                row[i] = (row[i] - self.running_mean.value[i]) * scale[i] + self.beta.value[i];
            }
        }
        Ok(x)
    }

    pub fn backward(&mut self, dout: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (xhat, inv_std) = self.cache.take().ok_or(RegError::NoForwardCache)?;
        let c = self.c;
        let m = dout.data().len() / c;
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (d, xh) in dout.data().chunks(c).zip(xhat.chunks(c)) {
            for i in 0..c {
                dgamma[i] = dgamma[i] + d[i] * xh[i];
                dbeta[i] = dbeta[i] + d[i];
            }
        }
        let mf = T::from_f64(m as f64);
        let mut dx = vec![T::zero(); dout.data().len()];
        for ((o, d), xh) in dx.chunks_mut(c).zip(dout.data().chunks(c)).zip(xhat.chunks(c)) {
            for i in 0..c {
                let k = self.gamma.value[i] * inv_std[i] / mf;
                o[i] = k * (mf * d[i] - dbeta[i] - xh[i] * dgamma[i]);
            }
        }
        for i in 0..c {
            self.gamma.grad[i] = self.gamma.grad[i] + dgamma[i];
            self.beta.grad[i] = self.beta.grad[i] + dbeta[i];
        }
        Ok(Tensor4::from_raw(dout.dims(), dx))
    }

    fn params(&mut self) -> [&mut Param<T>; 4] {
        [&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var]
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn forward<T: Real>(&mut self, x: Tensor4<T>, ctx: &Ctx) -> Tensor4<T> {
        if ctx.train {
            self.mask = x.data().iter().map(|&v| v > T::zero()).collect();
        }
        Self::apply(x)
    }

    pub fn apply<T: Real>(mut x: Tensor4<T>) -> Tensor4<T> {
        for v in x.data_mut() {
            if !(*v > T::zero()) {
                *v = T::zero();
            }
        }
        x
    }

    pub fn backward<T: Real>(&mut self, mut d: Tensor4<T>) -> Tensor4<T> {
        for (v, &on) in d.data_mut().iter_mut().zip(&self.mask) {
            if !on {
                *v = T::zero();
            }
        }
        d
    }
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
#[derive(Debug, Clone, Default)]
pub struct MaxPool {
    argmax: Vec<u32>,
    in_dims: [usize; 4],
}

impl MaxPool {
    pub fn forward<T: Real>(&mut self, x: Tensor4<T>, ctx: &Ctx) -> Result<Tensor4<T>> {
        let (y, arg) = Self::pool(&x, ctx.train)?;
        if ctx.train {
            self.argmax = arg;
            self.in_dims = x.dims();
        }
        Ok(y)
    }

    pub fn pool<T: Real>(x: &Tensor4<T>, record: bool) -> Result<(Tensor4<T>, Vec<u32>)> {
        let [n, h, w, c] = x.dims();
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(RegError::ShapeMismatch(format!("cannot pool {h}x{w}")));
        }
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut arg = Vec::with_capacity(if record { n * oh * ow * c } else { 0 });
        let d = x.data();
        for b in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    for ch in 0..c {
                        let mut best = T::neg_infinity();
                        let mut bi = 0u32;
                        for (q, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                            let v = d[((b * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch];
                            if v > best {
                                best = v;
                                bi = q as u32;
                            }
                        }
                        out.push(best);
                        if record {
                            arg.push(bi);
                        }
                    }
                }
            }
        }
        Ok((Tensor4::from_raw([n, oh, ow, c], out), arg))
    }

    pub fn backward<T: Real>(&mut self, dout: &Tensor4<T>) -> Tensor4<T> {
        let [n, h, w, c] = self.in_dims;
        let (oh, ow) = (h / 2, w / 2);
        let mut dx = vec![T::zero(); n * h * w * c];
        let d = dout.data();
        let mut i = 0;
        for b in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    for ch in 0..c {
                        let q = self.argmax[i] as usize;
                        let idx = ((b * h + 2 * y + q / 2) * w + 2 * xx + q % 2) * c + ch;
                        dx[idx] = dx[idx] + d[i];
                        i += 1;
                    }
                }
            }
        }
        Tensor4::from_raw(self.in_dims, dx)
    }
}

/// Inverted dropout: kept activations are scaled by `1/(1-rate)` in training.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    pub rate: f64,
    mask: Vec<T>,
}

impl<T: Real> Dropout<T> {
    pub fn new(rate: f64) -> Self {
        Self { rate, mask: Vec::new() }
    }

    pub fn forward(&mut self, mut x: Tensor4<T>, ctx: &mut Ctx) -> Tensor4<T> {
        if !ctx.train || self.rate <= 0.0 {
            self.mask.clear();
            return x;
        }
        let rng = ctx.rng.as_deref_mut().expect("training forward needs an rng");
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        self.mask =
            (0..x.data().len()).map(|_| if rng.random::<f64>() < self.rate { T::zero() } else { keep }).collect();
        for (v, &m) in x.data_mut().iter_mut().zip(&self.mask) {
            *v = *v * m;
        }
        x
    }

    pub fn backward(&mut self, mut d: Tensor4<T>) -> Tensor4<T> {
        if !self.mask.is_empty() {
            for (v, &m) in d.data_mut().iter_mut().zip(&self.mask) {
                *v = *v * m;
            }
        }
        d
    }
}

/// Fully connected layer on `(n, 1, 1, nin)` tensors.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub nin: usize,
    pub nout: usize,
    pub w: Param<T>,
    pub b: Param<T>,
    input: Option<Tensor4<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new(nin: usize, nout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { nin, nout, w: Param::he(vec![nin, nout], nin, rng), b: Param::zeros(vec![nout], true), input: None }
    }

    pub fn forward(&mut self, x: Tensor4<T>, ctx: &Ctx) -> Result<Tensor4<T>> {
        let y = self.apply(&x)?;
        if ctx.train {
            self.input = Some(x);
        }
        Ok(y)
    }

    pub fn apply(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let n = x.n();
        if x.item_len() != self.nin {
            return Err(RegError::ShapeMismatch(format!("dense expects {} inputs, got {}", self.nin, x.item_len())));
        }
        let mut out = vec![T::zero(); n * self.nout];
        T::matmul(n, self.nin, self.nout, x.data(), false, &self.w.value, false, &mut out, false);
        for row in out.chunks_mut(self.nout) {
            for (v, &b) in row.iter_mut().zip(&self.b.value) {
                *v = *v + b;
            }
        }
        Ok(Tensor4::from_raw([n, 1, 1, self.nout], out))
    }

    pub fn backward(&mut self, dout: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self.input.take().ok_or(RegError::NoForwardCache)?;
        let n = x.n();
        T::matmul(self.nin, n, self.nout, x.data(), true, dout.data(), false, &mut self.w.grad, true);
        for row in dout.data().chunks(self.nout) {
            for (g, &v) in self.b.grad.iter_mut().zip(row) {
                *g = *g + v;
            }
        }
        let mut dx = vec![T::zero(); n * self.nin];
        T::matmul(n, self.nout, self.nin, dout.data(), false, &self.w.value, true, &mut dx, false);
        Ok(Tensor4::from_raw(x.dims(), dx))
    }
}

/// Parallel 3×3, 5×5 and 7×7 convolutions concatenated channel-wise, then
/// batch norm and ReLU. The residual form adds the input (or a 1×1
/// projection of it) to the concatenation before the normalization.
#[derive(Debug, Clone)]
pub struct Inception<T> {
    pub filters: usize,
    pub convs: Vec<Conv<T>>,
    pub proj: Option<Conv<T>>,
    pub residual: bool,
    pub bn: BatchNorm<T>,
    relu: Relu,
}

pub const INCEPTION_KERNELS: [usize; 3] = [3, 5, 7];

impl<T: Real> Inception<T> {
    pub fn new(cin: usize, filters: usize, residual: bool, eps: f64, momentum: f64, rng: &mut ChaCha8Rng) -> Self {
        let convs = INCEPTION_KERNELS.iter().map(|&k| Conv::new(k, cin, filters, rng)).collect();
        let cout = 3 * filters;
        let proj = (residual && cin != cout).then(|| Conv::new(1, cin, cout, rng));
        Self { filters, convs, proj, residual, bn: BatchNorm::new(cout, eps, momentum), relu: Relu::default() }
    }

    pub fn out_channels(&self) -> usize {
        3 * self.filters
    }

    pub fn forward(&mut self, x: Tensor4<T>, ctx: &Ctx) -> Result<Tensor4<T>> {
        let [n, h, w, _] = x.dims();
        let f = self.filters;
        let cout = 3 * f;
        let mut cat = vec![T::zero(); n * h * w * cout];
        for (ci, conv) in self.convs.iter_mut().enumerate() {
            let o = conv.forward(x.clone(), ctx)?;
            for (dst, src) in cat.chunks_mut(cout).zip(o.data().chunks(f)) {
                dst[ci * f..(ci + 1) * f].copy_from_slice(src);
            }
        }
        if self.residual {
            let short = match &mut self.proj {
                Some(p) => p.forward(x, ctx)?,
                None => x,
            };
            if short.dims()[3] != cout {
                return Err(RegError::ShapeMismatch(format!(
                    "residual needs {cout} input channels, got {}",
                    short.dims()[3]
                )));
            }
            for (a, &b) in cat.iter_mut().zip(short.data()) {
                *a = *a + b;
            }
        }
        let y = self.bn.forward(Tensor4::from_raw([n, h, w, cout], cat), ctx)?;
        Ok(self.relu.forward(y, ctx))
    }

    pub fn apply(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let [n, h, w, _] = x.dims();
        let f = self.filters;
        let cout = 3 * f;
        let mut cat = vec![T::zero(); n * h * w * cout];
        for (ci, conv) in self.convs.iter().enumerate() {
            let o = conv.apply(x)?;
            for (dst, src) in cat.chunks_mut(cout).zip(o.data().chunks(f)) {
                dst[ci * f..(ci + 1) * f].copy_from_slice(src);
            }
        }
        if self.residual {
            let projected;
            let short = match &self.proj {
                Some(p) => {
                    projected = p.apply(x)?;
                    &projected
                }
                None => x,
            };
            if short.dims()[3] != cout {
                return Err(RegError::ShapeMismatch(format!(
                    "residual needs {cout} input channels, got {}",
                    short.dims()[3]
                )));
            }
            add_into(&mut cat, short.data());
        }
        let y = self.bn.apply(Tensor4::from_raw([n, h, w, cout], cat))?;
        Ok(Relu::apply(y))
    }

    pub fn backward(&mut self, dout: Tensor4<T>) -> Result<Tensor4<T>> {
        let d = self.relu.backward(dout);
        let d = self.bn.backward(&d)?;
        let [n, h, w, cout] = d.dims();
        let f = self.filters;
        let mut dx: Option<Tensor4<T>> = None;
        for (ci, conv) in self.convs.iter_mut().enumerate() {
            let mut part = Vec::with_capacity(n * h * w * f);
            for row in d.data().chunks(cout) {
                part.extend_from_slice(&row[ci * f..(ci + 1) * f]);
            }
            let g = conv.backward(&Tensor4::from_raw([n, h, w, f], part))?;
            dx = Some(match dx {
                None => g,
                Some(mut acc) => {
                    add_into(acc.data_mut(), g.data());
                    acc
                }
            });
        }
        let mut dx = dx.expect("three branches");
        if self.residual {
            match &mut self.proj {
                Some(p) => {
                    let g = p.backward(&d)?;
                    add_into(dx.data_mut(), g.data());
                }
                None => add_into(dx.data_mut(), d.data()),
            }
        }
        Ok(dx)
    }

    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for c in &mut self.convs {
            c.params().into_iter().for_each(&mut *f);
        }
        if let Some(p) = &mut self.proj {
            p.params().into_iter().for_each(&mut *f);
        }
        self.bn.params().into_iter().for_each(f);
    }
}

fn add_into<T: Real>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a = *a + b;
    }
}

/// Reshapes `(n, h, w, c)` to `(n, 1, 1, h·w·c)`; NHWC order is kept.
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    in_dims: [usize; 4],
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(Conv<T>),
    BatchNorm(BatchNorm<T>),
    Relu(Relu),
    MaxPool(MaxPool),
    Dropout(Dropout<T>),
    Flatten(Flatten),
    Dense(Dense<T>),
    Inception(Inception<T>),
}

impl<T: Real> Layer<T> {
    fn name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Relu(_) => "relu",
            Layer::MaxPool(_) => "max_pool",
            Layer::Dropout(_) => "dropout",
            Layer::Flatten(_) => "flatten",
            Layer::Dense(_) => "dense",
            Layer::Inception(_) => "inception",
        }
    }

    pub(crate) fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Layer::Conv(c) => c.params().into_iter().for_each(f),
            Layer::BatchNorm(b) => b.params().into_iter().for_each(f),
            Layer::Dense(d) => [&mut d.w, &mut d.b].into_iter().for_each(f),
            Layer::Inception(b) => b.for_each_param(f),
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::Dropout(_) | Layer::Flatten(_) => {}
        }
    }
}

/// A feed-forward stack of layers.
#[derive(Debug, Clone)]
pub struct Net<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Net<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn forward(&mut self, mut x: Tensor4<T>, ctx: &mut Ctx) -> Result<Tensor4<T>> {
        for layer in &mut self.layers {
            x = match layer {
                Layer::Conv(l) => l.forward(x, ctx)?,
                Layer::BatchNorm(l) => l.forward(x, ctx)?,
                Layer::Relu(l) => l.forward(x, ctx),
                Layer::MaxPool(l) => l.forward(x, ctx)?,
                Layer::Dropout(l) => l.forward(x, ctx),
                Layer::Flatten(f) => {
                    f.in_dims = x.dims();
                    let (n, len) = (x.n(), x.item_len());
                    x.reshape([n, 1, 1, len])
                }
                Layer::Dense(l) => l.forward(x, ctx)?,
                Layer::Inception(l) => l.forward(x, ctx)?,
            };
            if !x.all_finite() {
                return Err(RegError::NonFiniteActivation(layer.name().into()));
            }
        }
        Ok(x)
    }

    /// Inference-mode forward pass; takes `&self` so a loaded model can be
    /// shared across threads.
    pub fn infer(&self, mut x: Tensor4<T>) -> Result<Tensor4<T>> {
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(l) => l.apply(&x)?,
                Layer::BatchNorm(l) => l.apply(x)?,
                Layer::Relu(_) => Relu::apply(x),
                Layer::MaxPool(_) => MaxPool::pool(&x, false)?.0,
                Layer::Dropout(_) => x,
                Layer::Flatten(_) => {
                    let (n, len) = (x.n(), x.item_len());
                    x.reshape([n, 1, 1, len])
                }
                Layer::Dense(l) => l.apply(&x)?,
                Layer::Inception(l) => l.apply(&x)?,
            };
            if !x.all_finite() {
                return Err(RegError::NonFiniteActivation(layer.name().into()));
            }
        }
        Ok(x)
    }

    /// Backpropagates `dout` through the last training-mode forward pass,
    /// accumulating parameter gradients. Returns the input gradient.
    pub fn backward(&mut self, dout: Tensor4<T>) -> Result<Tensor4<T>> {
        let mut d = dout;
        for layer in self.layers.iter_mut().rev() {
            d = match layer {
                Layer::Conv(l) => l.backward(&d)?,
                Layer::BatchNorm(l) => l.backward(&d)?,
                Layer::Relu(l) => l.backward(d),
                Layer::MaxPool(l) => l.backward(&d),
                Layer::Dropout(l) => l.backward(d),
                Layer::Flatten(f) => d.reshape(f.in_dims),
                Layer::Dense(l) => l.backward(&d)?,
                Layer::Inception(l) => l.backward(d)?,
            };
        }
        Ok(d)
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for layer in &mut self.layers {
            layer.for_each_param(f);
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => out.extend([&c.w, &c.b]),
                Layer::BatchNorm(b) => out.extend([&b.gamma, &b.beta, &b.running_mean, &b.running_var]),
                Layer::Dense(d) => out.extend([&d.w, &d.b]),
                Layer::Inception(b) => {
                    for c in &b.convs {
                        out.extend([&c.w, &c.b]);
                    }
                    if let Some(p) = &b.proj {
                        out.extend([&p.w, &p.b]);
                    }
                    out.extend([&b.bn.gamma, &b.bn.beta, &b.bn.running_mean, &b.bn.running_var]);
                }
                Layer::Relu(_) | Layer::MaxPool(_) | Layer::Dropout(_) | Layer::Flatten(_) => {}
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.for_each_param(&mut |p| p.grad.iter_mut().for_each(|g| *g = T::zero()));
    }

    /// ReLU masks and pooling choices of the last training forward pass.
    pub fn activation_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Relu(r) => out.extend(r.mask.iter().map(|&b| b as u32)),
                Layer::MaxPool(p) => out.extend_from_slice(&p.argmax),
                Layer::Inception(b) => out.extend(b.relu.mask.iter().map(|&b| b as u32)),
                _ => {}
            }
        }
        out
    }

    /// Output dims for an input of the given dims, without running the net.
    pub fn output_dims(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        shape_walk(&self.layers, input)
    }
}

fn shape_walk<T: Real>(layers: &[Layer<T>], input: [usize; 4]) -> Result<[usize; 4]> {
    let mut d = input;
    for layer in layers {
        d = match layer {
            Layer::Conv(c) => [d[0], d[1], d[2], c.cout],
            Layer::Inception(b) => [d[0], d[1], d[2], b.out_channels()],
            Layer::MaxPool(_) => {
                if d[1] < 2 || d[2] < 2 {
                    return Err(RegError::ShapeMismatch(format!("cannot pool {}x{}", d[1], d[2])));
                }
                [d[0], d[1] / 2, d[2] / 2, d[3]]
            }
            Layer::Flatten(_) => [d[0], 1, 1, d[1] * d[2] * d[3]],
            Layer::Dense(l) => [d[0], 1, 1, l.nout],
            Layer::BatchNorm(_) | Layer::Relu(_) | Layer::Dropout(_) => d,
        };
    }
    Ok(d)
}
