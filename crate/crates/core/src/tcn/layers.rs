//! Float layer primitives with explicit forward and backward passes.

use rand::Rng;

use super::{real, FeatureMap, Real};
use crate::error::{Error, Result};
use crate::parallel::{self, Execution};

/// Uniform samples in `[-sqrt(6/fan_in), +sqrt(6/fan_in)]`.
pub fn he_uniform_init<T: Real, R: Rng + ?Sized>(
    fan_in: usize,
    count: usize,
    rng: &mut R,
) -> Vec<T> {
    assert!(fan_in >= 1, "fan_in must be positive");
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..count)
        .map(|_| real(rng.gen_range(-bound..=bound)))
        .collect()
}

/// Causal dilated 1D convolution; weights laid out `[out][in][k]`.
///
/// Tap `k` reads the input `(K-1-k)*d` steps in the past, so tap `K-1` is the
/// current sample and the output length equals the input length.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv1d<T> {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, dilation: usize) -> Self {
        assert!(dilation >= 1 && kernel >= 1);
        Self {
            in_ch,
            out_ch,
            kernel,
            dilation,
            weight: vec![T::zero(); out_ch * in_ch * kernel],
            bias: vec![T::zero(); out_ch],
        }
    }

    pub fn he_init<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(in_ch, out_ch, kernel, dilation);
        conv.weight = he_uniform_init(in_ch * kernel, conv.weight.len(), rng);
        conv
    }

    #[inline]
    pub fn w(&self, o: usize, i: usize, k: usize) -> T {
        self.weight[(o * self.in_ch + i) * self.kernel + k]
    }

    /// Left padding that keeps the output aligned with the input.
    pub fn halo(&self) -> usize {
        self.dilation * (self.kernel - 1)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Real>(&self) -> Conv1d<U> {
        Conv1d {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            kernel: self.kernel,
            dilation: self.dilation,
            weight: self
                .weight
                .iter()
                .map(|&v| real(v.to_f64().unwrap()))
                .collect(),
            bias: self
                .bias
                .iter()
                .map(|&v| real(v.to_f64().unwrap()))
                .collect(),
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        if x.channels != self.in_ch {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_ch, x.channels
            )));
        }
        let t_len = x.length;
        let mut y = FeatureMap::zeros(self.out_ch, t_len);
        for o in 0..self.out_ch {
            let out = y.row_mut(o);
            out.fill(self.bias[o]);
            for i in 0..self.in_ch {
                let inp = x.row(i);
                for k in 0..self.kernel {
                    let shift = (self.kernel - 1 - k) * self.dilation;
                    if shift >= t_len {
                        continue;
                    }
                    let w = self.w(o, i, k);
                    for (yo, &xi) in out[shift..].iter_mut().zip(&inp[..t_len - shift]) {
                        *yo = *yo + w * xi;
                    }
                }
            }
        }
        Ok(y)
    }

    /// Returns `(dx, dweight, dbias)` for one item.
    pub fn backward(
        &self,
        x: &FeatureMap<T>,
        dy: &FeatureMap<T>,
    ) -> (FeatureMap<T>, Vec<T>, Vec<T>) {
        let t_len = x.length;
        let mut dx = FeatureMap::zeros(self.in_ch, t_len);
        let mut dw = vec![T::zero(); self.weight.len()];
        let mut db = vec![T::zero(); self.out_ch];
        for o in 0..self.out_ch {
            let g = dy.row(o);
            db[o] = g.iter().copied().sum();
            for i in 0..self.in_ch {
                let inp = x.row(i);
                for k in 0..self.kernel {
                    let shift = (self.kernel - 1 - k) * self.dilation;
                    if shift >= t_len {
                        continue;
                    }
                    let mut acc = T::zero();
                    for (&gv, &xv) in g[shift..].iter().zip(&inp[..t_len - shift]) {
                        acc = acc + gv * xv;
                    }
                    dw[(o * self.in_ch + i) * self.kernel + k] = acc;
                    let w = self.w(o, i, k);
                    let dxi = dx.row_mut(i);
                    for (d, &gv) in dxi[..t_len - shift].iter_mut().zip(&g[shift..]) {
                        *d = *d + w * gv;
                    }
                }
            }
        }
        (dx, dw, db)
    }
}

/// Batch convolution forward with order-preserving parallelism.
pub(crate) fn conv_batch<T: Real>(
    conv: &Conv1d<T>,
    xs: &[FeatureMap<T>],
    exec: Execution,
) -> Result<Vec<FeatureMap<T>>> {
    parallel::map(exec, xs, |x| conv.forward(x))
        .into_iter()
        .collect()
}

/// Batch convolution backward; parameter gradients are summed in item order.
pub(crate) fn conv_batch_backward<T: Real>(
    conv: &Conv1d<T>,
    xs: &[FeatureMap<T>],
    dys: &[FeatureMap<T>],
    grad: &mut Conv1d<T>,
    exec: Execution,
) -> Vec<FeatureMap<T>> {
    let idx: Vec<usize> = (0..xs.len()).collect();
    let parts = parallel::map(exec, &idx, |&b| conv.backward(&xs[b], &dys[b]));
    let mut dxs = Vec::with_capacity(parts.len());
    for (dx, dw, db) in parts {
        for (g, v) in grad.weight.iter_mut().zip(dw) {
            *g = *g + v;
        }
        for (g, v) in grad.bias.iter_mut().zip(db) {
            *g = *g + v;
        }
        dxs.push(dx);
    }
    dxs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

/// Batch statistics and normalized activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Vec<FeatureMap<T>>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub count: usize,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps,
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn cast<U: Real>(&self) -> BatchNorm<U> {
        let c = |v: &Vec<T>| v.iter().map(|&x| real::<U>(x.to_f64().unwrap())).collect();
        BatchNorm {
            gamma: c(&self.gamma),
            beta: c(&self.beta),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
            eps: self.eps,
            momentum: self.momentum,
        }
    }

    fn check(&self, x: &FeatureMap<T>) -> Result<()> {
        if x.channels != self.channels() {
            return Err(Error::Shape(format!(
                "batch norm over {} channels applied to {}",
                self.channels(),
                x.channels
            )));
        }
        Ok(())
    }

    pub fn forward_eval(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check(x)?;
        let eps: T = real(self.eps);
        let mut y = x.clone();
        for c in 0..x.channels {
            let scale = self.gamma[c] / (self.running_var[c] + eps).sqrt();
            let shift = self.beta[c] - self.running_mean[c] * scale;
            for v in y.row_mut(c) {
                *v = *v * scale + shift;
            }
        }
        Ok(y)
    }

    /// Normalizes with statistics pooled over batch and time.
    pub fn forward_train(&self, xs: &[FeatureMap<T>]) -> Result<(Vec<FeatureMap<T>>, BnCache<T>)> {
        for x in xs {
            self.check(x)?;
        }
        let ch = self.channels();
        let count: usize = xs.iter().map(|x| x.length).sum();
        let n: T = real(count as f64);
        let eps: T = real(self.eps);
        let mut mean = vec![T::zero(); ch];
        let mut var = vec![T::zero(); ch];
        for c in 0..ch {
            let s: T = xs.iter().flat_map(|x| x.row(c).iter().copied()).sum();
            mean[c] = s / n;
            let ss: T = xs
                .iter()
                .flat_map(|x| x.row(c).iter().map(|&v| (v - mean[c]) * (v - mean[c])))
                .sum();
            var[c] = ss / n;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut ys = Vec::with_capacity(xs.len());
        for x in xs {
            let mut h = x.clone();
            let mut y = x.clone();
            for c in 0..ch {
                for (hv, yv) in h.row_mut(c).iter_mut().zip(y.row_mut(c)) {
                    *hv = (*hv - mean[c]) * inv_std[c];
                    *yv = self.gamma[c] * *hv + self.beta[c];
                }
            }
            xhat.push(h);
            ys.push(y);
        }
        Ok((
            ys,
            BnCache {
                xhat,
                mean,
                var,
                inv_std,
                count,
            },
        ))
    }

    /// Moves running statistics toward a batch's statistics (unbiased variance).
    pub fn update_running(&mut self, cache: &BnCache<T>) {
        let m: T = real(self.momentum);
        let n = cache.count as f64;
        let unbias: T = real(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        for c in 0..self.channels() {
            self.running_mean[c] = (T::one() - m) * self.running_mean[c] + m * cache.mean[c];
            self.running_var[c] = (T::one() - m) * self.running_var[c] + m * cache.var[c] * unbias;
        }
    }

    /// Returns `dx` per item and accumulates `dgamma`, `dbeta` into `grad`.
    pub fn backward(
        &self,
        dys: &[FeatureMap<T>],
        cache: &BnCache<T>,
        grad: &mut BatchNorm<T>,
    ) -> Vec<FeatureMap<T>> {
        let ch = self.channels();
        let n: T = real(cache.count as f64);
        let mut sum_dy = vec![T::zero(); ch];
        let mut sum_dy_xhat = vec![T::zero(); ch];
        for (dy, xh) in dys.iter().zip(&cache.xhat) {
            for c in 0..ch {
                for (&g, &h) in dy.row(c).iter().zip(xh.row(c)) {
                    sum_dy[c] = sum_dy[c] + g;
                    sum_dy_xhat[c] = sum_dy_xhat[c] + g * h;
                }
            }
        }
        for c in 0..ch {
            grad.gamma[c] = grad.gamma[c] + sum_dy_xhat[c];
            grad.beta[c] = grad.beta[c] + sum_dy[c];
        }
        dys.iter()
            .zip(&cache.xhat)
            .map(|(dy, xh)| {
                let mut dx = dy.clone();
                for c in 0..ch {
                    let k = self.gamma[c] * cache.inv_std[c] / n;
                    for (d, &h) in dx.row_mut(c).iter_mut().zip(xh.row(c)) {
                        *d = k * (n * *d - sum_dy[c] - h * sum_dy_xhat[c]);
                    }
                }
                dx
            })
            .collect()
    }
}

pub fn relu<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its pre-activation input.
pub fn relu_backward<T: Real>(pre: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
    let mut dx = dy.clone();
    for (d, &p) in dx.data.iter_mut().zip(&pre.data) {
        if p <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Element dropout. Returns the output and the per-element multiplier
/// (`0` or `1/(1-p)`), which is also the backward mask.
pub fn dropout_fwd<T: Real, R: Rng + ?Sized>(
    x: &FeatureMap<T>,
    p: f64,
    rng: &mut R,
    mode: Mode,
) -> (FeatureMap<T>, Option<Vec<T>>) {
    assert!(
        (0.0..1.0).contains(&p),
        "dropout probability {p} outside [0, 1)"
    );
    if mode == Mode::Eval || p == 0.0 {
        return (x.clone(), None);
    }
    let keep: T = real(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.data.len())
        .map(|_| {
            if rng.gen::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let mut y = x.clone();
    for (v, &m) in y.data.iter_mut().zip(&mask) {
        *v = *v * m;
    }
    (y, Some(mask))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out][in]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![T::zero(); in_features * out_features],
            bias: vec![T::zero(); out_features],
        }
    }

    pub fn he_init<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let mut d = Self::zeros(in_features, out_features);
        d.weight = he_uniform_init(in_features, d.weight.len(), rng);
        d
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Real>(&self) -> Dense<U> {
        Dense {
            in_features: self.in_features,
            out_features: self.out_features,
            weight: self
                .weight
                .iter()
                .map(|&v| real(v.to_f64().unwrap()))
                .collect(),
            bias: self
                .bias
                .iter()
                .map(|&v| real(v.to_f64().unwrap()))
                .collect(),
        }
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.in_features {
            return Err(Error::Shape(format!(
                "dense expects {} features, got {}",
                self.in_features,
                x.len()
            )));
        }
        Ok((0..self.out_features)
            .map(|o| {
                let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                row.iter()
                    .zip(x)
                    .fold(self.bias[o], |acc, (&w, &v)| acc + w * v)
            })
            .collect())
    }

    /// Accumulates parameter gradients into `grad` and returns `dx`.
    pub fn backward(&self, x: &[T], dy: &[T], grad: &mut Dense<T>) -> Vec<T> {
        let mut dx = vec![T::zero(); self.in_features];
        for (o, &g) in dy.iter().enumerate().take(self.out_features) {
            grad.bias[o] = grad.bias[o] + g;
            let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
            let grow = &mut grad.weight[o * self.in_features..(o + 1) * self.in_features];
            for ((gw, &xv), (d, &w)) in grow.iter_mut().zip(x).zip(dx.iter_mut().zip(row)) {
                *gw = *gw + g * xv;
                *d = *d + g * w;
            }
        }
        dx
    }
}
