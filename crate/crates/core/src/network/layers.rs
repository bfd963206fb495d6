//! Convolution, batch normalization and activations with explicit backward
//! passes over NHWC buffers.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::FeatureMap;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// `c = a * b + beta * c` for strided `a: m x k`, `b: k x n`, row-major `c: m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    assert!(m * n <= c.len(), "gemm: output out of bounds");
    // SAFETY: every index touched is bounded by the asserts above; `c` does
    // not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Mish,
    Relu,
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x * tanh(softplus(x))`, using `tanh(ln(1 + e)) = n / (n + 2)` with
/// `n = e^x (e^x + 2)`.
#[inline]
pub fn mish(x: f64) -> f64 {
    if x > 20.0 {
        return x;
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    x * n / (n + 2.0)
}

#[inline]
fn mish_grad(x: f64) -> f64 {
    if x > 20.0 {
        return 1.0;
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    let d = n + 2.0;
    let t = n / d;
    let sech2 = 4.0 * (n + 1.0) / (d * d);
    t + x * sech2 * e / (1.0 + e)
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Mish => mish(x),
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Mish => mish_grad(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// 2-D convolution, stride 1, zero "same" padding. Weights are
/// `out x (kh * kw * in)` with input channel fastest, matching the column
/// layout produced by `im2col`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    /// He-normal weights (variance `2 / fan_in`), zero bias.
    pub fn init<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: (usize, usize), rng: &mut R) -> Self {
        let fan_in = in_channels * kernel.0 * kernel.1;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let weight = (0..out_channels * fan_in).map(|_| normal.sample(rng)).collect();
        Self { in_channels, out_channels, kernel, weight, bias: vec![0.0; out_channels] }
    }

    pub fn zeros_like(&self) -> Self {
        Self { weight: vec![0.0; self.weight.len()], bias: vec![0.0; self.bias.len()], ..*self }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    fn pointwise(&self) -> bool {
        self.kernel == (1, 1)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Multiply-accumulates for one sample on an `h x w` grid.
    pub fn macs(&self, h: usize, w: usize) -> usize {
        h * w * self.out_channels * self.fan_in()
    }

    fn im2col(&self, x: &FeatureMap) -> Vec<f64> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let cin = x.c;
        let k = kh * kw * cin;
        let mut cols = vec![0.0; x.pixels() * k];
        for n in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let row = ((n * x.h + y) * x.w + xx) * k;
                    for dy in 0..kh {
                        let sy = y as isize + dy as isize - ph as isize;
                        if sy < 0 || sy >= x.h as isize {
                            continue;
                        }
                        for dx in 0..kw {
                            let sx = xx as isize + dx as isize - pw as isize;
                            if sx < 0 || sx >= x.w as isize {
                                continue;
                            }
                            let src = ((n * x.h + sy as usize) * x.w + sx as usize) * cin;
                            let dst = row + (dy * kw + dx) * cin;
                            cols[dst..dst + cin].copy_from_slice(&x.data[src..src + cin]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], like: &FeatureMap) -> FeatureMap {
        let (kh, kw) = self.kernel;
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let cin = like.c;
        let k = kh * kw * cin;
        let mut out = like.same_shape(cin);
        for n in 0..like.n {
            for y in 0..like.h {
                for xx in 0..like.w {
                    let row = ((n * like.h + y) * like.w + xx) * k;
                    for dy in 0..kh {
                        let sy = y as isize + dy as isize - ph as isize;
                        if sy < 0 || sy >= like.h as isize {
                            continue;
                        }
                        for dx in 0..kw {
                            let sx = xx as isize + dx as isize - pw as isize;
                            if sx < 0 || sx >= like.w as isize {
                                continue;
                            }
                            let dst = ((n * like.h + sy as usize) * like.w + sx as usize) * cin;
                            let src = row + (dy * kw + dx) * cin;
                            for (o, &v) in out.data[dst..dst + cin].iter_mut().zip(&cols[src..src + cin]) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the output and, when `keep` is set, the column buffer needed
    /// by [`Conv2d::backward`].
    pub fn forward(&self, x: &FeatureMap, keep: bool) -> (FeatureMap, Option<Vec<f64>>) {
        assert_eq!(x.c, self.in_channels, "conv input channels");
        let p = x.pixels();
        let k = self.fan_in();
        let cols = if self.pointwise() { None } else { Some(self.im2col(x)) };
        let a = cols.as_deref().unwrap_or(&x.data);
        let mut out = x.same_shape(self.out_channels);
        for row in out.data.chunks_exact_mut(self.out_channels) {
            row.copy_from_slice(&self.bias);
        }
        // out (p x cout) += cols (p x k) * weight^T (k x cout)
        gemm(p, k, self.out_channels, a, (k, 1), &self.weight, (1, k), 1.0, &mut out.data);
        let tape = keep.then(|| cols.unwrap_or_else(|| x.data.clone()));
        (out, tape)
    }

    /// Accumulates weight/bias gradients into `grad`; returns the input
    /// gradient when `want_input` is set. Same padding means the input grid
    /// equals the output grid.
    pub fn backward(&self, cols: &[f64], dy: &FeatureMap, grad: &mut Conv2d, want_input: bool) -> Option<FeatureMap> {
        let p = dy.pixels();
        let k = self.fan_in();
        let cout = self.out_channels;
        // dW (cout x k) += dy^T (cout x p) * cols (p x k)
        gemm(cout, p, k, &dy.data, (1, cout), cols, (k, 1), 1.0, &mut grad.weight);
        for row in dy.data.chunks_exact(cout) {
            for (g, &d) in grad.bias.iter_mut().zip(row) {
                *g += d;
            }
        }
        if !want_input {
            return None;
        }
        let like = dy.same_shape(self.in_channels);
        // dcols (p x k) = dy (p x cout) * W (cout x k)
        let mut dcols = vec![0.0; p * k];
        gemm(p, cout, k, &dy.data, (cout, 1), &self.weight, (k, 1), 0.0, &mut dcols);
        if self.pointwise() {
            Some(FeatureMap { data: dcols, ..like })
        } else {
            Some(self.col2im(&dcols, &like))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Batch statistics and normalized activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BnTape {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    pub count: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn zeros_like(&self) -> Self {
        let c = self.channels();
        Self { gamma: vec![0.0; c], beta: vec![0.0; c], running_mean: vec![0.0; c], running_var: vec![0.0; c] }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels()
    }

    pub fn forward_eval(&self, x: &FeatureMap) -> FeatureMap {
        let c = self.channels();
        let scale: Vec<f64> = (0..c).map(|j| self.gamma[j] / (self.running_var[j] + BN_EPS).sqrt()).collect();
        let mut out = x.clone();
        for row in out.data.chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - self.running_mean[j]) * scale[j] + self.beta[j];
            }
        }
        out
    }

    pub fn forward_train(&self, x: &FeatureMap, keep: bool) -> (FeatureMap, BnTape) {
        let c = self.channels();
        let count = x.pixels();
        let nf = count as f64;
        let mut mean = vec![0.0; c];
        for row in x.data.chunks_exact(c) {
            for j in 0..c {
                mean[j] += row[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut var = vec![0.0; c];
        for row in x.data.chunks_exact(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= nf);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = x.data.clone();
        for row in xhat.chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let mut out = x.same_shape(c);
        for (o, h) in out.data.chunks_exact_mut(c).zip(xhat.chunks_exact(c)) {
            for j in 0..c {
                o[j] = self.gamma[j] * h[j] + self.beta[j];
            }
        }
        let tape = BnTape { mean, var, count, xhat: if keep { xhat } else { Vec::new() }, inv_std };
        (out, tape)
    }

    pub fn backward(&self, tape: &BnTape, dy: &FeatureMap, grad: &mut BatchNorm) -> FeatureMap {
        let c = self.channels();
        let nf = tape.count as f64;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for (d, h) in dy.data.chunks_exact(c).zip(tape.xhat.chunks_exact(c)) {
            for j in 0..c {
                sum_dy[j] += d[j];
                sum_dy_xhat[j] += d[j] * h[j];
            }
        }
        for j in 0..c {
            grad.gamma[j] += sum_dy_xhat[j];
            grad.beta[j] += sum_dy[j];
        }
        let mut dx = dy.same_shape(c);
        for ((o, d), h) in dx.data.chunks_exact_mut(c).zip(dy.data.chunks_exact(c)).zip(tape.xhat.chunks_exact(c)) {
            for j in 0..c {
                let k = self.gamma[j] * tape.inv_std[j] / nf;
                o[j] = k * (nf * d[j] - sum_dy[j] - h[j] * sum_dy_xhat[j]);
            }
        }
        dx
    }

    /// Exponential moving update of the running statistics (unbiased variance).
    pub fn commit(&mut self, tape: &BnTape) {
        let n = tape.count as f64;
        let correction = if tape.count > 1 { n / (n - 1.0) } else { 1.0 };
        for j in 0..self.channels() {
            self.running_mean[j] = (1.0 - BN_MOMENTUM) * self.running_mean[j] + BN_MOMENTUM * tape.mean[j];
            self.running_var[j] = (1.0 - BN_MOMENTUM) * self.running_var[j] + BN_MOMENTUM * tape.var[j] * correction;
        }
    }
}
