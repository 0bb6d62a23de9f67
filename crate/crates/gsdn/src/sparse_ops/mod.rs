//! Sparse neural-network layers built on kernel maps.
//!
//! Every convolution is realized as gather → per-offset matrix product →
//! scatter-add. The numeric kernels here are shared by the value-level API
//! below and by the autograd tape.

mod kernel_map;

use std::sync::Arc;

pub use kernel_map::{build_kernel_map, kernel_offsets, output_support, ConvKind, KernelMap};

use crate::error::{Error, Result};
use crate::lattice::SparseTensor;
use crate::scalar::{Matrix, Real};

/// Weights of a cubic sparse convolution, laid out `[offset][c_in][c_out]`.
#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Stride of the tensors this layer consumes.
    pub in_stride: i32,
    pub weights: Vec<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn new(kernel_size: usize, in_channels: usize, out_channels: usize, in_stride: i32, weights: Vec<T>) -> Result<Self> {
        let vol = kernel_offsets(kernel_size)?.len();
        if weights.len() != vol * in_channels * out_channels {
            return Err(Error::Shape(format!(
                "kernel {kernel_size}^3 x {in_channels} x {out_channels} needs {} weights, got {}",
                vol * in_channels * out_channels,
                weights.len()
            )));
        }
        Ok(Self {
            kernel_size,
            in_channels,
            out_channels,
            in_stride,
            weights,
        })
    }

    /// Center tap is the identity, every other tap zero.
    pub fn identity(channels: usize, in_stride: i32) -> Self {
        let vol = 27;
        let mut w = vec![T::zero(); vol * channels * channels];
        for c in 0..channels {
            w[13 * channels * channels + c * channels + c] = T::one();
        }
        Self::new(3, channels, channels, in_stride, w).expect("identity shape")
    }

    fn check(&self, t: &SparseTensor<T>) -> Result<()> {
        if t.stride() != self.in_stride {
            return Err(Error::Contract(format!(
                "layer expects stride {}, tensor has stride {}",
                self.in_stride,
                t.stride()
            )));
        }
        if t.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "layer expects {} input channels, tensor has {}",
                self.in_channels,
                t.channels()
            )));
        }
        Ok(())
    }
}

/// Forward sparse convolution; `stride_out_factor` 1 keeps the support,
/// 2 decimates it to twice the stride.
pub fn conv<T: Real>(t: &SparseTensor<T>, p: &ConvParams<T>, stride_out_factor: u32) -> Result<SparseTensor<T>> {
    p.check(t)?;
    let kind = match stride_out_factor {
        1 => ConvKind::Submanifold,
        2 => ConvKind::Strided,
        f => return Err(Error::Contract(format!("stride factor must be 1 or 2, got {f}"))),
    };
    let (out, map) = build_kernel_map(t.support(), kind, p.kernel_size)?;
    let feats = conv_forward(&map, t.feats(), &p.weights, p.in_channels, p.out_channels);
    SparseTensor::new(out, feats)
}

/// Generative transposed convolution: halves the stride and expands every
/// input coordinate to its full kernel stencil; overlapping stencils sum.
pub fn conv_transpose_generative<T: Real>(t: &SparseTensor<T>, p: &ConvParams<T>) -> Result<SparseTensor<T>> {
    p.check(t)?;
    if p.kernel_size != 3 {
        return Err(Error::Contract(format!(
            "generative transposed convolution uses kernel size 3, got {}",
            p.kernel_size
        )));
    }
    let (out, map) = build_kernel_map(t.support(), ConvKind::Transposed, p.kernel_size)?;
    let feats = conv_forward(&map, t.feats(), &p.weights, p.in_channels, p.out_channels);
    SparseTensor::new(out, feats)
}

/// Keeps rows whose mask entry is true, preserving order.
pub fn prune<T: Real>(t: &SparseTensor<T>, keep: &[bool]) -> Result<SparseTensor<T>> {
    let (support, rows) = t.support().filter(keep)?;
    SparseTensor::new(Arc::new(support), t.feats().gather_rows(&rows))
}

pub fn relu<T: Real>(t: &SparseTensor<T>) -> SparseTensor<T> {
    SparseTensor::new(t.support().clone(), t.feats().map(|v| v.max(T::zero()))).expect("same shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel batch-normalization state.
#[derive(Clone, Debug)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Real> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }
}

/// Normalizes features over all rows; the support is unchanged.
pub fn batch_norm<T: Real>(t: &SparseTensor<T>, p: &mut BatchNormParams<T>, mode: BnMode) -> Result<SparseTensor<T>> {
    let feats = match mode {
        BnMode::Train => {
            let fw = bn_train_forward(t.feats(), &p.gamma, &p.beta, p.eps)?;
            update_running(&mut p.running_mean, &mut p.running_var, &fw.mean, &fw.var, p.momentum);
            fw.output
        }
        BnMode::Eval => bn_eval_forward(t.feats(), &p.gamma, &p.beta, &p.running_mean, &p.running_var, p.eps),
    };
    SparseTensor::new(t.support().clone(), feats)
}

pub(crate) fn update_running<T: Real>(rm: &mut [T], rv: &mut [T], mean: &[T], var: &[T], momentum: f64) {
    let m = T::lit(momentum);
    let keep = T::one() - m;
    for c in 0..rm.len() {
        rm[c] = keep * rm[c] + m * mean[c];
        rv[c] = keep * rv[c] + m * var[c];
    }
}

// ---------------------------------------------------------------------------
// numeric kernels

/// `out[o] += W[δ]·in[i]` over every pair of every offset.
pub fn conv_forward<T: Real>(map: &KernelMap, input: &Matrix<T>, weights: &[T], cin: usize, cout: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(map.out_rows, cout);
    let wsize = cin * cout;
    let mut gathered = Vec::new();
    let mut prod = Vec::new();
    for (k, pairs) in map.pairs.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let w = &weights[k * wsize..(k + 1) * wsize];
        if map.identity[k] {
            T::gemm(pairs.len(), cin, cout, T::one(), input.as_slice(), false, w, false, T::one(), out.as_mut_slice());
            continue;
        }
        gathered.clear();
        for &(i, _) in pairs {
            gathered.extend_from_slice(input.row(i as usize));
        }
        prod.clear();
        prod.resize(pairs.len() * cout, T::zero());
        T::gemm(pairs.len(), cin, cout, T::one(), &gathered, false, w, false, T::zero(), &mut prod);
        for (n, &(_, o)) in pairs.iter().enumerate() {
            for (dst, &v) in out.row_mut(o as usize).iter_mut().zip(&prod[n * cout..(n + 1) * cout]) {
                *dst += v;
            }
        }
    }
    out
}

/// Gradient w.r.t. the input features: `g_in[i] += W[δ]ᵀ·g_out[o]`.
pub fn conv_backward_input<T: Real>(map: &KernelMap, grad_out: &Matrix<T>, weights: &[T], cin: usize, cout: usize) -> Matrix<T> {
    let mut gin = Matrix::zeros(map.in_rows, cin);
    let wsize = cin * cout;
    let mut gathered = Vec::new();
    let mut prod = Vec::new();
    for (k, pairs) in map.pairs.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let w = &weights[k * wsize..(k + 1) * wsize];
        if map.identity[k] {
            T::gemm(pairs.len(), cout, cin, T::one(), grad_out.as_slice(), false, w, true, T::one(), gin.as_mut_slice());
            continue;
        }
        gathered.clear();
        for &(_, o) in pairs {
            gathered.extend_from_slice(grad_out.row(o as usize));
        }
        prod.clear();
        prod.resize(pairs.len() * cin, T::zero());
        T::gemm(pairs.len(), cout, cin, T::one(), &gathered, false, w, true, T::zero(), &mut prod);
        for (n, &(i, _)) in pairs.iter().enumerate() {
            for (dst, &v) in gin.row_mut(i as usize).iter_mut().zip(&prod[n * cin..(n + 1) * cin]) {
                *dst += v;
            }
        }
    }
    gin
}

/// Gradient w.r.t. the weights: `g_W[δ] = Σ in[i]ᵀ·g_out[o]`.
pub fn conv_backward_weights<T: Real>(map: &KernelMap, input: &Matrix<T>, grad_out: &Matrix<T>, cin: usize, cout: usize) -> Vec<T> {
    let wsize = cin * cout;
    let mut gw = vec![T::zero(); map.volume() * wsize];
    let mut gi = Vec::new();
    let mut go = Vec::new();
    for (k, pairs) in map.pairs.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let dst = &mut gw[k * wsize..(k + 1) * wsize];
        if map.identity[k] {
            T::gemm(cin, pairs.len(), cout, T::one(), input.as_slice(), true, grad_out.as_slice(), false, T::zero(), dst);
            continue;
        }
        gi.clear();
        go.clear();
        for &(i, o) in pairs {
            gi.extend_from_slice(input.row(i as usize));
            go.extend_from_slice(grad_out.row(o as usize));
        }
        T::gemm(cin, pairs.len(), cout, T::one(), &gi, true, &go, false, T::zero(), dst);
    }
    gw
}

pub(crate) struct BnForward<T> {
    pub output: Matrix<T>,
    pub xhat: Matrix<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Train-mode normalization with the biased in-batch variance.
pub(crate) fn bn_train_forward<T: Real>(x: &Matrix<T>, gamma: &[T], beta: &[T], eps: f64) -> Result<BnForward<T>> {
    let (n, c) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::Contract(format!("train-mode batch norm needs at least 2 rows, got {n}")));
    }
    let nf = T::lit(n as f64);
    let mut mean = vec![T::zero(); c];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut var = vec![T::zero(); c];
    for r in 0..n {
        for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= nf);
    let e = T::lit(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + e).sqrt()).collect();
    let mut xhat = Matrix::zeros(n, c);
    let mut output = Matrix::zeros(n, c);
    for r in 0..n {
        let xr = x.row(r);
        let hr = xhat.row_mut(r);
        for j in 0..c {
            hr[j] = (xr[j] - mean[j]) * inv_std[j];
        }
        let hr = hr.to_vec();
        let yr = output.row_mut(r);
        for j in 0..c {
            yr[j] = gamma[j] * hr[j] + beta[j];
        }
    }
    Ok(BnForward {
        output,
        xhat,
        inv_std,
        mean,
        var,
    })
}

/// Returns `(grad_x, grad_gamma, grad_beta)` for train-mode batch norm.
pub(crate) fn bn_train_backward<T: Real>(
    grad_out: &Matrix<T>,
    xhat: &Matrix<T>,
    inv_std: &[T],
    gamma: &[T],
) -> (Matrix<T>, Vec<T>, Vec<T>) {
    let (n, c) = (grad_out.rows(), grad_out.cols());
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for r in 0..n {
        for j in 0..c {
            let g = grad_out.get(r, j);
            gg[j] += g * xhat.get(r, j);
            gb[j] += g;
        }
    }
    let nf = T::lit(n as f64);
    let mut gx = Matrix::zeros(n, c);
    for r in 0..n {
        let row = gx.row_mut(r);
        for j in 0..c {
            // d xhat = g·γ; Σ d xhat = γ·gb; Σ d xhat·xhat = γ·gg
            let dxh = grad_out.get(r, j) * gamma[j];
            row[j] = inv_std[j] / nf * (nf * dxh - gamma[j] * gb[j] - xhat.get(r, j) * gamma[j] * gg[j]);
        }
    }
    (gx, gg, gb)
}

pub(crate) fn bn_eval_forward<T: Real>(x: &Matrix<T>, gamma: &[T], beta: &[T], mean: &[T], var: &[T], eps: f64) -> Matrix<T> {
    let e = T::lit(eps);
    let scale: Vec<T> = gamma.iter().zip(var).map(|(&g, &v)| g / (v + e).sqrt()).collect();
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (j, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = (*v - mean[j]) * scale[j] + beta[j];
        }
    }
    out
}
