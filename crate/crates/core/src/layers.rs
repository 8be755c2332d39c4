//! Forward and backward rules of the sparse layers.
//!
//! Everything here works on dense feature matrices (rows = coordinates of a
//! sparse tensor) plus the kernel or pooling map that relates input and
//! output rows. The tape in [`crate::autodiff`] strings these together.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::coords::{CoordinateMap, SparseTensor};
use crate::error::{Error, Result};
use crate::kernel::{KernelMap, KernelRegion, PoolMap};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

/// Convolution weights: one `C_in x C_out` slab per region offset, stacked
/// vertically in region order.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub region: KernelRegion,
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ConvParams {
    pub fn new(region: KernelRegion, weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        let p = Self { region, weights, bias };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(region: KernelRegion, c_in: usize, c_out: usize) -> Self {
        let n = region.len();
        Self { region, weights: Array2::zeros((n * c_in, c_out)), bias: Array1::zeros(c_out) }
    }

    pub fn validate(&self) -> Result<()> {
        let slabs = self.region.len();
        if slabs == 0 || self.weights.nrows() % slabs != 0 {
            return Err(shape_err(format!(
                "{} weight rows do not split into {slabs} slabs",
                self.weights.nrows()
            )));
        }
        if self.bias.len() != self.weights.ncols() {
            return Err(shape_err("bias width differs from output channels".into()));
        }
        if self.weights.iter().chain(self.bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite convolution parameter".into()));
        }
        Ok(())
    }

    pub fn slabs(&self) -> usize {
        self.region.len()
    }

    pub fn c_in(&self) -> usize {
        self.weights.nrows() / self.region.len()
    }

    pub fn c_out(&self) -> usize {
        self.weights.ncols()
    }

    pub fn slab(&self, o: usize) -> ArrayView2<'_, f64> {
        slab(self.weights.view(), o, self.c_in())
    }
}

fn slab(weights: ArrayView2<'_, f64>, o: usize, c_in: usize) -> ArrayView2<'_, f64> {
    weights.slice_move(s![o * c_in..(o + 1) * c_in, ..])
}

/// Work counters of one convolution call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConvStats {
    /// Gathered matrix products issued, one per region offset.
    pub gathered_products: usize,
    pub pairs: usize,
}

fn check_conv(input: ArrayView2<f64>, weights: ArrayView2<f64>, bias_len: usize, kmap: &KernelMap) -> Result<usize> {
    let slabs = kmap.n_offsets();
    if slabs == 0 || weights.nrows() % slabs != 0 {
        return Err(shape_err(format!("{} weight rows for {slabs} offsets", weights.nrows())));
    }
    let c_in = weights.nrows() / slabs;
    if input.ncols() != c_in {
        return Err(shape_err(format!("input has {} channels, weights expect {c_in}", input.ncols())));
    }
    if input.nrows() != kmap.n_in() {
        return Err(shape_err(format!("input has {} rows, kernel map expects {}", input.nrows(), kmap.n_in())));
    }
    if bias_len != weights.ncols() {
        return Err(shape_err("bias width differs from output channels".into()));
    }
    Ok(c_in)
}

fn gather(x: ArrayView2<f64>, rows: impl Iterator<Item = usize>, n: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, x.ncols()));
    for (mut dst, r) in out.outer_iter_mut().zip(rows) {
        dst.assign(&x.row(r));
    }
    out
}

/// `out[j] = bias + sum_o sum_{(i,j) in kmap[o]} in[i] * W_o`.
pub fn conv_forward(input: ArrayView2<f64>, params: &ConvParams, kmap: &KernelMap) -> Result<Array2<f64>> {
    conv_forward_with_stats(input, params, kmap).map(|(out, _)| out)
}

pub fn conv_forward_with_stats(
    input: ArrayView2<f64>,
    params: &ConvParams,
    kmap: &KernelMap,
) -> Result<(Array2<f64>, ConvStats)> {
    if params.region.len() != kmap.n_offsets() {
        return Err(shape_err("kernel map built for a different region".into()));
    }
    conv_forward_raw(input, params.weights.view(), params.bias.view(), kmap)
}

pub(crate) fn conv_forward_raw(
    input: ArrayView2<f64>,
    weights: ArrayView2<f64>,
    bias: ArrayView1<f64>,
    kmap: &KernelMap,
) -> Result<(Array2<f64>, ConvStats)> {
    let c_in = check_conv(input, weights, bias.len(), kmap)?;
    let c_out = weights.ncols();
    let products: Vec<Option<Array2<f64>>> = (0..kmap.n_offsets())
        .into_par_iter()
        .map(|o| {
            let w = slab(weights, o, c_in);
            let pairs = kmap.pairs(o);
            if kmap.is_identity(o) {
                Some(input.dot(&w))
            } else if pairs.is_empty() {
                None
            } else {
                let x = gather(input, pairs.iter().map(|&(i, _)| i as usize), pairs.len());
                Some(x.dot(&w))
            }
        })
        .collect();

    let mut out = Array2::zeros((kmap.n_out(), c_out));
    out.outer_iter_mut().for_each(|mut r| r.assign(&bias));
    // Scatter in offset order so the reduction order is fixed.
    for (o, prod) in products.iter().enumerate() {
        let Some(prod) = prod else { continue };
        if kmap.is_identity(o) {
            out += prod;
        } else {
            for (k, &(_, j)) in kmap.pairs(o).iter().enumerate() {
                let mut dst = out.row_mut(j as usize);
                dst += &prod.row(k);
            }
        }
    }
    let stats = ConvStats { gathered_products: kmap.n_offsets(), pairs: kmap.total_pairs() };
    Ok((out, stats))
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Array2<f64>,
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Reverse-mode rule of [`conv_forward`].
pub fn conv_backward(
    grad_out: ArrayView2<f64>,
    input: ArrayView2<f64>,
    params: &ConvParams,
    kmap: &KernelMap,
) -> Result<ConvGrads> {
    if params.region.len() != kmap.n_offsets() {
        return Err(shape_err("kernel map built for a different region".into()));
    }
    conv_backward_raw(grad_out, input, params.weights.view(), kmap)
}

pub(crate) fn conv_backward_raw(
    grad_out: ArrayView2<f64>,
    input: ArrayView2<f64>,
    weights: ArrayView2<f64>,
    kmap: &KernelMap,
) -> Result<ConvGrads> {
    let c_in = check_conv(input, weights, weights.ncols(), kmap)?;
    if grad_out.dim() != (kmap.n_out(), weights.ncols()) {
        return Err(shape_err(format!(
            "gradient shape {:?} differs from output shape {:?}",
            grad_out.dim(),
            (kmap.n_out(), weights.ncols())
        )));
    }
    let per_offset: Vec<Option<(Array2<f64>, Array2<f64>)>> = (0..kmap.n_offsets())
        .into_par_iter()
        .map(|o| {
            let w = slab(weights, o, c_in);
            let pairs = kmap.pairs(o);
            if kmap.is_identity(o) {
                Some((input.t().dot(&grad_out), grad_out.dot(&w.t())))
            } else if pairs.is_empty() {
                None
            } else {
                let x = gather(input, pairs.iter().map(|&(i, _)| i as usize), pairs.len());
                let g = gather(grad_out, pairs.iter().map(|&(_, j)| j as usize), pairs.len());
                Some((x.t().dot(&g), g.dot(&w.t())))
            }
        })
        .collect();

    let mut grad_w = Array2::zeros(weights.raw_dim());
    let mut grad_in = Array2::zeros(input.raw_dim());
    for (o, item) in per_offset.into_iter().enumerate() {
        let Some((gw, gx)) = item else { continue };
        grad_w.slice_mut(s![o * c_in..(o + 1) * c_in, ..]).assign(&gw);
        if kmap.is_identity(o) {
            grad_in += &gx;
        } else {
            for (k, &(i, _)) in kmap.pairs(o).iter().enumerate() {
                let mut dst = grad_in.row_mut(i as usize);
                dst += &gx.row(k);
            }
        }
    }
    Ok(ConvGrads { input: grad_in, weights: grad_w, bias: grad_out.sum_axis(Axis(0)) })
}

/// `y = x W + b` applied to every row.
pub fn linear_forward(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Result<Array2<f64>> {
    if x.ncols() != w.nrows() || w.ncols() != b.len() {
        return Err(shape_err(format!("linear: {:?} x {:?} + {}", x.dim(), w.dim(), b.len())));
    }
    Ok(x.dot(&w) + &b)
}

/// Returns (grad_x, grad_w, grad_b).
pub fn linear_backward(
    grad_out: ArrayView2<f64>,
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    (grad_out.dot(&w.t()), x.t().dot(&grad_out), grad_out.sum_axis(Axis(0)))
}

fn check_pool_rows(rows: usize, expected: usize, what: &str) -> Result<()> {
    if rows != expected {
        return Err(shape_err(format!("{what}: {rows} rows, pooling map expects {expected}")));
    }
    Ok(())
}

/// `out[j] = sum_{i -> j} in[i]`.
pub fn sum_pool_forward(input: ArrayView2<f64>, pool: &PoolMap) -> Result<Array2<f64>> {
    check_pool_rows(input.nrows(), pool.n_in(), "pool input")?;
    let mut out = Array2::zeros((pool.n_out(), input.ncols()));
    for (row, &p) in input.outer_iter().zip(pool.parents()) {
        let mut dst = out.row_mut(p as usize);
        dst += &row;
    }
    Ok(out)
}

/// `grad_in[i] = grad_out[parent(i)]`.
pub fn sum_pool_backward(grad_out: ArrayView2<f64>, pool: &PoolMap) -> Result<Array2<f64>> {
    sum_unpool(grad_out, pool)
}

/// Transpose of [`sum_pool_forward`]: each fine row copies its parent cell.
pub fn sum_unpool(coarse: ArrayView2<f64>, pool: &PoolMap) -> Result<Array2<f64>> {
    check_pool_rows(coarse.nrows(), pool.n_out(), "unpool input")?;
    Ok(gather(coarse, pool.parents().iter().map(|&p| p as usize), pool.n_in()))
}

/// Gradient of [`sum_unpool`] is sum pooling.
pub fn sum_unpool_backward(grad_fine: ArrayView2<f64>, pool: &PoolMap) -> Result<Array2<f64>> {
    sum_pool_forward(grad_fine, pool)
}

#[derive(Clone, Debug)]
pub struct BatchNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }
}

/// Intermediate values kept by a normalization for its backward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Per-channel standardization over all rows: returns normalized values,
/// the cache, the batch mean and the biased batch variance.
pub fn normalize_columns(x: ArrayView2<f64>, eps: f64) -> Result<(NormCache, Array1<f64>, Array1<f64>)> {
    if x.nrows() == 0 {
        return Err(Error::Empty("normalization over zero rows"));
    }
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let centered = &x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let xhat = centered * &inv_std;
    Ok((NormCache { xhat, inv_std }, mean, var))
}

/// Backward of [`normalize_columns`] given the gradient w.r.t. `xhat`.
pub fn normalize_columns_backward(grad_xhat: ArrayView2<f64>, cache: &NormCache) -> Array2<f64> {
    let n = grad_xhat.nrows() as f64;
    let sum_g = grad_xhat.sum_axis(Axis(0));
    let sum_gx = (&grad_xhat * &cache.xhat).sum_axis(Axis(0));
    let mut dx = Array2::zeros(grad_xhat.raw_dim());
    for ((mut out, g), xh) in dx.outer_iter_mut().zip(grad_xhat.outer_iter()).zip(cache.xhat.outer_iter()) {
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .and(&sum_g)
            .and(&sum_gx)
            .and(&cache.inv_std)
            .for_each(|o, &g, &xh, &sg, &sgx, &is| {
                *o = is / n * (n * g - sg - xh * sgx);
            });
    }
    dx
}

/// Train-mode batch norm. Updates the running statistics in `bn`.
pub fn batch_norm_forward_train(x: ArrayView2<f64>, bn: &mut BatchNormParams) -> Result<(Array2<f64>, NormCache)> {
    let (y, cache, mean, var) = batch_norm_train_pure(x, bn.gamma.view(), bn.beta.view(), bn.epsilon)?;
    update_running_stats(bn, &mean, &var, x.nrows());
    Ok((y, cache))
}

pub(crate) fn update_running_stats(bn: &mut BatchNormParams, mean: &Array1<f64>, var: &Array1<f64>, n: usize) {
    let unbiased = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
    let m = bn.momentum;
    bn.running_mean = &bn.running_mean * (1.0 - m) + mean * m;
    bn.running_var = &bn.running_var * (1.0 - m) + var * (m * unbiased);
}

/// Batch statistics forward without touching running statistics.
pub fn batch_norm_train_pure(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    eps: f64,
) -> Result<(Array2<f64>, NormCache, Array1<f64>, Array1<f64>)> {
    if x.ncols() != gamma.len() || gamma.len() != beta.len() {
        return Err(shape_err(format!("batch norm over {} channels with {} gammas", x.ncols(), gamma.len())));
    }
    let (cache, mean, var) = normalize_columns(x, eps)?;
    let y = &cache.xhat * &gamma + &beta;
    Ok((y, cache, mean, var))
}

/// Returns (grad_x, grad_gamma, grad_beta) for the train-mode forward.
pub fn batch_norm_backward_train(
    grad_y: ArrayView2<f64>,
    cache: &NormCache,
    gamma: ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let grad_gamma = (&grad_y * &cache.xhat).sum_axis(Axis(0));
    let grad_beta = grad_y.sum_axis(Axis(0));
    let grad_xhat = &grad_y * &gamma;
    (normalize_columns_backward(grad_xhat.view(), cache), grad_gamma, grad_beta)
}

/// Inference-mode batch norm with the running statistics.
pub fn batch_norm_forward_eval(x: ArrayView2<f64>, bn: &BatchNormParams) -> Result<Array2<f64>> {
    if x.ncols() != bn.gamma.len() {
        return Err(shape_err("batch norm channel mismatch".into()));
    }
    let scale = (&bn.gamma / &bn.running_var.mapv(|v| (v + bn.epsilon).sqrt())).to_owned();
    let shift = &bn.beta - &(&bn.running_mean * &scale);
    Ok(&x * &scale + &shift)
}

pub fn relu_forward(x: ArrayView2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(grad_out: ArrayView2<f64>, x: ArrayView2<f64>) -> Array2<f64> {
    let mut g = grad_out.to_owned();
    Zip::from(&mut g).and(&x).for_each(|g, &x| {
        if x <= 0.0 {
            *g = 0.0;
        }
    });
    g
}

fn same_map(a: &Arc<CoordinateMap>, b: &Arc<CoordinateMap>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

/// Elementwise sum of two tensors on the same coordinate map.
pub fn residual_add(a: &SparseTensor, b: &SparseTensor) -> Result<SparseTensor> {
    if !same_map(a.map(), b.map()) || a.stride() != b.stride() {
        return Err(Error::CoordinateMapMismatch);
    }
    if a.channels() != b.channels() {
        return Err(shape_err(format!("residual add of {} and {} channels", a.channels(), b.channels())));
    }
    a.with_features(a.features() + b.features())
}

/// Column means: a `1 x C` matrix.
pub fn global_avg_pool(x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.nrows() == 0 {
        return Err(Error::Empty("global pooling of an empty tensor"));
    }
    let mean = x.sum_axis(Axis(0)) / x.nrows() as f64;
    Ok(mean.insert_axis(Axis(0)))
}

pub fn global_avg_pool_backward(grad_out: ArrayView2<f64>, rows: usize) -> Array2<f64> {
    let g = grad_out.row(0).to_owned() / rows as f64;
    let mut out = Array2::zeros((rows, g.len()));
    out.outer_iter_mut().for_each(|mut r| r.assign(&g));
    out
}
