//! Reverse-mode differentiation over dense feature matrices.
//!
//! A [`Tape`] records every operation of one forward pass together with a
//! closure mapping the output gradient to parent gradients. Parameters live
//! in a [`ParamStore`] outside the tape so the tape can be thrown away after
//! each step; [`Tape::backward`] adds parameter gradients into the store.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::kernel::{KernelMap, PoolMap};
use crate::layers;

/// Handle of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors and their gradient accumulators.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    grads: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.grads.push(Array2::zeros(value.raw_dim()));
        self.values.push(value);
        self.names.push(name);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.0]
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn grads(&self) -> &[Array2<f64>] {
        &self.grads
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Values and gradients split for an optimizer update.
    pub fn split_mut(&mut self) -> (&mut [Array2<f64>], &[Array2<f64>]) {
        (&mut self.values, &self.grads)
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Array2<f64>, &[&Array2<f64>]) -> Result<Vec<Array2<f64>>>>;

struct Node {
    value: Array2<f64>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
}

/// Batch statistics produced by a train-mode batch norm on the tape.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub rows: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node { value, parents, backward, param: None });
        Var(self.nodes.len() - 1)
    }

    fn op<F>(&mut self, value: Array2<f64>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Array2<f64>, &[&Array2<f64>]) -> Result<Vec<Array2<f64>>> + 'static,
    {
        self.push(value, parents.iter().map(|v| v.0).collect(), Some(Box::new(backward)))
    }

    /// Input or constant.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Vec::new(), None)
    }

    /// Parameter leaf; its gradient flows into `store` on backward.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Vec::new(), None);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass w.r.t. `v` (zeros if unreached).
    pub fn grad(&self, v: Var) -> Array2<f64> {
        self.grads
            .get(v.0)
            .and_then(Option::clone)
            .unwrap_or_else(|| Array2::zeros(self.nodes[v.0].value.raw_dim()))
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Var, kmap: Arc<KernelMap>) -> Result<Var> {
        let (out, _) = layers::conv_forward_raw(self.value(x).view(), self.value(w).view(), self.value(b).row(0), &kmap)?;
        Ok(self.op(out, &[x, w, b], move |g, p| {
            let grads = layers::conv_backward_raw(g.view(), p[0].view(), p[1].view(), &kmap)?;
            Ok(vec![grads.input, grads.weights, grads.bias.insert_axis(Axis(0))])
        }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = layers::linear_forward(self.value(x).view(), self.value(w).view(), self.value(b).row(0))?;
        Ok(self.op(out, &[x, w, b], |g, p| {
            let (gx, gw, gb) = layers::linear_backward(g.view(), p[0].view(), p[1].view());
            Ok(vec![gx, gw, gb.insert_axis(Axis(0))])
        }))
    }

    pub fn sum_pool(&mut self, x: Var, pool: Arc<PoolMap>) -> Result<Var> {
        let out = layers::sum_pool_forward(self.value(x).view(), &pool)?;
        Ok(self.op(out, &[x], move |g, _| Ok(vec![layers::sum_pool_backward(g.view(), &pool)?])))
    }

    pub fn sum_unpool(&mut self, x: Var, pool: Arc<PoolMap>) -> Result<Var> {
        let out = layers::sum_unpool(self.value(x).view(), &pool)?;
        Ok(self.op(out, &[x], move |g, _| Ok(vec![layers::sum_unpool_backward(g.view(), &pool)?])))
    }

    /// Batch norm with batch statistics. The caller folds the returned
    /// statistics into its running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (y, cache, mean, var) = layers::batch_norm_train_pure(
            self.value(x).view(),
            self.value(gamma).row(0),
            self.value(beta).row(0),
            eps,
        )?;
        let stats = BatchStats { mean, var, rows: y.nrows() };
        let out = self.op(y, &[x, gamma, beta], move |g, p| {
            let (gx, gg, gb) = layers::batch_norm_backward_train(g.view(), &cache, p[1].row(0));
            Ok(vec![gx, gg.insert_axis(Axis(0)), gb.insert_axis(Axis(0))])
        });
        Ok((out, stats))
    }

    /// Batch norm with fixed statistics: an affine map per channel.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<f64>,
        running_var: &Array1<f64>,
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.ncols() != running_mean.len() {
            return Err(Error::Shape("batch norm channel mismatch".into()));
        }
        let inv_std = running_var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = (xv - running_mean) * &inv_std;
        let y = &xhat * &self.value(gamma).row(0) + &self.value(beta).row(0);
        Ok(self.op(y, &[x, gamma, beta], move |g, p| {
            let gx = g * &(&p[1].row(0) * &inv_std);
            let gg = (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
            let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
            Ok(vec![gx, gg, gb])
        }))
    }

    /// Per-channel normalization over the rows of one instance, no affine.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (cache, _, _) = layers::normalize_columns(self.value(x).view(), eps)?;
        let y = cache.xhat.clone();
        Ok(self.op(y, &[x], move |g, _| Ok(vec![layers::normalize_columns_backward(g.view(), &cache)])))
    }

    /// Instance norm applied separately to each row range (one per instance
    /// of a batch).
    pub fn instance_norm_segments(&mut self, x: Var, segments: &[std::ops::Range<usize>], eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let mut y = Array2::zeros(xv.raw_dim());
        let mut caches = Vec::with_capacity(segments.len());
        for seg in segments {
            let (cache, _, _) = layers::normalize_columns(xv.slice(ndarray::s![seg.clone(), ..]), eps)?;
            y.slice_mut(ndarray::s![seg.clone(), ..]).assign(&cache.xhat);
            caches.push((seg.clone(), cache));
        }
        Ok(self.op(y, &[x], move |g, _| {
            let mut gx = Array2::zeros(g.raw_dim());
            for (seg, cache) in &caches {
                let part = layers::normalize_columns_backward(g.slice(ndarray::s![seg.clone(), ..]), cache);
                gx.slice_mut(ndarray::s![seg.clone(), ..]).assign(&part);
            }
            Ok(vec![gx])
        }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = layers::relu_forward(self.value(x).view());
        self.op(y, &[x], |g, p| Ok(vec![layers::relu_backward(g.view(), p[0].view())]))
    }

    /// Elementwise sum; both operands must have the same shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(Error::Shape(format!("add of {:?} and {:?}", va.dim(), vb.dim())));
        }
        let y = va + vb;
        Ok(self.op(y, &[a, b], |g, _| Ok(vec![g.clone(), g.clone()])))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let y = self.value(x) * k;
        self.op(y, &[x], move |g, _| Ok(vec![g * k]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let rows = self.value(x).nrows();
        let y = layers::global_avg_pool(self.value(x).view())?;
        Ok(self.op(y, &[x], move |g, _| Ok(vec![layers::global_avg_pool_backward(g.view(), rows)])))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Array2::from_elem((1, 1), self.value(x).sum());
        self.op(y, &[x], |g, p| Ok(vec![Array2::from_elem(p[0].raw_dim(), g[[0, 0]])]))
    }

    /// `sum(x * c)` for a constant `c`; used to project outputs to a scalar.
    pub fn dot_const(&mut self, x: Var, c: Array2<f64>) -> Result<Var> {
        if self.value(x).dim() != c.dim() {
            return Err(Error::Shape("dot_const shape mismatch".into()));
        }
        let y = Array2::from_elem((1, 1), (self.value(x) * &c).sum());
        Ok(self.op(y, &[x], move |g, _| Ok(vec![&c * g[[0, 0]]])))
    }

    /// Mean binary cross-entropy of `N x 1` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[bool]) -> Result<Var> {
        let z = column(self.value(logits), labels.len())?;
        let loss = cross_entropy(z.view(), labels)?;
        let n = labels.len() as f64;
        let labels = labels.to_vec();
        Ok(self.op(Array2::from_elem((1, 1), loss), &[logits], move |g, p| {
            let g0 = g[[0, 0]];
            let grad = Array2::from_shape_fn(p[0].raw_dim(), |(i, _)| {
                g0 * (sigmoid(p[0][[i, 0]]) - f64::from(u8::from(labels[i]))) / n
            });
            Ok(vec![grad])
        }))
    }

    /// Class-balanced binary cross-entropy of `N x 1` logits.
    pub fn balanced_cross_entropy(&mut self, logits: Var, labels: &[bool]) -> Result<Var> {
        let z = column(self.value(logits), labels.len())?;
        let loss = balanced_cross_entropy(z.view(), labels)?;
        let (wp, wn) = balanced_weights(labels);
        let labels = labels.to_vec();
        Ok(self.op(Array2::from_elem((1, 1), loss), &[logits], move |g, p| {
            let g0 = g[[0, 0]];
            let grad = Array2::from_shape_fn(p[0].raw_dim(), |(i, _)| {
                let s = sigmoid(p[0][[i, 0]]);
                if labels[i] {
                    g0 * wp * (s - 1.0)
                } else {
                    g0 * wn * s
                }
            });
            Ok(vec![grad])
        }))
    }

    /// Backpropagate from a scalar node. Parameter gradients are added to
    /// `store` (call [`ParamStore::zero_grad`] between steps).
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("loss must be scalar, got {:?}", self.value(loss).dim())));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        grads[loss.0] = Some(Array2::ones(self.value(loss).raw_dim()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(back) = &node.backward {
                let parents: Vec<&Array2<f64>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let pg = back(&g, &parents)?;
                for (&p, gp) in node.parents.iter().zip(pg) {
                    match &mut grads[p] {
                        Some(acc) => *acc += &gp,
                        slot @ None => *slot = Some(gp),
                    }
                }
            }
            if let Some(pid) = node.param {
                store.grads[pid.0] += &g;
            }
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

fn column(v: &Array2<f64>, n: usize) -> Result<Array1<f64>> {
    if v.ncols() != 1 || v.nrows() != n {
        return Err(Error::Shape(format!("expected {n} x 1 logits, got {:?}", v.dim())));
    }
    Ok(v.column(0).to_owned())
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-[y log s(z) + (1-y) log(1-s(z))]` in the overflow-free form
/// `max(z,0) - y z + log(1 + exp(-|z|))`.
fn bce_term(z: f64, y: bool) -> f64 {
    z.max(0.0) - if y { z } else { 0.0 } + (-z.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy over rows.
pub fn cross_entropy(logits: ndarray::ArrayView1<f64>, labels: &[bool]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::Shape("logits and labels differ in length".into()));
    }
    if labels.is_empty() {
        return Err(Error::Empty("cross-entropy over zero rows"));
    }
    let s: f64 = logits.iter().zip(labels).map(|(&z, &y)| bce_term(z, y)).sum();
    Ok(s / labels.len() as f64)
}

// Per-row weights of the positive and negative terms.
fn balanced_weights(labels: &[bool]) -> (f64, f64) {
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    match (pos, neg) {
        (0, n) => (0.0, 1.0 / n as f64),
        (p, 0) => (1.0 / p as f64, 0.0),
        (p, n) => (0.5 / p as f64, 0.5 / n as f64),
    }
}

/// Average of the per-class mean cross-entropies. A batch with only one
/// class present uses that class's mean alone.
pub fn balanced_cross_entropy(logits: ndarray::ArrayView1<f64>, labels: &[bool]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::Shape("logits and labels differ in length".into()));
    }
    if labels.is_empty() {
        return Err(Error::Empty("balanced cross-entropy over zero rows"));
    }
    let (wp, wn) = balanced_weights(labels);
    Ok(logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| bce_term(z, y) * if y { wp } else { wn })
        .sum())
}

fn check_shapes(params: &[Array2<f64>], grads: &[Array2<f64>], state: &[Array2<f64>]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::Shape("optimizer: parameter/gradient count mismatch".into()));
    }
    for ((p, g), s) in params.iter().zip(grads).zip(state) {
        if p.dim() != g.dim() || p.dim() != s.dim() {
            return Err(Error::Shape(format!("optimizer: shape {:?} vs {:?}", p.dim(), g.dim())));
        }
    }
    Ok(())
}

fn zeros_like(params: &[Array2<f64>]) -> Vec<Array2<f64>> {
    params.iter().map(|p| Array2::zeros(p.raw_dim())).collect()
}

#[derive(Clone, Debug)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug)]
pub struct SgdState {
    pub velocity: Vec<Array2<f64>>,
    pub steps: u64,
}

impl SgdState {
    pub fn new(params: &[Array2<f64>]) -> Self {
        Self { velocity: zeros_like(params), steps: 0 }
    }
}

/// `v <- momentum * v + (g + wd * p)`, `p <- p - lr * v`.
pub fn sgd_step(params: &mut [Array2<f64>], grads: &[Array2<f64>], cfg: &SgdConfig, state: &mut SgdState) -> Result<()> {
    check_shapes(params, grads, &state.velocity)?;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        ndarray::Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
            let d = g + cfg.weight_decay * *p;
            *v = cfg.momentum * *v + d;
            *p -= cfg.lr * *v;
        });
    }
    state.steps += 1;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub steps: u64,
}

impl AdamState {
    pub fn new(params: &[Array2<f64>]) -> Self {
        Self { m: zeros_like(params), v: zeros_like(params), steps: 0 }
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(params: &mut [Array2<f64>], grads: &[Array2<f64>], cfg: &AdamConfig, state: &mut AdamState) -> Result<()> {
    check_shapes(params, grads, &state.m)?;
    state.steps += 1;
    let t = state.steps as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            let g = g + cfg.weight_decay * *p;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        });
    }
    Ok(())
}

/// Something that updates a [`ParamStore`] from its accumulated gradients.
pub trait Optimizer {
    fn step(&mut self, store: &mut ParamStore) -> Result<()>;
    fn set_lr(&mut self, lr: f64);
}

pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Self { state: AdamState::new(store.values()), config }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let (p, g) = store.split_mut();
        adam_step(p, g, &self.config, &mut self.state)
    }

    fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

pub struct Sgd {
    pub config: SgdConfig,
    pub state: SgdState,
}

impl Sgd {
    pub fn new(store: &ParamStore, config: SgdConfig) -> Self {
        Self { state: SgdState::new(store.values()), config }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let (p, g) = store.split_mut();
        sgd_step(p, g, &self.config, &mut self.state)
    }

    fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numerical_gradient(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut probe = x.clone();
    let mut out = Array2::zeros(x.raw_dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let fp = f(&probe);
        probe[[r, c]] = orig - h;
        let fm = f(&probe);
        probe[[r, c]] = orig;
        out[[r, c]] = (fp - fm) / (2.0 * h);
    }
    out
}

/// `|a - b| / max(|a| + |b|, floor)` in the Euclidean norm.
pub fn relative_error(analytic: ArrayView2<f64>, numeric: ArrayView2<f64>) -> f64 {
    let diff = (&analytic - &numeric).mapv(|v| v * v).sum().sqrt();
    let scale = analytic.mapv(|v| v * v).sum().sqrt() + numeric.mapv(|v| v * v).sum().sqrt();
    diff / scale.max(1e-12)
}
