//! Finite-difference checks of every differentiable operation and of whole
//! networks, on small random sparse instances.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng as _;
use serde::Serialize;

use crate::autodiff::{numerical_gradient, relative_error, ParamStore, Tape, Var};
use crate::coords::{CoordinateMap, SparseTensor};
use crate::error::Result;
use crate::kernel::{build_kernel_map, build_pool_map, KernelRegion, KernelShape};
use crate::layers::BN_EPSILON;
use crate::models::{build_network, prepare_points, ModelKind, NetworkConfig, Plan};
use crate::rng::{indexed_seed, rng_from_seed, Rng};

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub const LAYER_CHECKS: &[&str] = &[
    "conv_cross",
    "conv_hypercubic",
    "sum_pool",
    "sum_unpool",
    "batch_norm",
    "instance_norm",
    "linear",
    "relu",
    "residual",
    "global_pool",
    "cross_entropy",
    "balanced_cross_entropy",
];

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so that ReLU kinks stay outside the
/// finite-difference stencil.
fn kink_free_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn random_tensor(rng: &mut Rng, channels: usize) -> Result<SparseTensor> {
    let dim = rng.random_range(1..=3usize);
    let n = rng.random_range(4..=30usize).min(7usize.pow(dim as u32));
    let mut map = CoordinateMap::new(dim);
    while map.len() < n {
        let c: Vec<i32> = (0..dim).map(|_| rng.random_range(-3..=3)).collect();
        map.insert(&c)?;
    }
    let feats = random_matrix(rng, map.len(), channels);
    SparseTensor::new(Arc::new(map), feats, vec![1; dim])
}

/// Max relative error between the tape gradient and central differences of
/// `sum(build(inputs) * C)` with respect to every input.
fn check_graph(rng: &mut Rng, inputs: &[Array2<f64>], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let proj = random_matrix(rng, tape.value(out).nrows(), tape.value(out).ncols());
    let loss = tape.dot_const(out, proj.clone())?;
    tape.backward(loss, &mut ParamStore::new())?;
    let eval = |xs: &[Array2<f64>]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let o = build(&mut t, &vs).expect("rebuild succeeds");
        (t.value(o) * &proj).sum()
    };
    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var);
        let mut probe = inputs.to_vec();
        let numeric = numerical_gradient(&inputs[k], FD_STEP, |x| {
            probe[k] = x.clone();
            eval(&probe)
        });
        worst = worst.max(relative_error(analytic.view(), numeric.view()));
    }
    Ok(worst)
}

fn check_layer(name: &str, rng: &mut Rng) -> Result<f64> {
    let c_in = rng.random_range(1..=3usize);
    let c_out = rng.random_range(1..=3usize);
    match name {
        "conv_cross" | "conv_hypercubic" => {
            let shape = if name == "conv_cross" { KernelShape::Cross } else { KernelShape::Hypercubic };
            let x = random_tensor(rng, c_in)?;
            let region = KernelRegion::new(shape, x.spatial_dim(), 3)?;
            let kmap = Arc::new(build_kernel_map(&x, x.map(), &region)?);
            let w = random_matrix(rng, region.len() * c_in, c_out);
            let b = random_matrix(rng, 1, c_out);
            check_graph(rng, &[x.features().clone(), w, b], |t, v| t.conv(v[0], v[1], v[2], kmap.clone()))
        }
        "sum_pool" => {
            let x = random_tensor(rng, c_in)?;
            let pool = Arc::new(build_pool_map(&x, 2)?);
            check_graph(rng, &[x.features().clone()], |t, v| t.sum_pool(v[0], pool.clone()))
        }
        "sum_unpool" => {
            let x = random_tensor(rng, c_in)?;
            let pool = Arc::new(build_pool_map(&x, 2)?);
            let coarse = random_matrix(rng, pool.n_out(), c_in);
            check_graph(rng, &[coarse], |t, v| t.sum_unpool(v[0], pool.clone()))
        }
        "batch_norm" => {
            let n = rng.random_range(2..=30usize);
            let x = random_matrix(rng, n, c_in);
            let (g, b) = (random_matrix(rng, 1, c_in), random_matrix(rng, 1, c_in));
            check_graph(rng, &[x, g, b], |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], BN_EPSILON)?.0))
        }
        "instance_norm" => {
            let n = rng.random_range(2..=30usize);
            let x = random_matrix(rng, n, c_in);
            let cut = rng.random_range(1..n);
            check_graph(rng, &[x], |t, v| t.instance_norm_segments(v[0], &[0..cut, cut..n], BN_EPSILON))
        }
        "linear" => {
            let n = rng.random_range(1..=30usize);
            let x = random_matrix(rng, n, c_in);
            let (w, b) = (random_matrix(rng, c_in, c_out), random_matrix(rng, 1, c_out));
            check_graph(rng, &[x, w, b], |t, v| t.linear(v[0], v[1], v[2]))
        }
        "relu" => {
            let n = rng.random_range(1..=30usize);
            let x = kink_free_matrix(rng, n, c_in);
            check_graph(rng, &[x], |t, v| Ok(t.relu(v[0])))
        }
        "residual" => {
            let x = random_tensor(rng, c_in)?;
            let y = random_matrix(rng, x.len(), c_in);
            check_graph(rng, &[x.features().clone(), y], |t, v| t.add(v[0], v[1]))
        }
        "global_pool" => {
            let x = random_tensor(rng, c_in)?;
            check_graph(rng, &[x.features().clone()], |t, v| t.global_avg_pool(v[0]))
        }
        "cross_entropy" | "balanced_cross_entropy" => {
            let n = rng.random_range(1..=30usize);
            let z = random_matrix(rng, n, 1).mapv(|v| 4.0 * v);
            let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
            let balanced = name == "balanced_cross_entropy";
            check_graph(rng, &[z], move |t, v| {
                if balanced {
                    t.balanced_cross_entropy(v[0], &labels)
                } else {
                    t.cross_entropy(v[0], &labels)
                }
            })
        }
        other => Err(crate::Error::Config(format!("unknown layer check `{other}`"))),
    }
}

/// Run every layer check on `instances` random instances.
pub fn layer_checks(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    LAYER_CHECKS
        .iter()
        .enumerate()
        .map(|(li, &name)| {
            let mut worst = 0.0f64;
            for i in 0..instances {
                let mut rng = rng_from_seed(indexed_seed(indexed_seed(seed, li as u64), i as u64));
                worst = worst.max(check_layer(name, &mut rng)?);
            }
            Ok(CheckResult { name: name.to_string(), instances, max_rel_error: worst })
        })
        .collect()
}

/// Whole-network check: balanced cross-entropy of a tiny network on a
/// 30-point 2D instance, differentiated with respect to every parameter.
pub fn network_check(kind: ModelKind, seed: u64) -> Result<CheckResult> {
    let cfg = NetworkConfig {
        dim: 2,
        kernel_shape: KernelShape::Cross,
        kernel_size: 3,
        levels: 2,
        channels: vec![3, 4],
        blocks_per_level: 1,
        in_channels: 3,
        pool_stride: 2,
        max_kernel_volume: 729,
    };
    let mut rng = rng_from_seed(seed);
    let mut net = build_network(kind, &cfg, &mut rng)?;
    let points = Array2::from_shape_simple_fn((30, 2), || rng.random_range(0.0..2.0));
    let q = prepare_points(points.view(), 0.25)?;
    let plan = Plan::new(q.tensor, &cfg, kind)?;
    let labels: Vec<bool> = (0..plan.rows()).map(|_| rng.random_bool(0.4)).collect();
    let loss_of = |net: &mut crate::models::Network| -> Result<f64> {
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &plan, true)?;
        let l = tape.balanced_cross_entropy(out, &labels)?;
        Ok(tape.value(l)[[0, 0]])
    };
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, &plan, true)?;
    let l = tape.balanced_cross_entropy(out, &labels)?;
    let mut store = net.params().clone();
    store.zero_grad();
    tape.backward(l, &mut store)?;
    // Relative error of the flattened gradient: biases feeding batch norm
    // have an exactly zero gradient, which a per-tensor ratio would turn
    // into finite-difference noise over zero.
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let x0 = net.params().value(id).clone();
        let numeric = numerical_gradient(&x0, FD_STEP, |p| {
            *net.params_mut().value_mut(id) = p.clone();
            loss_of(&mut net).expect("forward succeeds")
        });
        *net.params_mut().value_mut(id) = x0;
        let analytic = store.grad(id);
        diff += (analytic - &numeric).mapv(|v| v * v).sum();
        na += analytic.mapv(|v| v * v).sum();
        nn += numeric.mapv(|v| v * v).sum();
    }
    let err = diff.sqrt() / (na.sqrt() + nn.sqrt()).max(1e-12);
    Ok(CheckResult { name: format!("{kind}_network"), instances: 1, max_rel_error: err })
}
