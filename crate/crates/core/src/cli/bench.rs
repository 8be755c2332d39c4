//! Timing and counting tables: pooling scaling in N, kernel-map build
//! times, and per-layer matmul counts of cross vs hypercubic kernels.

use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng as _;
use serde::Serialize;

use crate::coords::{CoordinateMap, SparseTensor};
use crate::error::Result;
use crate::kernel::{build_kernel_map, build_pool_map, region_volume, KernelRegion, KernelShape};
use crate::layers::sum_pool_forward;
use crate::rng::{indexed_seed, rng_from_seed};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub section: String,
    pub name: String,
    pub dim: usize,
    pub n: usize,
    pub value: f64,
    pub unit: String,
}

/// `n` distinct integer points in `[0, side)^dim` with `channels` random
/// features.
pub fn random_sparse_tensor(dim: usize, n: usize, side: i32, channels: usize, seed: u64) -> Result<SparseTensor> {
    let mut rng = rng_from_seed(seed);
    let mut map = CoordinateMap::with_capacity(dim, n);
    let mut c = vec![0i32; dim];
    while map.len() < n {
        for x in c.iter_mut() {
            *x = rng.random_range(0..side);
        }
        map.insert(&c)?;
    }
    let feats = Array2::from_shape_simple_fn((n, channels), || rng.random_range(-1.0..1.0));
    SparseTensor::new(Arc::new(map), feats, vec![1; dim])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoolTiming {
    pub n: usize,
    pub seconds: f64,
    pub seconds_doubled: f64,
    /// `time(2N) / time(N)`; linear scaling gives about 2.
    pub ratio: f64,
}

/// Best-of-`repeats` time to build a stride-2 pool map and sum-pool
/// 8 channels of `n` random points.
pub fn time_pooling(dim: usize, n: usize, repeats: usize, seed: u64) -> Result<f64> {
    let x = random_sparse_tensor(dim, n, 64, 8, seed)?;
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let pool = build_pool_map(&x, 2)?;
        let y = sum_pool_forward(x.features().view(), &pool)?;
        std::hint::black_box(&y);
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Pooling time at N and 2N for every N in `sizes`.
pub fn pooling_scaling(dim: usize, sizes: &[usize], repeats: usize, seed: u64) -> Result<Vec<PoolTiming>> {
    sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let seconds = time_pooling(dim, n, repeats, indexed_seed(seed, 2 * i as u64))?;
            let seconds_doubled = time_pooling(dim, 2 * n, repeats, indexed_seed(seed, 2 * i as u64 + 1))?;
            Ok(PoolTiming { n, seconds, seconds_doubled, ratio: seconds_doubled / seconds })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelMapTiming {
    pub shape: KernelShape,
    pub dim: usize,
    pub n: usize,
    pub offsets: usize,
    pub pairs: usize,
    pub seconds: f64,
}

/// Submanifold kernel-map build time for K = 3 on `n` random points in a
/// cube sized for about 10% occupancy of the hypercubic neighbourhood.
pub fn kernel_map_timings(dims: &[usize], n: usize, max_volume: usize, seed: u64) -> Result<Vec<KernelMapTiming>> {
    let mut out = Vec::new();
    for &dim in dims {
        let side = ((10.0 * n as f64).powf(1.0 / dim as f64).ceil() as i32).max(2);
        let x = random_sparse_tensor(dim, n, side, 1, indexed_seed(seed, dim as u64))?;
        for shape in [KernelShape::Cross, KernelShape::Hypercubic] {
            if region_volume(shape, dim, 3).is_none_or(|v| v > max_volume) {
                continue;
            }
            let region = KernelRegion::new(shape, dim, 3)?;
            let t = Instant::now();
            let kmap = build_kernel_map(&x, x.map(), &region)?;
            let seconds = t.elapsed().as_secs_f64();
            out.push(KernelMapTiming { shape, dim, n, offsets: region.len(), pairs: kmap.total_pairs(), seconds });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatmulCount {
    pub dim: usize,
    pub kernel_size: usize,
    pub cross: usize,
    pub hypercubic: usize,
}

/// Matrix multiplications per convolution layer, one per kernel offset,
/// counted from the materialized regions.
pub fn matmul_counts(kernel_size: usize, dims: &[usize]) -> Result<Vec<MatmulCount>> {
    dims.iter()
        .map(|&dim| {
            Ok(MatmulCount {
                dim,
                kernel_size,
                cross: KernelRegion::new(KernelShape::Cross, dim, kernel_size)?.len(),
                hypercubic: KernelRegion::new(KernelShape::Hypercubic, dim, kernel_size)?.len(),
            })
        })
        .collect()
}
