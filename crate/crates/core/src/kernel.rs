//! Kernel regions, convolution kernel maps and stride-K pooling maps.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coords::{CoordinateMap, SparseTensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelShape {
    Cross,
    Hypercubic,
}

impl std::fmt::Display for KernelShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelShape::Cross => f.write_str("cross"),
            KernelShape::Hypercubic => f.write_str("hypercubic"),
        }
    }
}

/// Integer offsets at which a convolution carries weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelRegion {
    shape: KernelShape,
    size: usize,
    dim: usize,
    offsets: Vec<i32>,
}

fn check_kernel_size(k: usize) -> Result<i32> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::InvalidKernelSize(k));
    }
    Ok(((k - 1) / 2) as i32)
}

/// Number of offsets of a region without materializing it.
pub fn region_volume(shape: KernelShape, dim: usize, k: usize) -> Option<usize> {
    match shape {
        KernelShape::Cross => (k - 1).checked_mul(dim)?.checked_add(1),
        KernelShape::Hypercubic => k.checked_pow(dim as u32),
    }
}

/// Center plus the `K - 1` nearest neighbours along every axis.
///
/// Order: the zero offset first, then axis by axis from `-h` to `+h`.
pub fn cross_offsets(dim: usize, k: usize) -> Result<KernelRegion> {
    let h = check_kernel_size(k)?;
    if dim == 0 {
        return Err(Error::Empty("kernel dimension"));
    }
    let mut offsets = vec![0i32; dim];
    for axis in 0..dim {
        for m in (-h..=h).filter(|&m| m != 0) {
            let mut o = vec![0i32; dim];
            o[axis] = m;
            offsets.extend_from_slice(&o);
        }
    }
    Ok(KernelRegion { shape: KernelShape::Cross, size: k, dim, offsets })
}

/// The full `K^D` cube, lexicographic with axis 0 varying slowest.
pub fn hypercubic_offsets(dim: usize, k: usize) -> Result<KernelRegion> {
    let h = check_kernel_size(k)?;
    if dim == 0 {
        return Err(Error::Empty("kernel dimension"));
    }
    let count = k
        .checked_pow(dim as u32)
        .ok_or_else(|| Error::Config(format!("hypercubic kernel {k}^{dim} overflows")))?;
    let mut offsets = Vec::with_capacity(count * dim);
    let mut o = vec![-h; dim];
    for _ in 0..count {
        offsets.extend_from_slice(&o);
        for axis in (0..dim).rev() {
            if o[axis] < h {
                o[axis] += 1;
                break;
            }
            o[axis] = -h;
        }
    }
    Ok(KernelRegion { shape: KernelShape::Hypercubic, size: k, dim, offsets })
}

impl KernelRegion {
    pub fn new(shape: KernelShape, dim: usize, k: usize) -> Result<Self> {
        match shape {
            KernelShape::Cross => cross_offsets(dim, k),
            KernelShape::Hypercubic => hypercubic_offsets(dim, k),
        }
    }

    pub fn shape(&self) -> KernelShape {
        self.shape
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.offsets.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn offset(&self, i: usize) -> &[i32] {
        &self.offsets[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[i32]> + '_ {
        self.offsets.chunks_exact(self.dim)
    }

    pub fn zero_index(&self) -> usize {
        self.iter().position(|o| o.iter().all(|&v| v == 0)).expect("region holds the zero offset")
    }
}

/// Per-offset `(in_row, out_row)` pairs: the gather/scatter plan of a
/// convolution. Stored offset-major.
#[derive(Clone, Debug)]
pub struct KernelMap {
    region: KernelRegion,
    pairs: Vec<Vec<(u32, u32)>>,
    identity: Vec<bool>,
    n_in: usize,
    n_out: usize,
}

impl KernelMap {
    pub fn region(&self) -> &KernelRegion {
        &self.region
    }

    pub fn n_offsets(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self, offset: usize) -> &[(u32, u32)] {
        &self.pairs[offset]
    }

    /// True when the pairs under `offset` are exactly `(r, r)` for every row.
    pub fn is_identity(&self, offset: usize) -> bool {
        self.identity[offset]
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn total_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    /// One line per offset: `(o_1,..,o_D): in->out in->out ...`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (o, pairs) in self.region.iter().zip(&self.pairs) {
            let o: Vec<String> = o.iter().map(i32::to_string).collect();
            let _ = write!(s, "({}):", o.join(","));
            for &(i, j) in pairs {
                let _ = write!(s, " {i}->{j}");
            }
            s.push('\n');
        }
        s
    }
}

// Fixed block count for kernel-map construction; results do not depend on
// how many worker threads process the blocks.
const MAP_BLOCKS: usize = 32;

/// Pairs `(row(c_out + o * stride_in), row(c_out))` for every output
/// coordinate and offset whose input coordinate exists.
pub fn build_kernel_map(
    input: &SparseTensor,
    out_map: &CoordinateMap,
    region: &KernelRegion,
) -> Result<KernelMap> {
    let in_map = input.map();
    if out_map.dim() != in_map.dim() {
        return Err(Error::DimensionMismatch { expected: in_map.dim(), got: out_map.dim() });
    }
    if region.dim() != input.spatial_dim() {
        return Err(Error::DimensionMismatch { expected: input.spatial_dim(), got: region.dim() });
    }
    let dim = in_map.dim();
    let lead = usize::from(input.is_batched());
    let stride = input.stride();
    // Offsets scaled by the input stride, lifted to the full coordinate width.
    let scaled: Vec<Vec<i32>> = region
        .iter()
        .map(|o| {
            let mut v = vec![0i32; dim];
            for (d, &x) in o.iter().enumerate() {
                v[d + lead] = x * stride[d + lead];
            }
            v
        })
        .collect();
    let n_off = scaled.len();

    let blocks = out_map.parallel_blocks(MAP_BLOCKS.min(out_map.len().max(1)));
    let partial: Vec<Vec<Vec<(u32, u32)>>> = blocks
        .into_par_iter()
        .map(|block| {
            let mut local = vec![Vec::new(); n_off];
            let mut key = vec![0i32; dim];
            for j in block {
                let c = out_map.coordinate(j);
                for (o, off) in scaled.iter().enumerate() {
                    for d in 0..dim {
                        key[d] = c[d] + off[d];
                    }
                    if let Some(i) = in_map.get(&key) {
                        local[o].push((i as u32, j as u32));
                    }
                }
            }
            local
        })
        .collect();

    let mut pairs: Vec<Vec<(u32, u32)>> = (0..n_off)
        .map(|o| Vec::with_capacity(partial.iter().map(|p| p[o].len()).sum()))
        .collect();
    for block in partial {
        for (dst, src) in pairs.iter_mut().zip(block) {
            dst.extend(src);
        }
    }
    // Sort by output row so the layout does not depend on table slot order.
    for p in &mut pairs {
        p.sort_unstable_by_key(|&(i, j)| (j, i));
    }
    let n_in = in_map.len();
    let n_out = out_map.len();
    let identity = pairs
        .iter()
        .map(|p| {
            p.len() == n_in && n_in == n_out && p.iter().enumerate().all(|(r, &(i, j))| i as usize == r && j as usize == r)
        })
        .collect();
    Ok(KernelMap { region: region.clone(), pairs, identity, n_in, n_out })
}

/// Many-to-one map from fine rows to the coarse cells they round down to.
#[derive(Clone, Debug)]
pub struct PoolMap {
    out_map: Arc<CoordinateMap>,
    out_stride: Vec<i32>,
    parent: Vec<u32>,
    children: Vec<u32>,
}

impl PoolMap {
    pub fn out_map(&self) -> &Arc<CoordinateMap> {
        &self.out_map
    }

    pub fn out_stride(&self) -> &[i32] {
        &self.out_stride
    }

    /// Output row of every input row.
    pub fn parents(&self) -> &[u32] {
        &self.parent
    }

    pub fn parent(&self, in_row: usize) -> usize {
        self.parent[in_row] as usize
    }

    /// Number of input rows merged into each output row.
    pub fn children(&self) -> &[u32] {
        &self.children
    }

    pub fn n_in(&self) -> usize {
        self.parent.len()
    }

    pub fn n_out(&self) -> usize {
        self.out_map.len()
    }

    /// `(in_row, out_row)` pooling pairs.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.parent.iter().enumerate().map(|(i, &j)| (i, j as usize))
    }
}

/// Stride-`k` pooling map built in one pass: every input coordinate is
/// rounded down to a multiple of `k * stride_in`.
pub fn build_pool_map(input: &SparseTensor, k: usize) -> Result<PoolMap> {
    if k < 2 {
        return Err(Error::Config(format!("pooling stride must be at least 2, got {k}")));
    }
    let k = i32::try_from(k).map_err(|_| Error::Config("pooling stride overflows".into()))?;
    let in_map = input.map();
    let dim = in_map.dim();
    let lead = usize::from(input.is_batched());
    let out_stride: Vec<i32> = input
        .stride()
        .iter()
        .enumerate()
        .map(|(d, &s)| if d < lead { s } else { s * k })
        .collect();

    let mut out = CoordinateMap::with_capacity(dim, in_map.len() / 2 + 1);
    let mut parent = Vec::with_capacity(in_map.len());
    let mut cell = vec![0i32; dim];
    for (_, c) in in_map.iter() {
        for d in 0..dim {
            let s = out_stride[d];
            cell[d] = c[d].div_euclid(s) * s;
        }
        parent.push(out.insert(&cell)? as u32);
    }
    let mut children = vec![0u32; out.len()];
    for &p in &parent {
        children[p as usize] += 1;
    }
    Ok(PoolMap { out_map: Arc::new(out), out_stride, parent, children })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use std::collections::{BTreeMap, BTreeSet};

    fn tensor(dim: usize, coords: &[Vec<i32>], stride: Vec<i32>) -> SparseTensor {
        let map = CoordinateMap::from_rows(dim, coords.iter().map(Vec::as_slice)).unwrap();
        let n = map.len();
        SparseTensor::new(Arc::new(map), Array2::zeros((n, 1)), stride).unwrap()
    }

    #[test]
    fn cross_region_matches_listing() {
        let r = cross_offsets(2, 3).unwrap();
        let got: Vec<Vec<i32>> = r.iter().map(<[i32]>::to_vec).collect();
        assert_eq!(got, vec![vec![0, 0], vec![-1, 0], vec![1, 0], vec![0, -1], vec![0, 1]]);
        assert_eq!(cross_offsets(8, 3).unwrap().len(), 17);
        assert_eq!(cross_offsets(1, 1).unwrap().len(), 1);
    }

    #[test]
    fn hypercubic_counts() {
        assert_eq!(hypercubic_offsets(2, 3).unwrap().len(), 9);
        assert_eq!(hypercubic_offsets(6, 3).unwrap().len(), 729);
        let r = hypercubic_offsets(3, 1).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.offset(0), &[0, 0, 0]);
    }

    #[test]
    fn even_sizes_rejected() {
        assert!(matches!(cross_offsets(2, 2), Err(Error::InvalidKernelSize(2))));
        assert!(hypercubic_offsets(2, 4).is_err());
        assert!(cross_offsets(2, 0).is_err());
    }

    #[test]
    fn regions_have_unique_offsets_and_zero() {
        for dim in 1..=4 {
            for k in [1, 3, 5] {
                for shape in [KernelShape::Cross, KernelShape::Hypercubic] {
                    let r = KernelRegion::new(shape, dim, k).unwrap();
                    let set: BTreeSet<Vec<i32>> = r.iter().map(<[i32]>::to_vec).collect();
                    assert_eq!(set.len(), r.len());
                    assert!(set.contains(&vec![0; dim]));
                    assert_eq!(Some(r.len()), region_volume(shape, dim, k));
                }
            }
        }
    }

    #[test]
    fn single_point_only_center_fires() {
        let t = tensor(3, &[vec![4, 5, 6]], vec![1, 1, 1]);
        let region = cross_offsets(3, 3).unwrap();
        let km = build_kernel_map(&t, t.map(), &region).unwrap();
        let z = region.zero_index();
        for o in 0..km.n_offsets() {
            assert_eq!(km.pairs(o).len(), usize::from(o == z));
        }
    }

    #[test]
    fn one_dimensional_enumeration() {
        let t = tensor(1, &[vec![0], vec![1], vec![2]], vec![1]);
        let region = cross_offsets(1, 3).unwrap();
        let km = build_kernel_map(&t, t.map(), &region).unwrap();
        // Region order: 0, -1, +1.
        assert_eq!(km.pairs(0), &[(0, 0), (1, 1), (2, 2)]);
        assert_eq!(km.pairs(1), &[(0, 1), (1, 2)]);
        assert_eq!(km.pairs(2), &[(1, 0), (2, 1)]);
        assert!(km.is_identity(0));
        assert!(!km.is_identity(1));
        assert_eq!(km.dump(), "(0): 0->0 1->1 2->2\n(-1): 0->1 1->2\n(1): 1->0 2->1\n");
    }

    #[test]
    fn kernel_map_respects_stride() {
        let t = tensor(1, &[vec![0], vec![2], vec![4]], vec![2]);
        let region = cross_offsets(1, 3).unwrap();
        let km = build_kernel_map(&t, t.map(), &region).unwrap();
        assert_eq!(km.pairs(1), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn kernel_map_rejects_dimension_mismatch() {
        let t = tensor(2, &[vec![0, 0]], vec![1, 1]);
        let other = CoordinateMap::new(3);
        let region = cross_offsets(2, 3).unwrap();
        assert!(build_kernel_map(&t, &other, &region).is_err());
        assert!(build_kernel_map(&t, t.map(), &cross_offsets(3, 3).unwrap()).is_err());
    }

    #[test]
    fn pool_examples() {
        let t = tensor(1, &[vec![0], vec![1], vec![2], vec![3]], vec![1]);
        let p = build_pool_map(&t, 2).unwrap();
        assert_eq!(p.out_map().coordinates(), &[0, 2]);
        assert_eq!(p.parents(), &[0, 0, 1, 1]);
        assert_eq!(p.out_stride(), &[2]);
        assert_eq!(p.children(), &[2, 2]);

        let t = tensor(2, &[vec![-1, 3]], vec![1, 1]);
        let p = build_pool_map(&t, 2).unwrap();
        assert_eq!(p.out_map().coordinate(0), &[-2, 2]);
        assert!(build_pool_map(&t, 1).is_err());
    }

    #[test]
    fn batched_tensors_keep_instances_apart() {
        let a = tensor(1, &[vec![0], vec![1]], vec![1]);
        let b = tensor(1, &[vec![1], vec![5]], vec![1]);
        let (t, _) = SparseTensor::collate(&[a, b]).unwrap();
        let region = cross_offsets(1, 3).unwrap();
        let km = build_kernel_map(&t, t.map(), &region).unwrap();
        // Only rows 0 and 1 (instance 0) are neighbours.
        assert_eq!(km.pairs(1), &[(0, 1)]);
        assert_eq!(km.pairs(2), &[(1, 0)]);
        let p = build_pool_map(&t, 2).unwrap();
        assert_eq!(p.out_map().coordinates(), &[0, 0, 1, 0, 1, 4]);
        assert_eq!(p.out_stride(), &[1, 2]);
    }

    // Brute-force oracle: test every (in, out) pair against every offset.
    fn brute_kernel_map(t: &SparseTensor, region: &KernelRegion) -> Vec<BTreeSet<(u32, u32)>> {
        let m = t.map();
        region
            .iter()
            .map(|o| {
                let mut set = BTreeSet::new();
                for (i, ci) in m.iter() {
                    for (j, cj) in m.iter() {
                        let hit = (0..m.dim()).all(|d| ci[d] == cj[d] + o[d] * t.stride()[d]);
                        if hit {
                            set.insert((i as u32, j as u32));
                        }
                    }
                }
                set
            })
            .collect()
    }

    #[test]
    fn kernel_map_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for case in 0..30 {
            let dim = 1 + case % 3;
            let n = rng.random_range(1..120);
            let coords: Vec<Vec<i32>> =
                (0..n).map(|_| (0..dim).map(|_| rng.random_range(-4..4)).collect()).collect();
            let t = tensor(dim, &coords, vec![1; dim]);
            for shape in [KernelShape::Cross, KernelShape::Hypercubic] {
                let region = KernelRegion::new(shape, dim, 3).unwrap();
                let km = build_kernel_map(&t, t.map(), &region).unwrap();
                let oracle = brute_kernel_map(&t, &region);
                for o in 0..region.len() {
                    let got: BTreeSet<(u32, u32)> = km.pairs(o).iter().copied().collect();
                    assert_eq!(got.len(), km.pairs(o).len(), "duplicate pair");
                    assert_eq!(got, oracle[o]);
                }
            }
        }
    }

    #[test]
    fn pool_map_matches_window_enumeration() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for case in 0..30 {
            let dim = 1 + case % 3;
            let n = rng.random_range(1..200);
            let coords: Vec<Vec<i32>> =
                (0..n).map(|_| (0..dim).map(|_| rng.random_range(-9..9)).collect()).collect();
            let t = tensor(dim, &coords, vec![1; dim]);
            let p = build_pool_map(&t, 2).unwrap();
            let mut oracle: BTreeMap<Vec<i32>, BTreeSet<usize>> = BTreeMap::new();
            for (i, c) in t.map().iter() {
                let cell: Vec<i32> = c.iter().map(|&v| v.div_euclid(2) * 2).collect();
                oracle.entry(cell).or_default().insert(i);
            }
            let mut got: BTreeMap<Vec<i32>, BTreeSet<usize>> = BTreeMap::new();
            for (i, j) in p.pairs() {
                got.entry(p.out_map().coordinate(j).to_vec()).or_default().insert(i);
            }
            assert_eq!(got, oracle);
        }
    }
}
