//! Lines and planes in `[0, L]^D` buried in uniform noise.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, GroundTruth, Task};
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};

/// Affine subspace `{offset + sum_i c_i basis_i}` observed in `[0, extent]^D`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPattern {
    /// `r x D`, rows orthonormal.
    pub basis: Array2<f64>,
    pub offset: Array1<f64>,
    pub extent: f64,
}

impl LinearPattern {
    pub fn new(basis: Array2<f64>, offset: Array1<f64>, extent: f64) -> Result<Self> {
        if basis.ncols() != offset.len() || basis.nrows() == 0 || basis.nrows() > basis.ncols() {
            return Err(Error::Shape(format!("basis {:?} with offset of length {}", basis.dim(), offset.len())));
        }
        if !(extent > 0.0) {
            return Err(Error::Config(format!("extent must be positive, got {extent}")));
        }
        let gram = basis.dot(&basis.t());
        for ((i, j), &g) in gram.indexed_iter() {
            let want = if i == j { 1.0 } else { 0.0 };
            if (g - want).abs() > 1e-10 {
                return Err(Error::Degenerate("pattern basis is not orthonormal".into()));
            }
        }
        Ok(Self { basis, offset, extent })
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn rank(&self) -> usize {
        self.basis.nrows()
    }

    pub fn distance(&self, p: ArrayView1<f64>) -> f64 {
        let d = &p - &self.offset;
        let coeffs = self.basis.dot(&d);
        let along = self.basis.t().dot(&coeffs);
        (&d - &along).mapv(|v| v * v).sum().sqrt()
    }

    fn contains(&self, p: &Array1<f64>) -> bool {
        p.iter().all(|&v| (0.0..=self.extent).contains(&v))
    }

    /// Parameter interval `[lo, hi]` of the line `offset + t * basis_0`
    /// inside the domain, or `None` if it misses.
    pub fn clip_interval(&self) -> Option<(f64, f64)> {
        let v = self.basis.row(0);
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for (&o, &d) in self.offset.iter().zip(v.iter()) {
            if d.abs() < 1e-15 {
                if !(0.0..=self.extent).contains(&o) {
                    return None;
                }
                continue;
            }
            let (a, b) = ((0.0 - o) / d, (self.extent - o) / d);
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
        (lo <= hi).then_some((lo, hi))
    }

    /// Length of the line's intersection with the domain.
    pub fn clipped_length(&self) -> f64 {
        self.clip_interval().map_or(0.0, |(lo, hi)| hi - lo)
    }

    /// Flattened parameters: `r, D, basis, offset, extent`.
    pub(crate) fn to_params(&self) -> Vec<f64> {
        let mut v = vec![self.rank() as f64, self.dim() as f64];
        v.extend(self.basis.iter());
        v.extend(self.offset.iter());
        v.push(self.extent);
        v
    }

    pub(crate) fn from_params(p: &[f64]) -> Result<Self> {
        let bad = || Error::Format("malformed pattern parameters".into());
        let (&r, &d) = (p.first().ok_or_else(bad)?, p.get(1).ok_or_else(bad)?);
        let (r, d) = (r as usize, d as usize);
        if p.len() != 2 + r * d + d + 1 {
            return Err(bad());
        }
        let basis = Array2::from_shape_vec((r, d), p[2..2 + r * d].to_vec()).map_err(|_| bad())?;
        let offset = Array1::from(p[2 + r * d..2 + r * d + d].to_vec());
        Self::new(basis, offset, p[p.len() - 1])
    }
}

fn gaussian_vector(rng: &mut Rng, d: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(d, || StandardNormal.sample(rng))
}

fn uniform_point(rng: &mut Rng, d: usize, extent: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(d, || rng.random_range(0.0..extent))
}

/// A random line through the domain: direction uniform on the sphere,
/// anchored at a uniform point of the domain.
pub fn random_line(rng: &mut Rng, dim: usize, extent: f64) -> Result<LinearPattern> {
    loop {
        let v = gaussian_vector(rng, dim);
        let norm = v.dot(&v).sqrt();
        if norm < 1e-12 {
            continue;
        }
        let basis = (v / norm).insert_axis(ndarray::Axis(0));
        let line = LinearPattern::new(basis, uniform_point(rng, dim, extent), extent)?;
        if line.clipped_length() > 1e-6 * extent {
            return Ok(line);
        }
    }
}

/// A random plane: two vectors uniform in the unit hypercube, Gram-Schmidt
/// orthonormalized, anchored at a uniform point of the domain.
pub fn random_plane(rng: &mut Rng, dim: usize, extent: f64) -> Result<LinearPattern> {
    if dim < 2 {
        return Err(Error::Config("a plane needs at least 2 dimensions".into()));
    }
    loop {
        let a: Array1<f64> = Array1::from_shape_simple_fn(dim, || rng.random_range(0.0..1.0));
        let b: Array1<f64> = Array1::from_shape_simple_fn(dim, || rng.random_range(0.0..1.0));
        let na = a.dot(&a).sqrt();
        if na < 1e-6 {
            continue;
        }
        let e1 = a / na;
        let b = &b - &(&e1 * e1.dot(&b));
        let nb = b.dot(&b).sqrt();
        if nb < 1e-6 {
            continue;
        }
        let e2 = b / nb;
        let mut basis = Array2::zeros((2, dim));
        basis.row_mut(0).assign(&e1);
        basis.row_mut(1).assign(&e2);
        return LinearPattern::new(basis, uniform_point(rng, dim, extent), extent);
    }
}

/// Parameters shared by the line and plane generators.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternParams {
    pub dim: usize,
    pub n_inlier: usize,
    pub n_outlier: usize,
    pub sigma: f64,
    pub extent: f64,
    /// Label threshold on point-to-pattern distance; `None` means `3 sigma`.
    pub label_tau: Option<f64>,
}

impl PatternParams {
    pub fn tau(&self) -> f64 {
        match self.label_tau {
            Some(t) => t,
            None if self.sigma > 0.0 => 3.0 * self.sigma,
            None => 1e-9 * self.extent,
        }
    }

    fn validate(&self, min_dim: usize) -> Result<()> {
        if self.dim < min_dim {
            return Err(Error::Config(format!("dimension must be at least {min_dim}, got {}", self.dim)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be nonnegative, got {}", self.sigma)));
        }
        if !(self.extent > 0.0) || !self.extent.is_finite() {
            return Err(Error::Config(format!("extent must be positive, got {}", self.extent)));
        }
        Ok(())
    }
}

/// Inlier and outlier counts for a target total and inlier ratio.
pub fn counts_for_ratio(total: usize, inlier_ratio: f64) -> (usize, usize) {
    let n_in = ((total as f64) * inlier_ratio.clamp(0.0, 1.0)).round() as usize;
    (n_in, total - n_in)
}

/// Counts at fixed densities: outliers per unit volume of `[0, L]^D`,
/// inliers per unit length of the clipped line.
pub fn counts_for_density(outlier_density: f64, inlier_density: f64, dim: usize, extent: f64, clipped_length: f64) -> (usize, usize) {
    let n_out = (outlier_density * extent.powi(dim as i32)).round() as usize;
    let n_in = (inlier_density * clipped_length).round() as usize;
    (n_in, n_out)
}

fn assemble(params: &PatternParams, task: Task, pattern: LinearPattern, inliers: Vec<Array1<f64>>, rng: &mut Rng) -> Dataset {
    let d = params.dim;
    let m = params.n_inlier + params.n_outlier;
    let mut points = Array2::zeros((m, d));
    for (i, p) in inliers.iter().enumerate() {
        points.row_mut(i).assign(p);
    }
    for i in params.n_inlier..m {
        points.row_mut(i).assign(&uniform_point(rng, d, params.extent));
    }
    // Shuffle so that row order carries no label information.
    for i in (1..m).rev() {
        let j = rng.random_range(0..=i);
        if i != j {
            for k in 0..d {
                points.swap((i, k), (j, k));
            }
        }
    }
    let tau = params.tau();
    let labels = points.outer_iter().map(|p| pattern.distance(p) <= tau).collect();
    Dataset { task, points, labels, truth: GroundTruth::Pattern(pattern), label_tau: tau }
}

/// Points on a random line (Gaussian noise of std `sigma`) among uniform
/// outliers. Labels: distance to the line `<= tau`, applied to every point.
pub fn sample_line_dataset(params: &PatternParams, seed: u64) -> Result<Dataset> {
    params.validate(2)?;
    let mut rng = rng_from_seed(seed);
    let line = random_line(&mut rng, params.dim, params.extent)?;
    let (lo, hi) = line.clip_interval().expect("line crosses the domain");
    let v = line.basis.row(0).to_owned();
    let inliers = (0..params.n_inlier)
        .map(|_| {
            let t = rng.random_range(lo..=hi);
            &line.offset + &(&v * t) + &(gaussian_vector(&mut rng, params.dim) * params.sigma)
        })
        .collect();
    Ok(assemble(params, Task::Line, line, inliers, &mut rng))
}

/// As [`sample_line_dataset`] for a random 2-plane; plane points are drawn
/// uniformly from the part of the plane inside the domain.
pub fn sample_plane_dataset(params: &PatternParams, seed: u64) -> Result<Dataset> {
    params.validate(2)?;
    let mut rng = rng_from_seed(seed);
    let reach = params.extent * (params.dim as f64).sqrt();
    'plane: loop {
        let plane = random_plane(&mut rng, params.dim, params.extent)?;
        let mut inliers = Vec::with_capacity(params.n_inlier);
        let mut attempts = 0usize;
        while inliers.len() < params.n_inlier {
            attempts += 1;
            if attempts > 1000 * (params.n_inlier + 10) {
                continue 'plane;
            }
            let (c1, c2) = (rng.random_range(-reach..reach), rng.random_range(-reach..reach));
            let p = &plane.offset + &(&plane.basis.row(0) * c1) + &(&plane.basis.row(1) * c2);
            if plane.contains(&p) {
                inliers.push(p + gaussian_vector(&mut rng, params.dim) * params.sigma);
            }
        }
        return Ok(assemble(params, Task::Plane, plane, inliers, &mut rng));
    }
}
