//! Rigid motions, 6D correspondence sets, Kabsch fitting and RANSAC.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{Dataset, GroundTruth, Task};
use crate::error::{Error, Result};
use crate::rng::{indexed_seed, rng_from_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if ortho > 1e-10 || rotation.determinant() <= 0.0 {
            return Err(Error::Degenerate("matrix is not a rotation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Rotation uniform over SO(3) (random unit quaternion) and the given
    /// translation.
    pub fn random(rng: &mut Rng, translation: Vector3<f64>) -> Self {
        loop {
            let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let q = Quaternion::new(q[0], q[1], q[2], q[3]);
            if q.norm() > 1e-9 {
                let r = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
                return Self { rotation: r, translation };
            }
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    pub(crate) fn to_params(self) -> Vec<f64> {
        let mut v: Vec<f64> = self.rotation.transpose().iter().copied().collect();
        v.extend(self.translation.iter());
        v
    }

    pub(crate) fn from_params(p: &[f64]) -> Result<Self> {
        if p.len() != 12 {
            return Err(Error::Format("rigid transform needs 12 parameters".into()));
        }
        Self::new(Matrix3::from_row_slice(&p[..9]), Vector3::new(p[9], p[10], p[11]))
    }
}

pub(crate) fn vec3(row: ArrayView1<f64>, start: usize) -> Vector3<f64> {
    Vector3::new(row[start], row[start + 1], row[start + 2])
}

/// `[R  -I] (x; x') + t`, zero exactly when `x' = R x + t`.
pub fn rigid_residual(pair: ArrayView1<f64>, transform: &RigidTransform) -> Vector3<f64> {
    transform.rotation * vec3(pair, 0) - vec3(pair, 3) + transform.translation
}

/// The `3 x 6` block matrix `[R  -I]`.
pub fn hyperplane_block(transform: &RigidTransform) -> nalgebra::SMatrix<f64, 3, 6> {
    let mut m = nalgebra::SMatrix::<f64, 3, 6>::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&transform.rotation);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceParams {
    pub n_pairs: usize,
    pub inlier_ratio: f64,
    /// Std of the Gaussian perturbation added to inlier targets.
    pub noise: f64,
    /// Source points are uniform in `[0, extent]^3`.
    pub extent: f64,
    /// Label threshold on `|T(x) - x'|`, conventionally twice the voxel size.
    pub tau: f64,
}

/// Correspondences `(x, x')`: inliers pair `x` with `T(x) + noise`, outliers
/// pair `x` with the image `T(y)` of an unrelated source point `y`. Every
/// row is then labeled by `|T(x) - x'| < tau`.
pub fn make_3d_correspondences(params: &CorrespondenceParams, transform: &RigidTransform, seed: u64) -> Result<Dataset> {
    if !(params.inlier_ratio > 0.0 && params.inlier_ratio <= 1.0) {
        return Err(Error::Config(format!("inlier ratio must be in (0, 1], got {}", params.inlier_ratio)));
    }
    if !(params.extent > 0.0) || !(params.tau > 0.0) || !(params.noise >= 0.0) {
        return Err(Error::Config("extent and tau must be positive, noise nonnegative".into()));
    }
    let mut rng = rng_from_seed(seed);
    let n = params.n_pairs;
    let n_in = ((n as f64) * params.inlier_ratio).round() as usize;
    let uniform = |rng: &mut Rng| {
        Vector3::new(
            rng.random_range(0.0..params.extent),
            rng.random_range(0.0..params.extent),
            rng.random_range(0.0..params.extent),
        )
    };
    let mut inlier_slot = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, n_in) {
        inlier_slot[i] = true;
    }
    let mut points = Array2::zeros((n, 6));
    for (i, &is_in) in inlier_slot.iter().enumerate() {
        let x = uniform(&mut rng);
        let xp = if is_in {
            let e = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            transform.apply(&x) + e * params.noise
        } else {
            transform.apply(&uniform(&mut rng))
        };
        for k in 0..3 {
            points[[i, k]] = x[k];
            points[[i, 3 + k]] = xp[k];
        }
    }
    let labels = points
        .outer_iter()
        .map(|row| rigid_residual(row, transform).norm() < params.tau)
        .collect();
    Ok(Dataset { task: Task::Reg3d, points, labels, truth: GroundTruth::Rigid(*transform), label_tau: params.tau })
}

/// Least-squares rigid motion mapping `src` rows onto `dst` rows.
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::Shape("kabsch needs equally many source and target points".into()));
    }
    if src.len() < 3 {
        return Err(Error::Degenerate(format!("kabsch needs at least 3 pairs, got {}", src.len())));
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - cs, d - cd);
        h += a * b.transpose();
        spread += a * a.transpose();
    }
    let sv = spread.symmetric_eigenvalues();
    let (lo, hi) = (sv.min(), sv.max());
    let second = sv.sum() - lo - hi;
    if hi <= 0.0 || second <= 1e-12 * hi {
        return Err(Error::Degenerate("kabsch input is collinear".into()));
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v * fix * u.transpose();
    Ok(RigidTransform { rotation: r, translation: cd - r * cs })
}

/// Kabsch on the rows of an `M x 6` correspondence matrix.
pub fn kabsch_pairs(pairs: ArrayView2<f64>) -> Result<RigidTransform> {
    let (src, dst) = split_pairs(pairs)?;
    kabsch(&src, &dst)
}

fn split_pairs(pairs: ArrayView2<f64>) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    if pairs.ncols() != 6 {
        return Err(Error::DimensionMismatch { expected: 6, got: pairs.ncols() });
    }
    Ok(pairs.outer_iter().map(|r| (vec3(r, 0), vec3(r, 3))).unzip())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacResult {
    /// `None` when no hypothesis gathered at least 3 inliers.
    pub transform: Option<RigidTransform>,
    pub inliers: Vec<bool>,
    /// Consensus size of the best minimal hypothesis.
    pub best_count: usize,
    pub best_iteration: Option<usize>,
}

/// RANSAC over 3-pair Kabsch hypotheses with consensus `|T(x) - x'| < tau`.
/// Iteration `i` draws its sample from its own seeded stream, so the result
/// does not depend on how iterations are scheduled over threads; the best
/// hypothesis is the one with the most inliers, earliest index on ties.
pub fn ransac_registration(pairs: ArrayView2<f64>, iterations: usize, inlier_tau: f64, seed: u64) -> Result<RansacResult> {
    let (src, dst) = split_pairs(pairs)?;
    let m = src.len();
    let failure = RansacResult { transform: None, inliers: vec![false; m], best_count: 0, best_iteration: None };
    if m < 3 {
        return Ok(failure);
    }
    let consensus = |t: &RigidTransform| src.iter().zip(&dst).filter(|(s, d)| (t.apply(s) - *d).norm() < inlier_tau).count();
    let best = (0..iterations)
        .into_par_iter()
        .filter_map(|it| {
            let mut rng = rng_from_seed(indexed_seed(seed, it as u64));
            let idx = rand::seq::index::sample(&mut rng, m, 3);
            let s: Vec<_> = idx.iter().map(|i| src[i]).collect();
            let d: Vec<_> = idx.iter().map(|i| dst[i]).collect();
            let t = kabsch(&s, &d).ok()?;
            Some((consensus(&t), it, t))
        })
        .reduce_with(|a, b| if (b.0, std::cmp::Reverse(b.1)) > (a.0, std::cmp::Reverse(a.1)) { b } else { a });
    let Some((count, it, hyp)) = best else { return Ok(failure) };
    if count < 3 {
        return Ok(failure);
    }
    let mask: Vec<bool> = src.iter().zip(&dst).map(|(s, d)| (hyp.apply(s) - d).norm() < inlier_tau).collect();
    let (s, d): (Vec<_>, Vec<_>) = src.iter().zip(&dst).zip(&mask).filter(|(_, &k)| k).map(|((s, d), _)| (*s, *d)).unzip();
    let refit = kabsch(&s, &d).unwrap_or(hyp);
    let inliers = src.iter().zip(&dst).map(|(s, d)| (refit.apply(s) - d).norm() < inlier_tau).collect();
    Ok(RansacResult { transform: Some(refit), inliers, best_count: count, best_iteration: Some(it) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;

    fn params(n: usize, ratio: f64) -> CorrespondenceParams {
        CorrespondenceParams { n_pairs: n, inlier_ratio: ratio, noise: 0.0, extent: 1.0, tau: 0.01 }
    }

    #[test]
    fn identity_noise_free_inliers_repeat_the_source() {
        let ds = make_3d_correspondences(&params(100, 0.3), &RigidTransform::identity(), 1).unwrap();
        let same = ds.points.outer_iter().filter(|r| (0..3).all(|k| r[k] == r[3 + k])).count();
        assert_eq!(same, 30);
    }

    #[test]
    fn label_rule_uses_strict_threshold() {
        let t = RigidTransform::identity();
        let tau = 0.1;
        let row = |d: f64| ndarray::array![0.5, 0.5, 0.5, 0.5 + d, 0.5, 0.5];
        assert!(rigid_residual(row(tau / 2.0).view(), &t).norm() < tau);
        assert!(rigid_residual(row(2.0 * tau).view(), &t).norm() >= tau);
    }

    #[test]
    fn generated_inlier_ratio_is_close_to_requested() {
        let mut rng = rng_from_seed(2);
        let t = RigidTransform::random(&mut rng, Vector3::new(0.1, 0.2, 0.3));
        let ds = make_3d_correspondences(&params(10_000, 0.2), &t, 3).unwrap();
        let ratio = ds.labels.iter().filter(|&&l| l).count() as f64 / 1e4;
        assert!((ratio - 0.2).abs() <= 0.02, "{ratio}");
    }

    #[test]
    fn random_rotations_are_proper() {
        let mut rng = rng_from_seed(4);
        for _ in 0..100 {
            let t = RigidTransform::random(&mut rng, Vector3::zeros());
            assert!(RigidTransform::new(t.rotation, t.translation).is_ok());
            let block = hyperplane_block(&t);
            assert_eq!(block.rank(1e-10), 3);
        }
    }

    #[test]
    fn kabsch_identity_and_known_motion() {
        let src: Vec<_> = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.3, 0.1, 1.0]]
            .iter()
            .map(|p| Vector3::new(p[0], p[1], p[2]))
            .collect();
        let t = kabsch(&src, &src).unwrap();
        assert!((t.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(t.translation.norm() < 1e-12);
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let truth = RigidTransform::new(rz, Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let dst: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
        let est = kabsch(&src, &dst).unwrap();
        assert!((est.rotation - rz).norm() < 1e-10);
        assert!((est.translation - truth.translation).norm() < 1e-10);
    }

    #[test]
    fn kabsch_rejects_collinear_input() {
        let src: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(kabsch(&src, &src).is_err());
        assert!(kabsch(&src[..2], &src[..2]).is_err());
    }

    #[test]
    fn kabsch_is_a_local_least_squares_optimum() {
        let mut rng = rng_from_seed(5);
        let truth = RigidTransform::random(&mut rng, Vector3::new(0.5, -0.2, 0.1));
        let src: Vec<_> = (0..30).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let dst: Vec<_> = src
            .iter()
            .map(|p| truth.apply(p) + Vector3::from_fn(|_, _| 0.05 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)))
            .collect();
        let est = kabsch(&src, &dst).unwrap();
        let cost = |t: &RigidTransform| src.iter().zip(&dst).map(|(s, d)| (t.apply(s) - d).norm_squared()).sum::<f64>();
        let base = cost(&est);
        for k in 0..200 {
            let axis: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            let step = 1e-4 * (1 + k % 5) as f64;
            let dr = nalgebra::Rotation3::from_scaled_axis(axis.normalize() * step).into_inner();
            let dt = Vector3::from_fn(|_, _| step * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
            let perturbed = RigidTransform { rotation: dr * est.rotation, translation: est.translation + dt };
            assert!(cost(&perturbed) >= base - 1e-12);
        }
    }

    #[test]
    fn ransac_all_inliers_one_iteration() {
        let mut rng = rng_from_seed(6);
        let t = RigidTransform::random(&mut rng, Vector3::new(0.2, 0.0, 0.1));
        let ds = make_3d_correspondences(&params(50, 1.0), &t, 7).unwrap();
        let r = ransac_registration(ds.points.view(), 1, 0.01, 8).unwrap();
        let est = r.transform.unwrap();
        assert!((est.rotation - t.rotation).norm() < 1e-9);
        assert!(r.inliers.iter().all(|&k| k));
    }

    #[test]
    fn ransac_half_outliers_meets_the_analytic_bound() {
        // w = 0.5, N = 1000 -> failure probability (1 - 1/8)^1000 ~ 1e-58.
        let mut successes = 0;
        for scene in 0..20u64 {
            let mut rng = rng_from_seed(100 + scene);
            let t = RigidTransform::random(&mut rng, Vector3::new(0.3, 0.1, -0.2));
            let ds = make_3d_correspondences(&params(100, 0.5), &t, scene).unwrap();
            let r = ransac_registration(ds.points.view(), 1000, 0.01, scene).unwrap();
            if let Some(est) = r.transform {
                if (est.rotation - t.rotation).norm() < 1e-6 {
                    successes += 1;
                }
            }
        }
        assert_eq!(successes, 20);
    }

    #[test]
    fn ransac_is_deterministic_and_fails_gracefully() {
        let mut rng = rng_from_seed(9);
        let t = RigidTransform::random(&mut rng, Vector3::zeros());
        let ds = make_3d_correspondences(&params(200, 0.2), &t, 10).unwrap();
        let a = ransac_registration(ds.points.view(), 300, 0.01, 11).unwrap();
        let b = ransac_registration(ds.points.view(), 300, 0.01, 11).unwrap();
        assert_eq!(a, b);
        let tiny = ds.points.select(Axis(0), &[0, 1]);
        assert!(ransac_registration(tiny.view(), 10, 0.01, 0).unwrap().transform.is_none());
    }

    #[test]
    fn transform_params_roundtrip() {
        let mut rng = rng_from_seed(12);
        let t = RigidTransform::random(&mut rng, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(RigidTransform::from_params(&t.to_params()).unwrap(), t);
        let inv = t.inverse();
        let p = Vector3::new(0.3, -0.4, 0.5);
        assert!((inv.apply(&t.apply(&p)) - p).norm() < 1e-12);
    }
}
