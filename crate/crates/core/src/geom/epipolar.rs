//! Two-view correspondences in normalized image coordinates.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, ArrayView1};
use rand::Rng as _;

use super::rigid::RigidTransform;
use super::{Dataset, GroundTruth, Task};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

pub const DEFAULT_EPIPOLAR_TAU: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EssentialMatrix {
    pub e: Matrix3<f64>,
    /// Relative pose the matrix was built from (`X2 = R X1 + t`).
    pub pose: RigidTransform,
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

impl EssentialMatrix {
    /// `E = [t]x R`, scaled to Frobenius norm `sqrt 2`.
    pub fn from_pose(pose: &RigidTransform) -> Result<Self> {
        let n = pose.translation.norm();
        if n < 1e-9 {
            return Err(Error::Degenerate("essential matrix needs a nonzero baseline".into()));
        }
        let e = skew(&(pose.translation / n)) * pose.rotation;
        Ok(Self { e, pose: *pose })
    }

    pub(crate) fn to_params(self) -> Vec<f64> {
        let mut v: Vec<f64> = self.e.transpose().iter().copied().collect();
        v.extend(self.pose.to_params());
        v
    }

    pub(crate) fn from_params(p: &[f64]) -> Result<Self> {
        if p.len() != 21 {
            return Err(Error::Format("essential matrix needs 21 parameters".into()));
        }
        Ok(Self { e: Matrix3::from_row_slice(&p[..9]), pose: RigidTransform::from_params(&p[9..])? })
    }
}

/// Sum of squared distances of `u'` to the epipolar line `E u` and of `u`
/// to the line `E^T u'`; `+inf` when both line normals vanish.
pub fn symmetric_epipolar_distance(u: &Vector3<f64>, up: &Vector3<f64>, e: &Matrix3<f64>) -> f64 {
    let r = up.dot(&(e * u));
    if r == 0.0 {
        return 0.0;
    }
    let l = e.transpose() * up;
    let lp = e * u;
    let (a, b) = (l.x * l.x + l.y * l.y, lp.x * lp.x + lp.y * lp.y);
    if a <= f64::MIN_POSITIVE && b <= f64::MIN_POSITIVE {
        return f64::INFINITY;
    }
    let term = |den: f64| if den > f64::MIN_POSITIVE { r * r / den } else { f64::INFINITY };
    term(a) + term(b)
}

/// Distance for a 4D row `(u1, u2, u1', u2')`.
pub fn row_epipolar_distance(row: ArrayView1<f64>, e: &Matrix3<f64>) -> f64 {
    let u = Vector3::new(row[0], row[1], 1.0);
    let up = Vector3::new(row[2], row[3], 1.0);
    symmetric_epipolar_distance(&u, &up, e)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpipolarParams {
    pub n_pairs: usize,
    pub inlier_ratio: f64,
    pub tau: f64,
    /// Half-width of the square image window in normalized coordinates.
    pub half_fov: f64,
}

impl Default for EpipolarParams {
    fn default() -> Self {
        Self { n_pairs: 1000, inlier_ratio: 0.5, tau: DEFAULT_EPIPOLAR_TAU, half_fov: 0.5 }
    }
}

/// Inliers: random scene points in front of both cameras projected into
/// each view. Outliers: independent random image points in both views.
/// Rows are `(u1, u2, u1', u2')`, labeled by symmetric epipolar distance
/// `< tau`.
pub fn make_epipolar_correspondences(params: &EpipolarParams, pose: &RigidTransform, seed: u64) -> Result<Dataset> {
    if !(params.inlier_ratio > 0.0 && params.inlier_ratio <= 1.0) {
        return Err(Error::Config(format!("inlier ratio must be in (0, 1], got {}", params.inlier_ratio)));
    }
    let essential = EssentialMatrix::from_pose(pose)?;
    let mut rng = rng_from_seed(seed);
    let n = params.n_pairs;
    let n_in = ((n as f64) * params.inlier_ratio).round() as usize;
    let mut slot = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, n_in) {
        slot[i] = true;
    }
    let h = params.half_fov;
    let mut points = Array2::zeros((n, 4));
    for (i, &is_in) in slot.iter().enumerate() {
        let (u, up) = if is_in {
            let mut tries = 0;
            loop {
                tries += 1;
                if tries > 10_000 {
                    return Err(Error::Degenerate("cameras share almost no field of view".into()));
                }
                let depth = rng.random_range(2.0..8.0);
                let x1 = Vector3::new(rng.random_range(-h..h) * depth, rng.random_range(-h..h) * depth, depth);
                let x2 = pose.apply(&x1);
                if x2.z > 1e-3 {
                    break ((x1.x / x1.z, x1.y / x1.z), (x2.x / x2.z, x2.y / x2.z));
                }
            }
        } else {
            (
                (rng.random_range(-h..h), rng.random_range(-h..h)),
                (rng.random_range(-h..h), rng.random_range(-h..h)),
            )
        };
        points.row_mut(i).assign(&ndarray::array![u.0, u.1, up.0, up.1]);
    }
    let labels = points.outer_iter().map(|r| row_epipolar_distance(r, &essential.e) < params.tau).collect();
    Ok(Dataset { task: Task::Epipolar, points, labels, truth: GroundTruth::Essential(essential), label_tau: params.tau })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use nalgebra::Rotation3;

    fn pose(seed: u64) -> RigidTransform {
        let mut rng = rng_from_seed(seed);
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let r = Rotation3::from_scaled_axis(axis.normalize() * rng.random_range(0.0..0.3)).into_inner();
        RigidTransform::new(r, Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3), 0.1)).unwrap()
    }

    // Point-to-line distance computed from the line in implicit form.
    fn point_line_distance_sq(p: &Vector3<f64>, line: &Vector3<f64>) -> f64 {
        let d = (line.x * p.x + line.y * p.y + line.z) / (line.x.hypot(line.y));
        d * d
    }

    #[test]
    fn essential_matrix_has_two_equal_singular_values() {
        for s in 0..20 {
            let e = EssentialMatrix::from_pose(&pose(s)).unwrap();
            let mut sv: Vec<f64> = e.e.singular_values().iter().copied().collect();
            sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
            assert!((sv[0] - sv[1]).abs() < 1e-10 && sv[2] < 1e-10);
            assert!((e.e.norm() - 2f64.sqrt()).abs() < 1e-12);
            assert!(e.e.determinant().abs() < 1e-12);
        }
        assert!(EssentialMatrix::from_pose(&RigidTransform::identity()).is_err());
    }

    #[test]
    fn constructed_inliers_satisfy_the_constraint() {
        let p = pose(1);
        let e = EssentialMatrix::from_pose(&p).unwrap();
        let ds = make_epipolar_correspondences(&EpipolarParams { inlier_ratio: 1.0, ..Default::default() }, &p, 2).unwrap();
        for row in ds.points.outer_iter() {
            let u = Vector3::new(row[0], row[1], 1.0);
            let up = Vector3::new(row[2], row[3], 1.0);
            assert!(up.dot(&(e.e * u)).abs() < 1e-12);
            assert!(row_epipolar_distance(row, &e.e) < 1e-12);
        }
        assert!(ds.labels.iter().all(|&l| l));
    }

    #[test]
    fn distance_matches_point_line_oracle_and_is_symmetric() {
        let e = EssentialMatrix::from_pose(&pose(3)).unwrap().e;
        let mut rng = rng_from_seed(4);
        for _ in 0..100 {
            let u = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0);
            let up = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0);
            let oracle = point_line_distance_sq(&up, &(e * u)) + point_line_distance_sq(&u, &(e.transpose() * up));
            let d = symmetric_epipolar_distance(&u, &up, &e);
            assert!((d - oracle).abs() <= 1e-12 * oracle.max(1.0));
            let swapped = symmetric_epipolar_distance(&up, &u, &e.transpose());
            assert!((d - swapped).abs() <= 1e-12 * d.max(1.0));
        }
    }

    #[test]
    fn degenerate_lines_give_infinity() {
        let e = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let d = symmetric_epipolar_distance(&Vector3::new(0.1, 0.2, 1.0), &Vector3::new(0.3, 0.4, 1.0), &e);
        assert_eq!(d, f64::INFINITY);
        assert_eq!(symmetric_epipolar_distance(&Vector3::new(0.1, 0.2, 1.0), &Vector3::new(0.3, 0.4, 1.0), &Matrix3::zeros()), 0.0);
    }

    #[test]
    fn requested_ratio_is_achieved() {
        let ds = make_epipolar_correspondences(&EpipolarParams { n_pairs: 10_000, ..Default::default() }, &pose(5), 6).unwrap();
        let ratio = ds.labels.iter().filter(|&&l| l).count() as f64 / 1e4;
        assert!((ratio - 0.5).abs() <= 0.02, "{ratio}");
    }
}
