//! Least-squares line fitting.

use nalgebra::DMatrix;
use ndarray::{Array1, ArrayView2, Axis};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LineFit {
    /// Unit direction; its first nonzero component is positive.
    pub direction: Array1<f64>,
    pub centroid: Array1<f64>,
    /// Mean squared orthogonal distance to the fitted line.
    pub mse: f64,
}

pub fn fit_line_least_squares(points: ArrayView2<f64>) -> Result<LineFit> {
    let (m, d) = points.dim();
    if m < 2 {
        return Err(Error::Degenerate(format!("line fit needs at least 2 points, got {m}")));
    }
    let centroid = points.mean_axis(Axis(0)).expect("nonempty");
    let centred = &points - &centroid;
    let mat = DMatrix::from_fn(m, d, |i, j| centred[[i, j]]);
    let svd = mat.svd(false, true);
    let v_t = svd.v_t.expect("v requested");
    let (top, &s0) = svd
        .singular_values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("at least one singular value");
    if s0 <= 0.0 {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let mut direction = Array1::from_iter(v_t.row(top).iter().copied());
    if let Some(&first) = direction.iter().find(|v| v.abs() > 1e-15) {
        if first < 0.0 {
            direction.mapv_inplace(|v| -v);
        }
    }
    let mse = centred
        .outer_iter()
        .map(|c| {
            let along = c.dot(&direction);
            (c.dot(&c) - along * along).max(0.0)
        })
        .sum::<f64>()
        / m as f64;
    Ok(LineFit { direction, centroid, mse })
}

/// Angle in degrees between two undirected lines.
pub fn line_angle_degrees(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let c = (a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())).abs().min(1.0);
    c.acos().to_degrees()
}
