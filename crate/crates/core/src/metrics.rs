//! Classification and registration metrics.
//!
//! Metrics that are undefined for the given input (no positive labels) are
//! returned as `None` rather than a number.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn confusion(predictions: &[bool], labels: &[bool]) -> Result<Confusion> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let mut c = Confusion::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

impl Confusion {
    /// `None` when nothing was predicted positive.
    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// `None` when there are no positive labels.
    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn f1(&self) -> Option<f64> {
        if self.tp + self.fn_ == 0 {
            return None;
        }
        if self.tp == 0 {
            return Some(0.0);
        }
        let (p, r) = (self.precision()?, self.recall()?);
        Some(2.0 * p * r / (p + r))
    }
}

/// F1 of binary predictions; `None` without positive labels.
pub fn f1(predictions: &[bool], labels: &[bool]) -> Result<Option<f64>> {
    Ok(confusion(predictions, labels)?.f1())
}

/// Precision-recall points, one per rank in descending score order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub positives: usize,
}

/// Rank order: descending score, ties kept in input order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<PrCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let mut curve = PrCurve { thresholds: Vec::new(), precision: Vec::new(), recall: Vec::new(), positives };
    let mut tp = 0usize;
    for (rank, i) in ranking(scores).into_iter().enumerate() {
        tp += usize::from(labels[i]);
        curve.thresholds.push(scores[i]);
        curve.precision.push(tp as f64 / (rank + 1) as f64);
        curve.recall.push(if positives > 0 { tp as f64 / positives as f64 } else { 0.0 });
    }
    Ok(curve)
}

/// Non-interpolated AP: sum over positives, in rank order, of recall
/// increment times precision at that rank. `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { row: scores.iter().position(|s| s.is_nan()).unwrap_or(0) });
    }
    let curve = pr_curve(scores, labels)?;
    if curve.positives == 0 {
        return Ok(None);
    }
    let order = ranking(scores);
    // Summed before dividing so a perfect ranking gives exactly 1.
    let total: f64 = order
        .iter()
        .enumerate()
        .filter(|&(_, &i)| labels[i])
        .map(|(rank, _)| curve.precision[rank])
        .sum();
    Ok(Some(total / curve.positives as f64))
}

/// Angle of `R_hat^T R` in degrees.
pub fn rotation_error(r_hat: &Matrix3<f64>, r: &Matrix3<f64>) -> f64 {
    let c = (((r_hat.transpose() * r).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

pub fn translation_error(t_hat: &Vector3<f64>, t: &Vector3<f64>) -> f64 {
    (t_hat - t).norm()
}

pub const DEFAULT_ROTATION_THRESHOLD_DEG: f64 = 15.0;
pub const DEFAULT_TRANSLATION_THRESHOLD: f64 = 0.30;

/// Errors of one registration attempt; `None` when the registration failed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegistrationOutcome {
    pub errors: Option<(f64, f64)>,
}

impl RegistrationOutcome {
    pub fn failed() -> Self {
        Self { errors: None }
    }

    pub fn from_estimate(r_hat: &Matrix3<f64>, t_hat: &Vector3<f64>, r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        Self { errors: Some((rotation_error(r_hat, r), translation_error(t_hat, t))) }
    }

    pub fn succeeded(&self, rot_thresh_deg: f64, trans_thresh: f64) -> bool {
        self.errors.is_some_and(|(re, te)| re < rot_thresh_deg && te < trans_thresh)
    }
}

pub fn success_rate(outcomes: &[RegistrationOutcome], rot_thresh_deg: f64, trans_thresh: f64) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Empty("no registration results"));
    }
    if !(rot_thresh_deg > 0.0 && trans_thresh > 0.0) {
        return Err(Error::Config("success thresholds must be positive".into()));
    }
    let ok = outcomes.iter().filter(|o| o.succeeded(rot_thresh_deg, trans_thresh)).count();
    Ok(ok as f64 / outcomes.len() as f64)
}

/// Mean rotation and translation error over successful registrations only;
/// `None` when none succeeded.
pub fn mean_errors_of_successes(outcomes: &[RegistrationOutcome], rot_thresh_deg: f64, trans_thresh: f64) -> Option<(f64, f64)> {
    let ok: Vec<(f64, f64)> = outcomes
        .iter()
        .filter(|o| o.succeeded(rot_thresh_deg, trans_thresh))
        .filter_map(|o| o.errors)
        .collect();
    if ok.is_empty() {
        return None;
    }
    let n = ok.len() as f64;
    Some((ok.iter().map(|e| e.0).sum::<f64>() / n, ok.iter().map(|e| e.1).sum::<f64>() / n))
}
