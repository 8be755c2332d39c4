//! Instance generation, training, evaluation and registration runs shared
//! by the subcommands.

use std::time::Instant;

use nalgebra::{Rotation3, Vector3};
use ndarray::{Array1, Axis};
use rand::Rng as _;
use serde::Serialize;

use super::config::{OptimizerKind, RunConfig};
use crate::autodiff::{Adam, AdamConfig, Optimizer, Sgd, SgdConfig, Tape};
use crate::coords::{Quantized, SparseTensor};
use crate::error::{Error, Result};
use crate::geom::{
    counts_for_ratio, make_3d_correspondences, make_epipolar_correspondences, ransac_registration, sample_line_dataset,
    sample_plane_dataset, CorrespondenceParams, Dataset, EpipolarParams, GroundTruth, PatternParams, RigidTransform, Task,
};
use crate::metrics::{self, RegistrationOutcome};
use crate::models::{
    build_network, cell_labels, predictions_from_logits, prepare_points, ModelKind, Network, NetworkConfig, Plan,
};
use crate::rng::{indexed_seed, rng_from_seed, substream, substream_seed};

/// Stream seeds; every stage draws from its own.
pub fn train_data_seed(cfg: &RunConfig) -> u64 {
    substream_seed(cfg.seed, "train-data")
}

pub fn eval_data_seed(cfg: &RunConfig) -> u64 {
    substream_seed(cfg.seed, "eval-data")
}

pub fn scene_seed(cfg: &RunConfig) -> u64 {
    substream_seed(cfg.seed, "scenes")
}

pub fn ransac_seed(cfg: &RunConfig) -> u64 {
    substream_seed(cfg.seed, "ransac")
}

/// One problem instance of the configured task. Expects a resolved config.
pub fn generate_instance(cfg: &RunConfig, seed: u64) -> Result<Dataset> {
    let d = &cfg.data;
    let need = |v: Option<f64>, what: &str| v.ok_or_else(|| Error::Config(format!("data.{what} unresolved")));
    let points = d.points.ok_or_else(|| Error::Config("data.points unresolved".into()))?;
    let ratio = need(d.inlier_ratio, "inlier_ratio")?;
    let extent = need(d.extent, "extent")?;
    let tau = need(d.label_tau, "label_tau")?;
    let sigma = need(d.sigma, "sigma")?;
    match cfg.task {
        Task::Line | Task::Plane => {
            let (n_inlier, n_outlier) = counts_for_ratio(points, ratio);
            let p = PatternParams { dim: cfg.point_dim(), n_inlier, n_outlier, sigma, extent, label_tau: Some(tau) };
            if cfg.task == Task::Line {
                sample_line_dataset(&p, seed)
            } else {
                sample_plane_dataset(&p, seed)
            }
        }
        Task::Reg3d => {
            let mut rng = rng_from_seed(seed);
            let t = Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5) * extent);
            let transform = RigidTransform::random(&mut rng, t);
            let p = CorrespondenceParams { n_pairs: points, inlier_ratio: ratio, noise: sigma, extent, tau };
            make_3d_correspondences(&p, &transform, indexed_seed(seed, 1))
        }
        Task::Epipolar => {
            let mut rng = rng_from_seed(seed);
            let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
            let rot = Rotation3::from_scaled_axis(axis * rng.random_range(0.0..0.3)).into_inner();
            let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.2));
            let pose = RigidTransform::new(rot, dir.normalize())?;
            let p = EpipolarParams { n_pairs: points, inlier_ratio: ratio, tau, half_fov: 0.5 };
            make_epipolar_correspondences(&p, &pose, indexed_seed(seed, 1))
        }
    }
}

/// A dataset quantized for the network, with its per-cell labels.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub quantized: Quantized,
    pub cell_labels: Vec<bool>,
}

pub fn prepare(dataset: Dataset, resolution: f64) -> Result<Prepared> {
    let quantized = prepare_points(dataset.points.view(), resolution)?;
    let cell_labels = cell_labels(&dataset.labels, &quantized.provenance, quantized.tensor.len())?;
    Ok(Prepared { dataset, quantized, cell_labels })
}

/// Several prepared instances collated into one network input.
pub struct Batch {
    pub plan: Plan,
    pub labels: Vec<bool>,
}

pub fn make_batch(items: &[Prepared], cfg: &RunConfig) -> Result<Batch> {
    let net_cfg = cfg.network_config()?;
    let kind = cfg.model.kind;
    if items.len() == 1 {
        let plan = Plan::new(items[0].quantized.tensor.clone(), &net_cfg, kind)?;
        return Ok(Batch { plan, labels: items[0].cell_labels.clone() });
    }
    let tensors: Vec<SparseTensor> = items.iter().map(|p| p.quantized.tensor.clone()).collect();
    let (tensor, _) = SparseTensor::collate(&tensors)?;
    let labels = items.iter().flat_map(|p| p.cell_labels.iter().copied()).collect();
    Ok(Batch { plan: Plan::new(tensor, &net_cfg, kind)?, labels })
}

/// A held-out instance with its plan built once.
pub struct EvalItem {
    pub prepared: Prepared,
    pub plan: Plan,
}

/// The held-out instances of a config, planned for `net_cfg`.
pub fn eval_set(cfg: &RunConfig, net_cfg: &NetworkConfig, kind: ModelKind) -> Result<Vec<EvalItem>> {
    let seed = eval_data_seed(cfg);
    let datasets = (0..cfg.train.eval_instances.max(1))
        .map(|i| generate_instance(cfg, indexed_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    eval_items(datasets, cfg, net_cfg, kind)
}

pub fn eval_items(datasets: Vec<Dataset>, cfg: &RunConfig, net_cfg: &NetworkConfig, kind: ModelKind) -> Result<Vec<EvalItem>> {
    let resolution = cfg.data.resolution.unwrap_or(1.0);
    datasets
        .into_iter()
        .map(|ds| {
            let prepared = prepare(ds, resolution)?;
            let plan = Plan::new(prepared.quantized.tensor.clone(), net_cfg, kind)?;
            Ok(EvalItem { prepared, plan })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub ap: Option<f64>,
    pub points: usize,
    pub positives: usize,
    pub predicted_positive: usize,
}

/// Per-point metrics pooled over all items.
pub fn evaluate(net: &mut Network, items: &[EvalItem]) -> Result<EvalMetrics> {
    let mut preds = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for item in items {
        let logits = net.logits(&item.plan)?;
        let p = predictions_from_logits(&logits, &item.prepared.quantized.provenance)?;
        preds.extend(p.inlier);
        scores.extend(p.probability);
        labels.extend(item.prepared.dataset.labels.iter().copied());
    }
    if let Some(row) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("non-finite inlier probability at point {row}")));
    }
    let c = metrics::confusion(&preds, &labels)?;
    Ok(EvalMetrics {
        f1: c.f1(),
        precision: c.precision(),
        recall: c.recall(),
        ap: metrics::average_precision(&scores, &labels)?,
        points: labels.len(),
        positives: c.tp + c.fn_,
        predicted_positive: c.tp + c.fp,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: usize,
    #[serde(flatten)]
    pub metrics: EvalMetrics,
}

pub struct TrainOutcome {
    pub network: Network,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

fn optimizer(cfg: &RunConfig, net: &Network) -> Box<dyn Optimizer> {
    let t = &cfg.train;
    match t.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(
            net.params(),
            AdamConfig { lr: t.lr, weight_decay: t.weight_decay, ..AdamConfig::default() },
        )),
        OptimizerKind::Sgd => Box::new(Sgd::new(
            net.params(),
            SgdConfig { lr: t.lr, momentum: t.momentum, weight_decay: t.weight_decay },
        )),
    }
}

/// Learning rate at a step; constant for now.
pub fn learning_rate(cfg: &RunConfig, _step: usize) -> f64 {
    cfg.train.lr
}

fn parameter_summary(net: &Network) -> String {
    let store = net.params();
    store
        .named()
        .filter(|(_, v)| v.iter().any(|x| !x.is_finite()) || v.iter().map(|x| x.abs()).fold(0.0, f64::max) > 1e6)
        .map(|(n, v)| format!("{n}: max |w| = {}", v.iter().map(|x| x.abs()).fold(0.0, f64::max)))
        .take(8)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Train on fresh instances drawn per step, evaluating on a fixed held-out
/// set every `eval_every` steps and after the last one.
pub fn train(cfg: &RunConfig, on_step: impl FnMut(&StepRecord), on_eval: impl FnMut(&EvalRecord)) -> Result<TrainOutcome> {
    train_on(cfg, None, on_step, on_eval)
}

/// Like [`train`], but when `fixed` is given the steps cycle through those
/// datasets instead of drawing fresh instances.
pub fn train_on(
    cfg: &RunConfig,
    fixed: Option<&[Dataset]>,
    mut on_step: impl FnMut(&StepRecord),
    mut on_eval: impl FnMut(&EvalRecord),
) -> Result<TrainOutcome> {
    let net_cfg = cfg.network_config()?;
    let mut network = build_network(cfg.model.kind, &net_cfg, &mut substream(cfg.seed, "init"))?;
    let eval_items = eval_set(cfg, &net_cfg, cfg.model.kind)?;
    let mut opt = optimizer(cfg, &network);
    let data_seed = train_data_seed(cfg);
    let resolution = cfg.data.resolution.unwrap_or(1.0);
    let mut steps = Vec::with_capacity(cfg.train.steps);
    let mut evals = Vec::new();
    let fixed = match fixed {
        Some([]) => return Err(Error::Empty("training datasets")),
        Some(sets) => Some(sets.iter().map(|d| prepare(d.clone(), resolution)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let started = Instant::now();
    for step in 0..cfg.train.steps {
        let items = (0..cfg.train.batch_size)
            .map(|b| {
                let k = step * cfg.train.batch_size + b;
                match &fixed {
                    Some(sets) => Ok(sets[k % sets.len()].clone()),
                    None => prepare(generate_instance(cfg, indexed_seed(data_seed, k as u64))?, resolution),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = make_batch(&items, cfg)?;
        network.params_mut().zero_grad();
        let mut tape = Tape::new();
        let logits = network.forward(&mut tape, &batch.plan, true)?;
        let loss = tape.balanced_cross_entropy(logits, &batch.labels)?;
        let value = tape.value(loss)[[0, 0]];
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "loss became {value} at step {step}; parameters: [{}]",
                parameter_summary(&network)
            )));
        }
        let mut store = std::mem::take(network.params_mut());
        tape.backward(loss, &mut store)?;
        opt.set_lr(learning_rate(cfg, step));
        opt.step(&mut store)?;
        *network.params_mut() = store;
        let rec = StepRecord { step, loss: value, wall_ms: started.elapsed().as_secs_f64() * 1e3 };
        on_step(&rec);
        steps.push(rec);
        let every = cfg.train.eval_every;
        if (every > 0 && (step + 1) % every == 0) || step + 1 == cfg.train.steps {
            let rec = EvalRecord { step: step + 1, metrics: evaluate(&mut network, &eval_items)? };
            on_eval(&rec);
            evals.push(rec);
        }
    }
    if cfg.train.steps == 0 {
        let rec = EvalRecord { step: 0, metrics: evaluate(&mut network, &eval_items)? };
        on_eval(&rec);
        evals.push(rec);
    }
    Ok(TrainOutcome { network, steps, evals })
}

/// Registration of one scene with and without network filtering.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneResult {
    pub scene: usize,
    pub raw: RegistrationOutcome,
    pub raw_inlier_ratio: f64,
    pub filtered: Option<RegistrationOutcome>,
    pub kept: Option<usize>,
    pub filtered_inlier_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegistrationRow {
    pub filter: String,
    pub scenes: usize,
    pub success_rate: f64,
    /// Mean errors over successful scenes only.
    pub mean_rotation_error_deg: Option<f64>,
    pub mean_translation_error: Option<f64>,
    /// Pooled label ratio of the pairs handed to RANSAC.
    pub inlier_ratio: f64,
    pub mean_pairs: f64,
}

fn rigid_truth(ds: &Dataset) -> Result<RigidTransform> {
    match ds.truth {
        GroundTruth::Rigid(t) => Ok(t),
        _ => Err(Error::Config("registration needs reg3d datasets".into())),
    }
}

fn run_ransac(cfg: &RunConfig, pairs: ndarray::ArrayView2<f64>, truth: &RigidTransform, seed: u64) -> Result<RegistrationOutcome> {
    let tau = cfg.register.inlier_tau.or(cfg.data.label_tau).unwrap_or(0.1);
    let r = ransac_registration(pairs, cfg.register.iterations, tau, seed)?;
    Ok(match r.transform {
        Some(t) => RegistrationOutcome::from_estimate(&t.rotation, &t.translation, &truth.rotation, &truth.translation),
        None => RegistrationOutcome::failed(),
    })
}

/// Register every scene, raw and (when a network is given) after keeping
/// only pairs predicted as inliers.
pub fn register_scenes(cfg: &RunConfig, scenes: &[Dataset], mut network: Option<&mut Network>) -> Result<Vec<SceneResult>> {
    let rseed = ransac_seed(cfg);
    let resolution = cfg.data.resolution.unwrap_or(1.0);
    scenes
        .iter()
        .enumerate()
        .map(|(i, ds)| {
            let truth = rigid_truth(ds)?;
            let seed = indexed_seed(rseed, i as u64);
            let raw = run_ransac(cfg, ds.points.view(), &truth, seed)?;
            let mut res = SceneResult {
                scene: i,
                raw,
                raw_inlier_ratio: ds.inlier_ratio(),
                filtered: None,
                kept: None,
                filtered_inlier_ratio: None,
            };
            if let Some(net) = network.as_deref_mut() {
                let q = prepare_points(ds.points.view(), resolution)?;
                let plan = Plan::new(q.tensor.clone(), net.config(), net.kind())?;
                let logits: Array1<f64> = net.logits(&plan)?;
                let pred = predictions_from_logits(&logits, &q.provenance)?;
                let keep: Vec<usize> = (0..ds.len()).filter(|&k| pred.inlier[k]).collect();
                let kept = ds.points.select(Axis(0), &keep);
                let kept_in = keep.iter().filter(|&&k| ds.labels[k]).count();
                res.filtered = Some(run_ransac(cfg, kept.view(), &truth, seed)?);
                res.kept = Some(keep.len());
                res.filtered_inlier_ratio = Some(if keep.is_empty() { 0.0 } else { kept_in as f64 / keep.len() as f64 });
            }
            Ok(res)
        })
        .collect()
}

/// Summary rows: `none` always, `network` when filtering ran.
pub fn registration_rows(cfg: &RunConfig, scenes: &[Dataset], results: &[SceneResult]) -> Result<Vec<RegistrationRow>> {
    let (rt, tt) = (cfg.register.rotation_threshold_deg, cfg.register.translation_threshold);
    let row = |name: &str, outcomes: Vec<RegistrationOutcome>, kept: Vec<usize>, inliers: usize| -> Result<RegistrationRow> {
        let total: usize = kept.iter().sum();
        let means = metrics::mean_errors_of_successes(&outcomes, rt, tt);
        Ok(RegistrationRow {
            filter: name.into(),
            scenes: outcomes.len(),
            success_rate: metrics::success_rate(&outcomes, rt, tt)?,
            mean_rotation_error_deg: means.map(|m| m.0),
            mean_translation_error: means.map(|m| m.1),
            inlier_ratio: if total == 0 { 0.0 } else { inliers as f64 / total as f64 },
            mean_pairs: total as f64 / outcomes.len().max(1) as f64,
        })
    };
    let mut rows = vec![row(
        "none",
        results.iter().map(|r| r.raw).collect(),
        scenes.iter().map(Dataset::len).collect(),
        scenes.iter().map(Dataset::inlier_count).sum(),
    )?];
    if results.iter().all(|r| r.filtered.is_some()) && !results.is_empty() {
        let inliers = results
            .iter()
            .map(|r| (r.filtered_inlier_ratio.unwrap_or(0.0) * r.kept.unwrap_or(0) as f64).round() as usize)
            .sum();
        rows.push(row(
            "network",
            results.iter().filter_map(|r| r.filtered).collect(),
            results.iter().filter_map(|r| r.kept).collect(),
            inliers,
        )?);
    }
    Ok(rows)
}

pub fn registration_scenes(cfg: &RunConfig) -> Result<Vec<Dataset>> {
    let seed = scene_seed(cfg);
    (0..cfg.register.scenes).map(|i| generate_instance(cfg, indexed_seed(seed, i as u64))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(task: Task) -> RunConfig {
        let mut c = RunConfig { task, ..Default::default() };
        c.set("data.points=300").unwrap();
        c.set("model.channels=[4, 6]").unwrap();
        c.set("model.levels=2").unwrap();
        c.set("train.steps=3").unwrap();
        c.set("train.eval_instances=1").unwrap();
        c.set("train.eval_every=2").unwrap();
        if task != Task::Line {
            c.set("model.kernel_shape=\"cross\"").unwrap();
        }
        c.resolve().unwrap();
        c
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = tiny_cfg(Task::Line);
        let a = train(&cfg, |_| {}, |_| {}).unwrap();
        let b = train(&cfg, |_| {}, |_| {}).unwrap();
        let la: Vec<f64> = a.steps.iter().map(|s| s.loss).collect();
        let lb: Vec<f64> = b.steps.iter().map(|s| s.loss).collect();
        assert_eq!(la, lb);
        assert_eq!(a.evals, b.evals);
        assert_eq!(a.evals.len(), 2);
    }

    #[test]
    fn batched_training_runs() {
        let mut cfg = tiny_cfg(Task::Plane);
        cfg.train.batch_size = 2;
        let out = train(&cfg, |_| {}, |_| {}).unwrap();
        assert!(out.steps.iter().all(|s| s.loss.is_finite()));
        let mut cfg = tiny_cfg(Task::Line);
        cfg.model.kind = crate::models::ModelKind::Mlp;
        cfg.train.batch_size = 2;
        assert!(train(&cfg, |_| {}, |_| {}).is_ok());
    }

    #[test]
    fn zero_steps_still_evaluates() {
        let mut cfg = tiny_cfg(Task::Epipolar);
        cfg.train.steps = 0;
        let out = train(&cfg, |_| {}, |_| {}).unwrap();
        assert!(out.steps.is_empty());
        assert_eq!(out.evals.len(), 1);
    }

    #[test]
    fn registration_rows_without_network() {
        let mut cfg = tiny_cfg(Task::Reg3d);
        cfg.register.scenes = 3;
        cfg.register.iterations = 50;
        let scenes = registration_scenes(&cfg).unwrap();
        let res = register_scenes(&cfg, &scenes, None).unwrap();
        let rows = registration_rows(&cfg, &scenes, &res).unwrap();
        assert_eq!(rows.len(), 1);
        assert!((0.0..=1.0).contains(&rows[0].success_rate));
    }
}
