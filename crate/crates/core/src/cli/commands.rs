//! Subcommand bodies. Each resolves its config, writes its artifacts into
//! the output directory and prints a short summary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::bench;
use super::config::RunConfig;
use super::pipeline::{self, EvalRecord, RegistrationRow, StepRecord};
use super::report::{write_csv, write_jsonl, write_manifest, Report};
use super::ConfigArgs;
use crate::error::{Error, Result};
use crate::geom::Dataset;
use crate::gradcheck::{layer_checks, network_check, CheckResult};
use crate::models::{ModelKind, Network};
use crate::rng::indexed_seed;

pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-4;

/// File, then overrides in order, then task defaults.
pub fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_toml(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    for s in &args.overrides {
        cfg.set(s)?;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    cfg.resolve()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Reads a dataset; `.csv` files as CSV, anything else as binary.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        Dataset::read_csv(file)
    } else {
        Dataset::read_binary(file)
    }
}

fn read_datasets(paths: &[PathBuf]) -> Result<Vec<Dataset>> {
    paths.iter().map(|p| read_dataset(p)).collect()
}

pub fn load_model(path: &Path) -> Result<Network> {
    let file = File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Network::load(&mut std::io::BufReader::new(file))
}

#[derive(Serialize)]
struct InstanceEntry {
    file: String,
    rows: usize,
    inliers: usize,
    inlier_ratio: f64,
    truth: Vec<f64>,
}

#[derive(Serialize)]
struct GenerateDetails {
    instances: Vec<InstanceEntry>,
    total_rows: usize,
    total_inliers: usize,
    inlier_ratio: f64,
}

pub fn generate(args: &ConfigArgs, instances: usize, csv: bool) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = out_dir(&cfg)?;
    let seed = pipeline::train_data_seed(&cfg);
    let mut entries = Vec::with_capacity(instances);
    for i in 0..instances {
        let ds = pipeline::generate_instance(&cfg, indexed_seed(seed, i as u64))?;
        let file = format!("dataset_{i:03}.bin");
        ds.write_binary(File::create(dir.join(&file))?)?;
        if csv {
            ds.write_csv(File::create(dir.join(format!("dataset_{i:03}.csv")))?)?;
        }
        entries.push(InstanceEntry {
            file,
            rows: ds.len(),
            inliers: ds.inlier_count(),
            inlier_ratio: ds.inlier_ratio(),
            truth: ds.truth.to_params(),
        });
    }
    let total_rows: usize = entries.iter().map(|e| e.rows).sum();
    let total_inliers: usize = entries.iter().map(|e| e.inliers).sum();
    let inlier_ratio = if total_rows == 0 { 0.0 } else { total_inliers as f64 / total_rows as f64 };
    println!("wrote {instances} {} instance(s) to {}: {total_rows} rows, inlier ratio {inlier_ratio:.4}", cfg.task, dir.display());
    write_manifest(&dir, "generate", &cfg, GenerateDetails { instances: entries, total_rows, total_inliers, inlier_ratio })
}

/// One evaluation interval: mean training loss since the previous
/// evaluation and the held-out metrics.
#[derive(Clone, Debug, Serialize)]
struct EvalLogRow {
    step: usize,
    train_loss: Option<f64>,
    f1: Option<f64>,
    precision: Option<f64>,
    recall: Option<f64>,
    ap: Option<f64>,
    points: usize,
    positives: usize,
    predicted_positive: usize,
}

fn eval_report(report: &mut Report, m: &pipeline::EvalMetrics) {
    report.push("f1", m.f1);
    report.push("precision", m.precision);
    report.push("recall", m.recall);
    report.push("ap", m.ap);
    report.push("points", Some(m.points as f64));
    report.push("positives", Some(m.positives as f64));
    report.push("predicted_positive", Some(m.predicted_positive as f64));
}

#[derive(Serialize)]
struct TrainDetails {
    model_file: &'static str,
    parameters: usize,
    steps: usize,
    final_loss: Option<f64>,
    datasets: Vec<String>,
}

pub fn train(args: &ConfigArgs, data: &[PathBuf]) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = out_dir(&cfg)?;
    let fixed = if data.is_empty() { None } else { Some(read_datasets(data)?) };
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;

    // Streamed so a numerical abort still leaves the steps before it.
    let mut log = BufWriter::new(File::create(dir.join("train_log.jsonl"))?);
    let mut log_error: Option<std::io::Error> = None;
    let mut rows: Vec<EvalLogRow> = Vec::new();
    let on_step = |s: &StepRecord| {
        if log_error.is_none() {
            let line = serde_json::to_string(s).expect("step record serializes");
            if let Err(e) = writeln!(log, "{line}") {
                log_error = Some(e);
            }
        }
    };
    let mut seen = 0usize;
    let trained = {
        let on_eval = |e: &EvalRecord| {
            let m = &e.metrics;
            println!(
                "step {:>6}  f1 {}  ap {}",
                e.step,
                m.f1.map_or("undefined".into(), |v| format!("{v:.4}")),
                m.ap.map_or("undefined".into(), |v| format!("{v:.4}"))
            );
            rows.push(EvalLogRow {
                step: e.step,
                train_loss: None,
                f1: m.f1,
                precision: m.precision,
                recall: m.recall,
                ap: m.ap,
                points: m.points,
                positives: m.positives,
                predicted_positive: m.predicted_positive,
            });
        };
        pipeline::train_on(&cfg, fixed.as_deref(), on_step, on_eval)
    };
    log.flush()?;
    let outcome = trained?;
    if let Some(e) = log_error {
        return Err(e.into());
    }
    // Interval losses from the per-step records.
    for row in &mut rows {
        let upto = row.step.min(outcome.steps.len());
        if upto > seen {
            let chunk = &outcome.steps[seen..upto];
            row.train_loss = Some(chunk.iter().map(|s| s.loss).sum::<f64>() / chunk.len() as f64);
            seen = upto;
        }
    }
    write_jsonl(&dir.join("eval_log.jsonl"), &rows)?;
    write_csv(&dir.join("eval_log.csv"), &rows)?;

    let mut model = BufWriter::new(File::create(dir.join("model.hdmd"))?);
    outcome.network.save(&mut model)?;
    model.flush()?;

    let mut report = Report::new(&cfg, &cfg.model.kind.to_string());
    let final_loss = outcome.steps.last().map(|s| s.loss);
    report.push("final_loss", final_loss);
    if let Some(last) = outcome.evals.last() {
        eval_report(&mut report, &last.metrics);
    }
    report.write(&dir, "metrics")?;
    write_manifest(
        &dir,
        "train",
        &cfg,
        TrainDetails {
            model_file: "model.hdmd",
            parameters: outcome.network.params().numel(),
            steps: outcome.steps.len(),
            final_loss,
            datasets: data.iter().map(|p| p.display().to_string()).collect(),
        },
    )
}

#[derive(Serialize)]
struct EvalDetails {
    model: String,
    datasets: Vec<String>,
}

pub fn eval(args: &ConfigArgs, model: &Path, data: &[PathBuf]) -> Result<()> {
    let cfg = load_config(args)?;
    let mut net = load_model(model)?;
    let net_cfg = net.config().clone();
    let items = if data.is_empty() {
        pipeline::eval_set(&cfg, &net_cfg, net.kind())?
    } else {
        pipeline::eval_items(read_datasets(data)?, &cfg, &net_cfg, net.kind())?
    };
    let metrics = pipeline::evaluate(&mut net, &items)?;
    let dir = out_dir(&cfg)?;
    let mut report = Report::new(&cfg, &net.kind().to_string());
    eval_report(&mut report, &metrics);
    report.print();
    report.write(&dir, "eval")?;
    write_manifest(
        &dir,
        "eval",
        &cfg,
        EvalDetails {
            model: model.display().to_string(),
            datasets: data.iter().map(|p| p.display().to_string()).collect(),
        },
    )
}

fn registration_report(cfg: &RunConfig, rows: &[RegistrationRow]) -> Report {
    let mut report = Report::new(cfg, "none");
    for row in rows {
        let mut r = report.with_model(&row.filter);
        r.push("success_rate", Some(row.success_rate));
        r.push("mean_rotation_error_deg", row.mean_rotation_error_deg);
        r.push("mean_translation_error", row.mean_translation_error);
        r.push("inlier_ratio", Some(row.inlier_ratio));
        r.push("mean_pairs", Some(row.mean_pairs));
        report.extend(r);
    }
    report
}

fn print_registration(rows: &[RegistrationRow]) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!("{:<8} {:>7} {:>9} {:>10} {:>10} {:>9} {:>9}", "filter", "scenes", "success", "rot_deg", "trans", "inliers", "pairs");
    for r in rows {
        println!(
            "{:<8} {:>7} {:>9.4} {:>10} {:>10} {:>9.4} {:>9.1}",
            r.filter,
            r.scenes,
            r.success_rate,
            fmt(r.mean_rotation_error_deg),
            fmt(r.mean_translation_error),
            r.inlier_ratio,
            r.mean_pairs
        );
    }
}

#[derive(Serialize)]
struct RegisterDetails {
    model: Option<String>,
    datasets: Vec<String>,
    rows: Vec<RegistrationRow>,
}

pub fn register(args: &ConfigArgs, model: Option<&Path>, data: &[PathBuf]) -> Result<()> {
    let cfg = load_config(args)?;
    let mut net = model.map(load_model).transpose()?;
    let scenes = if data.is_empty() { pipeline::registration_scenes(&cfg)? } else { read_datasets(data)? };
    let results = pipeline::register_scenes(&cfg, &scenes, net.as_mut())?;
    let rows = pipeline::registration_rows(&cfg, &scenes, &results)?;
    let dir = out_dir(&cfg)?;
    print_registration(&rows);
    write_jsonl(&dir.join("scenes.jsonl"), &results)?;
    write_csv(&dir.join("registration.csv"), &rows)?;
    registration_report(&cfg, &rows).write(&dir, "metrics")?;
    write_manifest(
        &dir,
        "register",
        &cfg,
        RegisterDetails {
            model: model.map(|p| p.display().to_string()),
            datasets: data.iter().map(|p| p.display().to_string()).collect(),
            rows,
        },
    )
}

#[derive(Serialize)]
struct GradcheckDetails {
    instances: usize,
    layer_tolerance: f64,
    network_tolerance: f64,
    failed: Vec<String>,
}

pub fn gradcheck(args: &ConfigArgs, instances: usize) -> Result<()> {
    let cfg = load_config(args)?;
    let mut results: Vec<(CheckResult, f64)> =
        layer_checks(instances, cfg.seed)?.into_iter().map(|r| (r, LAYER_TOLERANCE)).collect();
    for kind in [ModelKind::Unet, ModelKind::Mlp] {
        results.push((network_check(kind, cfg.seed)?, NETWORK_TOLERANCE));
    }
    let mut report = Report::new(&cfg, "gradcheck");
    let mut failed = Vec::new();
    for (r, tol) in &results {
        let ok = r.passed(*tol);
        println!("{:<24} {:>4} {:>12.3e}  {}", r.name, r.instances, r.max_rel_error, if ok { "PASS" } else { "FAIL" });
        report.push(format!("{}.max_rel_error", r.name), Some(r.max_rel_error));
        if !ok {
            failed.push(r.name.clone());
        }
    }
    let dir = out_dir(&cfg)?;
    report.write(&dir, "gradcheck")?;
    let details = GradcheckDetails {
        instances,
        layer_tolerance: LAYER_TOLERANCE,
        network_tolerance: NETWORK_TOLERANCE,
        failed: failed.clone(),
    };
    write_manifest(&dir, "gradcheck", &cfg, details)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn bench(args: &ConfigArgs, pool_sizes: &[usize], pool_dim: usize, repeats: usize, map_points: usize) -> Result<()> {
    let cfg = load_config(args)?;
    let mut rows = Vec::new();
    let row = |section: &str, name: String, dim: usize, n: usize, value: f64, unit: &str| bench::BenchRow {
        section: section.into(),
        name,
        dim,
        n,
        value,
        unit: unit.into(),
    };

    println!("matmuls per convolution, K = {}", cfg.model.kernel_size);
    println!("{:>4} {:>8} {:>12}", "D", "cross", "hypercubic");
    for c in bench::matmul_counts(cfg.model.kernel_size, &(1..=8).collect::<Vec<_>>())? {
        println!("{:>4} {:>8} {:>12}", c.dim, c.cross, c.hypercubic);
        rows.push(row("matmul_count", "cross".into(), c.dim, 0, c.cross as f64, "matmuls"));
        rows.push(row("matmul_count", "hypercubic".into(), c.dim, 0, c.hypercubic as f64, "matmuls"));
    }

    println!("\nkernel-map build, K = 3, N = {map_points}");
    println!("{:>4} {:<11} {:>8} {:>10} {:>10}", "D", "shape", "offsets", "pairs", "ms");
    for t in bench::kernel_map_timings(&[2, 4, 6, 8], map_points, cfg.model.max_kernel_volume, cfg.seed)? {
        println!("{:>4} {:<11} {:>8} {:>10} {:>10.2}", t.dim, t.shape.to_string(), t.offsets, t.pairs, t.seconds * 1e3);
        rows.push(row("kernel_map", format!("{}_seconds", t.shape), t.dim, t.n, t.seconds, "s"));
        rows.push(row("kernel_map", format!("{}_pairs", t.shape), t.dim, t.n, t.pairs as f64, "pairs"));
    }

    println!("\nstride-2 sum pooling, D = {pool_dim}, best of {repeats}");
    println!("{:>9} {:>10} {:>10} {:>7}", "N", "ms(N)", "ms(2N)", "ratio");
    for t in bench::pooling_scaling(pool_dim, pool_sizes, repeats, cfg.seed)? {
        println!("{:>9} {:>10.2} {:>10.2} {:>7.2}", t.n, t.seconds * 1e3, t.seconds_doubled * 1e3, t.ratio);
        rows.push(row("pooling", "seconds".into(), pool_dim, t.n, t.seconds, "s"));
        rows.push(row("pooling", "seconds".into(), pool_dim, 2 * t.n, t.seconds_doubled, "s"));
        rows.push(row("pooling", "doubling_ratio".into(), pool_dim, t.n, t.ratio, "x"));
    }

    let dir = out_dir(&cfg)?;
    write_jsonl(&dir.join("bench.jsonl"), &rows)?;
    write_csv(&dir.join("bench.csv"), &rows)?;
    write_manifest(&dir, "bench", &cfg, serde_json::json!({ "pool_sizes": pool_sizes, "pool_dim": pool_dim }))
}
