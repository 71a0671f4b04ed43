//! The five subcommands. Each returns an exit status on success and an
//! [`IbtError`] otherwise; [`crate::exit_code`] maps errors to statuses.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ibt_core::data::{normalize_cloud, write_colored_ply, Dataset};
use ibt_core::gradcheck::{check_injected_fault, check_layer, check_model, check_ops, GradCheckConfig, GradCheckReport};
use ibt_core::model::{config_path, IbtConfig, IbtModel, Task};
use ibt_core::numerics::Tensor;
use ibt_core::trainer::{evaluate, predict_parts, train, MetricsReport, TrainOutcome};
use ibt_core::{IbtError, Result};
use serde::Serialize;

use crate::ablation::{self, AblationReport};
use crate::config::{load_cloud, DataSource, RunConfig};
use crate::rundir;

pub const EXIT_GRADCHECK_FAILED: i32 = 5;

/// Deterministic training summary: no timings, no paths.
#[derive(Debug, Serialize)]
struct TrainMetrics<'a> {
    task: String,
    seed: u64,
    num_params: usize,
    train_hash: String,
    test_hash: String,
    epochs_run: usize,
    best_epoch: Option<usize>,
    train: &'a Option<MetricsReport>,
    test: &'a Option<MetricsReport>,
}

#[derive(Debug, Serialize)]
struct TrainReport<'a> {
    run_dir: String,
    elapsed_secs: f64,
    outcome: &'a TrainOutcome,
}

pub fn train_cmd(cfg: &RunConfig, run_dir: Option<&Path>) -> Result<(i32, PathBuf)> {
    let start = Instant::now();
    let (train_ds, test_ds) = cfg.datasets()?;
    let dir = rundir::create(cfg, &cfg.model.task.to_string(), run_dir)?;
    let ckpt = dir.join(rundir::CHECKPOINT_DIR);
    let mut model = IbtModel::new(cfg.model.clone(), cfg.seed)?;
    println!(
        "training {} model ({} parameters) on {} clouds, testing on {}",
        cfg.model.task,
        model.num_params(),
        train_ds.len(),
        test_ds.len()
    );
    let outcome = train(&mut model, &train_ds, Some(&test_ds), &cfg.train_config(Some(ckpt)))?;

    let mut csv = String::from("epoch,step,loss\n");
    for r in &outcome.loss_history {
        let _ = writeln!(csv, "{},{},{}", r.epoch, r.step, r.loss);
    }
    rundir::write(&dir.join("loss.csv"), &csv)?;
    let metrics = TrainMetrics {
        task: cfg.model.task.to_string(),
        seed: cfg.seed,
        num_params: model.num_params(),
        train_hash: train_ds.hash(),
        test_hash: test_ds.hash(),
        epochs_run: outcome.epochs_run,
        best_epoch: outcome.best_epoch,
        train: &outcome.train,
        test: &outcome.test,
    };
    rundir::write_json(&dir.join("metrics.json"), &metrics)?;
    let table = match &outcome.test {
        Some(m) => metrics_table(m, cfg.model.task, &test_ds),
        None => String::from("no epochs were run\n"),
    };
    rundir::write(&dir.join("table.md"), &table)?;
    rundir::write_json(
        &dir.join("report.json"),
        &TrainReport {
            run_dir: dir.display().to_string(),
            elapsed_secs: start.elapsed().as_secs_f64(),
            outcome: &outcome,
        },
    )?;
    print!("{table}");
    println!("run directory: {}", dir.display());
    Ok((0, dir))
}

/// Percent with one decimal, as in published tables.
fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.1}", 100.0 * v))
}

/// Classification: one mAcc/OA row. Segmentation: overall mIoUs then one
/// IoU column per category present in the dataset.
pub fn metrics_table(m: &MetricsReport, task: Task, ds: &Dataset) -> String {
    let mut out = String::new();
    match task {
        Task::Classification => {
            let _ = writeln!(out, "| Method | mAcc | OA |");
            let _ = writeln!(out, "|---|---:|---:|");
            let _ = writeln!(out, "| IBT | {} | {} |", pct(m.mean_class_accuracy), pct(m.overall_accuracy));
        }
        Task::Segmentation => {
            let present: Vec<usize> = (0..ds.class_names.len())
                .filter(|&c| ds.clouds.iter().any(|p| p.category == Some(c)))
                .collect();
            let names: Vec<&str> = present.iter().map(|&c| ds.class_names[c].as_str()).collect();
            let _ = writeln!(out, "| Method | cat. mIoU | ins. mIoU | {} |", names.join(" | "));
            let _ = writeln!(out, "|---|---:|---:|{}", "---:|".repeat(present.len()));
            let per: Vec<String> = present.iter().map(|&c| pct(m.per_class_iou.get(c).copied().flatten())).collect();
            let _ = writeln!(
                out,
                "| IBT | {} | {} | {} |",
                pct(m.category_miou),
                pct(m.instance_miou),
                per.join(" | ")
            );
        }
    }
    out
}

/// Names the first field where the checkpoint's model config and the run
/// config disagree.
pub fn config_mismatch(checkpoint: &IbtConfig, run: &IbtConfig) -> Option<String> {
    checkpoint
        .to_pairs()
        .into_iter()
        .zip(run.to_pairs())
        .find(|(a, b)| a.1 != b.1)
        .map(|((key, a), (_, b))| format!("model.{key}: checkpoint has {a}, config has {b}"))
}

fn checkpoint_config(checkpoint: &Path) -> Result<IbtConfig> {
    let path = config_path(checkpoint);
    let text = std::fs::read_to_string(&path).map_err(|e| IbtError::io(&path, e))?;
    IbtConfig::from_text(&text)
}

#[derive(Debug, Serialize)]
struct EvalOutput<'a> {
    checkpoint: String,
    split: String,
    metrics: &'a MetricsReport,
}

pub fn eval_cmd(cfg: &RunConfig, checkpoint: &Path, split: &str, json_out: Option<&Path>) -> Result<(i32, MetricsReport)> {
    let saved = checkpoint_config(checkpoint)?;
    if let Some(field) = config_mismatch(&saved, &cfg.model) {
        return Err(IbtError::Config(format!("checkpoint does not match the config: {field}")));
    }
    let model = IbtModel::load(checkpoint)?;
    let (train_ds, test_ds) = cfg.datasets()?;
    let ds = match split {
        "train" => train_ds,
        "test" => test_ds,
        other => return Err(IbtError::Config(format!("split must be train or test, got {other:?}"))),
    };
    let m = evaluate(&model, &ds, cfg.train.batch_size)?;
    print!("{}", metrics_table(&m, cfg.model.task, &ds));
    if let Some(path) = json_out {
        rundir::write_json(
            path,
            &EvalOutput {
                checkpoint: checkpoint.display().to_string(),
                split: split.into(),
                metrics: &m,
            },
        )?;
    }
    Ok((0, m))
}

pub fn ablate_cmd(cfg: &RunConfig, reps: usize, jobs: usize, run_dir: Option<&Path>) -> Result<(i32, PathBuf, AblationReport)> {
    if reps == 0 {
        return Err(IbtError::Config("--reps must be at least 1".into()));
    }
    let dir = rundir::create(cfg, "ablate", run_dir)?;
    let cells = ablation::grid();
    let total = reps * cells.len();
    let mut seen = 0;
    println!("ablation grid: {} cells x {reps} repetitions on {jobs} thread(s)", cells.len());
    let report = ablation::run_grid(cfg, &cells, reps, jobs, |r| {
        seen += 1;
        match (&r.error, r.metric) {
            (Some(e), _) => eprintln!("[{seen}/{total}] rep {} {}: failed: {e}", r.rep, r.cell),
            (None, m) => eprintln!("[{seen}/{total}] rep {} {}: {}", r.rep, r.cell, pct(m)),
        }
    });
    let table = ablation::render(&report, &cells);
    rundir::write(&dir.join("table.md"), &table)?;
    rundir::write_json(&dir.join("report.json"), &report)?;
    print!("{table}");
    println!("run directory: {}", dir.display());
    Ok((0, dir, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Op,
    Layer,
    Model,
}

impl std::str::FromStr for Scope {
    type Err = IbtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "layer" => Ok(Scope::Layer),
            "model" => Ok(Scope::Model),
            other => Err(IbtError::Config(format!("scope must be op, layer or model, got {other:?}"))),
        }
    }
}

/// Runs the checks at `scope`. `inject_fault` adds the wrong-sign fixture,
/// whose report is expected to fail and therefore fails the command.
pub fn gradcheck_cmd(scope: Scope, seed: u64, inject_fault: bool, out: Option<&Path>) -> Result<(i32, Vec<GradCheckReport>)> {
    let cfg = GradCheckConfig { seed, ..Default::default() };
    let mut reports = match scope {
        Scope::Op => check_ops(&cfg)?,
        Scope::Layer => vec![check_layer(&cfg)?],
        Scope::Model => vec![check_model(&cfg)?],
    };
    if inject_fault {
        reports.push(check_injected_fault(&cfg)?);
    }
    for r in &reports {
        println!("{}", r.to_table());
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.scope.as_str()).collect();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| IbtError::io(dir, e))?;
        rundir::write_json(&dir.join("report.json"), &reports)?;
    }
    if failed.is_empty() {
        println!("gradcheck passed: {} report(s)", reports.len());
        Ok((0, reports))
    } else {
        println!("gradcheck FAILED: {}", failed.join(", "));
        Ok((EXIT_GRADCHECK_FAILED, reports))
    }
}

/// Resolves `--category` given as an index or a class name.
fn resolve_category(value: &str, names: &[String], count: usize) -> Result<usize> {
    let idx = match value.parse::<usize>() {
        Ok(i) => i,
        Err(_) => names
            .iter()
            .position(|n| n == value)
            .ok_or_else(|| IbtError::Config(format!("unknown category {value:?}; known: {}", names.join(", "))))?,
    };
    if idx >= count {
        return Err(IbtError::Config(format!("category {idx} out of range for {count} categories")));
    }
    Ok(idx)
}

/// Segments one cloud and writes a colored PLY with the original
/// coordinates. Returns the predicted labels.
pub fn export_cmd(checkpoint: &Path, input: &Path, output: &Path, category: &str, cfg: Option<&RunConfig>) -> Result<(i32, Vec<usize>)> {
    let model = IbtModel::load(checkpoint)?;
    if model.config.task != Task::Segmentation {
        return Err(IbtError::Config(format!(
            "{} is a {} checkpoint; export needs a segmentation model",
            checkpoint.display(),
            model.config.task
        )));
    }
    let (names, ranges) = match cfg {
        Some(c) => match &c.data.source {
            DataSource::Synthetic => (
                c.data.families.iter().map(|f| f.name().to_string()).collect(),
                Some(c.synthetic_part_ranges()),
            ),
            DataSource::Files { .. } => {
                let (train_ds, _) = c.datasets()?;
                (train_ds.class_names, Some(train_ds.part_ranges))
            }
        },
        None => (Vec::new(), None),
    };
    let cat = resolve_category(category, &names, model.config.num_categories)?;
    let parts = ranges.and_then(|r| r.get(cat).cloned());
    let cloud = load_cloud(input)?;
    let normalize = cfg.is_none_or(|c| c.data.normalize);
    let fed = if normalize { normalize_cloud(&cloud) } else { cloud.clone() };
    let flat: Vec<f64> = fed.coords.iter().flatten().copied().collect();
    let coords = Tensor::new(flat, &[1, fed.len(), 3])?;
    let labels = predict_parts(&model, &coords, cat, parts)?;
    write_colored_ply(&cloud, &labels, output)?;
    println!("wrote {} points to {}", labels.len(), output.display());
    Ok((0, labels))
}
