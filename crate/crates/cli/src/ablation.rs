//! Ablation grid: module rows A to D, a k sweep and single-option removals,
//! each trained from scratch on the same data within a repetition.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ibt_core::data::Dataset;
use ibt_core::layers::derive_seed;
use ibt_core::model::{IbtConfig, IbtModel, Task};
use ibt_core::trainer::{evaluate, train, MetricsReport};
use ibt_core::Result;
use serde::Serialize;

use crate::config::RunConfig;

pub const K_SWEEP: [usize; 4] = [10, 20, 40, 60];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Module,
    PositionEncoding,
    FeaturePooling,
    Transformer,
}

impl Group {
    pub fn title(self) -> &'static str {
        match self {
            Group::Module => "Modules",
            Group::PositionEncoding => "Relative Position Encoding",
            Group::FeaturePooling => "Feature Pooling",
            Group::Transformer => "Locality Aware Transformer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Change {
    None,
    NoTransformer,
    NoPositionEncoding,
    NoPoolingModule,
    K(usize),
    NoMaxPool,
    NoAttentionPool,
    NoGateW,
    NoPositionEmbedding,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub name: String,
    pub label: String,
    pub group: Group,
    /// Removes exactly one component of the full model; compared against
    /// the full model in the trend summary.
    pub single_branch: bool,
    /// Module checkmarks (position, pooling, transformer) for rows A to D.
    pub modules: Option<[bool; 3]>,
    change: Change,
}

impl Cell {
    fn new(name: &str, label: &str, group: Group, change: Change) -> Self {
        let single_branch = !matches!(change, Change::None | Change::K(_));
        let modules = match change {
            Change::NoTransformer => Some([true, true, false]),
            Change::NoPositionEncoding => Some([false, true, true]),
            Change::NoPoolingModule => Some([false, false, true]),
            Change::None => Some([true, true, true]),
            _ => None,
        };
        Cell {
            name: name.into(),
            label: label.into(),
            group,
            single_branch,
            modules,
            change,
        }
    }

    pub fn apply(&self, base: &IbtConfig) -> IbtConfig {
        let mut c = base.clone();
        let s = &mut c.switches;
        match self.change {
            Change::None => {}
            Change::NoTransformer => s.use_transformer = false,
            Change::NoPositionEncoding => s.use_position_encoding = false,
            // Dropping the local branch drops its edge encoder as well.
            Change::NoPoolingModule => {
                s.use_pooling_module = false;
                s.use_position_encoding = false;
            }
            Change::K(k) => c.k = k,
            Change::NoMaxPool => s.use_max_pool = false,
            Change::NoAttentionPool => s.use_attention_pool = false,
            Change::NoGateW => s.use_channel_gate_w = false,
            Change::NoPositionEmbedding => s.use_position_embedding = false,
        }
        c
    }
}

pub const FULL: &str = "D";

/// Every row of both tables, in table order.
pub fn grid() -> Vec<Cell> {
    let mut cells = vec![
        Cell::new("A", "A", Group::Module, Change::NoTransformer),
        Cell::new("B", "B", Group::Module, Change::NoPositionEncoding),
        Cell::new("C", "C", Group::Module, Change::NoPoolingModule),
        Cell::new(FULL, "D", Group::Module, Change::None),
    ];
    for k in K_SWEEP {
        cells.push(Cell::new(&format!("k={k}"), &format!("k={k}"), Group::PositionEncoding, Change::K(k)));
    }
    cells.extend([
        Cell::new("no_max_pool", "w/o maxpooling", Group::FeaturePooling, Change::NoMaxPool),
        Cell::new("no_attention_pool", "w/o attention pooling", Group::FeaturePooling, Change::NoAttentionPool),
        Cell::new("no_gate_w", "w/o weight W", Group::Transformer, Change::NoGateW),
        Cell::new("no_position_embedding", "w/o position embedding", Group::Transformer, Change::NoPositionEmbedding),
    ]);
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub cell: String,
    pub rep: usize,
    pub seed: u64,
    pub num_params: Option<usize>,
    pub epochs_run: Option<usize>,
    /// OA (classification) or instance mIoU (segmentation) on the test set.
    pub metric: Option<f64>,
    /// mAcc (classification) or category mIoU (segmentation).
    pub secondary: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trend {
    pub ablation: String,
    pub label: String,
    /// Repetitions where the full model scored at least as well.
    pub full_at_least: usize,
    /// Repetitions where both cells finished.
    pub compared: usize,
    pub share: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub task: String,
    pub reps: usize,
    pub seed: u64,
    pub results: Vec<CellResult>,
    pub trend: Vec<Trend>,
    pub trend_threshold: f64,
    pub failed_cells: usize,
}

/// Share of repetitions the full model must win (ties included).
pub const TREND_THRESHOLD: f64 = 0.6;

pub fn rep_seed(seed: u64, rep: usize) -> u64 {
    derive_seed(seed, &format!("rep/{rep}"))
}

fn run_cell(cfg: &RunConfig, cell: &Cell, seed: u64, data: &Result<(Dataset, Dataset)>) -> Result<CellResult> {
    let (train_ds, test_ds) = data.as_ref().map_err(|e| ibt_core::IbtError::Data(e.to_string()))?;
    let model_cfg = cell.apply(&cfg.model);
    let mut model = IbtModel::new(model_cfg, seed)?;
    let mut tc = cfg.train_config(None);
    tc.seed = seed;
    // Scored once on the final model; no per-epoch test passes.
    let out = train(&mut model, train_ds, None, &tc)?;
    let test = evaluate(&model, test_ds, tc.batch_size)?;
    let (metric, secondary) = headline_pair(&test, cfg.model.task);
    Ok(CellResult {
        cell: cell.name.clone(),
        rep: 0,
        seed,
        num_params: Some(model.num_params()),
        epochs_run: Some(out.epochs_run),
        metric,
        secondary,
        error: None,
    })
}

pub fn headline_pair(m: &MetricsReport, task: Task) -> (Option<f64>, Option<f64>) {
    match task {
        Task::Classification => (m.overall_accuracy, m.mean_class_accuracy),
        Task::Segmentation => (m.instance_miou, m.category_miou),
    }
}

/// Runs `reps` repetitions of the grid on up to `jobs` threads. Failed cells
/// are recorded and the rest of the grid still runs.
pub fn run_grid(cfg: &RunConfig, cells: &[Cell], reps: usize, jobs: usize, mut progress: impl FnMut(&CellResult)) -> AblationReport {
    let data: Vec<Result<(Dataset, Dataset)>> = (0..reps)
        .map(|rep| {
            let mut c = cfg.clone();
            c.seed = rep_seed(cfg.seed, rep);
            c.datasets()
        })
        .collect();
    let work: Vec<(usize, usize)> = (0..reps).flat_map(|r| (0..cells.len()).map(move |c| (r, c))).collect();
    let next = AtomicUsize::new(0);
    let done = Mutex::new(Vec::with_capacity(work.len()));
    let (tx, rx) = std::sync::mpsc::channel::<CellResult>();
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, work.len().max(1)) {
            let tx = tx.clone();
            let (work, next, data, done) = (&work, &next, &data, &done);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(rep, c)) = work.get(i) else { break };
                let cell = &cells[c];
                let seed = derive_seed(rep_seed(cfg.seed, rep), &cell.name);
                let caught = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run_cell(cfg, cell, seed, &data[rep])));
                let failed = |msg: String| CellResult {
                    cell: cell.name.clone(),
                    rep,
                    seed,
                    num_params: None,
                    epochs_run: None,
                    metric: None,
                    secondary: None,
                    error: Some(msg),
                };
                let result = match caught {
                    Ok(Ok(r)) => CellResult { rep, ..r },
                    Ok(Err(e)) => failed(e.to_string()),
                    Err(_) => failed("cell panicked".into()),
                };
                done.lock().expect("result lock").push((i, result.clone()));
                let _ = tx.send(result);
            });
        }
        drop(tx);
        for r in rx {
            progress(&r);
        }
    });
    let mut done = done.into_inner().expect("result lock");
    done.sort_by_key(|(i, _)| *i);
    let results: Vec<CellResult> = done.into_iter().map(|(_, r)| r).collect();
    let trend = trend(cells, &results, reps);
    AblationReport {
        task: cfg.model.task.to_string(),
        reps,
        seed: cfg.seed,
        failed_cells: results.iter().filter(|r| r.error.is_some()).count(),
        results,
        trend,
        trend_threshold: TREND_THRESHOLD,
    }
}

fn metric_of(results: &[CellResult], cell: &str, rep: usize) -> Option<f64> {
    results.iter().find(|r| r.cell == cell && r.rep == rep).and_then(|r| r.metric)
}

pub fn trend(cells: &[Cell], results: &[CellResult], reps: usize) -> Vec<Trend> {
    cells
        .iter()
        .filter(|c| c.single_branch)
        .map(|c| {
            let pairs: Vec<(f64, f64)> = (0..reps)
                .filter_map(|r| Some((metric_of(results, FULL, r)?, metric_of(results, &c.name, r)?)))
                .collect();
            let wins = pairs.iter().filter(|(full, abl)| full >= abl).count();
            let share = wins as f64 / reps.max(1) as f64;
            Trend {
                ablation: c.name.clone(),
                label: c.label.clone(),
                full_at_least: wins,
                compared: pairs.len(),
                share,
                passed: share >= TREND_THRESHOLD,
            }
        })
        .collect()
}

fn mean(results: &[CellResult], cell: &str, pick: impl Fn(&CellResult) -> Option<f64>) -> Option<(f64, usize)> {
    let vals: Vec<f64> = results.iter().filter(|r| r.cell == cell).filter_map(pick).collect();
    (!vals.is_empty()).then(|| (vals.iter().sum::<f64>() / vals.len() as f64, vals.len()))
}

fn pct(v: Option<(f64, usize)>, reps: usize) -> String {
    match v {
        Some((m, n)) if n == reps => format!("{:.1}", 100.0 * m),
        Some((m, n)) => format!("{:.1} ({n}/{reps})", 100.0 * m),
        None => "failed".into(),
    }
}

/// Markdown tables: one for modules, one for options within modules, then
/// the trend summary. Values are test-set means over repetitions, in percent.
pub fn render(report: &AblationReport, cells: &[Cell]) -> String {
    let (first, second) = if report.task == "segmentation" {
        ("cat. mIoU", "ins. mIoU")
    } else {
        ("mAcc", "OA")
    };
    let reps = report.reps;
    let stats = |c: &Cell| {
        (
            pct(mean(&report.results, &c.name, |r| r.secondary), reps),
            pct(mean(&report.results, &c.name, |r| r.metric), reps),
        )
    };
    let mut out = String::new();
    let _ = writeln!(out, "## Ablation experiments for different modules\n");
    let _ = writeln!(out, "| Model | Position | Pooling | Transformer | {first} | {second} |");
    let _ = writeln!(out, "|---|:-:|:-:|:-:|---:|---:|");
    for c in cells.iter().filter(|c| c.group == Group::Module) {
        let m = c.modules.unwrap_or([true; 3]);
        let tick = |b: bool| if b { "✓" } else { "" };
        let (a, b) = stats(c);
        let _ = writeln!(out, "| {} | {} | {} | {} | {a} | {b} |", c.label, tick(m[0]), tick(m[1]), tick(m[2]));
    }
    let _ = writeln!(out, "\n## Ablation experiments for different options within the module\n");
    let _ = writeln!(out, "| Module | Option | {first} | {second} |");
    let _ = writeln!(out, "|---|---|---:|---:|");
    for c in cells.iter().filter(|c| c.group != Group::Module) {
        let (a, b) = stats(c);
        let _ = writeln!(out, "| {} | {} | {a} | {b} |", c.group.title(), c.label);
    }
    let _ = writeln!(
        out,
        "\n## Trend: full model (D) at least as good as each single-branch ablation\n"
    );
    let _ = writeln!(out, "| Ablation | Full ≥ ablation | Share | Pass |");
    let _ = writeln!(out, "|---|---:|---:|:-:|");
    for t in &report.trend {
        let _ = writeln!(
            out,
            "| {} | {}/{} | {:.0}% | {} |",
            t.label,
            t.full_at_least,
            reps,
            100.0 * t.share,
            if t.passed { "yes" } else { "no" }
        );
    }
    if report.failed_cells > 0 {
        let _ = writeln!(out, "\n{} cell(s) failed; see report.json.", report.failed_cells);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shape() {
        let g = grid();
        let modules: Vec<_> = g.iter().filter(|c| c.group == Group::Module).map(|c| c.label.as_str()).collect();
        assert_eq!(modules, ["A", "B", "C", "D"]);
        let ks: Vec<_> = g.iter().filter(|c| c.group == Group::PositionEncoding).map(|c| c.label.as_str()).collect();
        assert_eq!(ks, ["k=10", "k=20", "k=40", "k=60"]);
        assert_eq!(g.iter().filter(|c| c.single_branch).count(), 7);
    }

    #[test]
    fn cells_change_only_their_switch() {
        let base = IbtConfig::desk_classification(4);
        for c in grid() {
            let m = c.apply(&base);
            m.validate().unwrap();
            let differs = m != base;
            assert_eq!(differs, c.name != FULL && c.name != format!("k={}", base.k), "{}", c.name);
        }
    }

    #[test]
    fn ties_count_for_the_full_model() {
        let cells = grid();
        let mk = |cell: &str, rep, metric| CellResult {
            cell: cell.into(),
            rep,
            seed: 0,
            num_params: None,
            epochs_run: None,
            metric: Some(metric),
            secondary: None,
            error: None,
        };
        let results = vec![mk("D", 0, 0.5), mk("A", 0, 0.5), mk("D", 1, 0.5), mk("A", 1, 0.75)];
        let t = trend(&cells, &results, 2);
        let a = t.iter().find(|t| t.ablation == "A").unwrap();
        assert_eq!((a.full_at_least, a.compared, a.share), (1, 2, 0.5));
        assert!(!a.passed);
        // Cells without results count as losses for the full model.
        let b = t.iter().find(|t| t.ablation == "B").unwrap();
        assert_eq!((b.full_at_least, b.compared), (0, 0));
    }
}
