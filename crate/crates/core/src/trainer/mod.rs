//! Loss, momentum SGD, evaluation metrics and the training loop.

mod metrics;

pub use metrics::{accuracy, accuracy_from_confusion, aggregate_ious, shape_iou, SegmentationScores};

use std::f64::consts::PI;
use std::ops::Range;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset, DatasetTask};
use crate::error::{IbtError, Result};
use crate::layers::{apply_updates, derive_seed, Ctx};
use crate::model::{IbtModel, Task};
use crate::numerics::{self as nx, ParamStore, Tensor};

pub const DEFAULT_LR: f64 = 0.1;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
/// Learning rate of the small synthetic presets.
pub const DESK_LR: f64 = 0.01;

/// Published full-scale numbers, kept for reports only.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ReferenceResult {
    pub dataset: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

pub const REFERENCE_RESULTS: [ReferenceResult; 5] = [
    ReferenceResult { dataset: "ModelNet40", metric: "OA", value: 93.6 },
    ReferenceResult { dataset: "ModelNet40", metric: "mAcc", value: 91.0 },
    ReferenceResult { dataset: "ScanObjectNN", metric: "OA", value: 82.8 },
    ReferenceResult { dataset: "ScanObjectNN", metric: "mAcc", value: 80.0 },
    ReferenceResult { dataset: "ShapeNetPart", metric: "instance mIoU", value: 86.2 },
];

/// Mean token-level cross-entropy. `[B, C]` logits take one target per
/// cloud, `[B, N, P]` logits one per point.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let shape = logits.shape();
    let Some((&c, lead)) = shape.split_last() else {
        return Err(IbtError::dim("cross-entropy needs at least rank-1 logits"));
    };
    let rows: usize = lead.iter().product();
    nx::cross_entropy(&nx::reshape(logits, &[rows, c])?, targets)
}

/// Classical momentum: `v = μ v + g`, `θ = θ - lr v`.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl SgdState {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdState {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self, index: usize) -> Option<&[f64]> {
        self.velocity.get(index).and_then(|v| v.as_deref())
    }
}

/// Updates every trainable parameter from its gradient buffer.
pub fn sgd_step(params: &mut ParamStore, state: &mut SgdState) -> Result<()> {
    let mut updates = Vec::new();
    for (id, p) in params.trainable() {
        let g = p
            .tensor()
            .grad()
            .ok_or_else(|| IbtError::Contract(format!("parameter {} has no gradient", p.name)))?;
        if state.velocity.len() <= id.index() {
            state.velocity.resize(id.index() + 1, None);
        }
        let v = state.velocity[id.index()].get_or_insert_with(|| vec![0.0; g.len()]);
        for (vi, gi) in v.iter_mut().zip(&g) {
            *vi = state.momentum * *vi + gi;
        }
        let theta = p.tensor().data().iter().zip(v.iter()).map(|(t, v)| t - state.lr * v).collect();
        updates.push((id, theta));
    }
    for (id, theta) in updates {
        params.set_data(id, theta)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub schedule: Schedule,
    pub seed: u64,
    /// Stop once eval-mode accuracy on the training set reaches this.
    pub target_train_accuracy: Option<f64>,
    /// Where `final.ibt` and `best.ibt` go, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr: DESK_LR,
            momentum: DEFAULT_MOMENTUM,
            schedule: Schedule::Constant,
            seed: 0,
            target_train_accuracy: None,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_accuracy: Option<f64>,
    pub mean_class_accuracy: Option<f64>,
    /// Per-category mean IoU (segmentation).
    pub per_class_iou: Vec<Option<f64>>,
    pub category_miou: Option<f64>,
    pub instance_miou: Option<f64>,
    pub mean_loss: Option<f64>,
    pub loss_history: Vec<LossRecord>,
}

impl MetricsReport {
    /// The number used to pick the best epoch: OA or instance mIoU.
    pub fn headline(&self) -> Option<f64> {
        self.overall_accuracy.or(self.instance_miou)
    }
}

fn check_task(model: &IbtModel, ds: &Dataset) -> Result<()> {
    let ok = matches!(
        (model.config.task, ds.task),
        (Task::Classification, DatasetTask::Classification) | (Task::Segmentation, DatasetTask::PartSegmentation)
    );
    if !ok {
        return Err(IbtError::Config(format!(
            "{} model cannot use a {:?} dataset",
            model.config.task, ds.task
        )));
    }
    let classes = match model.config.task {
        Task::Classification => model.config.num_classes,
        Task::Segmentation => model.config.num_categories,
    };
    if ds.num_classes() > classes {
        return Err(IbtError::Config(format!(
            "dataset has {} classes but the model predicts {classes}",
            ds.num_classes()
        )));
    }
    if model.config.task == Task::Segmentation && ds.num_parts() > model.config.num_parts {
        return Err(IbtError::Config(format!(
            "dataset uses {} parts but the model predicts {}",
            ds.num_parts(),
            model.config.num_parts
        )));
    }
    Ok(())
}

fn forward_batch(model: &IbtModel, ctx: &mut Ctx, batch: &Batch) -> Result<Tensor> {
    model.forward(ctx, &batch.coords, Some(&batch.labels))
}

fn batch_targets(model: &IbtModel, batch: &Batch) -> Vec<usize> {
    match model.config.task {
        Task::Classification => batch.labels.clone(),
        Task::Segmentation => batch.point_labels.clone(),
    }
}

fn argmax_rows(logits: &[f64], width: usize, allowed: impl Fn(usize) -> std::ops::Range<usize>) -> Vec<usize> {
    logits
        .chunks(width)
        .enumerate()
        .map(|(row, vals)| {
            let r = allowed(row);
            let mut best = r.start;
            for j in r {
                if vals[j] > vals[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn eval_batches(ds: &Dataset, batch_size: usize) -> Vec<Vec<usize>> {
    (0..ds.len())
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Eval-mode OA and mAcc.
pub fn evaluate_classification(model: &IbtModel, ds: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(IbtError::Domain("cannot evaluate an empty dataset".into()));
    }
    check_task(model, ds)?;
    let c = model.config.num_classes;
    let (mut preds, mut targets, mut loss_sum) = (Vec::new(), Vec::new(), 0.0);
    for idx in eval_batches(ds, batch_size) {
        let batch = ds.batch(&idx)?;
        let logits = forward_batch(model, &mut Ctx::eval(&model.params), &batch)?;
        loss_sum += cross_entropy(&logits, &batch.labels)?.item()? * idx.len() as f64;
        preds.extend(argmax_rows(logits.data(), c, |_| 0..c));
        targets.extend_from_slice(&batch.labels);
    }
    let (oa, macc) = accuracy(&preds, &targets, c)?;
    Ok(MetricsReport {
        overall_accuracy: Some(oa),
        mean_class_accuracy: Some(macc),
        mean_loss: Some(loss_sum / ds.len() as f64),
        ..Default::default()
    })
}

/// Eval-mode part IoUs. Each point's prediction is the best part within its
/// category's range.
pub fn evaluate_segmentation(model: &IbtModel, ds: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(IbtError::Domain("cannot evaluate an empty dataset".into()));
    }
    check_task(model, ds)?;
    let p = model.config.num_parts;
    let mut predictions = Vec::with_capacity(ds.len());
    let mut loss_sum = 0.0;
    for idx in eval_batches(ds, batch_size) {
        let batch = ds.batch(&idx)?;
        let logits = forward_batch(model, &mut Ctx::eval(&model.params), &batch)?;
        loss_sum += cross_entropy(&logits, &batch.point_labels)?.item()? * idx.len() as f64;
        let n = batch.coords.shape()[1];
        for (b, &cat) in batch.labels.iter().enumerate() {
            let range = ds.part_ranges[cat].clone();
            let rows = &logits.data()[b * n * p..(b + 1) * n * p];
            predictions.push(argmax_rows(rows, p, |_| range.clone()));
        }
    }
    let mut report = score_segmentation(ds, &predictions)?;
    report.mean_loss = Some(loss_sum / ds.len() as f64);
    Ok(report)
}

/// Eval-mode part labels for one `[1, N, 3]` cloud. With `parts` the argmax
/// is restricted to that range.
pub fn predict_parts(model: &IbtModel, coords: &Tensor, category: usize, parts: Option<Range<usize>>) -> Result<Vec<usize>> {
    if model.config.task != Task::Segmentation {
        return Err(IbtError::Config("part prediction needs a segmentation model".into()));
    }
    let p = model.config.num_parts;
    let range = parts.unwrap_or(0..p);
    if range.is_empty() || range.end > p {
        return Err(IbtError::Config(format!("part range {range:?} does not fit {p} model parts")));
    }
    let logits = model.forward(&mut Ctx::eval(&model.params), coords, Some(&[category]))?;
    Ok(argmax_rows(logits.data(), p, |_| range.clone()))
}

/// Part IoU scores of per-shape predictions against a labeled dataset.
pub fn score_segmentation(ds: &Dataset, predictions: &[Vec<usize>]) -> Result<MetricsReport> {
    if predictions.len() != ds.len() {
        return Err(IbtError::dim(format!(
            "{} prediction sets for {} shapes",
            predictions.len(),
            ds.len()
        )));
    }
    let mut shapes = Vec::with_capacity(ds.len());
    for (cloud, pred) in ds.clouds.iter().zip(predictions) {
        let cat = cloud
            .category
            .ok_or_else(|| IbtError::Data(format!("{}: no category", cloud.name)))?;
        let range = ds
            .part_ranges
            .get(cat)
            .ok_or_else(|| IbtError::Data(format!("{}: category {cat} has no part range", cloud.name)))?;
        let gt = cloud
            .point_labels
            .as_ref()
            .ok_or_else(|| IbtError::Data(format!("{}: no point labels", cloud.name)))?;
        shapes.push((cat, shape_iou(pred, gt, range)?));
    }
    let scores = aggregate_ious(&shapes, ds.num_classes())?;
    Ok(MetricsReport {
        per_class_iou: scores.per_category,
        category_miou: Some(scores.category_miou),
        instance_miou: Some(scores.instance_miou),
        ..Default::default()
    })
}

pub fn evaluate(model: &IbtModel, ds: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    match model.config.task {
        Task::Classification => evaluate_classification(model, ds, batch_size),
        Task::Segmentation => evaluate_segmentation(model, ds, batch_size),
    }
}

/// One optimization step on a batch. Returns the loss before the update.
pub fn train_step(model: &mut IbtModel, sgd: &mut SgdState, batch: &Batch, dropout_seed: u64) -> Result<f64> {
    let value = try_step(model, sgd, batch, dropout_seed)?;
    if !value.is_finite() {
        return Err(IbtError::Numeric(format!("non-finite loss {value}")));
    }
    Ok(value)
}

/// Like [`train_step`] but hands back a non-finite loss, leaving the
/// parameters untouched in that case.
fn try_step(model: &mut IbtModel, sgd: &mut SgdState, batch: &Batch, dropout_seed: u64) -> Result<f64> {
    let targets = batch_targets(model, batch);
    model.params.zero_grad();
    let (loss, updates) = {
        let mut ctx = Ctx::train(&model.params, dropout_seed);
        let logits = forward_batch(model, &mut ctx, batch)?;
        let loss = cross_entropy(&logits, &targets)?;
        (loss, ctx.into_updates())
    };
    let value = loss.item()?;
    if !value.is_finite() {
        return Ok(value);
    }
    loss.backward()?;
    sgd_step(&mut model.params, sgd)?;
    apply_updates(&mut model.params, updates)?;
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub train_accuracy: Option<f64>,
    pub test_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub epochs: Vec<EpochSummary>,
    pub loss_history: Vec<LossRecord>,
    /// Final eval-mode metrics on the training set.
    pub train: Option<MetricsReport>,
    /// Final eval-mode metrics on the test set, with the loss history.
    pub test: Option<MetricsReport>,
    pub best_epoch: Option<usize>,
}

fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => 0.5 * cfg.lr * (1.0 + (PI * epoch as f64 / cfg.epochs.max(1) as f64).cos()),
    }
}

/// Seeded mini-batch training. Batches of one cloud are skipped during
/// optimization because batch statistics are degenerate there.
pub fn train(model: &mut IbtModel, train_ds: &Dataset, test_ds: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_task(model, train_ds)?;
    if let Some(t) = test_ds {
        check_task(model, t)?;
    }
    if cfg.batch_size == 0 {
        return Err(IbtError::Config("batch_size must be at least 1".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(IbtError::Config(format!("bad optimizer settings lr={} momentum={}", cfg.lr, cfg.momentum)));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| IbtError::io(dir, e))?;
    }
    let mut outcome = TrainOutcome {
        epochs_run: 0,
        epochs: Vec::new(),
        loss_history: Vec::new(),
        train: None,
        test: None,
        best_epoch: None,
    };
    if cfg.epochs == 0 {
        return Ok(outcome);
    }
    if train_ds.len() < 2 {
        return Err(IbtError::Data("training needs at least two clouds".into()));
    }

    let mut sgd = SgdState::new(cfg.lr, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut best = f64::NEG_INFINITY;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        sgd.lr = lr_at(cfg, epoch);
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let batch = train_ds.batch(idx)?;
            let seed = derive_seed(cfg.seed, &format!("dropout/{step}"));
            let loss = try_step(model, &mut sgd, &batch, seed)?;
            if !loss.is_finite() {
                return Err(IbtError::Diverged { epoch, batch: b, loss });
            }
            outcome.loss_history.push(LossRecord { epoch, step, loss });
            losses.push(loss);
            step += 1;
        }
        outcome.epochs_run = epoch + 1;

        let train_acc = match cfg.target_train_accuracy {
            Some(_) => evaluate(model, train_ds, cfg.batch_size)?.headline(),
            None => None,
        };
        let test_metric = match test_ds {
            Some(t) => evaluate(model, t, cfg.batch_size)?.headline(),
            None => None,
        };
        outcome.epochs.push(EpochSummary {
            epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            lr: sgd.lr,
            train_accuracy: train_acc,
            test_metric,
        });
        if let Some(score) = test_metric.or(train_acc) {
            if score > best {
                best = score;
                outcome.best_epoch = Some(epoch);
                if let Some(dir) = &cfg.checkpoint_dir {
                    model.save(&dir.join("best.ibt"))?;
                }
            }
        }
        if let (Some(target), Some(acc)) = (cfg.target_train_accuracy, train_acc) {
            if acc >= target {
                break;
            }
        }
    }

    if let Some(dir) = &cfg.checkpoint_dir {
        model.save(&dir.join("final.ibt"))?;
        if outcome.best_epoch.is_none() {
            model.save(&dir.join("best.ibt"))?;
        }
    }
    outcome.train = Some(evaluate(model, train_ds, cfg.batch_size)?);
    if let Some(t) = test_ds {
        let mut report = evaluate(model, t, cfg.batch_size)?;
        report.loss_history = outcome.loss_history.clone();
        outcome.test = Some(report);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamKind;

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::zeros(&[3, 5]);
        let l = cross_entropy(&logits, &[0, 2, 4]).unwrap().item().unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut s = ParamStore::new();
        let id = s.insert("w", vec![1.0, -2.0], &[2], ParamKind::Trainable).unwrap();
        let loss = nx::sum_all(&nx::mul(s.tensor(id), &Tensor::new(vec![3.0, 5.0], &[2]).unwrap()).unwrap());
        loss.backward().unwrap();
        sgd_step(&mut s, &mut SgdState::new(0.1, 0.0)).unwrap();
        assert_eq!(s.tensor(id).data(), &[1.0 - 0.1 * 3.0, -2.0 - 0.1 * 5.0]);
    }

    #[test]
    fn two_momentum_steps_follow_hand_expansion() {
        let (lr, mu, g) = (0.1, 0.9, 2.0);
        let mut s = ParamStore::new();
        let id = s.insert("w", vec![0.0], &[1], ParamKind::Trainable).unwrap();
        let mut st = SgdState::new(lr, mu);
        for _ in 0..2 {
            s.zero_grad();
            nx::scale(s.tensor(id), g).backward().unwrap();
            sgd_step(&mut s, &mut st).unwrap();
        }
        let expected = -(lr * g * (1.0 + (1.0 + mu)));
        assert!((s.tensor(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut s = ParamStore::new();
        s.insert("w", vec![0.0], &[1], ParamKind::Trainable).unwrap();
        s.clear_grad();
        assert!(matches!(sgd_step(&mut s, &mut SgdState::new(0.1, 0.9)), Err(IbtError::Contract(_))));
    }
}
