use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{IbtError, Result};

/// Overall and mean per-class accuracy. Classes without samples are left
/// out of the mean.
pub fn accuracy(predictions: &[usize], targets: &[usize], num_classes: usize) -> Result<(f64, f64)> {
    if predictions.len() != targets.len() {
        return Err(IbtError::dim(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(IbtError::Domain("accuracy of an empty set".into()));
    }
    let mut total = vec![0usize; num_classes];
    let mut hit = vec![0usize; num_classes];
    for (&p, &t) in predictions.iter().zip(targets) {
        if t >= num_classes {
            return Err(IbtError::Data(format!("target {t} outside {num_classes} classes")));
        }
        total[t] += 1;
        hit[t] += usize::from(p == t);
    }
    let oa = hit.iter().sum::<usize>() as f64 / targets.len() as f64;
    let per_class: Vec<f64> = total
        .iter()
        .zip(&hit)
        .filter(|(&n, _)| n > 0)
        .map(|(&n, &h)| h as f64 / n as f64)
        .collect();
    let macc = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok((oa, macc))
}

/// Accuracy from a confusion matrix, `confusion[true][predicted]`.
pub fn accuracy_from_confusion(confusion: &[Vec<usize>]) -> Result<(f64, f64)> {
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for (t, row) in confusion.iter().enumerate() {
        for (p, &count) in row.iter().enumerate() {
            preds.extend(std::iter::repeat_n(p, count));
            targets.extend(std::iter::repeat_n(t, count));
        }
    }
    accuracy(&preds, &targets, confusion.len())
}

/// Mean IoU over the parts of one shape. A part absent from both prediction
/// and ground truth scores 1.
pub fn shape_iou(predictions: &[usize], targets: &[usize], parts: &Range<usize>) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(IbtError::dim(format!(
            "{} predictions for {} points",
            predictions.len(),
            targets.len()
        )));
    }
    if parts.is_empty() {
        return Err(IbtError::Domain("category has no parts".into()));
    }
    if let Some(bad) = targets.iter().find(|t| !parts.contains(t)) {
        return Err(IbtError::Data(format!("part label {bad} outside category range {parts:?}")));
    }
    let mut sum = 0.0;
    for part in parts.clone() {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&p, &t) in predictions.iter().zip(targets) {
            let (a, b) = (p == part, t == part);
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        sum += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(sum / parts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    /// Mean shape IoU per category; `None` when the category has no shapes.
    pub per_category: Vec<Option<f64>>,
    /// Mean over categories that have shapes.
    pub category_miou: f64,
    /// Mean over all shapes.
    pub instance_miou: f64,
}

/// Aggregates per-shape IoUs given as `(category, iou)` pairs.
pub fn aggregate_ious(shapes: &[(usize, f64)], num_categories: usize) -> Result<SegmentationScores> {
    if shapes.is_empty() {
        return Err(IbtError::Domain("no shapes to score".into()));
    }
    let mut sums = vec![(0.0, 0usize); num_categories];
    for &(c, iou) in shapes {
        let slot = sums
            .get_mut(c)
            .ok_or_else(|| IbtError::Data(format!("category {c} outside {num_categories}")))?;
        slot.0 += iou;
        slot.1 += 1;
    }
    let per_category: Vec<Option<f64>> = sums
        .iter()
        .map(|&(s, n)| (n > 0).then(|| s / n as f64))
        .collect();
    let present: Vec<f64> = per_category.iter().flatten().copied().collect();
    Ok(SegmentationScores {
        category_miou: present.iter().sum::<f64>() / present.len() as f64,
        instance_miou: shapes.iter().map(|s| s.1).sum::<f64>() / shapes.len() as f64,
        per_category,
    })
}
