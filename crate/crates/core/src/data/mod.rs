//! Datasets: synthetic shape families for CPU-scale experiments, small
//! text formats (XYZ, OFF, colored PLY), normalization and batching.

mod io;
mod synthetic;

pub use io::{load_off, load_xyz, palette_color, palette_label, read_colored_ply, write_colored_ply, write_xyz, PALETTE_SIZE};
pub use synthetic::{gen_synthetic, Family, SyntheticSpec};

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IbtError, Result};
use crate::geometry::PointCloud;
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetTask {
    Classification,
    PartSegmentation,
}

impl FromStr for DatasetTask {
    type Err = IbtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(DatasetTask::Classification),
            "segmentation" | "part_segmentation" => Ok(DatasetTask::PartSegmentation),
            other => Err(IbtError::Config(format!("unknown dataset task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub clouds: Vec<PointCloud>,
    pub class_names: Vec<String>,
    pub split: Split,
    pub task: DatasetTask,
    /// Global part ids owned by each category (segmentation only).
    pub part_ranges: Vec<Range<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_parts(&self) -> usize {
        self.part_ranges.iter().map(|r| r.end).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let seg = self.task == DatasetTask::PartSegmentation;
        if seg && self.part_ranges.len() != self.num_classes() {
            return Err(IbtError::Data(format!(
                "{} part ranges for {} categories",
                self.part_ranges.len(),
                self.num_classes()
            )));
        }
        for c in &self.clouds {
            c.validate(None)?;
            let cat = c
                .category
                .ok_or_else(|| IbtError::Data(format!("{}: cloud has no category", c.name)))?;
            if cat >= self.num_classes() {
                return Err(IbtError::Data(format!(
                    "{}: category {cat} outside the {} class names",
                    c.name,
                    self.num_classes()
                )));
            }
            if seg {
                let labels = c
                    .point_labels
                    .as_ref()
                    .ok_or_else(|| IbtError::Data(format!("{}: segmentation cloud has no point labels", c.name)))?;
                let range = &self.part_ranges[cat];
                if let Some(bad) = labels.iter().find(|l| !range.contains(l)) {
                    return Err(IbtError::Data(format!(
                        "{}: part {bad} outside category range {range:?}",
                        c.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Content hash over coordinates (bitwise), labels and metadata.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}|{}|{:?}|{:?}", self.task, self.split, self.class_names, self.part_ranges));
        for c in &self.clouds {
            h.update(c.name.as_bytes());
            h.update(c.category.map_or(u64::MAX, |v| v as u64).to_le_bytes());
            for p in &c.coords {
                for v in p {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
            if let Some(l) = &c.point_labels {
                for &v in l {
                    h.update((v as u64).to_le_bytes());
                }
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Stacks the clouds at `indices` into one batch. All must have the same
    /// point count.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let Some(&first) = indices.first() else {
            return Err(IbtError::Domain("empty batch".into()));
        };
        let n = self.clouds[first].len();
        let mut coords = Vec::with_capacity(indices.len() * n * 3);
        let mut labels = Vec::with_capacity(indices.len());
        let mut point_labels = Vec::new();
        for &i in indices {
            let c = &self.clouds[i];
            if c.len() != n {
                return Err(IbtError::Data(format!(
                    "{} has {} points but the batch uses {n}; resample clouds to a common size",
                    c.name,
                    c.len()
                )));
            }
            coords.extend(c.coords.iter().flatten());
            labels.push(c.category.ok_or_else(|| IbtError::Data(format!("{}: no category", c.name)))?);
            if self.task == DatasetTask::PartSegmentation {
                let l = c
                    .point_labels
                    .as_ref()
                    .ok_or_else(|| IbtError::Data(format!("{}: no point labels", c.name)))?;
                point_labels.extend_from_slice(l);
            }
        }
        Ok(Batch {
            coords: Tensor::new(coords, &[indices.len(), n, 3])?,
            labels,
            point_labels,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, N, 3]`.
    pub coords: Tensor,
    /// Category per cloud.
    pub labels: Vec<usize>,
    /// Flattened `[B*N]` part labels; empty for classification.
    pub point_labels: Vec<usize>,
}

/// Centroid to the origin, farthest point to radius 1. Coincident points
/// only get centered.
pub fn normalize_cloud(cloud: &PointCloud) -> PointCloud {
    let n = cloud.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in &cloud.coords {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    c.iter_mut().for_each(|v| *v /= n);
    let centered: Vec<[f64; 3]> = cloud
        .coords
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let r = centered
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    let s = if r > 0.0 { 1.0 / r } else { 1.0 };
    PointCloud {
        coords: centered.iter().map(|p| [p[0] * s, p[1] * s, p[2] * s]).collect(),
        ..cloud.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_single_point_goes_to_origin() {
        let c = PointCloud::new(vec![[3.0, -2.0, 5.0]], "p").unwrap();
        assert_eq!(normalize_cloud(&c).coords, vec![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let c = PointCloud::new(vec![[1.0, 2.0, 0.5], [-3.0, 0.0, 1.0], [0.2, 0.2, 9.0]], "c").unwrap();
        let once = normalize_cloud(&c);
        let twice = normalize_cloud(&once);
        for (a, b) in once.coords.iter().zip(&twice.coords) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_rejects_ragged_clouds() {
        let ds = Dataset {
            clouds: vec![
                PointCloud::new(vec![[0.0; 3]; 4], "a").unwrap().with_category(0),
                PointCloud::new(vec![[0.0; 3]; 5], "b").unwrap().with_category(0),
            ],
            class_names: vec!["x".into()],
            split: Split::Train,
            task: DatasetTask::Classification,
            part_ranges: vec![],
        };
        assert!(ds.batch(&[0]).is_ok());
        assert!(matches!(ds.batch(&[0, 1]), Err(IbtError::Data(_))));
    }
}
