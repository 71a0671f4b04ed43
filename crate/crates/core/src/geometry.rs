//! Point clouds, exact k-nearest-neighbor graphs, and the relative geometry
//! that feeds the position encoding.

use std::cmp::Ordering;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IbtError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub coords: Vec<[f64; 3]>,
    pub point_labels: Option<Vec<usize>>,
    pub category: Option<usize>,
    pub name: String,
}

impl PointCloud {
    pub fn new(coords: Vec<[f64; 3]>, name: impl Into<String>) -> Result<Self> {
        let cloud = PointCloud {
            coords,
            point_labels: None,
            category: None,
            name: name.into(),
        };
        cloud.check_coords()?;
        Ok(cloud)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(IbtError::Data(format!(
                "{}: {} labels for {} points",
                self.name,
                labels.len(),
                self.len()
            )));
        }
        self.point_labels = Some(labels);
        Ok(self)
    }

    pub fn with_category(mut self, category: usize) -> Self {
        self.category = Some(category);
        self
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    fn check_coords(&self) -> Result<()> {
        if self.coords.is_empty() {
            return Err(IbtError::Data(format!("{}: point cloud has no points", self.name)));
        }
        if let Some(i) = self.coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(IbtError::Data(format!(
                "{}: point {i} has a non-finite coordinate {:?}",
                self.name, self.coords[i]
            )));
        }
        Ok(())
    }

    /// Checks every structural invariant, including label ranges.
    pub fn validate(&self, num_parts: Option<usize>) -> Result<()> {
        self.check_coords()?;
        if let Some(labels) = &self.point_labels {
            if labels.len() != self.len() {
                return Err(IbtError::Data(format!(
                    "{}: {} labels for {} points",
                    self.name,
                    labels.len(),
                    self.len()
                )));
            }
            if let Some(np) = num_parts {
                if let Some(&bad) = labels.iter().find(|&&l| l >= np) {
                    return Err(IbtError::Data(format!(
                        "{}: part label {bad} outside [0, {np})",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Row-major `N×K` neighbor table. Column 0 is always the point itself; the
/// remaining columns follow ascending distance, ties by ascending index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    indices: Vec<usize>,
    n: usize,
    k: usize,
}

impl NeighborGraph {
    pub fn from_rows(indices: Vec<usize>, n: usize, k: usize) -> Result<Self> {
        if indices.len() != n * k {
            return Err(IbtError::dim(format!("{} indices for a {n}x{k} table", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(IbtError::Index(format!("neighbor index {bad} out of range for {n} points")));
        }
        Ok(NeighborGraph { indices, n, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_points(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Exact brute-force KNN with the self-loop counted as the first neighbor.
pub fn knn_graph(cloud: &PointCloud, k: usize) -> Result<NeighborGraph> {
    knn_graph_coords(&cloud.coords, k)
}

pub fn knn_graph_coords(coords: &[[f64; 3]], k: usize) -> Result<NeighborGraph> {
    let n = coords.len();
    if k == 0 || k > n {
        return Err(IbtError::Domain(format!("k = {k} must lie in [1, {n}]")));
    }
    if let Some(i) = coords.iter().position(|p| p.iter().any(|v| v.is_nan())) {
        return Err(IbtError::Data(format!("point {i} has a NaN coordinate")));
    }
    let mut indices = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, p) in coords.iter().enumerate() {
        indices.push(i);
        if k == 1 {
            continue;
        }
        cand.clear();
        cand.extend(
            coords
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| (distance(p, q), j)),
        );
        let others = k - 1;
        if others < cand.len() {
            cand.select_nth_unstable_by(others - 1, by_distance_then_index);
            cand.truncate(others);
        }
        cand.sort_unstable_by(by_distance_then_index);
        indices.extend(cand.iter().map(|&(_, j)| j));
    }
    Ok(NeighborGraph { indices, n, k })
}

/// Per-edge offsets `x_i - x_j` and their Euclidean lengths, row-major `N×K`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeGeometry {
    pub deltas: Vec<[f64; 3]>,
    pub dists: Vec<f64>,
}

pub fn relative_geometry(cloud: &PointCloud, graph: &NeighborGraph) -> Result<RelativeGeometry> {
    relative_geometry_coords(&cloud.coords, graph)
}

pub fn relative_geometry_coords(coords: &[[f64; 3]], graph: &NeighborGraph) -> Result<RelativeGeometry> {
    if graph.num_points() != coords.len() {
        return Err(IbtError::dim(format!(
            "graph over {} points used with a cloud of {}",
            graph.num_points(),
            coords.len()
        )));
    }
    let mut deltas = Vec::with_capacity(graph.indices.len());
    let mut dists = Vec::with_capacity(graph.indices.len());
    for i in 0..graph.n {
        let p = coords[i];
        for &j in graph.row(i) {
            let q = coords[j];
            let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
            dists.push((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
            deltas.push(d);
        }
    }
    Ok(RelativeGeometry { deltas, dists })
}

/// Uniform resampling to `n` points: without replacement when the cloud is
/// large enough, with replacement otherwise. Labels follow their points.
pub fn sample_points(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(IbtError::Domain("cannot sample zero points".into()));
    }
    if cloud.is_empty() {
        return Err(IbtError::Domain(format!("{}: cannot sample an empty cloud", cloud.name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if cloud.len() >= n {
        index::sample(&mut rng, cloud.len(), n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..cloud.len())).collect()
    };
    Ok(PointCloud {
        coords: picks.iter().map(|&i| cloud.coords[i]).collect(),
        point_labels: cloud
            .point_labels
            .as_ref()
            .map(|l| picks.iter().map(|&i| l[i]).collect()),
        category: cloud.category,
        name: cloud.name.clone(),
    })
}
