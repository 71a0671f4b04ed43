use crate::error::{IbtError, Result};
use crate::geometry::{knn_graph_coords, relative_geometry_coords, NeighborGraph};
use crate::numerics::Tensor;

/// Neighbor tables and edge geometry for a batch of equally sized clouds.
///
/// `flat_index` addresses rows of the `[B*N, D]` flattened feature matrix.
#[derive(Debug, Clone)]
pub struct BatchGraph {
    pub batch: usize,
    pub points: usize,
    pub k: usize,
    pub graphs: Vec<NeighborGraph>,
    pub flat_index: Vec<usize>,
    /// `[B, N, K, 3]`, `x_i - x_j`.
    pub deltas: Tensor,
    /// `[B, N, K, 1]`, `|x_i - x_j|`.
    pub dists: Tensor,
}

impl BatchGraph {
    /// Builds one coordinate-space graph per cloud of a `[B, N, 3]` tensor.
    pub fn from_coords(coords: &Tensor, k: usize) -> Result<Self> {
        let [b, n, 3] = coords.shape() else {
            return Err(IbtError::dim(format!("coordinates must be [B, N, 3], got {:?}", coords.shape())));
        };
        let (b, n) = (*b, *n);
        if n < k {
            return Err(IbtError::Domain(format!("clouds have {n} points but k = {k}")));
        }
        let mut graphs = Vec::with_capacity(b);
        let mut flat_index = Vec::with_capacity(b * n * k);
        let mut deltas = Vec::with_capacity(b * n * k * 3);
        let mut dists = Vec::with_capacity(b * n * k);
        for c in 0..b {
            let pts: Vec<[f64; 3]> = coords.data()[c * n * 3..(c + 1) * n * 3]
                .chunks_exact(3)
                .map(|p| [p[0], p[1], p[2]])
                .collect();
            let g = knn_graph_coords(&pts, k)?;
            let rel = relative_geometry_coords(&pts, &g)?;
            flat_index.extend(g.indices().iter().map(|&j| c * n + j));
            deltas.extend(rel.deltas.iter().flatten());
            dists.extend(rel.dists);
            graphs.push(g);
        }
        Ok(BatchGraph {
            batch: b,
            points: n,
            k,
            graphs,
            flat_index,
            deltas: Tensor::new(deltas, &[b, n, k, 3])?,
            dists: Tensor::new(dists, &[b, n, k, 1])?,
        })
    }
}
