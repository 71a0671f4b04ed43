use super::block::{Ctx, ParamBuilder, SharedMlp};
use super::graph::BatchGraph;
use crate::error::{IbtError, Result};
use crate::numerics::{self as nx, Tensor};

/// Edge encoder. With position encoding on, each edge `(i, j)` sees
/// `[x_i - x_j, |x_i - x_j|, f_i - f_j]`, which an MLP maps to `p`; a second
/// MLP fuses `[p, f_j]` into the edge feature `h`. Off, `h = MLP(f_j)`.
#[derive(Debug, Clone)]
pub struct RelativePositionEncoding {
    pub dim: usize,
    pub encoder: Option<SharedMlp>,
    pub fuser: SharedMlp,
}

impl RelativePositionEncoding {
    pub fn new(b: &mut ParamBuilder, dim: usize, use_position: bool) -> Result<Self> {
        let mut b = b.sub("rpe");
        let encoder = if use_position {
            Some(SharedMlp::new(&mut b, "encoder", &[3 + 1 + dim, dim], true, true)?)
        } else {
            None
        };
        let fuse_in = if use_position { 2 * dim } else { dim };
        let fuser = SharedMlp::new(&mut b, "fuser", &[fuse_in, dim], true, true)?;
        Ok(RelativePositionEncoding { dim, encoder, fuser })
    }

    /// `[B, N, D]` features to `[B, N, K, D]` edge features.
    pub fn forward(&self, ctx: &mut Ctx, features: &Tensor, graph: &BatchGraph) -> Result<Tensor> {
        let (b, n, k) = (graph.batch, graph.points, graph.k);
        if features.shape() != [b, n, self.dim] {
            return Err(IbtError::dim(format!(
                "edge encoder expects features [{b}, {n}, {}], got {:?}",
                self.dim,
                features.shape()
            )));
        }
        let flat = nx::reshape(features, &[b * n, self.dim])?;
        let neighbors = nx::gather_rows(&flat, &graph.flat_index, &[b, n, k])?;
        let Some(encoder) = &self.encoder else {
            return self.fuser.forward(ctx, &neighbors);
        };
        let centre = nx::reshape(features, &[b, n, 1, self.dim])?;
        let diff = nx::sub(&centre, &neighbors)?;
        let p = encoder.forward(ctx, &nx::concat(&[&graph.deltas, &graph.dists, &diff], 3)?)?;
        self.fuser.forward(ctx, &nx::concat(&[&p, &neighbors], 3)?)
    }
}
