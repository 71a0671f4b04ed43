use super::block::{Ctx, Linear, ParamBuilder, SharedMlp};
use super::AblationSwitches;
use crate::error::{IbtError, Result};
use crate::numerics::{self as nx, Tensor};

/// Neighbor aggregation: channel-wise softmax-weighted sum and/or max over
/// the K axis, concatenated and projected back to `D`.
#[derive(Debug, Clone)]
pub struct AttentiveFeaturePooling {
    pub dim: usize,
    pub score: Option<Linear>,
    pub use_max: bool,
    pub output: SharedMlp,
}

#[derive(Debug, Clone)]
pub struct AfpTrace {
    /// `[B, N, K, D]`, sums to one over K for each channel.
    pub scores: Option<Tensor>,
    pub out: Tensor,
}

impl AttentiveFeaturePooling {
    pub fn new(b: &mut ParamBuilder, dim: usize, switches: &AblationSwitches) -> Result<Self> {
        let branches = switches.use_attention_pool as usize + switches.use_max_pool as usize;
        if branches == 0 {
            return Err(IbtError::Config("feature pooling needs at least one branch".into()));
        }
        let mut b = b.sub("afp");
        let score = if switches.use_attention_pool {
            Some(Linear::new(&mut b, "score", dim, dim, false)?)
        } else {
            None
        };
        let output = SharedMlp::new(&mut b, "out", &[branches * dim, dim], true, true)?;
        Ok(AttentiveFeaturePooling {
            dim,
            score,
            use_max: switches.use_max_pool,
            output,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, h: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(ctx, h)?.out)
    }

    /// `[B, N, K, D]` edge features to `[B, N, D]`.
    pub fn forward_traced(&self, ctx: &mut Ctx, h: &Tensor) -> Result<AfpTrace> {
        if h.rank() != 4 || h.shape()[3] != self.dim {
            return Err(IbtError::dim(format!(
                "pooling expects [B, N, K, {}], got {:?}",
                self.dim,
                h.shape()
            )));
        }
        let mut parts = Vec::with_capacity(2);
        let mut scores = None;
        if let Some(score) = &self.score {
            let s = nx::softmax(&score.forward(ctx, h)?, 2)?;
            parts.push(nx::reduce_sum(&nx::mul(h, &s)?, 2)?);
            scores = Some(s);
        }
        if self.use_max {
            parts.push(nx::reduce_max(h, 2)?.0);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let out = self.output.forward(ctx, &nx::concat(&refs, 2)?)?;
        Ok(AfpTrace { scores, out })
    }
}
