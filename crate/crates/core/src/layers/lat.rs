use super::block::{Ctx, Linear, MlpLayer, ParamBuilder, SharedMlp};
use super::{LayerConfig, LocalityStream, DELTA_HIDDEN};
use crate::error::{IbtError, Result};
use crate::numerics::{self as nx, Tensor};

/// Single-head offset attention whose value matrix is gated by the local
/// feature: `F_out = MBR(F_in - softmax(QK^T / sqrt(d)) V) + F_in`.
#[derive(Debug, Clone)]
pub struct LocalityAwareTransformer {
    pub dim: usize,
    pub qk_dim: usize,
    /// No normalization here: a batch-normalized embedding would cancel a
    /// global translation and hide what `δ` is for.
    pub delta: Option<SharedMlp>,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub mbr: MlpLayer,
    pub use_gate: bool,
    pub stream: LocalityStream,
}

/// Intermediate tensors of one transformer pass.
#[derive(Debug, Clone)]
pub struct LatTrace {
    pub f_in: Tensor,
    pub delta: Option<Tensor>,
    /// `sigmoid(f̂)`, absent when the gate is off.
    pub gate: Option<Tensor>,
    /// `[B, N, N]`, row-stochastic.
    pub attention: Tensor,
    pub f_sa: Tensor,
    pub out: Tensor,
}

impl LocalityAwareTransformer {
    pub fn new(b: &mut ParamBuilder, cfg: &LayerConfig) -> Result<Self> {
        let dim = cfg.dim;
        if dim % 4 != 0 {
            return Err(IbtError::Config(format!("width {dim} is not divisible by 4")));
        }
        let qk_dim = dim / 4;
        let mut b = b.sub("lat");
        let delta = if cfg.switches.use_position_embedding {
            Some(SharedMlp::new(&mut b, "delta", &[3, DELTA_HIDDEN, dim], false, false)?)
        } else {
            None
        };
        Ok(LocalityAwareTransformer {
            dim,
            qk_dim,
            delta,
            query: Linear::new(&mut b, "query", dim, qk_dim, false)?,
            key: Linear::new(&mut b, "key", dim, qk_dim, false)?,
            value: Linear::new(&mut b, "value", dim, dim, true)?,
            mbr: MlpLayer::new(&mut b, "mbr", dim, dim, true, true)?,
            use_gate: cfg.switches.use_channel_gate_w && cfg.switches.use_pooling_module,
            stream: cfg.locality_stream,
        })
    }

    /// `features`, `local` are `[B, N, D]`; `coords` is `[B, N, 3]`.
    pub fn forward_traced(
        &self,
        ctx: &mut Ctx,
        features: &Tensor,
        coords: &Tensor,
        local: Option<&Tensor>,
    ) -> Result<LatTrace> {
        let base = match (self.stream, local) {
            (LocalityStream::GateOnly, _) => features,
            (LocalityStream::FeedForward, Some(l)) => l,
            (LocalityStream::FeedForward, None) => {
                return Err(IbtError::Contract("feed_forward stream needs the local feature".into()))
            }
        };
        if base.rank() != 3 || base.shape()[2] != self.dim {
            return Err(IbtError::dim(format!(
                "transformer expects [B, N, {}], got {:?}",
                self.dim,
                base.shape()
            )));
        }
        let delta = match &self.delta {
            Some(mlp) => Some(mlp.forward(ctx, coords)?),
            None => None,
        };
        let f_in = match &delta {
            Some(d) => nx::add(base, d)?,
            None => base.clone(),
        };
        let gate = match (self.use_gate, local) {
            (true, Some(l)) => Some(nx::sigmoid(l)),
            _ => None,
        };

        let q = self.query.forward(ctx, &f_in)?;
        let k = self.key.forward(ctx, &f_in)?;
        let mut v = self.value.forward(ctx, &f_in)?;
        if let Some(d) = &delta {
            v = nx::add(&v, d)?;
        }
        if let Some(w) = &gate {
            v = nx::mul(&v, w)?;
        }
        let logits = nx::scale(&nx::matmul(&q, &nx::transpose_last(&k)?)?, 1.0 / (self.qk_dim as f64).sqrt());
        let attention = nx::softmax(&logits, 2)?;
        let f_sa = nx::matmul(&attention, &v)?;
        let out = nx::add(&self.mbr.forward(ctx, &nx::sub(&f_in, &f_sa)?)?, &f_in)?;
        Ok(LatTrace {
            f_in,
            delta,
            gate,
            attention,
            f_sa,
            out,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, features: &Tensor, coords: &Tensor, local: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_traced(ctx, features, coords, local)?.out)
    }
}
