//! IBT building blocks.
//!
//! Every block works on batched, channels-last tensors: point features are
//! `[B, N, D]`, edge features `[B, N, K, D']`. The edge width `D'` equals `D`.

mod afp;
mod block;
mod graph;
mod ibt;
mod lat;
mod rpe;

pub use afp::{AfpTrace, AttentiveFeaturePooling};
pub use block::{apply_updates, derive_seed, BatchNorm, Ctx, Linear, MlpLayer, ParamBuilder, SharedMlp};
pub use graph::BatchGraph;
pub use ibt::{IbtLayer, IbtTrace, LocalBranch};
pub use lat::{LatTrace, LocalityAwareTransformer};
pub use rpe::RelativePositionEncoding;

use std::fmt;
use std::str::FromStr;

use crate::error::{IbtError, Result};

/// Hidden width of the coordinate embedder that produces `δ`.
pub const DELTA_HIDDEN: usize = 64;

/// Branch switches for ablation studies. All on is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationSwitches {
    /// Relative geometry in the edge encoder; off feeds neighbor features only.
    pub use_position_encoding: bool,
    pub use_max_pool: bool,
    pub use_attention_pool: bool,
    /// Sigmoid gate on the value matrix; off means `W = 1`.
    pub use_channel_gate_w: bool,
    /// Absolute coordinate embedding `δ` added to the transformer input.
    pub use_position_embedding: bool,
    /// The whole local branch (edge encoder plus pooling).
    pub use_pooling_module: bool,
    /// The whole locality-aware transformer; off returns the pooled feature.
    pub use_transformer: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        AblationSwitches {
            use_position_encoding: true,
            use_max_pool: true,
            use_attention_pool: true,
            use_channel_gate_w: true,
            use_position_embedding: true,
            use_pooling_module: true,
            use_transformer: true,
        }
    }
}

/// What the transformer starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LocalityStream {
    /// `F_in = f + δ`; the local feature acts only through the gate.
    #[default]
    GateOnly,
    /// `F_in = f̂ + δ`.
    FeedForward,
}

impl fmt::Display for LocalityStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LocalityStream::GateOnly => "gate_only",
            LocalityStream::FeedForward => "feed_forward",
        })
    }
}

impl FromStr for LocalityStream {
    type Err = IbtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gate_only" => Ok(LocalityStream::GateOnly),
            "feed_forward" => Ok(LocalityStream::FeedForward),
            other => Err(IbtError::Config(format!(
                "locality_stream must be gate_only or feed_forward, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerConfig {
    pub dim: usize,
    pub switches: AblationSwitches,
    pub locality_stream: LocalityStream,
}

impl LayerConfig {
    pub fn new(dim: usize) -> Self {
        LayerConfig {
            dim,
            switches: AblationSwitches::default(),
            locality_stream: LocalityStream::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.switches;
        if self.dim == 0 || self.dim % 4 != 0 {
            return Err(IbtError::Config(format!(
                "feature width {} must be a positive multiple of 4",
                self.dim
            )));
        }
        if !s.use_max_pool && !s.use_attention_pool {
            return Err(IbtError::Config(
                "at least one of use_max_pool and use_attention_pool must stay on".into(),
            ));
        }
        if !s.use_pooling_module && !s.use_transformer {
            return Err(IbtError::Config(
                "use_pooling_module and use_transformer cannot both be off".into(),
            ));
        }
        if !s.use_pooling_module && self.locality_stream == LocalityStream::FeedForward {
            return Err(IbtError::Config(
                "locality_stream=feed_forward needs use_pooling_module".into(),
            ));
        }
        Ok(())
    }
}
