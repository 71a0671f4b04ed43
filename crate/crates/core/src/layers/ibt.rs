use super::afp::AttentiveFeaturePooling;
use super::block::{Ctx, ParamBuilder};
use super::graph::BatchGraph;
use super::lat::{LatTrace, LocalityAwareTransformer};
use super::rpe::RelativePositionEncoding;
use super::LayerConfig;
use crate::error::{IbtError, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone)]
pub struct LocalBranch {
    pub rpe: RelativePositionEncoding,
    pub afp: AttentiveFeaturePooling,
}

/// Local branch (edge encoding, pooling) feeding the locality-aware
/// transformer. Output width equals input width.
#[derive(Debug, Clone)]
pub struct IbtLayer {
    pub config: LayerConfig,
    pub local: Option<LocalBranch>,
    pub transformer: Option<LocalityAwareTransformer>,
}

#[derive(Debug, Clone)]
pub struct IbtTrace {
    pub edges: Option<Tensor>,
    pub local: Option<Tensor>,
    pub lat: Option<LatTrace>,
    pub out: Tensor,
}

impl IbtLayer {
    pub fn new(b: &mut ParamBuilder, name: &str, config: LayerConfig) -> Result<Self> {
        config.validate()?;
        let mut b = b.sub(name);
        let s = &config.switches;
        let local = if s.use_pooling_module {
            Some(LocalBranch {
                rpe: RelativePositionEncoding::new(&mut b, config.dim, s.use_position_encoding)?,
                afp: AttentiveFeaturePooling::new(&mut b, config.dim, s)?,
            })
        } else {
            None
        };
        let transformer = if s.use_transformer {
            Some(LocalityAwareTransformer::new(&mut b, &config)?)
        } else {
            None
        };
        Ok(IbtLayer {
            config,
            local,
            transformer,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, coords: &Tensor, features: &Tensor, graph: &BatchGraph) -> Result<Tensor> {
        Ok(self.forward_traced(ctx, coords, features, graph)?.out)
    }

    pub fn forward_traced(
        &self,
        ctx: &mut Ctx,
        coords: &Tensor,
        features: &Tensor,
        graph: &BatchGraph,
    ) -> Result<IbtTrace> {
        let (edges, local) = match &self.local {
            Some(branch) => {
                let h = branch.rpe.forward(ctx, features, graph)?;
                let f = branch.afp.forward(ctx, &h)?;
                (Some(h), Some(f))
            }
            None => (None, None),
        };
        match &self.transformer {
            Some(lat) => {
                let t = lat.forward_traced(ctx, features, coords, local.as_ref())?;
                Ok(IbtTrace {
                    edges,
                    local,
                    out: t.out.clone(),
                    lat: Some(t),
                })
            }
            None => {
                let out = local
                    .clone()
                    .ok_or_else(|| IbtError::Config("layer has neither branch enabled".into()))?;
                Ok(IbtTrace {
                    edges,
                    local,
                    lat: None,
                    out,
                })
            }
        }
    }
}
