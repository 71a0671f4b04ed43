//! Forward context, parameter construction, and the shared-MLP primitives.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{IbtError, Result};
use crate::numerics::{self as nx, NormState, ParamId, ParamKind, ParamStore, Tensor};

/// Stable within a build: used for per-parameter init seeds and derived run seeds.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = DefaultHasher::new();
    seed.hash(&mut h);
    label.hash(&mut h);
    h.finish()
}

/// State threaded through one forward pass.
pub struct Ctx<'a> {
    params: &'a ParamStore,
    training: bool,
    rng: ChaCha8Rng,
    updates: Vec<(ParamId, Vec<f64>)>,
}

impl<'a> Ctx<'a> {
    /// Eval mode: running normalization statistics, no dropout.
    pub fn eval(params: &'a ParamStore) -> Self {
        Ctx {
            params,
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            updates: Vec::new(),
        }
    }

    /// Training mode: batch statistics and dropout masks drawn from `seed`.
    pub fn train(params: &'a ParamStore, seed: u64) -> Self {
        Ctx {
            params,
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        self.params.tensor(id)
    }

    /// Running-statistics updates collected during a training pass.
    pub fn into_updates(self) -> Vec<(ParamId, Vec<f64>)> {
        self.updates
    }

    pub fn dropout(&mut self, x: &Tensor, rate: f64) -> Result<Tensor> {
        if !self.training || rate <= 0.0 {
            return Ok(x.clone());
        }
        if rate >= 1.0 {
            return Err(IbtError::Config(format!("dropout rate {rate} must be < 1")));
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        nx::mul(x, &Tensor::new(mask, x.shape())?)
    }
}

pub fn apply_updates(store: &mut ParamStore, updates: Vec<(ParamId, Vec<f64>)>) -> Result<()> {
    for (id, data) in updates {
        store.set_data(id, data)?;
    }
    Ok(())
}

/// Registers parameters under a dotted name prefix with deterministic,
/// name-keyed initialization.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        ParamBuilder {
            store,
            seed,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = self.path(name);
        ParamBuilder {
            store: &mut *self.store,
            seed: self.seed,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// `uniform(-a, a)` with `a = 1/sqrt(fan_in)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let path = self.path(name);
        let a = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &path));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
        self.store.insert(&path, data, shape, ParamKind::Trainable)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, kind: ParamKind) -> Result<ParamId> {
        let path = self.path(name);
        let n: usize = shape.iter().product();
        self.store.insert(&path, vec![value; n], shape, kind)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let mut b = b.sub(name);
        let weight = b.uniform("weight", &[in_dim, out_dim], in_dim)?;
        let bias = if bias { Some(b.uniform("bias", &[out_dim], in_dim)?) } else { None };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        nx::linear(x, ctx.param(self.weight), self.bias.map(|b| ctx.param(b)))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(BatchNorm {
            gamma: b.constant("gamma", &[channels], 1.0, ParamKind::Trainable)?,
            beta: b.constant("beta", &[channels], 0.0, ParamKind::Trainable)?,
            running_mean: b.constant("running_mean", &[channels], 0.0, ParamKind::Buffer)?,
            running_var: b.constant("running_var", &[channels], 1.0, ParamKind::Buffer)?,
            channels,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Tensor) -> Result<Tensor> {
        let mut state = NormState::new(self.channels);
        state.running_mean = ctx.param(self.running_mean).to_vec();
        state.running_var = ctx.param(self.running_var).to_vec();
        let training = ctx.training;
        let y = nx::batch_norm(x, ctx.param(self.gamma), ctx.param(self.beta), &mut state, training)?;
        if training {
            ctx.updates.push((self.running_mean, state.running_mean));
            ctx.updates.push((self.running_var, state.running_var));
        }
        Ok(y)
    }
}

/// One `linear -> [batch norm] -> [ReLU]` stage.
#[derive(Debug, Clone)]
pub struct MlpLayer {
    pub linear: Linear,
    pub norm: Option<BatchNorm>,
    pub relu: bool,
}

impl MlpLayer {
    pub fn new(b: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize, norm: bool, relu: bool) -> Result<Self> {
        let mut b = b.sub(name);
        let linear = Linear::new(&mut b, "linear", in_dim, out_dim, true)?;
        let norm = if norm { Some(BatchNorm::new(&mut b, "norm", out_dim)?) } else { None };
        Ok(MlpLayer { linear, norm, relu })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Tensor) -> Result<Tensor> {
        let mut y = self.linear.forward(ctx, x)?;
        if let Some(n) = &self.norm {
            y = n.forward(ctx, &y)?;
        }
        Ok(if self.relu { nx::relu(&y) } else { y })
    }
}

/// Pointwise MLP: the same weights act on the last axis of every position.
#[derive(Debug, Clone)]
pub struct SharedMlp {
    pub layers: Vec<MlpLayer>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl SharedMlp {
    /// `dims = [in, h1, .., out]`. Every stage gets `norm`; all but the last
    /// get ReLU, the last only when `final_relu`.
    pub fn new(b: &mut ParamBuilder, name: &str, dims: &[usize], norm: bool, final_relu: bool) -> Result<Self> {
        if dims.len() < 2 {
            return Err(IbtError::Config(format!("{name}: MLP needs at least two widths")));
        }
        let mut b = b.sub(name);
        let stages = dims.len() - 1;
        let layers = (0..stages)
            .map(|i| {
                let relu = i + 1 < stages || final_relu;
                MlpLayer::new(&mut b, &format!("mlp{}", i + 1), dims[i], dims[i + 1], norm, relu)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SharedMlp {
            layers,
            in_dim: dims[0],
            out_dim: dims[dims.len() - 1],
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Tensor) -> Result<Tensor> {
        if x.shape().last() != Some(&self.in_dim) {
            return Err(IbtError::dim(format!(
                "MLP expects width {} but got input {:?}",
                self.in_dim,
                x.shape()
            )));
        }
        let mut y = x.clone();
        for l in &self.layers {
            y = l.forward(ctx, &y)?;
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_name_keyed() {
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        {
            let mut b = ParamBuilder::new(&mut s1, 3);
            Linear::new(&mut b, "a", 4, 2, true).unwrap();
            Linear::new(&mut b, "b", 4, 2, true).unwrap();
        }
        {
            let mut b = ParamBuilder::new(&mut s2, 3);
            Linear::new(&mut b, "b", 4, 2, true).unwrap();
        }
        let w1 = s1.by_name("b.weight").unwrap().tensor().to_vec();
        let w2 = s2.by_name("b.weight").unwrap().tensor().to_vec();
        assert_eq!(w1, w2);
        let bound = 1.0 / 2.0;
        assert!(w1.iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn shared_mlp_is_pointwise() {
        let mut store = ParamStore::new();
        let mlp = SharedMlp::new(&mut ParamBuilder::new(&mut store, 1), "m", &[3, 5, 4], true, true).unwrap();
        let ctx = &mut Ctx::eval(&store);
        let x = Tensor::new((0..18).map(|v| v as f64 * 0.1 - 0.7).collect(), &[6, 3]).unwrap();
        let y = mlp.forward(ctx, &x).unwrap();
        let single = mlp.forward(ctx, &Tensor::new(x.data()[6..9].to_vec(), &[1, 3]).unwrap()).unwrap();
        assert_eq!(&y.data()[8..12], single.data());
    }

    #[test]
    fn dropout_identity_in_eval() {
        let store = ParamStore::new();
        let x = Tensor::full(&[10], 2.0);
        let mut ctx = Ctx::eval(&store);
        assert_eq!(ctx.dropout(&x, 0.5).unwrap().data(), x.data());
        let mut ctx = Ctx::train(&store, 1);
        let y = ctx.dropout(&x, 0.5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 4.0));
    }
}
