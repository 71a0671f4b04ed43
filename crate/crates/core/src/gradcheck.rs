//! Finite-difference gradient checking.
//!
//! A check perturbs one parameter coordinate at a time, re-evaluates the
//! scalar function on both sides and compares the slope with the gradient
//! the reverse sweep produced. Functions must be pure in the parameters, so
//! models are evaluated with running normalization statistics.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{IbtError, Result};
use crate::layers::{derive_seed, BatchGraph, Ctx, IbtLayer, LayerConfig, ParamBuilder};
use crate::model::{IbtConfig, IbtModel};
use crate::numerics::{self as nx, NormState, ParamKind, ParamStore, Tensor};
use crate::trainer::cross_entropy;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub rel_tol: f64,
    /// Passes a coordinate whose absolute error is below this even when the
    /// relative error is large (near-zero gradients).
    pub abs_tol: f64,
    /// Functions with more parameters than this are sub-sampled.
    pub subsample_above: usize,
    pub coords_per_tensor: usize,
    /// Step relative to max(|theta|, 1). Wider steps cross ReLU and max
    /// kinks in the networks.
    pub step: f64,
    /// Relative error is only meaningful well above the roundoff floor of
    /// the difference (about 3e-11 at the default step); smaller gradients
    /// are held to `abs_tol` alone.
    pub rel_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            subsample_above: 2000,
            coords_per_tensor: 500,
            step: 1e-5,
            rel_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub total: usize,
    /// Over coordinates whose gradient magnitude exceeds the absolute floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub scope: String,
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
    pub elapsed_secs: f64,
}

impl GradCheckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let w = self.params.iter().map(|p| p.name.len()).max().unwrap_or(4).max(9);
        let mut out = format!("gradcheck {}\n", self.scope);
        let _ = writeln!(out, "{:<w$}  {:>7}  {:>7}  {:>11}  {:>11}  result", "parameter", "checked", "total", "max rel", "max abs");
        for p in &self.params {
            let _ = writeln!(
                out,
                "{:<w$}  {:>7}  {:>7}  {:>11.3e}  {:>11.3e}  {}",
                p.name,
                p.checked,
                p.total,
                p.max_rel_err,
                p.max_abs_err,
                if p.passed { "ok" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            out,
            "{} | max rel {:.3e} | max abs {:.3e} | {:.2}s",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.max_abs_err,
            self.elapsed_secs
        );
        out
    }
}

/// Compares analytic and finite-difference gradients of `f` for every
/// trainable parameter of `params`. Values are restored afterwards.
pub fn finite_diff_check<F>(scope: &str, params: &mut ParamStore, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<Tensor>,
{
    let start = Instant::now();
    let eval = |p: &ParamStore| -> Result<f64> {
        let v = f(p)?.item()?;
        if !v.is_finite() {
            return Err(IbtError::Numeric(format!("{scope}: function value is {v}")));
        }
        Ok(v)
    };
    let base = eval(params)?;
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(IbtError::Contract(format!(
            "{scope}: function is not deterministic ({base} then {again})"
        )));
    }

    params.zero_grad();
    f(params)?.backward()?;
    let trainable: Vec<_> = params.trainable().map(|(id, p)| (id, p.name.clone())).collect();
    let grads: Vec<Vec<f64>> = trainable
        .iter()
        .map(|&(id, _)| params.tensor(id).grad().unwrap_or_else(|| vec![0.0; params.tensor(id).numel()]))
        .collect();
    params.clear_grad();

    let total_params: usize = trainable.iter().map(|&(id, _)| params.tensor(id).numel()).sum();
    let subsample = total_params > cfg.subsample_above;
    let mut checks = Vec::with_capacity(trainable.len());
    for ((id, name), grad) in trainable.iter().zip(&grads) {
        let original = params.tensor(*id).to_vec();
        let n = original.len();
        let coords: Vec<usize> = if subsample && n > cfg.coords_per_tensor {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, name));
            let mut c = index::sample(&mut rng, n, cfg.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        } else {
            (0..n).collect()
        };
        let (mut max_rel, mut max_abs, mut passed) = (0.0f64, 0.0f64, true);
        for &k in &coords {
            let theta = original[k];
            let h = cfg.step * theta.abs().max(1.0);
            let mut probe = original.clone();
            probe[k] = theta + h;
            params.set_data(*id, probe.clone())?;
            let up = eval(params)?;
            probe[k] = theta - h;
            params.set_data(*id, probe)?;
            let down = eval(params)?;
            let numeric = (up - down) / (2.0 * h);
            let abs = (numeric - grad[k]).abs();
            let scale = numeric.abs().max(grad[k].abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            max_abs = max_abs.max(abs);
            if scale >= cfg.rel_floor {
                max_rel = max_rel.max(rel);
            }
            passed &= rel <= cfg.rel_tol || abs <= cfg.abs_tol;
        }
        params.set_data(*id, original)?;
        checks.push(ParamCheck {
            name: name.clone(),
            checked: coords.len(),
            total: n,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            passed,
        });
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradCheckReport {
        scope: scope.to_string(),
        max_rel_err: checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max),
        max_abs_err: checks.iter().map(|c| c.max_abs_err).fold(0.0, f64::max),
        params: checks,
        passed,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Every op covered by the `op` scope.
pub const OPS: [&str; 22] = [
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "scale",
    "reshape",
    "broadcast_to",
    "transpose_last",
    "concat",
    "gather_rows",
    "reduce_sum",
    "reduce_mean",
    "sum_all",
    "mean_all",
    "reduce_max",
    "softmax",
    "cross_entropy",
    "matmul",
    "linear",
    "batch_norm_eval",
    "batch_norm_train",
];

fn random_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Weighted sum with fixed random weights, so symmetric outputs do not
/// cancel in the check.
fn project(y: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(random_values(&mut rng, y.numel()), y.shape())?;
    Ok(nx::sum_all(&nx::mul(y, &w)?))
}

/// Builds the parameters and scalar function for one op.
#[allow(clippy::type_complexity)]
fn op_case(name: &str, seed: u64) -> Result<(ParamStore, Box<dyn Fn(&ParamStore) -> Result<Tensor>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
    let mut s = ParamStore::new();
    let mut add = |s: &mut ParamStore, n: &str, shape: &[usize]| {
        let len = shape.iter().product();
        s.insert(n, random_values(&mut rng, len), shape, ParamKind::Trainable)
    };
    let a = add(&mut s, "a", &[2, 3, 4])?;
    let f: Box<dyn Fn(&ParamStore) -> Result<Tensor>> = match name {
        "add" | "sub" | "mul" => {
            let b = add(&mut s, "b", &[3, 1])?;
            let op = name.to_string();
            Box::new(move |p| {
                let (x, y) = (p.tensor(a), p.tensor(b));
                let out = match op.as_str() {
                    "add" => nx::add(x, y)?,
                    "sub" => nx::sub(x, y)?,
                    _ => nx::mul(x, y)?,
                };
                project(&out, 1)
            })
        }
        "relu" => Box::new(move |p| project(&nx::relu(p.tensor(a)), 1)),
        "sigmoid" => Box::new(move |p| project(&nx::sigmoid(p.tensor(a)), 1)),
        "scale" => Box::new(move |p| project(&nx::scale(p.tensor(a), -1.5), 1)),
        "reshape" => Box::new(move |p| project(&nx::reshape(p.tensor(a), &[4, 6])?, 1)),
        "broadcast_to" => Box::new(move |p| project(&nx::broadcast_to(p.tensor(a), &[2, 2, 3, 4])?, 1)),
        "transpose_last" => Box::new(move |p| project(&nx::transpose_last(p.tensor(a))?, 1)),
        "concat" => {
            let b = add(&mut s, "b", &[2, 1, 4])?;
            Box::new(move |p| project(&nx::concat(&[p.tensor(a), p.tensor(b)], 1)?, 1))
        }
        "gather_rows" => Box::new(move |p| {
            let x = nx::reshape(p.tensor(a), &[6, 4])?;
            project(&nx::gather_rows(&x, &[5, 0, 0, 3, 2, 5, 1, 4], &[2, 4])?, 1)
        }),
        "reduce_sum" => Box::new(move |p| project(&nx::reduce_sum(p.tensor(a), 1)?, 1)),
        "reduce_mean" => Box::new(move |p| project(&nx::reduce_mean(p.tensor(a), 2)?, 1)),
        "sum_all" => Box::new(move |p| Ok(nx::sum_all(&nx::mul(p.tensor(a), p.tensor(a))?))),
        "mean_all" => Box::new(move |p| nx::mean_all(&nx::mul(p.tensor(a), p.tensor(a))?)),
        "reduce_max" => Box::new(move |p| project(&nx::reduce_max(p.tensor(a), 1)?.0, 1)),
        "softmax" => Box::new(move |p| project(&nx::softmax(p.tensor(a), 1)?, 1)),
        "cross_entropy" => {
            Box::new(move |p| nx::cross_entropy(&nx::reshape(p.tensor(a), &[6, 4])?, &[0, 3, 1, 1, 2, 0]))
        }
        "matmul" => {
            let b = add(&mut s, "b", &[4, 5])?;
            Box::new(move |p| project(&nx::matmul(p.tensor(a), p.tensor(b))?, 1))
        }
        "linear" => {
            let w = add(&mut s, "w", &[4, 3])?;
            let b = add(&mut s, "b", &[3])?;
            Box::new(move |p| project(&nx::linear(p.tensor(a), p.tensor(w), Some(p.tensor(b)))?, 1))
        }
        "batch_norm_eval" | "batch_norm_train" => {
            let g = add(&mut s, "gamma", &[4])?;
            let b = add(&mut s, "beta", &[4])?;
            let training = name == "batch_norm_train";
            Box::new(move |p| {
                let mut st = NormState::new(4);
                st.running_mean = vec![0.1, -0.2, 0.3, 0.0];
                st.running_var = vec![0.5, 1.5, 2.0, 1.0];
                project(&nx::batch_norm(p.tensor(a), p.tensor(g), p.tensor(b), &mut st, training)?, 1)
            })
        }
        other => return Err(IbtError::Config(format!("no gradient check registered for op {other:?}"))),
    };
    Ok((s, f))
}

pub fn check_op(name: &str, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (mut store, f) = op_case(name, cfg.seed)?;
    finite_diff_check(&format!("op:{name}"), &mut store, f, cfg)
}

pub fn check_ops(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    OPS.iter().map(|op| check_op(op, cfg)).collect()
}

/// A sigmoid whose backward rule has the wrong sign. The check must flag it.
pub fn faulty_sigmoid(x: &Tensor) -> Tensor {
    let y: Vec<f64> = x.data().iter().map(|&v| nx::ops::stable_sigmoid(v)).collect();
    let out = y.clone();
    Tensor::from_op(out, x.shape().to_vec(), "faulty_sigmoid", vec![x.clone()], move |g| {
        vec![Some(g.iter().zip(&y).map(|(g, y)| -g * y * (1.0 - y)).collect())]
    })
}

pub fn check_injected_fault(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut s = ParamStore::new();
    let a = s.insert("a", random_values(&mut rng, 12), &[3, 4], ParamKind::Trainable)?;
    finite_diff_check("op:faulty_sigmoid", &mut s, move |p| project(&faulty_sigmoid(p.tensor(a)), 1), cfg)
}

/// Random cloud with well-separated points, `[B, N, 3]`.
pub fn random_cloud(b: usize, n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(random_values(&mut rng, b * n * 3), &[b, n, 3]).expect("shape matches")
}

/// One IBT layer at `N = 12, D = 8, K = 4`.
pub fn check_layer(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (b, n, d, k) = (2, 12, 8, 4);
    let mut store = ParamStore::new();
    let layer = IbtLayer::new(&mut ParamBuilder::new(&mut store, cfg.seed), "ibt", LayerConfig::new(d))?;
    let coords = random_cloud(b, n, cfg.seed ^ 1);
    let graph = BatchGraph::from_coords(&coords, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 2);
    let feats = Tensor::new(random_values(&mut rng, b * n * d), &[b, n, d])?;
    finite_diff_check(
        "layer",
        &mut store,
        |p| {
            let out = layer.forward(&mut Ctx::eval(p), &coords, &feats, &graph)?;
            project(&out, 3)
        },
        cfg,
    )
}

/// The model config used by the `model` scope.
pub fn model_check_config() -> IbtConfig {
    IbtConfig {
        embed_dim: 8,
        k: 4,
        num_classes: 4,
        global_dim: 16,
        ..IbtConfig::modelnet40()
    }
}

/// Classification loss of the full network at `B = 2, N = 12, D = 8, K = 4`.
pub fn check_model(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut model = IbtModel::new(model_check_config(), cfg.seed)?;
    let coords = random_cloud(2, 12, cfg.seed ^ 1);
    let labels = [1usize, 3];
    let mut params = std::mem::take(&mut model.params);
    let report = finite_diff_check(
        "model",
        &mut params,
        |p| {
            let logits = model.classify(&mut Ctx::eval(p), &coords)?;
            cross_entropy(&logits, &labels)
        },
        cfg,
    );
    model.params = params;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_slope() {
        let mut s = ParamStore::new();
        let id = s.insert("t", vec![3.0], &[1], ParamKind::Trainable).unwrap();
        let r = finite_diff_check("sq", &mut s, |p| Ok(nx::sum_all(&nx::mul(p.tensor(id), p.tensor(id))?)), &GradCheckConfig::default()).unwrap();
        assert!(r.passed);
        assert!(r.max_abs_err < 1e-9, "{}", r.max_abs_err);
        assert_eq!(s.tensor(id).data(), &[3.0]);
    }

    #[test]
    fn every_op_passes() {
        for r in check_ops(&GradCheckConfig::default()).unwrap() {
            assert!(r.passed, "{}", r.to_table());
        }
    }

    #[test]
    fn injected_sign_error_is_caught() {
        assert!(!check_injected_fault(&GradCheckConfig::default()).unwrap().passed);
    }

    #[test]
    fn non_deterministic_function_is_rejected() {
        let mut s = ParamStore::new();
        s.insert("t", vec![1.0], &[1], ParamKind::Trainable).unwrap();
        let counter = std::cell::Cell::new(0.0);
        let err = finite_diff_check(
            "drift",
            &mut s,
            |_| {
                counter.set(counter.get() + 1.0);
                Ok(Tensor::scalar(counter.get()))
            },
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, IbtError::Contract(_)));
    }
}
