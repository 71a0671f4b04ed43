//! Batch normalization over a channels-last layout.

use super::tensor::Tensor;
use crate::error::{IbtError, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl NormState {
    pub fn new(channels: usize) -> Self {
        NormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Normalizes `x[.., C]` per channel. Training mode uses statistics over every
/// non-channel position and folds them into `state` (unbiased variance for
/// the running estimate); eval mode uses the running statistics.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    state: &mut NormState,
    training: bool,
) -> Result<Tensor> {
    let c = state.channels();
    if x.shape().last() != Some(&c) || gamma.numel() != c || beta.numel() != c {
        return Err(IbtError::dim(format!(
            "batch_norm over {c} channels got input {:?}, gamma {:?}, beta {:?}",
            x.shape(),
            gamma.shape(),
            beta.shape()
        )));
    }
    let rows = x.numel() / c;
    if rows == 0 {
        return Err(IbtError::Domain("batch_norm over an empty batch".into()));
    }
    let xd = x.data();

    let (mean, var) = if training {
        let mut mean = vec![0.0; c];
        for r in 0..rows {
            mean.iter_mut().zip(&xd[r * c..(r + 1) * c]).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for r in 0..rows {
            for ((s, v), m) in var.iter_mut().zip(&xd[r * c..(r + 1) * c]).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= rows as f64);
        let unbias = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
        let mom = state.momentum;
        for ch in 0..c {
            state.running_mean[ch] = (1.0 - mom) * state.running_mean[ch] + mom * mean[ch];
            state.running_var[ch] = (1.0 - mom) * state.running_var[ch] + mom * var[ch] * unbias;
        }
        (mean, var)
    } else {
        (state.running_mean.clone(), state.running_var.clone())
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for r in 0..rows {
        for ch in 0..c {
            let i = r * c + ch;
            xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
            out[i] = gd[ch] * xhat[i] + bd[ch];
        }
    }

    let (gc, need_x, need_g, need_b) = (
        gamma.clone(),
        x.requires_grad(),
        gamma.requires_grad(),
        beta.requires_grad(),
    );
    let op = if training { "batch_norm_train" } else { "batch_norm_eval" };
    Ok(Tensor::from_op(
        out,
        x.shape().to_vec(),
        op,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g| {
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for r in 0..rows {
                for ch in 0..c {
                    let i = r * c + ch;
                    dgamma[ch] += g[i] * xhat[i];
                    dbeta[ch] += g[i];
                }
            }
            let dx = need_x.then(|| {
                let gd = gc.data();
                let mut dx = vec![0.0; rows * c];
                if training {
                    let n = rows as f64;
                    for r in 0..rows {
                        for ch in 0..c {
                            let i = r * c + ch;
                            dx[i] = gd[ch] * inv_std[ch] / n
                                * (n * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                        }
                    }
                } else {
                    for r in 0..rows {
                        for ch in 0..c {
                            let i = r * c + ch;
                            dx[i] = g[i] * gd[ch] * inv_std[ch];
                        }
                    }
                }
                dx
            });
            vec![dx, need_g.then_some(dgamma), need_b.then_some(dbeta)]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(c: usize) -> (Tensor, Tensor) {
        (
            Tensor::param(vec![1.0; c], &[c]).unwrap(),
            Tensor::param(vec![0.0; c], &[c]).unwrap(),
        )
    }

    #[test]
    fn constant_column_maps_to_beta() {
        let x = Tensor::new(vec![3.0, 1.0, 3.0, 2.0, 3.0, 5.0], &[3, 2]).unwrap();
        let (g, b) = affine(2);
        let mut st = NormState::new(2);
        let y = batch_norm(&x, &g, &b, &mut st, true).unwrap();
        for r in 0..3 {
            assert!(y.data()[r * 2].abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_moments() {
        let x = Tensor::new(vec![0.3, -1.0, 2.0, 4.0, 1.5, 0.2, -0.7, 2.2], &[4, 2]).unwrap();
        let (g, b) = affine(2);
        let mut st = NormState::new(2);
        let y = batch_norm(&x, &g, &b, &mut st, true).unwrap();
        for ch in 0..2 {
            let col: Vec<f64> = (0..4).map(|r| y.data()[r * 2 + ch]).collect();
            let m = col.iter().sum::<f64>() / 4.0;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
        // running stats moved 10% of the way to the batch statistics
        assert!((st.running_mean[0] - 0.1 * (0.3 + 2.0 + 1.5 - 0.7) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn eval_uses_running_stats() {
        let x = Tensor::new(vec![2.0, 4.0], &[2, 1]).unwrap();
        let (g, b) = affine(1);
        let mut st = NormState::new(1);
        st.running_mean = vec![1.0];
        st.running_var = vec![4.0 - BN_EPS];
        let y = batch_norm(&x, &g, &b, &mut st, false).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
        assert!((y.data()[1] - 1.5).abs() < 1e-12);
        assert_eq!(st.running_mean, vec![1.0]);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let (g, b) = affine(3);
        let mut st = NormState::new(3);
        let r = batch_norm(&Tensor::zeros(&[4, 2]), &g, &b, &mut st, true);
        assert!(matches!(r, Err(IbtError::Dimension(_))));
    }
}
