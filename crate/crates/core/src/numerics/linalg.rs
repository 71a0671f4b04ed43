//! Batched matrix products backed by a packed GEMM kernel.

use super::broadcast::broadcast_shape;
use super::tensor::{numel_of, Tensor};
use crate::error::{IbtError, Result};

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy)]
struct Layout {
    rs: isize,
    cs: isize,
}

fn row_major(cols: usize) -> Layout {
    Layout { rs: cols as isize, cs: 1 }
}

/// `c = a·b + beta·c` for an `m×k` and a `k×n` operand.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the slices cover every element addressed by the given
    // dimensions and strides (checked by the callers' shape validation), and
    // `c` is uniquely borrowed for the duration of the call.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Maps each flat batch index of the output to the flat batch index of an
/// operand whose batch shape broadcasts to it.
fn batch_offsets(operand: &[usize], out: &[usize]) -> Vec<usize> {
    let total = numel_of(out);
    let lead = out.len() - operand.len();
    let mut res = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut idx = 0;
        let mut mult = 1;
        for d in (0..out.len()).rev() {
            let coord = rem % out[d];
            rem /= out[d];
            if d >= lead {
                let od = operand[d - lead];
                if od != 1 {
                    idx += coord * mult;
                }
                mult *= od;
            }
        }
        res.push(idx);
    }
    res
}

/// `[.., M, K] × [.., K, P] -> [.., M, P]`; batch dimensions broadcast from 1.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(IbtError::dim(format!(
            "matmul needs rank >= 2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ra, rb) = (a.rank(), b.rank());
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, p) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != k2 {
        return Err(IbtError::dim(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ba, bb) = (&a.shape()[..ra - 2], &b.shape()[..rb - 2]);
    let batch_shape = broadcast_shape(ba, bb).map_err(|_| {
        IbtError::dim(format!(
            "matmul batch dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        ))
    })?;
    let nb = numel_of(&batch_shape);
    let oa = batch_offsets(ba, &batch_shape);
    let ob = batch_offsets(bb, &batch_shape);

    let mut out = vec![0.0; nb * m * p];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..nb {
        gemm(
            m,
            k,
            p,
            &ad[oa[i] * m * k..],
            row_major(k),
            &bd[ob[i] * k * p..],
            row_major(p),
            0.0,
            &mut out[i * m * p..(i + 1) * m * p],
        );
    }

    let mut shape = batch_shape;
    shape.extend([m, p]);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(out, shape, "matmul", vec![a.clone(), b.clone()], move |g| {
        let ga = ac.requires_grad().then(|| {
            // dA = dC · Bᵀ
            let mut ga = vec![0.0; ac.numel()];
            let bd = bc.data();
            for i in 0..nb {
                gemm(
                    m,
                    p,
                    k,
                    &g[i * m * p..],
                    row_major(p),
                    &bd[ob[i] * k * p..],
                    Layout { rs: 1, cs: p as isize },
                    1.0,
                    &mut ga[oa[i] * m * k..(oa[i] + 1) * m * k],
                );
            }
            ga
        });
        let gb = bc.requires_grad().then(|| {
            // dB = Aᵀ · dC
            let mut gb = vec![0.0; bc.numel()];
            let ad = ac.data();
            for i in 0..nb {
                gemm(
                    k,
                    m,
                    p,
                    &ad[oa[i] * m * k..],
                    Layout { rs: 1, cs: k as isize },
                    &g[i * m * p..],
                    row_major(p),
                    1.0,
                    &mut gb[ob[i] * k * p..(ob[i] + 1) * k * p],
                );
            }
            gb
        });
        vec![ga, gb]
    }))
}

/// `x[.., Din] · w[Din, Dout] + bias[Dout]`, flattening leading dimensions
/// into a single GEMM.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let din = *x
        .shape()
        .last()
        .ok_or_else(|| IbtError::dim("linear input must have rank >= 1"))?;
    if w.rank() != 2 || w.shape()[0] != din {
        return Err(IbtError::dim(format!(
            "linear weight {:?} does not accept input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let dout = w.shape()[1];
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(IbtError::dim(format!(
                "linear bias {:?} does not match output width {dout}",
                b.shape()
            )));
        }
    }
    let rows = x.numel() / din.max(1);
    let mut out = vec![0.0; rows * dout];
    let beta = match bias {
        Some(b) => {
            out.chunks_exact_mut(dout.max(1)).for_each(|r| r.copy_from_slice(b.data()));
            1.0
        }
        None => 0.0,
    };
    gemm(rows, din, dout, x.data(), row_major(din), w.data(), row_major(dout), beta, &mut out);

    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank checked") = dout;
    let mut parents = vec![x.clone(), w.clone()];
    parents.extend(bias.cloned());
    let (xs, ws) = (x.clone(), w.clone());
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(out, shape, "linear", parents, move |g| {
        let dx = xs.requires_grad().then(|| {
            let mut dx = vec![0.0; rows * din];
            let wt = Layout { rs: 1, cs: dout as isize };
            gemm(rows, dout, din, g, row_major(dout), ws.data(), wt, 0.0, &mut dx);
            dx
        });
        let dw = ws.requires_grad().then(|| {
            let mut dw = vec![0.0; din * dout];
            let xt = Layout { rs: 1, cs: din as isize };
            gemm(din, rows, dout, xs.data(), xt, g, row_major(dout), 0.0, &mut dw);
            dw
        });
        let mut grads = vec![dx, dw];
        if has_bias {
            let mut db = vec![0.0; dout];
            for r in g.chunks_exact(dout.max(1)) {
                db.iter_mut().zip(r).for_each(|(d, v)| *d += v);
            }
            grads.push(Some(db));
        }
        grads
    }))
}
