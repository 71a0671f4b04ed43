//! Differentiable tensor operations.
//!
//! Every op validates shapes, computes its forward value eagerly and, when any
//! input requires a gradient, records a backward rule on the result.

use super::broadcast::Plan;
use super::tensor::{numel_of, Tensor};
use crate::error::{IbtError, Result};

// ---------------------------------------------------------------------------
// elementwise binary ops with broadcasting

fn binary_forward(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<f64>, Plan)> {
    let plan = Plan::new(a.shape(), b.shape())?;
    let mut out = vec![0.0; numel_of(&plan.out_shape)];
    let (ad, bd) = (a.data(), b.data());
    plan.rows(|o, ao, bo, len, sa, sb| {
        let dst = &mut out[o..o + len];
        match (sa, sb) {
            (1, 1) => {
                for ((d, x), y) in dst.iter_mut().zip(&ad[ao..ao + len]).zip(&bd[bo..bo + len]) {
                    *d = f(*x, *y);
                }
            }
            (1, 0) => {
                let y = bd[bo];
                for (d, x) in dst.iter_mut().zip(&ad[ao..ao + len]) {
                    *d = f(*x, y);
                }
            }
            (0, 1) => {
                let x = ad[ao];
                for (d, y) in dst.iter_mut().zip(&bd[bo..bo + len]) {
                    *d = f(x, *y);
                }
            }
            _ => {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = f(ad[ao + j * sa], bd[bo + j * sb]);
                }
            }
        }
    });
    Ok((out, plan))
}

fn reduce_to(plan: &Plan, g: &[f64], which: usize, shape: &[usize]) -> Vec<f64> {
    if plan.out_shape.as_slice() == shape {
        return g.to_vec();
    }
    let mut acc = vec![0.0; numel_of(shape)];
    plan.reduce_into(g, which, &mut acc);
    acc
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (data, plan) = binary_forward(a, b, |x, y| x + y)?;
    let shape = plan.out_shape.clone();
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    let (ra, rb) = (a.requires_grad(), b.requires_grad());
    Ok(Tensor::from_op(data, shape, "add", vec![a.clone(), b.clone()], move |g| {
        vec![
            ra.then(|| reduce_to(&plan, g, 0, &sa)),
            rb.then(|| reduce_to(&plan, g, 1, &sb)),
        ]
    }))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (data, plan) = binary_forward(a, b, |x, y| x - y)?;
    let shape = plan.out_shape.clone();
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    let (ra, rb) = (a.requires_grad(), b.requires_grad());
    Ok(Tensor::from_op(data, shape, "sub", vec![a.clone(), b.clone()], move |g| {
        vec![
            ra.then(|| reduce_to(&plan, g, 0, &sa)),
            rb.then(|| {
                let mut r = reduce_to(&plan, g, 1, &sb);
                r.iter_mut().for_each(|v| *v = -*v);
                r
            }),
        ]
    }))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (data, plan) = binary_forward(a, b, |x, y| x * y)?;
    let shape = plan.out_shape.clone();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(data, shape, "mul", vec![a.clone(), b.clone()], move |g| {
        let grad_for = |which: usize, this: &Tensor, other: &Tensor| -> Option<Vec<f64>> {
            if !this.requires_grad() {
                return None;
            }
            let od = other.data();
            if this.shape() == plan.out_shape.as_slice() && other.shape() == this.shape() {
                return Some(g.iter().zip(od).map(|(a, b)| a * b).collect());
            }
            let mut acc = vec![0.0; this.numel()];
            plan.rows(|o, ao, bo, len, sa, sb| {
                let (to, ts, oo, os) = if which == 0 { (ao, sa, bo, sb) } else { (bo, sb, ao, sa) };
                for j in 0..len {
                    acc[to + j * ts] += g[o + j] * od[oo + j * os];
                }
            });
            Some(acc)
        };
        vec![grad_for(0, &ac, &bc), grad_for(1, &bc, &ac)]
    }))
}

// ---------------------------------------------------------------------------
// elementwise unary ops

fn unary(
    x: &Tensor,
    op: &'static str,
    f: impl Fn(f64) -> f64,
    // derivative expressed through (input, output)
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let out_copy = if x.requires_grad() { data.clone() } else { Vec::new() };
    let xc = x.clone();
    Tensor::from_op(data, x.shape().to_vec(), op, vec![x.clone()], move |g| {
        let grad = xc
            .data()
            .iter()
            .zip(&out_copy)
            .zip(g)
            .map(|((&i, &o), &gv)| gv * df(i, o))
            .collect();
        vec![Some(grad)]
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    let xc = x.clone();
    Tensor::from_op(data, x.shape().to_vec(), "relu", vec![x.clone()], move |g| {
        let grad = xc
            .data()
            .iter()
            .zip(g)
            .map(|(&i, &gv)| if i > 0.0 { gv } else { 0.0 })
            .collect();
        vec![Some(grad)]
    })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    unary(x, "sigmoid", stable_sigmoid, |_, o| o * (1.0 - o))
}

pub(crate) fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    unary(x, "scale", |v| v * c, move |_, _| c)
}

// ---------------------------------------------------------------------------
// shape ops

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if numel_of(shape) != x.numel() {
        return Err(IbtError::dim(format!(
            "cannot reshape {:?} into {shape:?}",
            x.shape()
        )));
    }
    Ok(x.view_op(shape.to_vec(), "reshape", |g| vec![Some(g.to_vec())]))
}

pub fn broadcast_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let plan = Plan::expand(x.shape(), shape)?;
    let xd = x.data();
    let mut out = vec![0.0; numel_of(shape)];
    plan.rows(|o, ao, _, len, sa, _| {
        for j in 0..len {
            out[o + j] = xd[ao + j * sa];
        }
    });
    let src_shape = x.shape().to_vec();
    Ok(Tensor::from_op(out, shape.to_vec(), "broadcast", vec![x.clone()], move |g| {
        vec![Some(reduce_to(&plan, g, 0, &src_shape))]
    }))
}

/// Swaps the last two axes.
pub fn transpose_last(x: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 {
        return Err(IbtError::dim(format!("transpose needs rank >= 2, got {:?}", x.shape())));
    }
    let (m, n) = (x.shape()[r - 2], x.shape()[r - 1]);
    let batch = x.numel() / (m * n).max(1);
    let swap = move |src: &[f64], rows: usize, cols: usize| {
        let mut dst = vec![0.0; src.len()];
        for b in 0..batch {
            let base = b * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    dst[base + j * rows + i] = src[base + i * cols + j];
                }
            }
        }
        dst
    };
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    let data = swap(x.data(), m, n);
    Ok(Tensor::from_op(data, shape, "transpose", vec![x.clone()], move |g| {
        vec![Some(swap(g, n, m))]
    }))
}

fn axis_view(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(IbtError::dim(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| IbtError::dim("concat of an empty list"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(IbtError::dim(format!("concat axis {axis} out of range for rank {rank}")));
    }
    for p in parts {
        let ok = p.rank() == rank
            && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
        if !ok {
            return Err(IbtError::dim(format!(
                "concat along axis {axis}: {:?} does not match {:?}",
                p.shape(),
                first.shape()
            )));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
    let total: usize = widths.iter().sum();
    let mut out = vec![0.0; outer * total];
    let mut col = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let pd = p.data();
        for o in 0..outer {
            out[o * total + col..o * total + col + w].copy_from_slice(&pd[o * w..(o + 1) * w]);
        }
        col += w;
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
    let parents: Vec<Tensor> = parts.iter().map(|&p| p.clone()).collect();
    Ok(Tensor::from_op(out, shape, "concat", parents, move |g| {
        let mut col = 0;
        widths
            .iter()
            .zip(&needs)
            .map(|(&w, &need)| {
                let start = col;
                col += w;
                need.then(|| {
                    let mut gp = vec![0.0; outer * w];
                    for o in 0..outer {
                        gp[o * w..(o + 1) * w]
                            .copy_from_slice(&g[o * total + start..o * total + start + w]);
                    }
                    gp
                })
            })
            .collect()
    }))
}

/// `out[i.., :] = x[idx[i..], :]` for a 2-D `x`; the result has shape
/// `idx_shape ++ [D]`. Backward scatter-adds into the source rows.
pub fn gather_rows(x: &Tensor, idx: &[usize], idx_shape: &[usize]) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(IbtError::dim(format!("gather_rows needs a 2-D source, got {:?}", x.shape())));
    }
    if numel_of(idx_shape) != idx.len() {
        return Err(IbtError::dim(format!(
            "index shape {idx_shape:?} does not hold {} indices",
            idx.len()
        )));
    }
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
        return Err(IbtError::Index(format!("row index {bad} out of range for {rows} rows")));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&xd[i * d..(i + 1) * d]);
    }
    let mut shape = idx_shape.to_vec();
    shape.push(d);
    let idx = idx.to_vec();
    Ok(Tensor::from_op(out, shape, "gather_rows", vec![x.clone()], move |g| {
        let mut gx = vec![0.0; rows * d];
        for (e, &i) in idx.iter().enumerate() {
            gx[i * d..(i + 1) * d]
                .iter_mut()
                .zip(&g[e * d..(e + 1) * d])
                .for_each(|(a, b)| *a += b);
        }
        vec![Some(gx)]
    }))
}

// ---------------------------------------------------------------------------
// reductions

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

pub fn reduce_sum(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_view(x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for l in 0..len {
            let src = &xd[(o * len + l) * inner..(o * len + l + 1) * inner];
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
    }
    Ok(Tensor::from_op(out, drop_axis(x.shape(), axis), "reduce_sum", vec![x.clone()], move |g| {
        let mut gx = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for l in 0..len {
                gx[(o * len + l) * inner..(o * len + l + 1) * inner]
                    .copy_from_slice(&g[o * inner..(o + 1) * inner]);
            }
        }
        vec![Some(gx)]
    }))
}

pub fn reduce_mean(x: &Tensor, axis: usize) -> Result<Tensor> {
    let len = *x
        .shape()
        .get(axis)
        .ok_or_else(|| IbtError::dim(format!("axis {axis} out of range for {:?}", x.shape())))?;
    if len == 0 {
        return Err(IbtError::Domain("mean over an empty axis".into()));
    }
    Ok(scale(&reduce_sum(x, axis)?, 1.0 / len as f64))
}

pub fn sum_all(x: &Tensor) -> Tensor {
    let s: f64 = x.data().iter().sum();
    let n = x.numel();
    Tensor::from_op(vec![s], vec![], "sum_all", vec![x.clone()], move |g| {
        vec![Some(vec![g[0]; n])]
    })
}

pub fn mean_all(x: &Tensor) -> Result<Tensor> {
    if x.numel() == 0 {
        return Err(IbtError::Domain("mean of an empty tensor".into()));
    }
    Ok(scale(&sum_all(x), 1.0 / x.numel() as f64))
}

/// Maximum along `axis` together with the winning positions. Ties go to the
/// lowest index, which is also the only element that receives gradient.
pub fn reduce_max(x: &Tensor, axis: usize) -> Result<(Tensor, Vec<usize>)> {
    let (outer, len, inner) = axis_view(x.shape(), axis)?;
    if len == 0 {
        return Err(IbtError::Domain(format!("max over empty axis {axis} of {:?}", x.shape())));
    }
    let xd = x.data();
    let mut out = vec![0.0; outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        let base = o * len * inner;
        out[o * inner..(o + 1) * inner].copy_from_slice(&xd[base..base + inner]);
        for l in 1..len {
            let row = &xd[base + l * inner..base + (l + 1) * inner];
            for (c, &v) in row.iter().enumerate() {
                if v > out[o * inner + c] {
                    out[o * inner + c] = v;
                    arg[o * inner + c] = l;
                }
            }
        }
    }
    let indices = arg.clone();
    let t = Tensor::from_op(out, drop_axis(x.shape(), axis), "reduce_max", vec![x.clone()], move |g| {
        let mut gx = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for c in 0..inner {
                let l = arg[o * inner + c];
                gx[(o * len + l) * inner + c] = g[o * inner + c];
            }
        }
        vec![Some(gx)]
    });
    Ok((t, indices))
}

// ---------------------------------------------------------------------------
// softmax family

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_view(x.shape(), axis)?;
    if let Some(v) = x.data().iter().find(|v| !v.is_finite()) {
        return Err(IbtError::Numeric(format!("softmax input contains {v}")));
    }
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    let block = len * inner;
    let step = inner.max(1);
    // Rows along the softmax axis are `inner` apart; work on whole rows of
    // `inner` values at a time so the inner loops stay contiguous.
    let mut m = vec![0.0; inner];
    let mut z = vec![0.0; inner];
    for o in 0..outer {
        let src = &xd[o * block..(o + 1) * block];
        let dst = &mut out[o * block..(o + 1) * block];
        m.fill(f64::NEG_INFINITY);
        for row in src.chunks_exact(step) {
            m.iter_mut().zip(row).for_each(|(a, &b)| *a = a.max(b));
        }
        z.fill(0.0);
        for (d, s) in dst.chunks_exact_mut(step).zip(src.chunks_exact(step)) {
            for c in 0..inner {
                d[c] = (s[c] - m[c]).exp();
                z[c] += d[c];
            }
        }
        for d in dst.chunks_exact_mut(step) {
            d.iter_mut().zip(&z).for_each(|(a, b)| *a /= b);
        }
    }
    let y = out.clone();
    Ok(Tensor::from_op(out, x.shape().to_vec(), "softmax", vec![x.clone()], move |g| {
        let mut gx = vec![0.0; y.len()];
        let mut dot = vec![0.0; inner];
        for o in 0..outer {
            let range = o * block..(o + 1) * block;
            let (yb, gb) = (&y[range.clone()], &g[range.clone()]);
            dot.fill(0.0);
            for (yr, gr) in yb.chunks_exact(step).zip(gb.chunks_exact(step)) {
                for c in 0..inner {
                    dot[c] += yr[c] * gr[c];
                }
            }
            for ((dx, yr), gr) in gx[range].chunks_exact_mut(step).zip(yb.chunks_exact(step)).zip(gb.chunks_exact(step)) {
                for c in 0..inner {
                    dx[c] = yr[c] * (gr[c] - dot[c]);
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of a
/// `[M, C]` logit matrix.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(IbtError::dim(format!(
            "cross_entropy expects [M, C] logits, got {:?}",
            logits.shape()
        )));
    }
    let (m, c) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != m {
        return Err(IbtError::dim(format!("{} targets for {m} logit rows", targets.len())));
    }
    if m == 0 {
        return Err(IbtError::Domain("cross_entropy over an empty batch".into()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(IbtError::Data(format!("target {t} out of range for {c} classes")));
    }
    let ld = logits.data();
    let mut probs = vec![0.0; m * c];
    let mut loss = 0.0;
    for i in 0..m {
        let row = &ld[i * c..(i + 1) * c];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let log_z = z.ln() + mx;
        loss += log_z - row[targets[i]];
        for (p, v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
            *p = (v - log_z).exp();
        }
    }
    loss /= m as f64;
    if !loss.is_finite() {
        return Err(IbtError::Numeric(format!("cross_entropy produced {loss}")));
    }
    let targets = targets.to_vec();
    Ok(Tensor::from_op(vec![loss], vec![], "cross_entropy", vec![logits.clone()], move |g| {
        let s = g[0] / m as f64;
        let mut gx: Vec<f64> = probs.iter().map(|p| p * s).collect();
        for (i, &t) in targets.iter().enumerate() {
            gx[i * c + t] -= s;
        }
        vec![Some(gx)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::param(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(sigmoid(&t(&[0.0], &[1])).data(), &[0.5]);
    }

    #[test]
    fn relu_values_and_gradients() {
        let x = t(&[-2.5, 2.5], &[2]);
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 2.5]);
        sum_all(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn concat_shapes() {
        let a = Tensor::zeros(&[5, 3]);
        let b = Tensor::zeros(&[5, 1]);
        assert_eq!(concat(&[&a, &b], 1).unwrap().shape(), &[5, 4]);
        assert!(concat(&[&a, &Tensor::zeros(&[4, 1])], 1).is_err());
    }

    #[test]
    fn concat_routes_gradients() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0], &[2, 1]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let w = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        sum_all(&mul(&c, &w).unwrap()).backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 2.0, 4.0, 5.0]);
        assert_eq!(b.grad().unwrap(), vec![3.0, 6.0]);
    }

    #[test]
    fn incompatible_broadcast_is_dimension_error() {
        let r = add(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4]));
        assert!(matches!(r, Err(IbtError::Dimension(_))));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = t(&[10.0, 20.0, 30.0], &[3]);
        let c = add(&a, &b).unwrap();
        assert_eq!(c.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        sum_all(&c).backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn max_with_indices() {
        let x = t(&[1.0, 5.0, 7.0, 2.0], &[2, 2]);
        let (m, idx) = reduce_max(&x, 1).unwrap();
        assert_eq!(m.data(), &[5.0, 7.0]);
        assert_eq!(idx, vec![1, 0]);
    }

    #[test]
    fn max_ties_go_to_lowest_index() {
        let x = t(&[3.0, 3.0, 3.0], &[3]);
        let (m, idx) = reduce_max(&x, 0).unwrap();
        assert_eq!(idx, vec![0]);
        m.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_over_empty_axis_is_domain_error() {
        let x = Tensor::zeros(&[2, 0]);
        assert!(matches!(reduce_max(&x, 1), Err(IbtError::Domain(_))));
    }

    #[test]
    fn sum_and_mean() {
        let x = t(&[1.0, 2.0, 3.0], &[3]);
        assert_eq!(reduce_sum(&x, 0).unwrap().data(), &[6.0]);
        assert_eq!(reduce_mean(&x, 0).unwrap().data(), &[2.0]);
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::zeros(&[4]), 0).unwrap();
        assert_eq!(u.data(), &[0.25; 4]);
        let big = softmax(&Tensor::new(vec![1000.0, 1000.0], &[2]).unwrap(), 0).unwrap();
        assert_eq!(big.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap(), 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in s.data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::new(vec![1.0, f64::NAN], &[2]).unwrap();
        assert!(matches!(softmax(&x, 0), Err(IbtError::Numeric(_))));
    }

    #[test]
    fn backward_examples() {
        let x = t(&[1.0, 2.0, 3.0], &[3]);
        sum_all(&x).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);

        let x = t(&[1.0, 2.0], &[2]);
        sum_all(&mul(&x, &x).unwrap()).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = t(&[1.0, 2.0], &[2]);
        for _ in 0..2 {
            sum_all(&scale(&x, 3.0)).backward().unwrap();
        }
        assert_eq!(x.grad().unwrap(), vec![6.0, 6.0]);
        x.clear_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn gather_identity_and_duplicates() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let g = gather_rows(&x, &[0, 1, 1, 1], &[2, 2]).unwrap();
        assert_eq!(g.shape(), &[2, 2, 2]);
        assert_eq!(&g.data()[..2], &[1.0, 2.0]);
        sum_all(&g).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 3.0, 3.0]);
        assert!(matches!(gather_rows(&x, &[2], &[1]), Err(IbtError::Index(_))));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let logits = Tensor::zeros(&[3, 5]);
        let l = cross_entropy(&logits, &[0, 3, 4]).unwrap();
        assert!((l.item().unwrap() - 5f64.ln()).abs() < 1e-12);
        let huge = Tensor::new(vec![1e3, 0.0, 0.0], &[1, 3]).unwrap();
        assert!(cross_entropy(&huge, &[0]).unwrap().item().unwrap() < 1e-12);
        assert!(matches!(cross_entropy(&logits, &[0, 1, 5]), Err(IbtError::Data(_))));
    }

    #[test]
    fn transpose_round_trip() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let y = transpose_last(&x).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
