//! Trailing-dimension broadcasting shared by the elementwise kernels.

use crate::error::{IbtError, Result};

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(IbtError::dim(format!(
                    "shapes {a:?} and {b:?} cannot be broadcast together"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `input` seen through `out`: zero along broadcast dimensions.
fn aligned_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(input);
    let lead = out.len() - input.len();
    (0..out.len())
        .map(|i| {
            if i < lead || input[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Iteration plan over an output shape with two (possibly broadcast) operands.
///
/// Adjacent dimensions are merged whenever both operands stay linear across
/// them, so the innermost row is as long as possible.
#[derive(Debug, Clone)]
pub(crate) struct Plan {
    pub out_shape: Vec<usize>,
    dims: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl Plan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let out_shape = broadcast_shape(a, b)?;
        Ok(Self::with_out(a, b, out_shape))
    }

    /// Plan for expanding `a` to `out` (the second operand mirrors the output).
    pub fn expand(a: &[usize], out: &[usize]) -> Result<Self> {
        let shape = broadcast_shape(a, out)?;
        if shape != out {
            return Err(IbtError::dim(format!("shape {a:?} cannot be broadcast to {out:?}")));
        }
        Ok(Self::with_out(a, out, shape))
    }

    fn with_out(a: &[usize], b: &[usize], out_shape: Vec<usize>) -> Self {
        let sa_full = aligned_strides(a, &out_shape);
        let sb_full = aligned_strides(b, &out_shape);
        let mut dims: Vec<usize> = Vec::new();
        let mut sa: Vec<usize> = Vec::new();
        let mut sb: Vec<usize> = Vec::new();
        for i in 0..out_shape.len() {
            let d = out_shape[i];
            if d == 1 {
                continue;
            }
            if let (Some(&ld), Some(&la), Some(&lb)) = (dims.last(), sa.last(), sb.last()) {
                if la == sa_full[i] * d && lb == sb_full[i] * d {
                    let n = dims.len();
                    dims[n - 1] = ld * d;
                    sa[n - 1] = sa_full[i];
                    sb[n - 1] = sb_full[i];
                    continue;
                }
            }
            dims.push(d);
            sa.push(sa_full[i]);
            sb.push(sb_full[i]);
        }
        Plan {
            out_shape,
            dims,
            sa,
            sb,
        }
    }

    /// Calls `f(out_offset, a_offset, b_offset, len, a_stride, b_stride)` once
    /// per innermost row, in row-major output order.
    pub fn rows(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        if self.out_shape.iter().any(|&d| d == 0) {
            return;
        }
        let Some(last) = self.dims.len().checked_sub(1) else {
            f(0, 0, 0, 1, 0, 0);
            return;
        };
        let len = self.dims[last];
        let (rsa, rsb) = (self.sa[last], self.sb[last]);
        let outer: usize = self.dims[..last].iter().product();
        let mut idx = vec![0usize; last];
        let (mut ao, mut bo) = (0usize, 0usize);
        for r in 0..outer {
            f(r * len, ao, bo, len, rsa, rsb);
            for d in (0..last).rev() {
                idx[d] += 1;
                ao += self.sa[d];
                bo += self.sb[d];
                if idx[d] < self.dims[d] {
                    break;
                }
                ao -= self.sa[d] * self.dims[d];
                bo -= self.sb[d] * self.dims[d];
                idx[d] = 0;
            }
        }
    }

    /// Sums `g` (output-shaped) back onto operand `a` (`which == 0`) or `b`.
    pub fn reduce_into(&self, g: &[f64], which: usize, target: &mut [f64]) {
        self.rows(|o, ao, bo, len, sa, sb| {
            let (off, s) = if which == 0 { (ao, sa) } else { (bo, sb) };
            let row = &g[o..o + len];
            if s == 0 {
                target[off] += row.iter().sum::<f64>();
            } else if s == 1 {
                target[off..off + len]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(t, v)| *t += v);
            } else {
                for (j, v) in row.iter().enumerate() {
                    target[off + j * s] += v;
                }
            }
        });
    }
}
