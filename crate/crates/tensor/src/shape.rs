use crate::error::{Result, TensorError};

/// Output shape of broadcasting `a` against `b` (trailing alignment).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

pub(crate) fn try_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    broadcast_shape(a, b).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Strides of `input` viewed at `out_rank`, with zero stride on broadcast axes.
pub(crate) fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - input.len();
    let base = contiguous_strides(input);
    (0..out.len())
        .map(|i| {
            if i < offset || input[i - offset] == 1 {
                0
            } else {
                base[i - offset]
            }
        })
        .collect()
}

/// Merges adjacent axes that are contiguous in the output and in both inputs,
/// and drops unit axes, so inner runs are as long as possible.
fn coalesce(out_shape: &[usize], sa: &[usize], sb: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (mut shape, mut a, mut b): (Vec<usize>, Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new(), Vec::new());
    for d in 0..out_shape.len() {
        let n = out_shape[d];
        if n == 1 {
            continue;
        }
        if let Some(&last) = shape.last() {
            let k = shape.len() - 1;
            if a[k] == sa[d] * n && b[k] == sb[d] * n {
                shape[k] = last * n;
                a[k] = sa[d];
                b[k] = sb[d];
                continue;
            }
        }
        shape.push(n);
        a.push(sa[d]);
        b.push(sb[d]);
    }
    (shape, a, b)
}

/// Visits the output in order as runs along the innermost axis:
/// `f(a_offset, b_offset, len, a_stride, b_stride)`.
pub(crate) fn for_each_run(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    if numel(out_shape) == 0 {
        return;
    }
    let (shape, sa, sb) = coalesce(out_shape, sa, sb);
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 1, 0, 0);
        return;
    }
    let last = shape[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let outer = numel(&shape[..rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..outer {
        f(oa, ob, last, la, lb);
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Visits every output position with the matching flat offsets into two
/// broadcast inputs.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let mut o = 0;
    for_each_run(out_shape, sa, sb, |ia, ib, len, la, lb| {
        for j in 0..len {
            f(o + j, ia + j * la, ib + j * lb);
        }
        o += len;
    });
}

/// Sums `grad` (laid out as `out_shape`) down to `in_shape`.
pub(crate) fn reduce_to_shape(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let mut acc = vec![0.0; numel(in_shape)];
    let s = broadcast_strides(in_shape, out_shape);
    let mut o = 0;
    for_each_run(out_shape, &s, &s, |i, _, len, stride, _| {
        let g = &grad[o..o + len];
        if stride == 0 {
            acc[i] += g.iter().sum::<f64>();
        } else {
            acc[i..].iter_mut().step_by(stride).zip(g).for_each(|(a, g)| *a += g);
        }
        o += len;
    });
    acc
}

/// Splits a shape around `axis` into (outer, axis_len, inner) extents.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub(crate) fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(TensorError::Axis { axis, rank })
    } else {
        Ok(())
    }
}
