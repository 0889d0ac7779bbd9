use crate::error::{Result, TensorError};
use crate::shape::{check_axis, contiguous_strides, numel, split_at_axis};
use crate::tensor::Tensor;

fn permute_data(data: &[f64], shape: &[usize], dims: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = dims.iter().map(|&d| shape[d]).collect();
    let strides: Vec<usize> = dims.iter().map(|&d| in_strides[d]).collect();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        return data.to_vec();
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), "reshape", &[self], || {
            Box::new(|g, _| vec![Some(g.to_vec())])
        }))
    }

    pub fn permute(&self, dims: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if dims.len() != rank || dims.iter().any(|&d| d >= rank || std::mem::replace(&mut seen[d], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                msg: format!("{dims:?} is not a permutation of rank {rank}"),
            });
        }
        let out_shape: Vec<usize> = dims.iter().map(|&d| self.shape()[d]).collect();
        let data = permute_data(self.data(), self.shape(), dims);
        let mut inverse = vec![0; rank];
        for (i, &d) in dims.iter().enumerate() {
            inverse[d] = i;
        }
        let os = out_shape.clone();
        Ok(Tensor::from_op(data, out_shape, "permute", &[self], move || {
            Box::new(move |g, _| vec![Some(permute_data(g, &os, &inverse))])
        }))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        check_axis(a.max(b), self.rank())?;
        let mut dims: Vec<usize> = (0..self.rank()).collect();
        dims.swap(a, b);
        self.permute(&dims)
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis(axis, self.rank())?;
        let (outer, full, inner) = split_at_axis(self.shape(), axis);
        if start + len > full {
            return Err(TensorError::InvalidShape {
                op: "narrow",
                msg: format!("range {start}..{} exceeds extent {full}", start + len),
            });
        }
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(out, shape, "narrow", &[self], move || {
            Box::new(move |g, _| {
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    gx[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            })
        }))
    }

    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        check_axis(axis, first.rank())?;
        for t in tensors {
            let same_rank = t.rank() == first.rank();
            let compatible = same_rank
                && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let lens: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &l) in tensors.iter().zip(&lens) {
                out.extend_from_slice(&t.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let parents: Vec<&Tensor> = tensors.iter().collect();
        Ok(Tensor::from_op(out, shape, "concat", &parents, move || {
            Box::new(move |g, needs| {
                let mut grads: Vec<Option<Vec<f64>>> = lens
                    .iter()
                    .zip(needs)
                    .map(|(&l, &n)| n.then(|| Vec::with_capacity(outer * l * inner)))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gr, &l) in grads.iter_mut().zip(&lens) {
                        if let Some(gr) = gr.as_mut() {
                            gr.extend_from_slice(&g[off..off + l * inner]);
                        }
                        off += l * inner;
                    }
                }
                grads
            })
        }))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(tensors: &[Tensor]) -> Result<Tensor> {
        let reshaped = tensors
            .iter()
            .map(|t| {
                let mut s = vec![1];
                s.extend_from_slice(t.shape());
                t.reshape(&s)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat(&reshaped, 0)
    }

    /// Reverses the order of entries along `axis`.
    pub fn flip(&self, axis: usize) -> Result<Tensor> {
        check_axis(axis, self.rank())?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let flip = move |x: &[f64]| {
            let mut out = Vec::with_capacity(x.len());
            for o in 0..outer {
                for a in (0..len).rev() {
                    out.extend_from_slice(&x[(o * len + a) * inner..][..inner]);
                }
            }
            out
        };
        Ok(Tensor::from_op(flip(self.data()), self.shape().to_vec(), "flip", &[self], move || {
            Box::new(move |g, _| vec![Some(flip(g))])
        }))
    }
}
