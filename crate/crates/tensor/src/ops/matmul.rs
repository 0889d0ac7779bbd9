use crate::error::{Result, TensorError};
use crate::shape::{broadcast_strides, numel, try_broadcast};
use crate::tensor::Tensor;

/// Strided view of a row-major or transposed matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatView<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `out = beta * out + a · b`, with `out` row-major `[a.rows, b.cols]`.
pub(crate) fn gemm(a: MatView<'_>, b: MatView<'_>, out: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner extents");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let span = |v: &MatView<'_>| {
        (v.rows as isize - 1) * v.row_stride + (v.cols as isize - 1) * v.col_stride
    };
    assert!((span(&a) as usize) < a.data.len() && (span(&b) as usize) < b.data.len());
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `out` holds at least m*n elements laid out with strides (n, 1).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// Batched matrix product `[.., M, K] · [.., K, N] -> [.., M, N]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || rb < 2 {
            return Err(TensorError::InvalidShape {
                op: "matmul",
                msg: format!("operands need rank >= 2, got {:?} and {:?}", self.shape(), other.shape()),
            });
        }
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (k2, n) = (other.shape()[rb - 2], other.shape()[rb - 1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        if rb == 2 && ra > 2 {
            // A shared right operand: one large product over all rows.
            let rows = self.numel() / k.max(1);
            let y = self.reshape(&[rows, k])?.matmul(other)?;
            let mut out_shape = self.shape()[..ra - 1].to_vec();
            out_shape.push(n);
            return y.reshape(&out_shape);
        }
        let a_batch = &self.shape()[..ra - 2];
        let b_batch = &other.shape()[..rb - 2];
        let batch = try_broadcast("matmul", a_batch, b_batch)?;
        let nb = numel(&batch);
        let offsets = batch_offsets(&batch, a_batch, b_batch);
        let mut out = vec![0.0; nb * m * n];
        for (bi, &(oa, ob)) in offsets.iter().enumerate() {
            let av = MatView::new(&self.data()[oa * m * k..(oa + 1) * m * k], m, k);
            let bv = MatView::new(&other.data()[ob * k * n..(ob + 1) * k * n], k, n);
            gemm(av, bv, &mut out[bi * m * n..(bi + 1) * m * n], 0.0);
        }
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let (ac, bc) = (self.clone(), other.clone());
        Ok(Tensor::from_op(out, out_shape, "matmul", &[self, other], move || {
            Box::new(move |g, needs| {
                let mut ga = needs[0].then(|| vec![0.0; ac.numel()]);
                let mut gb = needs[1].then(|| vec![0.0; bc.numel()]);
                for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                    let gv = MatView::new(&g[bi * m * n..(bi + 1) * m * n], m, n);
                    if let Some(ga) = ga.as_mut() {
                        let bv = MatView::new(&bc.data()[ob * k * n..(ob + 1) * k * n], k, n);
                        gemm(gv, bv.t(), &mut ga[oa * m * k..(oa + 1) * m * k], 1.0);
                    }
                    if let Some(gb) = gb.as_mut() {
                        let av = MatView::new(&ac.data()[oa * m * k..(oa + 1) * m * k], m, k);
                        gemm(av.t(), gv, &mut gb[ob * k * n..(ob + 1) * k * n], 1.0);
                    }
                }
                vec![ga, gb]
            })
        }))
    }

    /// Channel Gram matrix `F · Fᵀ` of a `[C, N]` feature matrix.
    pub fn gram(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "gram",
                msg: format!("expected [C, N], got {:?}", self.shape()),
            });
        }
        self.matmul(&self.transpose(0, 1)?)
    }
}

/// Matrix index into each operand for every broadcast batch position.
fn batch_offsets(batch: &[usize], a: &[usize], b: &[usize]) -> Vec<(usize, usize)> {
    let nb = numel(batch);
    if batch.is_empty() {
        return vec![(0, 0)];
    }
    let sa = broadcast_strides(a, batch);
    let sb = broadcast_strides(b, batch);
    let mut out = Vec::with_capacity(nb);
    crate::shape::for_each_broadcast(batch, &sa, &sb, |_, i, j| out.push((i, j)));
    out
}
