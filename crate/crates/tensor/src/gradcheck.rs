//! Central finite-difference gradient checking.
//!
//! The numerical side only evaluates forward values under [`no_grad`], so it
//! shares no code with the backward rules it is checking.

use crate::error::{Result, TensorError};
use crate::tensor::{no_grad, Tensor};

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub entries: usize,
    /// `(input, flat index, analytic, numeric)` of the worst relative error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares backward gradients of the scalar `f(inputs)` against central
/// differences with step `h` for every entry of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let params: Vec<Tensor> = inputs
        .iter()
        .map(|t| t.detach().requires_grad_(true))
        .collect();
    let out = f(&params)?;
    if out.numel() != 1 {
        return Err(TensorError::NonScalarRoot(out.shape().to_vec()));
    }
    out.backward()?;
    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        entries: 0,
        worst: None,
    };
    for (pi, p) in params.iter().enumerate() {
        let analytic = p.grad_or_zeros();
        for k in 0..p.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = p.to_vec();
                data[k] += delta;
                let mut probe: Vec<Tensor> = params.iter().map(Tensor::detach).collect();
                probe[pi] = Tensor::new(data, p.shape())?;
                Ok(no_grad(|| f(&probe))?.item())
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            let abs = (analytic[k] - numeric).abs();
            report.max_abs_err = report.max_abs_err.max(abs);
            let rel = relative_error(analytic[k], numeric);
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, k, analytic[k], numeric));
            }
            report.entries += 1;
        }
    }
    Ok(report)
}
