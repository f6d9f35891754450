//! Central finite-difference gradient checking.
//!
//! The oracle perturbs one coordinate at a time and never touches the tape,
//! so it stays independent of the reverse-mode path it validates.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Flat coordinate where the worst error occurred.
    pub worst_index: usize,
    pub pass: bool,
}

/// Compare an autodiff gradient for parameter `p` against central finite
/// differences of the forward-only function `f`.
///
/// `rel_err = |fd - ad| / max(|fd|, |ad|, 1e-8)`, reported per coordinate;
/// passes iff the max stays below `tol`.
pub fn finite_difference_check<S, F>(
    mut f: F,
    p: &Tensor<S>,
    ad_grad: &Tensor<S>,
    step: f64,
    tol: f64,
) -> Result<FdReport>
where
    S: Scalar,
    F: FnMut(&Tensor<S>) -> Result<S>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument("finite_difference_check: step must be > 0".into()));
    }
    if p.shape() != ad_grad.shape() {
        return Err(Error::ShapeMismatch {
            op: "finite_difference_check",
            lhs: p.shape().to_vec(),
            rhs: ad_grad.shape().to_vec(),
        });
    }
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    let mut work = p.clone();
    for i in 0..p.numel() {
        let original = work.data()[i];
        work.data_mut()[i] = original + S::from_f64(step);
        let plus = f(&work)?.as_f64();
        work.data_mut()[i] = original - S::from_f64(step);
        let minus = f(&work)?.as_f64();
        work.data_mut()[i] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { op: "finite_difference_check", index: i });
        }
        let fd = (plus - minus) / (2.0 * step);
        let ad = ad_grad.data()[i].as_f64();
        let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(FdReport { max_rel_err, worst_index, pass: max_rel_err < tol })
}
