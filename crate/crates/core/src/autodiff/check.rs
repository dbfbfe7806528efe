//! Central-difference verification of tape gradients.

use super::{Tape, TapeTensor};
use crate::error::{Error, Result};

/// Outcome of a gradient check: the analytic and numeric gradients plus the
/// worst per-coordinate relative error.
#[derive(Debug, Clone)]
pub struct FdCheck {
    /// max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_err: f64,
    /// coordinate attaining `max_rel_err`
    pub worst_coord: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compare the tape gradient of a scalar-valued function against central
/// differences `(f(x+eps) - f(x-eps)) / 2 eps`, coordinate by coordinate.
///
/// `f` receives the point as an `n x 1` leaf and must return a scalar. It is
/// re-evaluated on a fresh tape per perturbed point, so any randomness inside
/// must be derived deterministically from the tape inputs alone.
pub fn finite_difference_check<F>(f: F, point: &[f64], epsilon: f64) -> Result<FdCheck>
where
    F: Fn(&mut Tape, TapeTensor) -> Result<TapeTensor>,
{
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument {
            what: "finite_difference_check",
            detail: format!("epsilon {epsilon} must be positive"),
        });
    }
    let n = point.len();

    let eval = |coord: usize, x: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let t = tape.leaf(x.len(), 1, x)?;
        let y = f(&mut tape, t)?;
        if !y.is_scalar() {
            return Err(Error::InvalidArgument {
                what: "finite_difference_check",
                detail: "function must be scalar-valued".into(),
            });
        }
        let v = tape.value_scalar(y);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "f evaluated near coordinate {coord}"
            )));
        }
        Ok(v)
    };

    // Analytic gradient from one forward + backward.
    let analytic = {
        let mut tape = Tape::new();
        let t = tape.leaf(n, 1, point)?;
        let y = f(&mut tape, t)?;
        if !y.is_scalar() {
            return Err(Error::InvalidArgument {
                what: "finite_difference_check",
                detail: "function must be scalar-valued".into(),
            });
        }
        tape.backward(y)?;
        tape.grad(t).to_vec()
    };

    let mut numeric = vec![0.0; n];
    let mut work = point.to_vec();
    for i in 0..n {
        let orig = work[i];
        work[i] = orig + epsilon;
        let hi = eval(i, &work)?;
        work[i] = orig - epsilon;
        let lo = eval(i, &work)?;
        work[i] = orig;
        numeric[i] = (hi - lo) / (2.0 * epsilon);
        if !numeric[i].is_finite() {
            return Err(Error::NonFinite(format!(
                "central difference at coordinate {i}"
            )));
        }
        if !analytic[i].is_finite() {
            return Err(Error::NonFinite(format!(
                "tape gradient at coordinate {i}"
            )));
        }
    }

    let mut max_rel_err = 0.0;
    let mut worst_coord = 0;
    for i in 0..n {
        let e = rel_err(analytic[i], numeric[i]);
        if e > max_rel_err {
            max_rel_err = e;
            worst_coord = i;
        }
    }
    Ok(FdCheck {
        max_rel_err,
        worst_coord,
        analytic,
        numeric,
    })
}
