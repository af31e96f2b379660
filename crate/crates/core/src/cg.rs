//! Matrix-free conjugate gradient for symmetric positive definite operators.

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::types::CgSettings;

#[derive(Debug)]
pub struct CgSolution {
    pub x: Array1<f64>,
    pub iters: usize,
    pub residual: f64,
}

/// Solve `A x = b` where `A` is given only through its action on a vector.
///
/// Convergence: `|r|_2 <= tol * max(1, |b|_2)`. Detects non-positive
/// curvature (operator not PD) and reports it with the iteration count.
pub fn cg_solve<F>(apply: F, b: &Array1<f64>, settings: &CgSettings) -> Result<CgSolution>
where
    F: Fn(&Array1<f64>) -> Result<Array1<f64>>,
{
    let n = b.len();
    let max_iters = settings.max_iters.unwrap_or(2 * n.max(1));
    let b_norm = b.dot(b).sqrt();
    let target = settings.tol * b_norm.max(1.0);

    let mut x = Array1::zeros(n);
    if b_norm == 0.0 {
        return Ok(CgSolution {
            x,
            iters: 0,
            residual: 0.0,
        });
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs_old = r.dot(&r);

    for iter in 0..max_iters {
        if rs_old.sqrt() <= target {
            return Ok(CgSolution {
                x,
                iters: iter,
                residual: rs_old.sqrt(),
            });
        }
        let ap = apply(&p)?;
        let pap = p.dot(&ap);
        if !pap.is_finite() {
            return Err(Error::CgBreakdown {
                iter,
                reason: "non-finite curvature",
                residual: rs_old.sqrt(),
            });
        }
        if pap <= 0.0 {
            return Err(Error::CgBreakdown {
                iter,
                reason: "non-positive curvature",
                residual: rs_old.sqrt(),
            });
        }
        let alpha = rs_old / pap;
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        let rs_new = r.dot(&r);
        let beta = rs_new / rs_old;
        p = &r + &(beta * &p);
        rs_old = rs_new;
    }

    let residual = rs_old.sqrt();
    if residual <= target {
        Ok(CgSolution {
            x,
            iters: max_iters,
            residual,
        })
    } else {
        Err(Error::NonConvergence {
            iters: max_iters,
            residual,
        })
    }
}
