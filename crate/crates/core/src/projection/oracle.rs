//! Reference projections computed by an independent route, for diagnostics
//! and correctness checks of the production projections.
//!
//! The weight reference uses Dykstra's alternating projection onto the box
//! and the mass halfspace; the ball reference bisects the Lagrange
//! multiplier; the classification reference solves the coupled
//! simplex-plus-cap QP exactly by dual bisection, with rows projected by a
//! water-filling threshold search rather than the production sort rule.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

const DYKSTRA_ITERS: usize = 4000;
const BISECT_ITERS: usize = 200;

/// Reference projection onto `[0,1]^n ∩ {sum >= floor}` via Dykstra's
/// algorithm over the free coordinates.
pub fn project_w_reference(
    weights: &Array1<f64>,
    floor: f64,
    frozen: &[bool],
) -> Result<Array1<f64>> {
    let free: Vec<usize> = (0..weights.len()).filter(|&i| !frozen[i]).collect();
    let frozen_mass: f64 = (0..weights.len())
        .filter(|&i| frozen[i])
        .map(|i| weights[i])
        .sum();
    let need = floor - frozen_mass;
    if need > free.len() as f64 + 1e-9 {
        return Err(Error::Infeasible(format!(
            "floor {floor} unreachable over {} free coordinates",
            free.len()
        )));
    }
    let mut x: Vec<f64> = free.iter().map(|&i| weights[i]).collect();
    let mut p = vec![0.0; x.len()];
    let mut q = vec![0.0; x.len()];
    for _ in 0..DYKSTRA_ITERS {
        // box step
        let y: Vec<f64> = x
            .iter()
            .zip(&p)
            .map(|(&xi, &pi)| (xi + pi).clamp(0.0, 1.0))
            .collect();
        for i in 0..x.len() {
            p[i] = x[i] + p[i] - y[i];
        }
        // halfspace step
        let sum: f64 = y.iter().zip(&q).map(|(&yi, &qi)| yi + qi).sum();
        let deficit = need - sum;
        let shift = if deficit > 0.0 {
            deficit / y.len().max(1) as f64
        } else {
            0.0
        };
        let z: Vec<f64> = y.iter().zip(&q).map(|(&yi, &qi)| yi + qi + shift).collect();
        for i in 0..x.len() {
            q[i] = y[i] + q[i] - z[i];
        }
        x = z;
    }
    let mut out = weights.clone();
    for (slot, &i) in free.iter().enumerate() {
        out[i] = x[slot];
    }
    Ok(out)
}

/// Reference projection onto the l2 ball of radius `cap` (free block) by
/// bisection on the Lagrange multiplier of `|x| <= cap`.
pub fn project_ball_reference(shift: &Array1<f64>, cap: f64, frozen: &[bool]) -> Array1<f64> {
    let norm: f64 = shift
        .iter()
        .zip(frozen)
        .filter(|(_, &f)| !f)
        .map(|(&v, _)| v * v)
        .sum::<f64>()
        .sqrt();
    if norm <= cap {
        return shift.clone();
    }
    // x(mu) = z / (1 + mu); |x| is strictly decreasing in mu
    let (mut lo, mut hi) = (0.0, 1.0);
    while norm / (1.0 + hi) > cap {
        hi *= 2.0;
    }
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if norm / (1.0 + mid) > cap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu = 0.5 * (lo + hi);
    let mut out = shift.clone();
    for (v, &f) in out.iter_mut().zip(frozen) {
        if !f {
            *v /= 1.0 + mu;
        }
    }
    out
}

/// Water-filling simplex projection: find the threshold by bisection instead
/// of sorting.
fn simplex_by_waterfill(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut lo = max - 1.0 - row.len() as f64;
    let mut hi = max;
    let mass = |tau: f64| -> f64 { row.iter().map(|&v| (v - tau).max(0.0)).sum() };
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    row.iter().map(|&v| (v - tau).max(0.0)).collect()
}

/// Exact joint projection onto {rows on simplex, mean(1 - Q[i, y_i]) <= cap}
/// over non-frozen rows, by bisection on the dual variable of the cap.
pub fn project_q_classification_reference(
    transition: &Array2<f64>,
    labels: &[usize],
    cap: f64,
    frozen: &[bool],
) -> Array2<f64> {
    let (n, k) = transition.dim();
    let free: Vec<usize> = (0..n).filter(|&i| !frozen[i]).collect();
    let solve_at = |nu: f64| -> (Array2<f64>, f64) {
        let mut out = transition.clone();
        let mut dist = 0.0;
        for &i in &free {
            let mut row: Vec<f64> = transition.row(i).to_vec();
            row[labels[i]] += nu;
            let projected = simplex_by_waterfill(&row);
            dist += 1.0 - projected[labels[i]];
            for j in 0..k {
                out[(i, j)] = projected[j];
            }
        }
        let mean = if free.is_empty() {
            0.0
        } else {
            dist / free.len() as f64
        };
        (out, mean)
    };
    let (base, mean0) = solve_at(0.0);
    if free.is_empty() || mean0 <= cap {
        return base;
    }
    let mut hi = 1.0;
    while solve_at(hi).1 > cap {
        hi *= 2.0;
        if hi > 1e12 {
            break;
        }
    }
    let mut lo = 0.0;
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if solve_at(mid).1 > cap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    solve_at(hi).0
}
