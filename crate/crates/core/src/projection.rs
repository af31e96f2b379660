//! Euclidean projections of (weights, transition) onto the feasible region,
//! applied after every upper-level step.
//!
//! The region is a product set, so weights and the transition are projected
//! independently. The coupled classification constraint (per-row simplex plus
//! a mean-distance cap) is handled by projecting each row onto the simplex
//! and then blending toward the one-hot rows until the cap binds; the exact
//! joint projection is a nontrivial QP kept out of the hot path (see
//! [`oracle`] for a reference solution used in diagnostics and tests).

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::types::{FeasibleRegion, LabelQualityParams, LabelTransition};

pub mod oracle;

/// Exact Euclidean projection of one row onto the probability simplex,
/// by the sort-and-threshold rule.
pub fn simplex_project_row(row: &mut [f64]) {
    let mut sorted = row.to_vec();
    sorted.sort_unstable_by(|a, b| b.partial_cmp(a).expect("finite simplex input"));
    let mut cumsum = 0.0;
    let mut threshold = 0.0;
    for (j, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if v - candidate > 0.0 {
            threshold = candidate;
        } else {
            break;
        }
    }
    for v in row.iter_mut() {
        *v = (*v - threshold).max(0.0);
    }
}

/// Project the weight vector onto `[0,1]^n` intersected with the l1 floor
/// `sum w >= floor`. Frozen coordinates pass through unchanged but count
/// toward the mass. When the floor is violated after clamping, the free
/// coordinates are shifted by the smallest `tau >= 0` with
/// `sum clamp(w + tau, 0, 1) = floor` (monotone in `tau`), which is the
/// exact Euclidean projection onto the coupled set.
pub fn project_w(weights: &Array1<f64>, floor: f64, frozen: &[bool]) -> Result<Array1<f64>> {
    let n = weights.len();
    if frozen.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} weights but frozen mask of length {}",
            frozen.len()
        )));
    }
    if !(floor.is_finite() && floor >= 0.0) {
        return Err(Error::InvalidValue(format!(
            "weight mass floor {floor} must be finite and nonnegative"
        )));
    }
    if floor > n as f64 {
        return Err(Error::Infeasible(format!(
            "weight mass floor {floor} exceeds instance count {n}"
        )));
    }
    // The shift applies to the ORIGINAL coordinates: the KKT solution of the
    // coupled QP is clamp(w + tau), not clamp(clamp(w) + tau).
    let mass = |tau: f64| -> f64 {
        weights
            .iter()
            .zip(frozen)
            .map(|(&v, &f)| if f { v } else { (v + tau).clamp(0.0, 1.0) })
            .sum()
    };
    if mass(0.0) >= floor - 1e-9 {
        let mut out = weights.clone();
        for (i, v) in out.iter_mut().enumerate() {
            if !frozen[i] {
                *v = v.clamp(0.0, 1.0);
            }
        }
        return Ok(out);
    }
    let frozen_mass: f64 = weights
        .iter()
        .zip(frozen)
        .filter(|(_, &f)| f)
        .map(|(&v, _)| v)
        .sum();
    // Large enough to drive every free coordinate to its upper bound.
    let tau_max = weights
        .iter()
        .zip(frozen)
        .filter(|(_, &f)| !f)
        .map(|(&v, _)| 1.0 - v)
        .fold(1.0f64, f64::max);
    if mass(tau_max) < floor - 1e-9 {
        return Err(Error::Infeasible(format!(
            "weight mass floor {floor} unreachable with frozen mass {frozen_mass}"
        )));
    }
    let (mut lo, mut hi) = (0.0, tau_max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) >= floor {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut out = weights.clone();
    for (i, v) in out.iter_mut().enumerate() {
        if !frozen[i] {
            *v = (*v + hi).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Project classification transition rows: each non-frozen row goes onto the
/// probability simplex; if the mean distance `1 - Q[i, y_i]` over non-frozen
/// rows then exceeds `cap`, all non-frozen rows are blended toward the
/// one-hot rows at their labels with the smallest restoring factor
/// `t = (D - cap) / D`. Frozen rows are untouched.
pub fn project_q_classification(
    transition: &Array2<f64>,
    labels: &[usize],
    cap: f64,
    frozen: &[bool],
) -> Result<Array2<f64>> {
    let (n, k) = transition.dim();
    if labels.len() != n || frozen.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} transition rows, {} labels, {} frozen flags",
            labels.len(),
            frozen.len()
        )));
    }
    if !(0.0..=1.0).contains(&cap) {
        return Err(Error::InvalidValue(format!(
            "classification shift cap {cap} outside [0, 1]"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange {
            index: labels.iter().position(|&y| y >= k).unwrap(),
            label: bad,
            classes: k,
        });
    }
    let mut out = transition.clone();
    let mut dist_sum = 0.0;
    let mut free = 0usize;
    for i in 0..n {
        if frozen[i] {
            continue;
        }
        let mut row = out.row_mut(i);
        simplex_project_row(row.as_slice_mut().expect("contiguous row"));
        dist_sum += 1.0 - row[labels[i]];
        free += 1;
    }
    if free == 0 {
        return Ok(out);
    }
    let mean_dist = dist_sum / free as f64;
    if mean_dist > cap {
        let t = (mean_dist - cap) / mean_dist;
        for i in 0..n {
            if frozen[i] {
                continue;
            }
            for j in 0..k {
                let one_hot = if j == labels[i] { 1.0 } else { 0.0 };
                out[(i, j)] = (1.0 - t) * out[(i, j)] + t * one_hot;
            }
        }
    }
    Ok(out)
}

/// Project the regression shift onto the l2 ball of radius `cap` over the
/// non-frozen block: rescale when the block norm exceeds the cap.
pub fn project_q_regression(
    shift: &Array1<f64>,
    cap: f64,
    frozen: &[bool],
) -> Result<Array1<f64>> {
    let n = shift.len();
    if frozen.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} shifts but frozen mask of length {}",
            frozen.len()
        )));
    }
    if !(cap.is_finite() && cap >= 0.0) {
        return Err(Error::InvalidValue(format!(
            "regression shift cap {cap} must be finite and nonnegative"
        )));
    }
    let norm: f64 = shift
        .iter()
        .zip(frozen)
        .filter(|(_, &f)| !f)
        .map(|(&v, _)| v * v)
        .sum::<f64>()
        .sqrt();
    // The relative slack keeps rescaling bitwise idempotent: a freshly scaled
    // block whose norm rounds a few ulps above the cap must not rescale again.
    if norm <= cap * (1.0 + 1e-12) {
        return Ok(shift.clone());
    }
    let scale = cap / norm;
    let mut out = shift.clone();
    for (v, &f) in out.iter_mut().zip(frozen) {
        if !f {
            *v *= scale;
        }
    }
    Ok(out)
}

/// Project full quality parameters onto the region in place.
pub fn project_params(
    params: &mut LabelQualityParams,
    labels_for_cap: Option<&[usize]>,
    region: &FeasibleRegion,
) -> Result<()> {
    params.weights = project_w(&params.weights, region.weight_mass_floor, &params.frozen)?;
    params.transition = match &params.transition {
        LabelTransition::Classification(q) => {
            let labels = labels_for_cap.ok_or_else(|| {
                Error::InvalidValue("classification projection needs the raw labels".into())
            })?;
            LabelTransition::Classification(project_q_classification(
                q,
                labels,
                region.shift_cap,
                &params.frozen,
            )?)
        }
        LabelTransition::Regression(q) => LabelTransition::Regression(project_q_regression(
            q,
            region.shift_cap,
            &params.frozen,
        )?),
    };
    Ok(())
}
