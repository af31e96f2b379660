//! Hypergradients of the upper objective with respect to the instance
//! weights and the label transition, through the lower-level solution map.
//!
//! Three routes are provided:
//!
//! * [`hypergrad_implicit`] — implicit differentiation at a stationary point
//!   of a strictly convex inner problem: one matrix-free CG solve in the
//!   inner Hessian followed by the two mixed vector-Jacobian products.
//! * [`hypergrad_reverse`] — reverse-mode differentiation over a recorded
//!   gradient-descent trajectory. The adjoint recursion applies the step
//!   Jacobian `I - eta * H(theta_t)` through Hessian-vector products; the
//!   operators are never materialized. A first-order variant that drops the
//!   Hessian to a raw gradient (see [`hypergrad_reverse_literal`]) is kept
//!   for demonstration: it does not reproduce finite differences even on
//!   one-dimensional quadratics.
//! * [`hypergrad_fd`] — central finite differences of the full pipeline
//!   (retrain per perturbation), the independent oracle for the other two.
//!
//! Frozen instances receive exactly zero hypergradient on every route.

use ndarray::{Array1, Array2};

use crate::cg::cg_solve;
use crate::error::{Error, Result};
use crate::lower_solver::{self, UnrollTape};
use crate::model;
use crate::types::{
    CgSettings, LabelQualityParams, LabelTransition, ModelParams, ModelSpec, PgsConfig,
    SafenessMode, ValidationEnsemble, WeakDataset,
};

/// Stationarity slack accepted by the implicit path.
const IMPLICIT_KKT_SLACK: f64 = 1e-4;

/// Free-coordinate budget for the finite-difference oracle.
pub const FD_COORD_BUDGET: usize = 4096;

/// Which engine produced a hypergradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperPath {
    Implicit,
    Reverse,
    FiniteDiff,
}

/// Gradient of the upper objective in (weights, transition).
#[derive(Debug, Clone)]
pub struct HyperGrad {
    pub wrt_weights: Array1<f64>,
    pub wrt_transition: LabelTransition,
    pub path: HyperPath,
}

impl HyperGrad {
    fn zero_frozen(mut self, frozen: &[bool]) -> Self {
        for (i, &f) in frozen.iter().enumerate() {
            if f {
                self.wrt_weights[i] = 0.0;
                match &mut self.wrt_transition {
                    LabelTransition::Classification(q) => q.row_mut(i).fill(0.0),
                    LabelTransition::Regression(q) => q[i] = 0.0,
                }
            }
        }
        self
    }

    pub fn is_finite(&self) -> bool {
        let t_ok = match &self.wrt_transition {
            LabelTransition::Classification(q) => q.iter().all(|v| v.is_finite()),
            LabelTransition::Regression(q) => q.iter().all(|v| v.is_finite()),
        };
        self.wrt_weights.iter().all(|v| v.is_finite()) && t_ok
    }
}

/// Value breakdown of the upper objective at a given model.
#[derive(Debug, Clone)]
pub struct UpperEval {
    pub objective: f64,
    pub mean_val_loss: f64,
    pub member_losses: Vec<f64>,
    /// member loss minus its baseline reference, per member.
    pub gaps: Vec<f64>,
    pub worst_gap: f64,
}

fn member_losses(
    spec: &ModelSpec,
    theta: &ModelParams,
    ensemble: &ValidationEnsemble,
) -> Result<Vec<f64>> {
    ensemble
        .members()
        .iter()
        .map(|member| model::validation_loss(spec, theta, ensemble.base(), member))
        .collect()
}

/// Evaluate the upper objective: mean member validation loss plus the
/// weighted safeness term.
pub fn upper_objective(
    spec: &ModelSpec,
    theta: &ModelParams,
    ensemble: &ValidationEnsemble,
    config: &PgsConfig,
) -> Result<UpperEval> {
    let refs = ensemble.baseline_losses().ok_or(Error::MissingBaseline)?;
    let losses = member_losses(spec, theta, ensemble)?;
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    let gaps: Vec<f64> = losses.iter().zip(refs).map(|(&l, &c)| l - c).collect();
    let worst_gap = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let safeness = match config.safeness_mode {
        SafenessMode::Literal => worst_gap,
        SafenessMode::Hinge => worst_gap.max(0.0),
    };
    Ok(UpperEval {
        objective: mean + config.safeness_weight * safeness,
        mean_val_loss: mean,
        member_losses: losses,
        gaps,
        worst_gap,
    })
}

/// Gradient in theta of the upper objective. The subgradient of the max term
/// follows the argmax member; exact ties average the tied members' gradients;
/// an inactive hinge contributes nothing.
pub fn upper_grad_theta(
    spec: &ModelSpec,
    theta: &ModelParams,
    ensemble: &ValidationEnsemble,
    config: &PgsConfig,
) -> Result<Array1<f64>> {
    let eval = upper_objective(spec, theta, ensemble, config)?;
    let m = ensemble.size();
    let mut grad = Array1::zeros(spec.param_count());
    let mut member_grads: Vec<Option<Array1<f64>>> = vec![None; m];
    for (i, member) in ensemble.members().iter().enumerate() {
        let g = model::validation_grad(spec, theta, ensemble.base(), member)?;
        grad.scaled_add(1.0 / m as f64, &g);
        member_grads[i] = Some(g);
    }
    let hinge_active = match config.safeness_mode {
        SafenessMode::Literal => true,
        SafenessMode::Hinge => eval.worst_gap > 0.0,
    };
    if hinge_active && config.safeness_weight > 0.0 {
        let tied: Vec<usize> = eval
            .gaps
            .iter()
            .enumerate()
            .filter(|(_, &g)| g == eval.worst_gap)
            .map(|(i, _)| i)
            .collect();
        let share = config.safeness_weight / tied.len() as f64;
        for i in tied {
            grad.scaled_add(share, member_grads[i].as_ref().expect("computed above"));
        }
    }
    Ok(grad)
}

/// Implicit-differentiation hypergradient at a stationary point of a
/// strictly convex inner problem: solve `H u = g_val` by CG over
/// Hessian-vector products, then map through the mixed products with a sign
/// flip.
pub fn hypergrad_implicit(
    spec: &ModelSpec,
    theta_star: &ModelParams,
    data: &WeakDataset,
    quality: &LabelQualityParams,
    ensemble: &ValidationEnsemble,
    config: &PgsConfig,
) -> Result<HyperGrad> {
    if !spec.is_convex() {
        return Err(Error::InvalidValue(
            "implicit hypergradients need a convex family".into(),
        ));
    }
    let residual = lower_solver::kkt_residual(spec, theta_star, data, quality)?;
    if residual > IMPLICIT_KKT_SLACK {
        return Err(Error::InvalidValue(format!(
            "stationarity residual {residual:.3e} too large for the implicit path"
        )));
    }
    let g_val = upper_grad_theta(spec, theta_star, ensemble, config)?;
    let settings = CgSettings {
        max_iters: Some(
            config
                .cg
                .max_iters
                .unwrap_or(2 * spec.param_count().max(1)),
        ),
        tol: config.cg.tol,
    };
    let solution = cg_solve(
        |v| model::hvp_theta(spec, theta_star, data, quality, v),
        &g_val,
        &settings,
    )?;
    let u = solution.x;
    let d_w = model::mixed_w_vjp(spec, theta_star, data, quality, &u)?;
    let d_q = model::mixed_q_vjp(spec, theta_star, data, quality, &u)?;
    let grad = HyperGrad {
        wrt_weights: -d_w,
        wrt_transition: match d_q {
            LabelTransition::Classification(q) => LabelTransition::Classification(-q),
            LabelTransition::Regression(q) => LabelTransition::Regression(-q),
        },
        path: HyperPath::Implicit,
    }
    .zero_frozen(&quality.frozen);
    if !grad.is_finite() {
        return Err(Error::NonFinite {
            what: "implicit hypergradient",
            index: 0,
        });
    }
    Ok(grad)
}

enum ReverseStyle {
    Curvature,
    Literal,
}

/// State of the adjoint recursion: the running adjoint vector plus the two
/// hypergradient accumulators. The adjoint starts as the upper gradient at
/// the final iterate; each step folds in the mixed products at theta_t and
/// then pulls the adjoint back through the step Jacobian.
struct ReverseState {
    adjoint: Array1<f64>,
    wrt_weights: Array1<f64>,
    wrt_transition: LabelTransition,
    step: f64,
}

impl ReverseState {
    fn start(adjoint: Array1<f64>, quality: &LabelQualityParams, step: f64) -> Self {
        Self {
            adjoint,
            wrt_weights: Array1::zeros(quality.len()),
            wrt_transition: quality.transition.zeros_like(),
            step,
        }
    }

    /// Add the step-t term of the chain-rule sum: the adjoint paired with
    /// the mixed second derivatives taken at theta_t, scaled by -eta.
    fn absorb(
        &mut self,
        spec: &ModelSpec,
        theta_t: &ModelParams,
        data: &WeakDataset,
        quality: &LabelQualityParams,
    ) -> Result<()> {
        let bw = model::mixed_w_vjp(spec, theta_t, data, quality, &self.adjoint)?;
        self.wrt_weights.scaled_add(-self.step, &bw);
        let bq = model::mixed_q_vjp(spec, theta_t, data, quality, &self.adjoint)?;
        match (&mut self.wrt_transition, bq) {
            (LabelTransition::Classification(acc), LabelTransition::Classification(b)) => {
                acc.scaled_add(-self.step, &b)
            }
            (LabelTransition::Regression(acc), LabelTransition::Regression(b)) => {
                acc.scaled_add(-self.step, &b)
            }
            _ => unreachable!("transition shapes agree"),
        }
        Ok(())
    }

    /// Pull the adjoint back through the gradient-descent step taken at
    /// theta_t, using the Hessian-vector product (or, in the demonstration
    /// variant, an elementwise first-derivative factor).
    fn propagate(
        &mut self,
        spec: &ModelSpec,
        theta_t: &ModelParams,
        data: &WeakDataset,
        quality: &LabelQualityParams,
        style: &ReverseStyle,
        at_step: usize,
    ) -> Result<()> {
        match style {
            ReverseStyle::Curvature => {
                let hv = model::hvp_theta(spec, theta_t, data, quality, &self.adjoint)?;
                self.adjoint.scaled_add(-self.step, &hv);
            }
            ReverseStyle::Literal => {
                let g = model::grad_theta(spec, theta_t, data, quality)?;
                self.adjoint.zip_mut_with(&g, |a, &gi| *a *= 1.0 - self.step * gi);
            }
        }
        if self.adjoint.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteAdjoint { step: at_step });
        }
        Ok(())
    }
}

fn reverse_impl(
    spec: &ModelSpec,
    tape: &UnrollTape,
    data: &WeakDataset,
    quality: &LabelQualityParams,
    ensemble: &ValidationEnsemble,
    config: &PgsConfig,
    style: ReverseStyle,
) -> Result<HyperGrad> {
    let steps = tape.steps();
    let final_theta = tape.final_params();
    let adjoint = upper_grad_theta(spec, &final_theta, ensemble, config)?;
    let mut state = ReverseState::start(adjoint, quality, tape.step_size());
    // Accumulate the full chain-rule sum: the step-t term pairs the adjoint
    // propagated through steps t+1..T with the mixed products at theta_t.
    for t in (0..steps).rev() {
        let theta_t = ModelParams {
            values: tape.at(t).clone(),
        };
        state.absorb(spec, &theta_t, data, quality)?;
        if t > 0 {
            state.propagate(spec, &theta_t, data, quality, &style, t)?;
        }
    }
    Ok(HyperGrad {
        wrt_weights: state.wrt_weights,
        wrt_transition: state.wrt_transition,
        path: HyperPath::Reverse,
    }
    .zero_frozen(&quality.frozen))
}

/// Reverse-mode hypergradient over a recorded unroll. Replays the stored
/// trajectory only; the forward pass is never recomputed.
pub fn hypergrad_reverse(
    spec: &ModelSpec,
    tape: &UnrollTape,
    data: &WeakDataset,
    quality: &LabelQualityParams,
    ensemble: &ValidationEnsemble,
    config: &PgsConfig,
) -> Result<HyperGrad> {
    reverse_impl(
        spec,
        tape,
        data,
        quality,
        ensemble,
        config,
        ReverseStyle::Curvature,
    )
}

/// Demonstration variant of the reverse accumulation whose step Jacobian
/// uses the raw first derivative in place of the Hessian. Kept only to show
/// that the recursion then fails to match finite differences; not used by
/// the optimizer.
pub fn hypergrad_reverse_literal(
    spec: &ModelSpec,
    tape: &UnrollTape,
    data: &WeakDataset,
    quality: &LabelQualityParams,
    ensemble: &ValidationEnsemble,
    config: &PgsConfig,
) -> Result<HyperGrad> {
    reverse_impl(
        spec,
        tape,
        data,
        quality,
        ensemble,
        config,
        ReverseStyle::Literal,
    )
}

/// Which lower-level solution map the finite-difference oracle retrains.
#[derive(Debug, Clone)]
pub enum LowerPath {
    /// Retrain to stationarity with the convex solver.
    Convex,
    /// Rerun the gradient-descent unroll from the given start.
    Unrolled { theta0: ModelParams },
}

fn pipeline_value(
    spec: &ModelSpec,
    data: &WeakDataset,
    quality: &LabelQualityParams,
    ensemble: &ValidationEnsemble,
    config: &PgsConfig,
    path: &LowerPath,
) -> Result<f64> {
    let theta = match path {
        LowerPath::Convex => lower_solver::train_convex(spec, data, quality, &config.cg)?,
        LowerPath::Unrolled { theta0 } => {
            lower_solver::train_unrolled(
                spec,
                data,
                quality,
                theta0,
                config.lower_step,
                config.lower_iters,
            )?
            .0
        }
    };
    Ok(upper_objective(spec, &theta, ensemble, config)?.objective)
}

/// Central finite differences of the full pipeline value in every free
/// coordinate of the weights and the transition; each probe retrains the
/// lower level. Intended for small instances; errors out beyond
/// [`FD_COORD_BUDGET`] free coordinates.
pub fn hypergrad_fd(
    spec: &ModelSpec,
    data: &WeakDataset,
    quality: &LabelQualityParams,
    ensemble: &ValidationEnsemble,
    config: &PgsConfig,
    path: &LowerPath,
    step: f64,
) -> Result<HyperGrad> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidValue(format!(
            "finite-difference step {step} must be positive"
        )));
    }
    let n = quality.len();
    let q_cols = match &quality.transition {
        LabelTransition::Classification(q) => q.ncols(),
        LabelTransition::Regression(_) => 1,
    };
    let free_rows = quality.free_count();
    let coords = free_rows * (1 + q_cols);
    if coords > FD_COORD_BUDGET {
        return Err(Error::FdBudget {
            coords,
            budget: FD_COORD_BUDGET,
        });
    }

    let probe = |quality: &LabelQualityParams| -> Result<f64> {
        pipeline_value(spec, data, quality, ensemble, config, path)
    };

    let mut d_w = Array1::zeros(n);
    for i in 0..n {
        if quality.frozen[i] {
            continue;
        }
        let mut plus = quality.clone();
        plus.weights[i] += step;
        let mut minus = quality.clone();
        minus.weights[i] -= step;
        d_w[i] = (probe(&plus)? - probe(&minus)?) / (2.0 * step);
    }

    let d_q = match &quality.transition {
        LabelTransition::Classification(q0) => {
            let mut out = Array2::zeros(q0.dim());
            for i in 0..n {
                if quality.frozen[i] {
                    continue;
                }
                for j in 0..q_cols {
                    let mut plus = quality.clone();
                    if let LabelTransition::Classification(q) = &mut plus.transition {
                        q[(i, j)] += step;
                    }
                    let mut minus = quality.clone();
                    if let LabelTransition::Classification(q) = &mut minus.transition {
                        q[(i, j)] -= step;
                    }
                    out[(i, j)] = (probe(&plus)? - probe(&minus)?) / (2.0 * step);
                }
            }
            LabelTransition::Classification(out)
        }
        LabelTransition::Regression(q0) => {
            let mut out = Array1::zeros(q0.len());
            for i in 0..n {
                if quality.frozen[i] {
                    continue;
                }
                let mut plus = quality.clone();
                if let LabelTransition::Regression(q) = &mut plus.transition {
                    q[i] += step;
                }
                let mut minus = quality.clone();
                if let LabelTransition::Regression(q) = &mut minus.transition {
                    q[i] -= step;
                }
                out[i] = (probe(&plus)? - probe(&minus)?) / (2.0 * step);
            }
            LabelTransition::Regression(out)
        }
    };

    Ok(HyperGrad {
        wrt_weights: d_w,
        wrt_transition: d_q,
        path: HyperPath::FiniteDiff,
    })
}
