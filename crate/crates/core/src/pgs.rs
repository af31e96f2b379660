//! The outer optimization loop: retrain the lower level, take a
//! hypergradient step on (weights, transition) with Adam, project onto the
//! feasible region, repeat. One engine per hypergradient route: the convex
//! loop retrains to stationarity and differentiates implicitly, the general
//! loop cold-starts a recorded unroll each iteration and runs the reverse
//! accumulation over it.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::hypergrad::{self, HyperGrad};
use crate::lower_solver::{self, UnrollTape};
use crate::model;
use crate::projection;
use crate::report::{Diagnostics, RunReport, TransitionDump};
use crate::types::{
    identity_params, AdamConfig, FeasibleRegion, LabelQualityParams, LabelTransition, Labels,
    ModelParams, ModelSpec, PgsConfig, TaskKind, ValidationEnsemble, WeakDataset, WeakMode,
};

/// A final validation gap above this slack flags the run as unsafe.
pub const SAFETY_SLACK: f64 = 1e-3;

/// Default weight below which an instance counts as distrusted.
pub const DEFAULT_W_THRESHOLD: f64 = 0.5;

/// Train the reference model on the raw labels (weights one, recovery
/// transition) with the family's solver path, and cache its validation loss
/// on every ensemble member as the safeness reference levels.
pub fn compute_baseline(
    spec: &ModelSpec,
    data: &WeakDataset,
    ensemble: &mut ValidationEnsemble,
    config: &PgsConfig,
) -> Result<ModelParams> {
    let identity = identity_params(data, config.weak_mode)?;
    let theta = train_lower(spec, data, &identity, config)?.0;
    let losses = ensemble
        .members()
        .iter()
        .map(|member| model::validation_loss(spec, &theta, ensemble.base(), member))
        .collect::<Result<Vec<f64>>>()?;
    ensemble.set_baseline_losses(losses)?;
    Ok(theta)
}

/// Family-dependent lower-level solve: exact for convex families, the
/// recorded unroll otherwise. Returns the tape when one was produced.
fn train_lower(
    spec: &ModelSpec,
    data: &WeakDataset,
    quality: &LabelQualityParams,
    config: &PgsConfig,
) -> Result<(ModelParams, Option<UnrollTape>)> {
    if spec.is_convex() {
        Ok((lower_solver::train_convex(spec, data, quality, &config.cg)?, None))
    } else {
        let theta0 = lower_solver::init_theta(spec, config.seed);
        let (theta, tape) = lower_solver::train_unrolled(
            spec,
            data,
            quality,
            &theta0,
            config.lower_step,
            config.lower_iters,
        )?;
        Ok((theta, Some(tape)))
    }
}

/// Semi-supervised initialization: labeled instances are frozen at the
/// recovery point (weight 1, one-hot / zero-shift transition); unlabeled
/// instances start at weight 0.5 with a uniform transition row (zero shift
/// for regression) and are the only ones optimized.
pub fn ssl_freeze(data: &WeakDataset) -> Result<LabelQualityParams> {
    let n = data.len();
    let mask = data.labeled_mask();
    let mut weights = Array1::ones(n);
    for (i, &labeled) in mask.iter().enumerate() {
        if !labeled {
            weights[i] = 0.5;
        }
    }
    let transition = match (data.labels(), data.task()) {
        (Labels::Classes(ys), TaskKind::Classification { classes }) => {
            let mut q = Array2::from_elem((n, classes), 1.0 / classes as f64);
            for (i, &y) in ys.iter().enumerate() {
                if mask[i] {
                    q.row_mut(i).fill(0.0);
                    q[(i, y)] = 1.0;
                }
            }
            LabelTransition::Classification(q)
        }
        (Labels::Reals(_), TaskKind::Regression) => LabelTransition::Regression(Array1::zeros(n)),
        _ => unreachable!("dataset constructor enforces label/task agreement"),
    };
    LabelQualityParams::new(weights, transition, mask.to_vec())
}

/// Argmax label proposal for one instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrectionProposal {
    pub index: usize,
    pub current_label: usize,
    pub proposed_label: usize,
    /// True when the proposal differs from the current label.
    pub is_correction: bool,
    /// True when the learned weight fell below the distrust threshold.
    pub distrusted: bool,
}

/// Read corrected labels out of a learned transition: propose the argmax of
/// each row (ties resolve to the smallest class index), flag it as a
/// correction when it differs from the raw label, and mark instances whose
/// weight dropped below `w_threshold` as distrusted.
pub fn extract_corrections(
    quality: &LabelQualityParams,
    data: &WeakDataset,
    w_threshold: f64,
) -> Result<Vec<CorrectionProposal>> {
    let q = quality.transition.as_classification()?;
    let ys = data.labels().as_classes()?;
    let mut out = Vec::with_capacity(data.len());
    for (i, &current) in ys.iter().enumerate() {
        let row = q.row(i);
        let mut best = 0usize;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        out.push(CorrectionProposal {
            index: i,
            current_label: current,
            proposed_label: best,
            is_correction: best != current,
            distrusted: quality.weights[i] < w_threshold,
        });
    }
    Ok(out)
}

/// Per-vector Adam state.
struct AdamState {
    m: Array1<f64>,
    v: Array1<f64>,
    t: usize,
}

impl AdamState {
    fn new(len: usize) -> Self {
        Self {
            m: Array1::zeros(len),
            v: Array1::zeros(len),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Array1<f64>, grad: &Array1<f64>, cfg: &AdamConfig) {
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

fn transition_flat(t: &LabelTransition) -> Array1<f64> {
    match t {
        LabelTransition::Classification(q) => Array1::from_iter(q.iter().cloned()),
        LabelTransition::Regression(q) => q.clone(),
    }
}

fn transition_unflatten(template: &LabelTransition, flat: Array1<f64>) -> LabelTransition {
    match template {
        LabelTransition::Classification(q) => LabelTransition::Classification(
            Array2::from_shape_vec(q.dim(), flat.to_vec()).expect("shape preserved"),
        ),
        LabelTransition::Regression(_) => LabelTransition::Regression(flat),
    }
}

enum Engine {
    Implicit,
    Reverse,
}

fn initial_quality(data: &WeakDataset, config: &PgsConfig) -> Result<LabelQualityParams> {
    match config.weak_mode {
        WeakMode::NoisyLabels => identity_params(data, WeakMode::NoisyLabels),
        WeakMode::SemiSupervised => ssl_freeze(data),
    }
}

fn run_outer(
    engine: Engine,
    spec: &ModelSpec,
    data: &WeakDataset,
    ensemble: &mut ValidationEnsemble,
    config: &PgsConfig,
    region: &FeasibleRegion,
) -> Result<RunReport> {
    config.validate()?;
    region.validate(data.len(), data.task())?;
    if !spec.matches_task(data.task()) {
        return Err(Error::Config(format!(
            "model family {:?} incompatible with task {:?}",
            spec.family,
            data.task()
        )));
    }
    let start = Instant::now();

    let class_labels: Option<Vec<usize>> = match data.labels() {
        Labels::Classes(ys) => Some(ys.clone()),
        Labels::Reals(_) => None,
    };
    let mut quality = initial_quality(data, config)?;
    projection::project_params(&mut quality, class_labels.as_deref(), region)?;

    let baseline_theta = compute_baseline(spec, data, ensemble, config)?;
    let theta0 = lower_solver::init_theta(spec, config.seed);

    let mut adam_w = AdamState::new(quality.len());
    let mut adam_q = AdamState::new(transition_flat(&quality.transition).len());
    let mut trace = Vec::with_capacity(config.upper_iters + 1);

    for outer in 1..=config.upper_iters {
        let (theta, tape) = match engine {
            Engine::Implicit => (
                lower_solver::train_convex(spec, data, &quality, &config.cg)?,
                None,
            ),
            Engine::Reverse => {
                let (theta, tape) = lower_solver::train_unrolled(
                    spec,
                    data,
                    &quality,
                    &theta0,
                    config.lower_step,
                    config.lower_iters,
                )?;
                (theta, Some(tape))
            }
        };
        let eval = hypergrad::upper_objective(spec, &theta, ensemble, config)?;
        if !eval.objective.is_finite() {
            return Err(Error::Config(format!(
                "upper objective became non-finite at outer iteration {outer}"
            )));
        }
        trace.push(eval.objective);

        let grad: HyperGrad = match engine {
            Engine::Implicit => {
                hypergrad::hypergrad_implicit(spec, &theta, data, &quality, ensemble, config)?
            }
            Engine::Reverse => hypergrad::hypergrad_reverse(
                spec,
                tape.as_ref().expect("reverse engine records a tape"),
                data,
                &quality,
                ensemble,
                config,
            )?,
        };

        adam_w.step(&mut quality.weights, &grad.wrt_weights, &config.upper);
        let mut flat = transition_flat(&quality.transition);
        adam_q.step(&mut flat, &transition_flat(&grad.wrt_transition), &config.upper);
        quality.transition = transition_unflatten(&quality.transition, flat);

        projection::project_params(&mut quality, class_labels.as_deref(), region)?;
    }

    // Report the model the learned labels actually induce.
    let (final_theta, _) = if config.upper_iters == 0 {
        (baseline_theta.clone(), None)
    } else {
        train_lower(spec, data, &quality, config)?
    };
    let final_eval = hypergrad::upper_objective(spec, &final_theta, ensemble, config)?;
    trace.push(final_eval.objective);
    let final_kkt = lower_solver::kkt_residual(spec, &final_theta, data, &quality)?;

    let unsafe_run = final_eval.gaps.iter().any(|&g| g > SAFETY_SLACK);
    let member_losses_before = ensemble
        .baseline_losses()
        .expect("populated by compute_baseline")
        .to_vec();

    Ok(RunReport {
        method: match engine {
            Engine::Implicit => "pgs_convex".to_string(),
            Engine::Reverse => "pgs_nonconvex".to_string(),
        },
        seed: config.seed,
        weights: quality.weights.to_vec(),
        transition: TransitionDump::from(&quality.transition),
        theta: final_theta.values.to_vec(),
        member_losses_before,
        member_losses_after: final_eval.member_losses.clone(),
        safeness_gaps: final_eval.gaps.clone(),
        unsafe_run,
        test_metrics: BTreeMap::new(),
        baseline_metrics: BTreeMap::new(),
        diagnostics: Diagnostics {
            objective_trace: trace,
            final_kkt_residual: final_kkt,
            hvp_approximate: model::hvp_is_approximate(spec),
            upper_iters_run: config.upper_iters,
        },
        wall_clock_secs: start.elapsed().as_secs_f64(),
        config_echo: serde_json::to_value(config)?,
    })
}

/// Outer loop over the implicit-differentiation engine. Requires a convex
/// family; every iteration retrains to stationarity.
pub fn pgs_convex(
    spec: &ModelSpec,
    data: &WeakDataset,
    ensemble: &mut ValidationEnsemble,
    config: &PgsConfig,
    region: &FeasibleRegion,
) -> Result<RunReport> {
    if !spec.is_convex() {
        return Err(Error::InvalidValue(
            "the convex loop needs a convex family; use pgs_nonconvex".into(),
        ));
    }
    run_outer(Engine::Implicit, spec, data, ensemble, config, region)
}

/// Outer loop over the reverse-mode engine: every iteration cold-starts a
/// fresh unroll from the same initialization and differentiates through it.
pub fn pgs_nonconvex(
    spec: &ModelSpec,
    data: &WeakDataset,
    ensemble: &mut ValidationEnsemble,
    config: &PgsConfig,
    region: &FeasibleRegion,
) -> Result<RunReport> {
    run_outer(Engine::Reverse, spec, data, ensemble, config, region)
}
