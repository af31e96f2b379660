//! Built-in correctness sweeps: three-way hypergradient agreement on seeded
//! instances and projection checks against the reference oracles. Shared by
//! the command-line front end and the acceptance tests.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hypergrad::{
    hypergrad_fd, hypergrad_implicit, hypergrad_reverse, HyperGrad, LowerPath,
};
use crate::lower_solver::{hessian_spectral_bound, train_convex, train_unrolled};
use crate::projection::{self, oracle};
use crate::types::{
    FeasibleRegion, LabelQualityParams, LabelTransition, Labels, ModelFamily, ModelParams,
    ModelSpec, PgsConfig, TaskKind, ValidationEnsemble, WeakDataset,
};

/// Flatten a hypergradient into one vector for error comparison.
fn flatten(h: &HyperGrad) -> Array1<f64> {
    let mut out: Vec<f64> = h.wrt_weights.to_vec();
    match &h.wrt_transition {
        LabelTransition::Classification(q) => out.extend(q.iter()),
        LabelTransition::Regression(q) => out.extend(q.iter()),
    }
    Array1::from(out)
}

/// Max-abs difference normalized by the largest entry magnitude.
pub fn rel_err(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let scale = a
        .iter()
        .chain(b.iter())
        .fold(0.0f64, |acc, &v| acc.max(v.abs()))
        .max(1e-12);
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (&x, &y)| acc.max((x - y).abs()))
        / scale
}

#[derive(Debug, Clone)]
pub struct AgreementCase {
    pub family: ModelFamily,
    pub instances: usize,
    pub dim: usize,
    pub classes: usize,
    pub implicit_vs_reverse: Option<f64>,
    pub implicit_vs_fd: Option<f64>,
    pub reverse_vs_fd: f64,
}

impl AgreementCase {
    pub fn worst(&self) -> f64 {
        self.implicit_vs_reverse
            .unwrap_or(0.0)
            .max(self.implicit_vs_fd.unwrap_or(0.0))
            .max(self.reverse_vs_fd)
    }
}

fn random_instance(
    rng: &mut ChaCha8Rng,
    family: ModelFamily,
    n: usize,
    d: usize,
    k: usize,
    reg: f64,
) -> Result<(ModelSpec, WeakDataset, LabelQualityParams, ValidationEnsemble)> {
    let task = match family {
        ModelFamily::LinearRegression => TaskKind::Regression,
        _ => TaskKind::Classification { classes: k },
    };
    let out_dim = task.output_dim();
    let spec = ModelSpec::new(family, d, out_dim, reg)?;
    let make_data = |rng: &mut ChaCha8Rng, n: usize| -> Result<WeakDataset> {
        let features = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.5..1.5));
        let labels = match task {
            TaskKind::Classification { classes } => {
                Labels::Classes((0..n).map(|_| rng.gen_range(0..classes)).collect())
            }
            TaskKind::Regression => {
                Labels::Reals((0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
            }
        };
        WeakDataset::new(features, labels, task, vec![true; n])
    };
    let data = make_data(rng, n)?;
    let weights = Array1::from_shape_fn(n, |_| rng.gen_range(0.1..0.9));
    let transition = match task {
        TaskKind::Classification { classes } => {
            let mut q = Array2::zeros((n, classes));
            for i in 0..n {
                let row: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.1..1.0)).collect();
                let sum: f64 = row.iter().sum();
                for (j, v) in row.iter().enumerate() {
                    q[(i, j)] = v / sum;
                }
            }
            LabelTransition::Classification(q)
        }
        TaskKind::Regression => {
            LabelTransition::Regression(Array1::from_shape_fn(n, |_| rng.gen_range(-0.5..0.5)))
        }
    };
    let quality = LabelQualityParams::new(weights, transition, vec![false; n])?;
    let n_v = (n / 2).max(2);
    let val = make_data(rng, n_v)?;
    let members: Vec<Vec<usize>> = (0..2)
        .map(|_| (0..n_v).map(|_| rng.gen_range(0..n_v)).collect())
        .collect();
    let mut ensemble = ValidationEnsemble::new(val, members)?;
    // safeness off for the agreement sweep: references are placeholders
    ensemble.set_baseline_losses(vec![0.0, 0.0])?;
    Ok((spec, data, quality, ensemble))
}

/// Three-way hypergradient agreement on one random instance of the family.
/// Convex families compare implicit, reverse (at `unroll_steps`) and finite
/// differences pairwise; the MLP compares reverse against finite differences.
pub fn agreement_case(
    family: ModelFamily,
    seed: u64,
    unroll_steps: usize,
) -> Result<AgreementCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, k) = match family {
        ModelFamily::LinearRegression => (rng.gen_range(6..=30), rng.gen_range(2..=6), 1),
        ModelFamily::SoftmaxRegression => {
            (rng.gen_range(6..=30), rng.gen_range(2..=6), rng.gen_range(2..=3))
        }
        ModelFamily::TwoLayerMlp { .. } => (rng.gen_range(6..=12), rng.gen_range(2..=4), 2),
    };
    let reg = match family {
        ModelFamily::TwoLayerMlp { .. } => 1e-3,
        _ => rng.gen_range(0.1..0.4),
    };
    let (spec, data, quality, ensemble) = random_instance(&mut rng, family, n, d, k, reg)?;

    let theta0 = crate::lower_solver::init_theta(&spec, seed);
    let lmax = hessian_spectral_bound(&spec, &theta0, &data, &quality, 60, seed)?;
    let config = PgsConfig {
        safeness_weight: 0.0,
        lower_step: 1.0 / lmax.max(1e-8),
        lower_iters: unroll_steps,
        ..PgsConfig::default()
    };

    let (_, tape) = train_unrolled(
        &spec,
        &data,
        &quality,
        &theta0,
        config.lower_step,
        config.lower_iters,
    )?;
    let reverse = hypergrad_reverse(&spec, &tape, &data, &quality, &ensemble, &config)?;

    if spec.is_convex() {
        let theta = train_convex(&spec, &data, &quality, &config.cg)?;
        let implicit = hypergrad_implicit(&spec, &theta, &data, &quality, &ensemble, &config)?;
        let fd = hypergrad_fd(
            &spec,
            &data,
            &quality,
            &ensemble,
            &config,
            &LowerPath::Convex,
            1e-5,
        )?;
        let fi = flatten(&implicit);
        let fr = flatten(&reverse);
        let ff = flatten(&fd);
        Ok(AgreementCase {
            family,
            instances: n,
            dim: d,
            classes: k,
            implicit_vs_reverse: Some(rel_err(&fi, &fr)),
            implicit_vs_fd: Some(rel_err(&fi, &ff)),
            reverse_vs_fd: rel_err(&fr, &ff),
        })
    } else {
        let fd = hypergrad_fd(
            &spec,
            &data,
            &quality,
            &ensemble,
            &config,
            &LowerPath::Unrolled { theta0 },
            1e-4,
        )?;
        Ok(AgreementCase {
            family,
            instances: n,
            dim: d,
            classes: k,
            implicit_vs_reverse: None,
            implicit_vs_fd: None,
            reverse_vs_fd: rel_err(&flatten(&reverse), &flatten(&fd)),
        })
    }
}

/// Run the agreement sweep: `count` seeded instances per family.
pub fn agreement_sweep(
    families: &[ModelFamily],
    count: usize,
    unroll_steps: usize,
    seed: u64,
) -> Result<Vec<AgreementCase>> {
    let mut cases = Vec::new();
    for (fi, &family) in families.iter().enumerate() {
        for rep in 0..count {
            cases.push(agreement_case(
                family,
                seed.wrapping_add((fi * 10_000 + rep) as u64),
                unroll_steps,
            )?);
        }
    }
    Ok(cases)
}

/// Gap between the reverse and implicit hypergradients of one strictly
/// convex instance, as a function of the unroll length.
pub fn reverse_convergence_curve(
    seed: u64,
    steps: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(8..=20);
    let d = rng.gen_range(2..=5);
    let reg = rng.gen_range(0.15..0.4);
    let (spec, data, quality, ensemble) =
        random_instance(&mut rng, ModelFamily::LinearRegression, n, d, 1, reg)?;
    let config = PgsConfig {
        safeness_weight: 0.0,
        ..PgsConfig::default()
    };
    let theta0 = ModelParams::zeros(&spec);
    let lmax = hessian_spectral_bound(&spec, &theta0, &data, &quality, 60, seed)?;
    let eta = 1.0 / lmax;
    let theta = train_convex(&spec, &data, &quality, &config.cg)?;
    let implicit = hypergrad_implicit(&spec, &theta, &data, &quality, &ensemble, &config)?;
    let fi = flatten(&implicit);
    let mut out = Vec::new();
    for &t in steps {
        let (_, tape) = train_unrolled(&spec, &data, &quality, &theta0, eta, t)?;
        let reverse = hypergrad_reverse(&spec, &tape, &data, &quality, &ensemble, &config)?;
        let gap = fi
            .iter()
            .zip(flatten(&reverse).iter())
            .fold(0.0f64, |acc, (&a, &b)| acc.max((a - b).abs()));
        out.push((t, gap));
    }
    Ok(out)
}

/// Summary of the projection-versus-oracle sweep.
#[derive(Debug, Clone)]
pub struct ProjectionCheck {
    pub cases: usize,
    /// worst |ours - oracle| distance gap for the weight projection
    pub weight_max_gap: f64,
    /// worst gap for the regression ball projection
    pub ball_max_gap: f64,
    /// worst infeasibility of the blended classification output
    pub classification_max_violation: f64,
    /// relative suboptimality of the blend vs the exact joint projection
    pub classification_mean_subopt: f64,
    pub classification_max_subopt: f64,
    /// fraction of cases within 5% of the oracle optimum
    pub classification_within_5pct: f64,
}

fn dist(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Compare the production projections with the reference oracles on random
/// small instances (dimensions at most 3, at most 3 classes).
pub fn projection_check(cases: usize, seed: u64) -> Result<ProjectionCheck> {
    if cases == 0 {
        return Err(Error::InvalidValue("need at least one case".into()));
    }
    // One stream per constraint set, so each family's draws are independent
    // of the others.
    let substream = |tag: &str| {
        ChaCha8Rng::seed_from_u64(crate::report::fnv1a_hash(
            format!("{seed}:{tag}").as_bytes(),
        ))
    };
    let mut weight_max_gap = 0.0f64;
    let mut ball_max_gap = 0.0f64;
    let mut cls_violation = 0.0f64;
    let mut subopts = Vec::with_capacity(cases);

    let mut rng = substream("weights");
    for _ in 0..cases {
        let n = rng.gen_range(1..=3);
        let w = Array1::from_shape_fn(n, |_| rng.gen_range(-1.5..2.5));
        let floor = rng.gen_range(0.0..n as f64);
        let frozen = vec![false; n];
        let ours = projection::project_w(&w, floor, &frozen)?;
        let reference = oracle::project_w_reference(&w, floor, &frozen)?;
        weight_max_gap = weight_max_gap.max((dist(&ours, &w) - dist(&reference, &w)).abs());
    }

    let mut rng = substream("ball");
    for _ in 0..cases {
        let nb = rng.gen_range(1..=3);
        let q = Array1::from_shape_fn(nb, |_| rng.gen_range(-2.0..2.0));
        let cap = rng.gen_range(0.1..2.5);
        let frozen = vec![false; nb];
        let ours = projection::project_q_regression(&q, cap, &frozen)?;
        let reference = oracle::project_ball_reference(&q, cap, &frozen);
        ball_max_gap = ball_max_gap.max((dist(&ours, &q) - dist(&reference, &q)).abs());
    }

    let mut rng = substream("classification");
    for _ in 0..cases {
        let nc = rng.gen_range(1..=3);
        let k = rng.gen_range(2..=3);
        let qc = Array2::from_shape_fn((nc, k), |_| rng.gen_range(-1.0..2.0));
        let labels: Vec<usize> = (0..nc).map(|_| rng.gen_range(0..k)).collect();
        let cap = rng.gen_range(0.0..1.0);
        let frozen = vec![false; nc];
        let ours = projection::project_q_classification(&qc, &labels, cap, &frozen)?;
        let exact = oracle::project_q_classification_reference(&qc, &labels, cap, &frozen);
        // feasibility of the blend
        let mut mean_dist = 0.0;
        for i in 0..nc {
            let row = ours.row(i);
            cls_violation = cls_violation.max((row.sum() - 1.0).abs());
            cls_violation =
                cls_violation.max(row.iter().fold(0.0f64, |acc, &v| acc.max(-v)));
            mean_dist += 1.0 - row[labels[i]];
        }
        cls_violation = cls_violation.max(mean_dist / nc as f64 - cap);
        // suboptimality vs the exact joint projection
        let flat_in = Array1::from_iter(qc.iter().cloned());
        let flat_ours = Array1::from_iter(ours.iter().cloned());
        let flat_exact = Array1::from_iter(exact.iter().cloned());
        let d_ours = dist(&flat_ours, &flat_in);
        let d_exact = dist(&flat_exact, &flat_in);
        let subopt = if d_exact > 1e-9 {
            (d_ours - d_exact).max(0.0) / d_exact
        } else if d_ours > 1e-6 {
            f64::INFINITY
        } else {
            0.0
        };
        subopts.push(subopt);
    }

    let within = subopts.iter().filter(|&&s| s <= 0.05).count() as f64 / cases as f64;
    let mean = subopts.iter().filter(|s| s.is_finite()).sum::<f64>() / cases as f64;
    let max = subopts.iter().cloned().fold(0.0f64, f64::max);
    Ok(ProjectionCheck {
        cases,
        weight_max_gap,
        ball_max_gap,
        classification_max_violation: cls_violation,
        classification_mean_subopt: mean,
        classification_max_subopt: max,
        classification_within_5pct: within,
    })
}

/// Feasible-region instance used by the projection sweep; exposed for the
/// command line to print.
pub fn describe_region(region: &FeasibleRegion) -> String {
    format!(
        "weight mass floor {:.4}, shift cap {:.4}",
        region.weight_mass_floor, region.shift_cap
    )
}
