//! Lower-level training: exact solves for the convex families and a recorded
//! gradient-descent unroll for the general case.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cg::cg_solve;
use crate::error::{Error, Result};
use crate::model;
use crate::types::{
    CgSettings, LabelQualityParams, ModelFamily, ModelParams, ModelSpec, WeakDataset,
};

/// Target stationarity for the linear direct solve.
pub const LINEAR_KKT_TOL: f64 = 1e-8;
/// Target stationarity for the softmax Newton-CG solve.
pub const SOFTMAX_KKT_TOL: f64 = 1e-6;

const MAX_NEWTON_ITERS: usize = 200;
const MAX_BACKTRACKS: usize = 40;

/// The recorded trajectory of a gradient-descent unroll: theta_0 .. theta_T.
#[derive(Debug, Clone)]
pub struct UnrollTape {
    trajectory: Vec<Array1<f64>>,
    step: f64,
}

impl UnrollTape {
    pub fn steps(&self) -> usize {
        self.trajectory.len() - 1
    }

    pub fn step_size(&self) -> f64 {
        self.step
    }

    /// theta_t for t in 0..=steps().
    pub fn at(&self, t: usize) -> &Array1<f64> {
        &self.trajectory[t]
    }

    pub fn final_params(&self) -> ModelParams {
        ModelParams {
            values: self.trajectory.last().expect("non-empty tape").clone(),
        }
    }
}

/// Max-abs entry of the training gradient: the stationarity residual.
pub fn kkt_residual(
    spec: &ModelSpec,
    theta: &ModelParams,
    data: &WeakDataset,
    quality: &LabelQualityParams,
) -> Result<f64> {
    let g = model::grad_theta(spec, theta, data, quality)?;
    Ok(g.iter().fold(0.0f64, |acc, &v| acc.max(v.abs())))
}

/// Gaussian elimination with partial pivoting. Small dense systems only.
fn solve_dense(mut a: Array2<f64>, mut b: Array1<f64>) -> Result<Array1<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                a[(i, col)]
                    .abs()
                    .partial_cmp(&a[(j, col)].abs())
                    .expect("finite pivots")
            })
            .expect("non-empty column");
        if a[(pivot, col)].abs() < 1e-300 {
            return Err(Error::NonConvergence {
                iters: col,
                residual: f64::INFINITY,
            });
        }
        if pivot != col {
            for j in 0..n {
                a.swap((pivot, j), (col, j));
            }
            b.swap(pivot, col);
        }
        for row in col + 1..n {
            let factor = a[(row, col)] / a[(col, col)];
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[(row, j)] -= factor * a[(col, j)];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = Array1::zeros(n);
    for row in (0..n).rev() {
        let mut acc = b[row];
        for j in row + 1..n {
            acc -= a[(row, j)] * x[j];
        }
        x[row] = acc / a[(row, row)];
    }
    Ok(x)
}

fn train_linear(
    spec: &ModelSpec,
    data: &WeakDataset,
    quality: &LabelQualityParams,
) -> Result<ModelParams> {
    let x = data.features();
    let n = data.len() as f64;
    let d = spec.input_dim;
    let ys = data.labels().as_reals()?;
    let shift = quality.transition.as_regression()?;
    // Normal equations: ((2/n) X' W X + reg I) theta = (2/n) X' W (y + shift)
    let mut h = Array2::zeros((d, d));
    let mut b = Array1::zeros(d);
    for i in 0..data.len() {
        let xi = x.row(i);
        let w = 2.0 * quality.weights[i] / n;
        if w == 0.0 {
            continue;
        }
        let t = ys[i] + shift[i];
        for a in 0..d {
            b[a] += w * xi[a] * t;
            for c in 0..d {
                h[(a, c)] += w * xi[a] * xi[c];
            }
        }
    }
    for a in 0..d {
        h[(a, a)] += spec.l2_reg;
    }
    let theta = ModelParams {
        values: solve_dense(h, b)?,
    };
    let res = kkt_residual(spec, &theta, data, quality)?;
    if res > LINEAR_KKT_TOL {
        return Err(Error::NonConvergence {
            iters: 1,
            residual: res,
        });
    }
    Ok(theta)
}

fn train_softmax(
    spec: &ModelSpec,
    data: &WeakDataset,
    quality: &LabelQualityParams,
    cg: &CgSettings,
) -> Result<ModelParams> {
    let mut theta = ModelParams::zeros(spec);
    let mut loss = model::weighted_train_loss(spec, &theta, data, quality)?;
    let mut damping = 0.0;
    for iter in 0..MAX_NEWTON_ITERS {
        let grad = model::grad_theta(spec, &theta, data, quality)?;
        let res = grad.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
        if res <= SOFTMAX_KKT_TOL {
            return Ok(theta);
        }
        let rhs = -&grad;
        let newton_cg = CgSettings {
            max_iters: cg.max_iters,
            tol: (cg.tol).min(1e-10),
        };
        let step = loop {
            let damp = damping;
            let solved = cg_solve(
                |v| {
                    let mut hv = model::hvp_theta(spec, &theta, data, quality, v)?;
                    if damp > 0.0 {
                        hv.scaled_add(damp, v);
                    }
                    Ok(hv)
                },
                &rhs,
                &newton_cg,
            );
            match solved {
                Ok(sol) => break sol.x,
                Err(Error::CgBreakdown { .. }) => {
                    // The Hessian is PSD in exact arithmetic; bump damping and retry.
                    damping = (damping * 10.0).max(1e-8);
                    if damping > 1e6 {
                        return Err(Error::NonConvergence {
                            iters: iter,
                            residual: res,
                        });
                    }
                }
                Err(e) => return Err(e),
            }
        };
        // Backtracking line search on the training loss.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            let candidate = ModelParams {
                values: &theta.values + &(&step * scale),
            };
            let cand_loss = model::weighted_train_loss(spec, &candidate, data, quality)?;
            if cand_loss.is_finite() && cand_loss <= loss + 1e-12 {
                theta = candidate;
                loss = cand_loss;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence {
                iters: iter,
                residual: res,
            });
        }
    }
    let res = kkt_residual(spec, &theta, data, quality)?;
    if res <= SOFTMAX_KKT_TOL {
        Ok(theta)
    } else {
        Err(Error::NonConvergence {
            iters: MAX_NEWTON_ITERS,
            residual: res,
        })
    }
}

/// Solve the lower-level problem exactly for a convex family: a direct
/// normal-equations solve for linear regression, damped Newton-CG for
/// softmax regression. The returned parameters satisfy the family's
/// stationarity tolerance, or an error carries the final residual.
pub fn train_convex(
    spec: &ModelSpec,
    data: &WeakDataset,
    quality: &LabelQualityParams,
    cg: &CgSettings,
) -> Result<ModelParams> {
    match spec.family {
        ModelFamily::LinearRegression => train_linear(spec, data, quality),
        ModelFamily::SoftmaxRegression => {
            if spec.l2_reg <= 0.0 {
                return Err(Error::InvalidValue(
                    "softmax training requires l2_reg > 0 for strict convexity".into(),
                ));
            }
            train_softmax(spec, data, quality, cg)
        }
        ModelFamily::TwoLayerMlp { .. } => Err(Error::InvalidValue(
            "the MLP family is not convex; use train_unrolled".into(),
        )),
    }
}

/// Plain full-batch gradient descent for `steps` iterations, recording the
/// whole trajectory. Deterministic given `theta0`.
pub fn train_unrolled(
    spec: &ModelSpec,
    data: &WeakDataset,
    quality: &LabelQualityParams,
    theta0: &ModelParams,
    step: f64,
    steps: usize,
) -> Result<(ModelParams, UnrollTape)> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidValue(format!("step {step} must be positive")));
    }
    if steps == 0 {
        return Err(Error::InvalidValue("unroll needs at least one step".into()));
    }
    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(theta0.values.clone());
    let mut current = theta0.clone();
    for t in 1..=steps {
        let grad = model::grad_theta(spec, &current, data, quality)?;
        let next = &current.values - &(&grad * step);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: t });
        }
        trajectory.push(next.clone());
        current = ModelParams { values: next };
    }
    Ok((
        current,
        UnrollTape {
            trajectory,
            step,
        },
    ))
}

/// Default initialization for the unrolled path, held fixed across outer
/// iterations: all zeros for the convex families, a small seeded uniform
/// draw for the MLP (zeros leave its hidden layer permanently symmetric).
pub fn init_theta(spec: &ModelSpec, seed: u64) -> ModelParams {
    match spec.family {
        ModelFamily::LinearRegression | ModelFamily::SoftmaxRegression => ModelParams::zeros(spec),
        ModelFamily::TwoLayerMlp { hidden } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bound1 = (6.0 / (spec.input_dim + hidden) as f64).sqrt();
            let bound2 = (6.0 / (hidden + spec.output_dim) as f64).sqrt();
            let mut values = Vec::with_capacity(spec.param_count());
            for _ in 0..spec.input_dim * hidden {
                values.push(rng.gen_range(-bound1..bound1));
            }
            values.extend(std::iter::repeat_n(0.0, hidden));
            for _ in 0..hidden * spec.output_dim {
                values.push(rng.gen_range(-bound2..bound2));
            }
            values.extend(std::iter::repeat_n(0.0, spec.output_dim));
            ModelParams {
                values: Array1::from(values),
            }
        }
    }
}

/// Estimate the largest Hessian eigenvalue at `theta` by power iteration on
/// the Hessian-vector product. Used to pick a stable unroll step size.
pub fn hessian_spectral_bound(
    spec: &ModelSpec,
    theta: &ModelParams,
    data: &WeakDataset,
    quality: &LabelQualityParams,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    let dim = spec.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Array1<f64> = Array1::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0));
    let mut norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
        norm = 1.0;
    }
    v /= norm;
    let mut lambda = 0.0;
    for _ in 0..iters {
        let hv = model::hvp_theta(spec, theta, data, quality, &v)?;
        lambda = hv.dot(&hv).sqrt();
        if lambda <= 1e-300 {
            return Ok(0.0);
        }
        v = hv / lambda;
    }
    Ok(lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::{random_dataset, random_quality, random_theta};
    use crate::types::{identity_params, Labels, TaskKind, WeakMode};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_cg() -> CgSettings {
        CgSettings::default()
    }

    #[test]
    fn linear_exact_least_squares_on_square_system() {
        // Square invertible X, w = 1, shift = 0, reg = 0: theta solves X theta = y.
        let x = array![[2.0, 0.0], [1.0, 3.0]];
        let y = vec![4.0, 7.0];
        let data = WeakDataset::new(
            x.clone(),
            Labels::Reals(y.clone()),
            TaskKind::Regression,
            vec![true; 2],
        )
        .unwrap();
        let spec = ModelSpec::new(ModelFamily::LinearRegression, 2, 1, 0.0).unwrap();
        let quality = identity_params(&data, WeakMode::NoisyLabels).unwrap();
        let theta = train_convex(&spec, &data, &quality, &default_cg()).unwrap();
        // X theta = y exactly: theta = (2, 5/3)
        assert_abs_diff_eq!(theta.values[0], 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(theta.values[1], 5.0 / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn zero_weights_with_reg_gives_zero_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = random_dataset(&mut rng, 5, 3, TaskKind::Regression);
        let spec = ModelSpec::new(ModelFamily::LinearRegression, 3, 1, 0.5).unwrap();
        let mut quality = random_quality(&mut rng, &data);
        quality.weights.fill(0.0);
        let theta = train_convex(&spec, &data, &quality, &default_cg()).unwrap();
        assert!(theta.values.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn softmax_hits_kkt_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = random_dataset(&mut rng, 20, 3, TaskKind::Classification { classes: 2 });
        let spec = ModelSpec::new(ModelFamily::SoftmaxRegression, 3, 2, 1e-4).unwrap();
        let quality = identity_params(&data, WeakMode::NoisyLabels).unwrap();
        let theta = train_convex(&spec, &data, &quality, &default_cg()).unwrap();
        let res = kkt_residual(&spec, &theta, &data, &quality).unwrap();
        assert!(res <= SOFTMAX_KKT_TOL, "residual {res}");
    }

    #[test]
    fn softmax_requires_positive_reg() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = random_dataset(&mut rng, 5, 2, TaskKind::Classification { classes: 2 });
        let spec = ModelSpec::new(ModelFamily::SoftmaxRegression, 2, 2, 0.0).unwrap();
        let quality = identity_params(&data, WeakMode::NoisyLabels).unwrap();
        assert!(train_convex(&spec, &data, &quality, &default_cg()).is_err());
    }

    #[test]
    fn unrolled_single_step_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = random_dataset(&mut rng, 5, 3, TaskKind::Regression);
        let spec = ModelSpec::new(ModelFamily::LinearRegression, 3, 1, 0.0).unwrap();
        let quality = random_quality(&mut rng, &data);
        let theta0 = random_theta(&mut rng, &spec);
        let (theta1, tape) = train_unrolled(&spec, &data, &quality, &theta0, 0.05, 1).unwrap();
        let grad0 = model::grad_theta(&spec, &theta0, &data, &quality).unwrap();
        let expected = &theta0.values - &(grad0 * 0.05);
        assert_abs_diff_eq!(
            theta1.values.as_slice().unwrap(),
            expected.as_slice().unwrap(),
            epsilon = 1e-15
        );
        assert_eq!(tape.steps(), 1);
    }

    #[test]
    fn unrolled_geometric_decay_on_quadratic() {
        // One instance, one feature x=1, target 0, w=1, reg=0:
        // L = theta^2, gradient 2 theta, contraction factor (1 - 2 eta).
        let data = WeakDataset::new(
            array![[1.0]],
            Labels::Reals(vec![0.0]),
            TaskKind::Regression,
            vec![true],
        )
        .unwrap();
        let spec = ModelSpec::new(ModelFamily::LinearRegression, 1, 1, 0.0).unwrap();
        let quality = identity_params(&data, WeakMode::NoisyLabels).unwrap();
        let theta0 = ModelParams {
            values: array![1.0],
        };
        let eta = 0.3;
        let steps = 12;
        let (theta, _) = train_unrolled(&spec, &data, &quality, &theta0, eta, steps).unwrap();
        let expected = (1.0 - 2.0 * eta).powi(steps as i32);
        assert_abs_diff_eq!(theta.values[0], expected, epsilon = 1e-12);
    }

    #[test]
    fn unrolled_constant_at_stationary_point() {
        let data = WeakDataset::new(
            array![[1.0]],
            Labels::Reals(vec![0.0]),
            TaskKind::Regression,
            vec![true],
        )
        .unwrap();
        let spec = ModelSpec::new(ModelFamily::LinearRegression, 1, 1, 0.0).unwrap();
        let quality = identity_params(&data, WeakMode::NoisyLabels).unwrap();
        let theta0 = ModelParams {
            values: array![0.0],
        };
        let (theta, tape) = train_unrolled(&spec, &data, &quality, &theta0, 0.1, 5).unwrap();
        assert_eq!(theta.values[0], 0.0);
        for t in 0..=5 {
            assert_eq!(tape.at(t)[0], 0.0);
        }
    }

    #[test]
    fn unrolled_divergence_is_reported_with_step() {
        let data = WeakDataset::new(
            array![[1.0]],
            Labels::Reals(vec![0.0]),
            TaskKind::Regression,
            vec![true],
        )
        .unwrap();
        let spec = ModelSpec::new(ModelFamily::LinearRegression, 1, 1, 0.0).unwrap();
        let quality = identity_params(&data, WeakMode::NoisyLabels).unwrap();
        let theta0 = ModelParams {
            values: array![1e300],
        };
        // Step far above 2/L blows up geometrically until overflow.
        let err = train_unrolled(&spec, &data, &quality, &theta0, 10.0, 100).unwrap_err();
        assert!(matches!(err, Error::Divergence { step } if step >= 1));
    }

    #[test]
    fn kkt_residual_zero_at_origin_with_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = random_dataset(&mut rng, 4, 2, TaskKind::Regression);
        let spec = ModelSpec::new(ModelFamily::LinearRegression, 2, 1, 0.3).unwrap();
        let mut quality = random_quality(&mut rng, &data);
        quality.weights.fill(0.0);
        let theta = ModelParams::zeros(&spec);
        assert_eq!(kkt_residual(&spec, &theta, &data, &quality).unwrap(), 0.0);
    }

    #[test]
    fn kkt_residual_matches_fd_gradient_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data = random_dataset(&mut rng, 6, 3, TaskKind::Classification { classes: 2 });
        let spec = ModelSpec::new(ModelFamily::SoftmaxRegression, 3, 2, 1e-3).unwrap();
        let quality = random_quality(&mut rng, &data);
        let theta = random_theta(&mut rng, &spec);
        let res = kkt_residual(&spec, &theta, &data, &quality).unwrap();
        let fd = crate::model::test_support::fd_grad(
            |t| {
                model::weighted_train_loss(
                    &spec,
                    &ModelParams { values: t.clone() },
                    &data,
                    &quality,
                )
                .unwrap()
            },
            &theta.values,
            1e-5,
        );
        let fd_max = fd.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
        assert!((res - fd_max).abs() <= 1e-4 * fd_max.max(1e-12));
    }

    #[test]
    fn unrolled_loss_monotone_below_lipschitz_step() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let data = random_dataset(&mut rng, 8, 3, TaskKind::Regression);
            let spec = ModelSpec::new(ModelFamily::LinearRegression, 3, 1, 0.01).unwrap();
            let quality = random_quality(&mut rng, &data);
            let theta0 = random_theta(&mut rng, &spec);
            let lmax = hessian_spectral_bound(&spec, &theta0, &data, &quality, 60, seed).unwrap();
            let eta = 0.9 / lmax;
            let (_, tape) = train_unrolled(&spec, &data, &quality, &theta0, eta, 30).unwrap();
            let mut prev = f64::INFINITY;
            for t in 0..=tape.steps() {
                let loss = model::weighted_train_loss(
                    &spec,
                    &ModelParams {
                        values: tape.at(t).clone(),
                    },
                    &data,
                    &quality,
                )
                .unwrap();
                assert!(loss <= prev + 1e-12, "seed {seed}: loss rose at step {t}");
                prev = loss;
            }
        }
    }

    #[test]
    fn convex_and_long_unroll_agree() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
            let data = random_dataset(&mut rng, 10, 3, TaskKind::Regression);
            let spec = ModelSpec::new(ModelFamily::LinearRegression, 3, 1, 0.05).unwrap();
            let quality = random_quality(&mut rng, &data);
            let exact = train_convex(&spec, &data, &quality, &default_cg()).unwrap();
            let theta0 = ModelParams::zeros(&spec);
            let lmax =
                hessian_spectral_bound(&spec, &theta0, &data, &quality, 60, seed).unwrap();
            let (unrolled, _) =
                train_unrolled(&spec, &data, &quality, &theta0, 1.0 / lmax, 5000).unwrap();
            let gap = exact
                .values
                .iter()
                .zip(unrolled.values.iter())
                .fold(0.0f64, |acc, (&a, &b)| acc.max((a - b).abs()));
            assert!(gap <= 1e-3, "seed {seed}: gap {gap}");
        }
    }

    #[test]
    fn mlp_init_breaks_symmetry_and_is_seeded() {
        let spec = ModelSpec::new(ModelFamily::TwoLayerMlp { hidden: 3 }, 4, 2, 0.0).unwrap();
        let a = init_theta(&spec, 7);
        let b = init_theta(&spec, 7);
        let c = init_theta(&spec, 8);
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, c.values);
        assert!(a.values.iter().any(|&v| v != 0.0));
        let convex = ModelSpec::new(ModelFamily::SoftmaxRegression, 4, 2, 1e-4).unwrap();
        assert!(init_theta(&convex, 7).values.iter().all(|&v| v == 0.0));
    }
}
