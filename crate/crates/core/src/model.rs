//! Differentiable loss evaluation for the supported model families.
//!
//! All derivatives are hand-derived per family; there is no autodiff tape.
//! For a classification instance with per-class losses `l(x_i, j, theta)`
//! the weighted training objective is
//!
//! ```text
//! L_train = (1/n) sum_i  weights[i] * sum_j transition[i][j] * l(x_i, j, theta)
//!           + l2_reg/2 * |theta|^2
//! ```
//!
//! and for regression, with shifted targets `y_i + transition[i]`,
//!
//! ```text
//! L_train = (1/n) sum_i  weights[i] * (f(x_i) - (y_i + transition[i]))^2
//!           + l2_reg/2 * |theta|^2
//! ```
//!
//! Besides the gradient in theta, the bilevel machinery needs two
//! vector-Jacobian products of the mixed second derivatives:
//! `v' d2L/(dtheta dw')` and `v' d2L/(dtheta dQ')`. Both reduce to the
//! directional derivative of the model outputs in a theta-direction `v`
//! (a JVP on the logits), which each family provides in closed form.
//!
//! Hessian-vector products are analytic for the linear and softmax families.
//! For the MLP they are central finite differences of the exact gradient
//! (step 1e-4, scaled by the direction norm); callers can detect this via
//! [`hvp_is_approximate`].

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::types::{
    LabelQualityParams, LabelTransition, Labels, ModelFamily, ModelParams, ModelSpec, TaskKind,
    WeakDataset,
};

/// Surrogate loss matched to the task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    SquaredError,
}

impl LossKind {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Classification { .. } => LossKind::CrossEntropy,
            TaskKind::Regression => LossKind::SquaredError,
        }
    }
}

/// Probabilities are floored at this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Finite-difference step for the MLP Hessian-vector product.
const MLP_HVP_STEP: f64 = 1e-4;

/// True when `hvp_theta` for this spec uses a finite-difference approximation
/// rather than an analytic product.
pub fn hvp_is_approximate(spec: &ModelSpec) -> bool {
    matches!(spec.family, ModelFamily::TwoLayerMlp { .. })
}

fn check_theta(spec: &ModelSpec, theta: &ModelParams) -> Result<()> {
    if theta.len() != spec.param_count() {
        return Err(Error::DimensionMismatch(format!(
            "parameter vector of length {} for a family expecting {}",
            theta.len(),
            spec.param_count()
        )));
    }
    Ok(())
}

fn check_features(spec: &ModelSpec, x: ArrayView2<f64>) -> Result<()> {
    if x.ncols() != spec.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "{} feature columns for input dimension {}",
            x.ncols(),
            spec.input_dim
        )));
    }
    Ok(())
}

/// Views into an MLP parameter vector: `[w1 (d x h), b1 (h), w2 (h x k), b2 (k)]`.
struct MlpParts<'a> {
    w1: ArrayView2<'a, f64>,
    b1: ArrayView1<'a, f64>,
    w2: ArrayView2<'a, f64>,
    b2: ArrayView1<'a, f64>,
}

fn mlp_parts<'a>(spec: &ModelSpec, flat: &'a Array1<f64>) -> MlpParts<'a> {
    let hidden = match spec.family {
        ModelFamily::TwoLayerMlp { hidden } => hidden,
        _ => unreachable!("mlp_parts called for non-MLP family"),
    };
    let (d, k) = (spec.input_dim, spec.output_dim);
    let s = flat.as_slice().expect("contiguous parameter vector");
    let (a, rest) = s.split_at(d * hidden);
    let (b, rest) = rest.split_at(hidden);
    let (c, e) = rest.split_at(hidden * k);
    MlpParts {
        w1: ArrayView2::from_shape((d, hidden), a).unwrap(),
        b1: ArrayView1::from_shape(hidden, b).unwrap(),
        w2: ArrayView2::from_shape((hidden, k), c).unwrap(),
        b2: ArrayView1::from_shape(k, e).unwrap(),
    }
}

/// Forward pass artifacts reused by the backward passes.
struct Forward {
    /// Hidden activations, n x h (MLP only).
    hidden: Option<Array2<f64>>,
    /// Raw outputs: logits (n x k) or predictions (n x 1).
    outputs: Array2<f64>,
}

fn forward(spec: &ModelSpec, theta: &ModelParams, x: ArrayView2<f64>) -> Result<Forward> {
    check_theta(spec, theta)?;
    check_features(spec, x)?;
    match spec.family {
        ModelFamily::LinearRegression => {
            let out = x.dot(&theta.values).insert_axis(Axis(1));
            Ok(Forward {
                hidden: None,
                outputs: out,
            })
        }
        ModelFamily::SoftmaxRegression => {
            let w = theta
                .values
                .view()
                .into_shape_with_order((spec.input_dim, spec.output_dim))
                .expect("softmax parameter reshape");
            Ok(Forward {
                hidden: None,
                outputs: x.dot(&w),
            })
        }
        ModelFamily::TwoLayerMlp { .. } => {
            let parts = mlp_parts(spec, &theta.values);
            let mut hidden = x.dot(&parts.w1);
            hidden += &parts.b1;
            hidden.mapv_inplace(f64::tanh);
            let mut out = hidden.dot(&parts.w2);
            out += &parts.b2;
            Ok(Forward {
                hidden: Some(hidden),
                outputs: out,
            })
        }
    }
}

/// Row-wise softmax with max shift.
fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    probs
}

fn cross_entropy(prob: f64) -> f64 {
    -prob.max(PROB_FLOOR).ln()
}

/// Model predictions: row-normalized class probabilities for classification,
/// real values (one column) for regression.
pub fn predict(spec: &ModelSpec, theta: &ModelParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let fwd = forward(spec, theta, x)?;
    match loss_kind(spec) {
        LossKind::CrossEntropy => Ok(softmax_rows(&fwd.outputs)),
        LossKind::SquaredError => Ok(fwd.outputs),
    }
}

fn loss_kind(spec: &ModelSpec) -> LossKind {
    if spec.output_dim == 1 && !matches!(spec.family, ModelFamily::SoftmaxRegression) {
        LossKind::SquaredError
    } else {
        LossKind::CrossEntropy
    }
}

/// Cross-entropy of predicted class `j` on a single instance.
pub fn per_class_loss(
    spec: &ModelSpec,
    theta: &ModelParams,
    x_i: ArrayView1<f64>,
    j: usize,
) -> Result<f64> {
    if loss_kind(spec) != LossKind::CrossEntropy {
        return Err(Error::InvalidValue(
            "per-class loss is defined for classification families".into(),
        ));
    }
    if j >= spec.output_dim {
        return Err(Error::LabelOutOfRange {
            index: 0,
            label: j,
            classes: spec.output_dim,
        });
    }
    let x = x_i.insert_axis(Axis(0));
    let probs = predict(spec, theta, x)?;
    Ok(cross_entropy(probs[(0, j)]))
}

/// Per-class loss matrix (n x k) for a classification dataset.
fn per_class_loss_matrix(
    spec: &ModelSpec,
    theta: &ModelParams,
    x: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let fwd = forward(spec, theta, x)?;
    let probs = softmax_rows(&fwd.outputs);
    Ok(probs.mapv(cross_entropy))
}

/// The weighted-relabeled aggregation of a per-class loss matrix:
/// `(1/n) sum_i weights[i] * sum_j transition[i][j] * losses[i][j]`.
pub fn aggregate_weighted_loss(
    per_class: &Array2<f64>,
    weights: &Array1<f64>,
    transition: &Array2<f64>,
) -> f64 {
    let n = per_class.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let row_loss: f64 = per_class
            .row(i)
            .iter()
            .zip(transition.row(i).iter())
            .map(|(&l, &q)| q * l)
            .sum();
        total += weights[i] * row_loss;
    }
    total / n as f64
}

fn regression_targets(data: &WeakDataset, quality: &LabelQualityParams) -> Result<Array1<f64>> {
    let ys = data.labels().as_reals()?;
    let shift = quality.transition.as_regression()?;
    Ok(Array1::from_iter(
        ys.iter().zip(shift.iter()).map(|(&y, &q)| y + q),
    ))
}

fn check_quality(data: &WeakDataset, quality: &LabelQualityParams) -> Result<()> {
    if quality.len() != data.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} quality rows for {} instances",
            quality.len(),
            data.len()
        )));
    }
    Ok(())
}

/// The weighted/relabeled empirical risk, including the l2 term.
pub fn weighted_train_loss(
    spec: &ModelSpec,
    theta: &ModelParams,
    data: &WeakDataset,
    quality: &LabelQualityParams,
) -> Result<f64> {
    check_quality(data, quality)?;
    let reg = 0.5 * spec.l2_reg * theta.values.dot(&theta.values);
    match data.task() {
        TaskKind::Classification { .. } => {
            let losses = per_class_loss_matrix(spec, theta, data.features().view())?;
            let q = quality.transition.as_classification()?;
            Ok(aggregate_weighted_loss(&losses, &quality.weights, q) + reg)
        }
        TaskKind::Regression => {
            let fwd = forward(spec, theta, data.features().view())?;
            let t = regression_targets(data, quality)?;
            let n = data.len() as f64;
            let mut total = 0.0;
            for i in 0..data.len() {
                let r = fwd.outputs[(i, 0)] - t[i];
                total += quality.weights[i] * r * r;
            }
            Ok(total / n + reg)
        }
    }
}

/// Backpropagate output-space gradients `dz` (n x out) into flat parameter space.
fn backprop(
    spec: &ModelSpec,
    theta: &ModelParams,
    x: ArrayView2<f64>,
    fwd: &Forward,
    dz: &Array2<f64>,
) -> Array1<f64> {
    match spec.family {
        ModelFamily::LinearRegression => x.t().dot(&dz.column(0)),
        ModelFamily::SoftmaxRegression => {
            let grad = x.t().dot(dz);
            Array1::from_iter(grad.iter().cloned())
        }
        ModelFamily::TwoLayerMlp { .. } => {
            let parts = mlp_parts(spec, &theta.values);
            let a = fwd.hidden.as_ref().expect("MLP forward caches activations");
            // dz -> (w2, b2), then through tanh -> (w1, b1)
            let d_w2 = a.t().dot(dz);
            let d_b2 = dz.sum_axis(Axis(0));
            let mut da = dz.dot(&parts.w2.t());
            da.zip_mut_with(a, |g, &act| *g *= 1.0 - act * act);
            let d_w1 = x.t().dot(&da);
            let d_b1 = da.sum_axis(Axis(0));
            let mut flat = Vec::with_capacity(spec.param_count());
            flat.extend(d_w1.iter());
            flat.extend(d_b1.iter());
            flat.extend(d_w2.iter());
            flat.extend(d_b2.iter());
            Array1::from(flat)
        }
    }
}

/// Output-space gradient rows of the weighted training loss, without the l2 term.
///
/// Classification: `dz_i = (w_i/n) (s_i p_i - Q_i)` with `s_i = sum_j Q_ij`.
/// Regression: `dz_i = (2 w_i/n) (f_i - t_i)`.
fn train_output_grad(
    data: &WeakDataset,
    quality: &LabelQualityParams,
    fwd: &Forward,
) -> Result<Array2<f64>> {
    let n = data.len();
    match data.task() {
        TaskKind::Classification { classes } => {
            let probs = softmax_rows(&fwd.outputs);
            let q = quality.transition.as_classification()?;
            let mut dz = Array2::zeros((n, classes));
            for i in 0..n {
                let s: f64 = q.row(i).sum();
                let wi = quality.weights[i] / n as f64;
                for c in 0..classes {
                    dz[(i, c)] = wi * (s * probs[(i, c)] - q[(i, c)]);
                }
            }
            Ok(dz)
        }
        TaskKind::Regression => {
            let t = regression_targets(data, quality)?;
            let mut dz = Array2::zeros((n, 1));
            for i in 0..n {
                dz[(i, 0)] = 2.0 * quality.weights[i] / n as f64 * (fwd.outputs[(i, 0)] - t[i]);
            }
            Ok(dz)
        }
    }
}

/// Exact gradient of [`weighted_train_loss`] in theta.
pub fn grad_theta(
    spec: &ModelSpec,
    theta: &ModelParams,
    data: &WeakDataset,
    quality: &LabelQualityParams,
) -> Result<Array1<f64>> {
    check_quality(data, quality)?;
    let x = data.features().view();
    let fwd = forward(spec, theta, x)?;
    let dz = train_output_grad(data, quality, &fwd)?;
    let mut grad = backprop(spec, theta, x, &fwd, &dz);
    grad.scaled_add(spec.l2_reg, &theta.values);
    Ok(grad)
}

/// Directional derivative of the raw outputs in a theta-direction `v`
/// (the JVP of the logits / predictions): an n x out matrix.
fn output_jvp(
    spec: &ModelSpec,
    theta: &ModelParams,
    x: ArrayView2<f64>,
    fwd: &Forward,
    v: &Array1<f64>,
) -> Array2<f64> {
    match spec.family {
        ModelFamily::LinearRegression => x.dot(v).insert_axis(Axis(1)),
        ModelFamily::SoftmaxRegression => {
            let vm = v
                .view()
                .into_shape_with_order((spec.input_dim, spec.output_dim))
                .expect("softmax direction reshape");
            x.dot(&vm)
        }
        ModelFamily::TwoLayerMlp { .. } => {
            let parts = mlp_parts(spec, &theta.values);
            let dirs = mlp_parts(spec, v);
            let a = fwd.hidden.as_ref().expect("MLP forward caches activations");
            // d a = (1 - a^2) (x dW1 + db1); d z = a dW2 + (d a) W2 + db2
            let mut du = x.dot(&dirs.w1);
            du += &dirs.b1;
            du.zip_mut_with(a, |g, &act| *g *= 1.0 - act * act);
            let mut dz = a.dot(&dirs.w2);
            dz += &du.dot(&parts.w2);
            dz += &dirs.b2;
            dz
        }
    }
}

/// Exact Hessian-vector product for linear and softmax families;
/// central finite differences of the gradient for the MLP.
pub fn hvp_theta(
    spec: &ModelSpec,
    theta: &ModelParams,
    data: &WeakDataset,
    quality: &LabelQualityParams,
    v: &Array1<f64>,
) -> Result<Array1<f64>> {
    check_quality(data, quality)?;
    check_theta(spec, theta)?;
    if v.len() != theta.len() {
        return Err(Error::DimensionMismatch(format!(
            "direction of length {} for {} parameters",
            v.len(),
            theta.len()
        )));
    }
    if let Some(i) = v.iter().position(|z| !z.is_finite()) {
        return Err(Error::NonFinite {
            what: "direction entry",
            index: i,
        });
    }
    let x = data.features().view();
    let n = data.len() as f64;
    match spec.family {
        ModelFamily::LinearRegression => {
            // H = (2/n) X' diag(w) X + reg I
            let xv = x.dot(v);
            let weighted = Array1::from_iter(
                xv.iter()
                    .zip(quality.weights.iter())
                    .map(|(&z, &w)| 2.0 * w * z / n),
            );
            let mut out = x.t().dot(&weighted);
            out.scaled_add(spec.l2_reg, v);
            Ok(out)
        }
        ModelFamily::SoftmaxRegression => {
            let fwd = forward(spec, theta, x)?;
            let probs = softmax_rows(&fwd.outputs);
            let q = quality.transition.as_classification()?;
            let u = output_jvp(spec, theta, x, &fwd, v);
            // Row i of the logit-space product: w_i s_i (p .* u - p (p.u))
            let k = spec.output_dim;
            let mut h = Array2::zeros((data.len(), k));
            for i in 0..data.len() {
                let s: f64 = q.row(i).sum();
                let scale = quality.weights[i] * s / n;
                let p = probs.row(i);
                let ui = u.row(i);
                let pu: f64 = p.dot(&ui);
                for c in 0..k {
                    h[(i, c)] = scale * p[c] * (ui[c] - pu);
                }
            }
            let flat = x.t().dot(&h);
            let mut out = Array1::from_iter(flat.iter().cloned());
            out.scaled_add(spec.l2_reg, v);
            Ok(out)
        }
        ModelFamily::TwoLayerMlp { .. } => {
            let norm = v.dot(v).sqrt();
            if norm == 0.0 {
                return Ok(Array1::zeros(v.len()));
            }
            let eps = MLP_HVP_STEP / norm;
            let plus = ModelParams {
                values: &theta.values + &(v * eps),
            };
            let minus = ModelParams {
                values: &theta.values - &(v * eps),
            };
            let gp = grad_theta(spec, &plus, data, quality)?;
            let gm = grad_theta(spec, &minus, data, quality)?;
            Ok((gp - gm) / (2.0 * eps))
        }
    }
}

/// `v' d2 L_train / (dtheta dweights')`: one entry per instance.
pub fn mixed_w_vjp(
    spec: &ModelSpec,
    theta: &ModelParams,
    data: &WeakDataset,
    quality: &LabelQualityParams,
    v: &Array1<f64>,
) -> Result<Array1<f64>> {
    check_quality(data, quality)?;
    let x = data.features().view();
    let fwd = forward(spec, theta, x)?;
    let u = output_jvp(spec, theta, x, &fwd, v);
    let n = data.len() as f64;
    match data.task() {
        TaskKind::Classification { .. } => {
            let probs = softmax_rows(&fwd.outputs);
            let q = quality.transition.as_classification()?;
            let mut out = Array1::zeros(data.len());
            for i in 0..data.len() {
                let s: f64 = q.row(i).sum();
                let pu: f64 = probs.row(i).dot(&u.row(i));
                let qu: f64 = q.row(i).dot(&u.row(i));
                out[i] = (s * pu - qu) / n;
            }
            Ok(out)
        }
        TaskKind::Regression => {
            let t = regression_targets(data, quality)?;
            let mut out = Array1::zeros(data.len());
            for i in 0..data.len() {
                out[i] = 2.0 * (fwd.outputs[(i, 0)] - t[i]) * u[(i, 0)] / n;
            }
            Ok(out)
        }
    }
}

/// `v' d2 L_train / (dtheta dtransition')`: same shape as the transition.
pub fn mixed_q_vjp(
    spec: &ModelSpec,
    theta: &ModelParams,
    data: &WeakDataset,
    quality: &LabelQualityParams,
    v: &Array1<f64>,
) -> Result<LabelTransition> {
    check_quality(data, quality)?;
    let x = data.features().view();
    let fwd = forward(spec, theta, x)?;
    let u = output_jvp(spec, theta, x, &fwd, v);
    let n = data.len() as f64;
    match data.task() {
        TaskKind::Classification { classes } => {
            let probs = softmax_rows(&fwd.outputs);
            let mut out = Array2::zeros((data.len(), classes));
            for i in 0..data.len() {
                let pu: f64 = probs.row(i).dot(&u.row(i));
                let wi = quality.weights[i] / n;
                for j in 0..classes {
                    out[(i, j)] = wi * (pu - u[(i, j)]);
                }
            }
            Ok(LabelTransition::Classification(out))
        }
        TaskKind::Regression => {
            let mut out = Array1::zeros(data.len());
            for i in 0..data.len() {
                out[i] = -2.0 * quality.weights[i] / n * u[(i, 0)];
            }
            Ok(LabelTransition::Regression(out))
        }
    }
}

/// Mean clean loss over one bootstrap member (duplicated indices count twice).
pub fn validation_loss(
    spec: &ModelSpec,
    theta: &ModelParams,
    base: &WeakDataset,
    member: &[usize],
) -> Result<f64> {
    if member.is_empty() {
        return Err(Error::InvalidValue("empty validation member".into()));
    }
    if let Some(&bad) = member.iter().find(|&&i| i >= base.len()) {
        return Err(Error::InvalidValue(format!(
            "validation index {bad} out of range 0..{}",
            base.len()
        )));
    }
    let preds = predict(spec, theta, base.features().view())?;
    let m = member.len() as f64;
    match base.labels() {
        Labels::Classes(ys) => {
            let total: f64 = member
                .iter()
                .map(|&j| cross_entropy(preds[(j, ys[j])]))
                .sum();
            Ok(total / m)
        }
        Labels::Reals(ys) => {
            let total: f64 = member
                .iter()
                .map(|&j| {
                    let r = preds[(j, 0)] - ys[j];
                    r * r
                })
                .sum();
            Ok(total / m)
        }
    }
}

/// Gradient in theta of [`validation_loss`] over one member.
pub fn validation_grad(
    spec: &ModelSpec,
    theta: &ModelParams,
    base: &WeakDataset,
    member: &[usize],
) -> Result<Array1<f64>> {
    if member.is_empty() {
        return Err(Error::InvalidValue("empty validation member".into()));
    }
    let x = base.features().view();
    let fwd = forward(spec, theta, x)?;
    let m = member.len() as f64;
    // Accumulate output-space gradients; duplicated indices add up.
    let mut dz = Array2::zeros(fwd.outputs.dim());
    match base.labels() {
        Labels::Classes(ys) => {
            let probs = softmax_rows(&fwd.outputs);
            for &j in member {
                for c in 0..spec.output_dim {
                    let delta = if c == ys[j] { 1.0 } else { 0.0 };
                    dz[(j, c)] += (probs[(j, c)] - delta) / m;
                }
            }
        }
        Labels::Reals(ys) => {
            for &j in member {
                dz[(j, 0)] += 2.0 * (fwd.outputs[(j, 0)] - ys[j]) / m;
            }
        }
    }
    Ok(backprop(spec, theta, x, &fwd, &dz))
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar function of theta.
    pub fn fd_grad<F>(f: F, theta: &Array1<f64>, step: f64) -> Array1<f64>
    where
        F: Fn(&Array1<f64>) -> f64,
    {
        let mut grad = Array1::zeros(theta.len());
        let mut probe = theta.clone();
        for i in 0..theta.len() {
            probe[i] = theta[i] + step;
            let fp = f(&probe);
            probe[i] = theta[i] - step;
            let fm = f(&probe);
            probe[i] = theta[i];
            grad[i] = (fp - fm) / (2.0 * step);
        }
        grad
    }

    /// Relative error between two vectors, normalized by the largest magnitude.
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

    pub fn random_dataset(
        rng: &mut ChaCha8Rng,
        n: usize,
        d: usize,
        task: TaskKind,
    ) -> WeakDataset {
        let features = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.5..1.5));
        let labels = match task {
            TaskKind::Classification { classes } => {
                Labels::Classes((0..n).map(|_| rng.gen_range(0..classes)).collect())
            }
            TaskKind::Regression => {
                Labels::Reals((0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
            }
        };
        WeakDataset::new(features, labels, task, vec![true; n]).unwrap()
    }

    /// Random quality params with interior weights and strictly positive rows.
    pub fn random_quality(
        rng: &mut ChaCha8Rng,
        data: &WeakDataset,
    ) -> LabelQualityParams {
        let n = data.len();
        let weights = Array1::from_shape_fn(n, |_| rng.gen_range(0.05..0.95));
        let transition = match data.task() {
            TaskKind::Classification { classes } => {
                let mut q = Array2::zeros((n, classes));
                for i in 0..n {
                    let mut row: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.05..1.0)).collect();
                    let sum: f64 = row.iter().sum();
                    for v in &mut row {
                        *v /= sum;
                    }
                    for (j, v) in row.iter().enumerate() {
                        q[(i, j)] = *v;
                    }
                }
                LabelTransition::Classification(q)
            }
            TaskKind::Regression => {
                LabelTransition::Regression(Array1::from_shape_fn(n, |_| rng.gen_range(-0.5..0.5)))
            }
        };
        LabelQualityParams::new(weights, transition, vec![false; n]).unwrap()
    }

    pub fn random_theta(rng: &mut ChaCha8Rng, spec: &ModelSpec) -> ModelParams {
        ModelParams {
            values: Array1::from_shape_fn(spec.param_count(), |_| rng.gen_range(-0.8..0.8)),
        }
    }
}
