//! Domain types shared by every other module.
//!
//! All types here are plain immutable data: construction validates the
//! invariants once, after which values can be shared freely across threads.
//! No algorithms live in this module.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning task: k-way classification or scalar regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification { classes: usize },
    Regression,
}

impl TaskKind {
    pub fn classes(&self) -> Option<usize> {
        match self {
            TaskKind::Classification { classes } => Some(*classes),
            TaskKind::Regression => None,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.classes().unwrap_or(1)
    }
}

/// Per-instance labels, matching the task kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    Reals(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::Reals(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_classes(&self) -> Result<&[usize]> {
        match self {
            Labels::Classes(v) => Ok(v),
            Labels::Reals(_) => Err(Error::InvalidValue(
                "expected class labels, found real labels".into(),
            )),
        }
    }

    pub fn as_reals(&self) -> Result<&[f64]> {
        match self {
            Labels::Reals(v) => Ok(v),
            Labels::Classes(_) => Err(Error::InvalidValue(
                "expected real labels, found class labels".into(),
            )),
        }
    }
}

/// A weakly supervised data set: features plus possibly noisy or missing labels.
///
/// `labeled_mask[i]` is true when the label of instance `i` is trusted
/// (always true in label-noise mode, where the labels are present but
/// possibly corrupted; selectively true in semi-supervised mode).
#[derive(Debug, Clone)]
pub struct WeakDataset {
    features: Array2<f64>,
    labels: Labels,
    task: TaskKind,
    labeled_mask: Vec<bool>,
}

impl WeakDataset {
    /// Validating constructor. Rejects dimension mismatches, out-of-range
    /// class labels and non-finite values, each reported with its index.
    pub fn new(
        features: Array2<f64>,
        labels: Labels,
        task: TaskKind,
        labeled_mask: Vec<bool>,
    ) -> Result<Self> {
        let n = features.nrows();
        if n == 0 {
            return Err(Error::InvalidValue("dataset has no instances".into()));
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows but {} labels",
                n,
                labels.len()
            )));
        }
        if labeled_mask.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows but labeled_mask of length {}",
                n,
                labeled_mask.len()
            )));
        }
        for (i, row) in features.outer_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "feature",
                    index: i,
                });
            }
        }
        match (&labels, task) {
            (Labels::Classes(ys), TaskKind::Classification { classes }) => {
                if classes < 2 {
                    return Err(Error::InvalidValue(format!(
                        "classification needs at least 2 classes, got {classes}"
                    )));
                }
                for (i, &y) in ys.iter().enumerate() {
                    if y >= classes {
                        return Err(Error::LabelOutOfRange {
                            index: i,
                            label: y,
                            classes,
                        });
                    }
                }
            }
            (Labels::Reals(ys), TaskKind::Regression) => {
                for (i, &y) in ys.iter().enumerate() {
                    if !y.is_finite() {
                        return Err(Error::NonFinite {
                            what: "label",
                            index: i,
                        });
                    }
                }
            }
            _ => {
                return Err(Error::InvalidValue(
                    "label storage does not match task kind".into(),
                ))
            }
        }
        Ok(Self {
            features,
            labels,
            task,
            labeled_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn labeled_mask(&self) -> &[bool] {
        &self.labeled_mask
    }

    /// Rebuild with different labels, keeping features/task/mask. Validates.
    pub fn with_labels(&self, labels: Labels) -> Result<Self> {
        Self::new(
            self.features.clone(),
            labels,
            self.task,
            self.labeled_mask.clone(),
        )
    }

    /// Rebuild with a different labeled mask. Validates.
    pub fn with_labeled_mask(&self, labeled_mask: Vec<bool>) -> Result<Self> {
        Self::new(
            self.features.clone(),
            self.labels.clone(),
            self.task,
            labeled_mask,
        )
    }

    /// Row subset (indices may repeat; multiset semantics).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidValue(format!(
                    "subset index {i} out of range for {} instances",
                    self.len()
                )));
            }
        }
        let features = ndarray::stack(
            ndarray::Axis(0),
            &indices
                .iter()
                .map(|&i| self.features.row(i))
                .collect::<Vec<_>>(),
        )
        .map_err(|e| Error::InvalidValue(format!("subset stack failed: {e}")))?;
        let labels = match &self.labels {
            Labels::Classes(v) => Labels::Classes(indices.iter().map(|&i| v[i]).collect()),
            Labels::Reals(v) => Labels::Reals(indices.iter().map(|&i| v[i]).collect()),
        };
        let mask = indices.iter().map(|&i| self.labeled_mask[i]).collect();
        Self::new(features, labels, self.task, mask)
    }
}

/// Ground truth recorded when noise or masking is injected synthetically.
/// Never visible to the optimizer; used only for evaluation.
#[derive(Debug, Clone)]
pub struct PlantedTruth {
    pub true_labels: Labels,
    pub corruption_mask: Vec<bool>,
}

impl PlantedTruth {
    pub fn new(true_labels: Labels, corruption_mask: Vec<bool>) -> Result<Self> {
        if true_labels.len() != corruption_mask.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} true labels but corruption mask of length {}",
                true_labels.len(),
                corruption_mask.len()
            )));
        }
        Ok(Self {
            true_labels,
            corruption_mask,
        })
    }

    /// Undo the recorded corruption: returns the dataset with original labels.
    pub fn restore(&self, corrupted: &WeakDataset) -> Result<WeakDataset> {
        corrupted.with_labels(self.true_labels.clone())
    }
}

/// Label transition quantity: a per-instance simplex row for classification,
/// an additive label shift for regression.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelTransition {
    Classification(Array2<f64>),
    Regression(Array1<f64>),
}

impl LabelTransition {
    pub fn rows(&self) -> usize {
        match self {
            LabelTransition::Classification(q) => q.nrows(),
            LabelTransition::Regression(q) => q.len(),
        }
    }

    pub fn as_classification(&self) -> Result<&Array2<f64>> {
        match self {
            LabelTransition::Classification(q) => Ok(q),
            LabelTransition::Regression(_) => Err(Error::InvalidValue(
                "expected classification transition matrix".into(),
            )),
        }
    }

    pub fn as_regression(&self) -> Result<&Array1<f64>> {
        match self {
            LabelTransition::Regression(q) => Ok(q),
            LabelTransition::Classification(_) => Err(Error::InvalidValue(
                "expected regression label shift".into(),
            )),
        }
    }

    /// Zero-valued transition of the same shape.
    pub fn zeros_like(&self) -> LabelTransition {
        match self {
            LabelTransition::Classification(q) => {
                LabelTransition::Classification(Array2::zeros(q.dim()))
            }
            LabelTransition::Regression(q) => {
                LabelTransition::Regression(Array1::zeros(q.len()))
            }
        }
    }
}

/// Tolerance on simplex row sums for classification transitions.
pub const ROW_SUM_TOL: f64 = 1e-8;

/// The decision variables of the upper-level problem: per-instance weights,
/// the label transition quantity, and a freeze mask marking instances that
/// are held fixed by the optimizer (semi-supervised labeled instances).
#[derive(Debug, Clone)]
pub struct LabelQualityParams {
    pub weights: Array1<f64>,
    pub transition: LabelTransition,
    pub frozen: Vec<bool>,
}

impl LabelQualityParams {
    pub fn new(
        weights: Array1<f64>,
        transition: LabelTransition,
        frozen: Vec<bool>,
    ) -> Result<Self> {
        let n = weights.len();
        if transition.rows() != n || frozen.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "weights {}, transition rows {}, frozen {}",
                n,
                transition.rows(),
                frozen.len()
            )));
        }
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() {
                return Err(Error::NonFinite {
                    what: "weight",
                    index: i,
                });
            }
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::InvalidValue(format!(
                    "weight {w} at index {i} outside [0, 1]"
                )));
            }
        }
        match &transition {
            LabelTransition::Classification(q) => {
                for (i, row) in q.outer_iter().enumerate() {
                    let mut sum = 0.0;
                    for &v in row.iter() {
                        if !v.is_finite() {
                            return Err(Error::NonFinite {
                                what: "transition entry",
                                index: i,
                            });
                        }
                        if v < 0.0 {
                            return Err(Error::InvalidValue(format!(
                                "negative transition entry {v} in row {i}"
                            )));
                        }
                        sum += v;
                    }
                    if (sum - 1.0).abs() > ROW_SUM_TOL {
                        return Err(Error::InvalidValue(format!(
                            "transition row {i} sums to {sum}, expected 1"
                        )));
                    }
                }
            }
            LabelTransition::Regression(q) => {
                for (i, &v) in q.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            what: "label shift",
                            index: i,
                        });
                    }
                }
            }
        }
        Ok(Self {
            weights,
            transition,
            frozen,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().filter(|&&f| f).count()
    }

    pub fn free_count(&self) -> usize {
        self.len() - self.frozen_count()
    }
}

/// Whether the data set is treated as noisy-label or semi-supervised.
/// Controls which instances the optimizer freezes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeakMode {
    /// Every label is present but possibly corrupted; nothing is frozen.
    NoisyLabels,
    /// Labeled instances are trusted and frozen; only unlabeled ones are optimized.
    SemiSupervised,
}

/// The recovery point: weights all one, transition reproducing the raw labels
/// (one-hot rows for classification, zero shift for regression). Training at
/// this point equals plain supervised training on the raw data.
///
/// In semi-supervised mode the labeled instances are frozen; in noisy-label
/// mode nothing is.
pub fn identity_params(data: &WeakDataset, mode: WeakMode) -> Result<LabelQualityParams> {
    let n = data.len();
    let weights = Array1::ones(n);
    let transition = match (data.labels(), data.task()) {
        (Labels::Classes(ys), TaskKind::Classification { classes }) => {
            let mut q = Array2::zeros((n, classes));
            for (i, &y) in ys.iter().enumerate() {
                q[(i, y)] = 1.0;
            }
            LabelTransition::Classification(q)
        }
        (Labels::Reals(_), TaskKind::Regression) => {
            LabelTransition::Regression(Array1::zeros(n))
        }
        _ => unreachable!("dataset constructor enforces label/task agreement"),
    };
    let frozen = match mode {
        WeakMode::NoisyLabels => vec![false; n],
        WeakMode::SemiSupervised => data.labeled_mask().to_vec(),
    };
    LabelQualityParams::new(weights, transition, frozen)
}

/// Feasible region for (weights, transition).
///
/// `weight_mass_floor` is the minimum l1 mass of the weight vector.
/// `shift_cap` bounds, for classification, the mean distance
/// `1 - Q[i, y_i]` over non-frozen instances; for regression, the l2 norm
/// of the non-frozen shift block.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FeasibleRegion {
    pub weight_mass_floor: f64,
    pub shift_cap: f64,
}

impl FeasibleRegion {
    pub fn validate(&self, n: usize, task: TaskKind) -> Result<()> {
        if !(self.weight_mass_floor.is_finite() && self.weight_mass_floor >= 0.0) {
            return Err(Error::InvalidValue(format!(
                "weight mass floor {} must be finite and nonnegative",
                self.weight_mass_floor
            )));
        }
        if self.weight_mass_floor > n as f64 {
            return Err(Error::Infeasible(format!(
                "weight mass floor {} exceeds instance count {n}",
                self.weight_mass_floor
            )));
        }
        if !(self.shift_cap.is_finite() && self.shift_cap >= 0.0) {
            return Err(Error::InvalidValue(format!(
                "shift cap {} must be finite and nonnegative",
                self.shift_cap
            )));
        }
        if matches!(task, TaskKind::Classification { .. }) && self.shift_cap > 1.0 {
            return Err(Error::InvalidValue(format!(
                "classification shift cap {} outside [0, 1]",
                self.shift_cap
            )));
        }
        Ok(())
    }

    /// Check whether `params` satisfies every constraint, within `tol`.
    pub fn contains(&self, params: &LabelQualityParams, data: &WeakDataset, tol: f64) -> bool {
        let in_box = params.weights.iter().all(|&w| (-tol..=1.0 + tol).contains(&w));
        let mass = params.weights.sum();
        if !in_box || mass < self.weight_mass_floor - tol {
            return false;
        }
        match &params.transition {
            LabelTransition::Classification(q) => {
                let ys = match data.labels().as_classes() {
                    Ok(ys) => ys,
                    Err(_) => return false,
                };
                let mut dist_sum = 0.0;
                let mut free = 0usize;
                for (i, row) in q.outer_iter().enumerate() {
                    if row.iter().any(|&v| v < -tol) {
                        return false;
                    }
                    if (row.sum() - 1.0).abs() > ROW_SUM_TOL.max(tol) {
                        return false;
                    }
                    if !params.frozen[i] {
                        dist_sum += 1.0 - row[ys[i]];
                        free += 1;
                    }
                }
                free == 0 || dist_sum / free as f64 <= self.shift_cap + tol
            }
            LabelTransition::Regression(q) => {
                let norm: f64 = q
                    .iter()
                    .zip(&params.frozen)
                    .filter(|(_, &f)| !f)
                    .map(|(&v, _)| v * v)
                    .sum::<f64>()
                    .sqrt();
                norm <= self.shift_cap + tol
            }
        }
    }
}

/// A clean validation set together with `m` bootstrap resamples of it and the
/// cached baseline losses used as safeness reference levels.
#[derive(Debug, Clone)]
pub struct ValidationEnsemble {
    base: WeakDataset,
    members: Vec<Vec<usize>>,
    baseline_losses: Option<Vec<f64>>,
}

impl ValidationEnsemble {
    pub fn new(base: WeakDataset, members: Vec<Vec<usize>>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidValue(
                "validation ensemble needs at least one member".into(),
            ));
        }
        let n_v = base.len();
        for (m, idx) in members.iter().enumerate() {
            if idx.len() != n_v {
                return Err(Error::DimensionMismatch(format!(
                    "member {m} has {} indices, base set has {n_v}",
                    idx.len()
                )));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= n_v) {
                return Err(Error::InvalidValue(format!(
                    "member {m} index {bad} out of range 0..{n_v}"
                )));
            }
        }
        Ok(Self {
            base,
            members,
            baseline_losses: None,
        })
    }

    pub fn base(&self) -> &WeakDataset {
        &self.base
    }

    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn baseline_losses(&self) -> Option<&[f64]> {
        self.baseline_losses.as_deref()
    }

    pub fn set_baseline_losses(&mut self, losses: Vec<f64>) -> Result<()> {
        if losses.len() != self.members.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} baseline losses for {} members",
                losses.len(),
                self.members.len()
            )));
        }
        if let Some(i) = losses.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "baseline loss",
                index: i,
            });
        }
        self.baseline_losses = Some(losses);
        Ok(())
    }
}

/// Model family for the lower-level learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    LinearRegression,
    SoftmaxRegression,
    TwoLayerMlp { hidden: usize },
}

/// A small differentiable model family and its shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub input_dim: usize,
    pub output_dim: usize,
    pub l2_reg: f64,
}

impl ModelSpec {
    pub fn new(family: ModelFamily, input_dim: usize, output_dim: usize, l2_reg: f64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidValue("input dimension must be positive".into()));
        }
        match family {
            ModelFamily::LinearRegression => {
                if output_dim != 1 {
                    return Err(Error::InvalidValue(
                        "linear regression has scalar output".into(),
                    ));
                }
            }
            ModelFamily::SoftmaxRegression => {
                if output_dim < 2 {
                    return Err(Error::InvalidValue(
                        "softmax regression needs at least 2 classes".into(),
                    ));
                }
            }
            ModelFamily::TwoLayerMlp { hidden } => {
                if hidden == 0 {
                    return Err(Error::InvalidValue("MLP needs at least 1 hidden unit".into()));
                }
                if output_dim == 0 {
                    return Err(Error::InvalidValue("output dimension must be positive".into()));
                }
            }
        }
        if !(l2_reg.is_finite() && l2_reg >= 0.0) {
            return Err(Error::InvalidValue(format!(
                "l2 regularization {l2_reg} must be finite and nonnegative"
            )));
        }
        Ok(Self {
            family,
            input_dim,
            output_dim,
            l2_reg,
        })
    }

    /// Flat parameter count.
    pub fn param_count(&self) -> usize {
        match self.family {
            ModelFamily::LinearRegression => self.input_dim,
            ModelFamily::SoftmaxRegression => self.input_dim * self.output_dim,
            ModelFamily::TwoLayerMlp { hidden } => {
                self.input_dim * hidden + hidden + hidden * self.output_dim + self.output_dim
            }
        }
    }

    /// Convex families admit the implicit-differentiation path.
    pub fn is_convex(&self) -> bool {
        !matches!(self.family, ModelFamily::TwoLayerMlp { .. })
    }

    pub fn matches_task(&self, task: TaskKind) -> bool {
        match task {
            TaskKind::Classification { classes } => {
                self.output_dim == classes
                    && !matches!(self.family, ModelFamily::LinearRegression)
            }
            TaskKind::Regression => {
                self.output_dim == 1 && !matches!(self.family, ModelFamily::SoftmaxRegression)
            }
        }
    }
}

/// Flat model parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub values: Array1<f64>,
}

impl ModelParams {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "model parameter",
                index: i,
            });
        }
        Ok(Self { values })
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            values: Array1::zeros(spec.param_count()),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// How the safeness penalty treats the worst validation gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafenessMode {
    /// Penalize only positive gaps: max(0, max_i(loss_i - c_i)). Default.
    Hinge,
    /// The raw worst gap max_i(loss_i - c_i), which also rewards pushing the
    /// best member below its reference level.
    Literal,
}

/// Settings for the matrix-free conjugate gradient solver.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct CgSettings {
    /// Defaults to twice the system dimension when absent.
    pub max_iters: Option<usize>,
    pub tol: f64,
}

impl Default for CgSettings {
    fn default() -> Self {
        Self {
            max_iters: None,
            tol: 1e-8,
        }
    }
}

/// Upper-level Adam settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Full optimizer configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PgsConfig {
    /// Safeness penalty weight.
    pub safeness_weight: f64,
    pub safeness_mode: SafenessMode,
    pub weak_mode: WeakMode,
    /// Lower-level iterations T (unrolled path).
    pub lower_iters: usize,
    /// Upper-level iterations L.
    pub upper_iters: usize,
    /// Lower-level gradient descent step.
    pub lower_step: f64,
    pub upper: AdamConfig,
    pub cg: CgSettings,
    pub seed: u64,
}

impl Default for PgsConfig {
    fn default() -> Self {
        Self {
            safeness_weight: 1.0,
            safeness_mode: SafenessMode::Hinge,
            weak_mode: WeakMode::NoisyLabels,
            lower_iters: 500,
            upper_iters: 20,
            lower_step: 0.1,
            upper: AdamConfig::default(),
            cg: CgSettings::default(),
            seed: 0,
        }
    }
}

impl PgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lower_iters == 0 {
            return Err(Error::InvalidValue("lower_iters must be at least 1".into()));
        }
        // upper_iters == 0 is allowed as a degenerate run that reports the
        // baseline state unchanged.
        if !(self.lower_step.is_finite() && self.lower_step > 0.0) {
            return Err(Error::InvalidValue(format!(
                "lower_step {} must be positive",
                self.lower_step
            )));
        }
        if !(self.safeness_weight.is_finite() && self.safeness_weight >= 0.0) {
            return Err(Error::InvalidValue(format!(
                "safeness_weight {} must be nonnegative",
                self.safeness_weight
            )));
        }
        Ok(())
    }
}
