//! Synthetic data generators: a mixture of class Gaussians for
//! classification and a linear model for regression. Generator parameters
//! are echoed into run reports by the experiment driver.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::inject::normal_vector;
use crate::error::{Error, Result};
use crate::types::{Labels, TaskKind, WeakDataset};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SyntheticClassConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub dim: usize,
    pub classes: usize,
    /// Pairwise distance between class means (unit isotropic noise).
    pub separation: f64,
}

/// Gaussian mixture with `classes` components at pairwise distance
/// `separation`: component `c` sits at `(separation / sqrt(2)) * e_c`.
/// Labels are balanced, then shuffled.
pub fn synthetic_classification(
    cfg: &SyntheticClassConfig,
    seed: u64,
) -> Result<(WeakDataset, WeakDataset, WeakDataset)> {
    if cfg.classes < 2 {
        return Err(Error::InvalidValue("need at least 2 classes".into()));
    }
    if cfg.dim < cfg.classes {
        return Err(Error::InvalidValue(format!(
            "dimension {} too small for {} axis-aligned class means",
            cfg.dim, cfg.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = cfg.separation / std::f64::consts::SQRT_2;
    let make = |n: usize, rng: &mut ChaCha8Rng| -> Result<WeakDataset> {
        let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
        labels.shuffle(rng);
        let mut features = Array2::zeros((n, cfg.dim));
        for (i, &y) in labels.iter().enumerate() {
            let noise = normal_vector(cfg.dim, rng);
            for j in 0..cfg.dim {
                features[(i, j)] = noise[j] + if j == y { scale } else { 0.0 };
            }
        }
        WeakDataset::new(
            features,
            Labels::Classes(labels),
            TaskKind::Classification {
                classes: cfg.classes,
            },
            vec![true; n],
        )
    };
    let train = make(cfg.n_train, &mut rng)?;
    let val = make(cfg.n_val, &mut rng)?;
    let test = make(cfg.n_test, &mut rng)?;
    Ok((train, val, test))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SyntheticRegConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub dim: usize,
    /// Standard deviation of irreducible observation noise.
    pub observation_noise: f64,
}

/// Linear data `y = x . beta + observation_noise * N(0,1)` with standard
/// normal features and a seeded coefficient vector of unit expected norm.
pub fn synthetic_regression(
    cfg: &SyntheticRegConfig,
    seed: u64,
) -> Result<(WeakDataset, WeakDataset, WeakDataset)> {
    if cfg.dim == 0 {
        return Err(Error::InvalidValue("dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = normal_vector(cfg.dim, &mut rng) / (cfg.dim as f64).sqrt();
    let make = |n: usize, rng: &mut ChaCha8Rng| -> Result<WeakDataset> {
        let mut features = Array2::zeros((n, cfg.dim));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let x = normal_vector(cfg.dim, rng);
            let noise: f64 = if cfg.observation_noise > 0.0 {
                cfg.observation_noise * normal_vector(1, rng)[0]
            } else {
                0.0
            };
            labels.push(x.dot(&beta) + noise);
            for j in 0..cfg.dim {
                features[(i, j)] = x[j];
            }
        }
        WeakDataset::new(features, Labels::Reals(labels), TaskKind::Regression, vec![true; n])
    };
    let train = make(cfg.n_train, &mut rng)?;
    let val = make(cfg.n_val, &mut rng)?;
    let test = make(cfg.n_test, &mut rng)?;
    Ok((train, val, test))
}

/// Stack two datasets of identical shape and task.
pub fn concat_datasets(a: &WeakDataset, b: &WeakDataset) -> Result<WeakDataset> {
    if a.dim() != b.dim() || a.task() != b.task() {
        return Err(Error::DimensionMismatch(
            "cannot concatenate datasets with different shapes or tasks".into(),
        ));
    }
    let features = ndarray::concatenate(
        ndarray::Axis(0),
        &[a.features().view(), b.features().view()],
    )
    .map_err(|e| Error::DimensionMismatch(format!("feature stack failed: {e}")))?;
    let labels = match (a.labels(), b.labels()) {
        (Labels::Classes(x), Labels::Classes(y)) => {
            Labels::Classes(x.iter().chain(y.iter()).cloned().collect())
        }
        (Labels::Reals(x), Labels::Reals(y)) => {
            Labels::Reals(x.iter().chain(y.iter()).cloned().collect())
        }
        _ => unreachable!("task equality checked above"),
    };
    let mask: Vec<bool> = a
        .labeled_mask()
        .iter()
        .chain(b.labeled_mask().iter())
        .cloned()
        .collect();
    WeakDataset::new(features, labels, a.task(), mask)
}

/// Keep only instances with a trusted label.
pub fn labeled_subset(d: &WeakDataset) -> Result<WeakDataset> {
    let keep: Vec<usize> = (0..d.len()).filter(|&i| d.labeled_mask()[i]).collect();
    if keep.is_empty() {
        return Err(Error::InvalidValue("no labeled instances".into()));
    }
    d.subset(&keep)
}

/// Seeded subsample of `count` instances without replacement.
pub fn subsample(d: &WeakDataset, count: usize, seed: u64) -> Result<WeakDataset> {
    if count == 0 || count > d.len() {
        return Err(Error::InvalidValue(format!(
            "subsample of {count} from {} instances",
            d.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut rng);
    let mut keep: Vec<usize> = order.into_iter().take(count).collect();
    keep.sort_unstable();
    d.subset(&keep)
}
