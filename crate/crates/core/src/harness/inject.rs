//! Weak-supervision injectors: label flipping, additive noise, masking,
//! bootstrap resampling and validation biasing. Every injector is seeded and
//! records enough ground truth to restore the clean dataset exactly.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::types::{Labels, PlantedTruth, TaskKind, ValidationEnsemble, WeakDataset};

fn choose_indices(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut mask = vec![false; n];
    for &i in order.iter().take(count) {
        mask[i] = true;
    }
    mask
}

/// Flip the labels of exactly `round(ratio * n)` uniformly chosen instances
/// to a uniformly chosen OTHER class. Returns the corrupted dataset and the
/// planted truth.
pub fn inject_uniform_flip(
    data: &WeakDataset,
    ratio: f64,
    seed: u64,
) -> Result<(WeakDataset, PlantedTruth)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidValue(format!(
            "flip ratio {ratio} outside [0, 1]"
        )));
    }
    let classes = match data.task() {
        TaskKind::Classification { classes } => classes,
        TaskKind::Regression => {
            return Err(Error::InvalidValue(
                "uniform flip noise applies to classification".into(),
            ))
        }
    };
    let originals = data.labels().as_classes()?.to_vec();
    let n = data.len();
    let count = (ratio * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = choose_indices(n, count, &mut rng);
    let mut flipped = originals.clone();
    for i in 0..n {
        if mask[i] {
            // uniform over the other classes; never the original label
            let draw = rng.gen_range(0..classes - 1);
            flipped[i] = if draw >= originals[i] { draw + 1 } else { draw };
        }
    }
    let corrupted = data.with_labels(Labels::Classes(flipped))?;
    let truth = PlantedTruth::new(Labels::Classes(originals), mask)?;
    Ok((corrupted, truth))
}

/// Add `N(0, sigma^2)` noise to the labels of `round(fraction * n)` chosen
/// instances (`fraction = 1` touches every label).
pub fn inject_gauss_noise(
    data: &WeakDataset,
    sigma: f64,
    fraction: f64,
    seed: u64,
) -> Result<(WeakDataset, PlantedTruth)> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidValue(format!(
            "noise level {sigma} must be nonnegative"
        )));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidValue(format!(
            "noise fraction {fraction} outside [0, 1]"
        )));
    }
    let originals = data.labels().as_reals()?.to_vec();
    let n = data.len();
    let count = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = choose_indices(n, count, &mut rng);
    let mut noisy = originals.clone();
    for i in 0..n {
        if mask[i] {
            let z: f64 = StandardNormal.sample(&mut rng);
            noisy[i] += sigma * z;
        }
    }
    let corrupted = data.with_labels(Labels::Reals(noisy))?;
    let truth = PlantedTruth::new(Labels::Reals(originals), mask)?;
    Ok((corrupted, truth))
}

/// Mark `round(fraction * n)` instances as labeled. Classification picks them
/// stratified by class (per-class counts proportional within one); regression
/// picks uniformly.
pub fn mask_labels(data: &WeakDataset, fraction: f64, seed: u64) -> Result<WeakDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidValue(format!(
            "labeled fraction {fraction} outside (0, 1]"
        )));
    }
    let n = data.len();
    let target = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; n];
    match data.labels() {
        Labels::Classes(ys) => {
            let classes = data.task().classes().expect("classification task");
            let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
            for (i, &y) in ys.iter().enumerate() {
                per_class[y].push(i);
            }
            let exact: Vec<f64> = per_class
                .iter()
                .map(|idx| fraction * idx.len() as f64)
                .collect();
            let mut take: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
            let mut remainder = target.saturating_sub(take.iter().sum::<usize>());
            // hand the leftovers to the classes with the largest fractional parts
            let mut order: Vec<usize> = (0..classes).collect();
            order.sort_by(|&a, &b| {
                let fa = exact[a] - exact[a].floor();
                let fb = exact[b] - exact[b].floor();
                fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
            });
            for &c in order.iter().cycle().take(classes * 2) {
                if remainder == 0 {
                    break;
                }
                if take[c] < per_class[c].len() {
                    take[c] += 1;
                    remainder -= 1;
                }
            }
            for (c, idx) in per_class.iter().enumerate() {
                let mut pool = idx.clone();
                pool.shuffle(&mut rng);
                for &i in pool.iter().take(take[c]) {
                    mask[i] = true;
                }
            }
        }
        Labels::Reals(_) => {
            mask = choose_indices(n, target, &mut rng);
        }
    }
    data.with_labeled_mask(mask)
}

/// Replace the labels of unlabeled instances with placeholders so the raw
/// labels carry no information the optimizer could exploit: a uniform class
/// draw for classification, zero for regression. The planted truth records
/// the hidden originals.
pub fn scramble_unlabeled(
    data: &WeakDataset,
    seed: u64,
) -> Result<(WeakDataset, PlantedTruth)> {
    let n = data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corruption: Vec<bool> = data.labeled_mask().iter().map(|&l| !l).collect();
    let (scrambled, truth_labels) = match data.labels() {
        Labels::Classes(ys) => {
            let classes = data.task().classes().expect("classification task");
            let mut out = ys.clone();
            for i in 0..n {
                if corruption[i] {
                    out[i] = rng.gen_range(0..classes);
                }
            }
            (Labels::Classes(out), Labels::Classes(ys.clone()))
        }
        Labels::Reals(ys) => {
            let mut out = ys.clone();
            for i in 0..n {
                if corruption[i] {
                    out[i] = 0.0;
                }
            }
            (Labels::Reals(out), Labels::Reals(ys.clone()))
        }
    };
    let scrambled = data.with_labels(scrambled)?;
    let truth = PlantedTruth::new(truth_labels, corruption)?;
    Ok((scrambled, truth))
}

/// Bootstrap `m` index lists of length `n_v`, sampled with replacement.
/// Baseline losses stay unset until the baseline model is trained.
pub fn make_ensemble(val: WeakDataset, m: usize, seed: u64) -> Result<ValidationEnsemble> {
    if m == 0 {
        return Err(Error::InvalidValue(
            "ensemble needs at least one member".into(),
        ));
    }
    let n_v = val.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let members: Vec<Vec<usize>> = (0..m)
        .map(|_| (0..n_v).map(|_| rng.gen_range(0..n_v)).collect())
        .collect();
    ValidationEnsemble::new(val, members)
}

/// Subsample a validation set so the sizes of two class groups follow the
/// target ratio, keeping the largest feasible total. `group_a[c]` marks the
/// classes of the first group.
pub fn bias_validation(
    val: &WeakDataset,
    group_a: &[bool],
    ratio: (u32, u32),
    seed: u64,
) -> Result<WeakDataset> {
    let classes = val.task().classes().ok_or_else(|| {
        Error::InvalidValue("validation biasing applies to classification".into())
    })?;
    if group_a.len() != classes {
        return Err(Error::DimensionMismatch(format!(
            "{} group flags for {classes} classes",
            group_a.len()
        )));
    }
    if ratio.0 == 0 || ratio.1 == 0 {
        return Err(Error::InvalidValue("ratio parts must be positive".into()));
    }
    if group_a.iter().all(|&g| g) || group_a.iter().all(|&g| !g) {
        return Err(Error::InvalidValue(
            "groups must partition the classes non-trivially".into(),
        ));
    }
    let ys = val.labels().as_classes()?;
    let mut a_indices: Vec<usize> = Vec::new();
    let mut b_indices: Vec<usize> = Vec::new();
    for (i, &y) in ys.iter().enumerate() {
        if group_a[y] {
            a_indices.push(i);
        } else {
            b_indices.push(i);
        }
    }
    let t = (a_indices.len() / ratio.0 as usize).min(b_indices.len() / ratio.1 as usize);
    if t == 0 {
        return Err(Error::InvalidValue(
            "target ratio infeasible: one group would be empty".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    a_indices.shuffle(&mut rng);
    b_indices.shuffle(&mut rng);
    let mut keep: Vec<usize> = a_indices
        .into_iter()
        .take(t * ratio.0 as usize)
        .chain(b_indices.into_iter().take(t * ratio.1 as usize))
        .collect();
    keep.sort_unstable();
    val.subset(&keep)
}

/// Standard-normal feature helper shared by the generators.
pub(crate) fn normal_vector(len: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| StandardNormal.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::random_dataset;
    use ndarray::Array2;
    use rand::SeedableRng;

    fn class_data(n: usize, k: usize, seed: u64) -> WeakDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_dataset(&mut rng, n, 3, TaskKind::Classification { classes: k })
    }

    #[test]
    fn zero_ratio_changes_nothing() {
        let d = class_data(10, 3, 1);
        let (noisy, truth) = inject_uniform_flip(&d, 0.0, 7).unwrap();
        assert_eq!(noisy.labels(), d.labels());
        assert!(truth.corruption_mask.iter().all(|&c| !c));
    }

    #[test]
    fn full_ratio_binary_flips_everything() {
        let d = class_data(10, 2, 2);
        let (noisy, truth) = inject_uniform_flip(&d, 1.0, 7).unwrap();
        let before = d.labels().as_classes().unwrap();
        let after = noisy.labels().as_classes().unwrap();
        for i in 0..10 {
            assert_ne!(before[i], after[i]);
            assert!(truth.corruption_mask[i]);
        }
    }

    #[test]
    fn half_ratio_flips_exactly_half_to_other_classes() {
        let d = class_data(21, 4, 3);
        let (noisy, truth) = inject_uniform_flip(&d, 0.5, 11).unwrap();
        let flipped = truth.corruption_mask.iter().filter(|&&c| c).count();
        assert_eq!(flipped, (0.5f64 * 21.0).round() as usize);
        let before = d.labels().as_classes().unwrap();
        let after = noisy.labels().as_classes().unwrap();
        for i in 0..21 {
            if truth.corruption_mask[i] {
                assert_ne!(before[i], after[i], "instance {i} flipped to itself");
            } else {
                assert_eq!(before[i], after[i]);
            }
        }
        // seeded replay
        let (replay, _) = inject_uniform_flip(&d, 0.5, 11).unwrap();
        assert_eq!(replay.labels(), noisy.labels());
    }

    #[test]
    fn injectors_restore_exactly() {
        let d = class_data(15, 3, 4);
        let (noisy, truth) = inject_uniform_flip(&d, 0.4, 5).unwrap();
        let restored = truth.restore(&noisy).unwrap();
        assert_eq!(restored.labels(), d.labels());

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = random_dataset(&mut rng, 12, 2, TaskKind::Regression);
        let (noisy, truth) = inject_gauss_noise(&r, 0.5, 1.0, 9).unwrap();
        let restored = truth.restore(&noisy).unwrap();
        assert_eq!(restored.labels(), r.labels());
    }

    #[test]
    fn gauss_noise_zero_sigma_keeps_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = random_dataset(&mut rng, 9, 2, TaskKind::Regression);
        let (noisy, truth) = inject_gauss_noise(&r, 0.0, 1.0, 3).unwrap();
        assert_eq!(noisy.labels(), r.labels());
        assert!(truth.corruption_mask.iter().all(|&c| c));
    }

    #[test]
    fn gauss_noise_mean_is_statistically_zero() {
        let n = 10_000;
        let features = Array2::zeros((n, 1));
        let d = WeakDataset::new(
            features,
            Labels::Reals(vec![0.0; n]),
            TaskKind::Regression,
            vec![true; n],
        )
        .unwrap();
        let sigma = 0.7;
        let (noisy, truth) = inject_gauss_noise(&d, sigma, 1.0, 17).unwrap();
        let clean = truth.true_labels.as_reals().unwrap();
        let dirty = noisy.labels().as_reals().unwrap();
        let mean: f64 =
            (0..n).map(|i| dirty[i] - clean[i]).sum::<f64>() / n as f64;
        let bound = 4.0 * sigma / (n as f64).sqrt();
        assert!(mean.abs() < bound, "sample mean {mean} vs bound {bound}");
    }

    #[test]
    fn gauss_noise_fraction_selects_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let r = random_dataset(&mut rng, 20, 2, TaskKind::Regression);
        let (_, truth) = inject_gauss_noise(&r, 0.3, 0.5, 4).unwrap();
        assert_eq!(truth.corruption_mask.iter().filter(|&&c| c).count(), 10);
    }

    #[test]
    fn mask_full_fraction_labels_everything() {
        let d = class_data(10, 2, 12);
        let masked = mask_labels(&d, 1.0, 1).unwrap();
        assert!(masked.labeled_mask().iter().all(|&l| l));
    }

    #[test]
    fn mask_is_stratified_within_one() {
        let d = class_data(50, 3, 13);
        let masked = mask_labels(&d, 0.4, 2).unwrap();
        let ys = d.labels().as_classes().unwrap();
        for c in 0..3 {
            let total = ys.iter().filter(|&&y| y == c).count();
            let labeled = ys
                .iter()
                .zip(masked.labeled_mask())
                .filter(|(&y, &l)| y == c && l)
                .count();
            let exact = 0.4 * total as f64;
            assert!(
                (labeled as f64 - exact).abs() <= 1.0 + 1e-9,
                "class {c}: {labeled} labeled of {total}"
            );
        }
        let replay = mask_labels(&d, 0.4, 2).unwrap();
        assert_eq!(replay.labeled_mask(), masked.labeled_mask());
    }

    #[test]
    fn scramble_hides_only_unlabeled() {
        let d = class_data(12, 3, 14);
        let masked = mask_labels(&d, 0.5, 3).unwrap();
        let (scrambled, truth) = scramble_unlabeled(&masked, 4).unwrap();
        let before = masked.labels().as_classes().unwrap();
        let after = scrambled.labels().as_classes().unwrap();
        for i in 0..12 {
            if masked.labeled_mask()[i] {
                assert_eq!(before[i], after[i]);
                assert!(!truth.corruption_mask[i]);
            } else {
                assert!(truth.corruption_mask[i]);
            }
        }
        assert_eq!(truth.restore(&scrambled).unwrap().labels(), masked.labels());
    }

    #[test]
    fn singleton_ensemble() {
        let d = class_data(1, 2, 15);
        let e = make_ensemble(d, 1, 0).unwrap();
        assert_eq!(e.members(), &[vec![0usize]]);
    }

    #[test]
    fn bootstrap_members_contain_duplicates_across_seeds() {
        let d = class_data(8, 2, 16);
        let mut saw_duplicate = false;
        for seed in 0..100 {
            let e = make_ensemble(d.clone(), 3, seed).unwrap();
            for member in e.members() {
                let mut sorted = member.clone();
                sorted.sort_unstable();
                if sorted.windows(2).any(|w| w[0] == w[1]) {
                    saw_duplicate = true;
                }
            }
        }
        assert!(saw_duplicate, "no duplicate index in 100 seeded bootstraps");
    }

    #[test]
    fn ensemble_replay_is_deterministic() {
        let d = class_data(10, 2, 17);
        let a = make_ensemble(d.clone(), 3, 42).unwrap();
        let b = make_ensemble(d, 3, 42).unwrap();
        assert_eq!(a.members(), b.members());
    }

    #[test]
    fn bias_hits_requested_ratio() {
        // 40 instances of class 0/1 each; shift group sizes to 1:3
        let mut features = Vec::new();
        let mut ys = Vec::new();
        for i in 0..80 {
            features.push([i as f64, 0.0]);
            ys.push(i % 2);
        }
        let d = WeakDataset::new(
            Array2::from_shape_vec((80, 2), features.concat().to_vec()).unwrap(),
            Labels::Classes(ys),
            TaskKind::Classification { classes: 2 },
            vec![true; 80],
        )
        .unwrap();
        let biased = bias_validation(&d, &[true, false], (1, 3), 5).unwrap();
        let ys = biased.labels().as_classes().unwrap();
        let a = ys.iter().filter(|&&y| y == 0).count();
        let b = ys.iter().filter(|&&y| y == 1).count();
        assert_eq!(a, 13); // min(40/1, 40/3) = 13
        assert_eq!(b, 39);
        // balanced request keeps everything (up to rounding)
        let balanced = bias_validation(&d, &[true, false], (1, 1), 5).unwrap();
        assert_eq!(balanced.len(), 80);
    }

    #[test]
    fn bias_requires_nontrivial_groups() {
        let d = class_data(10, 2, 18);
        assert!(bias_validation(&d, &[true, true], (1, 3), 0).is_err());
    }
}
