//! Task metrics, uncertainty-quality metrics and query-composition analysis.

use crate::dataset::LOC_DIM;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One evaluation row of a query step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub labeled: usize,
    pub accuracy: f64,
    pub loc_mse: f64,
    /// Unweighted mean over non-empty bins.
    pub calibration_error: f64,
    /// Count-weighted mean over bins.
    pub calibration_error_weighted: f64,
    pub error_sum: f64,
    /// Per-class counts of the samples queried at this step (all zero at step 0).
    pub queried: Vec<usize>,
    /// Seconds spent on the step. Not part of any reproducible output.
    pub wall_time: f64,
}

/// Predicted class per row; ties go to the lower class index.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Contract("accuracy of an empty set".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Mean over masked samples and the four components of the squared error.
pub fn loc_mse(pred: &Tensor, truth: &Tensor, mask: &[bool]) -> Result<f64> {
    let n = mask.len();
    if pred.shape() != [n, LOC_DIM] || truth.shape() != [n, LOC_DIM] {
        return Err(Error::Dimension(format!(
            "location shapes {:?} / {:?} for {n} samples",
            pred.shape(),
            truth.shape()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            for (a, b) in pred.row(i).iter().zip(truth.row(i)) {
                sum += (a - b) * (a - b);
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Contract("no sample carries a location target".into()));
    }
    Ok(sum / (count * LOC_DIM) as f64)
}

/// Which probability is binned.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Confidence {
    /// Probability of the predicted class, one entry per sample.
    #[default]
    Argmax,
    /// Every class probability, one entry per (sample, class); correct when the class is the
    /// true one.
    PerClass,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationCurve {
    /// `bins + 1` equally spaced edges from 0 to 1.
    pub edges: Vec<f64>,
    /// Mean confidence per bin (0 for empty bins).
    pub mean_confidence: Vec<f64>,
    /// Fraction correct per bin (0 for empty bins).
    pub accuracy: Vec<f64>,
    pub counts: Vec<usize>,
    pub error: f64,
    pub weighted_error: f64,
}

impl CalibrationCurve {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }
}

pub fn calibration(probs: &Tensor, truth: &[usize], bins: usize, mode: Confidence) -> Result<CalibrationCurve> {
    if bins < 2 {
        return Err(Error::Config(format!("calibration needs at least 2 bins, got {bins}")));
    }
    if probs.rank() != 2 || probs.rows() != truth.len() {
        return Err(Error::Dimension(format!(
            "probabilities {:?} for {} labels",
            probs.shape(),
            truth.len()
        )));
    }
    let mut pairs: Vec<(f64, bool)> = Vec::new();
    match mode {
        Confidence::Argmax => {
            for (i, &c) in argmax_rows(probs).iter().enumerate() {
                pairs.push((probs.get2(i, c), c == truth[i]));
            }
        }
        Confidence::PerClass => {
            for (i, &t) in truth.iter().enumerate() {
                for (c, &p) in probs.row(i).iter().enumerate() {
                    pairs.push((p, c == t));
                }
            }
        }
    }
    Ok(calibration_from_pairs(&pairs, bins))
}

/// Bins `(confidence, correct)` pairs.
pub fn calibration_from_pairs(pairs: &[(f64, bool)], bins: usize) -> CalibrationCurve {
    let mut conf_sum = vec![0.0; bins];
    let mut hit = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    for &(p, ok) in pairs {
        let b = ((p * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        conf_sum[b] += p;
        hit[b] += ok as usize;
        counts[b] += 1;
    }
    let mut mean_confidence = vec![0.0; bins];
    let mut acc = vec![0.0; bins];
    let (mut dev, mut nonempty, mut weighted) = (0.0, 0usize, 0.0);
    for b in 0..bins {
        if counts[b] == 0 {
            continue;
        }
        mean_confidence[b] = conf_sum[b] / counts[b] as f64;
        acc[b] = hit[b] as f64 / counts[b] as f64;
        let d = (acc[b] - mean_confidence[b]).abs();
        dev += d;
        weighted += d * counts[b] as f64;
        nonempty += 1;
    }
    let total = pairs.len();
    CalibrationCurve {
        edges: (0..=bins).map(|b| b as f64 / bins as f64).collect(),
        mean_confidence,
        accuracy: acc,
        counts,
        error: if nonempty == 0 { 0.0 } else { dev / nonempty as f64 },
        weighted_error: if total == 0 { 0.0 } else { weighted / total as f64 },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorCurve {
    /// Retained fractions, from 1 downwards.
    pub fractions: Vec<f64>,
    /// Mean loss of the retained samples at each fraction.
    pub mean_loss: Vec<f64>,
    /// Ordered by loss rather than by the method's uncertainty.
    pub oracle: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sparsification {
    pub method: ErrorCurve,
    pub oracle: ErrorCurve,
    pub error_sum: f64,
}

/// Number of samples retained at grid point `j` of `steps`.
pub fn retained_count(n: usize, steps: usize, j: usize) -> usize {
    n - j * n / steps
}

/// Indices ordered for removal: highest key first, ties by lower index.
fn removal_order(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    idx
}

/// Mean of a multiset, as `min + sum(x - min) / k` in ascending order: it depends only on the
/// multiset, and equal values give back that value exactly.
fn multiset_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let lo = values[0];
    lo + values.iter().map(|v| v - lo).sum::<f64>() / values.len() as f64
}

fn error_curve(losses: &[f64], keys: &[f64], steps: usize, oracle: bool) -> ErrorCurve {
    let n = losses.len();
    let order = removal_order(keys);
    let mut fractions = Vec::with_capacity(steps);
    let mut mean_loss = Vec::with_capacity(steps);
    for j in 0..steps {
        let keep = retained_count(n, steps, j);
        let mut kept: Vec<f64> = order[n - keep..].iter().map(|&i| losses[i]).collect();
        fractions.push(1.0 - j as f64 / steps as f64);
        mean_loss.push(multiset_mean(&mut kept));
    }
    ErrorCurve {
        fractions,
        mean_loss,
        oracle,
    }
}

/// Error curves obtained by dropping the most uncertain (method) or highest-loss (oracle)
/// samples in `steps` equal fractions, and the mean absolute gap between them.
pub fn sparsification(losses: &[f64], uncertainties: &[f64], steps: usize) -> Result<Sparsification> {
    if losses.len() != uncertainties.len() {
        return Err(Error::Dimension(format!(
            "{} losses for {} uncertainties",
            losses.len(),
            uncertainties.len()
        )));
    }
    if steps < 2 {
        return Err(Error::Config(format!("sparsification needs at least 2 steps, got {steps}")));
    }
    if losses.len() < steps {
        return Err(Error::Contract(format!(
            "{} samples cannot fill a {steps}-step grid",
            losses.len()
        )));
    }
    let method = error_curve(losses, uncertainties, steps, false);
    let oracle = error_curve(losses, losses, steps, true);
    let gap: f64 = method
        .mean_loss
        .iter()
        .zip(&oracle.mean_loss)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(Sparsification {
        error_sum: gap / steps as f64,
        method,
        oracle,
    })
}

/// Per-sample cross-entropy `-ln p(true class)`.
pub fn cross_entropy_per_sample(probs: &Tensor, truth: &[usize]) -> Result<Vec<f64>> {
    if probs.rows() != truth.len() {
        return Err(Error::Dimension(format!("{} rows for {} labels", probs.rows(), truth.len())));
    }
    Ok(truth
        .iter()
        .enumerate()
        .map(|(i, &t)| -probs.get2(i, t).max(f64::MIN_POSITIVE).ln())
        .collect())
}

/// Per-step class counts of a query log.
pub fn class_counts_per_step(steps: &[Vec<usize>], labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    steps
        .iter()
        .map(|idx| {
            let mut c = vec![0; classes];
            for &i in idx {
                c[labels[i]] += 1;
            }
            c
        })
        .collect()
}

/// `(cumulative AL - cumulative baseline) / pool count` per step and class.
///
/// Inputs are per-step (not cumulative) queried class counts.
pub fn class_distribution_delta(
    al: &[Vec<usize>],
    baseline: &[Vec<usize>],
    pool_counts: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if al.len() != baseline.len() {
        return Err(Error::Contract(format!(
            "query logs cover {} and {} steps",
            al.len(),
            baseline.len()
        )));
    }
    let c = pool_counts.len();
    if pool_counts.contains(&0) {
        return Err(Error::Contract("pool class counts must be positive".into()));
    }
    if al.iter().chain(baseline).any(|s| s.len() != c) {
        return Err(Error::Dimension(format!("class counts must have {c} entries")));
    }
    let mut cum_a = vec![0i64; c];
    let mut cum_b = vec![0i64; c];
    Ok(al
        .iter()
        .zip(baseline)
        .map(|(a, b)| {
            (0..c)
                .map(|k| {
                    cum_a[k] += a[k] as i64;
                    cum_b[k] += b[k] as i64;
                    (cum_a[k] - cum_b[k]) as f64 / pool_counts[k] as f64
                })
                .collect()
        })
        .collect())
}

/// One learning-curve sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub labeled: usize,
    pub accuracy: f64,
    pub loc_mse: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// `|acc_full - acc|`
    Classification,
    /// `|mse - mse_full| / mse_full`
    Localization,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Localization => "localization",
        }
    }
}

/// Metrics of the model trained on the whole pool.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reference {
    pub accuracy: f64,
    pub loc_mse: f64,
}

pub fn relative_error(task: Task, p: &CurvePoint, reference: &Reference) -> Result<f64> {
    match task {
        Task::Classification => Ok((reference.accuracy - p.accuracy).abs()),
        Task::Localization => {
            if !(reference.loc_mse > 0.0) {
                return Err(Error::Numeric("reference localization MSE must be positive".into()));
            }
            Ok((p.loc_mse - reference.loc_mse).abs() / reference.loc_mse)
        }
    }
}

/// Labeled count of the first curve point whose relative error is within `threshold`.
pub fn first_crossing(curve: &[CurvePoint], task: Task, reference: &Reference, threshold: f64) -> Result<Option<usize>> {
    for p in curve {
        if relative_error(task, p, reference)? <= threshold {
            return Ok(Some(p.labeled));
        }
    }
    Ok(None)
}

/// Labeled count of the first curve point reaching `target` accuracy.
pub fn labels_to_reach(curve: &[CurvePoint], target: f64) -> Option<usize> {
    curve.iter().find(|p| p.accuracy >= target).map(|p| p.labeled)
}

/// `1 - method / baseline`.
pub fn savings(method: usize, baseline: usize) -> f64 {
    1.0 - method as f64 / baseline as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossingRow {
    pub task: Task,
    pub threshold: f64,
    /// `None` when the threshold is never met.
    pub method: Option<usize>,
    pub baseline: Option<usize>,
    /// Present only when both curves cross.
    pub savings: Option<f64>,
}

pub fn relative_error_report(
    method: &[CurvePoint],
    baseline: &[CurvePoint],
    reference: &Reference,
    thresholds: &[(Task, f64)],
) -> Result<Vec<CrossingRow>> {
    thresholds
        .iter()
        .map(|&(task, threshold)| {
            let m = first_crossing(method, task, reference, threshold)?;
            let b = first_crossing(baseline, task, reference, threshold)?;
            Ok(CrossingRow {
                task,
                threshold,
                method: m,
                baseline: b,
                savings: m.zip(b).map(|(m, b)| savings(m, b)),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let p = Tensor::from_rows(&[vec![0.4, 0.4, 0.2], vec![0.1, 0.2, 0.7]]).unwrap();
        assert_eq!(argmax_rows(&p), vec![0, 2]);
    }

    #[test]
    fn loc_mse_examples() {
        let t = Tensor::full(&[3, 4], 0.5);
        assert_eq!(loc_mse(&t, &t, &[true; 3]).unwrap(), 0.0);
        let off = Tensor::full(&[3, 4], 0.6);
        assert!((loc_mse(&off, &t, &[true, false, true]).unwrap() - 0.01).abs() < 1e-15);
        assert!(loc_mse(&t, &t, &[false; 3]).is_err());
        let mut r = RngStream::new(1, 1);
        let a = Tensor::from_fn(&[9, 4], |_| r.uniform());
        let b = Tensor::from_fn(&[9, 4], |_| r.uniform());
        let mask: Vec<bool> = (0..9).map(|i| i % 3 != 0).collect();
        let mut s = 0.0;
        let mut k = 0.0;
        for i in 0..9 {
            if mask[i] {
                for j in 0..4 {
                    s += (a.get2(i, j) - b.get2(i, j)).powi(2);
                    k += 1.0;
                }
            }
        }
        assert!((loc_mse(&a, &b, &mask).unwrap() - s / k).abs() < 1e-12);
    }

    #[test]
    fn calibration_extremes() {
        let p = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let right = calibration(&p, &[0, 1], 10, Confidence::Argmax).unwrap();
        assert_eq!(right.error, 0.0);
        let wrong = calibration(&p, &[1, 0], 10, Confidence::Argmax).unwrap();
        assert_eq!(wrong.error, 1.0);
        assert_eq!(wrong.counts.iter().sum::<usize>(), 2);
        assert_eq!(wrong.counts[9], 2);
        assert!(calibration(&p, &[0, 1], 1, Confidence::Argmax).is_err());
    }

    #[test]
    fn calibrated_bernoulli_predictor() {
        let mut r = RngStream::new(2024, 0);
        let pairs: Vec<(f64, bool)> = (0..10_000)
            .map(|_| {
                let c = r.uniform_range(0.5, 1.0);
                (c, r.uniform() < c)
            })
            .collect();
        let cal = calibration_from_pairs(&pairs, 10);
        assert!(cal.error < 0.02, "{}", cal.error);
        assert_eq!(cal.counts.iter().sum::<usize>(), 10_000);
    }

    #[test]
    fn per_class_mode_bins_every_probability() {
        let p = Tensor::from_rows(&[vec![0.7, 0.3], vec![0.2, 0.8]]).unwrap();
        let cal = calibration(&p, &[0, 0], 5, Confidence::PerClass).unwrap();
        assert_eq!(cal.counts.iter().sum::<usize>(), 4);
    }

    /// Independent recomputation: explicit retained sets, means in index order.
    fn brute_error_sum(losses: &[f64], unc: &[f64], steps: usize) -> f64 {
        let n = losses.len();
        let curve = |keys: &[f64]| -> Vec<f64> {
            (0..steps)
                .map(|j| {
                    let drop = j * n / steps;
                    let mut removed = vec![false; n];
                    for _ in 0..drop {
                        let mut best: Option<usize> = None;
                        for i in 0..n {
                            if !removed[i] && best.is_none_or(|b| keys[i] > keys[b]) {
                                best = Some(i);
                            }
                        }
                        removed[best.unwrap()] = true;
                    }
                    let kept: Vec<f64> = (0..n).filter(|&i| !removed[i]).map(|i| losses[i]).collect();
                    kept.iter().sum::<f64>() / kept.len() as f64
                })
                .collect()
        };
        let (m, o) = (curve(unc), curve(losses));
        m.iter().zip(&o).map(|(a, b)| (a - b).abs()).sum::<f64>() / steps as f64
    }

    #[test]
    fn sparsification_examples() {
        let mut r = RngStream::new(3, 0);
        let losses: Vec<f64> = (0..200).map(|_| r.uniform() * 3.0).collect();
        let same = sparsification(&losses, &losses, 20).unwrap();
        assert_eq!(same.error_sum, 0.0);
        assert_eq!(same.method.fractions.len(), 20);
        assert_eq!(same.method.fractions[1], 0.95);
        let rev: Vec<f64> = losses.iter().map(|l| -l).collect();
        let worst = sparsification(&losses, &rev, 20).unwrap();
        assert!((worst.error_sum - brute_error_sum(&losses, &rev, 20)).abs() < 1e-12);
        assert!(worst.error_sum > 0.0);
        let flat = vec![0.7; 100];
        let unc: Vec<f64> = (0..100).map(|_| r.uniform()).collect();
        let c = sparsification(&flat, &unc, 20).unwrap();
        assert_eq!(c.error_sum, 0.0);
        assert!(c.oracle.mean_loss.iter().all(|&v| v == c.oracle.mean_loss[0]));
    }

    #[test]
    fn class_delta_examples() {
        let a = vec![vec![5, 5], vec![3, 7]];
        let zero = class_distribution_delta(&a, &a, &[100, 50]).unwrap();
        assert!(zero.iter().flatten().all(|&v| v == 0.0));
        let b = vec![vec![8, 2], vec![7, 3]];
        let d = class_distribution_delta(&a, &b, &[100, 50]).unwrap();
        assert_eq!(d[0], vec![-0.03, 0.06]);
        assert_eq!(d[1], vec![-0.07, 0.14]);
        // equal totals: pool-weighted deltas cancel
        for row in &d {
            let s: f64 = row.iter().zip([100.0, 50.0]).map(|(v, w)| v * w).sum();
            assert!(s.abs() < 1e-12);
        }
        let ten = class_distribution_delta(&[vec![10, 0]], &[vec![0, 0]], &[100, 7]).unwrap();
        assert_eq!(ten[0][0], 0.10);
        assert!(class_distribution_delta(&a, &b[..1], &[100, 50]).is_err());
    }

    #[test]
    fn savings_matches_table_example() {
        let s = savings(4400, 11400);
        assert!((s - 0.6140350877192983).abs() < 1e-15);
        assert_eq!((s * 100.0).round(), 61.0);
    }

    #[test]
    fn crossings_on_piecewise_linear_curves() {
        // accuracy rises linearly from 0.5 at 1000 labels by 0.01 per 100 labels.
        let curve = |slope: f64| -> Vec<CurvePoint> {
            (0..=40)
                .map(|j| {
                    let labeled = 1000 + 100 * j;
                    CurvePoint {
                        labeled,
                        accuracy: (0.5 + slope * j as f64).min(0.9),
                        loc_mse: 0.02 + 0.08 / (1.0 + j as f64),
                    }
                })
                .collect()
        };
        let al = curve(0.02);
        let base = curve(0.01);
        let reference = Reference {
            accuracy: 0.9,
            loc_mse: 0.02,
        };
        let rows = relative_error_report(
            &al,
            &base,
            &reference,
            &[(Task::Classification, 0.1), (Task::Classification, 0.0), (Task::Localization, 0.5), (Task::Classification, -1.0), (Task::Localization, 0.0)],
        )
        .unwrap();
        // |0.9 - acc| <= 0.1 at acc >= 0.8: AL j = 15, baseline j = 30.
        assert_eq!(rows[0].method, Some(2500));
        assert_eq!(rows[0].baseline, Some(4000));
        assert_eq!(rows[0].savings, Some(1.0 - 2500.0 / 4000.0));
        // Exact match only where the curves saturate at 0.9: AL j = 20, baseline j = 40.
        assert_eq!(rows[1].method, Some(3000));
        assert_eq!(rows[1].baseline, Some(5000));
        assert_eq!(rows[1].savings, Some(0.4));
        // 0.08/(1+j) <= 0.01 at j = 7 for both curves.
        assert_eq!(rows[2].method, Some(1700));
        assert_eq!(rows[2].savings, Some(0.0));
        assert_eq!(rows[3].method, None);
        assert_eq!((rows[4].method, rows[4].baseline, rows[4].savings), (None, None, None));
        assert_eq!(labels_to_reach(&base, 0.8), Some(4000));
    }

    proptest! {
        #[test]
        fn oracle_curve_is_non_increasing(losses in prop::collection::vec(0.0f64..10.0, 20..300)) {
            let s = sparsification(&losses, &vec![0.0; losses.len()], 20).unwrap();
            for w in s.oracle.mean_loss.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            prop_assert!(s.error_sum >= 0.0);
        }

        #[test]
        fn error_sum_matches_brute_force(
            pairs in prop::collection::vec((0.0f64..5.0, 0.0f64..1.0), 20..120)
        ) {
            let (l, u): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let s = sparsification(&l, &u, 20).unwrap();
            prop_assert!((s.error_sum - brute_error_sum(&l, &u, 20)).abs() < 1e-12);
        }

        #[test]
        fn class_delta_is_antisymmetric(
            a in prop::collection::vec(prop::collection::vec(0usize..20, 3), 1..8),
            seed in 0u64..1000
        ) {
            let mut r = RngStream::new(seed, 0);
            let b: Vec<Vec<usize>> = a.iter().map(|s| s.iter().map(|_| r.below(20)).collect()).collect();
            let d1 = class_distribution_delta(&a, &b, &[50, 30, 7]).unwrap();
            let d2 = class_distribution_delta(&b, &a, &[50, 30, 7]).unwrap();
            for (x, y) in d1.iter().flatten().zip(d2.iter().flatten()) {
                prop_assert_eq!(*x, -*y);
            }
        }
    }
}
