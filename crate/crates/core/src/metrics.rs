//! Evaluation suite: regression errors, rank correlations, uncertainty quality
//! (UCE, NLL, interval coverage) and threshold-classification metrics.
//!
//! All reductions run sequentially in input order so results are bit-stable.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// A prediction with its predictive scale and the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y_hat: f64,
    pub sigma: f64,
    pub target: f64,
}

impl Observation {
    pub fn new(y_hat: f64, sigma: f64, target: f64) -> Self {
        Observation { y_hat, sigma, target }
    }

    pub fn residual(&self) -> f64 {
        self.y_hat - self.target
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionMetrics {
    pub mse: f64,
    pub mae: f64,
    /// NaN when either vector is constant (see `correlation_defined`).
    pub pearson: f64,
    pub spearman: f64,
    pub correlation_defined: bool,
}

fn check_pairs(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::Domain("metrics need at least one pair".into()));
    }
    Ok(())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Pearson correlation; NaN if either input is constant or shorter than 2.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    if a.len() < 2 || a.len() != b.len() {
        return f64::NAN;
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return f64::NAN;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

pub fn regression_metrics(y_hat: &[f64], y: &[f64]) -> Result<RegressionMetrics> {
    check_pairs(y_hat, y)?;
    let n = y.len() as f64;
    let mse = y_hat.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    let mae = y_hat.iter().zip(y).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let pearson = pearson(y_hat, y);
    let spearman = spearman(y_hat, y);
    Ok(RegressionMetrics {
        mse,
        mae,
        pearson,
        spearman,
        correlation_defined: pearson.is_finite() && spearman.is_finite(),
    })
}

fn check_sigmas(obs: &[Observation]) -> Result<()> {
    match obs.iter().find(|o| !(o.sigma > 0.0)) {
        Some(o) => Err(Error::Domain(format!("sigma must be > 0, got {}", o.sigma))),
        None => Ok(()),
    }
}

/// Mean of `0.5 ln(2 pi sigma^2) + r^2 / (2 sigma^2)`.
pub fn gaussian_nll(obs: &[Observation]) -> Result<f64> {
    check_sigmas(obs)?;
    if obs.is_empty() {
        return Err(Error::Domain("NLL of an empty set".into()));
    }
    let total: f64 = obs
        .iter()
        .map(|o| {
            let var = o.sigma * o.sigma;
            0.5 * (2.0 * PI * var).ln() + o.residual().powi(2) / (2.0 * var)
        })
        .sum();
    Ok(total / obs.len() as f64)
}

pub const DEFAULT_UCE_BINS: usize = 10;

/// Uncertainty calibration error over `n_bins` equal-width bins of predicted
/// variance: `sum_b |B_b|/N * |mean r^2 - mean sigma^2|`.
pub fn uce(obs: &[Observation], n_bins: usize) -> Result<f64> {
    check_sigmas(obs)?;
    if obs.is_empty() || n_bins == 0 {
        return Ok(0.0);
    }
    let vars: Vec<f64> = obs.iter().map(|o| o.sigma * o.sigma).collect();
    let lo = vars.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vars.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_bins as f64;
    let mut err = vec![0.0; n_bins];
    let mut var = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for (o, &v) in obs.iter().zip(&vars) {
        let b = if width > 0.0 {
            (((v - lo) / width) as usize).min(n_bins - 1)
        } else {
            0
        };
        err[b] += o.residual().powi(2);
        var[b] += v;
        count[b] += 1;
    }
    let n = obs.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (err[b] / c - var[b] / c).abs()
        })
        .sum())
}

/// How the interval half-width is derived from the level alpha.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalConvention {
    /// Half-width `C^-1(alpha) / 2 * sigma` with the one-sided quantile
    /// (`C^-1(0.95) = 1.645`). Covers ~58.9% of an exact Gaussian at 0.95.
    HalfQuantile,
    /// Half-width `Phi^-1((1 + alpha) / 2) * sigma`, the two-sided interval
    /// (1.96 at 0.95).
    StandardZ,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalMetrics {
    pub alpha: f64,
    pub convention: IntervalConvention,
    /// Half-width multiplier applied to sigma.
    pub half_width: f64,
    pub coverage: f64,
    pub mean_length: f64,
}

fn std_normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Interval half-width multiplier for level `alpha`.
pub fn interval_half_width(alpha: f64, convention: IntervalConvention) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(match convention {
        IntervalConvention::HalfQuantile => {
            let q = if alpha == 0.95 { 1.645 } else { std_normal_quantile(alpha) };
            q / 2.0
        }
        IntervalConvention::StandardZ => std_normal_quantile(0.5 + alpha / 2.0),
    })
}

pub fn interval_metrics(
    obs: &[Observation],
    alpha: f64,
    convention: IntervalConvention,
) -> Result<IntervalMetrics> {
    let half_width = interval_half_width(alpha, convention)?;
    let n = obs.len().max(1) as f64;
    let covered = obs
        .iter()
        .filter(|o| {
            let hw = half_width * o.sigma;
            o.target >= o.y_hat - hw && o.target <= o.y_hat + hw
        })
        .count();
    let mean_length = obs.iter().map(|o| 2.0 * half_width * o.sigma).sum::<f64>() / n;
    Ok(IntervalMetrics {
        alpha,
        convention,
        half_width,
        coverage: covered as f64 / n,
        mean_length,
    })
}

/// Area under the ROC curve via the Mann-Whitney rank statistic (ties get
/// half credit). `None` unless both classes are present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 || scores.len() != labels.len() {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (p, q) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub auc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub threshold: f64,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Confusion-matrix rates with `score >= threshold` predicted positive.
pub fn classification_metrics(
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
) -> Result<ClassificationMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(ClassificationMetrics {
        auc: auc(scores, labels),
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        ppv: ratio(tp, tp + fp),
        npv: ratio(tn, tn + fn_),
        threshold,
    })
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Full metric set for one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub mse: f64,
    pub mae: f64,
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
    pub uce: f64,
    pub nll: f64,
    pub interval_coverage_095: f64,
    pub mean_interval_len_095: f64,
    /// One row per requested alpha, in request order.
    pub intervals: Vec<IntervalMetrics>,
    pub classification: Option<ClassificationMetrics>,
}

impl EvalReport {
    pub fn compute(
        obs: &[Observation],
        alphas: &[f64],
        convention: IntervalConvention,
    ) -> Result<EvalReport> {
        let y_hat: Vec<f64> = obs.iter().map(|o| o.y_hat).collect();
        let y: Vec<f64> = obs.iter().map(|o| o.target).collect();
        let reg = regression_metrics(&y_hat, &y)?;
        let i95 = interval_metrics(obs, 0.95, convention)?;
        let intervals = alphas
            .iter()
            .map(|&a| interval_metrics(obs, a, convention))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport {
            n: obs.len(),
            mse: reg.mse,
            mae: reg.mae,
            spearman: finite(reg.spearman),
            pearson: finite(reg.pearson),
            uce: uce(obs, DEFAULT_UCE_BINS)?,
            nll: gaussian_nll(obs)?,
            interval_coverage_095: i95.coverage,
            mean_interval_len_095: i95.mean_length,
            intervals,
            classification: None,
        })
    }

    /// Aligned text table: MSE, MAE, Spearman, Pearson, UCE, NLL, interval
    /// coverage and length, then the classification block when present.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        let mut cols: Vec<(&str, String)> = vec![
            ("MSE", format!("{:.4}", self.mse)),
            ("MAE", format!("{:.4}", self.mae)),
            ("Spear.", opt(self.spearman)),
            ("Pears.", opt(self.pearson)),
            ("UCE", format!("{:.4}", self.uce)),
            ("NLL", format!("{:.4}", self.nll)),
            ("Cov@0.95", format!("{:.4}", self.interval_coverage_095)),
            ("<Len@0.95>", format!("{:.4}", self.mean_interval_len_095)),
        ];
        if let Some(c) = &self.classification {
            cols.extend([
                ("AUC", opt(c.auc)),
                ("Sens.", opt(c.sensitivity)),
                ("Spec.", opt(c.specificity)),
                ("PPV", opt(c.ppv)),
                ("NPV", opt(c.npv)),
            ]);
        }
        let widths: Vec<usize> = cols.iter().map(|(h, v)| h.len().max(v.len())).collect();
        let mut out = String::new();
        for ((h, _), w) in cols.iter().zip(&widths) {
            let _ = write!(out, "{h:>w$}  ");
        }
        out = out.trim_end().to_string();
        out.push('\n');
        let mut row = String::new();
        for ((_, v), w) in cols.iter().zip(&widths) {
            let _ = write!(row, "{v:>w$}  ");
        }
        out.push_str(row.trim_end());
        out.push('\n');
        if !self.intervals.is_empty() {
            out.push('\n');
            out.push_str("alpha     coverage  mean_len\n");
            for i in &self.intervals {
                let _ = writeln!(out, "{:<8.4}  {:>8.4}  {:>8.4}", i.alpha, i.coverage, i.mean_length);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let y = [1.0, 2.0, 5.0, 3.0];
        let m = regression_metrics(&y, &y).unwrap();
        assert_eq!((m.mse, m.mae), (0.0, 0.0));
        assert!((m.pearson - 1.0).abs() < 1e-15);
        assert!((m.spearman - 1.0).abs() < 1e-15);
    }

    #[test]
    fn anti_linear_prediction() {
        let y = [1.0, 2.0, 5.0, 3.0];
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((regression_metrics(&neg, &y).unwrap().pearson + 1.0).abs() < 1e-15);
    }

    #[test]
    fn tied_spearman_matches_hand_ranks() {
        // ranks of y_hat {1,2,2,4} -> {1, 2.5, 2.5, 4}
        let r = average_ranks(&[1.0, 2.0, 2.0, 4.0]);
        assert_eq!(r, vec![1.0, 2.5, 2.5, 4.0]);
        let s = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0, 3.0, 4.0]);
        let expect = pearson(&[1.0, 2.5, 2.5, 4.0], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s, expect);
        assert!((s - 0.948_683_298_050_513_8).abs() < 1e-12);
    }

    #[test]
    fn constant_vector_flags_undefined_correlation() {
        let m = regression_metrics(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(m.pearson.is_nan() && !m.correlation_defined);
    }

    #[test]
    fn nll_closed_forms() {
        let half_ln_2pi = 0.5 * (2.0 * PI).ln();
        let v = gaussian_nll(&[Observation::new(1.0, 1.0, 1.0)]).unwrap();
        assert!((v - half_ln_2pi).abs() < 1e-15);
        assert!((v - 0.918_939).abs() < 1e-6);
        let v = gaussian_nll(&[Observation::new(1.0, 1.0, 0.0)]).unwrap();
        assert!((v - 1.418_939).abs() < 1e-6);
        assert!(matches!(gaussian_nll(&[Observation::new(0.0, 0.0, 0.0)]), Err(Error::Domain(_))));
    }

    #[test]
    fn nll_is_minimized_at_mean_squared_residual() {
        let residuals = [0.3, -1.2, 0.7, 2.0, -0.1];
        let ms = residuals.iter().map(|r: &f64| r * r).sum::<f64>() / 5.0;
        let at = |s: f64| {
            let obs: Vec<_> = residuals.iter().map(|&r| Observation::new(r, s, 0.0)).collect();
            gaussian_nll(&obs).unwrap()
        };
        let best = (1..4000)
            .map(|i| i as f64 * 1e-3)
            .min_by(|a, b| at(*a).total_cmp(&at(*b)))
            .unwrap();
        assert!((best * best - ms).abs() < 5e-3, "{best} vs {}", ms.sqrt());
    }

    #[test]
    fn uce_zero_when_variance_matches() {
        let obs: Vec<_> = [0.5, 1.0, 2.0, 3.0]
            .iter()
            .map(|&s| Observation::new(s, s, 0.0))
            .collect();
        assert!(uce(&obs, 10).unwrap() < 1e-12);
        let doubled: Vec<_> = obs.iter().map(|o| Observation { sigma: 2.0 * o.sigma, ..*o }).collect();
        assert!(uce(&doubled, 10).unwrap() > 0.0);
    }

    #[test]
    fn interval_boundaries() {
        let at = |y| {
            interval_metrics(&[Observation::new(0.0, 1.0, y)], 0.95, IntervalConvention::HalfQuantile)
                .unwrap()
                .coverage
        };
        assert_eq!(at(0.8), 1.0);
        assert_eq!(at(0.83), 0.0);
        assert_eq!(at(0.9), 0.0);
        assert_eq!(at(0.8225), 1.0);
        let centered: Vec<_> = (1..5).map(|i| Observation::new(i as f64, i as f64 * 0.01, i as f64)).collect();
        assert_eq!(interval_metrics(&centered, 0.95, IntervalConvention::HalfQuantile).unwrap().coverage, 1.0);
        let m = interval_metrics(&[Observation::new(0.0, 2.0, 0.0)], 0.95, IntervalConvention::HalfQuantile).unwrap();
        assert!((m.mean_length - 1.645 * 2.0).abs() < 1e-12);
        let z = interval_half_width(0.95, IntervalConvention::StandardZ).unwrap();
        assert!((z - 1.959_963_984_540_054).abs() < 1e-9);
    }

    #[test]
    fn auc_examples() {
        let labels = [false, false, true, true];
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &labels), Some(1.0));
        assert_eq!(auc(&[0.5; 4], &labels), Some(0.5));
        assert_eq!(auc(&[0.5; 4], &[true; 4]), None);
        let c = classification_metrics(&[0.1, 0.2, 0.8, 0.9], &labels, 0.5).unwrap();
        assert_eq!((c.sensitivity, c.specificity), (Some(1.0), Some(1.0)));
        assert_eq!((c.ppv, c.npv), (Some(1.0), Some(1.0)));
    }

    #[test]
    fn table_has_all_columns() {
        let obs: Vec<_> = (0..5).map(|i| Observation::new(i as f64, 1.0, i as f64)).collect();
        let r = EvalReport::compute(&obs, &[0.5, 0.95], IntervalConvention::HalfQuantile).unwrap();
        let t = r.to_table();
        for h in ["MSE", "MAE", "Spear.", "Pears.", "UCE", "NLL", "Cov@0.95", "<Len@0.95>"] {
            assert!(t.contains(h), "{t}");
        }
        assert_eq!(r.mse, 0.0);
    }

    proptest! {
        #[test]
        fn permutation_invariance_and_bounds(
            rows in prop::collection::vec((-5.0f64..5.0, 0.05f64..3.0, -5.0f64..5.0), 3..60),
            rot in 0usize..60,
        ) {
            let obs: Vec<_> = rows.iter().map(|&(a, s, y)| Observation::new(a, s, y)).collect();
            let mut shuffled = obs.clone();
            let k = rot % obs.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let a = EvalReport::compute(&obs, &[0.5, 0.9, 0.95], IntervalConvention::HalfQuantile).unwrap();
            let b = EvalReport::compute(&shuffled, &[0.5, 0.9, 0.95], IntervalConvention::HalfQuantile).unwrap();
            prop_assert!((a.mse - b.mse).abs() < 1e-12 && (a.mae - b.mae).abs() < 1e-12);
            prop_assert!((a.uce - b.uce).abs() < 1e-12 && (a.nll - b.nll).abs() < 1e-12);
            prop_assert_eq!(a.interval_coverage_095, b.interval_coverage_095);
            // MSE >= MAE^2 (Cauchy-Schwarz)
            prop_assert!(a.mse >= a.mae * a.mae * (1.0 - 1e-12));
            // coverage non-decreasing in alpha
            prop_assert!(a.intervals[0].coverage <= a.intervals[1].coverage);
            prop_assert!(a.intervals[1].coverage <= a.intervals[2].coverage);
            prop_assert!((0.0..=1.0).contains(&a.interval_coverage_095));
        }

        #[test]
        fn auc_of_negated_scores_is_complement(
            rows in prop::collection::vec((-3.0f64..3.0, any::<bool>()), 2..80),
        ) {
            let scores: Vec<f64> = rows.iter().map(|r| (r.0 * 4.0).round() / 4.0).collect();
            let labels: Vec<bool> = rows.iter().map(|r| r.1).collect();
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            if let (Some(a), Some(b)) = (auc(&scores, &labels), auc(&neg, &labels)) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }
}
