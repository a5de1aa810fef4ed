//! Post-hoc uncertainty calibration.
//!
//! Two stages, both fit on a validation split with the network frozen:
//!
//! 1. a global factor `s*` minimizing `M ln s + sum(r_i^2 / sigma_i^2) / (2 s^2)`,
//!    whose minimizer is `sqrt(mean(r_i^2 / sigma_i^2))`;
//! 2. per-bin factors `eta_n` over uniform bins of the predicted value, each the
//!    smallest order statistic of `|r| / (s* sigma)` for which the fraction of
//!    bin members with `|r| < eta s* sigma` strictly exceeds `xi`.
//!
//! The calibrated scale is `eta_{bin(y_hat)} * s* * sigma`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

/// Relative amount added to the selected order statistic so the strict
/// coverage inequality holds for the samples it is meant to cover.
pub const ETA_NUDGE: f64 = 1e-9;

/// Bins must be fine relative to the value range.
pub const MIN_BINS: usize = 10;

pub const DEFAULT_XI: f64 = 0.95;
pub const DEFAULT_BINS_PER_RANGE: f64 = 100.0;
pub const DEFAULT_FALLBACK_ETA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub y_hat: f64,
    pub sigma: f64,
    /// Ground truth; absent at deployment.
    pub target: Option<f64>,
}

impl PredictionRecord {
    pub fn new(id: impl Into<String>, y_hat: f64, sigma: f64, target: Option<f64>) -> Self {
        PredictionRecord {
            id: id.into(),
            y_hat,
            sigma,
            target,
        }
    }
}

/// `(residual, sigma)` for every record, requiring ground truth and sigma > 0.
fn labelled(records: &[PredictionRecord]) -> Result<Vec<(f64, f64)>> {
    if records.is_empty() {
        return Err(Error::Calibration("no validation records".into()));
    }
    records
        .iter()
        .map(|r| {
            let y = r.target.ok_or_else(|| {
                Error::Calibration(format!("record {} has no ground truth", r.id))
            })?;
            if !(r.sigma > 0.0) {
                return Err(Error::Domain(format!("record {}: sigma must be > 0", r.id)));
            }
            Ok((r.y_hat - y, r.sigma))
        })
        .collect()
}

/// `M ln s + S / (2 s^2)` with `S = sum(r^2 / sigma^2)`.
pub fn global_objective(count: usize, sum_sq_ratio: f64, s: f64) -> f64 {
    count as f64 * s.ln() + sum_sq_ratio / (2.0 * s * s)
}

/// Numeric minimizer of [`global_objective`]: golden-section search over
/// `ln s`, polished by bisection on the sign of the derivative.
pub fn minimize_global_objective(count: usize, sum_sq_ratio: f64, lo: f64, hi: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let f = |t: f64| global_objective(count, sum_sq_ratio, t.exp());
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-12 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    // golden-section resolves s to ~sqrt(eps); finish on the derivative,
    // whose sign is that of M s^2 - S
    let slope = |s: f64| count as f64 * s * s - sum_sq_ratio;
    let (mut lo_s, mut hi_s) = ((a - 1e-3).exp(), (b + 1e-3).exp());
    if slope(lo_s) > 0.0 || slope(hi_s) < 0.0 {
        return (0.5 * (a + b)).exp();
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo_s + hi_s);
        if mid <= lo_s || mid >= hi_s {
            break;
        }
        if slope(mid) < 0.0 {
            lo_s = mid;
        } else {
            hi_s = mid;
        }
    }
    0.5 * (lo_s + hi_s)
}

/// Global scale `s*` in closed form, cross-checked against the numeric
/// minimizer of the same objective.
pub fn global_scale(records: &[PredictionRecord]) -> Result<f64> {
    let pairs = labelled(records)?;
    let ratios: Vec<f64> = pairs.iter().map(|(r, s)| (r / s).abs()).collect();
    let sum_sq: f64 = ratios.iter().map(|q| q * q).sum();
    let m = pairs.len();
    let s_star = (sum_sq / m as f64).sqrt();
    if !(s_star > 0.0 && s_star.is_finite()) {
        return Err(Error::Calibration(format!(
            "global scale is degenerate ({s_star}); residuals are all zero or non-finite"
        )));
    }
    let lo = ratios.iter().copied().filter(|q| *q > 0.0).fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(0.0, f64::max);
    let numeric = minimize_global_objective(m, sum_sq, lo * 0.5, hi * 2.0);
    let f_closed = global_objective(m, sum_sq, s_star);
    let f_numeric = global_objective(m, sum_sq, numeric);
    if f_closed > f_numeric + 1e-9 * f_numeric.abs().max(1.0) {
        return Err(Error::Calibration(format!(
            "closed-form scale {s_star} does not attain the objective minimum (numeric {numeric})"
        )));
    }
    Ok(s_star)
}

/// Fitted two-stage calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub format_version: u32,
    pub s_star: f64,
    /// Lower edge of bin 0.
    pub y_min: f64,
    pub delta: f64,
    pub xi: f64,
    pub eta: Vec<f64>,
    /// Factor given to bins without validation samples.
    pub fallback_eta: f64,
    pub source_checkpoint_hash: Option<String>,
}

impl CalibrationArtifact {
    /// `s*` with every bin factor set to one.
    pub fn global_only(s_star: f64, y_min: f64, delta: f64, n_bins: usize, xi: f64) -> Self {
        CalibrationArtifact {
            format_version: ARTIFACT_FORMAT_VERSION,
            s_star,
            y_min,
            delta,
            xi,
            eta: vec![1.0; n_bins.max(1)],
            fallback_eta: DEFAULT_FALLBACK_ETA,
            source_checkpoint_hash: None,
        }
    }

    /// Leaves every sigma unchanged.
    pub fn identity() -> Self {
        Self::global_only(1.0, 0.0, 1.0, 1, DEFAULT_XI)
    }

    pub fn n_bins(&self) -> usize {
        self.eta.len()
    }

    /// Bin of a predicted value; values outside the fitted range are clamped
    /// to the first or last bin.
    pub fn bin_index(&self, y_hat: f64) -> usize {
        let pos = ((y_hat - self.y_min) / self.delta).floor();
        if pos.is_nan() || pos < 0.0 {
            0
        } else {
            (pos as usize).min(self.n_bins() - 1)
        }
    }

    pub fn calibrate(&self, y_hat: f64, sigma: f64) -> f64 {
        self.eta[self.bin_index(y_hat)] * self.s_star * sigma
    }

    /// Per-bin fraction of records with `|r| < sigma_calib`; `None` for bins
    /// without labelled records.
    pub fn bin_coverage(&self, records: &[PredictionRecord]) -> Vec<Option<f64>> {
        let mut hit = vec![0usize; self.n_bins()];
        let mut count = vec![0usize; self.n_bins()];
        for r in records {
            let Some(y) = r.target else { continue };
            let b = self.bin_index(r.y_hat);
            count[b] += 1;
            if (r.y_hat - y).abs() < self.calibrate(r.y_hat, r.sigma) {
                hit[b] += 1;
            }
        }
        hit.iter()
            .zip(&count)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = json::to_canonical_string(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let art: CalibrationArtifact = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if art.format_version != ARTIFACT_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported artifact format_version {}",
                art.format_version
            )));
        }
        if art.eta.is_empty() || !(art.delta > 0.0) || !(art.s_star > 0.0) {
            return Err(Error::Schema("artifact needs eta, delta > 0 and s_star > 0".into()));
        }
        Ok(art)
    }
}

/// Smallest `k` (1-based) with `k / n > xi`.
fn covering_count(n: usize, xi: f64) -> usize {
    let nf = n as f64;
    let mut k = ((xi * nf).floor() as usize).min(n);
    while (k as f64) / nf <= xi {
        k += 1;
    }
    while k > 1 && ((k - 1) as f64) / nf > xi {
        k -= 1;
    }
    k
}

/// Bin factor from the residual ratios `|r| / (s* sigma)` of one bin.
pub fn bin_eta(ratios: &[f64], xi: f64) -> f64 {
    let mut sorted = ratios.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = covering_count(sorted.len(), xi);
    let eta = sorted[k - 1] * (1.0 + ETA_NUDGE);
    if eta > 0.0 {
        eta
    } else {
        ETA_NUDGE
    }
}

/// Fits the per-bin factors on top of `s_star`. Bins span the union range of
/// targets and predictions; records are assigned by their prediction.
pub fn fit_hyperfine(
    records: &[PredictionRecord],
    s_star: f64,
    delta: f64,
    xi: f64,
) -> Result<CalibrationArtifact> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Domain(format!("delta must be > 0, got {delta}")));
    }
    if !(xi > 0.0 && xi < 1.0) {
        return Err(Error::Domain(format!("xi must lie in (0, 1), got {xi}")));
    }
    if !(s_star > 0.0 && s_star.is_finite()) {
        return Err(Error::Domain(format!("s_star must be > 0, got {s_star}")));
    }
    let pairs = labelled(records)?;
    let (lo, hi) = value_range(records);
    let n_bins = ((hi - lo) / delta).ceil();
    if !(n_bins >= MIN_BINS as f64) {
        return Err(Error::Domain(format!(
            "delta {delta} gives {n_bins} bins over [{lo}, {hi}]; at least {MIN_BINS} are required"
        )));
    }
    let mut art = CalibrationArtifact {
        format_version: ARTIFACT_FORMAT_VERSION,
        s_star,
        y_min: lo,
        delta,
        xi,
        eta: vec![DEFAULT_FALLBACK_ETA; n_bins as usize],
        fallback_eta: DEFAULT_FALLBACK_ETA,
        source_checkpoint_hash: None,
    };
    let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); art.n_bins()];
    for (rec, &(resid, sigma)) in records.iter().zip(&pairs) {
        per_bin[art.bin_index(rec.y_hat)].push(resid.abs() / (s_star * sigma));
    }
    for (eta, ratios) in art.eta.iter_mut().zip(&per_bin) {
        if !ratios.is_empty() {
            *eta = bin_eta(ratios, xi);
        }
    }
    Ok(art)
}

/// `(min, max)` over all targets and predictions.
pub fn value_range(records: &[PredictionRecord]) -> (f64, f64) {
    records
        .iter()
        .flat_map(|r| std::iter::once(r.y_hat).chain(r.target))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Both stages in one call; `delta` defaults to a hundredth of the value range.
pub fn fit_calibration(
    records: &[PredictionRecord],
    delta: Option<f64>,
    xi: f64,
) -> Result<CalibrationArtifact> {
    let s_star = global_scale(records)?;
    let delta = match delta {
        Some(d) => d,
        None => {
            let (lo, hi) = value_range(records);
            (hi - lo) / DEFAULT_BINS_PER_RANGE
        }
    };
    fit_hyperfine(records, s_star, delta, xi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(y_hat: f64, sigma: f64, y: f64) -> PredictionRecord {
        PredictionRecord::new("r", y_hat, sigma, Some(y))
    }

    #[test]
    fn calibrated_inputs_give_unit_scale() {
        let rs = [rec(1.0, 1.0, 0.0), rec(0.0, 2.0, 2.0), rec(5.0, 0.5, 5.5)];
        assert!((global_scale(&rs).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_residual_example() {
        let rs = [rec(1.0, 1.0, 0.0), rec(2.0, 1.0, 0.0)];
        let s = global_scale(&rs).unwrap();
        assert!((s - 1.581_138_830_084_189_8).abs() < 1e-12);
        let numeric = minimize_global_objective(2, 5.0, 0.1, 10.0);
        assert!((s - numeric).abs() <= 1e-9 * s);
    }

    #[test]
    fn scale_is_inverse_homogeneous_in_sigma() {
        let rs = [rec(1.0, 0.3, 0.0), rec(-2.0, 1.1, 0.5), rec(0.2, 0.7, 0.0)];
        let s = global_scale(&rs).unwrap();
        let c = 3.7;
        let scaled: Vec<_> = rs.iter().map(|r| PredictionRecord { sigma: r.sigma * c, ..r.clone() }).collect();
        assert!((global_scale(&scaled).unwrap() - s / c).abs() < 1e-12);
    }

    #[test]
    fn global_scale_errors() {
        assert!(matches!(global_scale(&[]), Err(Error::Calibration(_))));
        assert!(matches!(
            global_scale(&[PredictionRecord::new("x", 0.0, 1.0, None)]),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn eta_example_three_ratios() {
        assert_eq!(bin_eta(&[0.5, 1.0, 2.0], 0.66), 1.0 * (1.0 + ETA_NUDGE));
        assert_eq!(bin_eta(&[2.0, 0.5, 1.0], 0.66), 1.0 * (1.0 + ETA_NUDGE));
    }

    #[test]
    fn perfect_bin_gets_positive_nudge() {
        let eta = bin_eta(&[0.0, 0.0, 0.0], 0.9);
        assert!(eta > 0.0 && eta <= ETA_NUDGE);
    }

    #[test]
    fn covering_counts() {
        assert_eq!(covering_count(3, 0.66), 2);
        assert_eq!(covering_count(4, 0.5), 3);
        assert_eq!(covering_count(1, 0.99), 1);
        assert_eq!(covering_count(10, 0.95), 10);
        assert_eq!(covering_count(100, 0.95), 96);
    }

    #[test]
    fn hyperfine_domain_errors() {
        let rs: Vec<_> = (0..20).map(|i| rec(i as f64, 1.0, i as f64 + 0.5)).collect();
        assert!(matches!(fit_hyperfine(&rs, 1.0, 0.0, 0.9), Err(Error::Domain(_))));
        assert!(matches!(fit_hyperfine(&rs, 1.0, 1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(fit_hyperfine(&rs, 1.0, 1.0, 0.0), Err(Error::Domain(_))));
        // 20 units of range with delta 5 is only 4 bins
        assert!(matches!(fit_hyperfine(&rs, 1.0, 5.0, 0.9), Err(Error::Domain(_))));
    }

    #[test]
    fn calibrate_examples() {
        let art = CalibrationArtifact::global_only(1.0, 0.0, 0.1, 10, 0.9);
        assert_eq!(art.calibrate(0.55, 0.3), 0.3);
        let mut art = CalibrationArtifact::global_only(2.0, 0.0, 0.1, 10, 0.9);
        art.eta.fill(0.5);
        assert_eq!(art.calibrate(0.55, 0.3), 0.3);
        art.eta[0] = 3.0;
        assert_eq!(art.bin_index(-5.0), 0);
        assert_eq!(art.calibrate(-5.0, 1.0), 6.0);
        assert_eq!(art.bin_index(1e9), 9);
    }

    #[test]
    fn empty_bins_fall_back() {
        let mut rs: Vec<_> = (0..50).map(|i| rec(0.01 * i as f64, 1.0, 0.0)).collect();
        rs.push(rec(10.0, 1.0, 10.2));
        let art = fit_hyperfine(&rs, 1.0, 0.5, 0.9).unwrap();
        assert_eq!(art.n_bins(), 21);
        assert_eq!(art.eta[10], DEFAULT_FALLBACK_ETA);
    }

    #[test]
    fn artifact_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.json");
        let rs: Vec<_> = (0..40)
            .map(|i| rec(i as f64 * 0.1, 0.5 + 0.01 * i as f64, i as f64 * 0.1 + (i as f64).sin()))
            .collect();
        let mut art = fit_calibration(&rs, None, 0.8).unwrap();
        art.source_checkpoint_hash = Some("ab".repeat(32));
        art.save(&path).unwrap();
        assert_eq!(CalibrationArtifact::load(&path).unwrap(), art);
    }

    proptest! {
        #[test]
        fn every_occupied_bin_covers_more_than_xi(
            rows in prop::collection::vec((-3.0f64..3.0, 0.05f64..2.0, -1.5f64..1.5), 20..200),
            xi in 0.05f64..0.95,
        ) {
            let rs: Vec<_> = rows.iter().map(|&(yh, s, e)| rec(yh, s, yh + e)).collect();
            let s_star = global_scale(&rs).unwrap();
            let (lo, hi) = value_range(&rs);
            let art = fit_hyperfine(&rs, s_star, (hi - lo) / 12.0, xi).unwrap();
            for c in art.bin_coverage(&rs).into_iter().flatten() {
                prop_assert!(c > xi, "coverage {} <= xi {}", c, xi);
            }
        }

        #[test]
        fn eta_monotone_in_xi(ratios in prop::collection::vec(0.0f64..5.0, 1..40), a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(bin_eta(&ratios, hi) >= bin_eta(&ratios, lo));
        }

        #[test]
        fn calibration_preserves_sigma_order_within_bin(
            yh in -2.0f64..2.0, s1 in 0.01f64..3.0, s2 in 0.01f64..3.0,
        ) {
            let mut art = CalibrationArtifact::global_only(1.3, -2.0, 0.4, 10, 0.9);
            for (i, e) in art.eta.iter_mut().enumerate() {
                *e = 0.5 + 0.1 * i as f64;
            }
            if s1 < s2 {
                prop_assert!(art.calibrate(yh, s1) < art.calibrate(yh, s2));
            }
        }
    }
}
