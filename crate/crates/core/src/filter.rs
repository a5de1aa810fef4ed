//! Entropy-based selective prediction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Observation;

pub const DEFAULT_Q_GRID: [f64; 10] = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1];

/// Differential entropy of `N(mu, sigma^2)` in nats.
pub fn entropy(sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be > 0, got {sigma}")));
    }
    Ok(0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma * sigma).ln())
}

pub fn entropies(sigmas: &[f64]) -> Result<Vec<f64>> {
    sigmas.iter().map(|&s| entropy(s)).collect()
}

/// Quantile by linear interpolation between order statistics
/// (`h = (n - 1) q`).
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyThreshold {
    pub q: f64,
    pub tau: f64,
    /// Which split the threshold was derived from.
    pub source: String,
}

pub fn fit_threshold(entropies: &[f64], q: f64, source: impl Into<String>) -> Result<EntropyThreshold> {
    if entropies.is_empty() {
        return Err(Error::Fit("cannot fit an entropy threshold on an empty set".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("q must lie in (0, 1], got {q}")));
    }
    if entropies.iter().any(|h| !h.is_finite()) {
        return Err(Error::Domain("entropies must be finite".into()));
    }
    Ok(EntropyThreshold {
        q,
        tau: quantile(entropies, q).expect("non-empty"),
        source: source.into(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partition {
    pub kept: Vec<usize>,
    pub flagged: Vec<usize>,
}

/// Splits record indices by entropy: `H <= tau` is kept, `H > tau` flagged.
pub fn partition(sigmas: &[f64], thr: &EntropyThreshold) -> Result<Partition> {
    let mut p = Partition::default();
    for (i, &s) in sigmas.iter().enumerate() {
        if entropy(s)? <= thr.tau {
            p.kept.push(i);
        } else {
            p.flagged.push(i);
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterRow {
    pub q: f64,
    pub kept_fraction: f64,
    /// NaN when nothing is kept.
    pub mae: f64,
    pub mse: f64,
}

/// One row per `q`: thresholds come from `reference` entropies (normally the
/// validation split), errors are measured on the kept part of `obs`.
pub fn filtering_curve(obs: &[Observation], reference: &[f64], q_grid: &[f64]) -> Result<Vec<FilterRow>> {
    let sigmas: Vec<f64> = obs.iter().map(|o| o.sigma).collect();
    q_grid
        .iter()
        .map(|&q| {
            let thr = fit_threshold(reference, q, "reference")?;
            let part = partition(&sigmas, &thr)?;
            let k = part.kept.len();
            let (abs, sq) = part.kept.iter().fold((0.0, 0.0), |(a, s), &i| {
                let r = obs[i].residual();
                (a + r.abs(), s + r * r)
            });
            let (mae, mse) = if k == 0 {
                (f64::NAN, f64::NAN)
            } else {
                (abs / k as f64, sq / k as f64)
            };
            Ok(FilterRow {
                q,
                kept_fraction: if obs.is_empty() { 0.0 } else { k as f64 / obs.len() as f64 },
                mae,
                mse,
            })
        })
        .collect()
}

pub fn write_curve_csv(rows: &[FilterRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema(format!("{other:?}")),
    })?;
    w.write_record(["q", "kept_fraction", "mae", "mse"])?;
    for r in rows {
        w.write_record([r.q, r.kept_fraction, r.mae, r.mse].map(crate::json::format_f64))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
