//! Gaussian kernel density over training targets and inverse-density loss weights.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anchors farther than this many bandwidths from the query are skipped.
/// The standard normal tail beyond 8 carries ~1.2e-15 of the kernel mass.
pub const TRUNCATION_BANDWIDTHS: f64 = 8.0;

#[inline]
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityModel {
    anchors: Vec<f64>,
    bandwidth: f64,
}

impl DensityModel {
    pub fn fit(targets: &[f64], bandwidth: f64) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Fit("kernel density needs at least one target".into()));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Domain(format!("bandwidth must be > 0, got {bandwidth}")));
        }
        if let Some(bad) = targets.iter().find(|y| !y.is_finite()) {
            return Err(Error::Fit(format!("non-finite target {bad}")));
        }
        let mut anchors = targets.to_vec();
        anchors.sort_by(f64::total_cmp);
        Ok(DensityModel { anchors, bandwidth })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn anchors(&self) -> &[f64] {
        &self.anchors
    }

    pub fn n(&self) -> usize {
        self.anchors.len()
    }

    /// rho_h(y) = 1/(n h) * sum_i K((y - y_i)/h), summed over anchors within
    /// the truncation window.
    pub fn density(&self, y: f64) -> f64 {
        let reach = TRUNCATION_BANDWIDTHS * self.bandwidth;
        let lo = self.anchors.partition_point(|&a| a < y - reach);
        let hi = self.anchors.partition_point(|&a| a <= y + reach);
        let sum: f64 = self.anchors[lo..hi]
            .iter()
            .map(|&a| std_normal_pdf((y - a) / self.bandwidth))
            .sum();
        let d = sum / (self.n() as f64 * self.bandwidth);
        if d > 0.0 {
            d
        } else {
            // every anchor is outside the window; fall back to the exact sum
            self.density_exact(y)
        }
    }

    /// Untruncated O(n) sum.
    pub fn density_exact(&self, y: f64) -> f64 {
        let sum: f64 = self
            .anchors
            .iter()
            .map(|&a| std_normal_pdf((y - a) / self.bandwidth))
            .sum();
        (sum / (self.n() as f64 * self.bandwidth)).max(f64::MIN_POSITIVE)
    }
}

pub fn fit_kde(targets: &[f64], bandwidth: f64) -> Result<DensityModel> {
    DensityModel::fit(targets, bandwidth)
}

/// `w(y) = rho_h(y)^-exponent`, optionally divided by the mean raw weight over
/// the training targets so the normalized weights average to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightScheme {
    density: DensityModel,
    exponent: f64,
    normalizer: f64,
}

impl WeightScheme {
    pub fn new(
        density: DensityModel,
        exponent: f64,
        train_targets: &[f64],
        normalize: bool,
    ) -> Result<Self> {
        if !(exponent >= 0.0 && exponent.is_finite()) {
            return Err(Error::Domain(format!("weight exponent must be >= 0, got {exponent}")));
        }
        let mut ws = WeightScheme {
            density,
            exponent,
            normalizer: 1.0,
        };
        if normalize && !train_targets.is_empty() {
            let total: f64 = train_targets.iter().map(|&y| ws.raw_weight(y)).sum();
            ws.normalizer = total / train_targets.len() as f64;
        }
        Ok(ws)
    }

    pub fn uniform(density: DensityModel) -> Self {
        WeightScheme {
            density,
            exponent: 0.0,
            normalizer: 1.0,
        }
    }

    pub fn density(&self) -> &DensityModel {
        &self.density
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn raw_weight(&self, y: f64) -> f64 {
        if self.exponent == 0.0 {
            return 1.0;
        }
        self.density.density(y).powf(-self.exponent)
    }

    pub fn weight(&self, y: f64) -> f64 {
        self.raw_weight(y) / self.normalizer
    }

    /// Weights for a fixed target list, computed once.
    pub fn weights_for(&self, targets: &[f64]) -> Vec<f64> {
        targets.iter().map(|&y| self.weight(y)).collect()
    }
}

pub fn make_weights(
    m: DensityModel,
    exponent: f64,
    train_targets: &[f64],
) -> Result<WeightScheme> {
    WeightScheme::new(m, exponent, train_targets, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal_draws(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn closed_form_points() {
        let m = fit_kde(&[0.0], 1.0).unwrap();
        assert!((m.density(0.0) - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!((m.density(2.0) - 0.053_990_966_513_188_06).abs() < 1e-15);
        let m = fit_kde(&[-1.0, 1.0], 1.0).unwrap();
        assert!((m.density(0.0) - 0.241_970_724_519_143_37).abs() < 1e-15);
        let m = fit_kde(&[0.0], 2.0).unwrap();
        assert!((m.density(0.0) - 0.199_471_140_200_716_35).abs() < 1e-15);
    }

    #[test]
    fn tracks_the_generating_density() {
        let m = fit_kde(&normal_draws(1000, 42), 0.3).unwrap();
        let max_dev = (0..=600)
            .map(|i| -3.0 + i as f64 * 0.01)
            .map(|y| (m.density(y) - std_normal_pdf(y)).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 0.05, "max deviation {max_dev}");
    }

    #[test]
    fn integrates_to_one() {
        let m = fit_kde(&[0.0, 0.5, 3.0, 3.1, -2.0], 0.4).unwrap();
        let step = 1e-3;
        let mass: f64 = (0..20_000).map(|i| m.density(-10.0 + i as f64 * step) * step).sum();
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
    }

    #[test]
    fn truncated_matches_exact() {
        let m = fit_kde(&normal_draws(1000, 9), 0.2).unwrap();
        for i in 0..400 {
            let y = -5.0 + i as f64 * 0.025;
            assert!((m.density(y) - m.density_exact(y)).abs() <= 1e-12);
        }
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(fit_kde(&[], 1.0), Err(Error::Fit(_))));
        assert!(matches!(fit_kde(&[1.0], 0.0), Err(Error::Domain(_))));
        assert!(matches!(fit_kde(&[1.0], -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn weight_examples() {
        let m = fit_kde(&[0.0], 1.0).unwrap();
        let ws = make_weights(m.clone(), 0.0, &[0.0]).unwrap();
        assert_eq!(ws.weight(-3.0), 1.0);
        assert_eq!(ws.weight(7.0), 1.0);
        let ws = make_weights(m, 1.0, &[0.0]).unwrap();
        assert!((ws.weight(0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sparse_mode_gets_more_weight() {
        // 900 targets around 0, 100 around 5
        let draws = normal_draws(1000, 3);
        let targets: Vec<f64> = draws
            .iter()
            .enumerate()
            .map(|(i, z)| if i < 900 { 0.5 * z } else { 5.0 + 0.5 * z })
            .collect();
        let m = fit_kde(&targets, 0.3).unwrap();
        assert!(m.density(5.0) < m.density(0.0));
        let ws = make_weights(m, 0.5, &targets).unwrap();
        assert!(ws.weight(5.0) > ws.weight(0.0));
    }

    #[test]
    fn sharper_exponent_amplifies_rare_weights() {
        let targets = normal_draws(500, 5);
        let m = fit_kde(&targets, 0.3).unwrap();
        let min_train = targets.iter().map(|&y| m.density(y)).fold(f64::INFINITY, f64::min);
        let soft = make_weights(m.clone(), 0.2, &targets).unwrap();
        let sharp = make_weights(m.clone(), 0.8, &targets).unwrap();
        for y in [-4.0, -3.5, 3.5, 4.0] {
            assert!(m.density(y) <= min_train);
            assert!(sharp.weight(y) >= soft.weight(y));
        }
    }

    proptest! {
        #[test]
        fn normalized_weights_average_to_one(
            targets in prop::collection::vec(-5.0f64..5.0, 1..200),
            h in 0.05f64..2.0,
            exponent in 0.0f64..1.5,
        ) {
            let m = fit_kde(&targets, h).unwrap();
            let ws = make_weights(m, exponent, &targets).unwrap();
            let mean = ws.weights_for(&targets).iter().sum::<f64>() / targets.len() as f64;
            prop_assert!((mean - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn weight_is_monotone_in_density(
            targets in prop::collection::vec(-3.0f64..3.0, 2..100),
            a in -6.0f64..6.0,
            b in -6.0f64..6.0,
            exponent in 0.01f64..1.5,
        ) {
            let m = fit_kde(&targets, 0.5).unwrap();
            let ws = make_weights(m.clone(), exponent, &targets).unwrap();
            let (da, db) = (m.density(a), m.density(b));
            if da < db {
                prop_assert!(ws.weight(a) > ws.weight(b));
            }
        }

        #[test]
        fn density_is_positive(targets in prop::collection::vec(-3.0f64..3.0, 1..50), y in -1e3f64..1e3) {
            let m = fit_kde(&targets, 0.1).unwrap();
            prop_assert!(m.density(y) > 0.0);
        }
    }
}
