use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The two summands of the training objective and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub weighted_l1: f64,
    pub gauss_nll: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.weighted_l1.is_finite() && self.gauss_nll.is_finite() && self.total.is_finite()
    }

    /// Name of the first non-finite field, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        if !self.weighted_l1.is_finite() {
            Some("weighted_l1")
        } else if !self.gauss_nll.is_finite() {
            Some("gauss_nll")
        } else if !self.total.is_finite() {
            Some("total")
        } else {
            None
        }
    }
}

/// Per-sample loss value and its partial derivatives w.r.t. the two outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleLoss {
    pub breakdown: LossBreakdown,
    pub d_yhat: f64,
    pub d_sigma: f64,
}

/// A per-sample training objective over `(y_hat, sigma_hat)`.
pub trait Objective {
    fn sample(&self, y_hat: f64, sigma: f64, target: f64, weight: f64) -> SampleLoss;
}

/// `lambda1 * w * |r| + lambda3 * (r^2 / sigma^2 + ln sigma^2)` with
/// `r = y_hat - y`; `w` is the (density-derived) sample weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedObjective {
    pub lambda1: f64,
    pub lambda3: f64,
}

impl Objective for CombinedObjective {
    #[inline]
    fn sample(&self, y_hat: f64, sigma: f64, target: f64, weight: f64) -> SampleLoss {
        let r = y_hat - target;
        let var = sigma * sigma;
        let weighted_l1 = weight * r.abs();
        let gauss_nll = r * r / var + var.ln();
        // subgradient 0 at an exact fit
        let sign = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
        SampleLoss {
            breakdown: LossBreakdown {
                weighted_l1,
                gauss_nll,
                total: self.lambda1 * weighted_l1 + self.lambda3 * gauss_nll,
            },
            d_yhat: self.lambda1 * weight * sign + self.lambda3 * 2.0 * r / var,
            d_sigma: self.lambda3 * (2.0 / sigma - 2.0 * r * r / (var * sigma)),
        }
    }
}

/// Checked single-sample evaluation of the combined objective.
pub fn combined_loss(
    y_hat: f64,
    sigma: f64,
    target: f64,
    weight: f64,
    lambda1: f64,
    lambda3: f64,
) -> Result<LossBreakdown> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be > 0, got {sigma}")));
    }
    if !(weight > 0.0) {
        return Err(Error::Domain(format!("weight must be > 0, got {weight}")));
    }
    Ok(CombinedObjective { lambda1, lambda3 }
        .sample(y_hat, sigma, target, weight)
        .breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_residual_unit_sigma_is_zero() {
        for w in [0.1, 1.0, 7.0] {
            let l = combined_loss(2.0, 1.0, 2.0, w, 1.0, 0.2).unwrap();
            assert_eq!(l.total, 0.0);
        }
    }

    #[test]
    fn unit_residual_example() {
        let l = combined_loss(1.0, 1.0, 0.0, 1.0, 1.0, 0.2).unwrap();
        assert!((l.total - 1.2).abs() < 1e-15);
        assert_eq!(l.weighted_l1, 1.0);
        assert_eq!(l.gauss_nll, 1.0);
    }

    #[test]
    fn non_positive_sigma_is_domain_error() {
        assert!(matches!(combined_loss(0.0, 0.0, 1.0, 1.0, 1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(combined_loss(0.0, -1.0, 1.0, 1.0, 1.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn l1_subgradient_is_zero_at_exact_fit() {
        let s = CombinedObjective { lambda1: 1.0, lambda3: 0.0 }.sample(3.0, 0.5, 3.0, 2.0);
        assert_eq!(s.d_yhat, 0.0);
    }

    proptest! {
        #[test]
        fn total_is_lambda_combination(
            yh in -5.0f64..5.0, y in -5.0f64..5.0, s in 0.01f64..5.0,
            w in 0.01f64..10.0, l1 in 0.0f64..3.0, l3 in 0.0f64..3.0,
        ) {
            let b = combined_loss(yh, s, y, w, l1, l3).unwrap();
            prop_assert!((b.total - (l1 * b.weighted_l1 + l3 * b.gauss_nll)).abs() <= 1e-12 * b.total.abs().max(1.0));
        }

        #[test]
        fn analytic_output_gradients_match_central_differences(
            yh in -3.0f64..3.0, y in -3.0f64..3.0, s in 0.2f64..3.0,
            w in 0.1f64..5.0, l1 in 0.0f64..2.0, l3 in 0.0f64..2.0,
        ) {
            prop_assume!((yh - y).abs() > 1e-3);
            let obj = CombinedObjective { lambda1: l1, lambda3: l3 };
            let h = 1e-6;
            let f = |a: f64, b: f64| obj.sample(a, b, y, w).breakdown.total;
            let a = obj.sample(yh, s, y, w);
            let num_y = (f(yh + h, s) - f(yh - h, s)) / (2.0 * h);
            let num_s = (f(yh, s + h) - f(yh, s - h)) / (2.0 * h);
            let rel = |an: f64, nu: f64| (an - nu).abs() / an.abs().max(nu.abs()).max(1e-3);
            prop_assert!(rel(a.d_yhat, num_y) < 1e-5, "{} vs {}", a.d_yhat, num_y);
            prop_assert!(rel(a.d_sigma, num_s) < 1e-5, "{} vs {}", a.d_sigma, num_s);
        }
    }
}
