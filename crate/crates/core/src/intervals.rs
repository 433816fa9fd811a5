//! Asymptotic confidence intervals for the RESI.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::ResiEstimate;
use crate::special::{chi2_sf, normal_quantile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiMethod {
    TruncatedAsymptotic,
    WaldAsymptotic,
    BootstrapPercentile,
    NoncentralInversion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiBranch {
    TwoSided,
    OneSided,
    GammaAdjusted,
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub method: CiMethod,
    pub branch: CiBranch,
}

impl ConfidenceInterval {
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    Ok(())
}

fn standard_error(est: &ResiEstimate) -> Result<f64> {
    match est.se() {
        Some(se) if se > 0.0 && se.is_finite() => Ok(se),
        Some(se) => Err(Error::Parameter(format!("standard error {se} must be positive"))),
        None => Err(Error::Parameter("estimate carries no standard error".into())),
    }
}

/// Null right-tail probability `P(Ŝ > s) = 1 - F_{χ²_{m₁}}(n s² + m₁)`.
pub fn null_tail(s: f64, n: usize, m1: usize) -> f64 {
    chi2_sf(n as f64 * s * s + m1 as f64, m1 as f64).clamp(0.0, 1.0)
}

/// Truncated interval for an unsigned estimate.
///
/// Starts from the two-sided interval. When its lower end reaches 0 the lower
/// bound is clamped and the upper quantile reallocated using the null tail
/// probability `γ` of the observed estimate.
pub fn truncated_ci(est: &ResiEstimate, alpha: f64) -> Result<ConfidenceInterval> {
    check_alpha(alpha)?;
    if est.variant.is_signed() {
        return Err(Error::Parameter("truncated interval needs an unsigned estimate".into()));
    }
    let se = standard_error(est)?;
    let s = est.value;
    let z = normal_quantile(1.0 - alpha / 2.0);
    let lower = s - z * se;
    let level = 1.0 - alpha;
    if lower > 0.0 {
        return Ok(ConfidenceInterval {
            lower,
            upper: s + z * se,
            level,
            method: CiMethod::TruncatedAsymptotic,
            branch: CiBranch::TwoSided,
        });
    }
    let gamma = null_tail(s, est.n, est.m1);
    let (q, branch) = if gamma < alpha / 2.0 {
        (1.0 - (alpha - gamma), CiBranch::GammaAdjusted)
    } else {
        (1.0 - alpha, CiBranch::OneSided)
    };
    Ok(ConfidenceInterval {
        lower: 0.0,
        upper: s + normal_quantile(q) * se,
        level,
        method: CiMethod::TruncatedAsymptotic,
        branch,
    })
}

/// Wald interval `Š ± z_{1-α/2} σ̂_S/√n` for a signed estimate.
pub fn signed_ci(est: &ResiEstimate, alpha: f64) -> Result<ConfidenceInterval> {
    check_alpha(alpha)?;
    if est.m1 != 1 {
        return Err(Error::SignedUndefined(est.m1));
    }
    let se = standard_error(est)?;
    let half = normal_quantile(1.0 - alpha / 2.0) * se;
    Ok(ConfidenceInterval {
        lower: est.value - half,
        upper: est.value + half,
        level: 1.0 - alpha,
        method: CiMethod::WaldAsymptotic,
        branch: CiBranch::NotApplicable,
    })
}

/// Truncated for unsigned variants, Wald for signed ones.
pub fn asymptotic_ci(est: &ResiEstimate, alpha: f64) -> Result<ConfidenceInterval> {
    if est.variant.is_signed() {
        signed_ci(est, alpha)
    } else {
        truncated_ci(est, alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::ResiVariant;
    use proptest::prelude::*;

    fn unsigned(value: f64, se: f64, n: usize, m1: usize) -> ResiEstimate {
        ResiEstimate {
            value,
            variant: ResiVariant::UnsignedChisq,
            sigma_s: Some(se * (n as f64).sqrt()),
            m1,
            n,
        }
    }

    fn signed(value: f64, sigma: f64, n: usize) -> ResiEstimate {
        ResiEstimate { value, variant: ResiVariant::SignedZ, sigma_s: Some(sigma), m1: 1, n }
    }

    #[test]
    fn two_sided_branch() {
        let ci = truncated_ci(&unsigned(0.5, 0.05, 400, 1), 0.05).unwrap();
        assert_eq!(ci.branch, CiBranch::TwoSided);
        assert!((ci.lower - (0.5 - 1.959963984540054 * 0.05)).abs() < 1e-12);
        assert!((ci.upper - (0.5 + 1.959963984540054 * 0.05)).abs() < 1e-12);
    }

    #[test]
    fn one_sided_branch() {
        let ci = truncated_ci(&unsigned(0.0, 0.1, 100, 1), 0.05).unwrap();
        assert_eq!(ci.branch, CiBranch::OneSided);
        assert!((null_tail(0.0, 100, 1) - 0.3173105078629141).abs() < 1e-12);
        assert_eq!(ci.lower, 0.0);
        assert!((ci.upper - 0.164_485_362_695_147_2).abs() < 1e-12);
    }

    #[test]
    fn gamma_adjusted_branch() {
        let ci = truncated_ci(&unsigned(0.15, 0.09, 400, 1), 0.05).unwrap();
        assert_eq!(ci.branch, CiBranch::GammaAdjusted);
        assert!((null_tail(0.15, 400, 1) - 0.0015654022580025497).abs() < 1e-13);
        assert_eq!(ci.lower, 0.0);
        assert!((ci.upper - 0.29942025073218835).abs() < 1e-10);
    }

    #[test]
    fn signed_examples() {
        let ci = signed_ci(&signed(0.0, 1.0, 100), 0.05).unwrap();
        assert!((ci.lower + 0.1959963984540054).abs() < 1e-12);
        assert!((ci.upper - 0.1959963984540054).abs() < 1e-12);
        let ci = signed_ci(&signed(0.2, 1.1, 100), 0.05).unwrap();
        assert!((ci.lower - (0.2 - 1.959963984540054 * 0.11)).abs() < 1e-12);
        assert!((ci.upper - (0.2 + 1.959963984540054 * 0.11)).abs() < 1e-12);
        let narrow = signed_ci(&signed(0.2, 1.1, 100), 0.10).unwrap();
        assert!(narrow.lower > ci.lower && narrow.upper < ci.upper);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(truncated_ci(&unsigned(0.2, 0.1, 100, 1), 1.0).is_err());
        assert!(signed_ci(&signed(0.2, 1.0, 100), 0.0).is_err());
        let mut no_se = unsigned(0.2, 0.1, 100, 1);
        no_se.sigma_s = None;
        assert!(truncated_ci(&no_se, 0.05).is_err());
        assert!(truncated_ci(&signed(0.2, 1.0, 100), 0.05).is_err());
    }

    proptest! {
        #[test]
        fn truncated_invariants(
            s in 0.0f64..2.0,
            se in 1e-4f64..1.0,
            n in 10usize..5000,
            m1 in 1usize..6,
            alpha in 0.01f64..0.3,
        ) {
            let est = unsigned(s, se, n, m1);
            let ci = truncated_ci(&est, alpha).unwrap();
            let z = normal_quantile(1.0 - alpha / 2.0);
            prop_assert!(ci.lower >= 0.0 && ci.lower <= ci.upper);
            prop_assert!(ci.contains(s));
            prop_assert_eq!(ci.lower == 0.0, s - z * se <= 0.0);
            let gamma = null_tail(s, n, m1);
            prop_assert!((0.0..=1.0).contains(&gamma));
            if ci.branch != CiBranch::TwoSided {
                prop_assert_eq!(ci.branch == CiBranch::GammaAdjusted, gamma < alpha / 2.0);
            }
        }

        #[test]
        fn signed_contains_estimate(v in -2.0f64..2.0, sigma in 0.1f64..3.0, n in 10usize..5000) {
            let ci = signed_ci(&signed(v, sigma, n), 0.05).unwrap();
            prop_assert!(ci.contains(v));
        }
    }
}
