//! Wald statistics and the RESI point estimators built from them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::ContrastMatrix;
use crate::error::{Error, Result};
use crate::linalg::{condition_number, spd_inverse, MAX_CONDITION};
use crate::models::{CovarianceEstimate, FamilyKind, FittedModel};
use crate::special::ln_gamma_half_ratio;

#[derive(Debug, Clone, PartialEq)]
pub struct WaldStatistics {
    pub t_squared: f64,
    /// `(β̂ - β₀)/se(β̂)`, only for single-parameter hypotheses.
    pub z: Option<f64>,
    /// `T²/m₁` (linear only).
    pub f_stat: Option<f64>,
    /// Equal to `z` (linear, `m₁ = 1` only).
    pub t_stat: Option<f64>,
    pub m1: usize,
    pub n: usize,
    /// Number of regression coefficients.
    pub m: usize,
    pub family: FamilyKind,
    /// `L θ̂ - β₀`.
    pub beta: DVector<f64>,
    /// `Σ̂_β = L Σ̂_θ Lᵀ`.
    pub sigma_beta: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResiVariant {
    UnsignedChisq,
    SignedZ,
    Scaled,
    UnsignedF,
    SignedT,
}

impl ResiVariant {
    pub fn is_signed(self) -> bool {
        matches!(self, ResiVariant::SignedZ | ResiVariant::SignedT)
    }

    pub fn label(self) -> &'static str {
        match self {
            ResiVariant::UnsignedChisq => "unsigned-chisq",
            ResiVariant::SignedZ => "signed-z",
            ResiVariant::Scaled => "scaled",
            ResiVariant::UnsignedF => "unsigned-f",
            ResiVariant::SignedT => "signed-t",
        }
    }

    /// Family-default unsigned variant: F-based for linear, χ²-based for
    /// logistic.
    pub fn unsigned_for(kind: FamilyKind) -> Self {
        match kind {
            FamilyKind::Linear => ResiVariant::UnsignedF,
            FamilyKind::Logistic => ResiVariant::UnsignedChisq,
        }
    }

    /// Family-default signed variant: t-based for linear, Z-based for
    /// logistic.
    pub fn signed_for(kind: FamilyKind) -> Self {
        match kind {
            FamilyKind::Linear => ResiVariant::SignedT,
            FamilyKind::Logistic => ResiVariant::SignedZ,
        }
    }
}

impl std::fmt::Display for ResiVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for ResiVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            ResiVariant::UnsignedChisq,
            ResiVariant::SignedZ,
            ResiVariant::Scaled,
            ResiVariant::UnsignedF,
            ResiVariant::SignedT,
        ]
        .into_iter()
        .find(|v| v.label() == s)
        .ok_or_else(|| Error::Parameter(format!("unknown estimator variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResiEstimate {
    pub value: f64,
    pub variant: ResiVariant,
    /// Asymptotic standard deviation `σ̂_S` of `√n (S̃ - S)`, once attached.
    pub sigma_s: Option<f64>,
    pub m1: usize,
    pub n: usize,
}

impl ResiEstimate {
    fn point(value: f64, variant: ResiVariant, stats: &WaldStatistics) -> Self {
        Self { value, variant, sigma_s: None, m1: stats.m1, n: stats.n }
    }

    pub fn with_sigma(mut self, sigma_s: f64) -> Self {
        self.sigma_s = Some(sigma_s);
        self
    }

    /// `σ̂_S / √n`.
    pub fn se(&self) -> Option<f64> {
        self.sigma_s.map(|s| s / (self.n as f64).sqrt())
    }
}

/// Wald statistics for `H₀: Lθ = β₀` under the supplied covariance.
pub fn wald_statistics(
    model: &FittedModel,
    cov: &CovarianceEstimate,
    l: &ContrastMatrix,
    beta0: &DVector<f64>,
) -> Result<WaldStatistics> {
    let l = if l.m() < model.m() { l.widened(model.m()) } else { l.clone() };
    if beta0.len() != l.m1() {
        return Err(Error::Parameter(format!(
            "β₀ has length {}, hypothesis has {} rows",
            beta0.len(),
            l.m1()
        )));
    }
    let beta = l.apply(model.theta()) - beta0;
    let sigma_beta = l.sandwich(&cov.sigma_theta);
    wald_from_parts(beta, sigma_beta, model.n(), model.p(), model.kind())
}

/// Wald statistics from `β̂ - β₀` and `Σ̂_β` directly.
pub fn wald_from_parts(
    beta: DVector<f64>,
    sigma_beta: DMatrix<f64>,
    n: usize,
    m: usize,
    family: FamilyKind,
) -> Result<WaldStatistics> {
    let m1 = beta.len();
    if condition_number(&sigma_beta) > MAX_CONDITION {
        return Err(Error::IllConditioned("Σ_β is singular".into()));
    }
    let inv = spd_inverse(&sigma_beta, "Σ_β")?;
    let t_squared = (n as f64 * beta.dot(&(&inv * &beta))).max(0.0);
    let z = (m1 == 1).then(|| beta[0] / (sigma_beta[(0, 0)] / n as f64).sqrt());
    let linear = family == FamilyKind::Linear;
    Ok(WaldStatistics {
        t_squared,
        z,
        f_stat: linear.then(|| t_squared / m1 as f64),
        t_stat: if linear { z } else { None },
        m1,
        n,
        m,
        family,
        beta,
        sigma_beta,
    })
}

/// `Ŝ = √max(0, (T² - m₁)/n)`.
pub fn resi_unsigned(stats: &WaldStatistics) -> ResiEstimate {
    let v = ((stats.t_squared - stats.m1 as f64) / stats.n as f64).max(0.0).sqrt();
    ResiEstimate::point(v, ResiVariant::UnsignedChisq, stats)
}

/// `Š = Z/√n`.
pub fn resi_signed(stats: &WaldStatistics) -> Result<ResiEstimate> {
    let z = stats.z.ok_or(Error::SignedUndefined(stats.m1))?;
    Ok(ResiEstimate::point(z / (stats.n as f64).sqrt(), ResiVariant::SignedZ, stats))
}

/// `S̃ = √(T²/n)`.
pub fn resi_scaled(stats: &WaldStatistics) -> ResiEstimate {
    let v = (stats.t_squared / stats.n as f64).sqrt();
    ResiEstimate::point(v, ResiVariant::Scaled, stats)
}

fn check_df(stats: &WaldStatistics) -> Result<()> {
    if stats.n <= stats.m + 2 {
        return Err(Error::InsufficientDf { n: stats.n, m: stats.m });
    }
    Ok(())
}

/// F-based unsigned estimator.
pub fn resi_f(stats: &WaldStatistics) -> Result<ResiEstimate> {
    check_df(stats)?;
    let f = stats
        .f_stat
        .ok_or_else(|| Error::Parameter("F-based estimator requires a linear model".into()))?;
    let (n, m, m1) = (stats.n as f64, stats.m as f64, stats.m1 as f64);
    let num = f * m1 * (n - m - 2.0) - m1 * (n - m);
    let v = (num / (n * (n - m))).max(0.0).sqrt();
    Ok(ResiEstimate::point(v, ResiVariant::UnsignedF, stats))
}

/// t-based signed estimator.
pub fn resi_t(stats: &WaldStatistics) -> Result<ResiEstimate> {
    if stats.m1 != 1 {
        return Err(Error::SignedUndefined(stats.m1));
    }
    check_df(stats)?;
    let t = stats
        .t_stat
        .ok_or_else(|| Error::Parameter("t-based estimator requires a linear model".into()))?;
    let (n, m) = (stats.n as f64, stats.m as f64);
    let ratio = ln_gamma_half_ratio(n - m - 1.0).exp();
    let v = t * std::f64::consts::SQRT_2 * ratio / (n * (n - m)).sqrt();
    Ok(ResiEstimate::point(v, ResiVariant::SignedT, stats))
}

/// Point estimate of the requested variant.
pub fn resi_point(stats: &WaldStatistics, variant: ResiVariant) -> Result<ResiEstimate> {
    match variant {
        ResiVariant::UnsignedChisq => Ok(resi_unsigned(stats)),
        ResiVariant::SignedZ => resi_signed(stats),
        ResiVariant::Scaled => Ok(resi_scaled(stats)),
        ResiVariant::UnsignedF => resi_f(stats),
        ResiVariant::SignedT => resi_t(stats),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(beta: f64, sigma: f64, n: usize) -> WaldStatistics {
        wald_from_parts(
            DVector::from_element(1, beta),
            DMatrix::from_element(1, 1, sigma),
            n,
            2,
            FamilyKind::Linear,
        )
        .unwrap()
    }

    fn with_t2(t2: f64, m1: usize, n: usize) -> WaldStatistics {
        let mut s = stats(1.0, 1.0, n);
        s.t_squared = t2;
        s.m1 = m1;
        s.f_stat = Some(t2 / m1 as f64);
        s
    }

    #[test]
    fn wald_substitution() {
        let s = stats(2.0, 4.0, 100);
        assert!((s.t_squared - 100.0).abs() < 1e-12);
        assert!((s.z.unwrap() - 10.0).abs() < 1e-12);
        assert!((s.f_stat.unwrap() - 100.0).abs() < 1e-12);
        let null = stats(0.0, 4.0, 100);
        assert_eq!(null.t_squared, 0.0);
        assert_eq!(null.z, Some(0.0));
    }

    #[test]
    fn permuted_contrast_same_t2() {
        let beta = DVector::from_vec(vec![0.3, -0.2, 0.5]);
        let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0]);
        let a = wald_from_parts(beta.clone(), sigma.clone(), 50, 4, FamilyKind::Logistic).unwrap();
        let perm = [2usize, 0, 1];
        let pb = DVector::from_iterator(3, perm.iter().map(|&i| beta[i]));
        let ps = DMatrix::from_fn(3, 3, |i, j| sigma[(perm[i], perm[j])]);
        let b = wald_from_parts(pb, ps, 50, 4, FamilyKind::Logistic).unwrap();
        assert!((a.t_squared - b.t_squared).abs() < 1e-12);
        assert!(a.z.is_none() && a.f_stat.is_none());
    }

    #[test]
    fn unsigned_cases() {
        assert_eq!(resi_unsigned(&with_t2(1.0, 1, 100)).value, 0.0);
        assert!((resi_unsigned(&with_t2(26.0, 1, 100)).value - 0.5).abs() < 1e-15);
        assert_eq!(resi_unsigned(&with_t2(0.5, 3, 100)).value, 0.0);
    }

    #[test]
    fn signed_cases() {
        let s = stats(2.0, 4.0, 100);
        assert!((resi_signed(&s).unwrap().value - 1.0).abs() < 1e-15);
        assert_eq!(resi_signed(&stats(0.0, 1.0, 100)).unwrap().value, 0.0);
        let mut neg = stats(1.0, 1.0, 900);
        neg.z = Some(-3.0);
        assert!((resi_signed(&neg).unwrap().value + 0.1).abs() < 1e-15);
        let multi = with_t2(5.0, 3, 100);
        let mut multi = multi;
        multi.z = None;
        assert!(matches!(resi_signed(&multi), Err(Error::SignedUndefined(3))));
    }

    #[test]
    fn scaled_cases() {
        assert_eq!(resi_scaled(&with_t2(0.0, 1, 100)).value, 0.0);
        assert!((resi_scaled(&with_t2(25.0, 1, 100)).value - 0.5).abs() < 1e-15);
        let s = with_t2(9.0, 2, 50);
        let d = resi_unsigned(&s).value.powi(2) - resi_scaled(&s).value.powi(2);
        assert!((d + 2.0 / 50.0).abs() < 1e-14);
    }

    #[test]
    fn f_and_t_boundaries() {
        let (n, m, m1) = (60usize, 2usize, 1usize);
        let f0 = (n - m) as f64 / (n - m - 2) as f64;
        let s = with_t2(f0 * m1 as f64, m1, n);
        assert!(resi_f(&s).unwrap().value < 1e-7);
        let mut zero = stats(0.0, 1.0, 40);
        zero.t_stat = Some(0.0);
        assert_eq!(resi_t(&zero).unwrap().value, 0.0);
        assert!(matches!(resi_f(&stats(1.0, 1.0, 4)), Err(Error::InsufficientDf { .. })));
        let mut logistic = stats(1.0, 1.0, 100);
        logistic.f_stat = None;
        assert!(resi_f(&logistic).is_err());
    }

    #[test]
    fn t_variant_matches_reference() {
        // t·√2·Γ(49)/Γ(48.5)/√(100·98), Γ ratio from mpmath
        let mut s = stats(1.0, 1.0, 100);
        s.t_stat = Some(3.0);
        let v = resi_t(&s).unwrap().value;
        let ratio = 6.946_268_611_944_167_f64; // Γ(49)/Γ(48.5)
        let want = 3.0 * 2f64.sqrt() * ratio / (100.0f64 * 98.0).sqrt();
        assert!((v - want).abs() < 1e-12, "{v} vs {want}");
    }

    #[test]
    fn variant_labels_round_trip() {
        for v in [
            ResiVariant::UnsignedChisq,
            ResiVariant::SignedZ,
            ResiVariant::Scaled,
            ResiVariant::UnsignedF,
            ResiVariant::SignedT,
        ] {
            assert_eq!(v.label().parse::<ResiVariant>().unwrap(), v);
        }
    }
}
