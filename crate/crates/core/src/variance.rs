//! Delta-method asymptotic variance of the RESI.
//!
//! The plug-in map `θ* ↦ S(θ*)` recomputes the bread and meat at `θ*` on the
//! fixed sample and standardizes `Lθ*` by the implied `Σ_β`. Its total
//! derivative is
//!
//! ```text
//! dS/dθ = ∂S/∂θ + (dvec A/dθ)ᵀ ∂S/∂vec A + (dvec B/dθ)ᵀ ∂S/∂vec B
//! ```
//!
//! and `σ_S² = (dS/dθ)ᵀ Σ_θ (dS/dθ)`.
//!
//! With `P = L A⁻¹` and `M = ∂S/∂Σ_β`, the matrix gradients are
//! `∂S/∂B = Pᵀ M P` and `∂S/∂A = -2 Pᵀ M P B A⁻ᵀ` for the sandwich form
//! `Σ_β = P B Pᵀ`, and `∂S/∂A = -(A⁻¹ Lᵀ M L A⁻¹)ᵀ` for the model-based form
//! `Σ_β = L A⁻¹ Lᵀ`.

use nalgebra::{DMatrix, DVector};

use crate::design::ContrastMatrix;
use crate::error::{Error, Result};
use crate::estimator::{resi_point, wald_statistics, ResiEstimate, ResiVariant, WaldStatistics};
use crate::linalg::{checked_inverse, spd_inverse, vec_of};
use crate::models::{covariance, CovMode, FamilyKind, FittedModel};

/// Unsigned gradients are undefined once `S̃` falls to this level (scaled by
/// `1/√m₁`).
pub const BOUNDARY_THRESHOLD: f64 = 1e-8;

/// Step used by the central-difference derivative, relative to `max(1, |θ_k|)`.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct DerivativeBundle {
    /// `S(θ̂)` from the plug-in map.
    pub value: f64,
    /// Total derivative `dS/dθ`.
    pub d_s_d_theta: DVector<f64>,
    /// Explicit partial `∂S/∂θ` with `A` and `B` held fixed.
    pub partial: DVector<f64>,
    /// `∂S/∂vec(A)`, length `m²`.
    pub d_s_d_a: DVector<f64>,
    /// `∂S/∂vec(B)`, length `m²`.
    pub d_s_d_b: DVector<f64>,
    /// `m × m²`, row `k` is `vec(∂A/∂θ_k)`.
    pub d_a_d_theta: DMatrix<f64>,
    /// `m × m²`, row `k` is `vec(∂B/∂θ_k)`.
    pub d_b_d_theta: DMatrix<f64>,
}

fn widen(model: &FittedModel, l: &ContrastMatrix) -> ContrastMatrix {
    if l.m() < model.m() {
        l.widened(model.m())
    } else {
        l.clone()
    }
}

struct SParts {
    value: f64,
    partial: DVector<f64>,
    g_a: DMatrix<f64>,
    g_b: Option<DMatrix<f64>>,
}

fn s_parts(
    model: &FittedModel,
    l: &ContrastMatrix,
    signed: bool,
    theta: &DVector<f64>,
    gradients: bool,
) -> Result<SParts> {
    if signed && l.m1() != 1 {
        return Err(Error::SignedUndefined(l.m1()));
    }
    let lm = l.matrix();
    let robust = matches!(model.cov_mode(), CovMode::Robust(_));
    let a = if robust { model.bread_at(theta) } else { model.model_bread_at(theta) };
    let a_inv = checked_inverse(&a, "bread")?;
    let p = &lm * &a_inv;
    let b = robust.then(|| model.meat_at(theta));
    let sigma = match &b {
        Some(b) => &p * b * p.transpose(),
        None => &p * lm.transpose(),
    };
    let beta = l.apply(theta);

    let (value, partial, m_eff) = if signed {
        let s2 = sigma[(0, 0)];
        if s2 <= 0.0 {
            return Err(Error::IllConditioned("Σ_β is not positive".into()));
        }
        let value = beta[0] / s2.sqrt();
        let partial = lm.transpose().column(0) / s2.sqrt();
        let m = DMatrix::from_element(1, 1, -0.5 * beta[0] * s2.powf(-1.5));
        (value, partial, m)
    } else {
        let inv = spd_inverse(&sigma, "Σ_β")?;
        let w = &inv * &beta;
        let value = beta.dot(&w).max(0.0).sqrt();
        if !gradients {
            (value, DVector::zeros(0), DMatrix::zeros(0, 0))
        } else {
            let partial = lm.transpose() * &w / value;
            let m = -(&w * w.transpose()) / (2.0 * value);
            (value, partial, m)
        }
    };
    if !gradients {
        return Ok(SParts { value, partial, g_a: DMatrix::zeros(0, 0), g_b: None });
    }
    let pmp = p.transpose() * &m_eff * &p;
    let (g_a, g_b) = match &b {
        Some(b) => (-2.0 * &pmp * b * a_inv.transpose(), Some(pmp)),
        None => {
            let inner = &a_inv * lm.transpose() * &m_eff * &lm * &a_inv;
            (-inner.transpose(), None)
        }
    };
    Ok(SParts { value, partial, g_a, g_b })
}

/// Plug-in effect size `S(θ*)` on the model's sample, in the model's
/// covariance mode. `signed` requires a single-row contrast.
pub fn s_map(
    model: &FittedModel,
    l: &ContrastMatrix,
    signed: bool,
    theta: &DVector<f64>,
) -> Result<f64> {
    let l = widen(model, l);
    Ok(s_parts(model, &l, signed, theta, false)?.value)
}

/// Analytic derivative bundle at `θ̂` (with `β₀ = 0`).
pub fn derivative_bundle(
    model: &FittedModel,
    l: &ContrastMatrix,
    signed: bool,
) -> Result<DerivativeBundle> {
    let l = widen(model, l);
    let theta = model.theta();
    if !signed {
        let value = s_parts(model, &l, false, theta, false)?.value;
        if value <= BOUNDARY_THRESHOLD / (l.m1() as f64).sqrt() {
            return Err(Error::BoundaryGradient(value));
        }
    }
    let parts = s_parts(model, &l, signed, theta, true)?;
    let robust = matches!(model.cov_mode(), CovMode::Robust(_));
    let d_a_d_theta = if robust {
        model.bread_jacobian_at(theta)
    } else {
        model.model_bread_jacobian_at(theta)
    };
    let d_b_d_theta = model.meat_jacobian_at(theta);
    let m = model.m();
    let d_s_d_a = vec_of(&parts.g_a);
    let d_s_d_b = parts.g_b.as_ref().map_or_else(|| DVector::zeros(m * m), vec_of);
    let mut total = parts.partial.clone() + &d_a_d_theta * &d_s_d_a;
    if parts.g_b.is_some() {
        total += &d_b_d_theta * &d_s_d_b;
    }
    let bundle = DerivativeBundle {
        value: parts.value,
        d_s_d_theta: total,
        partial: parts.partial,
        d_s_d_a,
        d_s_d_b,
        d_a_d_theta,
        d_b_d_theta,
    };
    if bundle.d_s_d_theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllConditioned("non-finite effect-size gradient".into()));
    }
    Ok(bundle)
}

/// Central-difference total derivative of the plug-in map.
pub fn numeric_total_derivative(
    model: &FittedModel,
    l: &ContrastMatrix,
    signed: bool,
) -> Result<DVector<f64>> {
    let l = widen(model, l);
    let theta = model.theta();
    let mut out = DVector::zeros(theta.len());
    for k in 0..theta.len() {
        let h = FD_STEP * theta[k].abs().max(1.0);
        let mut up = theta.clone();
        let mut down = theta.clone();
        up[k] += h;
        down[k] -= h;
        let f_up = s_parts(model, &l, signed, &up, false)?.value;
        let f_down = s_parts(model, &l, signed, &down, false)?.value;
        out[k] = (f_up - f_down) / (2.0 * h);
    }
    Ok(out)
}

/// `Σ̂_θ` entering the delta method.
///
/// Robust modes use the sandwich with the model's HC flavor. Model-based
/// logistic uses `Â⁻¹`. Model-based linear uses the HC0 sandwich over the
/// joint `(β, φ)` estimating equations, since the normal working likelihood
/// is not assumed correct.
pub fn delta_covariance(model: &FittedModel) -> Result<DMatrix<f64>> {
    match (model.cov_mode(), model.kind()) {
        (CovMode::ModelBased, FamilyKind::Linear) => {
            let a_inv = checked_inverse(model.bread(), "bread")?;
            Ok(&a_inv * model.meat() * a_inv.transpose())
        }
        _ => Ok(covariance(model)?.sigma_theta),
    }
}

/// `σ̂_S²`, falling back to 1 at the unsigned boundary.
pub fn resi_variance(model: &FittedModel, l: &ContrastMatrix, signed: bool) -> Result<f64> {
    let bundle = match derivative_bundle(model, l, signed) {
        Ok(b) => b,
        Err(Error::BoundaryGradient(_)) => return Ok(1.0),
        Err(e) => return Err(e),
    };
    let sigma = delta_covariance(model)?;
    let g = &bundle.d_s_d_theta;
    let v = g.dot(&(&sigma * g));
    if !v.is_finite() || v <= 0.0 {
        return Err(Error::IllConditioned(format!("effect-size variance {v}")));
    }
    Ok(v)
}

/// Wald statistics, point estimate, and `σ̂_S` for one hypothesis.
pub fn estimate_resi(
    model: &FittedModel,
    l: &ContrastMatrix,
    variant: ResiVariant,
) -> Result<(WaldStatistics, ResiEstimate)> {
    let cov = covariance(model)?;
    let stats = wald_statistics(model, &cov, l, &DVector::zeros(l.m1()))?;
    let point = resi_point(&stats, variant)?;
    let sigma = resi_variance(model, l, variant.is_signed())?.sqrt();
    Ok((stats, point.with_sigma(sigma)))
}
