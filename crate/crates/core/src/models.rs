//! Estimating-equation model families, fitting, and the bread/meat plug-in
//! estimators.
//!
//! Linear coefficients use `ψ_i = x_i (y_i - x_iᵀβ)`; when the dispersion is
//! part of the parameter (model-based linear fits) it is appended with
//! `ψ_φ,i = (y_i - x_iᵀβ)² - φ`. Logistic uses `ψ_i = x_i (y_i - expit(x_iᵀβ))`.
//!
//! Besides the estimates at `θ̂`, a [`FittedModel`] can evaluate the bread and
//! meat at any other parameter value on the same sample, together with their
//! Jacobians. Those plug-in maps are what the variance engine differentiates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::linalg::{checked_inverse, condition_number, spd_inverse, MAX_CONDITION};

pub const SCORE_TOLERANCE: f64 = 1e-10;
pub const MAX_NEWTON_ITERATIONS: usize = 100;
pub const MAX_STEP_HALVINGS: usize = 30;
const PROBABILITY_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Linear,
    Logistic,
}

impl std::fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FamilyKind::Linear => "linear",
            FamilyKind::Logistic => "logistic",
        })
    }
}

impl std::str::FromStr for FamilyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(FamilyKind::Linear),
            "logistic" => Ok(FamilyKind::Logistic),
            other => Err(Error::Parameter(format!("unknown family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFamily {
    pub kind: FamilyKind,
    /// Append the dispersion to θ in model-based linear fits.
    pub include_dispersion: bool,
}

impl ModelFamily {
    pub fn new(kind: FamilyKind, include_dispersion: bool) -> Result<Self> {
        if include_dispersion && kind != FamilyKind::Linear {
            return Err(Error::Parameter("dispersion is only defined for the linear family".into()));
        }
        Ok(Self { kind, include_dispersion })
    }

    /// Linear family with the dispersion in θ (the default).
    pub fn linear() -> Self {
        Self { kind: FamilyKind::Linear, include_dispersion: true }
    }

    pub fn logistic() -> Self {
        Self { kind: FamilyKind::Logistic, include_dispersion: false }
    }

    /// The family's default for a given kind.
    pub fn of(kind: FamilyKind) -> Self {
        match kind {
            FamilyKind::Linear => Self::linear(),
            FamilyKind::Logistic => Self::logistic(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HcFlavor {
    Hc0,
    Hc3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CovMode {
    Robust(HcFlavor),
    ModelBased,
}

impl CovMode {
    /// HC3 for linear, HC0 for logistic.
    pub fn default_for(kind: FamilyKind) -> Self {
        match kind {
            FamilyKind::Linear => CovMode::Robust(HcFlavor::Hc3),
            FamilyKind::Logistic => CovMode::Robust(HcFlavor::Hc0),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            CovMode::Robust(HcFlavor::Hc0) => "hc0",
            CovMode::Robust(HcFlavor::Hc3) => "hc3",
            CovMode::ModelBased => "model",
        }
    }
}

impl std::fmt::Display for CovMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for CovMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hc0" => Ok(CovMode::Robust(HcFlavor::Hc0)),
            "hc3" => Ok(CovMode::Robust(HcFlavor::Hc3)),
            "model" => Ok(CovMode::ModelBased),
            other => Err(Error::Parameter(format!("unknown covariance mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    family: ModelFamily,
    cov_mode: CovMode,
    theta: DVector<f64>,
    bread: DMatrix<f64>,
    meat: DMatrix<f64>,
    residuals: DVector<f64>,
    leverages: Option<DVector<f64>>,
    mu: Option<DVector<f64>>,
    /// Residual variance with denominator `n - p` (linear only).
    dispersion: Option<f64>,
    x: DMatrix<f64>,
    y: DVector<f64>,
    iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModelRecord {
    pub theta: Vec<f64>,
    pub bread: Vec<Vec<f64>>,
    pub meat: Vec<Vec<f64>>,
    pub cov_mode: String,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub sigma_theta: DMatrix<f64>,
    pub mode: CovMode,
}

fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// `(1/n) Σ_i w_i x_i x_iᵀ`.
fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut xw = x.clone();
    for (mut row, wi) in xw.row_iter_mut().zip(w.iter()) {
        row *= *wi;
    }
    (x.transpose() * xw) / n
}

/// `m × m²` matrix whose row `k` is `vec((1/n) Σ_i c_i x_ik x_i x_iᵀ)`.
fn gram_jacobian(x: &DMatrix<f64>, c: &DVector<f64>) -> DMatrix<f64> {
    let m = x.ncols();
    let mut out = DMatrix::zeros(m, m * m);
    for k in 0..m {
        let w = c.component_mul(&x.column(k));
        let g = weighted_gram(x, &w);
        out.row_mut(k).copy_from_slice(g.as_slice());
    }
    out
}

/// Fits `θ̂` by solving the sample estimating equation.
pub fn fit(
    family: ModelFamily,
    design: &DesignMatrix,
    y: &[f64],
    cov_mode: CovMode,
) -> Result<FittedModel> {
    fit_matrix(family, design.x().clone(), DVector::from_column_slice(y), cov_mode)
}

pub fn fit_matrix(
    family: ModelFamily,
    x: DMatrix<f64>,
    y: DVector<f64>,
    cov_mode: CovMode,
) -> Result<FittedModel> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::Schema(format!("outcome has {} rows, design has {n}", y.len())));
    }
    if n <= p {
        return Err(Error::InsufficientDf { n, m: p });
    }
    match family.kind {
        FamilyKind::Linear => fit_linear(family, x, y, cov_mode),
        FamilyKind::Logistic => {
            if cov_mode == CovMode::Robust(HcFlavor::Hc3) {
                return Err(Error::UnsupportedFlavor(
                    "HC3 requires weight adjustments that depend on β for logistic models".into(),
                ));
            }
            if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::Schema("logistic outcome must be coded 0/1".into()));
            }
            fit_logistic(family, x, y, cov_mode)
        }
    }
}

fn gram_inverse(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = x.nrows() as f64;
    let xtx = x.transpose() * x / n;
    if condition_number(&xtx) > MAX_CONDITION {
        return Err(Error::SingularSystem("design is rank deficient".into()));
    }
    spd_inverse(&xtx, "XᵀX/n").map_err(|_| Error::SingularSystem("design is rank deficient".into()))
}

fn fit_linear(
    family: ModelFamily,
    x: DMatrix<f64>,
    y: DVector<f64>,
    cov_mode: CovMode,
) -> Result<FittedModel> {
    let (n, p) = x.shape();
    let gram_inv = gram_inverse(&x)?;
    let xty = x.transpose() * &y / n as f64;
    let mut beta = &gram_inv * &xty;
    // one step of iterative refinement on the normal equations
    let r0 = &y - &x * &beta;
    beta += &gram_inv * (x.transpose() * r0 / n as f64);
    let residuals = &y - &x * &beta;
    let leverages = DVector::from_iterator(
        n,
        x.row_iter().map(|row| (row * &gram_inv * row.transpose())[(0, 0)] / n as f64),
    );
    let rss = residuals.norm_squared();
    let dispersion = rss / (n - p) as f64;
    let with_phi = family.include_dispersion && cov_mode == CovMode::ModelBased;
    let theta = if with_phi {
        let mut t = DVector::zeros(p + 1);
        t.rows_mut(0, p).copy_from(&beta);
        t[p] = rss / n as f64;
        t
    } else {
        beta
    };
    let mut model = FittedModel {
        family,
        cov_mode,
        theta,
        bread: DMatrix::zeros(0, 0),
        meat: DMatrix::zeros(0, 0),
        residuals,
        leverages: Some(leverages),
        mu: None,
        dispersion: Some(dispersion),
        x,
        y,
        iterations: 0,
    };
    if matches!(cov_mode, CovMode::Robust(HcFlavor::Hc3)) {
        if let Some(h) = model.leverages.as_ref().and_then(|h| h.iter().find(|h| **h >= 1.0 - 1e-12)) {
            return Err(Error::SingularSystem(format!("observation with leverage {h}")));
        }
    }
    model.bread = model.bread_at(&model.theta);
    model.meat = model.meat_at(&model.theta);
    Ok(model)
}

fn fit_logistic(
    family: ModelFamily,
    x: DMatrix<f64>,
    y: DVector<f64>,
    cov_mode: CovMode,
) -> Result<FittedModel> {
    let (n, p) = x.shape();
    let nf = n as f64;
    gram_inverse(&x)?;

    let score_at = |beta: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        let mu = (&x * beta).map(expit);
        let score = x.transpose() * (&y - &mu) / nf;
        (score, mu)
    };

    let mut beta = DVector::zeros(p);
    let (mut score, mut mu) = score_at(&beta);
    let mut iterations = 0;
    while crate::linalg::max_abs(&score) > SCORE_TOLERANCE {
        if iterations == MAX_NEWTON_ITERATIONS {
            return Err(Error::Separation(format!(
                "no convergence in {MAX_NEWTON_ITERATIONS} Newton iterations"
            )));
        }
        iterations += 1;
        let w = mu.map(|m| m * (1.0 - m));
        let info = weighted_gram(&x, &w);
        let chol = info.cholesky().ok_or_else(|| {
            Error::Separation("information matrix lost positive definiteness".into())
        })?;
        let step = chol.solve(&score);
        let current = score.norm();
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_STEP_HALVINGS {
            let candidate = &beta + &step * scale;
            let (s, m) = score_at(&candidate);
            if s.norm() < current {
                accepted = Some((candidate, s, m));
                break;
            }
            scale *= 0.5;
        }
        let (b, s, m) = accepted.ok_or_else(|| {
            Error::Separation("score norm did not decrease after step halving".into())
        })?;
        beta = b;
        score = s;
        mu = m;
    }
    if mu.iter().any(|m| *m < PROBABILITY_FLOOR || *m > 1.0 - PROBABILITY_FLOOR) {
        return Err(Error::Separation("fitted probabilities at 0 or 1".into()));
    }
    let residuals = &y - &mu;
    let mut model = FittedModel {
        family,
        cov_mode,
        theta: beta,
        bread: DMatrix::zeros(0, 0),
        meat: DMatrix::zeros(0, 0),
        residuals,
        leverages: None,
        mu: Some(mu),
        dispersion: None,
        x,
        y,
        iterations,
    };
    model.bread = model.bread_at(&model.theta);
    model.meat = model.meat_at(&model.theta);
    Ok(model)
}

impl FittedModel {
    pub fn family(&self) -> ModelFamily {
        self.family
    }

    pub fn kind(&self) -> FamilyKind {
        self.family.kind
    }

    pub fn cov_mode(&self) -> CovMode {
        self.cov_mode
    }

    /// θ̂: coefficients, with `φ̂` appended when the dispersion is estimated
    /// jointly.
    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn coefficients(&self) -> DVector<f64> {
        self.theta.rows(0, self.p()).into_owned()
    }

    /// Estimating-equation bread `Â_θ`.
    pub fn bread(&self) -> &DMatrix<f64> {
        &self.bread
    }

    /// Meat `B̂_θ` for this model's covariance flavor (HC0 in model-based mode).
    pub fn meat(&self) -> &DMatrix<f64> {
        &self.meat
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Number of regression coefficients.
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Length of θ.
    pub fn m(&self) -> usize {
        self.theta.len()
    }

    pub fn has_dispersion(&self) -> bool {
        self.theta.len() > self.p()
    }

    pub fn residuals(&self) -> &DVector<f64> {
        &self.residuals
    }

    pub fn leverages(&self) -> Option<&DVector<f64>> {
        self.leverages.as_ref()
    }

    pub fn mu(&self) -> Option<&DVector<f64>> {
        self.mu.as_ref()
    }

    /// Residual variance with denominator `n - p` (linear only).
    pub fn dispersion(&self) -> Option<f64> {
        self.dispersion
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn record(&self) -> FittedModelRecord {
        FittedModelRecord {
            theta: self.theta.iter().copied().collect(),
            bread: rows_of(&self.bread),
            meat: rows_of(&self.meat),
            cov_mode: self.cov_mode.label().to_string(),
            n: self.n(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.record())?)
    }

    fn hc_weights(&self) -> DVector<f64> {
        match (self.cov_mode, &self.leverages) {
            (CovMode::Robust(HcFlavor::Hc3), Some(h)) => h.map(|h| 1.0 / ((1.0 - h) * (1.0 - h))),
            _ => DVector::from_element(self.n(), 1.0),
        }
    }

    /// Linear residuals `y - Xβ*` or logistic `y - μ(β*)`, and `μ(β*)` for
    /// logistic.
    fn response_at(&self, theta: &DVector<f64>) -> (DVector<f64>, Option<DVector<f64>>) {
        let beta = theta.rows(0, self.p());
        let eta = &self.x * beta;
        match self.family.kind {
            FamilyKind::Linear => (&self.y - eta, None),
            FamilyKind::Logistic => {
                let mu = eta.map(expit);
                (&self.y - &mu, Some(mu))
            }
        }
    }

    /// `n × m` matrix of `ψ_i(θ*)` (unadjusted, i.e. HC0 residuals).
    pub fn estimating_functions(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let (r, _) = self.response_at(theta);
        let (n, p) = self.x.shape();
        let mut psi = DMatrix::zeros(n, theta.len());
        for i in 0..n {
            for j in 0..p {
                psi[(i, j)] = self.x[(i, j)] * r[i];
            }
            if theta.len() > p {
                psi[(i, p)] = r[i] * r[i] - theta[p];
            }
        }
        psi
    }

    /// `(1/n) Σ ψ_i(θ*)`.
    pub fn estimating_equation(&self, theta: &DVector<f64>) -> DVector<f64> {
        let psi = self.estimating_functions(theta);
        psi.row_sum().transpose() / self.n() as f64
    }

    /// Bread `A(θ*) = -(1/n) Σ ψ'_i(θ*)` on this sample.
    pub fn bread_at(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let (r, mu) = self.response_at(theta);
        let p = self.p();
        let n = self.n() as f64;
        let coef = match self.family.kind {
            FamilyKind::Linear => weighted_gram(&self.x, &DVector::from_element(self.n(), 1.0)),
            FamilyKind::Logistic => {
                let mu = mu.expect("logistic has μ");
                weighted_gram(&self.x, &mu.map(|m| m * (1.0 - m)))
            }
        };
        if theta.len() == p {
            return coef;
        }
        let mut a = DMatrix::zeros(p + 1, p + 1);
        a.view_mut((0, 0), (p, p)).copy_from(&coef);
        let cross = self.x.transpose() * &r * (2.0 / n);
        a.view_mut((p, 0), (1, p)).copy_from(&cross.transpose());
        a[(p, p)] = 1.0;
        a
    }

    /// Meat `B(θ*) = (1/n) Σ ψ_i ψ_iᵀ`, with HC3 residual deflation when the
    /// model is robust HC3.
    pub fn meat_at(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut psi = self.estimating_functions(theta);
        let w = self.hc_weights();
        let p = self.p();
        for (i, wi) in w.iter().enumerate() {
            let s = wi.sqrt();
            for j in 0..p {
                psi[(i, j)] *= s;
            }
        }
        psi.transpose() * psi / self.n() as f64
    }

    /// Meat with an explicit flavor at `θ̂` (HC3 is linear-only).
    pub fn meat_with(&self, flavor: HcFlavor) -> Result<DMatrix<f64>> {
        match (flavor, self.family.kind) {
            (HcFlavor::Hc3, FamilyKind::Logistic) => Err(Error::UnsupportedFlavor(
                "HC3 is not available for logistic models".into(),
            )),
            (HcFlavor::Hc0, _) => {
                let psi = self.estimating_functions(&self.theta);
                Ok(psi.transpose() * psi / self.n() as f64)
            }
            (HcFlavor::Hc3, FamilyKind::Linear) => {
                let mut psi = self.estimating_functions(&self.theta);
                let h = self.leverages.as_ref().expect("linear fits carry leverages");
                for i in 0..self.n() {
                    let s = 1.0 / (1.0 - h[i]);
                    for j in 0..self.p() {
                        psi[(i, j)] *= s;
                    }
                }
                Ok(psi.transpose() * psi / self.n() as f64)
            }
        }
    }

    /// The matrix whose inverse is the model-based covariance of θ at θ*:
    /// `Σ μ(1-μ) x xᵀ / n` for logistic, `XᵀX / (n φ*)` for linear (with a unit
    /// entry for φ when it is part of θ).
    pub fn model_bread_at(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        match self.family.kind {
            FamilyKind::Logistic => self.bread_at(theta),
            FamilyKind::Linear => {
                let p = self.p();
                let phi = self.dispersion_at(theta);
                let gram = weighted_gram(&self.x, &DVector::from_element(self.n(), 1.0)) / phi;
                if theta.len() == p {
                    return gram;
                }
                let mut a = DMatrix::zeros(p + 1, p + 1);
                a.view_mut((0, 0), (p, p)).copy_from(&gram);
                a[(p, p)] = 1.0;
                a
            }
        }
    }

    fn dispersion_at(&self, theta: &DVector<f64>) -> f64 {
        if theta.len() > self.p() {
            theta[self.p()]
        } else {
            self.dispersion.expect("linear fits carry a dispersion")
        }
    }

    /// Jacobian of `vec(A(θ*))`, as an `m × m²` matrix with row `k` equal to
    /// `vec(∂A/∂θ_k)`.
    pub fn bread_jacobian_at(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let m = theta.len();
        let p = self.p();
        let mut out = DMatrix::zeros(m, m * m);
        match self.family.kind {
            FamilyKind::Logistic => {
                let (_, mu) = self.response_at(theta);
                let mu = mu.expect("logistic has μ");
                let c = mu.map(|m| m * (1.0 - m) * (1.0 - 2.0 * m));
                out.copy_from(&gram_jacobian(&self.x, &c));
            }
            FamilyKind::Linear => {
                if m > p {
                    // A[φ, j] = (2/n) Σ r_i x_ij, so ∂A[φ, j]/∂β_k = -(2/n) Σ x_ik x_ij
                    let gram = weighted_gram(&self.x, &DVector::from_element(self.n(), 1.0));
                    for k in 0..p {
                        for j in 0..p {
                            out[(k, j * m + p)] = -2.0 * gram[(k, j)];
                        }
                    }
                }
            }
        }
        out
    }

    /// Jacobian of `vec(B(θ*))` for this model's meat, row `k` = `vec(∂B/∂θ_k)`.
    pub fn meat_jacobian_at(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let m = theta.len();
        let p = self.p();
        let (r, mu) = self.response_at(theta);
        let w = self.hc_weights();
        let c = match self.family.kind {
            FamilyKind::Linear => -2.0 * r.component_mul(&w),
            FamilyKind::Logistic => {
                let mu = mu.expect("logistic has μ");
                let v = mu.map(|m| m * (1.0 - m));
                -2.0 * r.component_mul(&v)
            }
        };
        let coef = gram_jacobian(&self.x, &c);
        if m == p {
            return coef;
        }
        // joint (β, φ) meat: blocks r² x xᵀ, (r³ - φ r) x, (r² - φ)²
        let n = self.n() as f64;
        let phi = theta[p];
        let mut out = DMatrix::zeros(m, m * m);
        for k in 0..p {
            for a in 0..p {
                for b in 0..p {
                    out[(k, b * m + a)] = coef[(k, b * p + a)];
                }
            }
        }
        for i in 0..self.n() {
            let ri = r[i];
            let xi = self.x.row(i);
            // ∂/∂β_k of (r³ - φ r) x_a  = -(3r² - φ) x_k x_a
            let dcross = -(3.0 * ri * ri - phi) / n;
            // ∂/∂β_k of (r² - φ)² = -4 r (r² - φ) x_k
            let dvar = -4.0 * ri * (ri * ri - phi) / n;
            for k in 0..p {
                for a in 0..p {
                    let v = dcross * xi[k] * xi[a];
                    out[(k, p * m + a)] += v;
                    out[(k, a * m + p)] += v;
                }
                out[(k, p * m + p)] += dvar * xi[k];
            }
            // ∂/∂φ: cross block -r x_a, variance block -2 (r² - φ)
            for a in 0..p {
                let v = -ri * xi[a] / n;
                out[(p, p * m + a)] += v;
                out[(p, a * m + p)] += v;
            }
            out[(p, p * m + p)] += -2.0 * (ri * ri - phi) / n;
        }
        out
    }

    /// Jacobian of `vec(model_bread_at(θ*))`.
    pub fn model_bread_jacobian_at(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        match self.family.kind {
            FamilyKind::Logistic => self.bread_jacobian_at(theta),
            FamilyKind::Linear => {
                let m = theta.len();
                let p = self.p();
                let mut out = DMatrix::zeros(m, m * m);
                if m > p {
                    let phi = theta[p];
                    let gram = weighted_gram(&self.x, &DVector::from_element(self.n(), 1.0));
                    for a in 0..p {
                        for b in 0..p {
                            out[(p, b * m + a)] = -gram[(a, b)] / (phi * phi);
                        }
                    }
                }
                out
            }
        }
    }
}

/// Bread `Â_θ` of a fitted model.
pub fn bread(model: &FittedModel) -> &DMatrix<f64> {
    model.bread()
}

/// Meat `B̂_θ` with an explicit flavor.
pub fn meat(model: &FittedModel, flavor: HcFlavor) -> Result<DMatrix<f64>> {
    model.meat_with(flavor)
}

/// Covariance of `√n(θ̂ - θ)`: the sandwich in robust mode, the model-based
/// form otherwise.
pub fn covariance(model: &FittedModel) -> Result<CovarianceEstimate> {
    let sigma_theta = match model.cov_mode {
        CovMode::Robust(_) => {
            let a_inv = checked_inverse(&model.bread, "bread")?;
            &a_inv * &model.meat * &a_inv
        }
        CovMode::ModelBased => match model.family.kind {
            FamilyKind::Logistic => checked_inverse(&model.bread, "bread")?,
            FamilyKind::Linear => {
                let p = model.p();
                let coef = model.bread.view((0, 0), (p, p)).into_owned();
                let phi = model.dispersion.expect("linear fits carry a dispersion");
                let inv = checked_inverse(&coef, "bread")? * phi;
                if model.has_dispersion() {
                    let mut s = DMatrix::zeros(p + 1, p + 1);
                    s.view_mut((0, 0), (p, p)).copy_from(&inv);
                    s[(p, p)] = 2.0 * phi * phi;
                    s
                } else {
                    inv
                }
            }
        },
    };
    Ok(CovarianceEstimate { sigma_theta, mode: model.cov_mode })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::relative_error;

    fn design(rows: &[&[f64]]) -> DMatrix<f64> {
        let m = rows[0].len();
        DMatrix::from_fn(rows.len(), m, |i, j| rows[i][j])
    }

    fn toy_linear() -> (DMatrix<f64>, DVector<f64>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..5 {
            x.extend([1.0, 0.0]);
            y.push(1.0);
            x.extend([1.0, 1.0]);
            y.push(3.0);
        }
        (DMatrix::from_row_slice(10, 2, &x), DVector::from_vec(y))
    }

    #[test]
    fn exact_interpolation() {
        let (x, y) = toy_linear();
        let m = fit_matrix(ModelFamily::linear(), x.clone(), y.clone(), CovMode::default_for(FamilyKind::Linear)).unwrap();
        assert!((m.theta()[0] - 1.0).abs() < 1e-12 && (m.theta()[1] - 2.0).abs() < 1e-12);
        assert!(m.residuals().amax() < 1e-12);
        assert!(m.meat().amax() < 1e-20);
        let mb = fit_matrix(ModelFamily::linear(), x, y, CovMode::ModelBased).unwrap();
        assert_eq!(mb.m(), 3);
        assert!(mb.theta()[2].abs() < 1e-20);
    }

    #[test]
    fn bread_of_two_row_design() {
        let x = design(&[&[1.0, 0.0], &[1.0, 1.0], &[1.0, 0.0], &[1.0, 1.0]]);
        let y = DVector::from_vec(vec![0.3, 1.1, -0.2, 0.9]);
        let m = fit_matrix(ModelFamily::linear(), x, y, CovMode::Robust(HcFlavor::Hc0)).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 0.5]);
        assert!(relative_error(m.bread(), &want) < 1e-15);
    }

    #[test]
    fn hc0_meat_direct_sum() {
        // residuals (1, -1) at X = [[1,0],[1,1]] via an explicit evaluation point
        let x = design(&[&[1.0, 0.0], &[1.0, 1.0], &[1.0, 0.0]]);
        let y = DVector::from_vec(vec![1.0, -1.0, 1.0]);
        let m = fit_matrix(ModelFamily::linear(), x.clone(), y.clone(), CovMode::Robust(HcFlavor::Hc0)).unwrap();
        let zero = DVector::zeros(2);
        let b = m.meat_at(&zero);
        // rows 1 and 3 identical: (1/3)(2·[[1,0],[0,0]] + [[1,1],[1,1]])
        let want = DMatrix::from_row_slice(2, 2, &[1.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        assert!(relative_error(&b, &want) < 1e-15);
        let x2 = design(&[&[1.0, 0.0], &[1.0, 1.0]]);
        let psi = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, -1.0]);
        let _ = x2;
        let direct = psi.transpose() * &psi / 2.0;
        let want2 = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 0.5]);
        assert!(relative_error(&direct, &want2) < 1e-15);
    }

    #[test]
    fn hc3_balanced_design_rescales_hc0() {
        // balanced one-way layout: every leverage equals p/n
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..12 {
            rows.extend([1.0, (i % 2) as f64]);
            y.push(((i * 7) % 5) as f64 * 0.3 + (i % 2) as f64);
        }
        let x = DMatrix::from_row_slice(12, 2, &rows);
        let y = DVector::from_vec(y);
        let m = fit_matrix(ModelFamily::linear(), x, y, CovMode::Robust(HcFlavor::Hc3)).unwrap();
        let h = m.leverages().unwrap();
        assert!(h.iter().all(|v| (v - h[0]).abs() < 1e-14));
        let hc0 = m.meat_with(HcFlavor::Hc0).unwrap();
        let hc3 = m.meat_with(HcFlavor::Hc3).unwrap();
        let factor = 1.0 / ((1.0 - h[0]) * (1.0 - h[0]));
        assert!(relative_error(&hc3, &(hc0 * factor)) < 1e-13);
    }

    #[test]
    fn logistic_separation_and_flavors() {
        let x = design(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 1.0], &[1.0, 1.0], &[1.0, 0.0], &[1.0, 1.0]]);
        let y = DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        assert!(matches!(
            fit_matrix(ModelFamily::logistic(), x.clone(), y.clone(), CovMode::Robust(HcFlavor::Hc0)),
            Err(Error::Separation(_))
        ));
        assert!(matches!(
            fit_matrix(ModelFamily::logistic(), x.clone(), y, CovMode::Robust(HcFlavor::Hc3)),
            Err(Error::UnsupportedFlavor(_))
        ));
        let bad = DVector::from_vec(vec![0.0, 2.0, 1.0, 1.0, 0.0, 1.0]);
        assert!(fit_matrix(ModelFamily::logistic(), x, bad, CovMode::ModelBased).is_err());
        assert!(ModelFamily::new(FamilyKind::Logistic, true).is_err());
    }

    #[test]
    fn logistic_bread_at_zero() {
        let x = design(&[&[1.0, 0.2], &[1.0, -1.0], &[1.0, 0.7], &[1.0, 1.5], &[1.0, -0.4]]);
        let y = DVector::from_vec(vec![0.0, 1.0, 1.0, 0.0, 1.0]);
        let m = fit_matrix(ModelFamily::logistic(), x.clone(), y, CovMode::ModelBased).unwrap();
        let a0 = m.bread_at(&DVector::zeros(2));
        let want = x.transpose() * &x / 5.0 * 0.25;
        assert!(relative_error(&a0, &want) < 1e-15);
        assert!(crate::linalg::max_abs(&m.estimating_equation(m.theta())) <= 1e-10);
        let cov = covariance(&m).unwrap();
        let ident = &cov.sigma_theta * m.bread();
        assert!(relative_error(&ident, &DMatrix::identity(2, 2)) < 1e-10);
    }

    #[test]
    fn rank_deficient_rejected() {
        let x = design(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(
            fit_matrix(ModelFamily::linear(), x, y, CovMode::ModelBased),
            Err(Error::SingularSystem(_))
        ));
    }

    #[test]
    fn json_record_fields() {
        let (x, mut y) = toy_linear();
        y[0] += 0.5;
        let m = fit_matrix(ModelFamily::linear(), x, y, CovMode::Robust(HcFlavor::Hc3)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        for key in ["theta", "bread", "meat", "cov_mode", "n"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["cov_mode"], "hc3");
    }

    fn noisy_design(n: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() * 2.0 - 1.0 });
        let y_lin = DVector::from_fn(n, |i, _| x[(i, 1)] - 0.5 * x[(i, 2)] + rng.random::<f64>() * 3.0);
        let y_bin = DVector::from_fn(n, |i, _| {
            let mu = expit(0.3 + x[(i, 1)] - x[(i, 2)]);
            if rng.random::<f64>() < mu { 1.0 } else { 0.0 }
        });
        (x, y_lin, y_bin)
    }

    fn fd_jacobian(f: impl Fn(&DVector<f64>) -> DMatrix<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        let m = theta.len();
        let mut out = DMatrix::zeros(m, f(theta).len());
        for k in 0..m {
            let h = 1e-5 * theta[k].abs().max(1.0);
            let (mut up, mut down) = (theta.clone(), theta.clone());
            up[k] += h;
            down[k] -= h;
            let d = (f(&up) - f(&down)) / (2.0 * h);
            out.row_mut(k).copy_from_slice(d.as_slice());
        }
        out
    }

    #[test]
    fn plug_in_jacobians_match_finite_differences() {
        let (x, y_lin, y_bin) = noisy_design(120, 3);
        let models = [
            fit_matrix(ModelFamily::linear(), x.clone(), y_lin.clone(), CovMode::Robust(HcFlavor::Hc3)).unwrap(),
            fit_matrix(ModelFamily::linear(), x.clone(), y_lin, CovMode::ModelBased).unwrap(),
            fit_matrix(ModelFamily::logistic(), x.clone(), y_bin.clone(), CovMode::Robust(HcFlavor::Hc0)).unwrap(),
            fit_matrix(ModelFamily::logistic(), x, y_bin, CovMode::ModelBased).unwrap(),
        ];
        for model in &models {
            // evaluate away from θ̂ so every block is exercised
            let theta = model.theta().map(|v| v + 0.1);
            let pairs = [
                (model.bread_jacobian_at(&theta), fd_jacobian(|t| model.bread_at(t), &theta)),
                (model.meat_jacobian_at(&theta), fd_jacobian(|t| model.meat_at(t), &theta)),
                (model.model_bread_jacobian_at(&theta), fd_jacobian(|t| model.model_bread_at(t), &theta)),
            ];
            for (analytic, numeric) in pairs {
                let scale = numeric.norm().max(1.0);
                assert!((analytic - &numeric).norm() / scale < 1e-6, "{:?}", model.cov_mode());
            }
            // bread is minus the mean Jacobian of ψ
            let theta = model.theta();
            let jac = fd_jacobian(|t| {
                let e = model.estimating_equation(t);
                DMatrix::from_column_slice(e.len(), 1, e.as_slice())
            }, theta);
            assert!(relative_error(&(-jac.transpose()), model.bread()) < 1e-6);
            assert!(crate::linalg::max_abs(&model.estimating_equation(theta)) <= 1e-8);
        }
    }

    #[test]
    fn sandwich_reconstruction_and_symmetry() {
        let (x, y_lin, _) = noisy_design(90, 4);
        let model = fit_matrix(ModelFamily::linear(), x, y_lin, CovMode::Robust(HcFlavor::Hc3)).unwrap();
        let cov = covariance(&model).unwrap();
        let a_inv = model.bread().clone().try_inverse().unwrap();
        let want = &a_inv * model.meat() * &a_inv;
        assert!(relative_error(&cov.sigma_theta, &want) <= 1e-12);
        assert!(relative_error(&cov.sigma_theta.transpose(), &cov.sigma_theta) <= 1e-14);
    }
}
