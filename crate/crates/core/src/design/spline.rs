//! Natural cubic spline basis.
//!
//! Truncated-power construction: with knots `k_0 < ... < k_{K-1}` (boundary
//! knots at the ends) the basis without intercept is
//!
//! ```text
//! N_1(u) = u,   N_{j+2}(u) = d_j(u) - d_{K-2}(u),   j = 0..K-3
//! d_j(u) = ((u - k_j)_+^3 - (u - k_{K-1})_+^3) / (k_{K-1} - k_j)
//! ```
//!
//! which spans the natural cubic splines (linear outside the boundary knots).
//! The predictor is mapped to `[0, 1]` first to keep the columns well scaled;
//! an affine change of variable leaves the spanned space unchanged.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalSpline {
    /// Knots on the original scale, boundary knots included.
    knots: Vec<f64>,
}

impl NaturalSpline {
    /// Places `df - 1` interior knots at equally spaced quantiles of `x`
    /// and boundary knots at its range.
    pub fn fit(x: &[f64], df: usize) -> Result<Self> {
        if df == 0 {
            return Err(Error::KnotPlacement("df must be at least 1".into()));
        }
        let mut sorted: Vec<f64> = x.to_vec();
        if sorted.iter().any(|v| !v.is_finite()) {
            return Err(Error::KnotPlacement("non-finite predictor value".into()));
        }
        sorted.sort_by(|a, b| a.total_cmp(b));
        let mut distinct = sorted.clone();
        distinct.dedup();
        if distinct.len() < df + 1 {
            return Err(Error::KnotPlacement(format!(
                "{} distinct values, need at least {}",
                distinct.len(),
                df + 1
            )));
        }
        let mut knots = Vec::with_capacity(df + 1);
        knots.push(sorted[0]);
        for k in 1..df {
            knots.push(quantile_sorted(&sorted, k as f64 / df as f64));
        }
        knots.push(sorted[sorted.len() - 1]);
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::KnotPlacement(format!(
                "tied quantile knots {knots:?}"
            )));
        }
        Ok(Self { knots })
    }

    pub fn df(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Evaluates the basis at arbitrary points (extrapolation is linear).
    pub fn evaluate(&self, x: &[f64]) -> DMatrix<f64> {
        let lo = self.knots[0];
        let span = self.knots[self.knots.len() - 1] - lo;
        let scaled: Vec<f64> = self.knots.iter().map(|k| (k - lo) / span).collect();
        let last = scaled.len() - 1;
        let d = |j: usize, u: f64| -> f64 {
            let a = (u - scaled[j]).max(0.0).powi(3);
            let b = (u - scaled[last]).max(0.0).powi(3);
            (a - b) / (scaled[last] - scaled[j])
        };
        let df = self.df();
        DMatrix::from_fn(x.len(), df, |i, col| {
            let u = (x[i] - lo) / span;
            if col == 0 {
                u
            } else {
                d(col - 1, u) - d(last - 1, u)
            }
        })
    }
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Natural spline basis matrix of `x` with `df` columns.
pub fn natural_spline_basis(x: &[f64], df: usize) -> Result<DMatrix<f64>> {
    Ok(NaturalSpline::fit(x, df)?.evaluate(x))
}
