//! Dataset analysis: a coefficient table with signed RESI and a Type-II
//! ANOVA table with unsigned RESI.
//!
//! A main effect is tested in a refitted model that drops every interaction
//! containing it; interactions are tested in the full model. P-values use the
//! χ²_{m₁} law of the robust Wald statistic for both families.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::info;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{resample, MIN_REPLICATES};
use crate::design::{build_design, contrast_for_column, contrast_for_terms, parse_terms, DataTable, DesignMatrix, TermKind};
use crate::error::{Error, Result};
use crate::estimator::{resi_point, wald_statistics, ResiVariant};
use crate::intervals::{asymptotic_ci, check_alpha, CiBranch};
use crate::models::{covariance, fit, CovMode, FamilyKind, FittedModel, ModelFamily};
use crate::special::chi2_sf;
use crate::variance::estimate_resi;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub outcome: String,
    pub family: FamilyKind,
    pub terms: String,
    /// `None` selects HC3 for linear and HC0 for logistic models.
    pub cov: Option<CovMode>,
    pub alpha: f64,
    /// Number of bootstrap replicates, if any.
    pub bootstrap: Option<usize>,
    pub seed: u64,
}

impl AnalysisConfig {
    pub fn new(outcome: &str, family: FamilyKind, terms: &str) -> Self {
        Self {
            outcome: outcome.to_string(),
            family,
            terms: terms.to_string(),
            cov: None,
            alpha: 0.05,
            bootstrap: None,
            seed: 1,
        }
    }

    pub fn cov_mode(&self) -> CovMode {
        self.cov.unwrap_or_else(|| CovMode::default_for(self.family))
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if let Some(b) = self.bootstrap {
            if b < MIN_REPLICATES {
                return Err(Error::Parameter(format!(
                    "bootstrap needs at least {MIN_REPLICATES} replicates, got {b}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub term: String,
    pub estimate: f64,
    pub resi: f64,
    pub variant: ResiVariant,
    pub sigma_s: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub boot_lower: Option<f64>,
    pub boot_upper: Option<f64>,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaRow {
    pub term: String,
    pub df: usize,
    pub resi: f64,
    pub variant: ResiVariant,
    pub sigma_s: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub branch: CiBranch,
    pub boot_lower: Option<f64>,
    pub boot_upper: Option<f64>,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub family: FamilyKind,
    pub cov_mode: CovMode,
    pub outcome: String,
    pub terms: String,
    pub n: usize,
    pub alpha: f64,
    pub bootstrap: Option<usize>,
    pub bootstrap_failures: Option<usize>,
    pub seed: u64,
    pub coefficients: Vec<CoefficientRow>,
    pub anova: Vec<AnovaRow>,
}

/// One ANOVA test: the model it is evaluated in and the tested term.
#[derive(Debug, Clone)]
struct AnovaPlan {
    term: String,
    /// Interactions removed before refitting; empty means the full model.
    dropped: Vec<String>,
}

fn anova_plan(design: &DesignMatrix) -> Vec<AnovaPlan> {
    design
        .terms()
        .iter()
        .map(|t| {
            let dropped = if t.is_interaction() {
                Vec::new()
            } else {
                design
                    .terms()
                    .iter()
                    .filter(|u| matches!(&u.kind, TermKind::Interaction(a, b) if *a == t.name || *b == t.name))
                    .map(|u| u.name.clone())
                    .collect()
            };
            AnovaPlan { term: t.name.clone(), dropped }
        })
        .collect()
}

/// Designs of every distinct reduced model, keyed by the dropped terms.
fn reduced_designs(design: &DesignMatrix, plans: &[AnovaPlan]) -> Result<BTreeMap<Vec<String>, DesignMatrix>> {
    let mut out = BTreeMap::new();
    for p in plans {
        if p.dropped.is_empty() || out.contains_key(&p.dropped) {
            continue;
        }
        let keep: Vec<&str> = design.term_names().filter(|t| !p.dropped.iter().any(|d| d == t)).collect();
        out.insert(p.dropped.clone(), design.select_terms(&keep)?);
    }
    Ok(out)
}

struct Fits {
    full: FittedModel,
    reduced: BTreeMap<Vec<String>, FittedModel>,
}

impl Fits {
    fn model_for(&self, plan: &AnovaPlan) -> &FittedModel {
        if plan.dropped.is_empty() {
            &self.full
        } else {
            &self.reduced[&plan.dropped]
        }
    }
}

fn fit_all(
    family: ModelFamily,
    design: &DesignMatrix,
    reduced: &BTreeMap<Vec<String>, DesignMatrix>,
    y: &[f64],
    cov_mode: CovMode,
) -> Result<Fits> {
    let full = fit(family, design, y, cov_mode)?;
    let mut out = BTreeMap::new();
    for (dropped, d) in reduced {
        let m = fit(family, d, y, cov_mode).map_err(|e| e.in_term(&format!("model without {}", dropped.join(", "))))?;
        out.insert(dropped.clone(), m);
    }
    Ok(Fits { full, reduced: out })
}

fn contrast_in(model_design: &DesignMatrix, term: &str) -> Result<crate::design::ContrastMatrix> {
    contrast_for_terms(model_design, &[term]).map_err(|e| e.in_term(term))
}

/// Point estimates only, in table order: one signed value per coefficient,
/// then one unsigned value per ANOVA row.
fn point_estimates(
    fits: &Fits,
    design: &DesignMatrix,
    reduced: &BTreeMap<Vec<String>, DesignMatrix>,
    plans: &[AnovaPlan],
    signed: ResiVariant,
    unsigned: ResiVariant,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(design.m() + plans.len());
    let cov = covariance(&fits.full)?;
    for j in 0..design.m() {
        let l = contrast_for_column(design, j)?;
        let stats = wald_statistics(&fits.full, &cov, &l, &DVector::zeros(1))?;
        out.push(resi_point(&stats, signed)?.value);
    }
    for p in plans {
        let model = fits.model_for(p);
        let d = if p.dropped.is_empty() { design } else { &reduced[&p.dropped] };
        let l = contrast_in(d, &p.term)?;
        let cov = covariance(model)?;
        let stats = wald_statistics(model, &cov, &l, &DVector::zeros(l.m1()))?;
        out.push(resi_point(&stats, unsigned)?.value);
    }
    Ok(out)
}

/// Fits the configured model to `data` and builds both tables.
pub fn analyze(data: &DataTable, config: &AnalysisConfig) -> Result<AnalysisReport> {
    config.validate()?;
    let terms = parse_terms(&config.terms)?;
    let design = build_design(data, &terms)?;
    let y = data.column(&config.outcome)?.to_vec();
    let family = ModelFamily::of(config.family);
    let cov_mode = config.cov_mode();
    let signed = ResiVariant::signed_for(config.family);
    let unsigned = ResiVariant::unsigned_for(config.family);
    let plans = anova_plan(&design);
    let reduced = reduced_designs(&design, &plans)?;
    let fits = fit_all(family, &design, &reduced, &y, cov_mode)?;
    let alpha = config.alpha;

    let mut coefficients = Vec::with_capacity(design.m());
    let beta = fits.full.coefficients();
    for j in 0..design.m() {
        let name = &design.column_names()[j];
        let l = contrast_for_column(&design, j)?;
        let (stats, est) = estimate_resi(&fits.full, &l, signed).map_err(|e| e.in_term(name))?;
        let ci = asymptotic_ci(&est, alpha)?;
        coefficients.push(CoefficientRow {
            term: name.clone(),
            estimate: beta[j],
            resi: est.value,
            variant: signed,
            sigma_s: est.sigma_s.expect("estimate_resi sets sigma"),
            se: est.se().expect("estimate_resi sets sigma"),
            ci_lower: ci.lower,
            ci_upper: ci.upper,
            boot_lower: None,
            boot_upper: None,
            statistic: stats.t_squared,
            p_value: chi2_sf(stats.t_squared, 1.0),
        });
    }

    let mut anova = Vec::with_capacity(plans.len());
    for p in &plans {
        let model = fits.model_for(p);
        let d = if p.dropped.is_empty() { &design } else { &reduced[&p.dropped] };
        let l = contrast_in(d, &p.term)?;
        let (stats, est) = estimate_resi(model, &l, unsigned).map_err(|e| e.in_term(&p.term))?;
        let ci = asymptotic_ci(&est, alpha)?;
        anova.push(AnovaRow {
            term: p.term.clone(),
            df: l.m1(),
            resi: est.value,
            variant: unsigned,
            sigma_s: est.sigma_s.expect("estimate_resi sets sigma"),
            se: est.se().expect("estimate_resi sets sigma"),
            ci_lower: ci.lower,
            ci_upper: ci.upper,
            branch: ci.branch,
            boot_lower: None,
            boot_upper: None,
            statistic: stats.t_squared,
            p_value: chi2_sf(stats.t_squared, l.m1() as f64),
        });
    }

    let mut bootstrap_failures = None;
    if let Some(b) = config.bootstrap {
        info!("bootstrap with {b} replicates");
        let sample = resample(design.n(), b, config.seed, |rows| {
            let d = design.select_rows(rows);
            let r: BTreeMap<Vec<String>, DesignMatrix> =
                reduced.iter().map(|(k, v)| (k.clone(), v.select_rows(rows))).collect();
            let yb: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            let f = fit_all(family, &d, &r, &yb, cov_mode)?;
            point_estimates(&f, &d, &r, &plans, signed, unsigned)
        })?;
        for (k, row) in coefficients.iter_mut().enumerate() {
            let ci = sample.percentile_ci(k, alpha)?;
            row.boot_lower = Some(ci.lower);
            row.boot_upper = Some(ci.upper);
        }
        let offset = coefficients.len();
        for (k, row) in anova.iter_mut().enumerate() {
            let ci = sample.percentile_ci(offset + k, alpha)?;
            row.boot_lower = Some(ci.lower);
            row.boot_upper = Some(ci.upper);
        }
        bootstrap_failures = Some(sample.failures);
    }

    Ok(AnalysisReport {
        family: config.family,
        cov_mode,
        outcome: config.outcome.clone(),
        terms: config.terms.clone(),
        n: design.n(),
        alpha,
        bootstrap: config.bootstrap,
        bootstrap_failures,
        seed: config.seed,
        coefficients,
        anova,
    })
}

/// Six significant digits, switching to scientific notation for very large
/// or small magnitudes.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.5e}")
    }
}

fn opt6(x: Option<f64>) -> String {
    x.map(sig6).unwrap_or_else(|| "-".into())
}

fn opt_full(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn render(rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, cell)| if c == 0 { format!("{cell:<w$}", w = widths[c]) } else { format!("{cell:>w$}", w = widths[c]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

impl AnalysisReport {
    /// Aligned plain-text tables.
    pub fn to_table(&self) -> String {
        let pct = sig6(100.0 * (1.0 - self.alpha));
        let level = if pct.contains('.') { pct.trim_end_matches('0').trim_end_matches('.') } else { &pct };
        let level = format!("{level}%");
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} model, n = {}, covariance {}, outcome {}",
            self.family,
            self.n,
            self.cov_mode,
            self.outcome
        );
        if let Some(b) = self.bootstrap {
            let _ = writeln!(out, "bootstrap: {b} replicates, seed {}", self.seed);
        }
        out.push('\n');
        let mut rows = vec![vec![
            "coefficient".to_string(),
            "estimate".into(),
            "resi".into(),
            "se".into(),
            format!("lower {level}"),
            format!("upper {level}"),
            "boot lower".into(),
            "boot upper".into(),
            "p".into(),
        ]];
        for r in &self.coefficients {
            rows.push(vec![
                r.term.clone(),
                sig6(r.estimate),
                sig6(r.resi),
                sig6(r.se),
                sig6(r.ci_lower),
                sig6(r.ci_upper),
                opt6(r.boot_lower),
                opt6(r.boot_upper),
                sig6(r.p_value),
            ]);
        }
        out.push_str(&render(&rows));
        out.push('\n');
        let mut rows = vec![vec![
            "term".to_string(),
            "df".into(),
            "resi".into(),
            "se".into(),
            format!("lower {level}"),
            format!("upper {level}"),
            "boot lower".into(),
            "boot upper".into(),
            "chisq".into(),
            "p".into(),
        ]];
        for r in &self.anova {
            rows.push(vec![
                r.term.clone(),
                r.df.to_string(),
                sig6(r.resi),
                sig6(r.se),
                sig6(r.ci_lower),
                sig6(r.ci_upper),
                opt6(r.boot_lower),
                opt6(r.boot_upper),
                sig6(r.statistic),
                sig6(r.p_value),
            ]);
        }
        out.push_str(&render(&rows));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Both tables in one CSV, told apart by the `table` column.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "table", "term", "df", "estimate", "variant", "resi", "se", "ci_lower", "ci_upper", "branch",
            "boot_lower", "boot_upper", "statistic", "p_value",
        ])?;
        for r in &self.coefficients {
            w.write_record([
                "coefficients",
                &r.term,
                "1",
                &r.estimate.to_string(),
                r.variant.label(),
                &r.resi.to_string(),
                &r.se.to_string(),
                &r.ci_lower.to_string(),
                &r.ci_upper.to_string(),
                "",
                &opt_full(r.boot_lower),
                &opt_full(r.boot_upper),
                &r.statistic.to_string(),
                &r.p_value.to_string(),
            ])?;
        }
        for r in &self.anova {
            let branch = serde_json::to_value(r.branch)?;
            w.write_record([
                "anova",
                &r.term,
                &r.df.to_string(),
                "",
                r.variant.label(),
                &r.resi.to_string(),
                &r.se.to_string(),
                &r.ci_lower.to_string(),
                &r.ci_upper.to_string(),
                branch.as_str().unwrap_or(""),
                &opt_full(r.boot_lower),
                &opt_full(r.boot_upper),
                &r.statistic.to_string(),
                &r.p_value.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
