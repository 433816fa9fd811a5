//! Design matrices, term groups and coordinate-selection contrasts.

mod spline;
mod table;

use std::collections::BTreeSet;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use spline::quantile_sorted;
pub use spline::{natural_spline_basis, NaturalSpline};
pub use table::DataTable;

pub const INTERCEPT: &str = "(Intercept)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TermKind {
    Numeric { column: String },
    Binary { column: String },
    Spline { column: String, df: usize },
    Interaction(String, String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermSpec {
    pub name: String,
    pub kind: TermKind,
}

impl TermSpec {
    pub fn numeric(column: &str) -> Self {
        Self {
            name: column.to_string(),
            kind: TermKind::Numeric { column: column.to_string() },
        }
    }

    pub fn binary(column: &str) -> Self {
        Self {
            name: column.to_string(),
            kind: TermKind::Binary { column: column.to_string() },
        }
    }

    /// Named `ns(column,df)`.
    pub fn spline(column: &str, df: usize) -> Self {
        Self {
            name: format!("ns({column},{df})"),
            kind: TermKind::Spline { column: column.to_string(), df },
        }
    }

    /// Named `a:b`.
    pub fn interaction(a: &str, b: &str) -> Self {
        Self {
            name: format!("{a}:{b}"),
            kind: TermKind::Interaction(a.to_string(), b.to_string()),
        }
    }

    pub fn is_interaction(&self) -> bool {
        matches!(self.kind, TermKind::Interaction(..))
    }
}

/// Parses a `+`-separated term list such as
/// `bin(dx) + bin(sex) + ns(age, 3) + dx:ns(age,3)`.
///
/// A bare name is numeric, `bin(x)` binary, `ns(x, df)` a natural spline and
/// `a:b` the interaction of two previously listed terms.
pub fn parse_terms(spec: &str) -> Result<Vec<TermSpec>> {
    let compact: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
    if compact.is_empty() {
        return Err(Error::Schema("empty term specification".into()));
    }
    split_top_level(&compact, '+')
        .into_iter()
        .map(|item| {
            let parts = split_top_level(item, ':');
            match parts.as_slice() {
                [single] => parse_atom(single),
                [a, b] => Ok(TermSpec::interaction(&parse_atom(a)?.name, &parse_atom(b)?.name)),
                _ => Err(Error::Schema(format!("cannot parse term `{item}`"))),
            }
        })
        .collect()
}

fn split_top_level(s: &str, sep: char) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            c if c == sep && depth == 0 => {
                out.push(&s[start..i]);
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

fn parse_atom(atom: &str) -> Result<TermSpec> {
    let bad = || Error::Schema(format!("cannot parse term `{atom}`"));
    if atom.is_empty() {
        return Err(bad());
    }
    if let Some(inner) = atom.strip_prefix("bin(").and_then(|s| s.strip_suffix(')')) {
        return Ok(TermSpec::binary(inner));
    }
    if let Some(inner) = atom.strip_prefix("ns(").and_then(|s| s.strip_suffix(')')) {
        let (col, df) = inner.split_once(',').ok_or_else(bad)?;
        let df: usize = df.parse().map_err(|_| bad())?;
        return Ok(TermSpec::spline(col, df));
    }
    if atom.contains(['(', ')', ',']) {
        return Err(bad());
    }
    Ok(TermSpec::numeric(atom))
}

#[derive(Debug, Clone)]
pub struct DesignMatrix {
    x: DMatrix<f64>,
    column_names: Vec<String>,
    column_terms: Vec<String>,
    terms: Vec<TermSpec>,
    blocks: Vec<(String, Range<usize>)>,
}

impl DesignMatrix {
    /// Wraps an explicit matrix. The first column must be the intercept;
    /// `blocks` assigns every remaining column to exactly one term.
    pub fn from_parts(x: DMatrix<f64>, blocks: Vec<(String, usize)>) -> Result<Self> {
        let n = x.nrows();
        if x.ncols() == 0 || x.column(0).iter().any(|v| *v != 1.0) {
            return Err(Error::Schema("first column must be the intercept".into()));
        }
        let mut column_terms = vec![INTERCEPT.to_string()];
        let mut column_names = vec![INTERCEPT.to_string()];
        let mut ranges = Vec::new();
        let mut terms = Vec::new();
        let mut at = 1;
        for (name, width) in blocks {
            for k in 0..width {
                column_terms.push(name.clone());
                column_names.push(if width == 1 { name.clone() } else { format!("{name}{}", k + 1) });
            }
            ranges.push((name.clone(), at..at + width));
            terms.push(TermSpec::numeric(&name));
            at += width;
        }
        if at != x.ncols() {
            return Err(Error::Schema(format!(
                "blocks cover {at} columns, matrix has {}",
                x.ncols()
            )));
        }
        if n <= at {
            return Err(Error::InsufficientDf { n, m: at });
        }
        Ok(Self { x, column_names, column_terms, terms, blocks: ranges })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.x.ncols()
    }

    /// Term name of every column, intercept first.
    pub fn column_terms(&self) -> &[String] {
        &self.column_terms
    }

    /// Per-column labels (`ns(age,3)1`, `ns(age,3)2`, ...).
    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn terms(&self) -> &[TermSpec] {
        &self.terms
    }

    pub fn term_names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|(n, _)| n.as_str())
    }

    pub fn columns_of(&self, term: &str) -> Option<Range<usize>> {
        self.blocks.iter().find(|(n, _)| n == term).map(|(_, r)| r.clone())
    }

    /// Reduced design keeping the intercept and the listed terms, in the
    /// original order.
    pub fn select_terms(&self, keep: &[&str]) -> Result<DesignMatrix> {
        for k in keep {
            if self.columns_of(k).is_none() {
                return Err(Error::Lookup((*k).to_string()));
            }
        }
        let mut cols = vec![0usize];
        let mut blocks = Vec::new();
        let mut terms = Vec::new();
        for ((name, range), spec) in self.blocks.iter().zip(&self.terms) {
            if keep.contains(&name.as_str()) {
                let start = cols.len();
                cols.extend(range.clone());
                blocks.push((name.clone(), start..cols.len()));
                terms.push(spec.clone());
            }
        }
        Ok(DesignMatrix {
            x: self.x.select_columns(&cols),
            column_names: cols.iter().map(|&c| self.column_names[c].clone()).collect(),
            column_terms: cols.iter().map(|&c| self.column_terms[c].clone()).collect(),
            terms,
            blocks,
        })
    }

    /// Same design restricted to the given rows (with repetition).
    pub fn select_rows(&self, rows: &[usize]) -> DesignMatrix {
        DesignMatrix {
            x: self.x.select_rows(rows),
            column_names: self.column_names.clone(),
            column_terms: self.column_terms.clone(),
            terms: self.terms.clone(),
            blocks: self.blocks.clone(),
        }
    }
}

/// Builds `X` with the intercept first and term blocks in declaration order.
pub fn build_design(data: &DataTable, terms: &[TermSpec]) -> Result<DesignMatrix> {
    let n = data.nrows();
    let mut names: BTreeSet<&str> = BTreeSet::new();
    let mut blocks: Vec<(String, DMatrix<f64>)> = Vec::new();
    for term in terms {
        if !names.insert(term.name.as_str()) || term.name == INTERCEPT {
            return Err(Error::Schema(format!("duplicate term name `{}`", term.name)));
        }
        let block = match &term.kind {
            TermKind::Numeric { column } => {
                DMatrix::from_column_slice(n, 1, data.column(column)?)
            }
            TermKind::Binary { column } => {
                let v = data.column(column)?;
                if v.iter().any(|x| *x != 0.0 && *x != 1.0) {
                    return Err(Error::Schema(format!("column `{column}` is not coded 0/1")));
                }
                DMatrix::from_column_slice(n, 1, v)
            }
            TermKind::Spline { column, df } => natural_spline_basis(data.column(column)?, *df)?,
            TermKind::Interaction(a, b) => {
                let find = |t: &str| {
                    blocks
                        .iter()
                        .find(|(name, _)| name == t)
                        .map(|(_, m)| m)
                        .ok_or_else(|| {
                            Error::Schema(format!(
                                "interaction `{}` references undeclared term `{t}`",
                                term.name
                            ))
                        })
                };
                let (ba, bb) = (find(a)?, find(b)?);
                let mut out = DMatrix::zeros(n, ba.ncols() * bb.ncols());
                for i in 0..ba.ncols() {
                    for j in 0..bb.ncols() {
                        out.set_column(
                            i * bb.ncols() + j,
                            &ba.column(i).component_mul(&bb.column(j)),
                        );
                    }
                }
                out
            }
        };
        for (c, col) in block.column_iter().enumerate() {
            let first = col[0];
            if col.iter().all(|v| *v == first) {
                let label = if block.ncols() == 1 {
                    term.name.clone()
                } else {
                    format!("{}{}", term.name, c + 1)
                };
                return Err(Error::DegenerateDesign(label));
            }
        }
        blocks.push((term.name.clone(), block));
    }

    let m = 1 + blocks.iter().map(|(_, b)| b.ncols()).sum::<usize>();
    let mut x = DMatrix::from_element(n, m, 1.0);
    let mut at = 1;
    let mut widths = Vec::new();
    for (name, block) in &blocks {
        x.view_mut((0, at), (n, block.ncols())).copy_from(block);
        at += block.ncols();
        widths.push((name.clone(), block.ncols()));
    }
    let mut design = DesignMatrix::from_parts(x, widths)?;
    design.terms = terms.to_vec();
    Ok(design)
}

/// Pure coordinate-selection contrast `L` (rows are standard basis vectors).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastMatrix {
    columns: Vec<usize>,
    m: usize,
}

impl ContrastMatrix {
    pub fn new(columns: Vec<usize>, m: usize) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Lookup("empty hypothesis".into()));
        }
        let distinct: BTreeSet<_> = columns.iter().collect();
        if distinct.len() != columns.len() || columns.iter().any(|&c| c >= m) {
            return Err(Error::Parameter(format!(
                "contrast columns {columns:?} invalid for m = {m}"
            )));
        }
        Ok(Self { columns, m })
    }

    pub fn m1(&self) -> usize {
        self.columns.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Selected parameter indices, one per row of `L`.
    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    /// Same selection against a longer parameter vector (e.g. with a
    /// dispersion parameter appended).
    pub fn widened(&self, m: usize) -> ContrastMatrix {
        assert!(m >= self.m);
        Self { columns: self.columns.clone(), m }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.m1(), self.m);
        for (r, &c) in self.columns.iter().enumerate() {
            l[(r, c)] = 1.0;
        }
        l
    }

    /// `L θ`.
    pub fn apply(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.m1(), self.columns.iter().map(|&c| theta[c]))
    }

    /// `L M Lᵀ`.
    pub fn sandwich(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.m1(), self.m1(), |i, j| m[(self.columns[i], self.columns[j])])
    }

    /// Rows of `M` selected by `L`, i.e. `L M`.
    pub fn rows_of(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m.select_rows(&self.columns)
    }
}

/// Contrast selecting every column of the tested terms.
pub fn contrast_for_terms(design: &DesignMatrix, tested: &[&str]) -> Result<ContrastMatrix> {
    if tested.is_empty() {
        return Err(Error::Lookup("no terms to test".into()));
    }
    let mut cols = Vec::new();
    for t in tested {
        if *t == INTERCEPT {
            return Err(Error::Lookup("the intercept is not a testable term".into()));
        }
        let range = design.columns_of(t).ok_or_else(|| Error::Lookup((*t).to_string()))?;
        cols.extend(range);
    }
    cols.sort_unstable();
    ContrastMatrix::new(cols, design.m())
}

/// Contrast selecting a single coefficient (the intercept included).
pub fn contrast_for_column(design: &DesignMatrix, column: usize) -> Result<ContrastMatrix> {
    ContrastMatrix::new(vec![column], design.m())
}
