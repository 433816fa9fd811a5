//! Plain-text simulation grid files.
//!
//! ```text
//! # global settings
//! replicates = 1000
//! seed = 20240501
//! alpha = 0.05
//!
//! scenario
//! family = linear
//! errors = normal, gamma, hetero
//! effect = 0, 0.5
//! n = 100, 400
//! cov = hc3, model
//! baselines = yes
//! end
//! ```
//!
//! Each `scenario ... end` block expands to the Cartesian product of its
//! comma-separated lists. Logistic blocks use `eta = ...` instead of
//! `errors`. Optional keys: `variants` (estimator labels, default the
//! family's signed and unsigned pair) and `baselines` (Cohen's d and f,
//! linear only, reported once per dataset under the first listed `cov`).

use std::collections::BTreeMap;

use super::{ErrorKind, Generator, Scenario};
use crate::error::{Error, Result};
use crate::estimator::ResiVariant;
use crate::models::{CovMode, FamilyKind};

pub const BUILTIN_GRIDS: &[(&str, &str)] = &[
    ("paper-linear.grid", include_str!("../../grids/paper-linear.grid")),
    ("paper-logistic.grid", include_str!("../../grids/paper-logistic.grid")),
];

/// Contents of a bundled grid by file name.
pub fn builtin_grid(name: &str) -> Option<&'static str> {
    BUILTIN_GRIDS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub replicates: usize,
    pub seed: u64,
    pub alpha: f64,
    pub scenarios: Vec<Scenario>,
}

fn config_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err(line, format!("invalid value `{v}` for `{key}`")))
}

fn list(v: &str) -> Vec<&str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    let items = list(v);
    if items.is_empty() {
        return Err(config_err(line, format!("`{key}` is empty")));
    }
    items.into_iter().map(|s| parse_value(line, key, s)).collect()
}

fn parse_bool(line: usize, v: &str) -> Result<bool> {
    match v {
        "yes" | "true" | "on" => Ok(true),
        "no" | "false" | "off" => Ok(false),
        other => Err(config_err(line, format!("expected yes/no, got `{other}`"))),
    }
}

struct Block {
    start: usize,
    entries: BTreeMap<String, (usize, String)>,
}

impl Block {
    fn get(&self, key: &str) -> Result<(usize, &str)> {
        self.entries
            .get(key)
            .map(|(l, v)| (*l, v.as_str()))
            .ok_or_else(|| config_err(self.start, format!("scenario is missing `{key}`")))
    }

    fn expand(&self, seed: u64) -> Result<Vec<Scenario>> {
        const KNOWN: &[&str] = &["family", "errors", "eta", "effect", "n", "cov", "variants", "baselines"];
        if let Some((k, (l, _))) = self.entries.iter().find(|(k, _)| !KNOWN.contains(&k.as_str())) {
            return Err(config_err(*l, format!("unknown scenario key `{k}`")));
        }
        let (l, fam) = self.get("family")?;
        let family: FamilyKind = fam.parse().map_err(|_| config_err(l, format!("unknown family `{fam}`")))?;
        let generators: Vec<Generator> = match family {
            FamilyKind::Linear => {
                if self.entries.contains_key("eta") {
                    return Err(config_err(self.start, "`eta` applies to logistic scenarios"));
                }
                let (l, v) = self.get("errors")?;
                parse_list::<ErrorKind>(l, "errors", v)?.into_iter().map(Generator::Linear).collect()
            }
            FamilyKind::Logistic => {
                if self.entries.contains_key("errors") {
                    return Err(config_err(self.start, "`errors` applies to linear scenarios"));
                }
                let (l, v) = self.get("eta")?;
                parse_list::<f64>(l, "eta", v)?
                    .into_iter()
                    .map(|eta| Generator::Logistic { eta })
                    .collect()
            }
        };
        let (l, v) = self.get("effect")?;
        let effects: Vec<f64> = parse_list(l, "effect", v)?;
        if let Some(bad) = effects.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(config_err(l, format!("effect size {bad} must be ≥ 0")));
        }
        let (l, v) = self.get("n")?;
        let ns: Vec<usize> = parse_list(l, "n", v)?;
        if let Some(bad) = ns.iter().find(|n| **n < 10) {
            return Err(config_err(l, format!("n = {bad} is below 10")));
        }
        let covs: Vec<CovMode> = match self.entries.get("cov") {
            Some((l, v)) => parse_list(*l, "cov", v)?,
            None => vec![CovMode::default_for(family)],
        };
        let variants: Option<Vec<ResiVariant>> = match self.entries.get("variants") {
            Some((l, v)) => Some(parse_list(*l, "variants", v)?),
            None => None,
        };
        let baselines = match self.entries.get("baselines") {
            Some((l, v)) => parse_bool(*l, v)?,
            None => false,
        };
        let mut out = Vec::new();
        for g in &generators {
            for s in &effects {
                for n in &ns {
                    for (k, cov) in covs.iter().enumerate() {
                        let mut sc = Scenario::new(*g, *s, *n, seed)
                            .with_cov(*cov)
                            .with_baselines(baselines && k == 0);
                        if let Some(v) = &variants {
                            sc = sc.with_variants(v.clone());
                        }
                        sc.validate().map_err(|e| config_err(self.start, e))?;
                        out.push(sc);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Parses a grid file.
pub fn parse_grid(text: &str) -> Result<GridConfig> {
    let mut globals: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut blocks: Vec<Block> = Vec::new();
    let mut current: Option<Block> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "scenario" => {
                if current.is_some() {
                    return Err(config_err(line_no, "nested `scenario`"));
                }
                current = Some(Block { start: line_no, entries: BTreeMap::new() });
                continue;
            }
            "end" => {
                let block = current.take().ok_or_else(|| config_err(line_no, "`end` without `scenario`"))?;
                blocks.push(block);
                continue;
            }
            _ => {}
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| config_err(line_no, format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim().to_string(), value.trim().to_string());
        let target = match current.as_mut() {
            Some(b) => &mut b.entries,
            None => &mut globals,
        };
        if target.insert(key.clone(), (line_no, value)).is_some() {
            return Err(config_err(line_no, format!("duplicate key `{key}`")));
        }
    }
    if let Some(b) = current {
        return Err(config_err(b.start, "`scenario` without `end`"));
    }
    if let Some((k, (l, _))) = globals.iter().find(|(k, _)| !["replicates", "seed", "alpha"].contains(&k.as_str())) {
        return Err(config_err(*l, format!("unknown setting `{k}`")));
    }
    let get = |key: &str, default: &str| -> (usize, String) {
        globals.get(key).cloned().unwrap_or((0, default.to_string()))
    };
    let (l, v) = get("replicates", "1000");
    let replicates: usize = parse_value(l, "replicates", &v)?;
    if replicates < super::MIN_REPLICATES {
        return Err(config_err(l, format!("replicates must be at least {}", super::MIN_REPLICATES)));
    }
    let (l, v) = get("seed", "1");
    let seed: u64 = parse_value(l, "seed", &v)?;
    let (l, v) = get("alpha", "0.05");
    let alpha: f64 = parse_value(l, "alpha", &v)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(config_err(l, "alpha must lie in (0, 1)"));
    }
    if blocks.is_empty() {
        return Err(Error::Config("grid defines no scenario".into()));
    }
    let mut scenarios = Vec::new();
    for b in &blocks {
        scenarios.extend(b.expand(seed)?);
    }
    Ok(GridConfig { replicates, seed, alpha, scenarios })
}
