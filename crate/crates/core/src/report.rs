//! Estimate reports: versioned JSON, an aligned text table, and a validator.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use serde_json::Value;

use crate::data::{Dataset, Design, EstimandScope, PositivityReport};
use crate::estimators::{EstimateDiagnostics, EstimateSet, EstimationError, EstimatorTag, ExtrapolationDiagnostic};
use crate::glm::{Family, FittedGlm};
use crate::inference::IntervalEstimate;
use crate::nuisance::{NuisanceModel, NuisanceSet};

pub const SCHEMA_VERSION: &str = "1.0.0";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Software {
    pub name: String,
    pub version: String,
}

impl Software {
    pub fn current() -> Software {
        Software { name: env!("CARGO_PKG_NAME").into(), version: env!("CARGO_PKG_VERSION").into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSummary {
    pub n: usize,
    pub n_trial: usize,
    pub n_non_randomized: usize,
    pub design: Design,
    /// Hex digest of the dataset contents.
    pub fingerprint: String,
    pub subgroups: Vec<String>,
    pub arms: Vec<String>,
}

impl DataSummary {
    pub fn new(ds: &Dataset, subgroups: &[String]) -> DataSummary {
        DataSummary {
            n: ds.len(),
            n_trial: ds.n_trial(),
            n_non_randomized: ds.n_non_randomized(),
            design: ds.design(),
            fingerprint: format!("{:016x}", ds.fingerprint()),
            subgroups: subgroups.to_vec(),
            arms: ds.treatment_levels().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapSummary {
    pub replicates: usize,
    pub failed_replicates: usize,
    pub stratified: bool,
    pub ci_level: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellError {
    pub code: String,
    pub message: String,
}

impl From<&EstimationError> for CellError {
    fn from(e: &EstimationError) -> Self {
        CellError { code: e.code().into(), message: e.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanRow {
    pub estimator: EstimatorTag,
    pub scope: Option<EstimandScope>,
    pub subgroup: String,
    pub arm: String,
    pub status: CellStatus,
    pub value: Option<f64>,
    pub se: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<EstimateDiagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<CellError>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectRow {
    pub estimator: EstimatorTag,
    pub scope: Option<EstimandScope>,
    pub subgroup: String,
    pub arm: String,
    pub reference: String,
    pub status: CellStatus,
    pub value: Option<f64>,
    pub se: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<CellError>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightSummary {
    pub kind: crate::estimators::WeightKind,
    pub subgroup: String,
    pub arm: String,
    pub n_positive: usize,
    pub sum: f64,
    pub min_positive: Option<f64>,
    pub max: f64,
    pub effective_sample_size: f64,
}

impl WeightSummary {
    pub fn new(w: &crate::estimators::WeightVector, subgroup: &str, arm: &str) -> WeightSummary {
        let pos: Vec<f64> = w.values.iter().copied().filter(|x| *x > 0.0).collect();
        let sum: f64 = pos.iter().sum();
        let sum_sq: f64 = pos.iter().map(|x| x * x).sum();
        WeightSummary {
            kind: w.kind,
            subgroup: subgroup.into(),
            arm: arm.into(),
            n_positive: pos.len(),
            sum,
            min_positive: pos.iter().copied().reduce(f64::min),
            max: pos.iter().copied().fold(0.0, f64::max),
            effective_sample_size: if sum_sq > 0.0 { sum * sum / sum_sq } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSummary {
    pub component: String,
    pub kind: String,
    pub coefficients: BTreeMap<String, f64>,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
}

impl ModelSummary {
    fn from_glm(component: String, kind: &str, m: &FittedGlm) -> ModelSummary {
        ModelSummary {
            component,
            kind: kind.into(),
            coefficients: m.fit.names.iter().cloned().zip(m.fit.beta.iter().copied()).collect(),
            converged: m.fit.converged,
            iterations: m.fit.iterations,
            deviance: m.fit.deviance,
        }
    }

    /// One summary per participation, treatment and outcome model.
    pub fn all(ns: &NuisanceSet, arms: &[String]) -> Vec<ModelSummary> {
        let mut out = vec![ModelSummary::from_glm("participation".into(), "glm", &ns.participation)];
        for (a, m) in ns.treatment.iter().enumerate() {
            let component = format!("treatment[{}]", arms[a]);
            out.push(match m {
                NuisanceModel::Glm(g) => ModelSummary::from_glm(component, "glm", g),
                NuisanceModel::Complement(g) => ModelSummary::from_glm(component, "complement", g),
                NuisanceModel::Constant(p) => ModelSummary {
                    component,
                    kind: "known".into(),
                    coefficients: BTreeMap::from([("probability".to_string(), *p)]),
                    converged: true,
                    iterations: 0,
                    deviance: 0.0,
                },
            });
        }
        for (a, g) in ns.outcome.iter().enumerate() {
            out.push(ModelSummary::from_glm(format!("outcome[{}]", arms[a]), "glm", g));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub positivity: PositivityReport,
    pub extrapolation: ExtrapolationDiagnostic,
    pub weights: Vec<WeightSummary>,
    pub models: Vec<ModelSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub schema_version: String,
    pub software: Software,
    pub seed: u64,
    pub config: Value,
    pub outcome_family: Family,
    pub data: DataSummary,
    pub bootstrap: Option<BootstrapSummary>,
    pub means: Vec<MeanRow>,
    pub effects: Vec<EffectRow>,
    pub diagnostics: Option<Diagnostics>,
    pub all_ok: bool,
}

/// Cell rows from estimates and, when available, aligned bootstrap intervals.
/// A cell whose interval is missing while bootstrap was requested is an error
/// with code `BOOTSTRAP_FAILED`.
pub fn cell_rows(
    set: &EstimateSet,
    intervals: Option<&[Option<IntervalEstimate>]>,
    bootstrap_error: Option<&str>,
) -> (Vec<MeanRow>, Vec<EffectRow>) {
    let n_means = set.means.len();
    let interval = |i: usize| intervals.and_then(|iv| iv[i]);
    let boot_err = || bootstrap_error.map(|m| CellError { code: "BOOTSTRAP_FAILED".into(), message: m.to_string() });
    let means = set
        .means
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let subgroup = set.subgroups[c.subgroup].clone();
            let arm = set.arms[c.arm].clone();
            match &c.result {
                Ok(e) => {
                    let iv = interval(i);
                    let err = boot_err();
                    MeanRow {
                        estimator: c.estimator,
                        scope: c.estimator.scope(),
                        subgroup,
                        arm,
                        status: if err.is_some() { CellStatus::Error } else { CellStatus::Ok },
                        value: Some(e.value),
                        se: iv.map(|i| i.se),
                        ci_lower: iv.map(|i| i.lower),
                        ci_upper: iv.map(|i| i.upper),
                        diagnostics: Some(e.diagnostics),
                        error: err,
                    }
                }
                Err(e) => MeanRow {
                    estimator: c.estimator,
                    scope: c.estimator.scope(),
                    subgroup,
                    arm,
                    status: CellStatus::Error,
                    value: None,
                    se: None,
                    ci_lower: None,
                    ci_upper: None,
                    diagnostics: None,
                    error: Some(e.into()),
                },
            }
        })
        .collect();
    let effects = set
        .effects
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let iv = interval(n_means + i);
            let (status, value, error) = match &c.result {
                Ok(e) => {
                    let err = boot_err();
                    (if err.is_some() { CellStatus::Error } else { CellStatus::Ok }, Some(e.value), err)
                }
                Err(e) => (CellStatus::Error, None, Some(e.into())),
            };
            EffectRow {
                estimator: c.estimator,
                scope: c.estimator.scope(),
                subgroup: set.subgroups[c.subgroup].clone(),
                arm: set.arms[c.arm].clone(),
                reference: set.arms[0].clone(),
                status,
                value,
                se: iv.map(|i| i.se),
                ci_lower: iv.map(|i| i.lower),
                ci_upper: iv.map(|i| i.upper),
                error,
            }
        })
        .collect();
    (means, effects)
}

/// Every cell failed with the same error (e.g. nuisance fitting on the
/// original data).
pub fn failed_rows(
    estimators: &[EstimatorTag],
    subgroups: &[String],
    arms: &[String],
    error: &EstimationError,
) -> (Vec<MeanRow>, Vec<EffectRow>) {
    let mut means = Vec::new();
    let mut effects = Vec::new();
    for &t in estimators {
        for v in subgroups {
            for a in arms {
                means.push(MeanRow {
                    estimator: t,
                    scope: t.scope(),
                    subgroup: v.clone(),
                    arm: a.clone(),
                    status: CellStatus::Error,
                    value: None,
                    se: None,
                    ci_lower: None,
                    ci_upper: None,
                    diagnostics: None,
                    error: Some(error.into()),
                });
            }
        }
    }
    for &t in estimators {
        for v in subgroups {
            for a in &arms[1..] {
                effects.push(EffectRow {
                    estimator: t,
                    scope: t.scope(),
                    subgroup: v.clone(),
                    arm: a.clone(),
                    reference: arms[0].clone(),
                    status: CellStatus::Error,
                    value: None,
                    se: None,
                    ci_lower: None,
                    ci_upper: None,
                    error: Some(error.into()),
                });
            }
        }
    }
    (means, effects)
}

impl EstimateReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned text table, one block per estimand scope. Binomial outcomes
    /// are shown as percentages with one decimal.
    pub fn to_table(&self) -> String {
        let pct = self.outcome_family == Family::Binomial;
        let num = |x: f64| if pct { format!("{:.1}%", 100.0 * x) } else { format!("{x:.3}") };
        let bound = |x: f64| if pct { format!("{:.1}", 100.0 * x) } else { format!("{x:.3}") };
        let cell = |value: Option<f64>, lo: Option<f64>, hi: Option<f64>, err: &Option<CellError>| match (value, err) {
            (Some(v), None) => match (lo, hi) {
                (Some(l), Some(h)) => format!("{} ({}, {})", num(v), bound(l), bound(h)),
                _ => num(v),
            },
            (_, Some(e)) => format!("[{}]", e.code),
            (None, None) => "-".into(),
        };
        let mut headers = vec!["Estimator".to_string(), "Subgroup".to_string()];
        for a in &self.data.arms {
            headers.push(format!("{}={a}", "A"));
        }
        for a in self.data.arms.iter().skip(1) {
            headers.push(format!("{a} vs {}", self.data.arms[0]));
        }
        let mut blocks: Vec<(String, Vec<Vec<String>>)> = Vec::new();
        let scopes: [(Option<EstimandScope>, &str); 3] = [
            (Some(EstimandScope::EntirePopulation), "Entire target population"),
            (Some(EstimandScope::NonRandomized), "Non-randomized subset"),
            (None, "Trial participants (unweighted)"),
        ];
        for (scope, title) in scopes {
            let mut rows = Vec::new();
            let mut tags: Vec<EstimatorTag> = Vec::new();
            for m in self.means.iter().filter(|m| m.scope == scope) {
                if !tags.contains(&m.estimator) {
                    tags.push(m.estimator);
                }
            }
            for tag in tags {
                for v in &self.data.subgroups {
                    let mut row = vec![tag.as_str().to_string(), v.clone()];
                    for a in &self.data.arms {
                        let m = self.means.iter().find(|m| m.estimator == tag && &m.subgroup == v && &m.arm == a);
                        row.push(m.map(|m| cell(m.value, m.ci_lower, m.ci_upper, &m.error)).unwrap_or_default());
                    }
                    for a in self.data.arms.iter().skip(1) {
                        let e = self.effects.iter().find(|e| e.estimator == tag && &e.subgroup == v && &e.arm == a);
                        row.push(e.map(|e| cell(e.value, e.ci_lower, e.ci_upper, &e.error)).unwrap_or_default());
                    }
                    rows.push(row);
                }
            }
            if !rows.is_empty() {
                blocks.push((title.to_string(), rows));
            }
        }
        let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
        for (_, rows) in &blocks {
            for r in rows {
                for (w, c) in widths.iter_mut().zip(r) {
                    *w = (*w).max(c.chars().count());
                }
            }
        }
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
                if i > 0 {
                    s.push_str("  ");
                }
                let pad = w - c.chars().count();
                if i < 2 {
                    s.push_str(c);
                    s.push_str(&" ".repeat(pad));
                } else {
                    s.push_str(&" ".repeat(pad));
                    s.push_str(c);
                }
            }
            s.trim_end().to_string()
        };
        let mut out = String::new();
        for (title, rows) in &blocks {
            let _ = writeln!(out, "{title}");
            let _ = writeln!(out, "{}", line(&headers));
            for r in rows {
                let _ = writeln!(out, "{}", line(r));
            }
            out.push('\n');
        }
        if let Some(b) = &self.bootstrap {
            let _ = writeln!(
                out,
                "{:.0}% Wald intervals from {} bootstrap replicates ({} failed).",
                100.0 * b.ci_level,
                b.replicates,
                b.failed_replicates
            );
        }
        out
    }
}

/// Checks a JSON report against the schema and the requested cells: every
/// `(estimator, subgroup, arm)` mean and every contrast against the first arm
/// must appear exactly once, either with a finite value (and interval when
/// the bootstrap ran) or with an error code.
pub fn validate_report(
    report: &Value,
    estimators: &[EstimatorTag],
    subgroups: &[String],
    arms: &[String],
) -> Result<(), String> {
    let version = report.get("schema_version").and_then(Value::as_str).ok_or("missing schema_version")?;
    if version.split('.').next() != SCHEMA_VERSION.split('.').next() {
        return Err(format!("unsupported schema_version {version}"));
    }
    for key in ["software", "seed", "config", "data", "means", "effects", "all_ok"] {
        if report.get(key).is_none() {
            return Err(format!("missing `{key}`"));
        }
    }
    let bootstrapped = report.get("bootstrap").is_some_and(|b| !b.is_null());
    let check_rows = |key: &str, expected: Vec<(String, String, String)>| -> Result<bool, String> {
        let rows = report[key].as_array().ok_or(format!("`{key}` is not an array"))?;
        let mut all_ok = true;
        let mut seen: BTreeMap<(String, String, String), usize> = BTreeMap::new();
        for (i, row) in rows.iter().enumerate() {
            let s = |f: &str| row.get(f).and_then(Value::as_str).map(str::to_string);
            let id = (
                s("estimator").ok_or(format!("{key}[{i}]: missing estimator"))?,
                s("subgroup").ok_or(format!("{key}[{i}]: missing subgroup"))?,
                s("arm").ok_or(format!("{key}[{i}]: missing arm"))?,
            );
            *seen.entry(id.clone()).or_default() += 1;
            match s("status").as_deref() {
                Some("ok") => {
                    let finite = |f: &str| row.get(f).and_then(Value::as_f64).is_some_and(f64::is_finite);
                    if !finite("value") {
                        return Err(format!("{key}[{i}] {id:?}: status ok without a finite value"));
                    }
                    if bootstrapped && !(finite("se") && finite("ci_lower") && finite("ci_upper")) {
                        return Err(format!("{key}[{i}] {id:?}: status ok without an interval"));
                    }
                }
                Some("error") => {
                    all_ok = false;
                    if row.pointer("/error/code").and_then(Value::as_str).is_none() {
                        return Err(format!("{key}[{i}] {id:?}: error without a code"));
                    }
                }
                other => return Err(format!("{key}[{i}] {id:?}: bad status {other:?}")),
            }
        }
        for id in &expected {
            match seen.get(id) {
                None => return Err(format!("{key}: requested cell {id:?} is missing")),
                Some(&n) if n > 1 => return Err(format!("{key}: cell {id:?} appears {n} times")),
                _ => {}
            }
        }
        if seen.len() != expected.len() {
            return Err(format!("{key}: {} cells present, {} requested", seen.len(), expected.len()));
        }
        Ok(all_ok)
    };
    let mut mean_ids = Vec::new();
    let mut effect_ids = Vec::new();
    for t in estimators {
        for v in subgroups {
            for a in arms {
                mean_ids.push((t.as_str().to_string(), v.clone(), a.clone()));
            }
            for a in &arms[1..] {
                effect_ids.push((t.as_str().to_string(), v.clone(), a.clone()));
            }
        }
    }
    let ok_means = check_rows("means", mean_ids)?;
    let ok_effects = check_rows("effects", effect_ids)?;
    if report["all_ok"].as_bool() != Some(ok_means && ok_effects) {
        return Err("`all_ok` disagrees with the cell statuses".into());
    }
    Ok(())
}
