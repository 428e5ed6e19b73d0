//! Declarative TOML configuration for analyses and simulation studies.
//!
//! Every key can be overridden with a dotted path, e.g. `bootstrap.replicates=50`;
//! the value is read as a TOML literal when possible and as a string otherwise.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ColumnRoles, Design, EstimandScope, SubgroupLevel};
use crate::estimators::EstimatorTag;
use crate::glm::{Family, ModelFormula};
use crate::nuisance::{NuisanceSpec, TreatmentModel};
use crate::simulation::{Dgp, SampleDesign, Scenario};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("override `{key}`: {message}")]
    Override { key: String, message: String },
    #[error("{path}: {message}")]
    Field { path: String, message: String },
}

fn field(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field { path: path.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Json,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    pub design: Design,
    #[serde(default = "default_s")]
    pub participation: String,
    #[serde(default = "default_a")]
    pub treatment: String,
    #[serde(default = "default_y")]
    pub outcome: String,
    pub covariates: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treatment_levels: Option<Vec<String>>,
}

fn default_s() -> String {
    "S".into()
}
fn default_a() -> String {
    "A".into()
}
fn default_y() -> String {
    "Y".into()
}

impl DataSection {
    pub fn roles(&self) -> ColumnRoles {
        ColumnRoles {
            participation: self.participation.clone(),
            treatment: self.treatment.clone(),
            outcome: self.outcome.clone(),
            covariates: self.covariates.clone(),
            treatment_levels: self.treatment_levels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubgroupSection {
    pub column: String,
    /// Explicit partition; one level per distinct value when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<SubgroupLevel>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimandSection {
    pub scopes: Vec<EstimandScope>,
    /// Defaults to every estimator of the requested scopes plus `TRIAL`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimators: Option<Vec<EstimatorTag>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub participation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treatment: Option<String>,
    /// Known `Pr[A = a | S = 1]` per arm, used instead of a fitted model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treatment_probabilities: Option<Vec<f64>>,
    pub outcome: String,
    #[serde(default = "default_family")]
    pub outcome_family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<f64>,
}

fn default_family() -> Family {
    Family::Binomial
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSection {
    /// Zero disables the bootstrap.
    pub replicates: usize,
    #[serde(default)]
    pub stratify_by_s: bool,
    #[serde(default = "default_level")]
    pub ci_level: f64,
}

fn default_level() -> f64 {
    0.95
}

impl Default for BootstrapSection {
    fn default() -> Self {
        BootstrapSection { replicates: 200, stratify_by_s: false, ci_level: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub format: OutputFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub data: DataSection,
    pub subgroups: SubgroupSection,
    pub estimands: EstimandSection,
    pub models: ModelSection,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Parses `text`, applies `overrides` and deserializes.
pub fn parse_with_overrides<T: serde::de::DeserializeOwned>(
    text: &str,
    overrides: &[(String, String)],
) -> Result<T, ConfigError> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    for (key, value) in overrides {
        apply_override(&mut table, key, value)?;
    }
    T::deserialize(table).map_err(|e| ConfigError::Syntax(e.to_string()))
}

pub fn read_config<T: serde::de::DeserializeOwned>(path: &Path, overrides: &[(String, String)]) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_with_overrides(&text, overrides)
}

fn override_value(raw: &str) -> toml::Value {
    // Parse as the right-hand side of a TOML assignment.
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override { key: key.into(), message: "empty path segment".into() });
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(ConfigError::Override { key: key.into(), message: format!("`{part}` is not a section") }),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), override_value(raw));
    Ok(())
}

impl AnalysisConfig {
    /// Requested estimators in report order.
    pub fn estimator_set(&self) -> Vec<EstimatorTag> {
        match &self.estimands.estimators {
            Some(list) => list.clone(),
            None => {
                let mut out = Vec::new();
                for scope in &self.estimands.scopes {
                    out.extend(EstimatorTag::for_scope(*scope));
                }
                out.push(EstimatorTag::Trial);
                out
            }
        }
    }

    /// Checks everything that can be checked without reading the data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.estimands.scopes.is_empty() {
            return Err(field("estimands.scopes", "at least one scope is required"));
        }
        for (i, s) in self.estimands.scopes.iter().enumerate() {
            if self.estimands.scopes[..i].contains(s) {
                return Err(field("estimands.scopes", format!("`{s}` listed twice")));
            }
            if s.check_design(self.data.design).is_err() {
                return Err(field(
                    "estimands.scopes",
                    format!("`{s}` requires design = \"nested\" but data.design is \"non_nested\""),
                ));
            }
        }
        let tags = self.estimator_set();
        if tags.is_empty() {
            return Err(field("estimands.estimators", "no estimators requested"));
        }
        for (i, t) in tags.iter().enumerate() {
            if tags[..i].contains(t) {
                return Err(field("estimands.estimators", format!("`{t}` listed twice")));
            }
            if let Some(scope) = t.scope() {
                if !self.estimands.scopes.contains(&scope) {
                    return Err(field(
                        "estimands.estimators",
                        format!("`{t}` targets scope `{scope}`, which is not in estimands.scopes"),
                    ));
                }
            }
        }
        if self.data.covariates.is_empty() {
            return Err(field("data.covariates", "at least one covariate is required"));
        }
        if !self.data.covariates.contains(&self.subgroups.column) {
            return Err(field("subgroups.column", format!("`{}` is not listed in data.covariates", self.subgroups.column)));
        }
        self.nuisance_spec()?;
        let b = &self.bootstrap;
        if b.replicates == 1 {
            return Err(field("bootstrap.replicates", "must be 0 (disabled) or at least 2"));
        }
        if !(b.ci_level > 0.0 && b.ci_level < 1.0) {
            return Err(field("bootstrap.ci_level", format!("{} is not in (0, 1)", b.ci_level)));
        }
        if self.threads == Some(0) {
            return Err(field("threads", "must be positive"));
        }
        Ok(())
    }

    /// Model formulas with response names checked against the column roles.
    pub fn nuisance_spec(&self) -> Result<NuisanceSpec, ConfigError> {
        let m = &self.models;
        let formula = |path: &str, text: &str, family: Family, response: &str| -> Result<ModelFormula, ConfigError> {
            let f = ModelFormula::parse(text, family).map_err(|e| field(path, e.to_string()))?;
            match &f.response {
                Some(r) if r != response => {
                    Err(field(path, format!("response `{r}` should be the `{response}` column")))
                }
                None => Err(field(path, format!("missing response; write `{response} ~ ...`"))),
                _ => {
                    for c in f.columns() {
                        if !self.data.covariates.iter().any(|x| x == c) {
                            return Err(field(path, format!("`{c}` is not listed in data.covariates")));
                        }
                    }
                    Ok(f)
                }
            }
        };
        let participation = formula("models.participation", &m.participation, Family::Binomial, &self.data.participation)?;
        let outcome = formula("models.outcome", &m.outcome, m.outcome_family, &self.data.outcome)?;
        let treatment = match (&m.treatment, &m.treatment_probabilities) {
            (Some(_), Some(_)) => {
                return Err(field("models", "give either `treatment` or `treatment_probabilities`, not both"))
            }
            (None, None) => return Err(field("models.treatment", "a treatment model or known probabilities is required")),
            (Some(t), None) => {
                TreatmentModel::Fitted(formula("models.treatment", t, Family::Binomial, &self.data.treatment)?)
            }
            (None, Some(p)) => {
                if p.len() < 2 || p.iter().any(|x| !(*x > 0.0 && *x < 1.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(field("models.treatment_probabilities", "need one probability in (0, 1) per arm, summing to 1"));
                }
                TreatmentModel::Known(p.clone())
            }
        };
        if let Some(t) = m.truncation {
            if !(t > 0.0 && t < 0.5) {
                return Err(field("models.truncation", format!("{t} is not in (0, 0.5)")));
            }
        }
        Ok(NuisanceSpec { participation, treatment, outcome, truncation: m.truncation })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySection {
    #[serde(flatten)]
    pub design: SampleDesign,
    pub replications: usize,
    #[serde(default)]
    pub estimators: Option<Vec<EstimatorTag>>,
    /// Variables dropped by misspecified models.
    #[serde(default = "default_omit")]
    pub omit: Vec<String>,
    /// Bootstrap replicates per replication; coverage is reported when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<usize>,
    #[serde(default = "default_level")]
    pub ci_level: f64,
}

fn default_omit() -> Vec<String> {
    vec!["X2".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    /// Draws for Monte Carlo truths.
    #[serde(default = "default_m")]
    pub m: u64,
    /// Frozen truths to use instead of recomputing; must match the DGP.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<PathBuf>,
}

fn default_m() -> u64 {
    10_000_000
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection { m: default_m(), fixture: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimOutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    #[serde(default = "Dgp::default_study")]
    pub dgp: Dgp,
    pub study: StudySection,
    #[serde(default)]
    pub oracle: OracleSection,
    pub output: SimOutputSection,
}

impl SimulationConfig {
    pub fn estimator_set(&self) -> Vec<EstimatorTag> {
        self.study.estimators.clone().unwrap_or_else(|| {
            let mut out = Vec::new();
            if self.study.design.design() == Design::Nested {
                out.extend(EstimatorTag::for_scope(EstimandScope::EntirePopulation));
            }
            out.extend(EstimatorTag::for_scope(EstimandScope::NonRandomized));
            out.push(EstimatorTag::Trial);
            out
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.dgp.validate().map_err(|e| field("dgp", e.to_string()))?;
        if self.study.replications < 2 {
            return Err(field("study.replications", "must be at least 2"));
        }
        let n_ok = match self.study.design {
            SampleDesign::Nested { n } => n >= 1,
            SampleDesign::NonNested { n_trial, n_obs } => n_trial >= 1 && n_obs >= 1,
        };
        if !n_ok {
            return Err(field("study", "sample sizes must be positive"));
        }
        for t in self.estimator_set() {
            if let Some(scope) = t.scope() {
                if scope.check_design(self.study.design.design()).is_err() {
                    return Err(field("study.estimators", format!("`{t}` requires a nested design")));
                }
            }
        }
        let names = self.dgp.names();
        for o in &self.study.omit {
            if !names.contains(o) {
                return Err(field("study.omit", format!("`{o}` is not a DGP covariate")));
            }
        }
        if self.study.bootstrap == Some(0) || self.study.bootstrap == Some(1) {
            return Err(field("study.bootstrap", "must be at least 2 when set"));
        }
        if !(self.study.ci_level > 0.0 && self.study.ci_level < 1.0) {
            return Err(field("study.ci_level", "must be in (0, 1)"));
        }
        if self.oracle.m < 2 {
            return Err(field("oracle.m", "must be at least 2"));
        }
        if self.threads == Some(0) {
            return Err(field("threads", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 1
[data]
path = "d.csv"
design = "nested"
covariates = ["x", "g"]
[subgroups]
column = "g"
[estimands]
scopes = ["entire_population", "non_randomized"]
[models]
participation = "S ~ x + g"
treatment = "A ~ 1"
outcome = "Y ~ x"
"#;

    #[test]
    fn parses_and_defaults() {
        let cfg: AnalysisConfig = parse_with_overrides(MINIMAL, &[]).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.bootstrap.replicates, 200);
        assert_eq!(cfg.estimator_set().len(), 15);
        assert_eq!(cfg.data.participation, "S");
    }

    #[test]
    fn overrides_use_toml_literals() {
        let o = |k: &str, v: &str| (k.to_string(), v.to_string());
        let cfg: AnalysisConfig = parse_with_overrides(
            MINIMAL,
            &[o("bootstrap.replicates", "7"), o("data.path", "other.csv"), o("estimands.estimators", r#"["OM", "TRIAL"]"#)],
        )
        .unwrap();
        assert_eq!(cfg.bootstrap.replicates, 7);
        assert_eq!(cfg.data.path, PathBuf::from("other.csv"));
        assert_eq!(cfg.estimator_set(), vec![EstimatorTag::Om, EstimatorTag::Trial]);
        assert!(parse_with_overrides::<AnalysisConfig>(MINIMAL, &[o("seed.x", "1")]).is_err());
    }

    #[test]
    fn field_paths_in_errors() {
        let cfg: AnalysisConfig = parse_with_overrides(MINIMAL, &[("data.design".into(), "non_nested".into())]).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(matches!(&err, ConfigError::Field { path, .. } if path == "estimands.scopes"), "{err}");

        let cfg: AnalysisConfig = parse_with_overrides(MINIMAL, &[("models.outcome".into(), "Y ~ z".into())]).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(matches!(&err, ConfigError::Field { path, .. } if path == "models.outcome"), "{err}");

        let err = parse_with_overrides::<AnalysisConfig>(MINIMAL, &[("data.colour".into(), "1".into())]).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }
}
