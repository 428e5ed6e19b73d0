//! Observation-level data for nested and non-nested trial designs.
//!
//! A [`Dataset`] holds one [`Observation`] per individual. Trial participants
//! (`S = 1`) carry a treatment arm and an outcome; everyone else carries
//! covariates only. Covariates are stored as `f64`; categorical columns are
//! stored as level codes with the level labels kept on the [`Column`].

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed CSV: {0}")]
    Csv(String),
    #[error("column `{0}` named in the schema is missing from the input")]
    MissingColumn(String),
    #[error("input has columns not named in the schema: {0:?}")]
    ExtraColumns(Vec<String>),
    #[error("row {row}: participation value `{value}` is not 0 or 1")]
    InvalidParticipation { row: usize, value: String },
    #[error("row {row}: trial participant (S=1) is missing `{column}`")]
    MissingTrialValue { row: usize, column: String },
    #[error("row {row}: covariate `{column}` is missing")]
    MissingCovariate { row: usize, column: String },
    #[error("row {row}: `{column}` value `{value}` is not a finite number")]
    InvalidNumber { row: usize, column: String, value: String },
    #[error("row {row}: treatment `{value}` is not among the declared levels")]
    UnknownTreatmentLevel { row: usize, value: String },
    #[error("dataset has no rows")]
    Empty,
    #[error("row {row}: expected {expected} covariates, found {found}")]
    CovariateArity { row: usize, expected: usize, found: usize },
    #[error("row {row}: arm index {arm} out of range")]
    ArmOutOfRange { row: usize, arm: usize },
    #[error("treatment level `{0}` has no trial participants")]
    ArmWithoutTrialRows(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("unknown subgroup `{0}`")]
    UnknownSubgroup(String),
    #[error("subgroup value `{value}` is claimed by both `{first}` and `{second}`")]
    OverlappingSubgroups { value: String, first: String, second: String },
    #[error("row {row}: value `{value}` of `{column}` is not covered by any subgroup")]
    UncoveredValue { row: usize, column: String, value: String },
    #[error("subgroup value `{value}` is not numeric but column `{column}` is")]
    NonNumericSubgroupValue { column: String, value: String },
    #[error("subgroup definition has no levels")]
    NoSubgroups,
    #[error("duplicate subgroup label `{0}`")]
    DuplicateSubgroup(String),
    #[error("no trial participants in subgroup cells: {0:?}")]
    Unestimable(Vec<String>),
    #[error("estimands for the entire target population require a nested design")]
    ScopeRequiresNested,
}

/// How the trial and non-randomized samples were collected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    /// Trial embedded in a sample of the target population.
    Nested,
    /// Trial and non-randomized samples collected separately and appended.
    NonNested,
}

/// Which population a potential outcome mean refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimandScope {
    /// The entire target population (`psi`).
    EntirePopulation,
    /// The non-randomized subset of the target population (`phi`).
    NonRandomized,
}

impl EstimandScope {
    pub fn check_design(self, design: Design) -> Result<(), DataError> {
        match (self, design) {
            (EstimandScope::EntirePopulation, Design::NonNested) => {
                Err(DataError::ScopeRequiresNested)
            }
            _ => Ok(()),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EstimandScope::EntirePopulation => "entire_population",
            EstimandScope::NonRandomized => "non_randomized",
        }
    }
}

impl fmt::Display for EstimandScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnKind {
    Numeric,
    /// Values are codes `0..levels.len()`; the first level is the reference.
    Categorical { levels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

impl Column {
    pub fn numeric(name: impl Into<String>) -> Self {
        Column { name: name.into(), kind: ColumnKind::Numeric }
    }

    /// Text form of a stored value, as it appears in CSV input.
    pub fn render(&self, value: f64) -> String {
        match &self.kind {
            ColumnKind::Numeric => format!("{value}"),
            ColumnKind::Categorical { levels } => levels[value as usize].clone(),
        }
    }
}

/// Treatment and outcome of a trial participant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialRecord {
    pub arm: usize,
    pub y: f64,
}

/// One individual: covariates, plus treatment and outcome iff `S = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub covariates: Vec<f64>,
    pub trial: Option<TrialRecord>,
}

impl Observation {
    pub fn s(&self) -> u8 {
        self.trial.is_some() as u8
    }

    pub fn in_trial(&self) -> bool {
        self.trial.is_some()
    }

    pub fn arm(&self) -> Option<usize> {
        self.trial.map(|t| t.arm)
    }

    pub fn y(&self) -> Option<f64> {
        self.trial.map(|t| t.y)
    }
}

/// Names of the participation, treatment and outcome columns in tabular files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseNames {
    pub participation: String,
    pub treatment: String,
    pub outcome: String,
}

impl Default for ResponseNames {
    fn default() -> Self {
        ResponseNames { participation: "S".into(), treatment: "A".into(), outcome: "Y".into() }
    }
}

/// Column roles for reading a dataset from CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub participation: String,
    pub treatment: String,
    pub outcome: String,
    pub covariates: Vec<String>,
    /// Explicit arm order; the first level is the reference arm. When absent,
    /// the observed labels are sorted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treatment_levels: Option<Vec<String>>,
}

impl ColumnRoles {
    fn response_names(&self) -> ResponseNames {
        ResponseNames {
            participation: self.participation.clone(),
            treatment: self.treatment.clone(),
            outcome: self.outcome.clone(),
        }
    }
}

/// Validated, immutable collection of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    rows: Vec<Observation>,
    design: Design,
    columns: Vec<Column>,
    treatment_levels: Vec<String>,
    names: ResponseNames,
}

impl Dataset {
    pub fn new(
        rows: Vec<Observation>,
        design: Design,
        columns: Vec<Column>,
        treatment_levels: Vec<String>,
    ) -> Result<Self, DataError> {
        Self::with_names(rows, design, columns, treatment_levels, ResponseNames::default())
    }

    pub fn with_names(
        rows: Vec<Observation>,
        design: Design,
        columns: Vec<Column>,
        treatment_levels: Vec<String>,
        names: ResponseNames,
    ) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::Empty);
        }
        let mut arm_counts = vec![0usize; treatment_levels.len()];
        for (i, row) in rows.iter().enumerate() {
            if row.covariates.len() != columns.len() {
                return Err(DataError::CovariateArity {
                    row: i + 1,
                    expected: columns.len(),
                    found: row.covariates.len(),
                });
            }
            for (col, &value) in columns.iter().zip(&row.covariates) {
                let ok = match &col.kind {
                    ColumnKind::Numeric => value.is_finite(),
                    ColumnKind::Categorical { levels } => {
                        value >= 0.0 && value.fract() == 0.0 && (value as usize) < levels.len()
                    }
                };
                if !ok {
                    return Err(DataError::InvalidNumber {
                        row: i + 1,
                        column: col.name.clone(),
                        value: value.to_string(),
                    });
                }
            }
            if let Some(t) = row.trial {
                if t.arm >= treatment_levels.len() {
                    return Err(DataError::ArmOutOfRange { row: i + 1, arm: t.arm });
                }
                if !t.y.is_finite() {
                    return Err(DataError::InvalidNumber {
                        row: i + 1,
                        column: names.outcome.clone(),
                        value: t.y.to_string(),
                    });
                }
                arm_counts[t.arm] += 1;
            }
        }
        if let Some(a) = arm_counts.iter().position(|&c| c == 0) {
            return Err(DataError::ArmWithoutTrialRows(treatment_levels[a].clone()));
        }
        Ok(Dataset { rows, design, columns, treatment_levels, names })
    }

    /// New dataset made of the given rows (with repetition), e.g. a bootstrap
    /// resample. Re-validates, so a resample missing an arm is an error.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        let rows = indices.iter().map(|&i| self.rows[i].clone()).collect();
        Dataset::with_names(
            rows,
            self.design,
            self.columns.clone(),
            self.treatment_levels.clone(),
            self.names.clone(),
        )
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn design(&self) -> Design {
        self.design
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn treatment_levels(&self) -> &[String] {
        &self.treatment_levels
    }

    pub fn arm_index(&self, label: &str) -> Option<usize> {
        self.treatment_levels.iter().position(|l| l == label)
    }

    pub fn names(&self) -> &ResponseNames {
        &self.names
    }

    pub fn n_trial(&self) -> usize {
        self.rows.iter().filter(|r| r.in_trial()).count()
    }

    pub fn n_non_randomized(&self) -> usize {
        self.len() - self.n_trial()
    }

    /// Indices of trial participants.
    pub fn trial_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.rows[i].in_trial()).collect()
    }

    /// Indices of trial participants assigned to `arm`.
    pub fn arm_rows(&self, arm: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.rows[i].arm() == Some(arm)).collect()
    }

    /// Stable content hash, used to tag fitted nuisance models.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.design.hash(&mut h);
        for c in &self.columns {
            c.name.hash(&mut h);
        }
        self.treatment_levels.hash(&mut h);
        for r in &self.rows {
            for v in &r.covariates {
                v.to_bits().hash(&mut h);
            }
            match r.trial {
                Some(t) => {
                    1u8.hash(&mut h);
                    t.arm.hash(&mut h);
                    t.y.to_bits().hash(&mut h);
                }
                None => 0u8.hash(&mut h),
            }
        }
        h.finish()
    }
}

fn io_error(path: &Path, e: impl fmt::Display) -> DataError {
    DataError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Reads and validates a dataset from a CSV file. Row order is preserved.
pub fn load_dataset(path: &Path, roles: &ColumnRoles, design: Design) -> Result<Dataset, DataError> {
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    read_dataset(file, roles, design)
}

/// Reads a dataset from CSV text. Values of `A` and `Y` on `S = 0` rows are
/// not part of the observed data structure and are ignored.
pub fn read_dataset<R: Read>(
    reader: R,
    roles: &ColumnRoles,
    design: Design,
) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| DataError::Csv(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let s_col = find(&roles.participation)?;
    let a_col = find(&roles.treatment)?;
    let y_col = find(&roles.outcome)?;
    let cov_cols: Vec<usize> = roles.covariates.iter().map(|c| find(c)).collect::<Result<_, _>>()?;
    let mut known: BTreeSet<usize> = cov_cols.iter().copied().collect();
    known.extend([s_col, a_col, y_col]);
    let extra: Vec<String> = (0..header.len()).filter(|i| !known.contains(i)).map(|i| header[i].clone()).collect();
    if !extra.is_empty() {
        return Err(DataError::ExtraColumns(extra));
    }

    struct RawRow {
        covariates: Vec<String>,
        trial: Option<(String, f64)>,
    }
    let mut raw = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
        let field = |j: usize| record.get(j).unwrap_or("").to_string();
        let s = field(s_col);
        let in_trial = match s.as_str() {
            "1" => true,
            "0" => false,
            _ => return Err(DataError::InvalidParticipation { row, value: s }),
        };
        let mut covariates = Vec::with_capacity(cov_cols.len());
        for (k, &j) in cov_cols.iter().enumerate() {
            let v = field(j);
            if v.is_empty() {
                return Err(DataError::MissingCovariate { row, column: roles.covariates[k].clone() });
            }
            covariates.push(v);
        }
        let trial = if in_trial {
            let a = field(a_col);
            if a.is_empty() {
                return Err(DataError::MissingTrialValue { row, column: roles.treatment.clone() });
            }
            let y = field(y_col);
            if y.is_empty() {
                return Err(DataError::MissingTrialValue { row, column: roles.outcome.clone() });
            }
            let y_val = parse_finite(&y).ok_or_else(|| DataError::InvalidNumber {
                row,
                column: roles.outcome.clone(),
                value: y.clone(),
            })?;
            Some((a, y_val))
        } else {
            None
        };
        raw.push(RawRow { covariates, trial });
    }
    if raw.is_empty() {
        return Err(DataError::Empty);
    }

    // A covariate column is categorical if any value fails to parse.
    let mut columns = Vec::with_capacity(cov_cols.len());
    for (k, name) in roles.covariates.iter().enumerate() {
        let numeric = raw.iter().all(|r| parse_finite(&r.covariates[k]).is_some());
        if numeric {
            columns.push(Column::numeric(name.clone()));
        } else {
            let levels: BTreeSet<&str> = raw.iter().map(|r| r.covariates[k].as_str()).collect();
            columns.push(Column {
                name: name.clone(),
                kind: ColumnKind::Categorical { levels: levels.into_iter().map(str::to_string).collect() },
            });
        }
    }

    let treatment_levels: Vec<String> = match &roles.treatment_levels {
        Some(levels) => levels.clone(),
        None => raw
            .iter()
            .filter_map(|r| r.trial.as_ref().map(|(a, _)| a.clone()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };

    let mut rows = Vec::with_capacity(raw.len());
    for (i, r) in raw.into_iter().enumerate() {
        let covariates = columns
            .iter()
            .zip(&r.covariates)
            .map(|(col, v)| match &col.kind {
                ColumnKind::Numeric => parse_finite(v).unwrap(),
                ColumnKind::Categorical { levels } => levels.iter().position(|l| l == v).unwrap() as f64,
            })
            .collect();
        let trial = match r.trial {
            Some((a, y)) => {
                let arm = treatment_levels
                    .iter()
                    .position(|l| *l == a)
                    .ok_or(DataError::UnknownTreatmentLevel { row: i + 1, value: a })?;
                Some(TrialRecord { arm, y })
            }
            None => None,
        };
        rows.push(Observation { covariates, trial });
    }
    Dataset::with_names(rows, design, columns, treatment_levels, roles.response_names())
}

fn parse_finite(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Writes a dataset as CSV: covariates, then participation, treatment, outcome.
pub fn write_dataset<W: Write>(ds: &Dataset, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = ds.columns.iter().map(|c| c.name.as_str()).collect();
    header.extend([
        ds.names.participation.as_str(),
        ds.names.treatment.as_str(),
        ds.names.outcome.as_str(),
    ]);
    w.write_record(&header).map_err(|e| DataError::Csv(e.to_string()))?;
    for row in &ds.rows {
        let mut rec: Vec<String> =
            ds.columns.iter().zip(&row.covariates).map(|(c, &v)| c.render(v)).collect();
        match row.trial {
            Some(t) => {
                rec.push("1".into());
                rec.push(ds.treatment_levels[t.arm].clone());
                rec.push(format!("{}", t.y));
            }
            None => rec.extend(["0".to_string(), String::new(), String::new()]),
        }
        w.write_record(&rec).map_err(|e| DataError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| DataError::Csv(e.to_string()))
}

/// Roles matching the layout produced by [`write_dataset`].
pub fn roles_of(ds: &Dataset) -> ColumnRoles {
    ColumnRoles {
        participation: ds.names.participation.clone(),
        treatment: ds.names.treatment.clone(),
        outcome: ds.names.outcome.clone(),
        covariates: ds.columns.iter().map(|c| c.name.clone()).collect(),
        treatment_levels: Some(ds.treatment_levels.clone()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupLevel {
    pub label: String,
    pub values: Vec<String>,
}

/// Partition of the covariate space along one discrete column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupSpec {
    pub source_column: String,
    pub levels: Vec<SubgroupLevel>,
}

impl SubgroupSpec {
    /// One subgroup per distinct value of `column`, labelled by the value.
    pub fn by_distinct_values(ds: &Dataset, column: &str) -> Result<Self, DataError> {
        let j = ds.column_index(column).ok_or_else(|| DataError::UnknownColumn(column.into()))?;
        let col = &ds.columns[j];
        let mut codes: Vec<f64> = ds.rows.iter().map(|r| r.covariates[j]).collect();
        codes.sort_by(f64::total_cmp);
        codes.dedup();
        let levels = codes
            .into_iter()
            .map(|v| {
                let label = col.render(v);
                SubgroupLevel { label: label.clone(), values: vec![label] }
            })
            .collect();
        Ok(SubgroupSpec { source_column: column.into(), levels })
    }

    /// Single subgroup covering every row.
    pub fn whole_population(ds: &Dataset, column: &str) -> Result<Self, DataError> {
        let mut spec = Self::by_distinct_values(ds, column)?;
        let values = spec.levels.drain(..).flat_map(|l| l.values).collect();
        spec.levels = vec![SubgroupLevel { label: "all".into(), values }];
        Ok(spec)
    }

    pub fn labels(&self) -> Vec<String> {
        self.levels.iter().map(|l| l.label.clone()).collect()
    }

    /// Assigns every row to exactly one level, checking disjointness and coverage.
    pub fn resolve(&self, ds: &Dataset) -> Result<Subgroups, DataError> {
        if self.levels.is_empty() {
            return Err(DataError::NoSubgroups);
        }
        let j = ds
            .column_index(&self.source_column)
            .ok_or_else(|| DataError::UnknownColumn(self.source_column.clone()))?;
        let col = &ds.columns[j];
        let mut seen_labels = BTreeSet::new();
        // value key -> level index
        let mut owner: BTreeMap<u64, usize> = BTreeMap::new();
        for (k, level) in self.levels.iter().enumerate() {
            if !seen_labels.insert(level.label.as_str()) {
                return Err(DataError::DuplicateSubgroup(level.label.clone()));
            }
            for value in &level.values {
                let key = match &col.kind {
                    ColumnKind::Numeric => value
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| DataError::NonNumericSubgroupValue {
                            column: col.name.clone(),
                            value: value.clone(),
                        })?
                        .to_bits(),
                    ColumnKind::Categorical { levels } => match levels.iter().position(|l| l == value) {
                        Some(code) => (code as f64).to_bits(),
                        // A label absent from the data owns no rows.
                        None => continue,
                    },
                };
                let key = normalize_zero(key);
                if let Some(&prev) = owner.get(&key) {
                    if prev != k {
                        return Err(DataError::OverlappingSubgroups {
                            value: value.clone(),
                            first: self.levels[prev].label.clone(),
                            second: level.label.clone(),
                        });
                    }
                }
                owner.insert(key, k);
            }
        }
        let mut membership = Vec::with_capacity(ds.len());
        for (i, row) in ds.rows.iter().enumerate() {
            let v = row.covariates[j];
            match owner.get(&normalize_zero(v.to_bits())) {
                Some(&k) => membership.push(k),
                None => {
                    return Err(DataError::UncoveredValue {
                        row: i + 1,
                        column: col.name.clone(),
                        value: col.render(v),
                    })
                }
            }
        }
        Ok(Subgroups { labels: self.labels(), membership })
    }
}

fn normalize_zero(bits: u64) -> u64 {
    if f64::from_bits(bits) == 0.0 {
        0.0f64.to_bits()
    } else {
        bits
    }
}

/// A [`SubgroupSpec`] resolved against a dataset: one level index per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgroups {
    labels: Vec<String>,
    membership: Vec<usize>,
}

impl Subgroups {
    /// Single subgroup containing every row of `ds`.
    pub fn whole(ds: &Dataset) -> Subgroups {
        Subgroups { labels: vec!["all".into()], membership: vec![0; ds.len()] }
    }

    pub fn from_membership(labels: Vec<String>, membership: Vec<usize>) -> Subgroups {
        assert!(membership.iter().all(|&m| m < labels.len()));
        Subgroups { labels, membership }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn membership(&self) -> &[usize] {
        &self.membership
    }

    #[inline]
    pub fn contains(&self, v: usize, row: usize) -> bool {
        self.membership[row] == v
    }

    pub fn indicator(&self, v: usize) -> Vec<u8> {
        self.membership.iter().map(|&m| (m == v) as u8).collect()
    }

    /// Errors unless every subgroup has a trial participant in every arm.
    pub fn check_estimable(&self, ds: &Dataset) -> Result<(), DataError> {
        let report = validate_positivity_resolved(ds, self);
        let missing: Vec<String> = report
            .flags
            .iter()
            .filter_map(|f| match f {
                PositivityFlag::EmptyTrialArm { subgroup, arm } => {
                    Some(format!("(subgroup={subgroup}, S=1, A={arm})"))
                }
                PositivityFlag::NoNonRandomized { .. } => None,
            })
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(DataError::Unestimable(missing))
        }
    }
}

/// 0/1 membership vector of subgroup `label`.
pub fn subgroup_indicator(ds: &Dataset, spec: &SubgroupSpec, label: &str) -> Result<Vec<u8>, DataError> {
    let v = spec
        .levels
        .iter()
        .position(|l| l.label == label)
        .ok_or_else(|| DataError::UnknownSubgroup(label.into()))?;
    Ok(spec.resolve(ds)?.indicator(v))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CellCount {
    pub subgroup: String,
    pub s: u8,
    /// Arm label for `S = 1` cells.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arm: Option<String>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PositivityFlag {
    /// No trial participant in this subgroup received `arm`; nothing is estimable.
    EmptyTrialArm { subgroup: String, arm: String },
    /// No non-randomized rows in the subgroup; estimands for the
    /// non-randomized subset are not estimable there.
    NoNonRandomized { subgroup: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PositivityReport {
    pub cells: Vec<CellCount>,
    pub flags: Vec<PositivityFlag>,
}

impl PositivityReport {
    pub fn has_empty_trial_cells(&self) -> bool {
        self.flags.iter().any(|f| matches!(f, PositivityFlag::EmptyTrialArm { .. }))
    }
}

/// Per-(subgroup, S, arm) counts with flags for empty cells. Never fails on
/// empty cells; only on an invalid subgroup definition.
pub fn validate_positivity(ds: &Dataset, spec: &SubgroupSpec) -> Result<PositivityReport, DataError> {
    Ok(validate_positivity_resolved(ds, &spec.resolve(ds)?))
}

pub fn validate_positivity_resolved(ds: &Dataset, groups: &Subgroups) -> PositivityReport {
    let k = groups.len();
    let m = ds.treatment_levels.len();
    let mut trial = vec![vec![0usize; m]; k];
    let mut obs = vec![0usize; k];
    for (row, &v) in ds.rows.iter().zip(&groups.membership) {
        match row.trial {
            Some(t) => trial[v][t.arm] += 1,
            None => obs[v] += 1,
        }
    }
    let mut cells = Vec::new();
    let mut flags = Vec::new();
    for v in 0..k {
        let label = &groups.labels[v];
        cells.push(CellCount { subgroup: label.clone(), s: 0, arm: None, count: obs[v] });
        for a in 0..m {
            cells.push(CellCount {
                subgroup: label.clone(),
                s: 1,
                arm: Some(ds.treatment_levels[a].clone()),
                count: trial[v][a],
            });
            if trial[v][a] == 0 {
                flags.push(PositivityFlag::EmptyTrialArm {
                    subgroup: label.clone(),
                    arm: ds.treatment_levels[a].clone(),
                });
            }
        }
        if obs[v] == 0 {
            flags.push(PositivityFlag::NoNonRandomized { subgroup: label.clone() });
        }
    }
    PositivityReport { cells, flags }
}
