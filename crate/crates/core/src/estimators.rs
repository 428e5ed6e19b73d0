//! Subgroup-specific potential outcome mean estimators and their contrasts.
//!
//! Every estimator reads the shared per-row [`NuisanceTable`]. With
//! `w_i = I(S=1, A=a, X in v) / (p(X_i) e_a(X_i))` and `o_i = w_i (1 - p(X_i))`:
//!
//! ```text
//! OM     sum_v g / n_v                    OM_S0  sum_{v,S=0} g / n_v0
//! IPW1   sum w Y / n_v                    IOW1   sum o Y / n_v0
//! IPW2   sum w Y / sum w                  IOW2   sum o Y / sum o
//! AIPW1  (sum w (Y - g) + sum_v g) / n_v  AIOW1  (sum o (Y - g) + sum_{v,S=0} g) / n_v0
//! AIPW2  sum w (Y - g) / sum w + OM       AIOW2  sum o (Y - g) / sum o + OM_S0
//! ```

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Design, EstimandScope, Subgroups};
use crate::glm::{fit_weighted_glm, DesignMatrix, Family, FittedGlm, ModelFormula};
use crate::nuisance::NuisanceTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorTag {
    #[serde(rename = "OM")]
    Om,
    #[serde(rename = "IPW1")]
    Ipw1,
    #[serde(rename = "IPW2")]
    Ipw2,
    #[serde(rename = "AIPW1")]
    Aipw1,
    #[serde(rename = "AIPW2")]
    Aipw2,
    #[serde(rename = "AIPW3")]
    Aipw3,
    #[serde(rename = "OM_S0")]
    OmS0,
    #[serde(rename = "IOW1")]
    Iow1,
    #[serde(rename = "IOW2")]
    Iow2,
    #[serde(rename = "AIOW1")]
    Aiow1,
    #[serde(rename = "AIOW2")]
    Aiow2,
    #[serde(rename = "AIOW3")]
    Aiow3,
    #[serde(rename = "SAT_IPW2")]
    SatIpw2,
    #[serde(rename = "SAT_IOW2")]
    SatIow2,
    #[serde(rename = "TRIAL")]
    Trial,
}

impl EstimatorTag {
    pub const ALL: [EstimatorTag; 15] = [
        EstimatorTag::Om,
        EstimatorTag::Ipw1,
        EstimatorTag::Ipw2,
        EstimatorTag::Aipw1,
        EstimatorTag::Aipw2,
        EstimatorTag::Aipw3,
        EstimatorTag::OmS0,
        EstimatorTag::Iow1,
        EstimatorTag::Iow2,
        EstimatorTag::Aiow1,
        EstimatorTag::Aiow2,
        EstimatorTag::Aiow3,
        EstimatorTag::SatIpw2,
        EstimatorTag::SatIow2,
        EstimatorTag::Trial,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorTag::Om => "OM",
            EstimatorTag::Ipw1 => "IPW1",
            EstimatorTag::Ipw2 => "IPW2",
            EstimatorTag::Aipw1 => "AIPW1",
            EstimatorTag::Aipw2 => "AIPW2",
            EstimatorTag::Aipw3 => "AIPW3",
            EstimatorTag::OmS0 => "OM_S0",
            EstimatorTag::Iow1 => "IOW1",
            EstimatorTag::Iow2 => "IOW2",
            EstimatorTag::Aiow1 => "AIOW1",
            EstimatorTag::Aiow2 => "AIOW2",
            EstimatorTag::Aiow3 => "AIOW3",
            EstimatorTag::SatIpw2 => "SAT_IPW2",
            EstimatorTag::SatIow2 => "SAT_IOW2",
            EstimatorTag::Trial => "TRIAL",
        }
    }

    /// Target population; `None` for the unweighted trial comparator.
    pub fn scope(self) -> Option<EstimandScope> {
        use EstimatorTag::*;
        match self {
            Om | Ipw1 | Ipw2 | Aipw1 | Aipw2 | Aipw3 | SatIpw2 => Some(EstimandScope::EntirePopulation),
            OmS0 | Iow1 | Iow2 | Aiow1 | Aiow2 | Aiow3 | SatIow2 => Some(EstimandScope::NonRandomized),
            Trial => None,
        }
    }

    pub fn for_scope(scope: EstimandScope) -> Vec<EstimatorTag> {
        EstimatorTag::ALL.into_iter().filter(|t| t.scope() == Some(scope)).collect()
    }
}

impl fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        EstimatorTag::ALL.into_iter().find(|t| t.as_str() == upper).ok_or_else(|| {
            let names: Vec<&str> = EstimatorTag::ALL.iter().map(|t| t.as_str()).collect();
            format!("unknown estimator `{s}`; valid: {}", names.join(", "))
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("subgroup `{subgroup}` has no rows")]
    EmptySubgroup { subgroup: String },
    #[error("subgroup `{subgroup}` has no non-randomized (S=0) rows")]
    EmptyNonRandomized { subgroup: String },
    #[error("weights for subgroup `{subgroup}`, arm `{arm}` sum to zero")]
    ZeroWeightSum { subgroup: String, arm: String },
    #[error("no trial participants in subgroup `{subgroup}`, arm `{arm}`")]
    EmptyTrialCell { subgroup: String, arm: String },
    #[error("weight at row {row} is not finite")]
    NonFiniteWeight { row: usize },
    #[error("no estimate for arm `{arm}`")]
    MissingArm { arm: String },
    #[error("entire-population estimands require a nested design")]
    ScopeDesign,
    #[error("{estimator} model fit failed: {message}")]
    FitFailed { estimator: EstimatorTag, message: String },
    #[error("nuisance models: {0}")]
    Nuisance(String),
}

impl EstimationError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            EstimationError::EmptySubgroup { .. } => "EMPTY_SUBGROUP",
            EstimationError::EmptyNonRandomized { .. } => "EMPTY_NONRANDOMIZED_SUBGROUP",
            EstimationError::ZeroWeightSum { .. } => "ZERO_WEIGHT_SUM",
            EstimationError::EmptyTrialCell { .. } => "EMPTY_TRIAL_CELL",
            EstimationError::NonFiniteWeight { .. } => "NONFINITE_WEIGHT",
            EstimationError::MissingArm { .. } => "MISSING_ARM",
            EstimationError::ScopeDesign => "SCOPE_DESIGN",
            EstimationError::FitFailed { .. } => "FIT_FAILED",
            EstimationError::Nuisance(_) => "NUISANCE_FAILED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// Inverse probability weights, for the entire target population.
    Ipw,
    /// Inverse odds weights, for the non-randomized subset.
    Iow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub values: Vec<f64>,
    pub kind: WeightKind,
    pub subgroup: usize,
    pub arm: usize,
}

impl WeightVector {
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimateDiagnostics {
    /// Number of rows in the averaging denominator (`n_v` or `n_v0`).
    pub n_rows: usize,
    /// Rows with positive weight; trial cell size for unweighted estimators.
    pub n_included: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_sum: Option<f64>,
    /// Kish effective sample size `(sum w)^2 / sum w^2`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub effective_sample_size: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PomEstimate {
    pub estimator: EstimatorTag,
    pub scope: Option<EstimandScope>,
    pub subgroup: String,
    pub arm: String,
    pub value: f64,
    pub diagnostics: EstimateDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectEstimate {
    pub estimator: EstimatorTag,
    pub scope: Option<EstimandScope>,
    pub subgroup: String,
    pub arm: String,
    pub reference: String,
    pub value: f64,
}

/// Everything an estimator reads.
#[derive(Debug, Clone, Copy)]
pub struct EstimationContext<'a> {
    pub ds: &'a Dataset,
    pub groups: &'a Subgroups,
    pub table: &'a NuisanceTable,
}

impl<'a> EstimationContext<'a> {
    pub fn new(ds: &'a Dataset, groups: &'a Subgroups, table: &'a NuisanceTable) -> EstimationContext<'a> {
        let n = ds.len();
        let m = ds.treatment_levels().len();
        assert_eq!(groups.membership().len(), n, "subgroup membership length");
        assert_eq!(table.participation.len(), n, "nuisance table rows");
        assert_eq!(table.treatment.len(), m, "nuisance table arms");
        assert_eq!(table.outcome.len(), m, "nuisance table arms");
        assert!(table.treatment.iter().chain(&table.outcome).all(|c| c.len() == n));
        EstimationContext { ds, groups, table }
    }

    fn subgroup(&self, v: usize) -> String {
        self.groups.labels()[v].clone()
    }

    fn arm(&self, a: usize) -> String {
        self.ds.treatment_levels()[a].clone()
    }

    /// `1 / (p e_a)` for trial row `i` in arm `a`; `None` when not finite.
    fn base_weight(&self, i: usize, a: usize) -> Result<f64, EstimationError> {
        let w = 1.0 / (self.table.participation[i] * self.table.treatment[a][i]);
        if w.is_finite() {
            Ok(w)
        } else {
            Err(EstimationError::NonFiniteWeight { row: i + 1 })
        }
    }
}

fn weights(ctx: &EstimationContext, v: usize, a: usize, kind: WeightKind) -> Result<WeightVector, EstimationError> {
    let mut values = vec![0.0; ctx.ds.len()];
    for (i, row) in ctx.ds.rows().iter().enumerate() {
        if row.arm() == Some(a) && ctx.groups.contains(v, i) {
            let w = ctx.base_weight(i, a)?;
            values[i] = match kind {
                WeightKind::Ipw => w,
                WeightKind::Iow => w * (1.0 - ctx.table.participation[i]),
            };
        }
    }
    Ok(WeightVector { values, kind, subgroup: v, arm: a })
}

/// `I(S=1, A=a, X in v) / (p(X) e_a(X))`.
pub fn ipw_weights(ctx: &EstimationContext, v: usize, a: usize) -> Result<WeightVector, EstimationError> {
    weights(ctx, v, a, WeightKind::Ipw)
}

/// `I(S=1, A=a, X in v) (1 - p(X)) / (p(X) e_a(X))`.
pub fn iow_weights(ctx: &EstimationContext, v: usize, a: usize) -> Result<WeightVector, EstimationError> {
    weights(ctx, v, a, WeightKind::Iow)
}

/// Sufficient sums for all closed-form estimators of one `(v, a)` cell.
#[derive(Debug, Clone, Copy, Default)]
struct CellSums {
    n_v: usize,
    n_v0: usize,
    n_cell: usize,
    sum_y_cell: f64,
    // inverse probability weights
    sw: f64,
    sw2: f64,
    swy: f64,
    swr: f64,
    // inverse odds weights
    so: f64,
    so2: f64,
    soy: f64,
    sor: f64,
    // outcome model over v and over (v, S = 0)
    sg: f64,
    sg0: f64,
}

impl CellSums {
    fn compute(ctx: &EstimationContext, v: usize, a: usize) -> Result<CellSums, EstimationError> {
        let mut c = CellSums::default();
        let g = &ctx.table.outcome[a];
        for (i, row) in ctx.ds.rows().iter().enumerate() {
            if !ctx.groups.contains(v, i) {
                continue;
            }
            c.n_v += 1;
            c.sg += g[i];
            match row.trial {
                None => {
                    c.n_v0 += 1;
                    c.sg0 += g[i];
                }
                Some(t) if t.arm == a => {
                    let w = ctx.base_weight(i, a)?;
                    let o = w * (1.0 - ctx.table.participation[i]);
                    c.n_cell += 1;
                    c.sum_y_cell += t.y;
                    c.sw += w;
                    c.sw2 += w * w;
                    c.swy += w * t.y;
                    c.swr += w * (t.y - g[i]);
                    c.so += o;
                    c.so2 += o * o;
                    c.soy += o * t.y;
                    c.sor += o * (t.y - g[i]);
                }
                Some(_) => {}
            }
        }
        Ok(c)
    }

    fn value(&self, tag: EstimatorTag) -> Option<f64> {
        use EstimatorTag::*;
        let n_v = self.n_v as f64;
        let n_v0 = self.n_v0 as f64;
        Some(match tag {
            Om => self.sg / n_v,
            Ipw1 => self.swy / n_v,
            Ipw2 => self.swy / self.sw,
            Aipw1 => (self.swr + self.sg) / n_v,
            Aipw2 => self.swr / self.sw + self.sg / n_v,
            OmS0 => self.sg0 / n_v0,
            Iow1 => self.soy / n_v0,
            Iow2 => self.soy / self.so,
            Aiow1 => (self.sor + self.sg0) / n_v0,
            Aiow2 => self.sor / self.so + self.sg0 / n_v0,
            Trial => self.sum_y_cell / self.n_cell as f64,
            Aipw3 | Aiow3 | SatIpw2 | SatIow2 => return None,
        })
    }

    fn diagnostics(&self, tag: EstimatorTag) -> EstimateDiagnostics {
        let ipw = |sw: f64, sw2: f64| (Some(sw), Some(sw * sw / sw2));
        let (weight_sum, effective_sample_size) = match tag.scope() {
            _ if tag == EstimatorTag::Trial => (None, None),
            _ if matches!(tag, EstimatorTag::Om | EstimatorTag::OmS0) => (None, None),
            Some(EstimandScope::EntirePopulation) => ipw(self.sw, self.sw2),
            Some(EstimandScope::NonRandomized) => ipw(self.so, self.so2),
            None => (None, None),
        };
        let n_rows = match tag.scope() {
            Some(EstimandScope::EntirePopulation) => self.n_v,
            Some(EstimandScope::NonRandomized) => self.n_v0,
            None => self.n_cell,
        };
        EstimateDiagnostics { n_rows, n_included: self.n_cell, weight_sum, effective_sample_size }
    }

    /// Denominator checks for `tag`.
    fn check(&self, ctx: &EstimationContext, tag: EstimatorTag, v: usize, a: usize) -> Result<(), EstimationError> {
        use EstimatorTag::*;
        let empty = || EstimationError::EmptySubgroup { subgroup: ctx.subgroup(v) };
        let empty0 = || EstimationError::EmptyNonRandomized { subgroup: ctx.subgroup(v) };
        let zero = || EstimationError::ZeroWeightSum { subgroup: ctx.subgroup(v), arm: ctx.arm(a) };
        match tag {
            Trial | SatIpw2 | SatIow2 if self.n_cell == 0 => {
                Err(EstimationError::EmptyTrialCell { subgroup: ctx.subgroup(v), arm: ctx.arm(a) })
            }
            Om | Ipw1 | Aipw1 | Aipw3 if self.n_v == 0 => Err(empty()),
            Ipw2 | Aipw2 | SatIpw2 if self.n_v == 0 => Err(empty()),
            Ipw2 | Aipw2 if !(self.sw > 0.0) => Err(zero()),
            OmS0 | Iow1 | Aiow1 | Aiow2 | Aiow3 if self.n_v0 == 0 => Err(empty0()),
            Iow2 | Aiow2 | SatIow2 if !(self.so > 0.0) => Err(zero()),
            _ => Ok(()),
        }
    }
}

fn check_scope(ctx: &EstimationContext, tag: EstimatorTag) -> Result<(), EstimationError> {
    if tag.scope() == Some(EstimandScope::EntirePopulation) && ctx.ds.design() == Design::NonNested {
        return Err(EstimationError::ScopeDesign);
    }
    Ok(())
}

fn closed_form(ctx: &EstimationContext, tag: EstimatorTag, v: usize, a: usize) -> Result<PomEstimate, EstimationError> {
    check_scope(ctx, tag)?;
    let sums = CellSums::compute(ctx, v, a)?;
    finish(ctx, &sums, tag, v, a)
}

fn finish(
    ctx: &EstimationContext,
    sums: &CellSums,
    tag: EstimatorTag,
    v: usize,
    a: usize,
) -> Result<PomEstimate, EstimationError> {
    sums.check(ctx, tag, v, a)?;
    let value = sums.value(tag).expect("closed-form estimator");
    Ok(PomEstimate {
        estimator: tag,
        scope: tag.scope(),
        subgroup: ctx.subgroup(v),
        arm: ctx.arm(a),
        value,
        diagnostics: sums.diagnostics(tag),
    })
}

/// Outcome-model standardization over the whole subgroup.
pub fn om_target(ctx: &EstimationContext, v: usize, a: usize) -> Result<PomEstimate, EstimationError> {
    closed_form(ctx, EstimatorTag::Om, v, a)
}

pub fn ipw1(ctx: &EstimationContext, v: usize, a: usize) -> Result<PomEstimate, EstimationError> {
    closed_form(ctx, EstimatorTag::Ipw1, v, a)
}

pub fn ipw2(ctx: &EstimationContext, v: usize, a: usize) -> Result<PomEstimate, EstimationError> {
    closed_form(ctx, EstimatorTag::Ipw2, v, a)
}

pub fn aipw1(ctx: &EstimationContext, v: usize, a: usize) -> Result<PomEstimate, EstimationError> {
    closed_form(ctx, EstimatorTag::Aipw1, v, a)
}

pub fn aipw2(ctx: &EstimationContext, v: usize, a: usize) -> Result<PomEstimate, EstimationError> {
    closed_form(ctx, EstimatorTag::Aipw2, v, a)
}

/// Outcome-model standardization over the non-randomized rows of the subgroup.
pub fn om_s0(ctx: &EstimationContext, v: usize, a: usize) -> Result<PomEstimate, EstimationError> {
    closed_form(ctx, EstimatorTag::OmS0, v, a)
}

pub fn iow1(ctx: &EstimationContext, v: usize, a: usize) -> Result<PomEstimate, EstimationError> {
    closed_form(ctx, EstimatorTag::Iow1, v, a)
}

pub fn iow2(ctx: &EstimationContext, v: usize, a: usize) -> Result<PomEstimate, EstimationError> {
    closed_form(ctx, EstimatorTag::Iow2, v, a)
}

pub fn aiow1(ctx: &EstimationContext, v: usize, a: usize) -> Result<PomEstimate, EstimationError> {
    closed_form(ctx, EstimatorTag::Aiow1, v, a)
}

pub fn aiow2(ctx: &EstimationContext, v: usize, a: usize) -> Result<PomEstimate, EstimationError> {
    closed_form(ctx, EstimatorTag::Aiow2, v, a)
}

/// Unweighted mean outcome of trial participants in `(v, a)`.
pub fn trial_mean(ctx: &EstimationContext, v: usize, a: usize) -> Result<PomEstimate, EstimationError> {
    closed_form(ctx, EstimatorTag::Trial, v, a)
}

fn scope_tags(scope: EstimandScope) -> (EstimatorTag, EstimatorTag, WeightKind) {
    match scope {
        EstimandScope::EntirePopulation => (EstimatorTag::SatIpw2, EstimatorTag::Aipw3, WeightKind::Ipw),
        EstimandScope::NonRandomized => (EstimatorTag::SatIow2, EstimatorTag::Aiow3, WeightKind::Iow),
    }
}

/// Trial-row weights `1 / (p e_{A_i})` (times `1 - p` for odds weights),
/// rescaled to mean one; fitted coefficients do not depend on the scale.
fn regression_weights(ctx: &EstimationContext, rows: &[usize], kind: WeightKind) -> Result<Vec<f64>, EstimationError> {
    let mut w = Vec::with_capacity(rows.len());
    for &i in rows {
        let a = ctx.ds.rows()[i].arm().expect("trial row");
        let base = ctx.base_weight(i, a)?;
        w.push(match kind {
            WeightKind::Ipw => base,
            WeightKind::Iow => base * (1.0 - ctx.table.participation[i]),
        });
    }
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    Ok(w.into_iter().map(|x| x / mean).collect())
}

/// Weighted linear regression of `Y` on treatment and subgroup indicators and
/// all their products, among trial participants. Returns means indexed
/// `[v][a]`, recovered as sums of coefficients.
pub fn saturated_weighted_regression(
    ctx: &EstimationContext,
    scope: EstimandScope,
) -> Vec<Vec<Result<PomEstimate, EstimationError>>> {
    let k = ctx.groups.len();
    let m = ctx.ds.treatment_levels().len();
    let (tag, _, kind) = scope_tags(scope);
    let all_cells = |e: EstimationError| vec![vec![Err(e); m]; k];
    if let Err(e) = check_scope(ctx, tag) {
        return all_cells(e);
    }
    let mut sums = vec![vec![CellSums::default(); m]; k];
    for v in 0..k {
        for a in 0..m {
            match CellSums::compute(ctx, v, a) {
                Ok(s) => sums[v][a] = s,
                Err(e) => return all_cells(e),
            }
        }
    }
    // Any empty cell makes the saturated design singular.
    for v in 0..k {
        for a in 0..m {
            if let Err(e) = sums[v][a].check(ctx, tag, v, a) {
                return all_cells(e);
            }
        }
    }
    let rows = ctx.ds.trial_rows();
    let w = match regression_weights(ctx, &rows, kind) {
        Ok(w) => w,
        Err(e) => return all_cells(e),
    };
    let col_a = |a: usize| a;
    let col_v = |v: usize| m - 1 + v;
    let col_av = |v: usize, a: usize| m + k - 1 + (a - 1) * (k - 1) + (v - 1);
    let p = m * k;
    let mut names = vec!["(Intercept)".to_string()];
    names.extend((1..m).map(|a| format!("A[{}]", ctx.arm(a))));
    names.extend((1..k).map(|v| format!("V[{}]", ctx.subgroup(v))));
    for a in 1..m {
        for v in 1..k {
            names.push(format!("A[{}]:V[{}]", ctx.arm(a), ctx.subgroup(v)));
        }
    }
    let mut x = DMatrix::zeros(rows.len(), p);
    let mut y = Vec::with_capacity(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        let row = &ctx.ds.rows()[i];
        let a = row.arm().expect("trial row");
        let v = ctx.groups.membership()[i];
        x[(r, 0)] = 1.0;
        if a > 0 {
            x[(r, col_a(a))] = 1.0;
        }
        if v > 0 {
            x[(r, col_v(v))] = 1.0;
        }
        if a > 0 && v > 0 {
            x[(r, col_av(v, a))] = 1.0;
        }
        y.push(row.y().expect("trial row"));
    }
    let fit = match fit_weighted_glm(&DesignMatrix::new(x, names), &y, &w, Family::Gaussian) {
        Ok(f) => f,
        Err(e) => return all_cells(EstimationError::FitFailed { estimator: tag, message: e.to_string() }),
    };
    let b = &fit.beta;
    (0..k)
        .map(|v| {
            (0..m)
                .map(|a| {
                    let mut value = b[0];
                    if a > 0 {
                        value += b[col_a(a)];
                    }
                    if v > 0 {
                        value += b[col_v(v)];
                    }
                    if a > 0 && v > 0 {
                        value += b[col_av(v, a)];
                    }
                    let s = &sums[v][a];
                    let (sw, sw2) = match kind {
                        WeightKind::Ipw => (s.sw, s.sw2),
                        WeightKind::Iow => (s.so, s.so2),
                    };
                    Ok(PomEstimate {
                        estimator: tag,
                        scope: Some(scope),
                        subgroup: ctx.subgroup(v),
                        arm: ctx.arm(a),
                        value,
                        diagnostics: EstimateDiagnostics {
                            n_rows: s.n_cell,
                            n_included: s.n_cell,
                            weight_sum: Some(sw),
                            effective_sample_size: Some(sw * sw / sw2),
                        },
                    })
                })
                .collect()
        })
        .collect()
}

/// Outcome model for arm `a` fitted among that arm's trial participants with
/// inverse probability (or odds) weights, evaluated on every row.
fn weighted_outcome_predictions(
    ctx: &EstimationContext,
    formula: &ModelFormula,
    a: usize,
    scope: EstimandScope,
) -> Result<Vec<f64>, EstimationError> {
    let (_, tag, kind) = scope_tags(scope);
    let rows = ctx.ds.arm_rows(a);
    let w = regression_weights(ctx, &rows, kind)?;
    let y: Vec<f64> = rows.iter().map(|&i| ctx.ds.rows()[i].y().expect("trial row")).collect();
    let fail = |e: crate::glm::GlmError| EstimationError::FitFailed { estimator: tag, message: e.to_string() };
    let model = FittedGlm::fit(formula, ctx.ds, &rows, &y, &w).map_err(fail)?;
    model.predict_all(ctx.ds).map_err(fail)
}

fn standardize(
    ctx: &EstimationContext,
    predictions: &[f64],
    scope: EstimandScope,
    v: usize,
    a: usize,
) -> Result<PomEstimate, EstimationError> {
    let (_, tag, _) = scope_tags(scope);
    let mut n = 0usize;
    let mut total = 0.0;
    for (i, row) in ctx.ds.rows().iter().enumerate() {
        if ctx.groups.contains(v, i) && (scope == EstimandScope::EntirePopulation || !row.in_trial()) {
            n += 1;
            total += predictions[i];
        }
    }
    if n == 0 {
        return Err(match scope {
            EstimandScope::EntirePopulation => EstimationError::EmptySubgroup { subgroup: ctx.subgroup(v) },
            EstimandScope::NonRandomized => EstimationError::EmptyNonRandomized { subgroup: ctx.subgroup(v) },
        });
    }
    let n_included = ctx.ds.rows().iter().enumerate().filter(|(i, r)| r.arm() == Some(a) && ctx.groups.contains(v, *i)).count();
    Ok(PomEstimate {
        estimator: tag,
        scope: Some(scope),
        subgroup: ctx.subgroup(v),
        arm: ctx.arm(a),
        value: total / n as f64,
        diagnostics: EstimateDiagnostics { n_rows: n, n_included, weight_sum: None, effective_sample_size: None },
    })
}

/// AIPW3 (entire population) or AIOW3 (non-randomized subset).
pub fn weighted_regression_standardization(
    ctx: &EstimationContext,
    outcome: &ModelFormula,
    v: usize,
    a: usize,
    scope: EstimandScope,
) -> Result<PomEstimate, EstimationError> {
    check_scope(ctx, scope_tags(scope).1)?;
    let g = weighted_outcome_predictions(ctx, outcome, a, scope)?;
    standardize(ctx, &g, scope, v, a)
}

/// `estimate(a) - estimate(reference)` for every `(estimator, subgroup)`
/// present in `estimates`.
pub fn subgroup_ate(
    estimates: &[PomEstimate],
    arm: &str,
    reference: &str,
) -> Vec<Result<EffectEstimate, EstimationError>> {
    let mut keys: Vec<(EstimatorTag, &str)> = Vec::new();
    for e in estimates {
        if !keys.contains(&(e.estimator, e.subgroup.as_str())) {
            keys.push((e.estimator, e.subgroup.as_str()));
        }
    }
    keys.into_iter()
        .map(|(tag, subgroup)| {
            let find = |label: &str| {
                estimates
                    .iter()
                    .find(|e| e.estimator == tag && e.subgroup == subgroup && e.arm == label)
                    .ok_or_else(|| EstimationError::MissingArm { arm: label.to_string() })
            };
            let (x, r) = (find(arm)?, find(reference)?);
            Ok(EffectEstimate {
                estimator: tag,
                scope: tag.scope(),
                subgroup: subgroup.to_string(),
                arm: arm.to_string(),
                reference: reference.to_string(),
                value: x.value - r.value,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanCell {
    pub estimator: EstimatorTag,
    pub subgroup: usize,
    pub arm: usize,
    pub result: Result<PomEstimate, EstimationError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectCell {
    pub estimator: EstimatorTag,
    pub subgroup: usize,
    /// Non-reference arm; the reference is arm 0.
    pub arm: usize,
    pub result: Result<EffectEstimate, EstimationError>,
}

/// All requested cells: means ordered by (estimator, subgroup, arm), effects
/// of each non-reference arm against arm 0 ordered by (estimator, subgroup, arm).
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSet {
    pub estimators: Vec<EstimatorTag>,
    pub subgroups: Vec<String>,
    pub arms: Vec<String>,
    pub means: Vec<MeanCell>,
    pub effects: Vec<EffectCell>,
}

impl EstimateSet {
    pub fn mean(&self, tag: EstimatorTag, v: usize, a: usize) -> Option<&Result<PomEstimate, EstimationError>> {
        let e = self.estimators.iter().position(|t| *t == tag)?;
        let (k, m) = (self.subgroups.len(), self.arms.len());
        self.means.get((e * k + v) * m + a).map(|c| &c.result)
    }

    pub fn effect(&self, tag: EstimatorTag, v: usize, a: usize) -> Option<&Result<EffectEstimate, EstimationError>> {
        let e = self.estimators.iter().position(|t| *t == tag)?;
        let (k, m) = (self.subgroups.len(), self.arms.len());
        if a == 0 || a >= m {
            return None;
        }
        self.effects.get((e * k + v) * (m - 1) + a - 1).map(|c| &c.result)
    }

    /// True when no cell carries an error.
    pub fn all_ok(&self) -> bool {
        self.means.iter().all(|c| c.result.is_ok()) && self.effects.iter().all(|c| c.result.is_ok())
    }

    /// Cell values in a fixed order (means then effects); `None` for errors.
    pub fn values(&self) -> Vec<Option<f64>> {
        self.means
            .iter()
            .map(|c| c.result.as_ref().ok().map(|e| e.value))
            .chain(self.effects.iter().map(|c| c.result.as_ref().ok().map(|e| e.value)))
            .collect()
    }
}

/// Evaluates every requested estimator in every `(subgroup, arm)` cell.
/// `outcome` is the formula for AIPW3/AIOW3 (the nuisance outcome formula).
pub fn estimate_all(ctx: &EstimationContext, estimators: &[EstimatorTag], outcome: &ModelFormula) -> EstimateSet {
    let k = ctx.groups.len();
    let m = ctx.ds.treatment_levels().len();
    let sums: Vec<Vec<Result<CellSums, EstimationError>>> =
        (0..k).map(|v| (0..m).map(|a| CellSums::compute(ctx, v, a)).collect()).collect();
    let mut means = Vec::with_capacity(estimators.len() * k * m);
    for &tag in estimators {
        let block: Vec<Vec<Result<PomEstimate, EstimationError>>> = match tag {
            EstimatorTag::SatIpw2 => saturated_weighted_regression(ctx, EstimandScope::EntirePopulation),
            EstimatorTag::SatIow2 => saturated_weighted_regression(ctx, EstimandScope::NonRandomized),
            EstimatorTag::Aipw3 | EstimatorTag::Aiow3 => {
                let scope = tag.scope().expect("weighted estimator");
                match check_scope(ctx, tag) {
                    Err(e) => vec![vec![Err(e); m]; k],
                    Ok(()) => {
                        let per_arm: Vec<Result<Vec<f64>, EstimationError>> =
                            (0..m).map(|a| weighted_outcome_predictions(ctx, outcome, a, scope)).collect();
                        (0..k)
                            .map(|v| {
                                (0..m)
                                    .map(|a| match &per_arm[a] {
                                        Ok(g) => standardize(ctx, g, scope, v, a),
                                        Err(e) => Err(e.clone()),
                                    })
                                    .collect()
                            })
                            .collect()
                    }
                }
            }
            _ => (0..k)
                .map(|v| {
                    (0..m)
                        .map(|a| {
                            check_scope(ctx, tag)?;
                            let s = sums[v][a].as_ref().map_err(|e| e.clone())?;
                            finish(ctx, s, tag, v, a)
                        })
                        .collect()
                })
                .collect(),
        };
        for (v, row) in block.into_iter().enumerate() {
            for (a, result) in row.into_iter().enumerate() {
                means.push(MeanCell { estimator: tag, subgroup: v, arm: a, result });
            }
        }
    }
    let mut effects = Vec::with_capacity(estimators.len() * k * m.saturating_sub(1));
    for (e, &tag) in estimators.iter().enumerate() {
        for v in 0..k {
            let cell = |a: usize| &means[(e * k + v) * m + a].result;
            for a in 1..m {
                let result = match (cell(a), cell(0)) {
                    (Ok(x), Ok(r)) => Ok(EffectEstimate {
                        estimator: tag,
                        scope: tag.scope(),
                        subgroup: x.subgroup.clone(),
                        arm: x.arm.clone(),
                        reference: r.arm.clone(),
                        value: x.value - r.value,
                    }),
                    (Err(err), _) | (_, Err(err)) => Err(err.clone()),
                };
                effects.push(EffectCell { estimator: tag, subgroup: v, arm: a, result });
            }
        }
    }
    EstimateSet {
        estimators: estimators.to_vec(),
        subgroups: ctx.groups.labels().to_vec(),
        arms: ctx.ds.treatment_levels().to_vec(),
        means,
        effects,
    }
}

/// Share of non-randomized rows with a numeric covariate outside the range
/// observed among trial participants, overall and per subgroup. Outcome-model
/// terms for those rows are extrapolations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtrapolationDiagnostic {
    pub overall: f64,
    pub by_subgroup: Vec<(String, f64)>,
}

pub fn extrapolation_diagnostic(ds: &Dataset, groups: &Subgroups) -> ExtrapolationDiagnostic {
    let p = ds.columns().len();
    let mut lo = vec![f64::INFINITY; p];
    let mut hi = vec![f64::NEG_INFINITY; p];
    for row in ds.rows().iter().filter(|r| r.in_trial()) {
        for (j, &x) in row.covariates.iter().enumerate() {
            lo[j] = lo[j].min(x);
            hi[j] = hi[j].max(x);
        }
    }
    let k = groups.len();
    let mut outside = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (i, row) in ds.rows().iter().enumerate() {
        if row.in_trial() {
            continue;
        }
        let v = groups.membership()[i];
        total[v] += 1;
        if row.covariates.iter().enumerate().any(|(j, &x)| x < lo[j] || x > hi[j]) {
            outside[v] += 1;
        }
    }
    let frac = |o: usize, t: usize| if t == 0 { 0.0 } else { o as f64 / t as f64 };
    ExtrapolationDiagnostic {
        overall: frac(outside.iter().sum(), total.iter().sum()),
        by_subgroup: (0..k).map(|v| (groups.labels()[v].clone(), frac(outside[v], total[v]))).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip() {
        for t in EstimatorTag::ALL {
            assert_eq!(t.as_str().parse::<EstimatorTag>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{}\"", t.as_str()));
        }
        assert!("IPW3".parse::<EstimatorTag>().unwrap_err().contains("AIOW2"));
        assert_eq!(EstimatorTag::for_scope(EstimandScope::NonRandomized).len(), 7);
    }

    #[test]
    fn error_codes() {
        assert_eq!(EstimationError::ScopeDesign.code(), "SCOPE_DESIGN");
        assert_eq!(EstimationError::EmptyNonRandomized { subgroup: "a".into() }.code(), "EMPTY_NONRANDOMIZED_SUBGROUP");
    }
}
