//! Participation, treatment and outcome models fitted on the right subsamples.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::glm::{Family, FittedGlm, GlmError, ModelFormula};

/// Predictions at or beyond this distance from 0 or 1 violate positivity.
pub const POSITIVITY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum Component {
    Participation,
    Treatment { arm: usize },
    Outcome { arm: usize },
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::Participation => f.write_str("participation model"),
            Component::Treatment { arm } => write!(f, "treatment model (arm {arm})"),
            Component::Outcome { arm } => write!(f, "outcome model (arm {arm})"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NuisanceError {
    #[error("{component}: {source}")]
    Fit { component: Component, source: GlmError },
    #[error("{component}: formula response `{found}` should be `{expected}`")]
    Response { component: Component, expected: String, found: String },
    #[error("{component}: prediction {value:e} at row {row} violates positivity")]
    Positivity { component: Component, row: usize, value: f64 },
    #[error("known treatment probabilities: {0}")]
    KnownProbability(String),
    #[error("{component} did not converge in {iterations} iterations (max score {max_score:e})")]
    NotConverged { component: Component, iterations: usize, max_score: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreatmentModel {
    /// Logistic model for `I(A = a)` among trial participants.
    Fitted(ModelFormula),
    /// Randomization probability per arm, known by design.
    Known(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceSpec {
    /// Binomial model for `S` over all rows.
    pub participation: ModelFormula,
    pub treatment: TreatmentModel,
    /// Shared formula, fitted separately within each arm of the trial.
    pub outcome: ModelFormula,
    /// Clamp `p` and `e` predictions to `[c, 1 - c]`. Off by default because it
    /// changes the estimand.
    pub truncation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NuisanceModel {
    Glm(FittedGlm),
    /// `1 - prediction` of the model (the reference arm of a binary trial).
    Complement(FittedGlm),
    Constant(f64),
}

impl NuisanceModel {
    pub fn predict(&self, ds: &Dataset, rows: &[usize]) -> Result<Vec<f64>, GlmError> {
        match self {
            NuisanceModel::Glm(m) => m.predict(ds, rows),
            NuisanceModel::Complement(m) => Ok(m.predict(ds, rows)?.into_iter().map(|p| 1.0 - p).collect()),
            NuisanceModel::Constant(c) => Ok(vec![*c; rows.len()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceSet {
    pub participation: FittedGlm,
    /// One per arm.
    pub treatment: Vec<NuisanceModel>,
    /// One per arm.
    pub outcome: Vec<FittedGlm>,
    pub truncation: Option<f64>,
    /// [`Dataset::fingerprint`] of the fitting data.
    pub fitted_on: u64,
}

/// Per-row nuisance predictions shared by every estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceTable {
    /// `p(X_i)` for every row.
    pub participation: Vec<f64>,
    /// `e_a(X_i)`, indexed `[arm][row]`.
    pub treatment: Vec<Vec<f64>>,
    /// `g_a(X_i)` for every row including `S = 0`, indexed `[arm][row]`.
    pub outcome: Vec<Vec<f64>>,
}

impl NuisanceTable {
    /// Table with the same value in every row of each column.
    pub fn constant(n: usize, p: f64, e: &[f64], g: &[f64]) -> NuisanceTable {
        NuisanceTable {
            participation: vec![p; n],
            treatment: e.iter().map(|&v| vec![v; n]).collect(),
            outcome: g.iter().map(|&v| vec![v; n]).collect(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.participation.len()
    }

    pub fn n_arms(&self) -> usize {
        self.treatment.len()
    }

    /// Copy with every outcome prediction replaced by `value`.
    pub fn with_constant_outcome(&self, value: f64) -> NuisanceTable {
        let n = self.n_rows();
        NuisanceTable { outcome: vec![vec![value; n]; self.n_arms()], ..self.clone() }
    }
}

fn check_response(
    component: Component,
    formula: &ModelFormula,
    expected: &str,
) -> Result<(), NuisanceError> {
    match &formula.response {
        Some(r) if r != expected => Err(NuisanceError::Response {
            component,
            expected: expected.to_string(),
            found: r.clone(),
        }),
        _ => Ok(()),
    }
}

fn fit_component(
    component: Component,
    formula: &ModelFormula,
    ds: &Dataset,
    rows: &[usize],
    y: &[f64],
) -> Result<FittedGlm, NuisanceError> {
    let w = vec![1.0; rows.len()];
    let m = FittedGlm::fit(formula, ds, rows, y, &w).map_err(|source| NuisanceError::Fit { component, source })?;
    if !m.converged() {
        return Err(NuisanceError::NotConverged {
            component,
            iterations: m.fit.iterations,
            max_score: m.fit.max_score,
        });
    }
    Ok(m)
}

pub fn fit_nuisances(ds: &Dataset, spec: &NuisanceSpec) -> Result<NuisanceSet, NuisanceError> {
    let names = ds.names();
    let n_arms = ds.treatment_levels().len();

    let participation_c = Component::Participation;
    check_response(participation_c, &spec.participation, &names.participation)?;
    if spec.participation.family != Family::Binomial {
        return Err(NuisanceError::Fit {
            component: participation_c,
            source: GlmError::Formula("participation model must be binomial".into()),
        });
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let s: Vec<f64> = ds.rows().iter().map(|r| r.s() as f64).collect();
    let participation = fit_component(participation_c, &spec.participation, ds, &all, &s)?;

    let trial = ds.trial_rows();
    let treatment = match &spec.treatment {
        TreatmentModel::Known(probs) => {
            if probs.len() != n_arms {
                return Err(NuisanceError::KnownProbability(format!(
                    "{} probabilities given for {n_arms} arms",
                    probs.len()
                )));
            }
            if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
                return Err(NuisanceError::KnownProbability(format!("{p} is not in (0, 1)")));
            }
            let total: f64 = probs.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(NuisanceError::KnownProbability(format!("probabilities sum to {total}, not 1")));
            }
            probs.iter().map(|&p| NuisanceModel::Constant(p)).collect()
        }
        TreatmentModel::Fitted(formula) => {
            check_response(Component::Treatment { arm: 0 }, formula, &names.treatment)?;
            let fit_arm = |arm: usize| {
                let y: Vec<f64> = trial.iter().map(|&i| (ds.rows()[i].arm() == Some(arm)) as u8 as f64).collect();
                let f = ModelFormula { family: Family::Binomial, ..formula.clone() };
                fit_component(Component::Treatment { arm }, &f, ds, &trial, &y)
            };
            if n_arms == 2 {
                let m = fit_arm(1)?;
                vec![NuisanceModel::Complement(m.clone()), NuisanceModel::Glm(m)]
            } else {
                (0..n_arms).map(|a| fit_arm(a).map(NuisanceModel::Glm)).collect::<Result<_, _>>()?
            }
        }
    };

    check_response(Component::Outcome { arm: 0 }, &spec.outcome, &names.outcome)?;
    let outcome = (0..n_arms)
        .map(|arm| {
            let rows = ds.arm_rows(arm);
            let y: Vec<f64> = rows.iter().map(|&i| ds.rows()[i].y().expect("trial row")).collect();
            fit_component(Component::Outcome { arm }, &spec.outcome, ds, &rows, &y)
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(NuisanceSet {
        participation,
        treatment,
        outcome,
        truncation: spec.truncation,
        fitted_on: ds.fingerprint(),
    })
}

/// Evaluates every model on every row of `ds` and applies the positivity guard
/// (or the truncation, when enabled).
pub fn predict_nuisances(ns: &NuisanceSet, ds: &Dataset) -> Result<NuisanceTable, NuisanceError> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut participation = ns
        .participation
        .predict(ds, &all)
        .map_err(|source| NuisanceError::Fit { component: Component::Participation, source })?;
    let mut treatment = Vec::with_capacity(ns.treatment.len());
    for (arm, m) in ns.treatment.iter().enumerate() {
        let e = m.predict(ds, &all).map_err(|source| NuisanceError::Fit { component: Component::Treatment { arm }, source })?;
        treatment.push(e);
    }
    let mut outcome = Vec::with_capacity(ns.outcome.len());
    for (arm, m) in ns.outcome.iter().enumerate() {
        let g = m.predict(ds, &all).map_err(|source| NuisanceError::Fit { component: Component::Outcome { arm }, source })?;
        outcome.push(g);
    }

    let guard = |component: Component, values: &mut [f64], rows: &mut dyn Iterator<Item = usize>| {
        for i in rows {
            let v = &mut values[i];
            match ns.truncation {
                Some(c) => *v = v.clamp(c, 1.0 - c),
                None if !(*v > POSITIVITY_EPS && *v < 1.0 - POSITIVITY_EPS) => {
                    return Err(NuisanceError::Positivity { component, row: i + 1, value: *v });
                }
                None => {}
            }
        }
        Ok(())
    };
    guard(Component::Participation, &mut participation, &mut (0..ds.len()))?;
    for (arm, e) in treatment.iter_mut().enumerate() {
        guard(Component::Treatment { arm }, e, &mut ds.rows().iter().enumerate().filter(|(_, r)| r.in_trial()).map(|(i, _)| i))?;
    }
    Ok(NuisanceTable { participation, treatment, outcome })
}

pub fn fit_and_predict(ds: &Dataset, spec: &NuisanceSpec) -> Result<(NuisanceSet, NuisanceTable), NuisanceError> {
    let ns = fit_nuisances(ds, spec)?;
    let table = predict_nuisances(&ns, ds)?;
    Ok((ns, table))
}
