//! Data-generating processes, oracle truths and Monte Carlo studies.
//!
//! Covariates are independent draws from simple laws. Participation and the
//! outcome mean are given by linear predictors such as
//! `-0.5 + 0.4*X1 + 0.8*X2 + 0.5*X1*X2`; the outcome predictor may also use
//! the treatment `A` (arm index). Both potential outcomes are drawn for every
//! row so that oracles can use them, but estimators only ever see `Y = Y^A`
//! on trial rows.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use gauss_quad::{GaussHermite, GaussLegendre};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Column, DataError, Dataset, Design, EstimandScope, Observation, Subgroups, TrialRecord};
use crate::estimators::{estimate_all, EstimateSet, EstimationContext, EstimatorTag};
use crate::glm::{Factor, Family, ModelFormula, Term};
use crate::inference::{bootstrap_estimates, BootstrapConfig};
use crate::nuisance::{fit_and_predict, NuisanceSpec, TreatmentModel};
use crate::rng::{derive_seed, stream};

/// Name of the treatment in outcome linear predictors.
pub const TREATMENT_VAR: &str = "A";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid data-generating process: {0}")]
    Dgp(String),
    #[error("linear predictor `{text}`: {message}")]
    Predictor { text: String, message: String },
    #[error("unknown scenario `{0}`; valid: both_correct, participation_wrong, outcome_wrong, both_wrong")]
    UnknownScenario(String),
    #[error("sample: {0}")]
    Data(#[from] DataError),
    #[error("{failed} of {replications} replications failed (limit 10%); first failure: {first}")]
    TooManyFailures { failed: usize, replications: usize, first: String },
    #[error("no oracle truth for {0}")]
    MissingTruth(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum CovariateLaw {
    Bernoulli { p: f64 },
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, sd: f64 },
}

impl CovariateLaw {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            CovariateLaw::Bernoulli { p } => (rng.random::<f64>() < p) as u8 as f64,
            CovariateLaw::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            CovariateLaw::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
        }
    }

    /// Quadrature nodes and probability weights.
    fn nodes(&self, degree: usize) -> Vec<(f64, f64)> {
        match *self {
            CovariateLaw::Bernoulli { p } => vec![(0.0, 1.0 - p), (1.0, p)],
            CovariateLaw::Uniform { lo, hi } => {
                let rule = GaussLegendre::new(degree).expect("degree >= 2");
                rule.as_node_weight_pairs()
                    .iter()
                    .map(|&(x, w)| (lo + (hi - lo) * (x + 1.0) / 2.0, w / 2.0))
                    .collect()
            }
            CovariateLaw::Normal { mean, sd } => {
                let rule = GaussHermite::new(degree).expect("degree >= 2");
                let norm = std::f64::consts::PI.sqrt();
                rule.as_node_weight_pairs()
                    .iter()
                    .map(|&(x, w)| (mean + std::f64::consts::SQRT_2 * sd * x, w / norm))
                    .collect()
            }
        }
    }

    fn validate(&self) -> Result<(), String> {
        match *self {
            CovariateLaw::Bernoulli { p } if !(0.0..=1.0).contains(&p) => Err(format!("Bernoulli p={p}")),
            CovariateLaw::Uniform { lo, hi } if !(lo < hi) => Err(format!("Uniform({lo}, {hi})")),
            CovariateLaw::Normal { sd, .. } if !(sd > 0.0) => Err(format!("Normal sd={sd}")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(flatten)]
    pub law: CovariateLaw,
}

/// `intercept + sum_k coef_k * prod(factors_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictor {
    pub intercept: f64,
    pub terms: Vec<(f64, Vec<String>)>,
}

impl LinearPredictor {
    pub fn parse(text: &str) -> Result<LinearPredictor, SimError> {
        let err = |message: &str| SimError::Predictor { text: text.to_string(), message: message.to_string() };
        let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
        if compact.is_empty() {
            return Err(err("empty"));
        }
        // Split into signed terms, leaving exponents like 1e-3 intact.
        let chars: Vec<char> = compact.chars().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        for i in 1..chars.len() {
            let c = chars[i];
            let exponent = matches!(chars[i - 1], 'e' | 'E') && i >= 2 && chars[i - 2].is_ascii_digit();
            if (c == '+' || c == '-') && !exponent && chars[i - 1] != '*' {
                pieces.push(chars[start..i].iter().collect::<String>());
                start = i;
            }
        }
        pieces.push(chars[start..].iter().collect());
        let mut lp = LinearPredictor { intercept: 0.0, terms: Vec::new() };
        for piece in pieces {
            let (sign, body) = match piece.strip_prefix('-') {
                Some(rest) => (-1.0, rest.to_string()),
                None => (1.0, piece.strip_prefix('+').unwrap_or(&piece).to_string()),
            };
            if body.is_empty() {
                return Err(err("dangling sign"));
            }
            let mut coef = sign;
            let mut factors = Vec::new();
            for f in body.split('*') {
                if f.is_empty() {
                    return Err(err("empty factor"));
                }
                match f.parse::<f64>() {
                    Ok(c) => coef *= c,
                    Err(_) => {
                        if !f.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.') {
                            return Err(err(&format!("bad factor `{f}`")));
                        }
                        factors.push(f.to_string());
                    }
                }
            }
            if factors.is_empty() {
                lp.intercept += coef;
            } else {
                lp.terms.push((coef, factors));
            }
        }
        Ok(lp)
    }

    pub fn variables(&self) -> BTreeSet<&str> {
        self.terms.iter().flat_map(|(_, f)| f.iter().map(String::as_str)).collect()
    }

    fn compile(&self, names: &[String]) -> Result<Compiled, String> {
        let mut terms = Vec::new();
        for (c, factors) in &self.terms {
            let idx = factors
                .iter()
                .map(|f| {
                    if f == TREATMENT_VAR {
                        Ok(names.len())
                    } else {
                        names.iter().position(|n| n == f).ok_or_else(|| format!("unknown variable `{f}`"))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            terms.push((*c, idx));
        }
        Ok(Compiled { intercept: self.intercept, terms })
    }
}

impl fmt::Display for LinearPredictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.intercept)?;
        for (c, factors) in &self.terms {
            let sign = if *c < 0.0 { '-' } else { '+' };
            write!(f, " {sign} {}*{}", c.abs(), factors.join("*"))?;
        }
        Ok(())
    }
}

impl FromStr for LinearPredictor {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LinearPredictor::parse(s)
    }
}

impl Serialize for LinearPredictor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LinearPredictor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        LinearPredictor::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// Linear predictor resolved to column indices; index `p` is the treatment.
#[derive(Debug, Clone)]
struct Compiled {
    intercept: f64,
    terms: Vec<(f64, Vec<usize>)>,
}

impl Compiled {
    fn eval(&self, x: &[f64], a: f64) -> f64 {
        let p = x.len();
        let mut eta = self.intercept;
        for (c, idx) in &self.terms {
            let mut prod = *c;
            for &j in idx {
                prod *= if j == p { a } else { x[j] };
            }
            eta += prod;
        }
        eta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum OutcomeLaw {
    Binomial,
    Gaussian { noise_sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dgp {
    pub covariates: Vec<CovariateSpec>,
    /// Logit of `Pr[S = 1 | X]`.
    pub participation: LinearPredictor,
    /// `Pr[A = a | S = 1]` per arm, arms labelled `0, 1, ...`.
    pub treatment: Vec<f64>,
    /// Logit (binomial) or mean (Gaussian) of `Y^a` given `X`, with `A = a`.
    pub outcome: LinearPredictor,
    #[serde(flatten)]
    pub outcome_law: OutcomeLaw,
    /// Bernoulli covariate whose two values define the subgroups.
    pub subgroup: String,
}

fn expit(x: f64) -> f64 {
    Family::Binomial.inverse_link(x)
}

impl Dgp {
    /// Default study design of the simulation suite.
    pub fn default_study() -> Dgp {
        Dgp {
            covariates: vec![
                CovariateSpec { name: "X1".into(), law: CovariateLaw::Bernoulli { p: 0.5 } },
                CovariateSpec { name: "X2".into(), law: CovariateLaw::Uniform { lo: -1.0, hi: 1.0 } },
                CovariateSpec { name: "X3".into(), law: CovariateLaw::Bernoulli { p: 0.3 } },
            ],
            participation: "-0.5 + 0.4*X1 + 0.8*X2 - 0.6*X3 + 0.5*X1*X2".parse().expect("valid"),
            treatment: vec![0.5, 0.5],
            outcome: "-0.2 + 0.3*A + 0.5*X1 - 0.7*X2 + 0.4*X3 - 0.6*A*X1 + 0.3*A*X2".parse().expect("valid"),
            outcome_law: OutcomeLaw::Binomial,
            subgroup: "X1".into(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.covariates.iter().map(|c| c.name.clone()).collect()
    }

    pub fn n_arms(&self) -> usize {
        self.treatment.len()
    }

    pub fn arm_labels(&self) -> Vec<String> {
        (0..self.n_arms()).map(|a| a.to_string()).collect()
    }

    fn subgroup_index(&self) -> usize {
        self.covariates.iter().position(|c| c.name == self.subgroup).expect("validated")
    }

    pub fn subgroup_labels(&self) -> Vec<String> {
        vec!["0".into(), "1".into()]
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| SimError::Dgp(m);
        if self.covariates.is_empty() {
            return Err(bad("no covariates".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &self.covariates {
            c.law.validate().map_err(|m| bad(format!("{}: {m}", c.name)))?;
            if c.name == TREATMENT_VAR || !seen.insert(c.name.as_str()) {
                return Err(bad(format!("covariate name `{}` is reserved or duplicated", c.name)));
            }
        }
        match self.covariates.iter().find(|c| c.name == self.subgroup) {
            Some(CovariateSpec { law: CovariateLaw::Bernoulli { p }, .. }) if *p > 0.0 && *p < 1.0 => {}
            _ => return Err(bad(format!("subgroup variable `{}` must be a non-degenerate Bernoulli covariate", self.subgroup))),
        }
        if self.treatment.len() < 2 {
            return Err(bad("need at least two arms".into()));
        }
        if self.treatment.iter().any(|p| !(*p > 0.0 && *p < 1.0)) || (self.treatment.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(bad(format!("treatment probabilities {:?} must lie in (0, 1) and sum to 1", self.treatment)));
        }
        let names = self.names();
        if self.participation.variables().contains(TREATMENT_VAR) {
            return Err(bad("participation cannot depend on treatment".into()));
        }
        self.participation.compile(&names).map_err(bad)?;
        self.outcome.compile(&names).map_err(bad)?;
        if let OutcomeLaw::Gaussian { noise_sd } = self.outcome_law {
            if !(noise_sd >= 0.0) {
                return Err(bad(format!("noise_sd={noise_sd}")));
            }
        }
        Ok(())
    }

    fn compiled(&self) -> (Compiled, Compiled) {
        let names = self.names();
        (self.participation.compile(&names).expect("validated"), self.outcome.compile(&names).expect("validated"))
    }

    /// True `Pr[S = 1 | X = x]`.
    pub fn participation_prob(&self, x: &[f64]) -> f64 {
        expit(self.compiled().0.eval(x, 0.0))
    }

    /// True `E[Y | X = x, S = 1, A = a] = E[Y^a | X = x]`.
    pub fn outcome_mean(&self, x: &[f64], a: usize) -> f64 {
        let eta = self.compiled().1.eval(x, a as f64);
        match self.outcome_law {
            OutcomeLaw::Binomial => expit(eta),
            OutcomeLaw::Gaussian { .. } => eta,
        }
    }

    pub fn outcome_family(&self) -> Family {
        match self.outcome_law {
            OutcomeLaw::Binomial => Family::Binomial,
            OutcomeLaw::Gaussian { .. } => Family::Gaussian,
        }
    }

    /// `E[f(X)]` by tensor-product quadrature over the covariate laws
    /// (enumeration for Bernoulli, Gauss-Legendre for uniform, Gauss-Hermite
    /// for normal covariates).
    pub fn expect(&self, degree: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
        let grids: Vec<Vec<(f64, f64)>> = self.covariates.iter().map(|c| c.law.nodes(degree)).collect();
        let mut x = vec![0.0; grids.len()];
        let mut idx = vec![0usize; grids.len()];
        let mut total = 0.0;
        loop {
            let mut w = 1.0;
            for (j, g) in grids.iter().enumerate() {
                x[j] = g[idx[j]].0;
                w *= g[idx[j]].1;
            }
            total += w * f(&x);
            let mut j = 0;
            loop {
                if j == grids.len() {
                    return total;
                }
                idx[j] += 1;
                if idx[j] < grids[j].len() {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
        }
    }

    /// Estimand by quadrature: `E[g_a(X) | X in v]` or `E[g_a(X) | X in v, S = 0]`.
    pub fn truth_by_quadrature(&self, v: usize, a: usize, scope: EstimandScope, degree: usize) -> f64 {
        let (cp, co) = self.compiled();
        let sv = self.subgroup_index();
        let law = self.outcome_law;
        let weight = |x: &[f64]| {
            let in_v = (x[sv] == v as f64) as u8 as f64;
            match scope {
                EstimandScope::EntirePopulation => in_v,
                EstimandScope::NonRandomized => in_v * (1.0 - expit(cp.eval(x, 0.0))),
            }
        };
        let mean = |x: &[f64]| {
            let eta = co.eval(x, a as f64);
            match law {
                OutcomeLaw::Binomial => expit(eta),
                OutcomeLaw::Gaussian { .. } => eta,
            }
        };
        self.expect(degree, |x| weight(x) * mean(x)) / self.expect(degree, weight)
    }

    /// Marginal `Pr[S = 1]` by quadrature.
    pub fn participation_rate(&self, degree: usize) -> f64 {
        let (cp, _) = self.compiled();
        self.expect(degree, |x| expit(cp.eval(x, 0.0)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "design", rename_all = "snake_case")]
pub enum SampleDesign {
    Nested { n: usize },
    /// `n_trial` rows drawn given `S = 1` appended to `n_obs` rows given `S = 0`.
    NonNested { n_trial: usize, n_obs: usize },
}

impl SampleDesign {
    pub fn design(&self) -> Design {
        match self {
            SampleDesign::Nested { .. } => Design::Nested,
            SampleDesign::NonNested { .. } => Design::NonNested,
        }
    }

    pub fn n(&self) -> usize {
        match *self {
            SampleDesign::Nested { n } => n,
            SampleDesign::NonNested { n_trial, n_obs } => n_trial + n_obs,
        }
    }
}

/// A simulated individual including the hidden potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct SimObservation {
    pub x: Vec<f64>,
    pub s: u8,
    pub a: Option<usize>,
    pub y: Option<f64>,
    /// `Y^a` for every arm; never passed to estimators.
    pub y_pot: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSample {
    pub dataset: Dataset,
    pub truth: Vec<SimObservation>,
}

impl SimSample {
    pub fn subgroups(&self, dgp: &Dgp) -> Subgroups {
        let j = dgp.subgroup_index();
        let membership = self.truth.iter().map(|o| o.x[j] as usize).collect();
        Subgroups::from_membership(dgp.subgroup_labels(), membership)
    }
}

fn draw_unit(dgp: &Dgp, cp: &Compiled, co: &Compiled, rng: &mut ChaCha8Rng, force_s: Option<u8>) -> SimObservation {
    loop {
        let x: Vec<f64> = dgp.covariates.iter().map(|c| c.law.sample(rng)).collect();
        let s = (rng.random::<f64>() < expit(cp.eval(&x, 0.0))) as u8;
        let y_pot: Vec<f64> = (0..dgp.n_arms())
            .map(|a| {
                let eta = co.eval(&x, a as f64);
                match dgp.outcome_law {
                    OutcomeLaw::Binomial => (rng.random::<f64>() < expit(eta)) as u8 as f64,
                    OutcomeLaw::Gaussian { noise_sd } => {
                        let z: f64 = StandardNormal.sample(rng);
                        eta + noise_sd * z
                    }
                }
            })
            .collect();
        let a = (s == 1).then(|| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut arm = dgp.n_arms() - 1;
            for (k, p) in dgp.treatment.iter().enumerate() {
                acc += p;
                if u < acc {
                    arm = k;
                    break;
                }
            }
            arm
        });
        if force_s.is_none_or(|f| f == s) {
            let y = a.map(|a| y_pot[a]);
            return SimObservation { x, s, a, y, y_pot };
        }
    }
}

/// Draws a sample. Nested: `X`, then `S | X`, then `A | S = 1`, then `Y = Y^A`.
/// Non-nested: rejection sampling given `S`.
pub fn generate_sample(dgp: &Dgp, design: SampleDesign, rng: &mut ChaCha8Rng) -> Result<SimSample, SimError> {
    dgp.validate()?;
    let (cp, co) = dgp.compiled();
    let truth: Vec<SimObservation> = match design {
        SampleDesign::Nested { n } => (0..n).map(|_| draw_unit(dgp, &cp, &co, rng, None)).collect(),
        SampleDesign::NonNested { n_trial, n_obs } => {
            let mut units: Vec<SimObservation> =
                (0..n_trial).map(|_| draw_unit(dgp, &cp, &co, rng, Some(1))).collect();
            units.extend((0..n_obs).map(|_| draw_unit(dgp, &cp, &co, rng, Some(0))));
            units
        }
    };
    let rows = truth
        .iter()
        .map(|o| Observation {
            covariates: o.x.clone(),
            trial: o.a.map(|arm| TrialRecord { arm, y: o.y.expect("trial row") }),
        })
        .collect();
    let columns = dgp.names().into_iter().map(Column::numeric).collect();
    let dataset = Dataset::new(rows, design.design(), columns, dgp.arm_labels())?;
    Ok(SimSample { dataset, truth })
}

/// Which population quantity a truth or a Monte Carlo cell refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Quantity {
    Mean { arm: usize },
    Effect { arm: usize, reference: usize },
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Quantity::Mean { arm } => write!(f, "{arm}"),
            Quantity::Effect { arm, reference } => write!(f, "{arm}-{reference}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub value: f64,
    /// Monte Carlo standard error.
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthCell {
    pub scope: EstimandScope,
    pub subgroup: usize,
    pub quantity: Quantity,
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTable {
    pub dgp: Dgp,
    pub m: u64,
    pub seed: u64,
    pub cells: Vec<TruthCell>,
}

impl TruthTable {
    pub fn get(&self, scope: EstimandScope, subgroup: usize, quantity: Quantity) -> Option<OracleValue> {
        self.cells
            .iter()
            .find(|c| c.scope == scope && c.subgroup == subgroup && c.quantity == quantity)
            .map(|c| OracleValue { value: c.value, se: c.se })
    }
}

/// Welford accumulators for each arm's mean and for the paired differences
/// against arm 0; chunks combine with the pairwise update of Chan et al.
#[derive(Debug, Clone, Default)]
struct Accum {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    diff_mean: Vec<f64>,
    diff_m2: Vec<f64>,
}

fn welford(n: f64, mean: &mut f64, m2: &mut f64, x: f64) {
    let d = x - *mean;
    *mean += d / n;
    *m2 += d * (x - *mean);
}

fn chan(n_a: f64, n_b: f64, mean: &mut f64, m2: &mut f64, mean_b: f64, m2_b: f64) {
    let n = n_a + n_b;
    let d = mean_b - *mean;
    *mean += d * n_b / n;
    *m2 += m2_b + d * d * n_a * n_b / n;
}

impl Accum {
    fn new(arms: usize) -> Accum {
        let z = vec![0.0; arms];
        Accum { n: 0.0, mean: z.clone(), m2: z.clone(), diff_mean: z.clone(), diff_m2: z }
    }

    fn add(&mut self, g: &[f64]) {
        self.n += 1.0;
        for a in 0..g.len() {
            welford(self.n, &mut self.mean[a], &mut self.m2[a], g[a]);
            welford(self.n, &mut self.diff_mean[a], &mut self.diff_m2[a], g[a] - g[0]);
        }
    }

    fn merge(&mut self, o: &Accum) {
        if o.n == 0.0 {
            return;
        }
        for a in 0..self.mean.len() {
            chan(self.n, o.n, &mut self.mean[a], &mut self.m2[a], o.mean[a], o.m2[a]);
            chan(self.n, o.n, &mut self.diff_mean[a], &mut self.diff_m2[a], o.diff_mean[a], o.diff_m2[a]);
        }
        self.n += o.n;
    }

    /// Mean and its standard error.
    fn mean_se(&self, mean: f64, m2: f64) -> (f64, f64) {
        (mean, (m2 / (self.n - 1.0) / self.n).sqrt())
    }
}

/// Monte Carlo truths for every `(scope, subgroup, arm)` and every contrast
/// against arm 0: the average of the true outcome regression over `m` draws of
/// `X` in `v` (entire population) or over the draws with `S = 0` and `X` in `v`.
pub fn oracle_truths(dgp: &Dgp, m: u64, seed: u64) -> Result<TruthTable, SimError> {
    dgp.validate()?;
    let (cp, co) = dgp.compiled();
    let sv = dgp.subgroup_index();
    let arms = dgp.n_arms();
    const CHUNK: u64 = 1 << 16;
    let chunks = m.div_ceil(CHUNK);
    // Index: scope * 2 + v.
    let parts: Vec<Vec<Accum>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(seed, c);
            let mut acc = vec![Accum::new(arms); 4];
            let count = CHUNK.min(m - c * CHUNK);
            let mut x = vec![0.0; dgp.covariates.len()];
            let mut g = vec![0.0; arms];
            for _ in 0..count {
                for (j, cov) in dgp.covariates.iter().enumerate() {
                    x[j] = cov.law.sample(&mut rng);
                }
                let s = rng.random::<f64>() < expit(cp.eval(&x, 0.0));
                for (a, slot) in g.iter_mut().enumerate() {
                    let eta = co.eval(&x, a as f64);
                    *slot = match dgp.outcome_law {
                        OutcomeLaw::Binomial => expit(eta),
                        OutcomeLaw::Gaussian { .. } => eta,
                    };
                }
                let v = x[sv] as usize;
                acc[v].add(&g);
                if !s {
                    acc[2 + v].add(&g);
                }
            }
            acc
        })
        .collect();
    let mut total = vec![Accum::new(arms); 4];
    for part in &parts {
        for (t, p) in total.iter_mut().zip(part) {
            t.merge(p);
        }
    }
    let mut cells = Vec::new();
    for (si, scope) in [EstimandScope::EntirePopulation, EstimandScope::NonRandomized].into_iter().enumerate() {
        for v in 0..2 {
            let acc = &total[si * 2 + v];
            for a in 0..arms {
                let (value, se) = acc.mean_se(acc.mean[a], acc.m2[a]);
                cells.push(TruthCell { scope, subgroup: v, quantity: Quantity::Mean { arm: a }, value, se });
            }
            for a in 1..arms {
                let (value, se) = acc.mean_se(acc.diff_mean[a], acc.diff_m2[a]);
                cells.push(TruthCell { scope, subgroup: v, quantity: Quantity::Effect { arm: a, reference: 0 }, value, se });
            }
        }
    }
    Ok(TruthTable { dgp: dgp.clone(), m, seed, cells })
}

/// Single oracle value; see [`oracle_truths`].
pub fn oracle_truth(dgp: &Dgp, v: usize, a: usize, scope: EstimandScope, m: u64, seed: u64) -> Result<OracleValue, SimError> {
    oracle_truths(dgp, m, seed)?
        .get(scope, v, Quantity::Mean { arm: a })
        .ok_or_else(|| SimError::MissingTruth(format!("subgroup {v}, arm {a}")))
}

/// Same-sample comparison of two expressions of one population quantity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    pub subgroup: usize,
    pub arm: usize,
    pub left: f64,
    pub right: f64,
    pub difference: f64,
    /// Monte Carlo standard error of the difference.
    pub se: f64,
}

impl IdentityCheck {
    pub fn z(&self) -> f64 {
        if self.se > 0.0 {
            self.difference / self.se
        } else if self.difference == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentificationReport {
    pub m: u64,
    /// g-formula vs weighting form, for both scopes.
    pub estimands: Vec<IdentityCheck>,
    /// `Pr[X in v]` and `Pr[X in v, S = 0]` vs their weighting expressions.
    pub normalizing: Vec<IdentityCheck>,
    /// Entire-population vs non-randomized g-formula values.
    pub scope_gaps: Vec<IdentityCheck>,
}

impl IdentificationReport {
    pub fn max_abs_z(&self) -> f64 {
        self.estimands.iter().chain(&self.normalizing).map(|c| c.z().abs()).fold(0.0, f64::max)
    }
}

/// Evaluates, on one nested sample of size `m` with the true nuisance
/// functions, the g-formula and weighting expressions of both estimands and
/// of their normalizing constants. Standard errors come from the influence
/// functions of the ratio estimators, computed jointly on the same sample.
pub fn verify_identification(dgp: &Dgp, m: usize, seed: u64) -> Result<IdentificationReport, SimError> {
    dgp.validate()?;
    let (cp, co) = dgp.compiled();
    let sv = dgp.subgroup_index();
    let arms = dgp.n_arms();
    let mut rng = stream(seed, 0);
    let sample = generate_sample(dgp, SampleDesign::Nested { n: m }, &mut rng)?;
    let units = &sample.truth;
    let mf = m as f64;

    // Per-unit quantities.
    let p: Vec<f64> = units.iter().map(|u| expit(cp.eval(&u.x, 0.0))).collect();
    let g = |u: &SimObservation, a: usize| {
        let eta = co.eval(&u.x, a as f64);
        match dgp.outcome_law {
            OutcomeLaw::Binomial => expit(eta),
            OutcomeLaw::Gaussian { .. } => eta,
        }
    };
    let in_v = |u: &SimObservation, v: usize| (u.x[sv] as usize == v) as u8 as f64;
    let s0 = |u: &SimObservation| (u.s == 0) as u8 as f64;
    // S I(A=a) / (p e_a)
    let w = |i: usize, a: usize| {
        let u = &units[i];
        if u.a == Some(a) {
            1.0 / (p[i] * dgp.treatment[a])
        } else {
            0.0
        }
    };

    let check = |name: &str, v: usize, a: usize, denom: &dyn Fn(usize) -> f64, left: &dyn Fn(usize) -> f64, right: &dyn Fn(usize) -> f64| {
        let d: f64 = (0..m).map(denom).sum::<f64>() / mf;
        let l: f64 = (0..m).map(left).sum::<f64>() / mf / d;
        let r: f64 = (0..m).map(right).sum::<f64>() / mf / d;
        let diff = l - r;
        // Influence function of (sum left - sum right) / sum denom.
        let ss: f64 = (0..m)
            .map(|i| {
                let phi = (left(i) - right(i) - diff * denom(i)) / d;
                phi * phi
            })
            .sum();
        IdentityCheck {
            name: name.to_string(),
            subgroup: v,
            arm: a,
            left: l,
            right: r,
            difference: diff,
            se: (ss / (mf * (mf - 1.0))).sqrt(),
        }
    };

    let mut estimands = Vec::new();
    let mut normalizing = Vec::new();
    let mut scope_gaps = Vec::new();
    for v in 0..2 {
        for a in 0..arms {
            estimands.push(check(
                "psi: g-formula vs inverse probability weighting",
                v,
                a,
                &|i| in_v(&units[i], v),
                &|i| in_v(&units[i], v) * g(&units[i], a),
                &|i| in_v(&units[i], v) * w(i, a) * units[i].y.unwrap_or(0.0),
            ));
            estimands.push(check(
                "phi: g-formula vs inverse odds weighting",
                v,
                a,
                &|i| in_v(&units[i], v) * s0(&units[i]),
                &|i| in_v(&units[i], v) * s0(&units[i]) * g(&units[i], a),
                &|i| in_v(&units[i], v) * w(i, a) * (1.0 - p[i]) * units[i].y.unwrap_or(0.0),
            ));
            normalizing.push(check(
                "Pr[X in v] vs E[S I(A=a) I(X in v) / (p e_a)]",
                v,
                a,
                &|_| 1.0,
                &|i| in_v(&units[i], v),
                &|i| in_v(&units[i], v) * w(i, a),
            ));
            normalizing.push(check(
                "Pr[X in v, S=0] vs E[S I(A=a) I(X in v) (1-p) / (p e_a)]",
                v,
                a,
                &|_| 1.0,
                &|i| in_v(&units[i], v) * s0(&units[i]),
                &|i| in_v(&units[i], v) * w(i, a) * (1.0 - p[i]),
            ));
            // psi - phi, with separate denominators.
            let n_v: f64 = (0..m).map(|i| in_v(&units[i], v)).sum::<f64>() / mf;
            let n_v0: f64 = (0..m).map(|i| in_v(&units[i], v) * s0(&units[i])).sum::<f64>() / mf;
            let psi: f64 = (0..m).map(|i| in_v(&units[i], v) * g(&units[i], a)).sum::<f64>() / mf / n_v;
            let phi: f64 = (0..m).map(|i| in_v(&units[i], v) * s0(&units[i]) * g(&units[i], a)).sum::<f64>() / mf / n_v0;
            let ss: f64 = (0..m)
                .map(|i| {
                    let u = &units[i];
                    let gi = g(u, a);
                    let f = in_v(u, v) * (gi - psi) / n_v - in_v(u, v) * s0(u) * (gi - phi) / n_v0;
                    f * f
                })
                .sum();
            scope_gaps.push(IdentityCheck {
                name: "psi vs phi".into(),
                subgroup: v,
                arm: a,
                left: psi,
                right: phi,
                difference: psi - phi,
                se: (ss / (mf * (mf - 1.0))).sqrt(),
            });
        }
    }
    Ok(IdentificationReport { m: m as u64, estimands, normalizing, scope_gaps })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    BothCorrect,
    ParticipationWrong,
    OutcomeWrong,
    BothWrong,
}

impl Scenario {
    pub const ALL: [Scenario; 4] =
        [Scenario::BothCorrect, Scenario::ParticipationWrong, Scenario::OutcomeWrong, Scenario::BothWrong];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::BothCorrect => "both_correct",
            Scenario::ParticipationWrong => "participation_wrong",
            Scenario::OutcomeWrong => "outcome_wrong",
            Scenario::BothWrong => "both_wrong",
        }
    }

    fn participation_wrong(self) -> bool {
        matches!(self, Scenario::ParticipationWrong | Scenario::BothWrong)
    }

    fn outcome_wrong(self) -> bool {
        matches!(self, Scenario::OutcomeWrong | Scenario::BothWrong)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Scenario::ALL
            .into_iter()
            .find(|c| c.as_str() == key || c.as_str().replace('_', "") == key)
            .ok_or_else(|| SimError::UnknownScenario(s.to_string()))
    }
}

/// Formula terms mirroring a linear predictor, dropping any term that uses an
/// omitted variable. Treatment terms are dropped because outcome models are
/// fitted within each arm.
fn formula_from(lp: &LinearPredictor, response: &str, family: Family, omit: &[String]) -> ModelFormula {
    let mut terms: Vec<Term> = Vec::new();
    for (_, factors) in &lp.terms {
        if factors.iter().any(|f| f == TREATMENT_VAR || omit.contains(f)) {
            continue;
        }
        let mut fs: Vec<String> = factors.clone();
        fs.sort();
        fs.dedup();
        let term = Term { factors: fs.into_iter().map(Factor::Column).collect() };
        if !terms.contains(&term) {
            terms.push(term);
        }
    }
    ModelFormula { response: Some(response.to_string()), intercept: true, terms, family }
}

/// Nuisance models used under `scenario`: correct models mirror the DGP;
/// misspecified ones omit every term involving a variable in `omit`.
pub fn scenario_spec(dgp: &Dgp, scenario: Scenario, omit: &[String]) -> NuisanceSpec {
    let none: &[String] = &[];
    let p_omit = if scenario.participation_wrong() { omit } else { none };
    let g_omit = if scenario.outcome_wrong() { omit } else { none };
    NuisanceSpec {
        participation: formula_from(&dgp.participation, "S", Family::Binomial, p_omit),
        treatment: TreatmentModel::Fitted(ModelFormula {
            response: Some("A".into()),
            ..ModelFormula::intercept_only(Family::Binomial)
        }),
        outcome: formula_from(&dgp.outcome, "Y", dgp.outcome_family(), g_omit),
        truncation: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub design: SampleDesign,
    pub replications: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorTag>,
    /// Variables omitted by misspecified models.
    pub omit: Vec<String>,
    /// Bootstrap replicates per replication, for interval coverage.
    pub bootstrap: Option<usize>,
    pub ci_level: f64,
}

/// Monte Carlo summary of one `(estimator, subgroup, quantity)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McCell {
    pub estimator: EstimatorTag,
    pub scope: Option<EstimandScope>,
    pub subgroup: String,
    pub quantity: Quantity,
    pub truth: f64,
    pub truth_se: f64,
    pub mean: f64,
    pub bias: f64,
    /// Standard deviation across replications (divisor `R`).
    pub sd: f64,
    pub rmse: f64,
    /// `sd / sqrt(R)`.
    pub mc_se: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    pub replications: usize,
}

impl McCell {
    /// Monte Carlo standard error of the bias, including oracle error.
    pub fn bias_se(&self) -> f64 {
        (self.mc_se * self.mc_se + self.truth_se * self.truth_se).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McResult {
    pub scenario: Scenario,
    pub n: usize,
    pub replications: usize,
    pub failed_replications: usize,
    pub cells: Vec<McCell>,
}

impl McResult {
    pub fn cell(&self, tag: EstimatorTag, subgroup: usize, quantity: Quantity) -> Option<&McCell> {
        let label = subgroup.to_string();
        self.cells.iter().find(|c| c.estimator == tag && c.subgroup == label && c.quantity == quantity)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "scenario,estimator,scope,subgroup,quantity,truth,truth_se,mean,bias,sd,rmse,mc_se,coverage,replications\n",
        );
        for c in &self.cells {
            let scope = c.scope.map(|s| s.as_str()).unwrap_or("trial");
            let coverage = c.coverage.map(|v| format!("{v:.17e}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{}\n",
                self.scenario, c.estimator, scope, c.subgroup, c.quantity, c.truth, c.truth_se, c.mean, c.bias,
                c.sd, c.rmse, c.mc_se, coverage, c.replications
            ));
        }
        out
    }

    /// Aligned text summary.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "scenario {}  n={}  R={} ({} failed)\n{:<9} {:<18} {:<3} {:<5} {:>10} {:>10} {:>10} {:>10} {:>8}\n",
            self.scenario, self.n, self.replications, self.failed_replications,
            "estimator", "scope", "v", "cell", "truth", "bias", "sd", "rmse", "cover"
        );
        for c in &self.cells {
            let scope = c.scope.map(|s| s.as_str()).unwrap_or("trial");
            let cover = c.coverage.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{:<9} {:<18} {:<3} {:<5} {:>10.5} {:>10.5} {:>10.5} {:>10.5} {:>8}\n",
                c.estimator.as_str(), scope, c.subgroup, c.quantity.to_string(), c.truth, c.bias, c.sd, c.rmse, cover
            ));
        }
        out
    }
}

struct Replication {
    values: Vec<Option<f64>>,
    intervals: Option<Vec<Option<(f64, f64)>>>,
}

fn one_replication(
    dgp: &Dgp,
    spec: &NuisanceSpec,
    cfg: &McConfig,
    r: usize,
) -> Result<Replication, String> {
    let mut rng = stream(derive_seed(cfg.seed, 1), r as u64);
    let sample = generate_sample(dgp, cfg.design, &mut rng).map_err(|e| e.to_string())?;
    let groups = sample.subgroups(dgp);
    let ds = &sample.dataset;
    let (set, intervals): (EstimateSet, _) = match cfg.bootstrap {
        None => {
            let (_, table) = fit_and_predict(ds, spec).map_err(|e| e.to_string())?;
            let ctx = EstimationContext::new(ds, &groups, &table);
            (estimate_all(&ctx, &cfg.estimators, &spec.outcome), None)
        }
        Some(b) => {
            let bc = BootstrapConfig {
                replicates: b,
                seed: derive_seed(derive_seed(cfg.seed, 2), r as u64),
                stratify_by_s: false,
                ci_level: cfg.ci_level,
            };
            let res = bootstrap_estimates(ds, spec, &groups, &cfg.estimators, &bc).map_err(|e| e.to_string())?;
            let iv = res.intervals.iter().map(|i| i.map(|i| (i.lower, i.upper))).collect();
            (res.estimates, Some(iv))
        }
    };
    let values = set.values();
    if let Some(c) = set.means.iter().find_map(|c| c.result.as_ref().err()) {
        return Err(format!("{}: {c}", c.code()));
    }
    Ok(Replication { values, intervals })
}

/// `R` replications of generate, fit, estimate; summarized against `truths`.
pub fn run_mc_study(dgp: &Dgp, scenario: Scenario, cfg: &McConfig, truths: &TruthTable) -> Result<McResult, SimError> {
    dgp.validate()?;
    let spec = scenario_spec(dgp, scenario, &cfg.omit);
    let reps: Vec<Result<Replication, String>> =
        (0..cfg.replications).into_par_iter().map(|r| one_replication(dgp, &spec, cfg, r)).collect();
    let failed = reps.iter().filter(|r| r.is_err()).count();
    if failed as f64 > 0.1 * cfg.replications as f64 || failed == cfg.replications {
        let first = reps.iter().find_map(|r| r.as_ref().err()).cloned().unwrap_or_default();
        return Err(SimError::TooManyFailures { failed, replications: cfg.replications, first });
    }
    let ok: Vec<&Replication> = reps.iter().filter_map(|r| r.as_ref().ok()).collect();

    // Cell layout follows EstimateSet::values: means then effects.
    let arms = dgp.n_arms();
    let k = 2;
    let mut layout: Vec<(EstimatorTag, usize, Quantity)> = Vec::new();
    for &tag in &cfg.estimators {
        for v in 0..k {
            for a in 0..arms {
                layout.push((tag, v, Quantity::Mean { arm: a }));
            }
        }
    }
    for &tag in &cfg.estimators {
        for v in 0..k {
            for a in 1..arms {
                layout.push((tag, v, Quantity::Effect { arm: a, reference: 0 }));
            }
        }
    }
    let mut cells = Vec::with_capacity(layout.len());
    for (c, &(tag, v, quantity)) in layout.iter().enumerate() {
        // The trial-only comparator is summarized against the entire-population truth.
        let scope = tag.scope().unwrap_or(EstimandScope::EntirePopulation);
        let truth = truths
            .get(scope, v, quantity)
            .ok_or_else(|| SimError::MissingTruth(format!("{scope} subgroup {v} {quantity}")))?;
        let xs: Vec<f64> = ok.iter().filter_map(|r| r.values[c]).collect();
        let r = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / r;
        let sd = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / r).sqrt();
        let rmse = (xs.iter().map(|x| (x - truth.value) * (x - truth.value)).sum::<f64>() / r).sqrt();
        let coverage = ok.first().and_then(|f| f.intervals.as_ref()).map(|_| {
            let hits = ok
                .iter()
                .filter(|rep| {
                    rep.intervals.as_ref().and_then(|iv| iv[c]).is_some_and(|(lo, hi)| lo <= truth.value && truth.value <= hi)
                })
                .count();
            hits as f64 / r
        });
        cells.push(McCell {
            estimator: tag,
            scope: tag.scope(),
            subgroup: v.to_string(),
            quantity,
            truth: truth.value,
            truth_se: truth.se,
            mean,
            bias: mean - truth.value,
            sd,
            rmse,
            mc_se: sd / r.sqrt(),
            coverage,
            replications: xs.len(),
        });
    }
    Ok(McResult {
        scenario,
        n: cfg.design.n(),
        replications: cfg.replications,
        failed_replications: failed,
        cells,
    })
}
