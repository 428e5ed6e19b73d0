//! Nonparametric bootstrap with nuisance refits and Wald intervals.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::data::{Dataset, Design, Subgroups};
use crate::estimators::{estimate_all, EstimateSet, EstimationContext, EstimatorTag};
use crate::nuisance::{fit_and_predict, NuisanceSpec};
use crate::rng::stream;

/// Largest tolerated share of failed replicates.
pub const MAX_FAILED_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    /// Resample trial and non-randomized rows separately. Always on for
    /// non-nested designs.
    pub stratify_by_s: bool,
    pub ci_level: f64,
}

impl BootstrapConfig {
    pub fn new(replicates: usize, seed: u64) -> BootstrapConfig {
        BootstrapConfig { replicates, seed, stratify_by_s: false, ci_level: 0.95 }
    }

    fn stratified(&self, design: Design) -> bool {
        self.stratify_by_s || design == Design::NonNested
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("invalid bootstrap configuration: {0}")]
    Config(String),
    #[error("standard error must be nonnegative, got {0}")]
    NegativeSe(f64),
    #[error("estimation on the original data failed: {0}")]
    Original(String),
    #[error(
        "{failed} of {replicates} bootstrap replicates failed (limit {:.0}%); \
         the data are too sparse for the bootstrap",
        MAX_FAILED_FRACTION * 100.0
    )]
    TooManyFailures { failed: usize, replicates: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntervalEstimate {
    pub point: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub n_failed_replicates: usize,
}

/// Standard-normal quantile of `(1 + level) / 2`.
pub fn normal_quantile(level: f64) -> f64 {
    Normal::standard().inverse_cdf((1.0 + level) / 2.0)
}

/// `point -/+ z se`.
pub fn wald_interval(point: f64, se: f64, level: f64) -> Result<IntervalEstimate, InferenceError> {
    if !(se >= 0.0) {
        return Err(InferenceError::NegativeSe(se));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(InferenceError::Config(format!("confidence level {level} is not in (0, 1)")));
    }
    let z = normal_quantile(level);
    Ok(IntervalEstimate { point, se, lower: point - z * se, upper: point + z * se, level, n_failed_replicates: 0 })
}

/// Row indices of bootstrap replicate `j`: `n` draws with replacement, or
/// draws within the `S = 1` and `S = 0` strata preserving their sizes.
pub fn replicate_indices(ds: &Dataset, cfg: &BootstrapConfig, j: u64) -> Vec<usize> {
    let mut rng = stream(cfg.seed, j);
    let n = ds.len();
    if !cfg.stratified(ds.design()) {
        return (0..n).map(|_| rng.random_range(0..n)).collect();
    }
    let trial = ds.trial_rows();
    let other: Vec<usize> = (0..n).filter(|&i| !ds.rows()[i].in_trial()).collect();
    let mut out = Vec::with_capacity(n);
    for stratum in [&trial, &other] {
        for _ in 0..stratum.len() {
            out.push(stratum[rng.random_range(0..stratum.len())]);
        }
    }
    out
}

/// Sample mean and standard deviation (divisor `len - 1`).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Arm { arm: usize },
    Contrast { arm: usize, reference: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CellId {
    pub estimator: EstimatorTag,
    pub subgroup: usize,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    /// Estimates on the original data.
    pub estimates: EstimateSet,
    /// Aligned with [`EstimateSet::values`]; `None` where the original
    /// estimate failed.
    pub intervals: Vec<Option<IntervalEstimate>>,
    pub replicates: usize,
    pub failed_replicates: usize,
}

impl BootstrapResult {
    /// Cell identities in [`EstimateSet::values`] order.
    pub fn cell_ids(&self) -> Vec<CellId> {
        let e = &self.estimates;
        e.means
            .iter()
            .map(|c| CellId { estimator: c.estimator, subgroup: c.subgroup, target: Target::Arm { arm: c.arm } })
            .chain(e.effects.iter().map(|c| CellId {
                estimator: c.estimator,
                subgroup: c.subgroup,
                target: Target::Contrast { arm: c.arm, reference: 0 },
            }))
            .collect()
    }

    pub fn interval(&self, id: &CellId) -> Option<&IntervalEstimate> {
        let pos = self.cell_ids().iter().position(|c| c == id)?;
        self.intervals[pos].as_ref()
    }

    pub fn mean_interval(&self, tag: EstimatorTag, v: usize, a: usize) -> Option<&IntervalEstimate> {
        self.interval(&CellId { estimator: tag, subgroup: v, target: Target::Arm { arm: a } })
    }

    pub fn effect_interval(&self, tag: EstimatorTag, v: usize, a: usize) -> Option<&IntervalEstimate> {
        self.interval(&CellId { estimator: tag, subgroup: v, target: Target::Contrast { arm: a, reference: 0 } })
    }
}

fn estimate_on(
    ds: &Dataset,
    groups: &Subgroups,
    spec: &NuisanceSpec,
    estimators: &[EstimatorTag],
) -> Result<EstimateSet, String> {
    let (_, table) = fit_and_predict(ds, spec).map_err(|e| e.to_string())?;
    let ctx = EstimationContext::new(ds, groups, &table);
    Ok(estimate_all(&ctx, estimators, &spec.outcome))
}

/// Point estimates plus bootstrap standard errors and Wald intervals for
/// every cell. Each replicate refits all nuisance models.
pub fn bootstrap_estimates(
    ds: &Dataset,
    spec: &NuisanceSpec,
    groups: &Subgroups,
    estimators: &[EstimatorTag],
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult, InferenceError> {
    if cfg.replicates < 2 {
        return Err(InferenceError::Config(format!("need at least 2 replicates, got {}", cfg.replicates)));
    }
    if !(cfg.ci_level > 0.0 && cfg.ci_level < 1.0) {
        return Err(InferenceError::Config(format!("confidence level {} is not in (0, 1)", cfg.ci_level)));
    }
    let estimates = estimate_on(ds, groups, spec, estimators).map_err(InferenceError::Original)?;
    let original = estimates.values();

    let replicate = |j: usize| -> Option<Vec<f64>> {
        let idx = replicate_indices(ds, cfg, j as u64);
        let sub = ds.subset(&idx).ok()?;
        let membership = idx.iter().map(|&i| groups.membership()[i]).collect();
        let sub_groups = Subgroups::from_membership(groups.labels().to_vec(), membership);
        let set = estimate_on(&sub, &sub_groups, spec, estimators).ok()?;
        let values = set.values();
        // A cell estimable on the original data must be estimable here too.
        let mut out = Vec::with_capacity(values.len());
        for (o, r) in original.iter().zip(values) {
            match (o, r) {
                (Some(_), Some(r)) => out.push(r),
                (Some(_), None) => return None,
                (None, _) => out.push(f64::NAN),
            }
        }
        Some(out)
    };
    let draws: Vec<Option<Vec<f64>>> = (0..cfg.replicates).into_par_iter().map(replicate).collect();
    let ok: Vec<&Vec<f64>> = draws.iter().flatten().collect();
    let failed = cfg.replicates - ok.len();
    if failed as f64 > MAX_FAILED_FRACTION * cfg.replicates as f64 || ok.len() < 2 {
        return Err(InferenceError::TooManyFailures { failed, replicates: cfg.replicates });
    }
    let mut column = vec![0.0; ok.len()];
    let intervals = original
        .iter()
        .enumerate()
        .map(|(c, point)| {
            let point = (*point)?;
            for (slot, r) in column.iter_mut().zip(&ok) {
                *slot = r[c];
            }
            let (_, se) = mean_sd(&column);
            let mut iv = wald_interval(point, se, cfg.ci_level).expect("validated level");
            iv.n_failed_replicates = failed;
            Some(iv)
        })
        .collect();
    Ok(BootstrapResult { estimates, intervals, replicates: cfg.replicates, failed_replicates: failed })
}
