//! Iteratively reweighted least squares for weighted canonical-link GLMs.

use nalgebra::{DMatrix, DVector};

use super::design::{DesignBuilder, DesignMatrix};
use super::formula::{Family, ModelFormula};
use super::linalg::ScaledCholesky;
use super::GlmError;
use crate::data::Dataset;

const STEP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsControl {
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Relative deviance change.
    pub dev_tol: f64,
    /// Max-norm of the weighted score.
    pub score_tol: f64,
    /// |linear predictor| beyond which a non-converged fit counts as separated.
    pub eta_cap: f64,
}

impl Default for IrlsControl {
    fn default() -> Self {
        IrlsControl { max_iter: 100, max_halvings: 10, dev_tol: 1e-10, score_tol: 1e-8, eta_cap: 30.0 }
    }
}

impl Family {
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::Binomial => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
            Family::Gaussian => eta,
        }
    }

    fn variance(self, mu: f64) -> f64 {
        match self {
            Family::Binomial => mu * (1.0 - mu),
            Family::Gaussian => 1.0,
        }
    }

    /// Unit deviance written in terms of the linear predictor for stability.
    fn unit_deviance(self, y: f64, eta: f64) -> f64 {
        match self {
            Family::Binomial => {
                // log(1 + e^eta)
                let softplus = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
                let sat = xlogx(y) + xlogx(1.0 - y);
                2.0 * (sat - (y * eta - softplus)).max(0.0)
            }
            Family::Gaussian => (y - eta) * (y - eta),
        }
    }
}

fn xlogx(v: f64) -> f64 {
    if v > 0.0 {
        v * v.ln()
    } else {
        0.0
    }
}

/// Result of [`fit_weighted_glm`].
#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub beta: Vec<f64>,
    pub names: Vec<String>,
    pub family: Family,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
    /// Max-norm of the weighted score at `beta`.
    pub max_score: f64,
}

impl GlmFit {
    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.beta).map(|(x, b)| x * b).sum()
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.family.inverse_link(self.linear_predictor(row))
    }
}

/// Maximizes the `w`-weighted log-likelihood (quasi-likelihood when `y` is
/// fractional under the binomial family).
pub fn fit_weighted_glm(x: &DesignMatrix, y: &[f64], w: &[f64], family: Family) -> Result<GlmFit, GlmError> {
    fit_weighted_glm_with(x, y, w, family, &IrlsControl::default())
}

pub fn fit_weighted_glm_with(
    x: &DesignMatrix,
    y: &[f64],
    w: &[f64],
    family: Family,
    ctl: &IrlsControl,
) -> Result<GlmFit, GlmError> {
    let (n, p) = (x.nrows(), x.ncols());
    if y.len() != n || w.len() != n {
        return Err(GlmError::InvalidInput(format!(
            "design has {n} rows but y has {} and w has {}",
            y.len(),
            w.len()
        )));
    }
    if p == 0 {
        return Err(GlmError::InvalidInput("design has no columns".into()));
    }
    if let Some(i) = w.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(GlmError::InvalidInput(format!("weight {} at row {i} is not a finite nonnegative number", w[i])));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(GlmError::InvalidInput(format!("response at row {i} is not finite")));
    }
    if family == Family::Binomial {
        if let Some(i) = y.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(GlmError::InvalidInput(format!("binomial response {} at row {i} is outside [0, 1]", y[i])));
        }
    }
    if x.values.iter().any(|v| !v.is_finite()) {
        return Err(GlmError::InvalidInput("design matrix has non-finite entries".into()));
    }
    let keep: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
    if keep.is_empty() {
        return Err(GlmError::InvalidInput("all weights are zero".into()));
    }
    let m = keep.len();
    let xs = DMatrix::from_fn(m, p, |r, j| x.values[(keep[r], j)]);
    let ys: Vec<f64> = keep.iter().map(|&i| y[i]).collect();
    let ws: Vec<f64> = keep.iter().map(|&i| w[i]).collect();

    let rank_deficient = |c: super::linalg::Collinear| GlmError::RankDeficient {
        column: x.names[c.column].clone(),
        involved: c.involved.iter().map(|&k| x.names[k].clone()).collect(),
    };
    let weighted = DMatrix::from_fn(m, p, |i, j| xs[(i, j)] * ws[i]);
    ScaledCholesky::new(&xs.tr_mul(&weighted)).map_err(rank_deficient)?;

    let deviance = |eta: &DVector<f64>| -> f64 {
        (0..m).map(|i| ws[i] * family.unit_deviance(ys[i], eta[i])).sum()
    };
    let mut beta = DVector::zeros(p);
    let mut eta = DVector::zeros(m);
    let mut dev = deviance(&eta);
    let mut prev_dev: Option<f64> = None;
    let converged;
    let mut iterations = 0;
    let mut score;
    let mut xw = DMatrix::zeros(m, p);
    loop {
        // Working weights and score at the current beta.
        let mut resid = DVector::zeros(m);
        let mut ww = vec![0.0; m];
        for i in 0..m {
            let mu = family.inverse_link(eta[i]);
            ww[i] = ws[i] * family.variance(mu);
            resid[i] = ws[i] * (ys[i] - mu);
        }
        score = xs.tr_mul(&resid);
        let max_score = score.amax();
        let dev_ok = match prev_dev {
            None => true,
            Some(pd) => (pd - dev).abs() <= ctl.dev_tol * (dev.abs() + 1e-8),
        };
        let near = max_score < ctl.score_tol && dev_ok;
        if iterations >= ctl.max_iter {
            converged = near;
            break;
        }
        for j in 0..p {
            for i in 0..m {
                xw[(i, j)] = xs[(i, j)] * ww[i];
            }
        }
        let h = xs.tr_mul(&xw);
        let chol = match ScaledCholesky::new(&h) {
            Ok(c) => c,
            Err(c) => {
                // The design passed the rank check with the prior weights, so a
                // binomial failure here comes from vanishing working weights.
                if family == Family::Binomial {
                    return Err(GlmError::Separation { max_eta: eta.amax() });
                }
                return Err(rank_deficient(c));
            }
        };
        let step = chol.solve(&score);
        // Stop once the Newton step is negligible as well, so the result does
        // not depend on the scale of the weights.
        if near && step.amax() <= STEP_TOL * (1.0 + beta.amax()) {
            converged = true;
            break;
        }
        iterations += 1;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=ctl.max_halvings {
            let cand = &beta + &step * t;
            let cand_eta = &xs * &cand;
            let cand_dev = deviance(&cand_eta);
            if cand_dev.is_finite() && cand_dev <= dev * (1.0 + 1e-12) + 1e-300 {
                beta = cand;
                eta = cand_eta;
                prev_dev = Some(dev);
                dev = cand_dev;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No descent possible at machine precision.
            let mut resid = DVector::zeros(m);
            for i in 0..m {
                resid[i] = ws[i] * (ys[i] - family.inverse_link(eta[i]));
            }
            score = xs.tr_mul(&resid);
            converged = score.amax() < ctl.score_tol;
            break;
        }
    }
    if !converged && family == Family::Binomial {
        let max_eta = eta.amax();
        if max_eta > ctl.eta_cap {
            return Err(GlmError::Separation { max_eta });
        }
    }
    Ok(GlmFit {
        beta: beta.iter().copied().collect(),
        names: x.names.clone(),
        family,
        converged,
        iterations,
        deviance: dev,
        max_score: score.amax(),
    })
}

/// A GLM fitted through a formula, able to predict on any dataset with the
/// same covariate columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedGlm {
    pub builder: DesignBuilder,
    pub fit: GlmFit,
}

impl FittedGlm {
    /// Fits `formula` on `rows` of `ds`; `y` and `w` are aligned with `rows`.
    pub fn fit(
        formula: &ModelFormula,
        ds: &Dataset,
        rows: &[usize],
        y: &[f64],
        w: &[f64],
    ) -> Result<FittedGlm, GlmError> {
        let builder = DesignBuilder::new(formula, ds, rows)?;
        let x = builder.matrix(ds, rows)?;
        let fit = fit_weighted_glm(&x, y, w, formula.family)?;
        Ok(FittedGlm { builder, fit })
    }

    pub fn from_parts(builder: DesignBuilder, beta: Vec<f64>, family: Family) -> FittedGlm {
        assert_eq!(builder.ncols(), beta.len());
        let names = builder.names().to_vec();
        FittedGlm {
            builder,
            fit: GlmFit {
                beta,
                names,
                family,
                converged: true,
                iterations: 0,
                deviance: f64::NAN,
                max_score: f64::NAN,
            },
        }
    }

    pub fn beta(&self) -> &[f64] {
        &self.fit.beta
    }

    pub fn converged(&self) -> bool {
        self.fit.converged
    }

    pub fn predict_row(&self, covariates: &[f64]) -> f64 {
        self.fit.predict_row(&self.builder.row(covariates))
    }

    /// Response-scale predictions on `rows` of `ds`.
    pub fn predict(&self, ds: &Dataset, rows: &[usize]) -> Result<Vec<f64>, GlmError> {
        self.builder.check_columns(ds)?;
        let mut buf = vec![0.0; self.builder.ncols()];
        Ok(rows
            .iter()
            .map(|&i| {
                self.builder.fill_row(&ds.rows()[i].covariates, &mut buf);
                self.fit.predict_row(&buf)
            })
            .collect())
    }

    /// Predictions on every row of `ds`.
    pub fn predict_all(&self, ds: &Dataset) -> Result<Vec<f64>, GlmError> {
        let rows: Vec<usize> = (0..ds.len()).collect();
        self.predict(ds, &rows)
    }
}
