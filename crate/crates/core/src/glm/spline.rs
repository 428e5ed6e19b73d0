//! Natural cubic spline basis with knots at evenly spaced quantiles.
//!
//! With `df` columns there are `df + 1` knots `xi_0 < ... < xi_df`, the outer
//! two at the sample extremes. The basis is the truncated-power form
//!
//! ```text
//! N_0(x)   = x
//! N_k+1(x) = d_k(x) - d_{K-2}(x),     k = 0..K-3
//! d_k(x)   = ((x - xi_k)_+^3 - (x - xi_{K-1})_+^3) / (xi_{K-1} - xi_k)
//! ```
//!
//! which is cubic between knots, twice continuously differentiable, and
//! linear beyond the boundary knots. Evaluation happens on `x` rescaled to
//! `[0, 1]` over the boundary knots to keep the columns well conditioned;
//! this changes each column by a constant factor only.

use nalgebra::DMatrix;

use super::GlmError;

#[derive(Debug, Clone, PartialEq)]
pub struct NaturalSpline {
    /// Knots on the original scale, strictly increasing.
    knots: Vec<f64>,
}

impl NaturalSpline {
    pub fn fit(x: &[f64], df: usize) -> Result<NaturalSpline, GlmError> {
        if df < 2 {
            return Err(GlmError::Spline(format!("df must be at least 2, got {df}")));
        }
        let mut sorted: Vec<f64> = x.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut distinct = sorted.clone();
        distinct.dedup();
        if distinct.len() < df + 1 {
            return Err(GlmError::Spline(format!(
                "need at least {} distinct values for df={df}, found {}",
                df + 1,
                distinct.len()
            )));
        }
        let knots: Vec<f64> = (0..=df).map(|k| quantile_sorted(&sorted, k as f64 / df as f64)).collect();
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GlmError::Spline(format!("quantile knots {knots:?} are not distinct; reduce df")));
        }
        Ok(NaturalSpline { knots })
    }

    pub fn from_knots(knots: Vec<f64>) -> Result<NaturalSpline, GlmError> {
        if knots.len() < 3 || knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GlmError::Spline("need at least 3 strictly increasing knots".into()));
        }
        Ok(NaturalSpline { knots })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn df(&self) -> usize {
        self.knots.len() - 1
    }

    /// Writes the `df` basis values at `x` into `out`.
    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        let k = self.knots.len();
        let lo = self.knots[0];
        let span = self.knots[k - 1] - lo;
        let u = (x - lo) / span;
        let scaled = |j: usize| (self.knots[j] - lo) / span;
        let last = scaled(k - 1);
        let d = |j: usize| {
            let t = scaled(j);
            (cube_plus(u - t) - cube_plus(u - last)) / (last - t)
        };
        let d_ref = d(k - 2);
        out[0] = u;
        for j in 0..k - 2 {
            out[j + 1] = d(j) - d_ref;
        }
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.df()];
        self.eval_into(x, &mut out);
        out
    }
}

fn cube_plus(v: f64) -> f64 {
    if v > 0.0 {
        v * v * v
    } else {
        0.0
    }
}

/// Linear-interpolation sample quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `n x df` natural cubic spline basis of `x`.
pub fn natural_spline_basis(x: &[f64], df: usize) -> Result<DMatrix<f64>, GlmError> {
    let spline = NaturalSpline::fit(x, df)?;
    let mut basis = DMatrix::zeros(x.len(), df);
    let mut buf = vec![0.0; df];
    for (i, &xi) in x.iter().enumerate() {
        spline.eval_into(xi, &mut buf);
        for j in 0..df {
            basis[(i, j)] = buf[j];
        }
    }
    Ok(basis)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_is_rejected() {
        assert!(natural_spline_basis(&[3.0; 20], 4).is_err());
        assert!(natural_spline_basis(&[0.0, 1.0, 2.0], 4).is_err());
        assert!(natural_spline_basis(&[0.0, 1.0, 2.0], 1).is_err());
    }

    #[test]
    fn df_two_has_linear_and_one_curvature_column() {
        let x: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let basis = natural_spline_basis(&x, 2).unwrap();
        assert_eq!(basis.ncols(), 2);
        for (i, &xi) in x.iter().enumerate() {
            assert!((basis[(i, 0)] - xi).abs() < 1e-15);
        }
        // Curvature column is not linear in x.
        let c = basis.column(1);
        let second_diff = c[0] - 2.0 * c[5] + c[10];
        assert!(second_diff.abs() > 1e-3);
    }

    #[test]
    fn knots_are_quantiles() {
        let x: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let s = NaturalSpline::fit(&x, 4).unwrap();
        assert_eq!(s.knots(), &[0.0, 25.0, 50.0, 75.0, 100.0]);
    }
}
