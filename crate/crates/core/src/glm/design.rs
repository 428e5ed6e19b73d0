//! Design-matrix construction from a [`ModelFormula`].
//!
//! Column order is deterministic: intercept, main effects in input order,
//! splines, interactions. Categorical factors are reference coded against
//! their first level. Spline knots and indicator levels are frozen when the
//! builder is created so the same columns can be evaluated on any rows.

use nalgebra::DMatrix;

use super::formula::{Factor, ModelFormula};
use super::spline::NaturalSpline;
use super::GlmError;
use crate::data::{ColumnKind, Dataset};

/// Design matrix with column names.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub values: DMatrix<f64>,
    pub names: Vec<String>,
}

impl DesignMatrix {
    pub fn new(values: DMatrix<f64>, names: Vec<String>) -> DesignMatrix {
        assert_eq!(values.ncols(), names.len());
        DesignMatrix { values, names }
    }

    /// Unnamed columns `c0, c1, ...`.
    pub fn unnamed(values: DMatrix<f64>) -> DesignMatrix {
        let names = (0..values.ncols()).map(|j| format!("c{j}")).collect();
        DesignMatrix { values, names }
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum FactorPlan {
    Numeric { col: usize },
    /// One indicator per non-reference level value.
    Indicators { col: usize, values: Vec<f64> },
    Spline { col: usize, spline: NaturalSpline },
}

impl FactorPlan {
    fn width(&self) -> usize {
        match self {
            FactorPlan::Numeric { .. } => 1,
            FactorPlan::Indicators { values, .. } => values.len(),
            FactorPlan::Spline { spline, .. } => spline.df(),
        }
    }

    fn eval(&self, covariates: &[f64], out: &mut [f64]) {
        match self {
            FactorPlan::Numeric { col } => out[0] = covariates[*col],
            FactorPlan::Indicators { col, values } => {
                let x = covariates[*col];
                for (o, v) in out.iter_mut().zip(values) {
                    *o = if x == *v { 1.0 } else { 0.0 };
                }
            }
            FactorPlan::Spline { col, spline } => spline.eval_into(covariates[*col], out),
        }
    }
}

/// Maps a covariate row to a design row.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBuilder {
    intercept: bool,
    terms: Vec<Vec<FactorPlan>>,
    names: Vec<String>,
    /// Data columns read, as (name, index) in the dataset the builder was made from.
    inputs: Vec<(String, usize)>,
}

impl DesignBuilder {
    /// Freezes the formula against `ds`. Spline knots come from `training`
    /// rows; indicator levels from all rows of `ds`.
    pub fn new(formula: &ModelFormula, ds: &Dataset, training: &[usize]) -> Result<DesignBuilder, GlmError> {
        formula.validate(ds)?;
        let mut names = Vec::new();
        if formula.intercept {
            names.push("(Intercept)".to_string());
        }
        let mut terms = Vec::new();
        let mut inputs: Vec<(String, usize)> = Vec::new();
        for term in formula.ordered_terms() {
            let mut plans = Vec::new();
            let mut factor_names: Vec<Vec<String>> = Vec::new();
            for factor in &term.factors {
                let col = ds.column_index(factor.column()).expect("validated");
                if !inputs.iter().any(|(_, j)| *j == col) {
                    inputs.push((factor.column().to_string(), col));
                }
                let column = &ds.columns()[col];
                let (plan, fnames) = match (factor, &column.kind) {
                    (Factor::Spline { df, .. }, _) => {
                        let x: Vec<f64> = training.iter().map(|&i| ds.rows()[i].covariates[col]).collect();
                        let spline = NaturalSpline::fit(&x, *df).map_err(|e| match e {
                            GlmError::Spline(m) => GlmError::Spline(format!("{factor}: {m}")),
                            other => other,
                        })?;
                        let fnames = (1..=*df).map(|k| format!("{factor}[{k}]")).collect();
                        (FactorPlan::Spline { col, spline }, fnames)
                    }
                    (_, ColumnKind::Categorical { levels }) => {
                        let values = (1..levels.len()).map(|c| c as f64).collect();
                        let fnames = levels[1..].iter().map(|l| format!("{}[{l}]", column.name)).collect();
                        (FactorPlan::Indicators { col, values }, fnames)
                    }
                    (Factor::Categorical(_), ColumnKind::Numeric) => {
                        let mut values: Vec<f64> = ds.rows().iter().map(|r| r.covariates[col]).collect();
                        values.sort_by(f64::total_cmp);
                        values.dedup();
                        let values: Vec<f64> = values.into_iter().skip(1).collect();
                        let fnames = values.iter().map(|v| format!("C({})[{v}]", column.name)).collect();
                        (FactorPlan::Indicators { col, values }, fnames)
                    }
                    (Factor::Column(_), ColumnKind::Numeric) => {
                        (FactorPlan::Numeric { col }, vec![column.name.clone()])
                    }
                };
                plans.push(plan);
                factor_names.push(fnames);
            }
            // Cartesian product, first factor varying slowest.
            let mut combined = vec![String::new()];
            for fnames in &factor_names {
                let mut next = Vec::with_capacity(combined.len() * fnames.len());
                for prefix in &combined {
                    for n in fnames {
                        next.push(if prefix.is_empty() { n.clone() } else { format!("{prefix}:{n}") });
                    }
                }
                combined = next;
            }
            names.extend(combined);
            terms.push(plans);
        }
        Ok(DesignBuilder { intercept: formula.intercept, terms, names, inputs })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ncols(&self) -> usize {
        self.names.len()
    }

    /// Checks that `ds` lays out the builder's input columns the same way.
    pub fn check_columns(&self, ds: &Dataset) -> Result<(), GlmError> {
        for (name, j) in &self.inputs {
            if ds.columns().get(*j).map(|c| &c.name) != Some(name) {
                return Err(GlmError::MissingColumn(name.clone()));
            }
        }
        Ok(())
    }

    /// Writes the design row for `covariates` into `out` (length `ncols`).
    pub fn fill_row(&self, covariates: &[f64], out: &mut [f64]) {
        let mut pos = 0;
        if self.intercept {
            out[0] = 1.0;
            pos = 1;
        }
        let mut scratch: Vec<f64> = Vec::new();
        for plans in &self.terms {
            if plans.len() == 1 {
                let w = plans[0].width();
                plans[0].eval(covariates, &mut out[pos..pos + w]);
                pos += w;
                continue;
            }
            let mut acc = vec![1.0];
            for plan in plans {
                scratch.resize(plan.width(), 0.0);
                plan.eval(covariates, &mut scratch);
                acc = acc.iter().flat_map(|a| scratch.iter().map(move |s| a * s)).collect();
            }
            out[pos..pos + acc.len()].copy_from_slice(&acc);
            pos += acc.len();
        }
        debug_assert_eq!(pos, out.len());
    }

    pub fn row(&self, covariates: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols()];
        self.fill_row(covariates, &mut out);
        out
    }

    pub fn matrix(&self, ds: &Dataset, rows: &[usize]) -> Result<DesignMatrix, GlmError> {
        self.check_columns(ds)?;
        let p = self.ncols();
        let mut values = DMatrix::zeros(rows.len(), p);
        let mut buf = vec![0.0; p];
        for (r, &i) in rows.iter().enumerate() {
            self.fill_row(&ds.rows()[i].covariates, &mut buf);
            for j in 0..p {
                values[(r, j)] = buf[j];
            }
        }
        Ok(DesignMatrix { values, names: self.names.clone() })
    }
}

/// Design matrix of `formula` on the given rows of `ds`.
pub fn build_design_matrix(ds: &Dataset, rows: &[usize], formula: &ModelFormula) -> Result<DesignMatrix, GlmError> {
    DesignBuilder::new(formula, ds, rows)?.matrix(ds, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Column, Design, Observation, TrialRecord};
    use crate::glm::formula::Family;

    fn ds(cols: &[&str], rows: &[&[f64]]) -> Dataset {
        let columns = cols.iter().map(|c| Column::numeric(*c)).collect();
        let rows = rows
            .iter()
            .enumerate()
            .map(|(i, r)| Observation {
                covariates: r.to_vec(),
                trial: Some(TrialRecord { arm: i % 2, y: 0.0 }),
            })
            .collect();
        Dataset::new(rows, Design::Nested, columns, vec!["0".into(), "1".into()]).unwrap()
    }

    #[test]
    fn intercept_only_is_a_column_of_ones() {
        let d = ds(&["x"], &[&[1.0], &[2.0], &[3.0]]);
        let f = ModelFormula::intercept_only(Family::Gaussian);
        let m = build_design_matrix(&d, &[0, 1, 2], &f).unwrap();
        assert_eq!(m.values, DMatrix::from_element(3, 1, 1.0));
        assert_eq!(m.names, ["(Intercept)"]);
    }

    #[test]
    fn saturated_treatment_by_subgroup_design() {
        // columns: a (treatment indicator), v (subgroup indicator)
        let d = ds(&["a", "v"], &[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let f = ModelFormula::parse("y ~ a + v + a:v", Family::Gaussian).unwrap();
        let m = build_design_matrix(&d, &[0, 1, 2, 3], &f).unwrap();
        assert_eq!(m.names, ["(Intercept)", "a", "v", "a:v"]);
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0],
        );
        assert_eq!(m.values, expected);
    }

    #[test]
    fn column_order_and_categorical_expansion() {
        let d = ds(&["x", "g", "z"], &[&[0.5, 2.0, 1.0], &[1.5, 1.0, 2.0], &[2.5, 3.0, 3.0], &[3.5, 1.0, 4.0]]);
        let f = ModelFormula::parse("y ~ x:z + ns(z, 2) + C(g) + x", Family::Gaussian).unwrap();
        let b = DesignBuilder::new(&f, &d, &[0, 1, 2, 3]).unwrap();
        assert_eq!(
            b.names(),
            ["(Intercept)", "C(g)[2]", "C(g)[3]", "x", "ns(z, 2)[1]", "ns(z, 2)[2]", "x:z"]
        );
        let row = b.row(&[0.5, 2.0, 1.0]);
        assert_eq!(&row[..4], &[1.0, 1.0, 0.0, 0.5]);
        assert_eq!(row[6], 0.5);
    }

    #[test]
    fn interaction_with_categorical_expands_all_products() {
        let d = ds(&["x", "g"], &[&[1.0, 0.0], &[2.0, 1.0], &[3.0, 2.0]]);
        let f = ModelFormula::parse("~ C(g):x - 1", Family::Gaussian).unwrap();
        let b = DesignBuilder::new(&f, &d, &[0, 1, 2]).unwrap();
        assert_eq!(b.names(), ["C(g)[1]:x", "C(g)[2]:x"]);
        assert_eq!(b.row(&[3.0, 2.0]), vec![0.0, 3.0]);
    }

    #[test]
    fn invalid_formulas() {
        let d = ds(&["x"], &[&[1.0], &[2.0], &[3.0]]);
        let missing = ModelFormula::parse("y ~ w", Family::Gaussian).unwrap();
        assert_eq!(DesignBuilder::new(&missing, &d, &[0]).unwrap_err(), GlmError::MissingColumn("w".into()));
        let dup = ModelFormula::parse("y ~ x + x", Family::Gaussian).unwrap();
        assert!(DesignBuilder::new(&dup, &d, &[0]).is_err());
        let df1 = ModelFormula::parse("y ~ ns(x, 1)", Family::Gaussian).unwrap();
        assert!(DesignBuilder::new(&df1, &d, &[0, 1, 2]).is_err());
    }
}
