//! Weighted generalized linear models with canonical links.

pub mod design;
pub mod fit;
pub mod formula;
mod linalg;
pub mod spline;

use thiserror::Error;

pub use design::{build_design_matrix, DesignBuilder, DesignMatrix};
pub use fit::{fit_weighted_glm, FittedGlm, GlmFit, IrlsControl};
pub use formula::{Factor, Family, ModelFormula, Term, DEFAULT_SPLINE_DF};
pub use spline::{natural_spline_basis, NaturalSpline};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("formula: {0}")]
    Formula(String),
    #[error("column `{0}` referenced by the formula is missing")]
    MissingColumn(String),
    #[error("spline basis: {0}")]
    Spline(String),
    #[error("design is rank deficient: column `{column}` is collinear with {involved:?}")]
    RankDeficient { column: String, involved: Vec<String> },
    #[error(
        "fit did not converge and |linear predictor| reached {max_eta:.1}: \
         the data are (quasi-)separated; use a simpler formula"
    )]
    Separation { max_eta: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}
