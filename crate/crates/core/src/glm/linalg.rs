//! Cholesky solve of weighted normal equations with collinearity reporting.

use nalgebra::{DMatrix, DVector};

const PIVOT_TOL: f64 = 1e-10;
const INVOLVED_TOL: f64 = 1e-6;

/// Column `column` is (numerically) a combination of the listed earlier columns.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Collinear {
    pub column: usize,
    pub involved: Vec<usize>,
}

/// Cholesky factor of `D H D` where `D = diag(H)^{-1/2}`.
pub(crate) struct ScaledCholesky {
    l: DMatrix<f64>,
    scale: Vec<f64>,
}

impl ScaledCholesky {
    pub fn new(h: &DMatrix<f64>) -> Result<ScaledCholesky, Collinear> {
        let p = h.nrows();
        let mut scale = vec![0.0; p];
        for j in 0..p {
            let d = h[(j, j)];
            if !(d > 0.0) || !d.is_finite() {
                return Err(Collinear { column: j, involved: Vec::new() });
            }
            scale[j] = 1.0 / d.sqrt();
        }
        let mut l = DMatrix::zeros(p, p);
        for j in 0..p {
            let mut pivot = h[(j, j)] * scale[j] * scale[j];
            for k in 0..j {
                pivot -= l[(j, k)] * l[(j, k)];
            }
            if !(pivot > PIVOT_TOL) {
                return Err(Collinear { column: j, involved: involved(&l, h, &scale, j) });
            }
            let ljj = pivot.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..p {
                let mut s = h[(i, j)] * scale[i] * scale[j];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(ScaledCholesky { l, scale })
    }

    /// Solves `H x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let z = DVector::from_iterator(b.len(), b.iter().zip(&self.scale).map(|(v, s)| v * s));
        let z = forward(&self.l, &z, self.l.nrows());
        let z = backward(&self.l, &z);
        DVector::from_iterator(z.len(), z.iter().zip(&self.scale).map(|(v, s)| v * s))
    }
}

fn forward(l: &DMatrix<f64>, b: &DVector<f64>, n: usize) -> DVector<f64> {
    let mut z = DVector::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * z[k];
        }
        z[i] = s / l[(i, i)];
    }
    z
}

fn backward(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = b.len();
    let mut x = DVector::zeros(n);
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Earlier columns with non-negligible coefficients when regressing column
/// `j` on columns `0..j` (scaled space).
fn involved(l: &DMatrix<f64>, h: &DMatrix<f64>, scale: &[f64], j: usize) -> Vec<usize> {
    if j == 0 {
        return Vec::new();
    }
    let l11 = l.view((0, 0), (j, j)).into_owned();
    let b = DVector::from_iterator(j, (0..j).map(|k| h[(k, j)] * scale[k] * scale[j]));
    let c = backward(&l11, &forward(&l11, &b, j));
    (0..j).filter(|&k| c[k].abs() > INVOLVED_TOL).collect()
}
