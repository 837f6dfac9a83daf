//! Symmetric positive-definite solves shared by fitting, influence and kernel code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{AifError, Result};

/// Systems whose condition estimate exceeds this are rejected instead of regularized.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Above this dimension solves switch from a dense factorization to conjugate gradients.
pub const DENSE_LIMIT: usize = 2000;

const CG_TOLERANCE: f64 = 1e-10;

/// A factored symmetric positive-definite matrix.
pub enum SpdSolver {
    Dense {
        matrix: DMatrix<f64>,
        chol: Cholesky<f64, Dyn>,
        condition: f64,
    },
    Iterative {
        matrix: DMatrix<f64>,
        condition: f64,
    },
}

impl SpdSolver {
    pub fn new(matrix: &DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if n != matrix.ncols() {
            return Err(AifError::Dimension(format!(
                "expected a square matrix, got {}x{}",
                n,
                matrix.ncols()
            )));
        }
        if n == 0 {
            return Err(AifError::Dimension("empty matrix".into()));
        }
        let sym = symmetrize(matrix);
        if n <= DENSE_LIMIT {
            let eig = sym.symmetric_eigenvalues();
            let condition = condition_from_extremes(eig.max(), eig.min());
            if !(condition <= CONDITION_LIMIT) {
                return Err(AifError::RankDeficient { condition });
            }
            let chol = Cholesky::new(sym.clone()).ok_or(AifError::RankDeficient { condition })?;
            Ok(SpdSolver::Dense {
                matrix: sym,
                chol,
                condition,
            })
        } else {
            let (lo, hi) = extreme_eigenvalues_power(&sym, 200);
            let condition = condition_from_extremes(hi, lo);
            if !(condition <= CONDITION_LIMIT) {
                return Err(AifError::RankDeficient { condition });
            }
            Ok(SpdSolver::Iterative {
                matrix: sym,
                condition,
            })
        }
    }

    pub fn condition(&self) -> f64 {
        match self {
            SpdSolver::Dense { condition, .. } | SpdSolver::Iterative { condition, .. } => *condition,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        match self {
            SpdSolver::Dense { matrix, .. } | SpdSolver::Iterative { matrix, .. } => matrix,
        }
    }

    /// Solves `A x = b`, with one step of iterative refinement on the dense path.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            SpdSolver::Dense { matrix, chol, .. } => {
                let mut x = chol.solve(b);
                let residual = b - matrix * &x;
                x += chol.solve(&residual);
                Ok(x)
            }
            SpdSolver::Iterative { matrix, .. } => {
                conjugate_gradient(|v| matrix * v, b, CG_TOLERANCE, 10 * b.len())
            }
        }
    }

    /// Solves `A X = B` column by column.
    pub fn solve_columns(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            SpdSolver::Dense { matrix, chol, .. } => {
                let mut x = chol.solve(b);
                let residual = b - matrix * &x;
                x += chol.solve(&residual);
                Ok(x)
            }
            SpdSolver::Iterative { .. } => {
                let mut out = DMatrix::zeros(b.nrows(), b.ncols());
                for j in 0..b.ncols() {
                    let col = self.solve(&b.column(j).into_owned())?;
                    out.set_column(j, &col);
                }
                Ok(out)
            }
        }
    }
}

fn condition_from_extremes(max: f64, min: f64) -> f64 {
    if !max.is_finite() || !min.is_finite() || min <= 0.0 {
        return f64::INFINITY;
    }
    max / min
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Conjugate gradients for a symmetric positive-definite operator given as a closure.
pub fn conjugate_gradient<F>(
    apply: F,
    b: &DVector<f64>,
    rel_tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut x = DVector::zeros(b.len());
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return Ok(x);
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    for _ in 0..max_iter.max(1) {
        let ap = apply(&p);
        let curvature = p.dot(&ap);
        if curvature <= 0.0 {
            return Err(AifError::RankDeficient {
                condition: f64::INFINITY,
            });
        }
        let alpha = rs / curvature;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rs_new = r.dot(&r);
        if rs_new.sqrt() <= rel_tol * b_norm {
            return Ok(x);
        }
        p = &r + &p * (rs_new / rs);
        rs = rs_new;
    }
    log::warn!("conjugate gradients stopped at the iteration limit");
    Ok(x)
}

/// Power-iteration estimates of the smallest and largest eigenvalues of a symmetric matrix.
fn extreme_eigenvalues_power(m: &DMatrix<f64>, iters: usize) -> (f64, f64) {
    let n = m.nrows();
    let start = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618).fract());
    let hi = power_iteration(|v| m * v, &start, iters);
    let shifted = power_iteration(|v| v * hi - m * v, &start, iters);
    (hi - shifted, hi)
}

fn power_iteration<F>(apply: F, start: &DVector<f64>, iters: usize) -> f64
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut v = start.normalize();
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = apply(&v);
        lambda = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
    }
    lambda
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigenvalues().min()
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigenvalues().max()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_solve_matches_known_solution() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let b = &a * &x;
        let solver = SpdSolver::new(&a).unwrap();
        let got = solver.solve(&b).unwrap();
        assert!((got - x).norm() < 1e-14);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        match SpdSolver::new(&a) {
            Err(AifError::RankDeficient { .. }) => {}
            other => panic!("expected rank deficiency, got {:?}", other.map(|s| s.condition())),
        }
    }

    #[test]
    fn conjugate_gradient_agrees_with_dense() {
        let n = 30;
        let g = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5);
        let a = &g * g.transpose() + DMatrix::identity(n, n);
        let b = DVector::from_fn(n, |i, _| (i as f64).sin());
        let dense = SpdSolver::new(&a).unwrap().solve(&b).unwrap();
        let cg = conjugate_gradient(|v| &a * v, &b, 1e-12, 500).unwrap();
        assert!((dense - cg).norm() < 1e-9);
    }

    #[test]
    fn power_iteration_brackets_spectrum() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 5.0]));
        let (lo, hi) = extreme_eigenvalues_power(&a, 500);
        assert!((hi - 5.0).abs() < 1e-8);
        assert!((lo - 1.0).abs() < 1e-6);
    }
}
