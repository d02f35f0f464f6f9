//! Dense helpers shared by the solvers.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

pub fn ensure_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::input(format!("{what} contains non-finite entries")))
    }
}

pub fn ensure_square(m: &Mat, what: &str) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(Error::input(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )))
    }
}

pub fn ensure_rows(m: &Mat, rows: usize, what: &str) -> Result<()> {
    if m.nrows() == rows {
        Ok(())
    } else {
        Err(Error::input(format!("{what} has {} rows, expected {rows}", m.nrows())))
    }
}

pub fn ensure_shape(m: &Mat, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.shape() == (rows, cols) {
        Ok(())
    } else {
        Err(Error::input(format!(
            "{what} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )))
    }
}

pub fn frob2(m: &Mat) -> f64 {
    m.iter().map(|v| v * v).sum()
}

pub fn trace(m: &Mat) -> f64 {
    m.diagonal().sum()
}

/// `trace(XᵀMX)` without forming the product's off-diagonal blocks.
pub fn quad_trace(x: &Mat, m: &Mat) -> f64 {
    (m * x).component_mul(x).sum()
}

/// Ratio of extreme absolute eigenvalues of a symmetric matrix.
pub fn condition_estimate(m: &Mat) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let abs = eig.eigenvalues.iter().map(|v| v.abs());
    let max = abs.clone().fold(0.0, f64::max);
    let min = abs.fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn shifted(m: &Mat, shift: f64) -> Mat {
    let mut out = m.clone();
    for i in 0..out.nrows() {
        out[(i, i)] += shift;
    }
    out
}

/// Solves `(M + shift·I) X = rhs` for symmetric `M` by Cholesky with one step
/// of iterative refinement. When `shift` is zero and the factorization fails,
/// retries once with jitter `1e-10·trace(M)/n`.
pub fn solve_shifted_spd(m: &Mat, shift: f64, rhs: &Mat) -> Result<Mat> {
    ensure_square(m, "system matrix")?;
    ensure_rows(rhs, m.nrows(), "right-hand side")?;
    let n = m.nrows();
    let mut system = shifted(m, shift);
    let chol = match Cholesky::new(system.clone()) {
        Some(c) => c,
        None if shift == 0.0 => {
            let jitter = 1e-10 * trace(m).abs() / n as f64;
            system = shifted(m, jitter);
            Cholesky::new(system.clone()).ok_or_else(|| Error::Numerical {
                message: "system not positive definite after jitter".into(),
                condition: condition_estimate(m),
            })?
        }
        None => {
            return Err(Error::Numerical {
                message: format!("system with shift {shift:e} not positive definite"),
                condition: condition_estimate(&system),
            })
        }
    };
    let mut x = chol.solve(rhs);
    let residual = rhs - &system * &x;
    x += chol.solve(&residual);
    Ok(x)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn power_iteration(m: &Mat, steps: usize) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = nalgebra::DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..steps {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w);
        v = w / norm;
    }
    lambda.max((m * &v).dot(&v))
}
