//! Kernel and pairwise-distance machinery for both layers.
//!
//! The first layer is an RBF kernel over input features,
//! `K_ij = exp(-|x_i - x_j|² / (2σ²))`. The second layer is an RBF kernel over
//! intermediate responses written in terms of the squared-distance matrix,
//! `J = exp(-θ·E)` with `E_ij = F_ii + F_jj - 2F_ij` and `F = YYᵀ`.

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite, Mat};

/// Lower bound applied to the second-layer exponent coefficient.
pub const THETA_FLOOR: f64 = 1e-8;
/// Upper bound applied to the second-layer exponent coefficient during training.
pub const THETA_CEIL: f64 = 1e6;

/// Squared pairwise distances `E` together with the inner-product matrix `F = YYᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub sq: Mat,
    pub inner: Mat,
}

fn rows_of(x: &Mat) -> Vec<Vec<f64>> {
    x.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn check_features(x: &Mat, what: &str) -> Result<()> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::input(format!("{what} is empty")));
    }
    ensure_finite(x, what)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::param(format!("kernel width must be positive, got {sigma}")))
    }
}

/// First-layer RBF Gram matrix over the rows of `x`.
pub fn rbf_gram(x: &Mat, sigma: f64) -> Result<Mat> {
    check_features(x, "feature matrix")?;
    check_sigma(sigma)?;
    let rows = rows_of(x);
    let n = rows.len();
    let scale = 1.0 / (2.0 * sigma * sigma);
    let mut k = Mat::identity(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = (-sq_dist(&rows[i], &rows[j]) * scale).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// RBF kernel between the rows of `a` (m×d) and the rows of `b` (n×d), m×n.
pub fn rbf_cross(a: &Mat, b: &Mat, sigma: f64) -> Result<Mat> {
    check_features(a, "query features")?;
    check_features(b, "reference features")?;
    check_sigma(sigma)?;
    if a.ncols() != b.ncols() {
        return Err(Error::input(format!(
            "feature dimension mismatch: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let scale = 1.0 / (2.0 * sigma * sigma);
    Ok(cross_sq_dist(a, b).map(|d| (-d * scale).exp()))
}

/// Squared Euclidean distances between the rows of `a` and the rows of `b`.
pub fn cross_sq_dist(a: &Mat, b: &Mat) -> Mat {
    let ra = rows_of(a);
    let rb = rows_of(b);
    Mat::from_fn(ra.len(), rb.len(), |i, j| sq_dist(&ra[i], &rb[j]))
}

/// Builds `F = YYᵀ` and `E_ij = F_ii + F_jj - 2F_ij`, with `E` symmetrized,
/// clamped at zero and given an exact zero diagonal.
pub fn pairwise_sq_dist(y: &Mat) -> Result<DistanceMatrix> {
    ensure_finite(y, "intermediate responses")?;
    let f = y * y.transpose();
    let n = f.nrows();
    let mut e = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = (f[(i, i)] + f[(j, j)] - 2.0 * f[(i, j)]).max(0.0);
            e[(i, j)] = v;
            e[(j, i)] = v;
        }
    }
    Ok(DistanceMatrix { sq: e, inner: f })
}

/// Clamps θ into `[THETA_FLOOR, THETA_CEIL]`, reporting whether it moved.
pub fn clamp_theta(theta: f64) -> (f64, bool) {
    let c = theta.clamp(THETA_FLOOR, THETA_CEIL);
    (c, c != theta)
}

/// Second-layer kernel `J = exp(-θE)`. A θ outside the admissible range is
/// clamped and a warning message is returned alongside the matrix.
pub fn second_layer_kernel(e: &DistanceMatrix, theta: f64) -> (Mat, Option<String>) {
    let (t, clamped) = clamp_theta(theta);
    let mut j = e.sq.map(|v| (-t * v).exp());
    j.fill_diagonal(1.0);
    let warning = clamped.then(|| format!("theta {theta:e} clamped to {t:e}"));
    (j, warning)
}

/// Median-heuristic RBF width: `σ = sqrt(median / 2)` over the nonzero squared
/// pairwise distances. An even count takes the mean of the two middle values.
pub fn median_heuristic_width(x: &Mat) -> Result<f64> {
    check_features(x, "feature matrix")?;
    if x.nrows() < 2 {
        return Err(Error::input("median heuristic needs at least two samples"));
    }
    let rows = rows_of(x);
    let mut d: Vec<f64> = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in 0..i {
            let v = sq_dist(&rows[i], &rows[j]);
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return Err(Error::Degenerate("all pairwise distances are zero".into()));
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let median = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    Ok((median / 2.0).sqrt())
}
