use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{shape_err, Result};

/// Diagonal loading applied to a rank-deficient covariance.
pub const FID_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FidResult {
    pub value: f64,
    /// True when at least one covariance was rank-deficient and had
    /// `FID_EPS · I` added before the square root.
    pub regularized: bool,
}

/// Sample mean and unbiased covariance of the rows.
pub fn gaussian_stats(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    if n == 0 {
        return shape_err("no feature rows");
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return shape_err("feature rows must share a nonzero width");
    }
    let mut mu = DVector::zeros(d);
    for r in rows {
        for (m, v) in mu.iter_mut().zip(r) {
            *m += v;
        }
    }
    mu /= n as f64;
    let mut centered = DMatrix::zeros(n, d);
    for (i, r) in rows.iter().enumerate() {
        for j in 0..d {
            centered[(i, j)] = r[j] - mu[j];
        }
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = centered.transpose() * &centered / denom;
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Rank-deficient when the smallest eigenvalue is not clearly positive.
fn regularize(cov: DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let d = cov.nrows();
    let min = SymmetricEigen::new(cov.clone()).eigenvalues.min();
    if min > FID_EPS {
        (cov, false)
    } else {
        (cov + DMatrix::identity(d, d) * FID_EPS, true)
    }
}

/// Fréchet distance between Gaussians fitted to two sets of feature rows.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<FidResult> {
    let (mu_a, cov_a) = gaussian_stats(a)?;
    let (mu_b, cov_b) = gaussian_stats(b)?;
    if mu_a.len() != mu_b.len() {
        return shape_err(format!("feature width {} vs {}", mu_a.len(), mu_b.len()));
    }
    let (cov_a, ra) = regularize(symmetrize(&cov_a));
    let (cov_b, rb) = regularize(symmetrize(&cov_b));
    let sa = sym_sqrt(&cov_a);
    let inner = symmetrize(&(&sa * &cov_b * &sa));
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let mean_term = (&mu_a - &mu_b).norm_squared();
    // Both terms are squared distances; clamping each keeps rounding noise
    // in the covariance part from leaking into an exact mean gap.
    let cov_term = (cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0);
    Ok(FidResult { value: mean_term + cov_term, regularized: ra || rb })
}
