//! Least squares with robust covariances, and spectra of row-normalised weights.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coef: DVector<f64>,
    pub residuals: DVector<f64>,
    /// `(XᵀX)⁻¹`
    pub bread: DMatrix<f64>,
}

/// Least squares through a thin QR factorisation with a rank check.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    let (n, k) = x.shape();
    if n != y.len() {
        return Err(Error::invalid(format!("design has {n} rows but response has {}", y.len())));
    }
    if n < k || k == 0 {
        return Err(Error::SingularDesign(format!("{n} observations for {k} regressors")));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    for i in 0..k {
        if !(r[(i, i)].abs() > 1e-10 * scale.max(1e-300)) {
            return Err(Error::SingularDesign(format!("column {i} is collinear with earlier columns")));
        }
    }
    let qty = qr.q().transpose() * y;
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::SingularDesign("triangular solve failed".into()))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::SingularDesign("triangular inverse failed".into()))?;
    let bread = &r_inv * r_inv.transpose();
    let residuals = y - x * &coef;
    Ok(OlsFit { coef, residuals, bread })
}

/// HC1 heteroskedasticity-robust covariance.
pub fn hc1_cov(x: &DMatrix<f64>, fit: &OlsFit) -> DMatrix<f64> {
    let (n, k) = x.shape();
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        let row = x.row(i);
        let e2 = fit.residuals[i] * fit.residuals[i];
        meat += row.transpose() * row * e2;
    }
    let dof = n as f64 / (n.saturating_sub(k)).max(1) as f64;
    &fit.bread * meat * &fit.bread * dof
}

/// Cluster-robust covariance with the usual `G/(G−1)·(n−1)/(n−k)` correction.
pub fn cluster_cov(x: &DMatrix<f64>, fit: &OlsFit, clusters: &[usize]) -> DMatrix<f64> {
    let (n, k) = x.shape();
    let g = clusters.iter().copied().max().map_or(0, |m| m + 1);
    let mut scores = DMatrix::<f64>::zeros(g, k);
    for i in 0..n {
        let e = fit.residuals[i];
        for j in 0..k {
            scores[(clusters[i], j)] += x[(i, j)] * e;
        }
    }
    let used = (0..g).filter(|&c| scores.row(c).iter().any(|v| *v != 0.0)).count().max(2) as f64;
    let meat = scores.transpose() * &scores;
    let corr = used / (used - 1.0) * (n as f64 - 1.0) / (n.saturating_sub(k)).max(1) as f64;
    &fit.bread * meat * &fit.bread * corr
}

/// Eigenvalues of a row-normalised weights matrix `W = D⁻¹A`.
///
/// When the affinity `A` is symmetric, `W` is similar to `D^{-1/2} A D^{-1/2}`
/// and its spectrum is real; otherwise the moduli-preserving complex
/// eigenvalues of `W` are returned as (re, im) pairs.
pub fn weight_eigenvalues(affinity: &DMatrix<f64>, weights: &DMatrix<f64>) -> Vec<(f64, f64)> {
    let n = affinity.nrows();
    let symmetric = (0..n).all(|i| (0..i).all(|j| (affinity[(i, j)] - affinity[(j, i)]).abs() <= 1e-12));
    if symmetric {
        let deg: Vec<f64> = (0..n).map(|i| affinity.row(i).sum()).collect();
        let sym = DMatrix::from_fn(n, n, |i, j| {
            if deg[i] > 0.0 && deg[j] > 0.0 {
                affinity[(i, j)] / (deg[i] * deg[j]).sqrt()
            } else {
                0.0
            }
        });
        sym.symmetric_eigenvalues().iter().map(|&v| (v, 0.0)).collect()
    } else {
        weights.complex_eigenvalues().iter().map(|c| (c.re, c.im)).collect()
    }
}

/// `ln|det(I − ρW)|` from the eigenvalues of `W`.
pub fn log_det_from_eigen(eigen: &[(f64, f64)], rho: f64) -> f64 {
    eigen
        .iter()
        .map(|&(re, im)| {
            let a = 1.0 - rho * re;
            let b = rho * im;
            0.5 * (a * a + b * b).ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_fit_and_orthogonality() {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0, 1.0, 4.0]);
        let y = DVector::from_vec(vec![1.0, 3.1, 4.9, 7.2, 8.8]);
        let fit = ols(&x, &y).unwrap();
        let xe = x.transpose() * &fit.residuals;
        assert!(xe.norm() < 1e-10);
        // hand-computed slope and intercept
        assert!((fit.coef[1] - 1.97).abs() < 1e-10);
        assert!((fit.coef[0] - 1.06).abs() < 1e-10);
    }

    #[test]
    fn collinear_design_is_rejected() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(ols(&x, &y), Err(Error::SingularDesign(_))));
    }

    #[test]
    fn eigen_log_det_matches_direct_determinant() {
        let a = DMatrix::from_row_slice(4, 4, &[
            0.0, 1.0, 0.5, 0.0, 1.0, 0.0, 0.0, 0.2, 0.5, 0.0, 0.0, 1.0, 0.0, 0.2, 1.0, 0.0,
        ]);
        let mut w = a.clone();
        for mut row in w.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        let eig = weight_eigenvalues(&a, &w);
        for rho in [-0.7, 0.0, 0.3, 0.9] {
            let direct = (DMatrix::identity(4, 4) - &w * rho).determinant().abs().ln();
            assert!((log_det_from_eigen(&eig, rho) - direct).abs() < 1e-10);
        }
        // asymmetric affinity takes the complex route
        let mut b = a.clone();
        b[(0, 1)] = 3.0;
        let mut wb = b.clone();
        for mut row in wb.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        let eig = weight_eigenvalues(&b, &wb);
        let direct = (DMatrix::identity(4, 4) - &wb * 0.4).determinant().abs().ln();
        assert!((log_det_from_eigen(&eig, 0.4) - direct).abs() < 1e-8);
    }
}
