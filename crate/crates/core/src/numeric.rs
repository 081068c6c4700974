//! Small numerically stable helpers shared across modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Logistic function without overflow for any finite input.
#[inline]
pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(t))`.
#[inline]
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// `log(expit(t))`.
#[inline]
pub fn log_expit(t: f64) -> f64 {
    -softplus(-t)
}

pub fn logsumexp(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    (ss / (xs.len().saturating_sub(1).max(1)) as f64).sqrt()
}

pub const COND_LIMIT: f64 = 1e12;

/// Inverse through the SVD, refusing matrices with condition number above
/// [`COND_LIMIT`].
pub fn checked_inverse(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !cond.is_finite() || cond > COND_LIMIT || !smax.is_finite() {
        return Err(Error::Singular { what, cond });
    }
    let u = svd.u.expect("requested");
    let vt = svd.v_t.expect("requested");
    let sinv = DMatrix::from_diagonal(&svd.singular_values.map(|s| 1.0 / s));
    Ok(vt.transpose() * sinv * u.transpose())
}

/// Solve `a x = b` by LU, adding a tiny ridge when `a` is close to singular.
pub fn solve_with_ridge(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(x) = a.clone().lu().solve(b) {
        if x.iter().all(|v| v.is_finite()) {
            return Some(x);
        }
    }
    let scale = a.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    let ridged = a + DMatrix::identity(a.nrows(), a.ncols()) * (1e-10 * scale);
    ridged
        .lu()
        .solve(b)
        .filter(|x| x.iter().all(|v| v.is_finite()))
}

/// Symmetrize, verify the smallest eigenvalue is at least `-tol` (relative to
/// the largest), then clip negative eigenvalues to zero.
pub fn symmetrize_psd(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    if eig.eigenvalues.iter().any(|&v| v < -tol * scale || !v.is_finite()) {
        return Err(Error::Singular {
            what: "covariance (not positive semidefinite)",
            cond: f64::INFINITY,
        });
    }
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return Ok(sym);
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose())
}
