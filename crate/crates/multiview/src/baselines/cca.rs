//! Two-view canonical correlation analysis: the whitened cross-covariance
//! SVD. Projections maximize the correlation of the two views subject to
//! unit-covariance constraints on each side.

use super::linalg::{sym_inv_sqrt, thin_svd};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Debug)]
pub struct CcaSolution {
    /// d1 x r projection for the first view.
    pub w1: Matrix<f64>,
    /// d2 x r projection for the second view.
    pub w2: Matrix<f64>,
    /// Canonical correlations, descending, in [0, 1].
    pub correlations: Vec<f64>,
}

/// Centers columns in place and returns the means.
fn center_columns(x: &mut Matrix<f64>) -> Vec<f64> {
    let (n, d) = x.shape();
    let mut means = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in means.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    for i in 0..n {
        for (j, v) in x.row_mut(i).iter_mut().enumerate() {
            *v -= means[j];
        }
    }
    means
}

/// `1e-4 * trace/dim`, the default ridge scale for ill-posed covariances.
pub fn default_ridge(cov: &Matrix<f64>) -> f64 {
    let dim = cov.rows();
    let trace: f64 = (0..dim).map(|i| cov.get(i, i)).sum();
    1e-4 * trace / dim as f64
}

/// Fits CCA on two aligned views (rows are samples). `ridge` is added to the
/// diagonal of each view's covariance before whitening; pass 0 for the exact
/// constraint on full-rank data.
pub fn cca_fit(x1: &Matrix<f64>, x2: &Matrix<f64>, r: usize, ridge: f64) -> Result<CcaSolution> {
    if x1.rows() != x2.rows() {
        return Err(Error::shape("cca samples", x1.shape(), x2.shape()));
    }
    let n = x1.rows();
    if n < 2 {
        return Err(Error::Data("cca needs at least two samples".into()));
    }
    let max_r = x1.cols().min(x2.cols());
    if r == 0 || r > max_r {
        return Err(Error::Config(format!("r must be in [1, {max_r}], got {r}")));
    }
    if ridge < 0.0 {
        return Err(Error::Config("ridge must be nonnegative".into()));
    }

    let mut c1 = x1.clone();
    let mut c2 = x2.clone();
    center_columns(&mut c1);
    center_columns(&mut c2);

    // covariances of the centered data (unnormalized, matching the
    // unit-variance constraint w^T X X^T w = 1)
    let mut s11 = c1.matmul_tn(&c1)?;
    let mut s22 = c2.matmul_tn(&c2)?;
    let s12 = c1.matmul_tn(&c2)?;
    for i in 0..s11.rows() {
        *s11.at_mut(i, i) += ridge;
    }
    for i in 0..s22.rows() {
        *s22.at_mut(i, i) += ridge;
    }

    let w1_white = sym_inv_sqrt(&s11).map_err(|_| {
        Error::Numeric("view 1 covariance is rank deficient; pass ridge > 0".into())
    })?;
    let w2_white = sym_inv_sqrt(&s22).map_err(|_| {
        Error::Numeric("view 2 covariance is rank deficient; pass ridge > 0".into())
    })?;

    let t = w1_white.matmul(&s12)?.matmul(&w2_white)?;
    let (u, sigma, v) = thin_svd(&t)?;
    if sigma.len() < r {
        return Err(Error::Numeric(format!(
            "cross covariance has rank {}, cannot extract {r} directions",
            sigma.len()
        )));
    }

    let take_cols = |m: &Matrix<f64>, r: usize| {
        let mut out = Matrix::zeros(m.rows(), r);
        for i in 0..m.rows() {
            for j in 0..r {
                out.set(i, j, m.get(i, j));
            }
        }
        out
    };
    let w1 = w1_white.matmul(&take_cols(&u, r))?;
    let w2 = w2_white.matmul(&take_cols(&v, r))?;

    Ok(CcaSolution {
        w1,
        w2,
        correlations: sigma[..r].to_vec(),
    })
}
