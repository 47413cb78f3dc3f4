//! Small dense linear algebra for the baselines: cyclic Jacobi
//! eigendecomposition of symmetric matrices, Cholesky factorization, and the
//! SVD built from them. Desk-scale sizes only.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with matching eigenvector columns.
pub fn sym_eig(a: &Matrix<f64>) -> Result<(Vec<f64>, Matrix<f64>)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("sym_eig", (n, n), a.shape()));
    }
    let mut m = a.clone();
    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        v.set(i, i, 1.0);
    }

    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                off = off.max(m.get(i, j).abs());
            }
        }
        let scale = (0..n).map(|i| m.get(i, i).abs()).fold(1e-300, f64::max);
        if off <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let eigvals: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap());
    let sorted_vals: Vec<f64> = order.iter().map(|&i| eigvals[i]).collect();
    let mut sorted_vecs = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            sorted_vecs.set(row, col, v.get(row, src));
        }
    }
    Ok((sorted_vals, sorted_vecs))
}

/// Symmetric inverse square root via the eigendecomposition. Errors if any
/// eigenvalue is not safely positive relative to the largest.
pub fn sym_inv_sqrt(a: &Matrix<f64>) -> Result<Matrix<f64>> {
    let (vals, vecs) = sym_eig(a)?;
    let max = vals.first().copied().unwrap_or(0.0);
    if max <= 0.0 {
        return Err(Error::Numeric("matrix is not positive definite".into()));
    }
    let n = a.rows();
    let mut out = Matrix::zeros(n, n);
    for (k, &lambda) in vals.iter().enumerate() {
        if lambda <= 1e-12 * max {
            return Err(Error::Numeric(
                "rank-deficient covariance; add ridge regularization".into(),
            ));
        }
        let weight = 1.0 / lambda.sqrt();
        for i in 0..n {
            for j in 0..n {
                *out.at_mut(i, j) += weight * vecs.get(i, k) * vecs.get(j, k);
            }
        }
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Matrix<f64>) -> Result<Matrix<f64>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("cholesky", (n, n), a.shape()));
    }
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Numeric(
                        "matrix is not positive definite (Cholesky failed)".into(),
                    ));
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solves `L x = b` for lower-triangular `L`, column by column.
pub fn solve_lower(l: &Matrix<f64>, b: &Matrix<f64>) -> Result<Matrix<f64>> {
    let n = l.rows();
    if b.rows() != n {
        return Err(Error::shape("solve_lower", (n, n), b.shape()));
    }
    let mut x = b.clone();
    for col in 0..b.cols() {
        for i in 0..n {
            let mut sum = x.get(i, col);
            for k in 0..i {
                sum -= l.get(i, k) * x.get(k, col);
            }
            x.set(i, col, sum / l.get(i, i));
        }
    }
    Ok(x)
}

/// Solves `L^T x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Matrix<f64>, b: &Matrix<f64>) -> Result<Matrix<f64>> {
    let n = l.rows();
    if b.rows() != n {
        return Err(Error::shape("solve_lower_transpose", (n, n), b.shape()));
    }
    let mut x = b.clone();
    for col in 0..b.cols() {
        for i in (0..n).rev() {
            let mut sum = x.get(i, col);
            for k in i + 1..n {
                sum -= l.get(k, i) * x.get(k, col);
            }
            x.set(i, col, sum / l.get(i, i));
        }
    }
    Ok(x)
}

/// Thin SVD of a rectangular matrix through the eigendecomposition of the
/// smaller Gram matrix. Returns `(u, sigma, v)` with singular values in
/// descending order; columns with singular value below `1e-12 * sigma_max`
/// are dropped.
pub fn thin_svd(a: &Matrix<f64>) -> Result<(Matrix<f64>, Vec<f64>, Matrix<f64>)> {
    let (rows, cols) = a.shape();
    let flip = rows < cols;
    // work with the taller orientation so the Gram matrix is the small one
    let work = if flip { a.transpose() } else { a.clone() };
    let gram = work.matmul_tn(&work)?; // cols x cols
    let (vals, vecs) = sym_eig(&gram)?;
    let sigma_max = vals.first().map(|v| v.max(0.0).sqrt()).unwrap_or(0.0);

    let mut keep = Vec::new();
    for (k, &lambda) in vals.iter().enumerate() {
        let sigma = lambda.max(0.0).sqrt();
        if sigma > 1e-12 * sigma_max.max(1e-300) {
            keep.push((k, sigma));
        }
    }
    let r = keep.len();
    let small = work.cols();
    let mut v_small = Matrix::zeros(small, r);
    let mut sigma = Vec::with_capacity(r);
    for (col, &(k, s)) in keep.iter().enumerate() {
        sigma.push(s);
        for i in 0..small {
            v_small.set(i, col, vecs.get(i, k));
        }
    }
    // left vectors: u = A v / sigma
    let mut u_tall = work.matmul(&v_small)?;
    for (col, &s) in sigma.iter().enumerate() {
        for i in 0..u_tall.rows() {
            *u_tall.at_mut(i, col) /= s;
        }
    }
    if flip {
        Ok((v_small, sigma, u_tall))
    } else {
        Ok((u_tall, sigma, v_small))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random_symmetric(n: usize, rng: &mut Rng) -> Matrix<f64> {
        let raw: Matrix<f64> = rng.matrix_normal(n, n, 1.0);
        let mut s = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                s.set(i, j, 0.5 * (raw.get(i, j) + raw.get(j, i)));
            }
        }
        s
    }

    #[test]
    fn jacobi_reconstructs_the_matrix() {
        let mut rng = Rng::new(51);
        for _ in 0..20 {
            let n = 2 + rng.below(8);
            let a = random_symmetric(n, &mut rng);
            let (vals, vecs) = sym_eig(&a).unwrap();
            // A = V diag(vals) V^T
            let mut recon = Matrix::zeros(n, n);
            for (k, &val) in vals.iter().enumerate() {
                for i in 0..n {
                    for j in 0..n {
                        *recon.at_mut(i, j) += val * vecs.get(i, k) * vecs.get(j, k);
                    }
                }
            }
            for (x, y) in recon.as_slice().iter().zip(a.as_slice()) {
                assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
            // descending order
            for w in vals.windows(2) {
                assert!(w[0] >= w[1] - 1e-12);
            }
        }
    }

    #[test]
    fn jacobi_eigenvectors_are_orthonormal() {
        let mut rng = Rng::new(52);
        let a = random_symmetric(6, &mut rng);
        let (_, vecs) = sym_eig(&a).unwrap();
        let gram = vecs.matmul_tn(&vecs).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inv_sqrt_whitens() {
        let mut rng = Rng::new(53);
        let x: Matrix<f64> = rng.matrix_normal(40, 4, 1.0);
        let cov = x.matmul_tn(&x).unwrap();
        let w = sym_inv_sqrt(&cov).unwrap();
        let whitened = w.matmul(&cov).unwrap().matmul(&w).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((whitened.get(i, j) - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inv_sqrt_rejects_rank_deficiency() {
        // rank-1 covariance
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(sym_inv_sqrt(&x).is_err());
    }

    #[test]
    fn cholesky_and_solves_invert() {
        let mut rng = Rng::new(54);
        let x: Matrix<f64> = rng.matrix_normal(30, 5, 1.0);
        let spd = x.matmul_tn(&x).unwrap();
        let l = cholesky(&spd).unwrap();
        // L L^T = spd
        let recon = l.matmul_nt(&l).unwrap();
        for (a, b) in recon.as_slice().iter().zip(spd.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
        // solve round trip
        let b: Matrix<f64> = rng.matrix_normal(5, 2, 1.0);
        let y = solve_lower(&l, &b).unwrap();
        let x2 = solve_lower_transpose(&l, &y).unwrap();
        let back = spd.matmul(&x2).unwrap();
        for (a, e) in back.as_slice().iter().zip(b.as_slice()) {
            assert!((a - e).abs() < 1e-8);
        }
    }

    #[test]
    fn svd_reconstructs() {
        let mut rng = Rng::new(55);
        for &(r, c) in &[(6, 3), (3, 6), (5, 5)] {
            let a: Matrix<f64> = rng.matrix_normal(r, c, 1.0);
            let (u, sigma, v) = thin_svd(&a).unwrap();
            let mut recon = Matrix::zeros(r, c);
            for (k, &s) in sigma.iter().enumerate() {
                for i in 0..r {
                    for j in 0..c {
                        *recon.at_mut(i, j) += s * u.get(i, k) * v.get(j, k);
                    }
                }
            }
            for (x, y) in recon.as_slice().iter().zip(a.as_slice()) {
                assert!((x - y).abs() < 1e-9);
            }
            for w in sigma.windows(2) {
                assert!(w[0] >= w[1] - 1e-12);
            }
        }
    }
}
