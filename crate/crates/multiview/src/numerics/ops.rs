//! Differentiable operations: each forward comes with an exact backward
//! rule. Losses and statistics accumulate in f64 regardless of the training
//! element type.

use super::matrix::{Matrix, Scalar};
use crate::error::{Error, Result};

/// `out[i,j] = sum_k W[j,k] x[i,k] + b[j]` for `x: batch x m_in`,
/// `w: m_out x m_in`, `b: 1 x m_out`.
pub fn affine_forward<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if x.cols() != w.cols() {
        return Err(Error::shape("affine", x.shape(), w.shape()));
    }
    if b.rows() != 1 || b.cols() != w.rows() {
        return Err(Error::shape("affine bias", w.shape(), b.shape()));
    }
    let mut out = x.matmul_nt(w)?;
    for i in 0..out.rows() {
        for (o, &bj) in out.row_mut(i).iter_mut().zip(b.row(0)) {
            *o += bj;
        }
    }
    Ok(out)
}

/// Gradients of the affine map: `(dx, dw, db)` from upstream `g`.
pub fn affine_backward<T: Scalar>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    g: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let dx = g.matmul(w)?;
    let dw = g.matmul_tn(x)?;
    let db = g.col_sums();
    Ok((dx, dw, db))
}

pub fn relu_forward<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient at 0 is 0: upstream passes only where x > 0.
pub fn relu_backward<T: Scalar>(x: &Matrix<T>, g: &Matrix<T>) -> Matrix<T> {
    let mut out = g.clone();
    for (o, &v) in out.as_mut_slice().iter_mut().zip(x.as_slice()) {
        if v <= T::zero() {
            *o = T::zero();
        }
    }
    out
}

/// Saved intermediates for the batch-norm backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T: Scalar> {
    pub xhat: Matrix<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Per-column running statistics, updated in train mode only.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnState<T> {
    pub fn new(width: usize) -> Self {
        BnState {
            mean: vec![T::zero(); width],
            var: vec![T::one(); width],
        }
    }

    pub fn cast<U: Scalar>(&self) -> BnState<U> {
        BnState {
            mean: self.mean.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
            var: self.var.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Train-mode batch norm: column-wise normalization by batch statistics,
/// then scale/shift. Updates `state` as
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn batchnorm_train_forward<T: Scalar>(
    x: &Matrix<T>,
    gamma: &Matrix<T>,
    beta: &Matrix<T>,
    state: &mut BnState<T>,
) -> Result<(Matrix<T>, BnCache<T>)> {
    let (n, m) = x.shape();
    if n < 2 {
        return Err(Error::Numeric(format!(
            "batchnorm requires batch >= 2 in train mode, got {n} (variance undefined)"
        )));
    }
    if gamma.cols() != m || beta.cols() != m {
        return Err(Error::shape("batchnorm params", x.shape(), gamma.shape()));
    }
    let inv_n = 1.0 / n as f64;
    let mut mean = vec![0.0f64; m];
    let mut var = vec![0.0f64; m];
    for i in 0..n {
        for (j, &v) in x.row(i).iter().enumerate() {
            mean[j] += v.to_f64();
        }
    }
    for mj in &mut mean {
        *mj *= inv_n;
    }
    for i in 0..n {
        for (j, &v) in x.row(i).iter().enumerate() {
            let d = v.to_f64() - mean[j];
            var[j] += d * d;
        }
    }
    for vj in &mut var {
        *vj *= inv_n;
    }
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::from_f64(1.0 / (v + BN_EPS).sqrt()))
        .collect();
    let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64(v)).collect();
    let var_t: Vec<T> = var.iter().map(|&v| T::from_f64(v)).collect();

    let mut xhat = Matrix::zeros(n, m);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        for (j, (&mu, &istd)) in mean_t.iter().zip(&inv_std).enumerate() {
            let h = (x.get(i, j) - mu) * istd;
            xhat.set(i, j, h);
            out.set(i, j, gamma.get(0, j) * h + beta.get(0, j));
        }
    }

    let mom = T::from_f64(BN_MOMENTUM);
    let one_minus = T::from_f64(1.0 - BN_MOMENTUM);
    for j in 0..m {
        state.mean[j] = mom * state.mean[j] + one_minus * mean_t[j];
        state.var[j] = mom * state.var[j] + one_minus * var_t[j];
    }

    Ok((
        out,
        BnCache {
            xhat,
            inv_std,
            batch_mean: mean_t,
            batch_var: var_t,
        },
    ))
}

/// Eval-mode batch norm: normalizes with the frozen running statistics.
pub fn batchnorm_eval_forward<T: Scalar>(
    x: &Matrix<T>,
    gamma: &Matrix<T>,
    beta: &Matrix<T>,
    state: &BnState<T>,
) -> Result<Matrix<T>> {
    let (n, m) = x.shape();
    if gamma.cols() != m || state.mean.len() != m {
        return Err(Error::shape("batchnorm eval", x.shape(), gamma.shape()));
    }
    let mut out = Matrix::zeros(n, m);
    let inv_std: Vec<T> = state
        .var
        .iter()
        .map(|&v| T::from_f64(1.0 / (v.to_f64() + BN_EPS).sqrt()))
        .collect();
    for i in 0..n {
        for (j, (&mu, &istd)) in state.mean.iter().zip(&inv_std).enumerate() {
            let h = (x.get(i, j) - mu) * istd;
            out.set(i, j, gamma.get(0, j) * h + beta.get(0, j));
        }
    }
    Ok(out)
}

/// Standard batch-norm gradient from the saved cache:
/// `dx = gamma * inv_std / n * (n*g - sum(g) - xhat * sum(g*xhat))` per column.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &Matrix<T>,
    g: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let (n, m) = g.shape();
    if cache.xhat.shape() != (n, m) {
        return Err(Error::shape(
            "batchnorm backward",
            cache.xhat.shape(),
            g.shape(),
        ));
    }
    let mut dgamma = Matrix::zeros(1, m);
    let mut dbeta = Matrix::zeros(1, m);
    for i in 0..n {
        for j in 0..m {
            let gij = g.get(i, j);
            *dgamma.at_mut(0, j) += gij * cache.xhat.get(i, j);
            *dbeta.at_mut(0, j) += gij;
        }
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    let n_t = T::from_f64(n as f64);
    let mut dx = Matrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let term =
                n_t * g.get(i, j) - dbeta.get(0, j) - cache.xhat.get(i, j) * dgamma.get(0, j);
            dx.set(i, j, gamma.get(0, j) * cache.inv_std[j] * inv_n * term);
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Multi-dimension bilinear form between two equal-width feature batches:
/// `out[i,p] = x_i^T B_p y_i + bias[p]` with one metric matrix per output
/// dimension.
pub fn bilinear_forward<T: Scalar>(
    x: &Matrix<T>,
    y: &Matrix<T>,
    mats: &[Matrix<T>],
    bias: &Matrix<T>,
) -> Result<Matrix<T>> {
    if x.shape() != y.shape() {
        return Err(Error::shape("bilinear inputs", x.shape(), y.shape()));
    }
    let (n, d) = x.shape();
    let d_b = mats.len();
    if d_b == 0 {
        return Err(Error::Config("bilinear needs d_B >= 1".into()));
    }
    if bias.cols() != d_b {
        return Err(Error::shape("bilinear bias", d_b, bias.shape()));
    }
    let mut out = Matrix::zeros(n, d_b);
    for (p, b_p) in mats.iter().enumerate() {
        if b_p.shape() != (d, d) {
            return Err(Error::shape("bilinear metric", (d, d), b_p.shape()));
        }
        let t = x.matmul(b_p)?; // t[i,b] = sum_a x[i,a] B_p[a,b]
        for i in 0..n {
            let mut acc = T::zero();
            for (&tv, &yv) in t.row(i).iter().zip(y.row(i)) {
                acc += tv * yv;
            }
            out.set(i, p, acc + bias.get(0, p));
        }
    }
    Ok(out)
}

/// Gradients of the bilinear form with respect to both inputs, the metric
/// matrices, and the bias.
pub type BilinearGrads<T> = (Matrix<T>, Matrix<T>, Vec<Matrix<T>>, Matrix<T>);

pub fn bilinear_backward<T: Scalar>(
    x: &Matrix<T>,
    y: &Matrix<T>,
    mats: &[Matrix<T>],
    g: &Matrix<T>,
) -> Result<BilinearGrads<T>> {
    let (n, d) = x.shape();
    let d_b = mats.len();
    if g.shape() != (n, d_b) {
        return Err(Error::shape("bilinear upstream", (n, d_b), g.shape()));
    }
    let mut dx = Matrix::zeros(n, d);
    let mut dy = Matrix::zeros(n, d);
    let mut dmats = Vec::with_capacity(d_b);
    let mut dbias = Matrix::zeros(1, d_b);

    for (p, b_p) in mats.iter().enumerate() {
        let xb = x.matmul(b_p)?; // batch x d, rows x_i^T B_p
        let by = y.matmul_nt(b_p)?; // batch x d, rows (B_p y_i)^T
        let mut db = Matrix::zeros(d, d);
        for i in 0..n {
            let gip = g.get(i, p);
            if gip == T::zero() {
                continue;
            }
            *dbias.at_mut(0, p) += gip;
            for a in 0..d {
                *dx.at_mut(i, a) += gip * by.get(i, a);
                *dy.at_mut(i, a) += gip * xb.get(i, a);
            }
            let x_row = x.row(i);
            let y_row = y.row(i);
            for (a, &xa) in x_row.iter().enumerate() {
                let w = gip * xa;
                if w == T::zero() {
                    continue;
                }
                let db_row = db.row_mut(a);
                for (o, &yb) in db_row.iter_mut().zip(y_row) {
                    *o += w * yb;
                }
            }
        }
        dmats.push(db);
    }
    Ok((dx, dy, dmats, dbias))
}

/// Column-wise concatenation in the given order.
pub fn concat_forward<T: Scalar>(parts: &[&Matrix<T>]) -> Result<Matrix<T>> {
    let n = parts
        .first()
        .ok_or_else(|| Error::Config("concat of zero parts".into()))?
        .rows();
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Matrix::zeros(n, total);
    let mut offset = 0;
    for part in parts {
        if part.rows() != n {
            return Err(Error::shape("concat", (n, part.cols()), part.shape()));
        }
        for i in 0..n {
            out.row_mut(i)[offset..offset + part.cols()].copy_from_slice(part.row(i));
        }
        offset += part.cols();
    }
    Ok(out)
}

/// Slices the upstream gradient back into per-part gradients.
pub fn concat_backward<T: Scalar>(widths: &[usize], g: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
    let total: usize = widths.iter().sum();
    if g.cols() != total {
        return Err(Error::shape("concat backward", total, g.shape()));
    }
    let n = g.rows();
    let mut out = Vec::with_capacity(widths.len());
    let mut offset = 0;
    for &w in widths {
        let mut part = Matrix::zeros(n, w);
        for i in 0..n {
            part.row_mut(i)
                .copy_from_slice(&g.row(i)[offset..offset + w]);
        }
        offset += w;
        out.push(part);
    }
    Ok(out)
}

/// Row-wise softmax with max subtraction, in f64.
pub fn softmax_rows<T: Scalar>(logits: &Matrix<T>) -> Matrix<f64> {
    let (n, c) = logits.shape();
    let mut out = Matrix::zeros(n, c);
    for i in 0..n {
        let row = logits.row(i);
        let max = row
            .iter()
            .map(|v| v.to_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let out_row = out.row_mut(i);
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v.to_f64() - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row {
            *o /= sum;
        }
    }
    out
}

/// Batch-mean cross entropy and its gradient with respect to the logits:
/// `grad = (softmax(z) - onehot(y)) / batch`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Matrix<T>,
    labels: &[usize],
) -> Result<(f64, Matrix<T>)> {
    let (n, c) = logits.shape();
    if labels.len() != n {
        return Err(Error::shape("cross entropy labels", n, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let probs = softmax_rows(logits);
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, c);
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs.get(i, y).max(f64::MIN_POSITIVE).ln();
        for j in 0..c {
            let p = probs.get(i, j) - if j == y { 1.0 } else { 0.0 };
            grad.set(i, j, T::from_f64(p * inv_n));
        }
    }
    Ok((loss * inv_n, grad))
}
