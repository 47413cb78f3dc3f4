//! Concatenation baseline: multinomial softmax regression on the stacked
//! views, trained with Adam. Stands in for the usual concat-and-classify
//! reference point.

use crate::data::batch_indices;
use crate::error::{Error, Result};
use crate::numerics::ops::{affine_forward, softmax_cross_entropy, softmax_rows};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Debug)]
pub struct ConcatSoftmax {
    pub w: Matrix<f64>,
    pub b: Matrix<f64>,
    pub num_classes: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConcatTrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ConcatTrainOpts {
    fn default() -> Self {
        ConcatTrainOpts {
            epochs: 60,
            batch_size: 64,
            lr: 1e-2,
            seed: 0,
        }
    }
}

fn concat_views(views: &[Matrix<f64>]) -> Result<Matrix<f64>> {
    let refs: Vec<&Matrix<f64>> = views.iter().collect();
    Matrix::hstack(&refs)
}

/// Trains multinomial logistic regression on the concatenated views.
/// Zero-initialized, so fully deterministic apart from the batch order seed.
pub fn concat_softmax_fit(
    train_views: &[Matrix<f64>],
    train_labels: &[usize],
    num_classes: usize,
    opts: &ConcatTrainOpts,
) -> Result<ConcatSoftmax> {
    if train_views.is_empty() {
        return Err(Error::Data("no views to concatenate".into()));
    }
    let x = concat_views(train_views)?;
    let n = train_labels.len();
    let d = x.cols();

    let mut w = Matrix::<f64>::zeros(num_classes, d);
    let mut b = Matrix::<f64>::zeros(1, num_classes);
    let mut m_w = Matrix::<f64>::zeros(num_classes, d);
    let mut v_w = Matrix::<f64>::zeros(num_classes, d);
    let mut m_b = Matrix::<f64>::zeros(1, num_classes);
    let mut v_b = Matrix::<f64>::zeros(1, num_classes);
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut t = 0u64;

    for epoch in 0..opts.epochs {
        let mut rng = Rng::stream(opts.seed, 0xC0 + epoch as u64);
        for batch in batch_indices(n, opts.batch_size, Some(&mut rng)) {
            let xb = x.gather_rows(&batch);
            let yb: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let logits = affine_forward(&xb, &w, &b)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &yb)?;
            if !loss.is_finite() {
                return Err(Error::Numeric("non-finite loss in concat baseline".into()));
            }
            let dw = grad.matmul_tn(&xb)?;
            let db = grad.col_sums();

            t += 1;
            let bc1 = 1.0 - beta1f(beta1, t);
            let bc2 = 1.0 - beta1f(beta2, t);
            let lr_t = opts.lr * bc2.sqrt() / bc1;
            for (param, (mom, (vel, g))) in [
                (&mut w, (&mut m_w, (&mut v_w, &dw))),
                (&mut b, (&mut m_b, (&mut v_b, &db))),
            ] {
                for ((p, m), (v, &g)) in param
                    .as_mut_slice()
                    .iter_mut()
                    .zip(mom.as_mut_slice())
                    .zip(vel.as_mut_slice().iter_mut().zip(g.as_slice()))
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr_t * *m / (v.sqrt() + eps);
                }
            }
        }
    }

    Ok(ConcatSoftmax { w, b, num_classes })
}

fn beta1f(beta: f64, t: u64) -> f64 {
    beta.powf(t as f64)
}

impl ConcatSoftmax {
    pub fn scores(&self, views: &[Matrix<f64>]) -> Result<Matrix<f64>> {
        let x = concat_views(views)?;
        Ok(softmax_rows(&affine_forward(&x, &self.w, &self.b)?))
    }

    /// Top@1 and Top@k (k = min(5, C)) accuracy.
    pub fn accuracy(&self, views: &[Matrix<f64>], labels: &[usize]) -> Result<(f64, f64)> {
        let scores = self.scores(views)?;
        let n = labels.len();
        if n == 0 {
            return Err(Error::Data("cannot evaluate an empty split".into()));
        }
        let k = 5.min(self.num_classes);
        let mut top1 = 0;
        let mut topk = 0;
        for (i, &y) in labels.iter().enumerate() {
            let row = scores.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == y {
                top1 += 1;
            }
            let better = row.iter().filter(|&&v| v > row[y]).count();
            if better < k {
                topk += 1;
            }
        }
        Ok((top1 as f64 / n as f64, topk as f64 / n as f64))
    }
}
