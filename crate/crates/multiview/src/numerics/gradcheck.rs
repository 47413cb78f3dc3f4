//! Finite-difference verification of the analytic backward rules.
//!
//! Every check builds a scalar probe loss `L = sum(G .* op(inputs))` with a
//! fixed random upstream `G`, obtains analytic input gradients from the op's
//! backward rule, and compares them entry by entry against central
//! differences at 64-bit precision.

use super::matrix::Matrix;
use super::ops;
use super::rng::Rng;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely: `|a - n| / max(1, |a|, |n|)`.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares analytic gradients against central finite differences of `loss`
/// over every entry of every input. Returns the max relative error.
pub fn finite_diff_max_err(
    loss: &mut dyn FnMut(&[Matrix<f64>]) -> Result<f64>,
    inputs: &[Matrix<f64>],
    analytic: &[Matrix<f64>],
    step: f64,
) -> Result<f64> {
    assert_eq!(inputs.len(), analytic.len());
    let mut work: Vec<Matrix<f64>> = inputs.to_vec();
    let mut max_err = 0.0f64;
    for k in 0..inputs.len() {
        assert_eq!(inputs[k].shape(), analytic[k].shape());
        for idx in 0..inputs[k].len() {
            let orig = work[k].as_slice()[idx];
            work[k].as_mut_slice()[idx] = orig + step;
            let up = loss(&work)?;
            work[k].as_mut_slice()[idx] = orig - step;
            let down = loss(&work)?;
            work[k].as_mut_slice()[idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            max_err = max_err.max(rel_err(analytic[k].as_slice()[idx], numeric));
        }
    }
    Ok(max_err)
}

fn probe_loss(g: &Matrix<f64>, out: &Matrix<f64>) -> f64 {
    g.as_slice()
        .iter()
        .zip(out.as_slice())
        .map(|(a, b)| a * b)
        .sum()
}

/// Normal samples kept away from zero, for ops with a kink at 0.
fn away_from_zero(rng: &mut Rng, rows: usize, cols: usize) -> Matrix<f64> {
    let mut m = Matrix::zeros(rows, cols);
    for x in m.as_mut_slice() {
        let mag = rng.uniform_in(0.1, 1.5);
        *x = if rng.uniform() < 0.5 { -mag } else { mag };
    }
    m
}

pub fn check_affine(seed: u64, step: f64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let x = rng.matrix_normal(4, 3, 1.0);
    let w = rng.matrix_normal(5, 3, 1.0);
    let b = rng.matrix_normal(1, 5, 1.0);
    let g = rng.matrix_normal(4, 5, 1.0);

    let out = ops::affine_forward(&x, &w, &b)?;
    let (dx, dw, db) = ops::affine_backward(&x, &w, &g)?;
    debug_assert_eq!(out.shape(), g.shape());

    finite_diff_max_err(
        &mut |inp: &[Matrix<f64>]| {
            Ok(probe_loss(
                &g,
                &ops::affine_forward(&inp[0], &inp[1], &inp[2])?,
            ))
        },
        &[x, w, b],
        &[dx, dw, db],
        step,
    )
}

pub fn check_relu(seed: u64, step: f64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let x = away_from_zero(&mut rng, 4, 6);
    let g = rng.matrix_normal(4, 6, 1.0);
    let dx = ops::relu_backward(&x, &g);
    finite_diff_max_err(
        &mut |inp: &[Matrix<f64>]| Ok(probe_loss(&g, &ops::relu_forward(&inp[0]))),
        &[x],
        &[dx],
        step,
    )
}

pub fn check_batchnorm(seed: u64, step: f64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let x = rng.matrix_normal(8, 3, 1.0);
    let gamma = rng.matrix_uniform(1, 3, 0.5, 1.5);
    let beta = rng.matrix_normal(1, 3, 0.5);
    let g = rng.matrix_normal(8, 3, 1.0);

    let mut state = ops::BnState::new(3);
    let (_, cache) = ops::batchnorm_train_forward(&x, &gamma, &beta, &mut state)?;
    let (dx, dgamma, dbeta) = ops::batchnorm_backward(&cache, &gamma, &g)?;

    finite_diff_max_err(
        &mut |inp: &[Matrix<f64>]| {
            let mut scratch = ops::BnState::new(3);
            let (out, _) = ops::batchnorm_train_forward(&inp[0], &inp[1], &inp[2], &mut scratch)?;
            Ok(probe_loss(&g, &out))
        },
        &[x, gamma, beta],
        &[dx, dgamma, dbeta],
        step,
    )
}

pub fn check_bilinear(seed: u64, step: f64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let d = 3;
    let d_b = 2;
    let n = 3;
    let x = rng.matrix_normal(n, d, 1.0);
    let y = rng.matrix_normal(n, d, 1.0);
    let mats: Vec<Matrix<f64>> = (0..d_b).map(|_| rng.matrix_normal(d, d, 1.0)).collect();
    let bias = rng.matrix_normal(1, d_b, 1.0);
    let g = rng.matrix_normal(n, d_b, 1.0);

    let (dx, dy, dmats, dbias) = ops::bilinear_backward(&x, &y, &mats, &g)?;

    let mut inputs = vec![x, y];
    inputs.extend(mats);
    inputs.push(bias);
    let mut analytic = vec![dx, dy];
    analytic.extend(dmats);
    analytic.push(dbias);

    finite_diff_max_err(
        &mut |inp: &[Matrix<f64>]| {
            let out =
                ops::bilinear_forward(&inp[0], &inp[1], &inp[2..2 + d_b], inp.last().unwrap())?;
            Ok(probe_loss(&g, &out))
        },
        &inputs,
        &analytic,
        step,
    )
}

pub fn check_concat(seed: u64, step: f64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let a = rng.matrix_normal(3, 2, 1.0);
    let b = rng.matrix_normal(3, 4, 1.0);
    let g = rng.matrix_normal(3, 6, 1.0);
    let parts = ops::concat_backward(&[2, 4], &g)?;
    finite_diff_max_err(
        &mut |inp: &[Matrix<f64>]| Ok(probe_loss(&g, &ops::concat_forward(&[&inp[0], &inp[1]])?)),
        &[a, b],
        &parts,
        step,
    )
}

pub fn check_softmax_cross_entropy(seed: u64, step: f64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let logits = rng.matrix_normal(2, 3, 1.0);
    let labels: Vec<usize> = (0..2).map(|_| rng.below(3)).collect();
    let (_, grad) = ops::softmax_cross_entropy(&logits, &labels)?;
    finite_diff_max_err(
        &mut |inp: &[Matrix<f64>]| Ok(ops::softmax_cross_entropy(&inp[0], &labels)?.0),
        &[logits],
        &[grad],
        step,
    )
}

/// One gradient-check result line.
pub struct OpCheck {
    pub name: &'static str,
    pub max_err: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_err <= self.tolerance
    }
}

/// Runs every op check at the given seed. Batch norm gets the looser 1e-5
/// tolerance; the rest must hold 1e-6.
pub fn check_all_ops(seed: u64, step: f64) -> Result<Vec<OpCheck>> {
    Ok(vec![
        OpCheck {
            name: "affine",
            max_err: check_affine(seed, step)?,
            tolerance: 1e-6,
        },
        OpCheck {
            name: "relu",
            max_err: check_relu(seed, step)?,
            tolerance: 1e-6,
        },
        OpCheck {
            name: "batchnorm",
            max_err: check_batchnorm(seed, step)?,
            tolerance: 1e-5,
        },
        OpCheck {
            name: "bilinear",
            max_err: check_bilinear(seed, step)?,
            tolerance: 1e-6,
        },
        OpCheck {
            name: "concat",
            max_err: check_concat(seed, step)?,
            tolerance: 1e-6,
        },
        OpCheck {
            name: "softmax_cross_entropy",
            max_err: check_softmax_cross_entropy(seed, step)?,
            tolerance: 1e-6,
        },
    ])
}
