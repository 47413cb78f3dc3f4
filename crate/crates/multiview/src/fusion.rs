//! Selective multi-view loss fusion.
//!
//! Minimizes `sum_v alpha_v^gamma * L_v` over the probability simplex with an
//! exact cardinality constraint `||alpha||_0 = s`: sort the per-view losses
//! ascending, keep the `s` smallest, and weight them by the closed form
//! `alpha_v = L_v^(1/(1-gamma)) / sum_w L_w^(1/(1-gamma))`.

use crate::error::{Error, Result};
use crate::numerics::matrix::{Matrix, Scalar};
use crate::numerics::ops::{softmax_cross_entropy, softmax_rows};
use serde::{Deserialize, Serialize};

/// Losses are floored here before exponentiation; a zero loss would make
/// `L^(1/(1-gamma))` infinite, and the floor preserves the limit (weight
/// concentrates on zero-loss views).
pub const LOSS_FLOOR: f64 = 1e-12;

/// Simplex- and sparsity-constrained view weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewWeights {
    pub alpha: Vec<f64>,
    pub gamma: f64,
    pub s: usize,
}

impl ViewWeights {
    /// Uniform 1/M over all views, used before the first weight update so the
    /// first epoch trains every view. Note this start vector intentionally has
    /// M nonzeros; solver outputs have exactly `min(s, M)`.
    pub fn uniform(m: usize, gamma: f64, s: usize) -> Self {
        ViewWeights {
            alpha: vec![1.0 / m as f64; m],
            gamma,
            s,
        }
    }

    pub fn num_views(&self) -> usize {
        self.alpha.len()
    }

    pub fn support_size(&self) -> usize {
        self.alpha.iter().filter(|&&a| a != 0.0).count()
    }
}

/// Per-view losses plus the ascending permutation over them.
#[derive(Clone, Debug)]
pub struct LossVector {
    pub losses: Vec<f64>,
    /// `perm[k]` is the view index with the k-th smallest loss; ties keep the
    /// lower view index first.
    pub perm: Vec<usize>,
}

impl LossVector {
    pub fn sorted_losses(&self) -> Vec<f64> {
        self.perm.iter().map(|&v| self.losses[v]).collect()
    }
}

fn validate_gamma_s(gamma: f64, s: usize, m: usize) -> Result<()> {
    if gamma.is_nan() || gamma <= 1.0 {
        return Err(Error::Config(format!(
            "gamma must be > 1 (the weight exponent is 1/(1-gamma)), got {gamma}"
        )));
    }
    if s < 1 || s > m {
        return Err(Error::Config(format!(
            "sparsity s must be in [1, {m}], got {s}"
        )));
    }
    Ok(())
}

/// Batch-mean cross-entropy loss of each view's logits.
pub fn per_view_losses<T: Scalar>(logits: &[Matrix<T>], labels: &[usize]) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(logits.len());
    for z in logits {
        if z.shape() != logits[0].shape() {
            return Err(Error::shape(
                "per_view_losses",
                logits[0].shape(),
                z.shape(),
            ));
        }
        losses.push(softmax_cross_entropy(z, labels)?.0);
    }
    Ok(losses)
}

/// Ascending sort of the loss vector; ties broken by lower view index.
pub fn sort_losses(losses: &[f64]) -> Result<LossVector> {
    if losses.iter().any(|l| l.is_nan()) {
        return Err(Error::Numeric("NaN in per-view losses".into()));
    }
    let mut perm: Vec<usize> = (0..losses.len()).collect();
    perm.sort_by(|&a, &b| losses[a].partial_cmp(&losses[b]).unwrap().then(a.cmp(&b)));
    Ok(LossVector {
        losses: losses.to_vec(),
        perm,
    })
}

/// Closed-form solution of the selective fusion problem.
///
/// The powers are evaluated in log space so extreme exponents (gamma near 1
/// maps 1/(1-gamma) to large negative values) cannot overflow. After
/// normalization the largest weight is recomputed as one minus the rest so
/// the simplex constraint holds exactly.
pub fn solve_alpha(losses: &[f64], gamma: f64, s: usize) -> Result<ViewWeights> {
    let m = losses.len();
    validate_gamma_s(gamma, s, m)?;
    if let Some(l) = losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::Numeric(format!("non-finite per-view loss {l}")));
    }
    if losses.iter().any(|&l| l < 0.0) {
        return Err(Error::Numeric("negative per-view loss".into()));
    }

    let sorted = sort_losses(losses)?;
    let support = &sorted.perm[..s];
    let exponent = 1.0 / (1.0 - gamma);

    // log weights over the support, stabilized by max subtraction
    let log_w: Vec<f64> = support
        .iter()
        .map(|&v| exponent * losses[v].max(LOSS_FLOOR).ln())
        .collect();
    let max_log = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|lw| (lw - max_log).exp()).collect();
    let total: f64 = w.iter().sum();

    let mut alpha = vec![0.0; m];
    for (&v, &wv) in support.iter().zip(&w) {
        // a selected view whose relative weight underflows f64 (possible for
        // gamma near 1 with wide loss ratios) keeps the smallest positive
        // value: numerically nil, but the cardinality constraint stays exact
        alpha[v] = (wv / total).max(f64::MIN_POSITIVE);
    }
    pin_sum_to_one(&mut alpha);

    Ok(ViewWeights { alpha, gamma, s })
}

/// Nudges one support entry until the left-to-right sum is exactly 1.0.
/// Entries late in index order respond most directly to the accumulated
/// total, so candidates are tried from the back; a candidate that cannot
/// realize an exact 1.0 is reverted. The adjustment is within a few ulp of
/// 1, so weights stay positive and the support is unchanged.
fn pin_sum_to_one(alpha: &mut [f64]) {
    let total = |alpha: &[f64]| alpha.iter().sum::<f64>();
    if total(alpha) == 1.0 {
        return;
    }
    let support: Vec<usize> = (0..alpha.len()).filter(|&i| alpha[i] > 0.0).rev().collect();
    for &j in &support {
        let saved = alpha[j];
        for _ in 0..8 {
            let deficit = 1.0 - total(alpha);
            if deficit == 0.0 {
                return;
            }
            let candidate = alpha[j] + deficit;
            if candidate <= 0.0 || !candidate.is_finite() || candidate == alpha[j] {
                break;
            }
            alpha[j] = candidate;
        }
        if total(alpha) == 1.0 {
            return;
        }
        alpha[j] = saved;
    }
}

/// `sum_v alpha_v^gamma * L_v`.
pub fn fused_objective(losses: &[f64], weights: &ViewWeights) -> f64 {
    weights
        .alpha
        .iter()
        .zip(losses)
        .map(|(&a, &l)| {
            if a == 0.0 {
                0.0
            } else {
                a.powf(weights.gamma) * l
            }
        })
        .sum()
}

/// How the inference combiner weights per-view probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictWeighting {
    /// Convex weights alpha as-is.
    #[default]
    Alpha,
    /// alpha^gamma, renormalized to sum to one.
    AlphaGamma,
}

/// Combines per-view softmax probabilities into scores and argmax labels.
/// Ties go to the lowest class index.
pub fn predict<T: Scalar>(
    logits: &[Matrix<T>],
    weights: &ViewWeights,
    weighting: PredictWeighting,
) -> Result<(Vec<usize>, Matrix<f64>)> {
    if logits.len() != weights.num_views() {
        return Err(Error::shape("predict", weights.num_views(), logits.len()));
    }
    let (n, c) = logits[0].shape();
    let coef = match weighting {
        PredictWeighting::Alpha => weights.alpha.clone(),
        PredictWeighting::AlphaGamma => {
            let raw: Vec<f64> = weights
                .alpha
                .iter()
                .map(|a| a.powf(weights.gamma))
                .collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|r| r / total).collect()
        }
    };
    let mut scores = Matrix::zeros(n, c);
    for (z, &a) in logits.iter().zip(&coef) {
        if a == 0.0 {
            continue;
        }
        if z.shape() != (n, c) {
            return Err(Error::shape("predict logits", (n, c), z.shape()));
        }
        let probs = softmax_rows(z);
        for (acc, &p) in scores.as_mut_slice().iter_mut().zip(probs.as_slice()) {
            *acc += a * p;
        }
    }
    let labels = (0..n)
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Ok((labels, scores))
}

/// Writes the `view_index,weight` report.
pub fn write_alpha_csv(path: &std::path::Path, weights: &ViewWeights) -> Result<()> {
    let mut out = String::from("view_index,weight\n");
    for (v, a) in weights.alpha.iter().enumerate() {
        out.push_str(&format!("{v},{a}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Appends one epoch's weights to the `epoch,view_index,weight` history.
pub fn append_alpha_history(
    path: &std::path::Path,
    epoch: usize,
    weights: &ViewWeights,
) -> Result<()> {
    use std::io::Write;
    let mut file = if path.exists() {
        std::fs::OpenOptions::new().append(true).open(path)?
    } else {
        let mut f = std::fs::File::create(path)?;
        f.write_all(b"epoch,view_index,weight\n")?;
        f
    };
    for (v, a) in weights.alpha.iter().enumerate() {
        writeln!(file, "{epoch},{v},{a}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn per_view_losses_match_independent_computation() {
        let mut rng = Rng::new(4);
        let z1: Matrix = rng.matrix_normal(6, 3, 1.0);
        let z2: Matrix = rng.matrix_normal(6, 3, 1.0);
        let labels: Vec<usize> = (0..6).map(|_| rng.below(3)).collect();
        let losses = per_view_losses(&[z1.clone(), z2.clone()], &labels).unwrap();
        let l1 = softmax_cross_entropy(&z1, &labels).unwrap().0;
        let l2 = softmax_cross_entropy(&z2, &labels).unwrap().0;
        assert_eq!(losses, vec![l1, l2]);
    }

    #[test]
    fn per_view_losses_uniform_logits() {
        let z = Matrix::<f64>::zeros(5, 4);
        let losses = per_view_losses(&[z.clone(), z], &[0, 1, 2, 3, 0]).unwrap();
        for l in losses {
            assert_close(l, 4.0f64.ln(), 1e-12);
        }
    }

    #[test]
    fn sort_losses_ascending_with_stable_ties() {
        let lv = sort_losses(&[0.5, 0.2, 0.9]).unwrap();
        assert_eq!(lv.perm, vec![1, 0, 2]);

        let equal = sort_losses(&[0.3, 0.3, 0.3]).unwrap();
        assert_eq!(equal.perm, vec![0, 1, 2]);

        let sorted = sort_losses(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(sorted.perm, vec![0, 1, 2]);

        assert!(sort_losses(&[0.1, f64::NAN]).is_err());
    }

    #[test]
    fn solve_alpha_matches_simplex_grid_search() {
        // L=[1,4], gamma=2, s=2: closed form gives [0.8, 0.2]; a 1e-3 grid
        // search over the 2-simplex must agree.
        let w = solve_alpha(&[1.0, 4.0], 2.0, 2).unwrap();
        assert_close(w.alpha[0], 0.8, 1e-12);
        assert_close(w.alpha[1], 0.2, 1e-12);

        let mut best = f64::INFINITY;
        let mut best_a = 0.0;
        for k in 0..=1000 {
            let a = k as f64 / 1000.0;
            let obj = a * a * 1.0 + (1.0 - a) * (1.0 - a) * 4.0;
            if obj < best {
                best = obj;
                best_a = a;
            }
        }
        assert_close(best_a, 0.8, 1e-3);
        assert!(fused_objective(&[1.0, 4.0], &w) <= best + 1e-9);
    }

    #[test]
    fn solve_alpha_equal_losses_is_uniform() {
        let w = solve_alpha(&[0.7, 0.7, 0.7], 3.0, 3).unwrap();
        for a in &w.alpha {
            assert_close(*a, 1.0 / 3.0, 1e-12);
        }
    }

    #[test]
    fn solve_alpha_s1_is_onehot_argmin() {
        let w = solve_alpha(&[0.5, 0.2, 0.9], 2.0, 1).unwrap();
        assert_eq!(w.alpha, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn solve_alpha_rejects_bad_config() {
        assert!(solve_alpha(&[1.0, 2.0], 1.0, 1).is_err());
        assert!(solve_alpha(&[1.0, 2.0], 0.5, 1).is_err());
        assert!(solve_alpha(&[1.0, 2.0], 2.0, 0).is_err());
        assert!(solve_alpha(&[1.0, 2.0], 2.0, 3).is_err());
    }

    #[test]
    fn solve_alpha_constraints_hold_exactly() {
        let mut rng = Rng::new(8);
        for _ in 0..500 {
            let m = 2 + rng.below(5);
            let s = 1 + rng.below(m);
            let gamma = rng.uniform_in(1.1, 12.0);
            let losses: Vec<f64> = (0..m).map(|_| rng.uniform_in(0.0, 3.0)).collect();
            let w = solve_alpha(&losses, gamma, s).unwrap();
            assert_eq!(w.alpha.iter().sum::<f64>(), 1.0, "sum not exactly 1");
            assert!(w.alpha.iter().all(|&a| a >= 0.0));
            assert_eq!(w.support_size(), s.min(m));
        }
    }

    #[test]
    fn solve_alpha_constraints_hold_under_extreme_inputs() {
        // sharp exponents (gamma near 1) with wide loss ratios drive selected
        // weights into f64 underflow territory; the support must stay exact
        let mut rng = Rng::new(0xDEAD);
        for case in 0..5000 {
            let m = 2 + rng.below(7);
            let s = 1 + rng.below(m);
            let gamma = match rng.below(4) {
                0 => 1.0 + rng.uniform_in(1e-4, 0.01),
                1 => rng.uniform_in(1.1, 3.0),
                2 => rng.uniform_in(3.0, 50.0),
                _ => rng.uniform_in(50.0, 5000.0),
            };
            let losses: Vec<f64> = (0..m)
                .map(|_| match rng.below(4) {
                    0 => 0.0,
                    1 => rng.uniform_in(0.0, 1e-12),
                    2 => rng.uniform_in(1e-12, 1e-3),
                    _ => rng.uniform_in(1e-3, 100.0),
                })
                .collect();
            let w = solve_alpha(&losses, gamma, s).unwrap();
            assert_eq!(
                w.alpha.iter().sum::<f64>(),
                1.0,
                "case {case}: {losses:?} gamma {gamma}"
            );
            assert!(w.alpha.iter().all(|&a| a >= 0.0 && a.is_finite()));
            assert_eq!(w.support_size(), s, "case {case}");
        }
    }

    #[test]
    fn solve_alpha_zero_loss_takes_all_weight() {
        let w = solve_alpha(&[0.0, 1.0], 2.0, 2).unwrap();
        assert!(w.alpha[0] > 0.999_999);
    }

    #[test]
    fn gamma_near_one_concentrates_on_argmin() {
        let w = solve_alpha(&[0.55, 0.5, 0.9], 1.001, 3).unwrap();
        assert!(w.alpha[1] >= 0.999, "{:?}", w.alpha);
    }

    #[test]
    fn gamma_large_is_uniform_over_support() {
        let w = solve_alpha(&[0.2, 0.5, 0.9, 1.4], 1000.0, 3).unwrap();
        for &v in &[0, 1, 2] {
            assert!((w.alpha[v] - 1.0 / 3.0).abs() < 1e-2, "{:?}", w.alpha);
        }
        assert_eq!(w.alpha[3], 0.0);
    }

    #[test]
    fn solve_alpha_is_permutation_equivariant() {
        let mut rng = Rng::new(21);
        for _ in 0..100 {
            let losses: Vec<f64> = (0..4).map(|_| rng.uniform_in(0.01, 2.0)).collect();
            let gamma = rng.uniform_in(1.2, 8.0);
            let s = 1 + rng.below(4);
            let base = solve_alpha(&losses, gamma, s).unwrap();

            let mut perm: Vec<usize> = (0..4).collect();
            rng.shuffle(&mut perm);
            let permuted_losses: Vec<f64> = perm.iter().map(|&i| losses[i]).collect();
            let permuted = solve_alpha(&permuted_losses, gamma, s).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                assert_close(permuted.alpha[k], base.alpha[i], 1e-12);
            }
        }
    }

    #[test]
    fn positive_rescaling_leaves_alpha_unchanged() {
        let mut rng = Rng::new(22);
        for _ in 0..100 {
            let losses: Vec<f64> = (0..5).map(|_| rng.uniform_in(0.01, 2.0)).collect();
            let c = rng.uniform_in(0.1, 50.0);
            let scaled: Vec<f64> = losses.iter().map(|l| l * c).collect();
            let a = solve_alpha(&losses, 3.0, 3).unwrap();
            let b = solve_alpha(&scaled, 3.0, 3).unwrap();
            for (x, y) in a.alpha.iter().zip(&b.alpha) {
                assert_close(*x, *y, 1e-9);
            }
        }
    }

    #[test]
    fn support_is_the_s_smallest_losses_by_brute_force() {
        // enumerate every support, apply the closed form on it, and check the
        // solver picked the best one
        let mut rng = Rng::new(23);
        for _ in 0..200 {
            let m = 2 + rng.below(3); // 2..=4
            let s = 1 + rng.below(m);
            let gamma = rng.uniform_in(1.3, 6.0);
            let losses: Vec<f64> = (0..m).map(|_| rng.uniform_in(0.01, 2.0)).collect();
            let solved = solve_alpha(&losses, gamma, s).unwrap();
            let solved_obj = fused_objective(&losses, &solved);

            let supports = combinations(m, s);
            for support in supports {
                let sub: Vec<f64> = support.iter().map(|&v| losses[v]).collect();
                let w_sub = solve_alpha(&sub, gamma, s).unwrap();
                let mut alpha = vec![0.0; m];
                for (k, &v) in support.iter().enumerate() {
                    alpha[v] = w_sub.alpha[k];
                }
                let obj = fused_objective(&losses, &ViewWeights { alpha, gamma, s });
                assert!(
                    solved_obj <= obj + 1e-9,
                    "support {support:?} beat the solver: {obj} < {solved_obj}"
                );
            }
        }
    }

    fn combinations(m: usize, s: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut current = Vec::new();
        fn rec(
            start: usize,
            m: usize,
            s: usize,
            current: &mut Vec<usize>,
            out: &mut Vec<Vec<usize>>,
        ) {
            if current.len() == s {
                out.push(current.clone());
                return;
            }
            for v in start..m {
                current.push(v);
                rec(v + 1, m, s, current, out);
                current.pop();
            }
        }
        rec(0, m, s, &mut current, &mut out);
        out
    }

    #[test]
    fn fused_objective_hand_cases() {
        let w = ViewWeights {
            alpha: vec![0.8, 0.2],
            gamma: 2.0,
            s: 2,
        };
        assert_close(fused_objective(&[1.0, 4.0], &w), 0.8, 1e-12);

        // closed-form identity: optimum equals 1 / sum L^(1/(1-gamma))
        let losses = [1.0f64, 4.0];
        let exponent = 1.0 / (1.0 - 2.0);
        let expected = 1.0 / losses.iter().map(|l| l.powf(exponent)).sum::<f64>();
        let solved = solve_alpha(&losses, 2.0, 2).unwrap();
        assert_close(fused_objective(&losses, &solved), expected, 1e-12);

        // s=1: objective is the min loss
        let s1 = solve_alpha(&[0.7, 0.3, 1.1], 2.0, 1).unwrap();
        assert_close(fused_objective(&[0.7, 0.3, 1.1], &s1), 0.3, 1e-12);

        // equal losses c over s uniform views: c * s^(1-gamma)
        let c = 0.9;
        let gamma = 3.0;
        let eq = solve_alpha(&[c, c, c, 5.0], gamma, 3).unwrap();
        assert_close(
            fused_objective(&[c, c, c, 5.0], &eq),
            c * (3.0f64).powf(1.0 - gamma),
            1e-12,
        );
    }

    #[test]
    fn predict_follows_weighting() {
        // alpha = onehot(v): prediction equals view v's argmax
        let z1 = Matrix::from_rows(&[vec![5.0, 0.0]]).unwrap();
        let z2 = Matrix::from_rows(&[vec![0.0, 5.0]]).unwrap();
        let onehot = ViewWeights {
            alpha: vec![0.0, 1.0],
            gamma: 2.0,
            s: 1,
        };
        let (labels, _) =
            predict(&[z1.clone(), z2.clone()], &onehot, PredictWeighting::Alpha).unwrap();
        assert_eq!(labels, vec![1]);

        // identical views under uniform weights behave like a single view
        let uniform = ViewWeights::uniform(2, 2.0, 2);
        let (labels, scores) =
            predict(&[z1.clone(), z1.clone()], &uniform, PredictWeighting::Alpha).unwrap();
        assert_eq!(labels, vec![0]);
        let single = softmax_rows(&z1);
        for (a, b) in scores.as_slice().iter().zip(single.as_slice()) {
            assert_close(*a, *b, 1e-12);
        }
    }

    #[test]
    fn predict_mixture_matches_hand_mixed_probabilities() {
        // two disagreeing views, alpha = [0.9, 0.1]
        let z1 = Matrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let z2 = Matrix::from_rows(&[vec![0.0, 3.0]]).unwrap();
        let w = ViewWeights {
            alpha: vec![0.9, 0.1],
            gamma: 2.0,
            s: 2,
        };
        let (labels, scores) =
            predict(&[z1.clone(), z2.clone()], &w, PredictWeighting::Alpha).unwrap();
        let p1 = softmax_rows(&z1);
        let p2 = softmax_rows(&z2);
        let hand0 = 0.9 * p1.get(0, 0) + 0.1 * p2.get(0, 0);
        let hand1 = 0.9 * p1.get(0, 1) + 0.1 * p2.get(0, 1);
        assert_close(scores.get(0, 0), hand0, 1e-12);
        assert_close(scores.get(0, 1), hand1, 1e-12);
        assert_eq!(labels, vec![if hand0 >= hand1 { 0 } else { 1 }]);
        assert_eq!(labels, vec![0], "view 1's margin dominates at 0.9 weight");
    }

    #[test]
    fn predict_breaks_ties_toward_lowest_class() {
        let z = Matrix::<f64>::zeros(1, 3);
        let w = ViewWeights::uniform(1, 2.0, 1);
        let (labels, _) = predict(&[z], &w, PredictWeighting::Alpha).unwrap();
        assert_eq!(labels, vec![0]);
    }

    #[test]
    fn alpha_gamma_weighting_renormalizes() {
        let z1 = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let z2 = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let w = ViewWeights {
            alpha: vec![0.8, 0.2],
            gamma: 2.0,
            s: 2,
        };
        let (_, scores) =
            predict(&[z1.clone(), z2.clone()], &w, PredictWeighting::AlphaGamma).unwrap();
        let c0 = 0.64 / 0.68;
        let c1 = 0.04 / 0.68;
        let p1 = softmax_rows(&z1);
        let p2 = softmax_rows(&z2);
        assert_close(
            scores.get(0, 0),
            c0 * p1.get(0, 0) + c1 * p2.get(0, 0),
            1e-12,
        );
    }
}
