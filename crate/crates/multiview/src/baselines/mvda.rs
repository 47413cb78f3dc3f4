//! Multi-view discriminant projection: view-specific linear transforms into
//! a common space maximizing between-class over within-class scatter.
//!
//! Solved in the stacked joint space: samples of view v embed into block v of
//! a `sum(d_v)`-dimensional vector, the scatter matrices are built over all
//! (view, sample) points, and the ratio-trace relaxation reduces to a
//! generalized symmetric eigenproblem handled by Cholesky whitening plus a
//! Jacobi eigendecomposition.

use super::linalg::{cholesky, solve_lower, solve_lower_transpose, sym_eig};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Debug)]
pub struct MvdaSolution {
    /// One d_v x r transform per view (blocks of the joint eigenvectors).
    pub transforms: Vec<Matrix<f64>>,
    /// Trace ratio Tr(W^T S_B W) / Tr(W^T S_W W) of the returned projection.
    pub objective: f64,
}

/// Within- and between-class scatter in the stacked joint space.
///
/// Every (view, sample) pair is one point: block v carries the sample's view
/// v features, other blocks are zero. Class means run over all views.
pub fn scatter_matrices(
    views: &[Matrix<f64>],
    labels: &[usize],
    num_classes: usize,
) -> Result<(Matrix<f64>, Matrix<f64>)> {
    let m = views.len();
    if m == 0 {
        return Err(Error::Data("mvda needs at least one view".into()));
    }
    let n = labels.len();
    for x in views {
        if x.rows() != n {
            return Err(Error::shape("mvda rows", n, x.shape()));
        }
    }
    let dims: Vec<usize> = views.iter().map(|x| x.cols()).collect();
    let offsets: Vec<usize> = dims
        .iter()
        .scan(0, |acc, &d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect();
    let total: usize = dims.iter().sum();

    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(Error::Data(format!("label {y} out of range")));
        }
        counts[y] += 1;
    }
    if counts.iter().any(|&c| c < 2) {
        return Err(Error::Data("every class needs at least two samples".into()));
    }

    // class means in the joint space: block v of mean_k is the view-v class
    // mean divided by M (each sample contributes M embedded points)
    let mut class_means = vec![vec![0.0f64; total]; num_classes];
    for (v, x) in views.iter().enumerate() {
        for (i, &y) in labels.iter().enumerate() {
            for (j, &val) in x.row(i).iter().enumerate() {
                class_means[y][offsets[v] + j] += val;
            }
        }
    }
    for (k, mean) in class_means.iter_mut().enumerate() {
        let n_k = (m * counts[k]) as f64;
        for entry in mean.iter_mut() {
            *entry /= n_k;
        }
    }
    let big_n = (m * n) as f64;
    let mut global_mean = vec![0.0f64; total];
    for (k, mean) in class_means.iter().enumerate() {
        let n_k = (m * counts[k]) as f64;
        for (g, &v) in global_mean.iter_mut().zip(mean) {
            *g += n_k * v;
        }
    }
    for g in &mut global_mean {
        *g /= big_n;
    }

    // S_W = sum_k [ blockdiag(sum x x^T) - n_k mean_k mean_k^T ]
    let mut s_w = Matrix::zeros(total, total);
    for (v, x) in views.iter().enumerate() {
        for (i, _) in labels.iter().enumerate() {
            let row = x.row(i);
            for (a, &xa) in row.iter().enumerate() {
                for (b, &xb) in row.iter().enumerate() {
                    *s_w.at_mut(offsets[v] + a, offsets[v] + b) += xa * xb;
                }
            }
        }
    }
    for (k, mean) in class_means.iter().enumerate() {
        let n_k = (m * counts[k]) as f64;
        for a in 0..total {
            for b in 0..total {
                *s_w.at_mut(a, b) -= n_k * mean[a] * mean[b];
            }
        }
    }

    let mut s_b = Matrix::zeros(total, total);
    for (k, mean) in class_means.iter().enumerate() {
        let n_k = (m * counts[k]) as f64;
        for a in 0..total {
            for b in 0..total {
                *s_b.at_mut(a, b) += n_k * (mean[a] - global_mean[a]) * (mean[b] - global_mean[b]);
            }
        }
    }
    Ok((s_w, s_b))
}

/// Trace ratio of a joint-space projection `w` (total x r).
pub fn trace_ratio(s_b: &Matrix<f64>, s_w: &Matrix<f64>, w: &Matrix<f64>) -> Result<f64> {
    let num = w.matmul_tn(&s_b.matmul(w)?)?;
    let den = w.matmul_tn(&s_w.matmul(w)?)?;
    let tr = |m: &Matrix<f64>| (0..m.rows()).map(|i| m.get(i, i)).sum::<f64>();
    Ok(tr(&num) / tr(&den))
}

pub const MVDA_RIDGE_SCALE: f64 = 1e-6;

/// Ratio-trace relaxation: top-r eigenvectors of `S_B u = lambda S_W u` with
/// S_W ridge-regularized by `1e-6 * trace/dim`.
pub fn mvda_fit(
    views: &[Matrix<f64>],
    labels: &[usize],
    num_classes: usize,
    r: usize,
) -> Result<MvdaSolution> {
    if num_classes < 2 {
        return Err(Error::Data("mvda needs at least two classes".into()));
    }
    let (mut s_w, s_b) = scatter_matrices(views, labels, num_classes)?;
    let total = s_w.rows();
    if r == 0 || r > total {
        return Err(Error::Config(format!("r must be in [1, {total}], got {r}")));
    }

    let trace: f64 = (0..total).map(|i| s_w.get(i, i)).sum();
    let ridge = MVDA_RIDGE_SCALE * trace / total as f64;
    for i in 0..total {
        *s_w.at_mut(i, i) += ridge;
    }

    let l = cholesky(&s_w).map_err(|_| {
        Error::Numeric("within-class scatter is singular even after regularization".into())
    })?;
    // A = L^-1 S_B L^-T, symmetric
    let z = solve_lower(&l, &s_b)?;
    let a = solve_lower(&l, &z.transpose())?;
    let (_, vecs) = sym_eig(&a)?;

    let mut q = Matrix::zeros(total, r);
    for i in 0..total {
        for j in 0..r {
            q.set(i, j, vecs.get(i, j));
        }
    }
    let w = solve_lower_transpose(&l, &q)?;
    let objective = trace_ratio(&s_b, &s_w, &w)?;

    let dims: Vec<usize> = views.iter().map(|x| x.cols()).collect();
    let mut transforms = Vec::with_capacity(dims.len());
    let mut offset = 0;
    for &d in &dims {
        let mut block = Matrix::zeros(d, r);
        for i in 0..d {
            for j in 0..r {
                block.set(i, j, w.get(offset + i, j));
            }
        }
        transforms.push(block);
        offset += d;
    }

    Ok(MvdaSolution {
        transforms,
        objective,
    })
}

/// Stacks per-view transforms back into a joint-space projection.
pub fn stack_transforms(transforms: &[Matrix<f64>]) -> Matrix<f64> {
    let r = transforms[0].cols();
    let total: usize = transforms.iter().map(|t| t.rows()).sum();
    let mut w = Matrix::zeros(total, r);
    let mut offset = 0;
    for t in transforms {
        for i in 0..t.rows() {
            for j in 0..r {
                w.set(offset + i, j, t.get(i, j));
            }
        }
        offset += t.rows();
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    /// Two classes separated along axis 0 of every view, noise elsewhere.
    fn axis_separated_scaled(
        n_per_class: usize,
        dims: &[usize],
        gap: f64,
        noise: f64,
        seed: u64,
    ) -> (Vec<Matrix<f64>>, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let n = 2 * n_per_class;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let views = dims
            .iter()
            .map(|&d| {
                let mut x = Matrix::zeros(n, d);
                for (i, &y) in labels.iter().enumerate() {
                    x.set(i, 0, if y == 0 { -gap } else { gap } + rng.normal() * noise);
                    for j in 1..d {
                        x.set(i, j, rng.normal());
                    }
                }
                x
            })
            .collect();
        (views, labels)
    }

    fn axis_separated(
        n_per_class: usize,
        dims: &[usize],
        seed: u64,
    ) -> (Vec<Matrix<f64>>, Vec<usize>) {
        axis_separated_scaled(n_per_class, dims, 3.0, 0.5, seed)
    }

    #[test]
    fn leading_direction_concentrates_on_the_separating_axis() {
        let (views, labels) = axis_separated(60, &[3, 4], 71);
        let sol = mvda_fit(&views, &labels, 2, 1).unwrap();
        let w = stack_transforms(&sol.transforms);
        let axis_energy: f64 = w.get(0, 0).powi(2) + w.get(3, 0).powi(2);
        let total: f64 = (0..7).map(|i| w.get(i, 0).powi(2)).sum();
        assert!(axis_energy / total > 0.8, "{}", axis_energy / total);
        assert!(sol.objective > 0.0);
    }

    #[test]
    fn equal_class_means_give_near_zero_objective() {
        let mut rng = Rng::new(72);
        let n = 80;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let views: Vec<Matrix<f64>> = (0..2).map(|_| rng.matrix_normal(n, 3, 1.0)).collect();
        let sol = mvda_fit(&views, &labels, 2, 1).unwrap();
        // no real signal: the best ratio on pure noise stays small
        assert!(sol.objective < 0.2, "{}", sol.objective);
    }

    #[test]
    fn beats_random_projections() {
        let mut rng = Rng::new(73);
        for instance in 0..20 {
            let (views, labels) = axis_separated(30, &[2, 3], 100 + instance);
            let (mut s_w, s_b) = scatter_matrices(&views, &labels, 2).unwrap();
            let total = s_w.rows();
            let trace: f64 = (0..total).map(|i| s_w.get(i, i)).sum();
            for i in 0..total {
                *s_w.at_mut(i, i) += MVDA_RIDGE_SCALE * trace / total as f64;
            }
            let sol = mvda_fit(&views, &labels, 2, 1).unwrap();
            for _ in 0..100 {
                let w: Matrix<f64> = rng.matrix_normal(total, 1, 1.0);
                let ratio = trace_ratio(&s_b, &s_w, &w).unwrap();
                assert!(
                    sol.objective >= ratio - 1e-9,
                    "random projection beat the eigensolution: {ratio} > {}",
                    sol.objective
                );
            }
        }
    }

    #[test]
    fn objective_invariant_under_orthogonal_rotation_of_one_view() {
        let (views, labels) = axis_separated(40, &[2, 2], 74);
        let base = mvda_fit(&views, &labels, 2, 1).unwrap();

        let theta: f64 = 0.73;
        let rot = Matrix::from_rows(&[
            vec![theta.cos(), -theta.sin()],
            vec![theta.sin(), theta.cos()],
        ])
        .unwrap();
        let mut rotated = views.clone();
        rotated[1] = views[1].matmul(&rot).unwrap();
        let after = mvda_fit(&rotated, &labels, 2, 1).unwrap();
        assert!(
            (base.objective - after.objective).abs() < 1e-8,
            "{} vs {}",
            base.objective,
            after.objective
        );
    }

    #[test]
    fn matches_rotation_scale_grid_on_2d_toy() {
        // d_v = 2, M = 2, r = 1: grid over per-view rotation angles and the
        // relative block scale, 1-degree steps, then refined twice around the
        // coarse optimum
        let (views, labels) = axis_separated_scaled(25, &[2, 2], 1.5, 1.0, 75);
        let (mut s_w, s_b) = scatter_matrices(&views, &labels, 2).unwrap();
        let trace: f64 = (0..4).map(|i| s_w.get(i, i)).sum();
        for i in 0..4 {
            *s_w.at_mut(i, i) += MVDA_RIDGE_SCALE * trace / 4.0;
        }
        let sol = mvda_fit(&views, &labels, 2, 1).unwrap();

        let deg = std::f64::consts::PI / 180.0;
        let eval = |t1: f64, t2: f64, psi: f64| {
            let mut w = Matrix::zeros(4, 1);
            let (a, b) = ((psi * deg).cos(), (psi * deg).sin());
            w.set(0, 0, a * (t1 * deg).cos());
            w.set(1, 0, a * (t1 * deg).sin());
            w.set(2, 0, b * (t2 * deg).cos());
            w.set(3, 0, b * (t2 * deg).sin());
            trace_ratio(&s_b, &s_w, &w).unwrap()
        };

        let mut best = f64::NEG_INFINITY;
        let mut at = (0.0, 0.0, 45.0);
        for t1 in 0..180 {
            for t2 in 0..360 {
                for psi in 1..90 {
                    let ratio = eval(t1 as f64, t2 as f64, psi as f64);
                    if ratio > best {
                        best = ratio;
                        at = (t1 as f64, t2 as f64, psi as f64);
                    }
                }
            }
        }
        // the relaxation can never lose to the coarse grid
        assert!(sol.objective >= best - 1e-9);

        // refine around the coarse optimum down to 0.01 degrees
        for &step in &[0.1, 0.01] {
            let center = at;
            for i in -12..=12 {
                for j in -12..=12 {
                    for k in -12..=12 {
                        let cand = (
                            center.0 + i as f64 * step,
                            center.1 + j as f64 * step,
                            (center.2 + k as f64 * step).clamp(0.01, 89.99),
                        );
                        let ratio = eval(cand.0, cand.1, cand.2);
                        if ratio > best {
                            best = ratio;
                            at = cand;
                        }
                    }
                }
            }
        }
        assert!(
            (sol.objective - best).abs() < 1e-3,
            "eigensolution {} vs refined grid {best}",
            sol.objective
        );
    }
}
