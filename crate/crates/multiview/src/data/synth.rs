//! Synthetic multi-view generators for desk-scale verification.
//!
//! The class-mean generator draws a latent class code per sample: informative
//! views place class means on orthogonal axes at a configurable pairwise
//! distance (in units of the unit noise sigma), add standard Gaussian noise,
//! and rotate the result through a random orthonormal map; noise views are
//! pure standard Gaussians carrying no label information.
//!
//! The product generator's label depends only on the product of two views'
//! latent coordinates, so each view alone is uninformative and no linear
//! model on the concatenation can separate the classes.

use super::{MultiViewDataset, ViewData};
use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::Rng;

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub num_views: usize,
    pub num_classes: usize,
    pub num_samples: usize,
    pub view_dims: Vec<usize>,
    /// Views that carry no label signal.
    pub noise_views: Vec<usize>,
    /// Pairwise class-mean distance in noise sigmas.
    pub separation: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(num_views: usize, num_classes: usize, num_samples: usize, view_dim: usize) -> Self {
        SynthSpec {
            num_views,
            num_classes,
            num_samples,
            view_dims: vec![view_dim; num_views],
            noise_views: Vec::new(),
            separation: 4.0,
            seed: 0,
        }
    }
}

/// Random orthonormal matrix: Gram-Schmidt over a Gaussian draw. Orthonormal
/// maps preserve the class-mean distances exactly, which keeps the separation
/// knob meaningful in the observed space.
pub fn random_rotation(dim: usize, rng: &mut Rng) -> Matrix<f64> {
    loop {
        let raw: Matrix<f64> = rng.matrix_normal(dim, dim, 1.0);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
        let mut ok = true;
        for i in 0..dim {
            let mut v: Vec<f64> = raw.row(i).to_vec();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                for (x, c) in v.iter_mut().zip(b) {
                    *x -= dot * c;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for x in &mut v {
                *x /= norm;
            }
            basis.push(v);
        }
        if ok {
            let mut out = Matrix::zeros(dim, dim);
            for (i, b) in basis.iter().enumerate() {
                out.row_mut(i).copy_from_slice(b);
            }
            return out;
        }
    }
}

pub fn generate(spec: &SynthSpec) -> Result<MultiViewDataset> {
    if spec.num_views < 2 || spec.num_classes < 2 {
        return Err(Error::Config(
            "synthetic data needs M >= 2 and C >= 2".into(),
        ));
    }
    if spec.view_dims.len() != spec.num_views {
        return Err(Error::Config("one view dim per view".into()));
    }
    for (v, &dim) in spec.view_dims.iter().enumerate() {
        if !spec.noise_views.contains(&v) && dim < spec.num_classes {
            return Err(Error::Config(format!(
                "informative view {v} needs dim >= {} (one mean axis per class), got {dim}",
                spec.num_classes
            )));
        }
    }

    let labels: Vec<usize> = (0..spec.num_samples)
        .map(|i| i % spec.num_classes)
        .collect();
    let axis_scale = spec.separation / std::f64::consts::SQRT_2;

    let mut views = Vec::with_capacity(spec.num_views);
    for (v, &dim) in spec.view_dims.iter().enumerate() {
        let mut rng = Rng::stream(spec.seed, 1000 + v as u64);
        let mut x = Matrix::zeros(spec.num_samples, dim);
        if spec.noise_views.contains(&v) {
            for val in x.as_mut_slice() {
                *val = rng.normal();
            }
        } else {
            let rotation = random_rotation(dim, &mut rng);
            for (i, &y) in labels.iter().enumerate() {
                let mut latent = vec![0.0; dim];
                latent[y] = axis_scale;
                for l in &mut latent {
                    *l += rng.normal();
                }
                // x_i = latent * R
                for b in 0..dim {
                    let mut acc = 0.0;
                    for (a, &l) in latent.iter().enumerate() {
                        acc += l * rotation.get(a, b);
                    }
                    x.set(i, b, acc);
                }
            }
        }
        views.push(ViewData {
            name: format!("view{v}"),
            x,
        });
    }

    Ok(MultiViewDataset {
        name: "synthetic".into(),
        num_classes: spec.num_classes,
        views,
        labels,
        split: None,
    })
}

/// Two-view, two-class dataset whose label is the sign of the product of the
/// views' latent coordinates. `margin` keeps the latents away from zero so
/// the classes are cleanly separable by a multiplicative interaction.
pub fn generate_product(
    num_samples: usize,
    view_dim: usize,
    margin: f64,
    seed: u64,
) -> Result<MultiViewDataset> {
    if view_dim < 1 {
        return Err(Error::Config("product views need dim >= 1".into()));
    }
    if !(0.0..1.0).contains(&margin) {
        return Err(Error::Config("margin must be in [0, 1)".into()));
    }
    let mut rng = Rng::stream(seed, 7);
    let mut labels = Vec::with_capacity(num_samples);
    let mut latents = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        let u = rng.uniform_in(margin, 1.0) * if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        let w = rng.uniform_in(margin, 1.0) * if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        labels.push(usize::from(u * w > 0.0));
        latents.push((u, w));
    }

    let mut views = Vec::with_capacity(2);
    for v in 0..2 {
        let mut vrng = Rng::stream(seed, 2000 + v as u64);
        let rotation = random_rotation(view_dim, &mut vrng);
        let mut x = Matrix::zeros(num_samples, view_dim);
        for (i, &(u, w)) in latents.iter().enumerate() {
            let mut raw = vec![0.0; view_dim];
            raw[0] = if v == 0 { u } else { w };
            for r in raw.iter_mut().skip(1) {
                *r = vrng.normal();
            }
            for b in 0..view_dim {
                let mut acc = 0.0;
                for (a, &l) in raw.iter().enumerate() {
                    acc += l * rotation.get(a, b);
                }
                x.set(i, b, acc);
            }
        }
        views.push(ViewData {
            name: format!("latent{v}"),
            x,
        });
    }

    Ok(MultiViewDataset {
        name: "product".into(),
        num_classes: 2,
        views,
        labels,
        split: None,
    })
}
