//! The multi-view network: per-view feature extractors, an undirected set of
//! pairwise multi-dimension bilinear interactions, and a shared prediction
//! head that scores each view.
//!
//! For view `v` the head consumes `concat(x_f^v, interactions of v with the
//! other M-1 views)`, so its input width is `d + (M-1) * d_B`.

pub mod checkpoint;

use crate::error::{Error, Result};
use crate::numerics::matrix::{Matrix, Scalar};
use crate::numerics::ops::{self, BnState};
use crate::numerics::tape::{NodeId, OpTape, ParamId, ParamSet};
use crate::numerics::Rng;
use serde::{Deserialize, Serialize};

/// Which pieces of the architecture are active. The reduced variants exist
/// for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// View networks + bilinear interactions + shared head.
    #[default]
    Full,
    /// View networks + shared head, no cross-view interaction.
    NoBilinear,
    /// Shared head applied to the raw views (requires equal view widths).
    HeadOnly,
}

/// Architecture header: everything needed to rebuild parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub num_views: usize,
    pub num_classes: usize,
    pub view_dims: Vec<usize>,
    /// View-net widths before the final embedding width `d`.
    pub fv_hidden: Vec<usize>,
    /// Embedding width shared by all view nets.
    pub d: usize,
    /// Output width of each pairwise bilinear interaction.
    pub d_b: usize,
    pub head_hidden: Vec<usize>,
    /// Batch-normalize bilinear outputs before concatenation.
    pub bilinear_batchnorm: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_views == 0 {
            return Err(Error::Config("model needs at least one view".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("model needs at least two classes".into()));
        }
        if self.view_dims.len() != self.num_views {
            return Err(Error::Config(format!(
                "{} view dims for {} views",
                self.view_dims.len(),
                self.num_views
            )));
        }
        let widths = self
            .view_dims
            .iter()
            .chain(self.fv_hidden.iter())
            .chain(self.head_hidden.iter())
            .chain([&self.d]);
        for &w in widths {
            if w == 0 {
                return Err(Error::Config("all layer widths must be positive".into()));
            }
        }
        if self.arch == Arch::Full && self.d_b == 0 {
            return Err(Error::Config("d_B must be positive".into()));
        }
        if self.arch == Arch::HeadOnly && self.view_dims.iter().any(|&d| d != self.view_dims[0]) {
            return Err(Error::Config(
                "head-only architecture requires equal view widths".into(),
            ));
        }
        Ok(())
    }

    pub fn num_pairs(&self) -> usize {
        match self.arch {
            Arch::Full => self.num_views * (self.num_views.saturating_sub(1)) / 2,
            _ => 0,
        }
    }

    /// Width of the concatenated head input for any single view.
    pub fn head_input_width(&self) -> usize {
        match self.arch {
            Arch::Full => self.d + (self.num_views - 1) * self.d_b,
            Arch::NoBilinear => self.d,
            Arch::HeadOnly => self.view_dims[0],
        }
    }
}

#[derive(Clone, Debug)]
struct BnLayer {
    gamma: ParamId,
    beta: ParamId,
    state: usize,
}

#[derive(Clone, Debug)]
struct DenseLayer {
    w: ParamId,
    b: ParamId,
    bn: Option<BnLayer>,
}

/// One view's feature extractor: a stack of affine -> batchnorm -> ReLU
/// layers ending at width `d`. Parameters are never shared across views.
#[derive(Clone, Debug)]
struct ViewNet {
    layers: Vec<DenseLayer>,
}

/// Parameters of one undirected view pair: `d_B` metric matrices plus a
/// bias vector. The lower-indexed view is always the left operand, so both
/// views read the same storage.
#[derive(Clone, Debug)]
struct PairBilinear {
    mats: Vec<ParamId>,
    bias: ParamId,
    bn: Option<BnLayer>,
}

/// The shared head: hidden affine -> batchnorm -> ReLU layers and a final
/// affine producing raw logits. One parameter set serves all views.
#[derive(Clone, Debug)]
struct SharedHead {
    hidden: Vec<DenseLayer>,
    out: DenseLayer,
}

pub struct MvNnBiIn<T: Scalar> {
    pub spec: ModelSpec,
    pub params: ParamSet<T>,
    pub bn_states: Vec<BnState<T>>,
    view_nets: Vec<ViewNet>,
    pairs: Vec<PairBilinear>,
    head: SharedHead,
}

impl<T: Scalar> Clone for MvNnBiIn<T> {
    fn clone(&self) -> Self {
        MvNnBiIn {
            spec: self.spec.clone(),
            params: self.params.clone(),
            bn_states: self.bn_states.clone(),
            view_nets: self.view_nets.clone(),
            pairs: self.pairs.clone(),
            head: self.head.clone(),
        }
    }
}

/// Result of a recorded forward pass: the tape plus one logits node per view.
pub struct TrainForward<T: Scalar> {
    pub tape: OpTape<T>,
    pub logits: Vec<NodeId>,
}

impl<T: Scalar> TrainForward<T> {
    pub fn logit_values(&self) -> Vec<Matrix<T>> {
        self.logits
            .iter()
            .map(|&id| self.tape.value(id).clone())
            .collect()
    }
}

fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

struct Builder<'a, T: Scalar> {
    params: ParamSet<T>,
    bn_states: Vec<BnState<T>>,
    rng: &'a mut Rng,
}

impl<'a, T: Scalar> Builder<'a, T> {
    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize, bn: bool) -> DenseLayer {
        let limit = glorot_limit(fan_in, fan_out);
        let w = self.params.add(
            format!("{name}.w"),
            self.rng.matrix_uniform(fan_out, fan_in, -limit, limit),
        );
        let b = self
            .params
            .add(format!("{name}.b"), Matrix::zeros(1, fan_out));
        let bn = bn.then(|| self.bn(name, fan_out));
        DenseLayer { w, b, bn }
    }

    fn bn(&mut self, name: &str, width: usize) -> BnLayer {
        let gamma = self.params.add(
            format!("{name}.bn.gamma"),
            Matrix::filled(1, width, T::one()),
        );
        let beta = self
            .params
            .add(format!("{name}.bn.beta"), Matrix::zeros(1, width));
        self.bn_states.push(BnState::new(width));
        BnLayer {
            gamma,
            beta,
            state: self.bn_states.len() - 1,
        }
    }
}

/// Index of pair `(v, w)` (any order) in the lexicographic pair list.
fn pair_index(m: usize, v: usize, w: usize) -> usize {
    let (lo, hi) = if v < w { (v, w) } else { (w, v) };
    lo * m - lo * (lo + 1) / 2 + (hi - lo - 1)
}

impl<T: Scalar> MvNnBiIn<T> {
    /// Fresh model with Glorot-uniform affine and bilinear weights
    /// (`limit = sqrt(6 / (fan_in + fan_out))`, with `fan_in = d^2` and
    /// `fan_out = 1` per metric matrix), zero biases, and batch-norm scale 1
    /// shift 0. Deterministic in the seed.
    pub fn init(spec: &ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            params: ParamSet::new(),
            bn_states: Vec::new(),
            rng,
        };

        let mut view_nets = Vec::new();
        if spec.arch != Arch::HeadOnly {
            for v in 0..spec.num_views {
                let mut widths = vec![spec.view_dims[v]];
                widths.extend(&spec.fv_hidden);
                widths.push(spec.d);
                let layers = (1..widths.len())
                    .map(|l| {
                        b.dense(
                            &format!("view{v}.layer{}", l - 1),
                            widths[l - 1],
                            widths[l],
                            true,
                        )
                    })
                    .collect();
                view_nets.push(ViewNet { layers });
            }
        }

        let mut pairs = Vec::new();
        if spec.arch == Arch::Full {
            let limit = glorot_limit(spec.d * spec.d, 1);
            for v in 0..spec.num_views {
                for w in v + 1..spec.num_views {
                    let name = format!("pair{v}_{w}");
                    let mats = (0..spec.d_b)
                        .map(|p| {
                            b.params.add(
                                format!("{name}.B{p}"),
                                b.rng.matrix_uniform(spec.d, spec.d, -limit, limit),
                            )
                        })
                        .collect();
                    let bias = b
                        .params
                        .add(format!("{name}.bias"), Matrix::zeros(1, spec.d_b));
                    let bn = spec.bilinear_batchnorm.then(|| b.bn(&name, spec.d_b));
                    pairs.push(PairBilinear { mats, bias, bn });
                }
            }
        }

        let mut widths = vec![spec.head_input_width()];
        widths.extend(&spec.head_hidden);
        let hidden = (1..widths.len())
            .map(|l| {
                b.dense(
                    &format!("head.layer{}", l - 1),
                    widths[l - 1],
                    widths[l],
                    true,
                )
            })
            .collect();
        let out = b.dense("head.out", *widths.last().unwrap(), spec.num_classes, false);

        Ok(MvNnBiIn {
            spec: spec.clone(),
            params: b.params,
            bn_states: b.bn_states,
            view_nets,
            pairs,
            head: SharedHead { hidden, out },
        })
    }

    pub fn cast<U: Scalar>(&self) -> MvNnBiIn<U> {
        MvNnBiIn {
            spec: self.spec.clone(),
            params: self.params.cast(),
            bn_states: self.bn_states.iter().map(|s| s.cast()).collect(),
            view_nets: self.view_nets.clone(),
            pairs: self.pairs.clone(),
            head: self.head.clone(),
        }
    }

    /// Parameter ids of pair `(v, w)`; order of the arguments does not
    /// matter, both resolve to the same storage.
    pub fn pair_param_ids(&self, v: usize, w: usize) -> (Vec<ParamId>, ParamId) {
        let pair = &self.pairs[pair_index(self.spec.num_views, v, w)];
        (pair.mats.clone(), pair.bias)
    }

    fn check_views(&self, views: &[Matrix<T>]) -> Result<usize> {
        if views.len() != self.spec.num_views {
            return Err(Error::Data(format!(
                "batch has {} views, model expects {}",
                views.len(),
                self.spec.num_views
            )));
        }
        let batch = views[0].rows();
        for (v, x) in views.iter().enumerate() {
            if x.cols() != self.spec.view_dims[v] {
                return Err(Error::Data(format!(
                    "view {v} has width {}, model expects {}",
                    x.cols(),
                    self.spec.view_dims[v]
                )));
            }
            if x.rows() != batch {
                return Err(Error::shape("view batch", (batch, x.cols()), x.shape()));
            }
        }
        Ok(batch)
    }

    /// Train-mode forward pass over all views, recorded on a fresh tape.
    /// Batch-norm running statistics are updated in place.
    pub fn forward_train(&mut self, views: &[Matrix<T>]) -> Result<TrainForward<T>> {
        self.check_views(views)?;
        let mut tape = OpTape::new();
        let spec = self.spec.clone();

        let inputs: Vec<NodeId> = views.iter().map(|x| tape.leaf(x.clone())).collect();

        // per-view embeddings
        let mut feats = Vec::with_capacity(spec.num_views);
        if spec.arch != Arch::HeadOnly {
            for (v, &x) in inputs.iter().enumerate() {
                let net = self.view_nets[v].clone();
                let mut h = x;
                for layer in &net.layers {
                    h = tape.affine(&self.params, h, layer.w, layer.b)?;
                    if let Some(bn) = &layer.bn {
                        h = tape.batchnorm_train(
                            &self.params,
                            h,
                            bn.gamma,
                            bn.beta,
                            &mut self.bn_states[bn.state],
                        )?;
                    }
                    h = tape.relu(h);
                }
                feats.push(h);
            }
        } else {
            feats = inputs;
        }

        // undirected pair interactions, computed once and reused by both ends
        let mut pair_nodes = vec![None; self.pairs.len()];
        if spec.arch == Arch::Full {
            for v in 0..spec.num_views {
                for w in v + 1..spec.num_views {
                    let idx = pair_index(spec.num_views, v, w);
                    let pair = self.pairs[idx].clone();
                    let mut node =
                        tape.bilinear(&self.params, feats[v], feats[w], &pair.mats, pair.bias)?;
                    if let Some(bn) = &pair.bn {
                        node = tape.batchnorm_train(
                            &self.params,
                            node,
                            bn.gamma,
                            bn.beta,
                            &mut self.bn_states[bn.state],
                        )?;
                    }
                    pair_nodes[idx] = Some(node);
                }
            }
        }

        // shared head per view
        let head = self.head.clone();
        let mut logits = Vec::with_capacity(spec.num_views);
        for v in 0..spec.num_views {
            let mut h = match spec.arch {
                Arch::Full => {
                    let mut parts = vec![feats[v]];
                    for w in (0..spec.num_views).filter(|&w| w != v) {
                        parts.push(pair_nodes[pair_index(spec.num_views, v, w)].unwrap());
                    }
                    tape.concat(&parts)?
                }
                _ => feats[v],
            };
            for layer in &head.hidden {
                h = tape.affine(&self.params, h, layer.w, layer.b)?;
                if let Some(bn) = &layer.bn {
                    h = tape.batchnorm_train(
                        &self.params,
                        h,
                        bn.gamma,
                        bn.beta,
                        &mut self.bn_states[bn.state],
                    )?;
                }
                h = tape.relu(h);
            }
            logits.push(tape.affine(&self.params, h, head.out.w, head.out.b)?);
        }

        Ok(TrainForward { tape, logits })
    }

    /// Eval-mode forward pass: frozen running statistics, nothing recorded.
    pub fn forward_eval(&self, views: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
        self.check_views(views)?;
        let spec = &self.spec;

        let mut feats: Vec<Matrix<T>> = Vec::with_capacity(spec.num_views);
        if spec.arch != Arch::HeadOnly {
            for (v, x) in views.iter().enumerate() {
                let mut h = x.clone();
                for layer in &self.view_nets[v].layers {
                    h = ops::affine_forward(
                        &h,
                        self.params.value(layer.w),
                        self.params.value(layer.b),
                    )?;
                    if let Some(bn) = &layer.bn {
                        h = ops::batchnorm_eval_forward(
                            &h,
                            self.params.value(bn.gamma),
                            self.params.value(bn.beta),
                            &self.bn_states[bn.state],
                        )?;
                    }
                    h = ops::relu_forward(&h);
                }
                feats.push(h);
            }
        } else {
            feats = views.to_vec();
        }

        let mut pair_values: Vec<Option<Matrix<T>>> = vec![None; self.pairs.len()];
        if spec.arch == Arch::Full {
            for v in 0..spec.num_views {
                for w in v + 1..spec.num_views {
                    let idx = pair_index(spec.num_views, v, w);
                    let pair = &self.pairs[idx];
                    let mats: Vec<Matrix<T>> = pair
                        .mats
                        .iter()
                        .map(|&id| self.params.value(id).clone())
                        .collect();
                    let mut value = ops::bilinear_forward(
                        &feats[v],
                        &feats[w],
                        &mats,
                        self.params.value(pair.bias),
                    )?;
                    if let Some(bn) = &pair.bn {
                        value = ops::batchnorm_eval_forward(
                            &value,
                            self.params.value(bn.gamma),
                            self.params.value(bn.beta),
                            &self.bn_states[bn.state],
                        )?;
                    }
                    pair_values[idx] = Some(value);
                }
            }
        }

        let mut logits = Vec::with_capacity(spec.num_views);
        for v in 0..spec.num_views {
            let mut h = match spec.arch {
                Arch::Full => {
                    let mut parts: Vec<&Matrix<T>> = vec![&feats[v]];
                    for w in (0..spec.num_views).filter(|&w| w != v) {
                        parts.push(
                            pair_values[pair_index(spec.num_views, v, w)]
                                .as_ref()
                                .unwrap(),
                        );
                    }
                    ops::concat_forward(&parts)?
                }
                _ => feats[v].clone(),
            };
            for layer in &self.head.hidden {
                h = ops::affine_forward(
                    &h,
                    self.params.value(layer.w),
                    self.params.value(layer.b),
                )?;
                if let Some(bn) = &layer.bn {
                    h = ops::batchnorm_eval_forward(
                        &h,
                        self.params.value(bn.gamma),
                        self.params.value(bn.beta),
                        &self.bn_states[bn.state],
                    )?;
                }
                h = ops::relu_forward(&h);
            }
            logits.push(ops::affine_forward(
                &h,
                self.params.value(self.head.out.w),
                self.params.value(self.head.out.b),
            )?);
        }
        Ok(logits)
    }
}

/// Finite-difference check of the whole model: the loss is the unweighted
/// sum of per-view cross entropies on a tiny instance, differentiated
/// through every parameter.
pub fn end_to_end_grad_check(seed: u64, step: f64) -> Result<f64> {
    use crate::numerics::gradcheck::finite_diff_max_err;
    use crate::numerics::ops::softmax_cross_entropy;

    let spec = ModelSpec {
        arch: Arch::Full,
        num_views: 2,
        num_classes: 2,
        view_dims: vec![3, 5],
        fv_hidden: vec![4],
        d: 3,
        d_b: 2,
        head_hidden: vec![4],
        bilinear_batchnorm: false,
    };
    let mut rng = Rng::new(seed);
    let model = MvNnBiIn::<f64>::init(&spec, &mut rng)?;
    let views: Vec<Matrix<f64>> = spec
        .view_dims
        .iter()
        .map(|&dv| rng.matrix_normal(4, dv, 1.0))
        .collect();
    let labels: Vec<usize> = (0..4).map(|_| rng.below(2)).collect();

    let loss_of = |model: &MvNnBiIn<f64>| -> Result<f64> {
        let mut scratch = model.clone();
        let fwd = scratch.forward_train(&views)?;
        let mut total = 0.0;
        for &id in &fwd.logits {
            total += softmax_cross_entropy(fwd.tape.value(id), &labels)?.0;
        }
        Ok(total)
    };

    // analytic gradients
    let mut scratch = model.clone();
    let fwd = scratch.forward_train(&views)?;
    let mut seeds = Vec::new();
    for &id in &fwd.logits {
        let (_, grad) = softmax_cross_entropy(fwd.tape.value(id), &labels)?;
        seeds.push((id, grad));
    }
    let grads = fwd.tape.backward(&scratch.params, seeds)?;

    let inputs: Vec<Matrix<f64>> = model.params.iter().map(|(_, _, m)| m.clone()).collect();
    let analytic: Vec<Matrix<f64>> = model
        .params
        .iter()
        .map(|(id, _, m)| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
        })
        .collect();

    finite_diff_max_err(
        &mut |p: &[Matrix<f64>]| {
            let mut perturbed = model.clone();
            for (i, m) in p.iter().enumerate() {
                *perturbed.params.value_mut(ParamId(i)) = m.clone();
            }
            loss_of(&perturbed)
        },
        &inputs,
        &analytic,
        step,
    )
}
