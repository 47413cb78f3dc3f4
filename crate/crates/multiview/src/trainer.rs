//! Alternating optimization: Adam steps on the network parameters under
//! fixed view weights, then the closed-form weight update on the epoch-mean
//! per-view losses.

use crate::data::{batch_indices, gather_batch, MultiViewDataset, Split, Standardizer};
use crate::error::{Error, Result};
use crate::fusion::{fused_objective, predict, solve_alpha, PredictWeighting, ViewWeights};
use crate::model::{Arch, ModelSpec, MvNnBiIn};
use crate::numerics::matrix::{Matrix, Scalar};
use crate::numerics::ops::softmax_cross_entropy;
use crate::numerics::tape::Gradients;
use crate::numerics::Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Every hyperparameter of a run. The defaults follow the published setup:
/// view nets of 400 and 200 ReLU units, a 300-unit head, d_B = 200, Adam at
/// learning rate 1e-3 with beta1 = 0.5, beta2 = 0.9, batch size 64.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Weight exponent; must exceed 1.
    pub gamma: f64,
    /// Number of views allowed nonzero weight; `null` means all views.
    pub s: Option<usize>,
    /// View embedding width.
    pub d: usize,
    /// Bilinear interaction width.
    pub d_b: usize,
    /// View-net widths before `d`.
    pub fv_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub seed: u64,
    /// Update the view weights every this many epochs; 0 disables updates.
    pub alpha_update_period: usize,
    /// Re-solve the weights after every batch from that batch's losses
    /// instead of once per epoch. Noisy batch losses destabilize the
    /// sparsity support, so this is off by default.
    pub alpha_per_batch: bool,
    pub predict_weighting: PredictWeighting,
    pub standardize: bool,
    pub precision: Precision,
    /// Early-stop patience in epochs without validation improvement.
    pub patience: usize,
    pub arch: Arch,
    /// Batch-normalize bilinear outputs before concatenation.
    pub bilinear_batchnorm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.9,
            adam_eps: 1e-8,
            gamma: 2.0,
            s: None,
            d: 200,
            d_b: 200,
            fv_hidden: vec![400],
            head_hidden: vec![300],
            seed: 0,
            alpha_update_period: 1,
            alpha_per_batch: false,
            predict_weighting: PredictWeighting::Alpha,
            standardize: true,
            precision: Precision::F64,
            patience: 10,
            arch: Arch::Full,
            bilinear_batchnorm: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_views: usize) -> Result<()> {
        if self.gamma.is_nan() || self.gamma <= 1.0 {
            return Err(Error::Config(format!(
                "gamma must be > 1, got {}",
                self.gamma
            )));
        }
        let s = self.effective_s(num_views);
        if s < 1 || s > num_views {
            return Err(Error::Config(format!(
                "s must be in [1, {num_views}], got {s}"
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2 (batch norm)".into()));
        }
        if self.lr < 0.0 {
            return Err(Error::Config("learning rate must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn effective_s(&self, num_views: usize) -> usize {
        self.s.unwrap_or(num_views)
    }

    pub fn model_spec(&self, view_dims: Vec<usize>, num_classes: usize) -> ModelSpec {
        ModelSpec {
            arch: self.arch,
            num_views: view_dims.len(),
            num_classes,
            view_dims,
            fv_hidden: self.fv_hidden.clone(),
            d: self.d,
            d_b: self.d_b,
            head_hidden: self.head_hidden.clone(),
            bilinear_batchnorm: self.bilinear_batchnorm,
        }
    }
}

/// Per-parameter first and second moments with the bias-corrected step count.
pub struct AdamState<T: Scalar> {
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(model: &MvNnBiIn<T>, cfg: &TrainConfig) -> Self {
        let m = model
            .params
            .iter()
            .map(|(_, _, p)| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        let v = model
            .params
            .iter()
            .map(|(_, _, p)| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        AdamState {
            m,
            v,
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update over every parameter that received a
/// gradient. Rejects non-finite gradients, naming the parameter.
pub fn adam_step<T: Scalar>(
    model: &mut MvNnBiIn<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let lr_t = state.lr * bc2.sqrt() / bc1;
    let beta1 = T::from_f64(state.beta1);
    let beta2 = T::from_f64(state.beta2);
    let one_m_b1 = T::from_f64(1.0 - state.beta1);
    let one_m_b2 = T::from_f64(1.0 - state.beta2);
    let lr_t = T::from_f64(lr_t);
    let eps = T::from_f64(state.eps * bc2.sqrt());

    let ids: Vec<_> = model.params.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let Some(g) = grads.get(id) else { continue };
        if !g.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter '{}'",
                model.params.name(id)
            )));
        }
        let m = &mut state.m[id.0];
        let v = &mut state.v[id.0];
        let p = model.params.value_mut(id);
        for ((pi, mi), (vi, &gi)) in p
            .as_mut_slice()
            .iter_mut()
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice().iter_mut().zip(g.as_slice()))
        {
            *mi = beta1 * *mi + one_m_b1 * gi;
            *vi = beta2 * *vi + one_m_b2 * gi * gi;
            // m_hat / (sqrt(v_hat) + eps), with the bias corrections folded
            // into lr_t and eps
            *pi -= lr_t * *mi / (vi.sqrt() + eps);
        }
    }
    Ok(())
}

/// One epoch's training summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Epoch-mean cross entropy per view on the train split.
    pub train_losses: Vec<f64>,
    /// `sum_v alpha_v^gamma * L_v` of the epoch losses under `alpha`.
    pub fused_objective: f64,
    /// Weights in effect at the end of the epoch (after the update); the
    /// validation metrics in the same report use these.
    pub alpha: Vec<f64>,
    pub val_top1: f64,
    pub val_topk: f64,
    pub wall_ms: u64,
}

/// Result of `fit`: the best model by validation Top@1 (canonicalized to
/// f64), its weights, and the per-epoch history.
pub struct FitResult {
    pub model: MvNnBiIn<f64>,
    pub weights: ViewWeights,
    pub history: Vec<EpochReport>,
    pub best_epoch: Option<usize>,
    pub standardizer: Option<Standardizer>,
    /// The split assignment the run used (either the dataset's own or the
    /// stratified one drawn from the config seed).
    pub split: Vec<Split>,
    /// Set when training stopped on a numeric failure; the best earlier
    /// checkpoint is still returned.
    pub aborted: Option<String>,
}

/// Epoch statistics needed by the weight update.
pub struct EpochStats {
    pub mean_losses: Vec<f64>,
    /// Weights after the last batch, present only under per-batch
    /// alternation.
    pub batch_weights: Option<ViewWeights>,
}

/// Trains one epoch: forward all views, scale each view's cross-entropy
/// gradient by `alpha_v^gamma`, backpropagate through the shared head, the
/// bilinear set and the view nets, and apply Adam. The weights stay fixed
/// for the whole epoch unless `alpha_per_batch` re-solves them from each
/// batch's losses.
pub fn train_epoch<T: Scalar>(
    model: &mut MvNnBiIn<T>,
    train_views: &[Matrix<f64>],
    train_labels: &[usize],
    weights: &ViewWeights,
    opt: &mut AdamState<T>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let n = train_labels.len();
    let m = model.spec.num_views;
    let mut shuffle = Rng::stream(cfg.seed, 0xE0C4 + epoch as u64);
    let batches = batch_indices(n, cfg.batch_size, Some(&mut shuffle));
    if batches.is_empty() {
        return Err(Error::Data(format!(
            "train split of {n} samples yields no batch of size >= 2"
        )));
    }

    let mut current = weights.clone();
    let mut loss_sums = vec![0.0f64; m];
    let mut seen = 0usize;

    for batch_idx in &batches {
        let coef: Vec<f64> = current
            .alpha
            .iter()
            .map(|&a| a.powf(current.gamma))
            .collect();
        let batch = gather_batch::<T>(train_views, train_labels, batch_idx);
        let fwd = model.forward_train(&batch.views)?;

        let mut seeds = Vec::with_capacity(m);
        let mut batch_losses = vec![0.0f64; m];
        let mut batch_fused = 0.0;
        for (v, &logit_node) in fwd.logits.iter().enumerate() {
            let (loss, mut grad) =
                softmax_cross_entropy(fwd.tape.value(logit_node), &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss for view {v} at epoch {epoch}"
                )));
            }
            batch_losses[v] = loss;
            loss_sums[v] += loss * batch_idx.len() as f64;
            batch_fused += coef[v] * loss;
            if coef[v] != 0.0 {
                grad.scale_in_place(T::from_f64(coef[v]));
                seeds.push((logit_node, grad));
            }
        }
        if !batch_fused.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite fused loss at epoch {epoch}"
            )));
        }
        seen += batch_idx.len();

        let grads = fwd.tape.backward(&model.params, seeds)?;
        adam_step(model, &grads, opt)?;

        if cfg.alpha_per_batch {
            current = update_alpha(&batch_losses, cfg)?;
        }
    }

    for sum in &mut loss_sums {
        *sum /= seen as f64;
    }
    Ok(EpochStats {
        mean_losses: loss_sums,
        batch_weights: cfg.alpha_per_batch.then_some(current),
    })
}

/// Closed-form weight update from the epoch-mean losses.
pub fn update_alpha(epoch_losses: &[f64], cfg: &TrainConfig) -> Result<ViewWeights> {
    let m = epoch_losses.len();
    solve_alpha(epoch_losses, cfg.gamma, cfg.effective_s(m))
}

/// Top@1 and Top@k accuracy (k = min(5, C)) of the weighted combiner on one
/// split. Runs in eval mode with frozen batch-norm statistics.
pub fn evaluate<T: Scalar>(
    model: &MvNnBiIn<T>,
    weights: &ViewWeights,
    views: &[Matrix<f64>],
    labels: &[usize],
    weighting: PredictWeighting,
) -> Result<(f64, f64)> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let c = model.spec.num_classes;
    let k = 5.min(c);
    let mut top1 = 0usize;
    let mut topk = 0usize;

    // fixed-size eval batches; no shuffling, nothing dropped
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(256) {
        let batch = gather_batch::<T>(views, labels, chunk);
        let logits = model.forward_eval(&batch.views)?;
        let (pred, scores) = predict(&logits, weights, weighting)?;
        for (row, (&label, &p)) in batch.labels.iter().zip(&pred).enumerate() {
            if p == label {
                top1 += 1;
            }
            let target = scores.get(row, label);
            let better = (0..c).filter(|&j| scores.get(row, j) > target).count();
            if better < k {
                topk += 1;
            }
        }
    }
    Ok((top1 as f64 / n as f64, topk as f64 / n as f64))
}

/// Full training loop: standardize, init, alternate epochs of Adam with
/// closed-form weight updates, track the best validation Top@1, stop early
/// after `patience` epochs without improvement.
pub fn fit(cfg: &TrainConfig, dataset: &MultiViewDataset) -> Result<FitResult> {
    match cfg.precision {
        Precision::F64 => fit_typed::<f64>(cfg, dataset),
        Precision::F32 => fit_typed::<f32>(cfg, dataset),
    }
}

fn fit_typed<T: Scalar>(cfg: &TrainConfig, dataset: &MultiViewDataset) -> Result<FitResult> {
    cfg.validate(dataset.num_views())?;
    let mut ds = dataset.clone();
    if ds.split.is_none() {
        crate::data::split_dataset(&mut ds, (0.7, 0.2, 0.1), cfg.seed)?;
    }
    let standardizer = if cfg.standardize {
        Some(crate::data::standardize_fit_apply(&mut ds)?)
    } else {
        None
    };

    let spec = cfg.model_spec(ds.view_dims(), ds.num_classes);
    let mut init_rng = Rng::stream(cfg.seed, 0x1217);
    let mut model = MvNnBiIn::<T>::init(&spec, &mut init_rng)?;
    let mut opt = AdamState::new(&model, cfg);

    let m = ds.num_views();
    let s = cfg.effective_s(m);
    let mut weights = ViewWeights::uniform(m, cfg.gamma, s);

    let (train_views, train_labels) = ds.gather(Split::Train)?;
    let (val_views, val_labels) = ds.gather(Split::Val)?;

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, MvNnBiIn<f64>, ViewWeights)> = None;
    let mut since_best = 0usize;
    let mut aborted = None;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let stats = match train_epoch(
            &mut model,
            &train_views,
            &train_labels,
            &weights,
            &mut opt,
            cfg,
            epoch,
        ) {
            Ok(stats) => stats,
            Err(err @ Error::Numeric(_)) => {
                // keep the last good checkpoint
                aborted = Some(err.to_string());
                break;
            }
            Err(err) => return Err(err),
        };
        if let Some(batch_weights) = &stats.batch_weights {
            weights = batch_weights.clone();
        } else if cfg.alpha_update_period > 0 && epoch % cfg.alpha_update_period == 0 {
            weights = update_alpha(&stats.mean_losses, cfg)?;
        }
        let fused = fused_objective(&stats.mean_losses, &weights);

        let (val_top1, val_topk) = evaluate(
            &model,
            &weights,
            &val_views,
            &val_labels,
            cfg.predict_weighting,
        )?;
        history.push(EpochReport {
            epoch,
            train_losses: stats.mean_losses,
            fused_objective: fused,
            alpha: weights.alpha.clone(),
            val_top1,
            val_topk,
            wall_ms: start.elapsed().as_millis() as u64,
        });

        let improved = best.as_ref().is_none_or(|(_, top1, _, _)| val_top1 > *top1);
        if improved {
            best = Some((epoch, val_top1, model.cast::<f64>(), weights.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let (best_epoch, final_model, final_weights) = match best {
        Some((epoch, _, model, weights)) => (Some(epoch), model, weights),
        None => (None, model.cast::<f64>(), weights),
    };
    Ok(FitResult {
        model: final_model,
        weights: final_weights,
        history,
        best_epoch,
        standardizer,
        split: ds.split.expect("split assigned above"),
        aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SynthSpec};
    use crate::model::Arch;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            d: 6,
            d_b: 3,
            fv_hidden: vec![8],
            head_hidden: vec![8],
            gamma: 2.0,
            s: None,
            seed: 1,
            patience: 10,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(seed: u64) -> MultiViewDataset {
        let mut spec = SynthSpec::new(2, 3, 120, 4);
        spec.seed = seed;
        generate(&spec).unwrap()
    }

    #[test]
    fn adam_zero_gradients_leave_parameters_unchanged() {
        let cfg = tiny_cfg();
        let spec = cfg.model_spec(vec![4, 4], 3);
        let mut model = MvNnBiIn::<f64>::init(&spec, &mut Rng::new(3)).unwrap();
        let before: Vec<Vec<f64>> = model
            .params
            .iter()
            .map(|(_, _, m)| m.as_slice().to_vec())
            .collect();
        let mut opt = AdamState::new(&model, &cfg);

        // empty gradient set: nothing touched
        let mut scratch = model.clone();
        let fwd = scratch
            .forward_train(&[
                Rng::new(5).matrix_normal(4, 4, 1.0),
                Rng::new(6).matrix_normal(4, 4, 1.0),
            ])
            .unwrap();
        let grads = fwd.tape.backward(&scratch.params, vec![]).unwrap();
        adam_step(&mut model, &grads, &mut opt).unwrap();
        for ((_, _, m), b) in model.params.iter().zip(&before) {
            assert_eq!(m.as_slice(), b.as_slice());
        }
    }

    #[test]
    fn adam_constant_gradient_step_approaches_lr() {
        // with a constant gradient the bias-corrected update tends to
        // lr * sign(g)
        let cfg = TrainConfig {
            lr: 1e-3,
            ..tiny_cfg()
        };
        let spec = cfg.model_spec(vec![4, 4], 3);
        let mut model = MvNnBiIn::<f64>::init(&spec, &mut Rng::new(4)).unwrap();
        let mut opt = AdamState::new(&model, &cfg);
        let id = model.params.iter().next().unwrap().0;
        let shape = model.params.value(id).shape();

        let mut last = model.params.value(id).get(0, 0);
        let mut step = 0.0;
        for _ in 0..300 {
            let mut builder = GradientsBuilder::new(model.params.len());
            builder.set(id, Matrix::filled(shape.0, shape.1, 2.5));
            adam_step(&mut model, &builder.build(), &mut opt).unwrap();
            let now = model.params.value(id).get(0, 0);
            step = last - now;
            last = now;
        }
        assert!((step - cfg.lr).abs() < 1e-5, "step {step} vs lr {}", cfg.lr);
    }

    // test-only builder for Gradients
    struct GradientsBuilder<T: Scalar> {
        inner: Vec<Option<Matrix<T>>>,
    }

    impl<T: Scalar> GradientsBuilder<T> {
        fn new(n: usize) -> Self {
            GradientsBuilder {
                inner: (0..n).map(|_| None).collect(),
            }
        }
        fn set(&mut self, id: crate::numerics::ParamId, g: Matrix<T>) {
            self.inner[id.0] = Some(g);
        }
        fn build(self) -> Gradients<T> {
            Gradients::from_raw(self.inner)
        }
    }

    #[test]
    fn adam_rejects_nan_gradients_naming_the_parameter() {
        let cfg = tiny_cfg();
        let spec = cfg.model_spec(vec![4, 4], 3);
        let mut model = MvNnBiIn::<f64>::init(&spec, &mut Rng::new(4)).unwrap();
        let mut opt = AdamState::new(&model, &cfg);
        let id = model.params.iter().next().unwrap().0;
        let name = model.params.name(id).to_string();
        let shape = model.params.value(id).shape();
        let mut builder = GradientsBuilder::new(model.params.len());
        builder.set(id, Matrix::filled(shape.0, shape.1, f64::NAN));
        let err = adam_step(&mut model, &builder.build(), &mut opt)
            .unwrap_err()
            .to_string();
        assert!(err.contains(&name), "{err}");
    }

    #[test]
    fn lr_zero_changes_nothing_over_an_epoch() {
        let cfg = TrainConfig {
            lr: 0.0,
            ..tiny_cfg()
        };
        let ds = {
            let mut ds = tiny_dataset(2);
            crate::data::split_dataset(&mut ds, (0.7, 0.2, 0.1), 1).unwrap();
            ds
        };
        let spec = cfg.model_spec(ds.view_dims(), ds.num_classes);
        let mut model = MvNnBiIn::<f64>::init(&spec, &mut Rng::new(5)).unwrap();
        let before: Vec<Vec<f64>> = model
            .params
            .iter()
            .map(|(_, _, m)| m.as_slice().to_vec())
            .collect();
        let mut opt = AdamState::new(&model, &cfg);
        let weights = ViewWeights::uniform(2, cfg.gamma, 2);
        let (views, labels) = ds.gather(Split::Train).unwrap();
        train_epoch(&mut model, &views, &labels, &weights, &mut opt, &cfg, 1).unwrap();
        for ((_, _, m), b) in model.params.iter().zip(&before) {
            assert_eq!(m.as_slice(), b.as_slice());
        }
    }

    #[test]
    fn onehot_alpha_gates_gradients_by_support() {
        // alpha = onehot(view 0) on an M=3 model: pair (1,2) parameters get
        // zero gradient (no supported branch uses them); view 1 and 2 nets
        // still receive gradient as partners inside view 0's interactions.
        let cfg = TrainConfig {
            s: Some(1),
            ..tiny_cfg()
        };
        let spec = cfg.model_spec(vec![4, 4, 4], 3);
        let mut model = MvNnBiIn::<f64>::init(&spec, &mut Rng::new(6)).unwrap();
        let mut rng = Rng::new(30);
        let views: Vec<Matrix<f64>> = (0..3).map(|_| rng.matrix_normal(8, 4, 1.0)).collect();
        let labels: Vec<usize> = (0..8).map(|_| rng.below(3)).collect();

        let fwd = model.forward_train(&views).unwrap();
        let coef = [1.0, 0.0, 0.0];
        let mut seeds = Vec::new();
        for (v, &node) in fwd.logits.iter().enumerate() {
            if coef[v] == 0.0 {
                continue;
            }
            let (_, grad) = softmax_cross_entropy(fwd.tape.value(node), &labels).unwrap();
            seeds.push((node, grad));
        }
        let grads = fwd.tape.backward(&model.params, seeds).unwrap();

        let (pair12_mats, pair12_bias) = model.pair_param_ids(1, 2);
        for id in pair12_mats.iter().chain([&pair12_bias]) {
            assert!(
                grads.get(*id).is_none() || grads.get(*id).unwrap().max_abs() == 0.0,
                "pair (1,2) should receive no gradient"
            );
        }
        let (pair01_mats, _) = model.pair_param_ids(0, 1);
        assert!(grads.get(pair01_mats[0]).unwrap().max_abs() > 0.0);

        // partner view nets still receive gradient through view 0's branch
        for v in 1..3 {
            let some_weight = model
                .params
                .iter()
                .find(|(_, name, _)| {
                    name.starts_with(&format!("view{v}.layer0")) && name.ends_with(".w")
                })
                .map(|(id, _, _)| id)
                .unwrap();
            assert!(
                grads.get(some_weight).is_some_and(|g| g.max_abs() > 0.0),
                "view {v} net should receive partner gradient"
            );
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_epoch_report() {
        let cfg = tiny_cfg();
        let ds = tiny_dataset(3);
        let a = fit(&cfg, &ds).unwrap();
        let b = fit(&cfg, &ds).unwrap();
        assert_eq!(a.history.len(), b.history.len());
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert_eq!(ra.train_losses, rb.train_losses);
            assert_eq!(ra.alpha, rb.alpha);
            assert_eq!(ra.val_top1, rb.val_top1);
        }
        assert_eq!(a.weights.alpha, b.weights.alpha);
    }

    #[test]
    fn update_alpha_matches_standalone_solver() {
        let cfg = tiny_cfg();
        let losses = [0.9, 0.4, 1.7];
        let a = update_alpha(&losses, &cfg).unwrap();
        let b = solve_alpha(&losses, cfg.gamma, 3).unwrap();
        assert_eq!(a.alpha, b.alpha);
    }

    #[test]
    fn per_batch_alternation_yields_valid_weights_deterministically() {
        let cfg = TrainConfig {
            alpha_per_batch: true,
            s: Some(1),
            ..tiny_cfg()
        };
        let ds = tiny_dataset(21);
        let a = fit(&cfg, &ds).unwrap();
        let b = fit(&cfg, &ds).unwrap();
        assert_eq!(a.weights.alpha, b.weights.alpha);
        assert_eq!(a.weights.support_size(), 1);
        assert_eq!(a.weights.alpha.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn first_update_with_equal_losses_is_uniform_over_the_first_s_views() {
        let cfg = TrainConfig {
            s: Some(2),
            ..tiny_cfg()
        };
        let w = update_alpha(&[0.8, 0.8, 0.8], &cfg).unwrap();
        assert_eq!(w.alpha[2], 0.0, "tie rule keeps the lowest indices");
        assert!((w.alpha[0] - 0.5).abs() < 1e-12 && (w.alpha[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn non_finite_data_aborts_with_best_checkpoint_retained() {
        let cfg = TrainConfig {
            standardize: false,
            ..tiny_cfg()
        };
        let mut ds = tiny_dataset(13);
        ds.views[0].x.set(0, 0, f64::INFINITY);
        let result = fit(&cfg, &ds).unwrap();
        assert!(result.aborted.is_some(), "expected a numeric abort");
    }

    #[test]
    fn update_alpha_zeroes_the_worst_view_when_s_is_m_minus_1() {
        let cfg = TrainConfig {
            s: Some(2),
            ..tiny_cfg()
        };
        let w = update_alpha(&[0.5, 0.9, 0.2], &cfg).unwrap();
        assert_eq!(w.alpha[1], 0.0);
        assert!(w.alpha[0] > 0.0 && w.alpha[2] > 0.0);
    }

    #[test]
    fn alpha_step_never_increases_the_fused_objective() {
        let mut rng = Rng::new(31);
        let cfg = tiny_cfg();
        for _ in 0..200 {
            let m = 2 + rng.below(4);
            let losses: Vec<f64> = (0..m).map(|_| rng.uniform_in(0.01, 3.0)).collect();
            let prev = ViewWeights::uniform(m, cfg.gamma, cfg.effective_s(m));
            let next = update_alpha(&losses, &cfg).unwrap();
            assert!(
                fused_objective(&losses, &next) <= fused_objective(&losses, &prev) + 1e-12,
                "alpha update increased the objective"
            );
        }
    }

    #[test]
    fn epochs_zero_returns_initialized_model_with_uniform_alpha() {
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let ds = tiny_dataset(4);
        let result = fit(&cfg, &ds).unwrap();
        assert!(result.history.is_empty());
        assert_eq!(result.best_epoch, None);
        assert_eq!(result.weights.alpha, vec![0.5, 0.5]);
    }

    #[test]
    fn fit_learns_separable_synthetic_data() {
        let mut spec = SynthSpec::new(2, 3, 450, 5);
        spec.seed = 9;
        spec.separation = 5.0;
        let ds = generate(&spec).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 32,
            d: 8,
            d_b: 4,
            fv_hidden: vec![16],
            head_hidden: vec![16],
            seed: 7,
            ..TrainConfig::default()
        };
        let result = fit(&cfg, &ds).unwrap();
        let best = result
            .history
            .iter()
            .map(|r| r.val_top1)
            .fold(0.0, f64::max);
        assert!(best >= 0.95, "validation Top@1 {best}");
    }

    #[test]
    fn evaluate_clamps_topk_to_num_classes() {
        let cfg = tiny_cfg();
        let ds = {
            let mut ds = tiny_dataset(6);
            crate::data::split_dataset(&mut ds, (0.7, 0.2, 0.1), 2).unwrap();
            ds
        };
        let spec = cfg.model_spec(ds.view_dims(), ds.num_classes);
        let model = MvNnBiIn::<f64>::init(&spec, &mut Rng::new(8)).unwrap();
        let weights = ViewWeights::uniform(2, 2.0, 2);
        let (views, labels) = ds.gather(Split::Val).unwrap();
        // C=3 < 5, so Top@k is Top@3 = 1.0 always
        let (_, topk) =
            evaluate(&model, &weights, &views, &labels, PredictWeighting::Alpha).unwrap();
        assert_eq!(topk, 1.0);
    }

    #[test]
    fn evaluate_rejects_empty_split() {
        let cfg = tiny_cfg();
        let spec = cfg.model_spec(vec![4, 4], 3);
        let model = MvNnBiIn::<f64>::init(&spec, &mut Rng::new(8)).unwrap();
        let weights = ViewWeights::uniform(2, 2.0, 2);
        assert!(evaluate(
            &model,
            &weights,
            &[Matrix::zeros(0, 4), Matrix::zeros(0, 4)],
            &[],
            PredictWeighting::Alpha
        )
        .is_err());
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let mut spec = SynthSpec::new(2, 4, 1200, 5);
        spec.seed = 40;
        spec.noise_views = vec![0, 1];
        let mut ds = generate(&spec).unwrap();
        crate::data::split_dataset(&mut ds, (0.7, 0.2, 0.1), 3).unwrap();
        let cfg = TrainConfig {
            d: 6,
            d_b: 2,
            fv_hidden: vec![8],
            head_hidden: vec![8],
            ..tiny_cfg()
        };
        let mspec = cfg.model_spec(ds.view_dims(), ds.num_classes);
        let model = MvNnBiIn::<f64>::init(&mspec, &mut Rng::new(12)).unwrap();
        let weights = ViewWeights::uniform(2, 2.0, 2);
        let (views, labels) = ds.gather(Split::Train).unwrap();
        let (top1, _) =
            evaluate(&model, &weights, &views, &labels, PredictWeighting::Alpha).unwrap();
        // 3-sigma binomial band around 1/4
        let n = labels.len() as f64;
        let sigma = (0.25 * 0.75 / n).sqrt();
        assert!((top1 - 0.25).abs() < 3.0 * sigma + 0.02, "top1 {top1}");
    }

    #[test]
    fn f32_training_runs_and_casts_up() {
        let cfg = TrainConfig {
            precision: Precision::F32,
            ..tiny_cfg()
        };
        let ds = tiny_dataset(5);
        let result = fit(&cfg, &ds).unwrap();
        assert!(!result.history.is_empty());
        assert!(result.model.params.iter().all(|(_, _, m)| m.all_finite()));
    }

    #[test]
    fn checkpoint_round_trip_preserves_evaluation() {
        let cfg = tiny_cfg();
        let ds = tiny_dataset(8);
        let result = fit(&cfg, &ds).unwrap();
        let mut ds2 = ds.clone();
        crate::data::split_dataset(&mut ds2, (0.7, 0.2, 0.1), cfg.seed).unwrap();
        if let Some(st) = &result.standardizer {
            st.apply(&mut ds2).unwrap();
        }
        let (views, labels) = ds2.gather(Split::Test).unwrap();
        let before = evaluate(
            &result.model,
            &result.weights,
            &views,
            &labels,
            cfg.predict_weighting,
        )
        .unwrap();

        let dir = std::env::temp_dir().join(format!("mv_trainer_ckpt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        crate::model::checkpoint::save(
            &path,
            &result.model,
            &result.weights,
            result.standardizer.as_ref(),
        )
        .unwrap();
        let (loaded, weights, _) = crate::model::checkpoint::load(&path).unwrap();
        let after = evaluate(&loaded, &weights, &views, &labels, cfg.predict_weighting).unwrap();
        assert_eq!(before, after);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn head_only_arch_trains() {
        let cfg = TrainConfig {
            arch: Arch::HeadOnly,
            alpha_update_period: 0,
            ..tiny_cfg()
        };
        let ds = tiny_dataset(11);
        let result = fit(&cfg, &ds).unwrap();
        assert!(!result.history.is_empty());
        // weights stay uniform when updates are disabled
        assert_eq!(result.weights.alpha, vec![0.5, 0.5]);
    }
}
