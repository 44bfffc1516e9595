use crate::config::{BnMode, TrainConfig};
use crate::data::Dataset;
use crate::error::{DressError, Result};
use crate::net::graph::Mode;
use crate::net::optim::{cosine_lr, sgd_step, UpdateScope};
use crate::net::params::{BnState, GradStore, LayerParams, ParamStore};
use crate::net::spec::NetworkSpec;
use crate::sampling::{allocate_layerwise, reallocate_on_stall, sample_masks, validate_levels, MaskSet, SparsityLadder, StallMonitor};
use crate::tensor::Tensor;
use crate::train::common::{check_loss, epoch_order, evaluate, loss_and_grad, steps_per_epoch};
use crate::train::record::{CosineTrace, RunRecord};

/// `pi_k = (1 - s_k)^gamma / sum_j (1 - s_j)^gamma`.
pub fn compute_loss_weights(levels: &[f64], gamma: f64) -> Result<Vec<f64>> {
    validate_levels(levels)?;
    if gamma < 0.0 && levels.iter().any(|&s| s >= 1.0) {
        return Err(DressError::config("a fully sparse level has no weight when gamma < 0"));
    }
    let alpha: Vec<f64> = levels.iter().map(|&s| (1.0 - s).powf(gamma)).collect();
    let sum: f64 = alpha.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return Err(DressError::config(format!("loss weights {:?} cannot be normalized", alpha)));
    }
    Ok(alpha.into_iter().map(|a| a / sum).collect())
}

/// Result of one joint iteration.
#[derive(Clone, Debug)]
pub struct StepGradient {
    /// `sum_k pi_k * (dL_k/dw) * m_k`.
    pub total: GradStore<f32>,
    /// Unweighted loss of each subnet.
    pub losses: Vec<f32>,
    /// Each subnet's masked gradient, when requested.
    pub parts: Vec<GradStore<f32>>,
}

/// Copies running statistics (not scale and shift) from `state` into `params`.
fn load_running(params: &mut ParamStore<f32>, state: &BnState<f32>) {
    let mut it = state.iter();
    for l in params.layers.iter_mut() {
        if let LayerParams::BatchNorm(b) = l {
            let s = it.next().expect("one state per BN layer");
            b.running_mean.clone_from(&s.running_mean);
            b.running_var.clone_from(&s.running_var);
        }
    }
}

/// Forward/backward of every subnet on one batch, in level order, and the
/// weighted masked gradient sum. With `per_level` each subnet runs with its
/// own running statistics.
fn joint_gradient(
    net: &NetworkSpec,
    params: &mut ParamStore<f32>,
    masks: &MaskSet,
    weights: &[f64],
    x: &Tensor<f32>,
    y: &[usize],
    mut per_level: Option<&mut Vec<BnState<f32>>>,
    keep_parts: bool,
) -> Result<StepGradient> {
    if weights.len() != masks.len() {
        return Err(DressError::shape(format!("{} loss weights for {} subnets", weights.len(), masks.len())));
    }
    let mut total = GradStore::zeros_like(params);
    let mut losses = Vec::with_capacity(masks.len());
    let mut parts = Vec::new();
    for (k, (mask, &pi)) in masks.levels().iter().zip(weights).enumerate() {
        if let Some(states) = per_level.as_deref() {
            load_running(params, &states[k]);
        }
        let (loss, mut g) = loss_and_grad(net, params, Some(mask), x, y, Mode::Train)?;
        if let Some(states) = per_level.as_deref_mut() {
            states[k] = params.bn_state();
        }
        losses.push(loss);
        total.add_scaled(&g, pi as f32, Some(mask));
        if keep_parts {
            g.apply_mask(mask);
            parts.push(g);
        }
    }
    Ok(StepGradient { total, losses, parts })
}

/// The accumulated gradient of one joint iteration with a shared BN state.
pub fn dress_step_gradient(
    net: &NetworkSpec,
    params: &mut ParamStore<f32>,
    masks: &MaskSet,
    weights: &[f64],
    x: &Tensor<f32>,
    y: &[usize],
    keep_parts: bool,
) -> Result<StepGradient> {
    joint_gradient(net, params, masks, weights, x, y, None, keep_parts)
}

/// Outcome of joint training: the best-average snapshot.
#[derive(Clone, Debug)]
pub struct DressOutcome {
    pub params: ParamStore<f32>,
    pub masks: MaskSet,
    pub ladder: SparsityLadder,
    /// Per-level running statistics (per-level BN mode only).
    pub level_bn: Option<Vec<BnState<f32>>>,
    pub record: RunRecord,
    pub cosine: Option<CosineTrace>,
}

impl DressOutcome {
    /// Parameters for evaluating subnet `k` (1-based) with its BN statistics.
    pub fn params_for(&self, k: usize) -> Result<ParamStore<f32>> {
        let mut p = self.params.clone();
        if let Some(states) = &self.level_bn {
            load_running(&mut p, &states[k - 1]);
        }
        Ok(p)
    }

    /// One BN state per level, before any post-training.
    pub fn bn_states(&self) -> Vec<BnState<f32>> {
        (1..=self.masks.len())
            .map(|k| self.params_for(k).expect("level in range").bn_state())
            .collect()
    }
}

/// Joint training of K nested subnets on one backbone.
///
/// Every iteration samples masks from the current weights under the current
/// allocation, accumulates the weighted masked gradients of all subnets and
/// takes one optimizer step. After each epoch all subnets are validated; a
/// strictly higher average is snapshotted, anything else triggers a fresh
/// layer-wise allocation.
pub fn dress_train(
    net: &NetworkSpec,
    params: ParamStore<f32>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<DressOutcome> {
    let weights = compute_loss_weights(&cfg.levels, cfg.gamma)?;
    let mut params = params;
    params.check(net)?;
    let sgd = cfg.sgd();
    let mut ladder = allocate_layerwise(net, &params, &cfg.levels)?;
    let mut velocity = GradStore::zeros_like(&params);
    let steps = steps_per_epoch(train.len(), cfg.batch_size);
    let total = steps * cfg.epochs;
    let k_levels = cfg.levels.len();
    let mut per_level = match cfg.bn_mode {
        BnMode::Shared => None,
        BnMode::PerLevelFrozen => Some(vec![params.bn_state(); k_levels]),
    };
    let mut cosine = (cfg.cosine_every > 0).then(CosineTrace::default);
    let mut monitor = StallMonitor::new();
    let mut record = RunRecord::default();
    let mut best: Option<(ParamStore<f32>, MaskSet, SparsityLadder, Option<Vec<BnState<f32>>>)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut loss_sums = vec![0.0f64; k_levels];
        for idx in Dataset::batches(&order, cfg.batch_size) {
            let masks = sample_masks(net, &params, &ladder)?;
            let (x, y) = train.batch(idx, &net.input_shape)?;
            let log = cosine.is_some() && step % cfg.cosine_every == 0;
            let g = joint_gradient(net, &mut params, &masks, &weights, &x, &y, per_level.as_mut(), log)?;
            for (k, &l) in g.losses.iter().enumerate() {
                loss_sums[k] += check_loss(l, epoch, step, k + 1, net)?;
            }
            if let (true, Some(trace)) = (log, cosine.as_mut()) {
                trace.record(step, net, &g.parts);
            }
            sgd_step(&mut params, &g.total, &mut velocity, cosine_lr(step, total, cfg.lr), &sgd, UpdateScope::ALL)?;
            step += 1;
        }
        let masks = sample_masks(net, &params, &ladder)?;
        let mut accs = Vec::with_capacity(k_levels);
        for (k, m) in masks.levels().iter().enumerate() {
            let acc = match &per_level {
                None => evaluate(net, &params, Some(m), val)?,
                Some(states) => {
                    let mut p = params.clone();
                    load_running(&mut p, &states[k]);
                    evaluate(net, &p, Some(m), val)?
                }
            };
            accs.push(acc);
        }
        let losses: Vec<f64> = loss_sums.iter().map(|s| s / steps as f64).collect();
        let avg = accs.iter().sum::<f64>() / k_levels as f64;
        let realloc = match reallocate_on_stall(&mut monitor, avg, net, &params, &ladder)? {
            None => {
                record.snapshot_epochs.push(epoch);
                record.best_epoch = Some(epoch);
                record.best_avg = Some(avg);
                best = Some((params.clone(), masks, ladder.clone(), per_level.clone()));
                false
            }
            Some(fresh) => {
                record.realloc_epochs.push(epoch);
                ladder = fresh;
                true
            }
        };
        record.push_epoch(epoch, &losses, &accs, realloc);
    }
    let (params, masks, ladder, level_bn) = match best {
        Some(b) => b,
        None => {
            let masks = sample_masks(net, &params, &ladder)?;
            (params, masks, ladder, per_level)
        }
    };
    Ok(DressOutcome {
        params,
        masks,
        ladder,
        level_bn,
        record,
        cosine,
    })
}

/// Dense training with the same loop, schedule and sample order as
/// [`dress_train`]. Returns the final weights.
pub fn pretrain(
    net: &NetworkSpec,
    params: ParamStore<f32>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<(ParamStore<f32>, RunRecord)> {
    let mut params = params;
    params.check(net)?;
    let sgd = cfg.sgd();
    let mut velocity = GradStore::zeros_like(&params);
    let steps = steps_per_epoch(train.len(), cfg.batch_size);
    let total = steps * epochs;
    let mut record = RunRecord::default();
    let mut step = 0;
    for epoch in 0..epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for idx in Dataset::batches(&order, cfg.batch_size) {
            let (x, y) = train.batch(idx, &net.input_shape)?;
            let (loss, g) = loss_and_grad(net, &mut params, None, &x, &y, Mode::Train)?;
            loss_sum += check_loss(loss, epoch, step, 1, net)?;
            sgd_step(&mut params, &g, &mut velocity, cosine_lr(step, total, cfg.lr), &sgd, UpdateScope::ALL)?;
            step += 1;
        }
        let acc = evaluate(net, &params, None, val)?;
        record.push_epoch(epoch, &[loss_sum / steps as f64], &[acc], false);
    }
    Ok((params, record))
}
