use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::{eval_accuracy, Dataset};
use crate::error::{DressError, Result};
use crate::net::graph::{backward, forward, predict, Mode};
use crate::net::loss::cross_entropy_loss;
use crate::net::optim::{cosine_lr, sgd_step, UpdateScope};
use crate::net::params::{GradStore, ParamStore};
use crate::net::spec::NetworkSpec;
use crate::sampling::{Mask, SubnetMask};
use crate::tensor::Tensor;

pub(crate) const EVAL_BATCH: usize = 500;

/// Sample order of one epoch; depends only on the seed and the epoch.
pub(crate) fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub(crate) fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch.max(1))
}

/// Eval-mode accuracy of one subnet.
pub fn evaluate(net: &NetworkSpec, params: &ParamStore<f32>, mask: Option<&SubnetMask>, ds: &Dataset) -> Result<f64> {
    eval_accuracy(ds, net.classes, &net.input_shape, EVAL_BATCH, |x| predict(net, params, mask, x))
}

pub(crate) fn check_loss(loss: f32, epoch: usize, step: usize, subnet: usize, net: &NetworkSpec) -> Result<f64> {
    if !loss.is_finite() {
        return Err(DressError::Numeric {
            layer: net.layers.len(),
            detail: format!(
                "non-finite loss {} at epoch {}, iteration {}, subnet {}",
                loss, epoch, step, subnet
            ),
        });
    }
    Ok(loss as f64)
}

/// Loss and raw gradient of one train-mode forward/backward.
pub(crate) fn loss_and_grad(
    net: &NetworkSpec,
    params: &mut ParamStore<f32>,
    mask: Option<&SubnetMask>,
    x: &Tensor<f32>,
    y: &[usize],
    mode: Mode,
) -> Result<(f32, GradStore<f32>)> {
    let (logits, cache) = forward(net, params, mask, x, mode)?;
    let (loss, dlogits) = cross_entropy_loss(&logits, y)?;
    let grads = backward(net, params, &cache, &dlogits)?;
    Ok((loss, grads))
}

/// `a` minus `b`, layer by layer.
pub(crate) fn mask_minus(a: &SubnetMask, b: &SubnetMask) -> SubnetMask {
    SubnetMask::new(
        a.layers()
            .iter()
            .enumerate()
            .map(|(i, m)| m.as_ref().map(|m| b.layer(i).map_or_else(|| m.clone(), |o| m.minus(o))))
            .collect(),
    )
}

/// Mask with no entries on every sampled layer.
pub(crate) fn empty_mask(net: &NetworkSpec) -> SubnetMask {
    let dense = SubnetMask::dense(net);
    SubnetMask::new(
        dense
            .layers()
            .iter()
            .map(|m| m.as_ref().map(|m| Mask::zeros(m.len())))
            .collect(),
    )
}

/// True if every weight under `support` is bit-identical in `a` and `b`.
pub(crate) fn frozen_on(net: &NetworkSpec, a: &ParamStore<f32>, b: &ParamStore<f32>, support: &SubnetMask) -> bool {
    net.sampled_layers().into_iter().all(|i| {
        let (wa, wb) = (a.weight(i).unwrap().data(), b.weight(i).unwrap().data());
        let bits = support.layer(i).map(|m| m.bits());
        wa.iter().zip(wb).enumerate().all(|(j, (x, y))| {
            bits.map_or(true, |m| !m[j]) || x.to_bits() == y.to_bits()
        })
    })
}

/// Trains one fixed subnet with a cosine schedule that restarts at
/// `cfg.lr`. Updates are confined to `update`. Returns per-epoch mean loss
/// and validation accuracy.
pub(crate) fn finetune(
    net: &NetworkSpec,
    params: &mut ParamStore<f32>,
    mask: &SubnetMask,
    update: &SubnetMask,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
    epoch_offset: usize,
) -> Result<Vec<(f64, f64)>> {
    let sgd = cfg.sgd();
    let steps = steps_per_epoch(train.len(), cfg.batch_size);
    let total = steps * epochs;
    let mut velocity = GradStore::zeros_like(params);
    let scope = UpdateScope {
        weights: true,
        batch_norm: true,
        only: Some(update),
    };
    let mut out = Vec::with_capacity(epochs);
    let mut step = 0;
    for epoch in 0..epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch_offset + epoch);
        let mut loss_sum = 0.0;
        for idx in Dataset::batches(&order, cfg.batch_size) {
            let (x, y) = train.batch(idx, &net.input_shape)?;
            let (loss, mut g) = loss_and_grad(net, params, Some(mask), &x, &y, Mode::Train)?;
            loss_sum += check_loss(loss, epoch_offset + epoch, step, 1, net)?;
            g.apply_mask(update);
            sgd_step(params, &g, &mut velocity, cosine_lr(step, total, cfg.lr), &sgd, scope)?;
            step += 1;
        }
        let acc = evaluate(net, params, Some(mask), val)?;
        out.push((loss_sum / steps as f64, acc));
    }
    Ok(out)
}
