use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{DressError, Result};
use crate::net::graph::Mode;
use crate::net::optim::{cosine_lr, sgd_step, UpdateScope};
use crate::net::params::{BnState, GradStore, LayerParams, ParamStore};
use crate::net::spec::NetworkSpec;
use crate::sampling::SubnetMask;
use crate::train::common::{check_loss, epoch_order, loss_and_grad, steps_per_epoch};

fn same_weights(a: &ParamStore<f32>, b: &ParamStore<f32>) -> bool {
    a.layers.iter().zip(&b.layers).all(|(x, y)| match (x, y) {
        (LayerParams::Dense(x), LayerParams::Dense(y)) => {
            let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            bits(x.weight.data()) == bits(y.weight.data())
                && x.bias.as_deref().map(bits) == y.bias.as_deref().map(bits)
        }
        _ => true,
    })
}

/// Fine-tunes only the BN layers of subnet `w * mask`: scale and shift by
/// SGD, running statistics by train-mode forwards. Conv and fc weights are
/// never written. Zero epochs return the current BN state.
pub fn bn_posttrain(
    net: &NetworkSpec,
    params: &ParamStore<f32>,
    mask: &SubnetMask,
    train: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<BnState<f32>> {
    let p = bn_posttrain_params(net, params, mask, train, cfg, epochs)?;
    if !same_weights(params, &p) {
        return Err(DressError::invariant("BN post-training changed conv/fc weights"));
    }
    Ok(p.bn_state())
}

/// Like [`bn_posttrain`] but returns the whole parameter store after the run.
pub fn bn_posttrain_params(
    net: &NetworkSpec,
    params: &ParamStore<f32>,
    mask: &SubnetMask,
    train: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<ParamStore<f32>> {
    let mut p = params.clone();
    let sgd = cfg.sgd();
    let mut velocity = GradStore::zeros_like(&p);
    let steps = steps_per_epoch(train.len(), cfg.batch_size);
    let total = steps * epochs;
    let mut step = 0;
    for epoch in 0..epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        for idx in Dataset::batches(&order, cfg.batch_size) {
            let (x, y) = train.batch(idx, &net.input_shape)?;
            let (loss, g) = loss_and_grad(net, &mut p, Some(mask), &x, &y, Mode::Train)?;
            check_loss(loss, epoch, step, 0, net)?;
            sgd_step(&mut p, &g, &mut velocity, cosine_lr(step, total, cfg.bn_lr), &sgd, UpdateScope::BN_ONLY)?;
            step += 1;
        }
    }
    Ok(p)
}
