use serde::{Deserialize, Serialize};

use crate::error::{DressError, Result};
use crate::net::params::{GradStore, LayerGrads, LayerParams, ParamStore};
use crate::sampling::SubnetMask;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 5e-4,
            nesterov: true,
        }
    }
}

/// Which coordinates an optimizer step may touch.
#[derive(Clone, Copy, Debug)]
pub struct UpdateScope<'a> {
    /// Update conv/fc weights and biases.
    pub weights: bool,
    /// Update BN scale and shift.
    pub batch_norm: bool,
    /// Restrict weight updates to these entries; everything else (value and
    /// velocity) stays bit-identical.
    pub only: Option<&'a SubnetMask>,
}

impl UpdateScope<'_> {
    pub const ALL: UpdateScope<'static> = UpdateScope {
        weights: true,
        batch_norm: true,
        only: None,
    };

    pub const BN_ONLY: UpdateScope<'static> = UpdateScope {
        weights: false,
        batch_norm: true,
        only: None,
    };
}

#[inline]
fn nesterov_update<T: Real>(w: &mut T, v: &mut T, g: T, lr: T, mu: T, wd: T, nesterov: bool) {
    let g = g + wd * *w;
    *v = mu * *v + g;
    let step = if nesterov { g + mu * *v } else { *v };
    *w -= lr * step;
}

fn update_slice<T: Real>(w: &mut [T], v: &mut [T], g: &[T], lr: T, mu: T, wd: T, nesterov: bool, only: Option<&[bool]>) {
    match only {
        None => {
            for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                nesterov_update(w, v, g, lr, mu, wd, nesterov);
            }
        }
        Some(keep) => {
            for (((w, v), &g), &k) in w.iter_mut().zip(v.iter_mut()).zip(g).zip(keep) {
                if k {
                    nesterov_update(w, v, g, lr, mu, wd, nesterov);
                }
            }
        }
    }
}

/// One SGD step with (Nesterov) momentum on the dense backbone:
/// `g' = g + wd * w; v = mu * v + g'; w -= lr * (g' + mu * v)`.
///
/// Weight decay acts on the backbone weights themselves, independent of any
/// subnet mask. Bumps the parameter version so older forward caches go stale.
pub fn sgd_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &GradStore<T>,
    velocity: &mut GradStore<T>,
    lr: f64,
    cfg: &SgdConfig,
    scope: UpdateScope<'_>,
) -> Result<()> {
    let lr_t = T::from_f64_lossy(lr);
    let mu = T::from_f64_lossy(cfg.momentum);
    let wd = T::from_f64_lossy(cfg.weight_decay);
    for (i, ((p, g), v)) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(velocity.layers.iter_mut())
        .enumerate()
    {
        match (p, g, v) {
            (
                LayerParams::Dense(d),
                LayerGrads::Dense { weight: gw, bias: gb },
                LayerGrads::Dense { weight: vw, bias: vb },
            ) if scope.weights => {
                let only = scope.only.and_then(|m| m.layer(i)).map(|m| m.bits());
                update_slice(d.weight.data_mut(), vw, gw, lr_t, mu, wd, cfg.nesterov, only);
                if let (Some(b), Some(gb), Some(vb)) = (d.bias.as_mut(), gb, vb) {
                    // A bias belongs to its row; it is frozen only when the whole
                    // row is outside the update scope.
                    match only {
                        None => update_slice(b, vb, gb, lr_t, mu, wd, cfg.nesterov, None),
                        Some(keep) => {
                            let row = keep.len() / b.len().max(1);
                            let rows: Vec<bool> = keep.chunks(row.max(1)).map(|r| r.iter().any(|&k| k)).collect();
                            update_slice(b, vb, gb, lr_t, mu, wd, cfg.nesterov, Some(&rows));
                        }
                    }
                }
                if let Some(pos) = d.weight.data().iter().position(|w| !w.is_finite()) {
                    return Err(DressError::Numeric {
                        layer: i,
                        detail: format!("non-finite weight after update at element {}", pos),
                    });
                }
            }
            (
                LayerParams::BatchNorm(bn),
                LayerGrads::BatchNorm { gamma: gg, beta: gbeta },
                LayerGrads::BatchNorm { gamma: vg, beta: vbeta },
            ) if scope.batch_norm => {
                update_slice(&mut bn.gamma, vg, gg, lr_t, mu, wd, cfg.nesterov, None);
                update_slice(&mut bn.beta, vbeta, gbeta, lr_t, mu, wd, cfg.nesterov, None);
                if bn.gamma.iter().chain(&bn.beta).any(|v| !v.is_finite()) {
                    return Err(DressError::Numeric {
                        layer: i,
                        detail: "non-finite BN parameter after update".into(),
                    });
                }
            }
            _ => {}
        }
    }
    params.bump_version();
    Ok(())
}

/// Cosine decay from `lr_init` at step 0 to zero at step `total`.
pub fn cosine_lr(step: usize, total: usize, lr_init: f64) -> f64 {
    if total == 0 {
        return lr_init;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * lr_init * (1.0 + (std::f64::consts::PI * t).cos())
}
