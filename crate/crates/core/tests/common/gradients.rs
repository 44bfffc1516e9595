//! Gradient oracles: central differences in f64 and the weighted subnet sum.

use dress::net::graph::{backward, forward, Mode};
use dress::net::loss::cross_entropy_loss;
use dress::net::params::{GradStore, LayerGrads, LayerParams, ParamStore};
use dress::net::spec::{Builder, LayerKind, NetworkSpec};
use dress::sampling::{allocate_layerwise, sample_masks, SubnetMask};
use dress::train::{compute_loss_weights, dress_step_gradient};
use dress::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

/// conv (stride, padding, bias) -> BN -> ReLU -> conv -> BN -> residual add
/// -> avg pool -> flatten -> fc.
pub fn every_kind() -> NetworkSpec {
    let mut b = Builder::new();
    b.push(
        "conv1",
        LayerKind::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 1, padding: 1, bias: true },
    );
    b.push("bn1", LayerKind::BatchNorm { channels: 3 });
    let skip = b.push("relu1", LayerKind::Relu);
    b.push(
        "conv2",
        LayerKind::Conv2d { in_channels: 3, out_channels: 3, kernel: 3, stride: 1, padding: 1, bias: false },
    );
    b.push("bn2", LayerKind::BatchNorm { channels: 3 });
    b.push("add", LayerKind::ResidualAdd { skip });
    b.push(
        "conv3",
        LayerKind::Conv2d { in_channels: 3, out_channels: 4, kernel: 2, stride: 2, padding: 0, bias: true },
    );
    b.push("pool", LayerKind::AvgPool { kernel: 2, stride: 1, padding: 0 });
    b.push("flatten", LayerKind::Flatten);
    b.push("fc", LayerKind::FullyConnected { in_features: 4 * 2 * 2, out_features: 3, bias: true });
    b.finish("every-kind", &[2, 6, 6], 3)
}

fn loss(net: &NetworkSpec, p: &ParamStore<f64>, mask: Option<&SubnetMask>, x: &Tensor<f64>, y: &[usize]) -> f64 {
    let mut p = p.clone();
    let (logits, _) = forward(net, &mut p, mask, x, Mode::Train).unwrap();
    cross_entropy_loss(&logits, y).unwrap().0
}

/// Every trainable scalar as (layer, slot, index); slot 0 weight/gamma, 1 bias/beta.
fn coordinates(p: &ParamStore<f64>) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (i, l) in p.layers.iter().enumerate() {
        match l {
            LayerParams::Dense(d) => {
                out.extend((0..d.weight.len()).map(|j| (i, 0, j)));
                if let Some(b) = &d.bias {
                    out.extend((0..b.len()).map(|j| (i, 1, j)));
                }
            }
            LayerParams::BatchNorm(b) => {
                out.extend((0..b.channels()).map(|j| (i, 0, j)));
                out.extend((0..b.channels()).map(|j| (i, 1, j)));
            }
            LayerParams::Stateless => {}
        }
    }
    out
}

fn slot(p: &mut ParamStore<f64>, (i, s, j): (usize, usize, usize)) -> &mut f64 {
    match (&mut p.layers[i], s) {
        (LayerParams::Dense(d), 0) => &mut d.weight.data_mut()[j],
        (LayerParams::Dense(d), _) => &mut d.bias.as_mut().unwrap()[j],
        (LayerParams::BatchNorm(b), 0) => &mut b.gamma[j],
        (LayerParams::BatchNorm(b), _) => &mut b.beta[j],
        _ => unreachable!(),
    }
}

fn analytic(g: &GradStore<f64>, (i, s, j): (usize, usize, usize)) -> f64 {
    match (&g.layers[i], s) {
        (LayerGrads::Dense { weight, .. }, 0) => weight[j],
        (LayerGrads::Dense { bias, .. }, _) => bias.as_ref().unwrap()[j],
        (LayerGrads::BatchNorm { gamma, .. }, 0) => gamma[j],
        (LayerGrads::BatchNorm { beta, .. }, _) => beta[j],
        _ => unreachable!(),
    }
}

/// Worst relative error between backprop and central differences over every
/// trainable scalar, with the coordinate and both values.
pub fn worst_error(net: &NetworkSpec, mask: Option<&SubnetMask>, seed: u64) -> (f64, Option<((usize, usize, usize), f64, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::<f32>::init(net, seed).unwrap().cast::<f64>();
    for l in params.layers.iter_mut() {
        if let LayerParams::BatchNorm(b) = l {
            b.gamma.iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
            b.beta.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    }
    let batch = 4;
    let n = batch * net.input_len();
    let x = Tensor::from_vec(
        &[&[batch][..], &net.input_shape[..]].concat(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let y: Vec<usize> = (0..batch).map(|i| i % net.classes).collect();

    let mut p = params.clone();
    let (logits, cache) = forward(net, &mut p, mask, &x, Mode::Train).unwrap();
    let (_, dlogits) = cross_entropy_loss(&logits, &y).unwrap();
    let mut g = backward(net, &p, &cache, &dlogits).unwrap();
    if let Some(m) = mask {
        g.apply_mask(m);
    }

    let mut worst = (0.0f64, None);
    for c in coordinates(&params) {
        let masked_out = c.1 == 0
            && mask.and_then(|m| m.layer(c.0)).is_some_and(|m| !m.bits()[c.2]);
        let numeric = if masked_out {
            0.0
        } else {
            let mut plus = params.clone();
            *slot(&mut plus, c) += STEP;
            let mut minus = params.clone();
            *slot(&mut minus, c) -= STEP;
            (loss(net, &plus, mask, &x, &y) - loss(net, &minus, mask, &x, &y)) / (2.0 * STEP)
        };
        let a = analytic(&g, c);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > worst.0 {
            worst = (rel, Some((c, a, numeric)));
        }
    }
    worst
}


/// Every layer kind, dense and under a sampled mask, plus a BN MLP.
pub fn gradcheck_cases() -> Vec<(&'static str, f64)> {
    let net = every_kind();
    let p = ParamStore::<f32>::init(&net, 2).unwrap();
    let ladder = allocate_layerwise(&net, &p, &[0.5]).unwrap();
    let masks = sample_masks(&net, &p, &ladder).unwrap();
    vec![
        ("every kind, dense", worst_error(&net, None, 1).0),
        ("every kind, masked", worst_error(&net, Some(&masks.levels()[0]), 2).0),
        ("mlp with batch norm", worst_error(&NetworkSpec::mlp(&[6], &[5, 4], 3, true), None, 3).0),
    ]
}

/// Compares the joint-step gradient of a 2-layer net against independent
/// per-subnet forward/backward passes. The f32 recomputation adds
/// `pi_k * g_k` on `m_k` in level order and must match bit for bit; an f64
/// recomputation bounds the rounding.
pub fn accumulated_gradient_mismatch() -> Result<(), String> {
    let net = NetworkSpec::mlp(&[6], &[5], 3, false);
    let params = ParamStore::<f32>::init(&net, 11).unwrap();
    let levels = [0.3, 0.6, 0.8];
    let ladder = allocate_layerwise(&net, &params, &levels).unwrap();
    let masks = sample_masks(&net, &params, &ladder).unwrap();
    let weights = compute_loss_weights(&levels, 0.5).unwrap();
    let x = Tensor::from_vec(&[4, 6], (0..24).map(|i| ((i * 37) % 11) as f32 / 5.0 - 1.0).collect()).unwrap();
    let y = vec![0, 1, 2, 1];

    let got = dress_step_gradient(&net, &mut params.clone(), &masks, &weights, &x, &y, true).unwrap();
    let grads: Vec<GradStore<f32>> = masks
        .levels()
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let mut p = params.clone();
            let (logits, cache) = forward(&net, &mut p, Some(m), &x, Mode::Train).unwrap();
            let (loss, dl) = cross_entropy_loss(&logits, &y).unwrap();
            assert_eq!(loss.to_bits(), got.losses[k].to_bits(), "subnet {} loss", k + 1);
            backward(&net, &p, &cache, &dl).unwrap()
        })
        .collect();
    for i in net.sampled_layers() {
        let total = got.total.weight(i).unwrap();
        let mut exact = vec![0.0f32; total.len()];
        let mut wide = vec![0.0f64; total.len()];
        for (k, (m, g)) in masks.levels().iter().zip(&grads).enumerate() {
            let bits = m.layer(i).unwrap().bits();
            for (j, &gv) in g.weight(i).unwrap().iter().enumerate() {
                if bits[j] {
                    exact[j] += weights[k] as f32 * gv;
                    wide[j] += weights[k] * gv as f64;
                }
            }
        }
        let outside = masks.levels()[0].layer(i).unwrap().bits();
        for j in 0..total.len() {
            if total[j].to_bits() != exact[j].to_bits() {
                return Err(format!("layer {} entry {}: {} vs {}", i, j, total[j], exact[j]));
            }
            if !outside[j] && total[j] != 0.0 {
                return Err(format!("layer {} entry {} outside subnet 1 has gradient", i, j));
            }
            if (total[j] as f64 - wide[j]).abs() > 1e-6 * wide[j].abs().max(1e-3) {
                return Err(format!("layer {} entry {}: {} vs f64 {}", i, j, total[j], wide[j]));
            }
        }
        for (k, part) in got.parts.iter().enumerate() {
            let m = masks.levels()[k].layer(i).unwrap().bits();
            if !part.weight(i).unwrap().iter().zip(m).all(|(&g, &b)| b || g == 0.0) {
                return Err(format!("part {} is nonzero outside its mask", k + 1));
            }
        }
    }
    Ok(())
}
