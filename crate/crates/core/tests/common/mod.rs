#![allow(dead_code)]

pub mod gradients;
pub mod props;

use dress::csr::{build, DressCsr};
use dress::net::params::ParamStore;
use dress::net::spec::{Builder, LayerKind, NetworkSpec};
use dress::sampling::{Mask, MaskSet, SubnetMask};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// How the per-row keep counts of a random fixture are chosen.
#[derive(Clone, Copy, Debug)]
pub enum Counts {
    Random,
    AllOnes,
    SingleNonzero,
}

/// A network whose first layer carries random nested, row-uniform masks
/// (every other sampled layer stays dense), and its nested tables.
pub struct Fixture {
    pub net: NetworkSpec,
    pub params: ParamStore<f32>,
    pub masks: MaskSet,
    pub counts: Vec<usize>,
    pub model: DressCsr,
    pub row_len: usize,
}

impl Fixture {
    pub fn weights(&self) -> &[f32] {
        self.params.dense(0).unwrap().weight.data()
    }

    pub fn bits(&self, k: usize) -> &[bool] {
        self.masks.levels()[k - 1].layer(0).unwrap().bits()
    }

    /// Deepest level (1-based) keeping entry `idx` of layer 0, 0 if none.
    pub fn depth(&self, idx: usize) -> usize {
        self.masks.levels().iter().take_while(|m| m.layer(0).unwrap().bits()[idx]).count()
    }
}

fn random_weight(rng: &mut ChaCha8Rng) -> f32 {
    // A coarse grid half the time so that magnitude ties occur.
    if rng.gen_bool(0.5) {
        rng.gen_range(-3i32..=3) as f32 * 0.25
    } else {
        rng.gen_range(-1.0f32..1.0)
    }
}

/// Non-increasing keep counts and, per level, a bit per entry of a
/// `rows x row_len` matrix; each row keeps a prefix of one random permutation.
fn nested_bits(rows: usize, row_len: usize, k: usize, mode: Counts, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<Vec<bool>>) {
    let mut counts: Vec<usize> = match mode {
        Counts::Random => (0..k).map(|_| rng.gen_range(0..=row_len)).collect(),
        Counts::AllOnes => vec![row_len; k],
        Counts::SingleNonzero => vec![1; k],
    };
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let mut levels = vec![vec![false; rows * row_len]; k];
    for r in 0..rows {
        let mut perm: Vec<usize> = (0..row_len).collect();
        perm.shuffle(rng);
        for (lvl, &c) in levels.iter_mut().zip(&counts) {
            for &j in &perm[..c] {
                lvl[r * row_len + j] = true;
            }
        }
    }
    (counts, levels)
}

fn assemble(net: NetworkSpec, k: usize, mode: Counts, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::<f32>::init(&net, seed).unwrap();
    let sampled = net.sampled_layers();
    for &i in &sampled {
        let d = params.dense_mut(i).unwrap();
        d.weight.data_mut().iter_mut().for_each(|w| *w = random_weight(&mut rng));
        if let Some(b) = d.bias.as_mut() {
            b.iter_mut().for_each(|v| *v = rng.gen_range(-1.0f32..1.0));
        }
    }
    let shape = params.dense(sampled[0]).unwrap().weight.shape().to_vec();
    let rows = shape[0];
    let row_len: usize = shape[1..].iter().product();
    let (counts, first) = nested_bits(rows, row_len, k, mode, &mut rng);
    let dense = SubnetMask::dense(&net);
    let masks = MaskSet::new(
        first
            .into_iter()
            .map(|bits| {
                let mut m = dense.clone();
                *m.layer_mut(sampled[0]).unwrap() = Mask::from_bits(bits);
                m
            })
            .collect(),
    );
    let nominal: Vec<f64> = (0..k).map(|i| i as f64 / k as f64).collect();
    let model = build(&net, &params, &masks, &nominal, vec![params.bn_state(); k]).unwrap();
    Fixture {
        net,
        params,
        masks,
        counts,
        model,
        row_len,
    }
}

/// A single fc layer `h x n`.
pub fn fixture(n: usize, h: usize, k: usize, seed: u64, mode: Counts) -> Fixture {
    assemble(NetworkSpec::mlp(&[n], &[], h, false), k, mode, seed)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvCase {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub height: usize,
    pub width: usize,
}

/// A conv layer (no bias) followed by a dense linear head.
pub fn conv_fixture(c: ConvCase, k: usize, seed: u64, mode: Counts) -> Fixture {
    let mut b = Builder::new();
    b.push(
        "conv",
        LayerKind::Conv2d {
            in_channels: c.cin,
            out_channels: c.cout,
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding,
            bias: false,
        },
    );
    b.push("flatten", LayerKind::Flatten);
    let oh = (c.height + 2 * c.padding - c.kernel) / c.stride + 1;
    let ow = (c.width + 2 * c.padding - c.kernel) / c.stride + 1;
    b.push("fc", LayerKind::FullyConnected { in_features: c.cout * oh * ow, out_features: 2, bias: true });
    assemble(b.finish("conv-case", &[c.cin, c.height, c.width], 2), k, mode, seed)
}
