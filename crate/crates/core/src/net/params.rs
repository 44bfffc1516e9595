use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DressError, Result};
use crate::net::spec::{LayerKind, NetworkSpec};
use crate::sampling::SubnetMask;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

/// Batch-norm affine parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T: Real> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> BnParams<T> {
    pub fn identity(channels: usize) -> Self {
        BnParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams<T: Real> {
    Stateless,
    Dense(DenseParams<T>),
    BatchNorm(BnParams<T>),
}

/// The state of every BN layer of a network, in layer order. One of these per
/// subnet is produced by BN post-training.
pub type BnState<T = f32> = Vec<BnParams<T>>;

/// Backbone parameters for a [`NetworkSpec`], indexed by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    pub layers: Vec<LayerParams<T>>,
    version: u64,
}

impl<T: Real> ParamStore<T> {
    /// He-normal weights, zero biases, identity BN.
    pub fn init(net: &NetworkSpec, seed: u64) -> Result<Self> {
        net.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = net
            .layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::FullyConnected { .. } | LayerKind::Conv2d { .. } => {
                    let shape = l.weight_shape().expect("sampled layer");
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    let data = (0..shape.iter().product::<usize>())
                        .map(|_| T::from_f64_lossy(normal.sample(&mut rng)))
                        .collect();
                    LayerParams::Dense(DenseParams {
                        weight: Tensor::from_vec(&shape, data).expect("shape matches"),
                        bias: l.has_bias().then(|| vec![T::zero(); shape[0]]),
                    })
                }
                LayerKind::BatchNorm { channels } => LayerParams::BatchNorm(BnParams::identity(channels)),
                _ => LayerParams::Stateless,
            })
            .collect();
        Ok(ParamStore { layers, version: 0 })
    }

    /// Counter bumped on every optimizer step; forward caches remember it.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn dense(&self, layer: usize) -> Option<&DenseParams<T>> {
        match &self.layers[layer] {
            LayerParams::Dense(d) => Some(d),
            _ => None,
        }
    }

    pub fn dense_mut(&mut self, layer: usize) -> Option<&mut DenseParams<T>> {
        match &mut self.layers[layer] {
            LayerParams::Dense(d) => Some(d),
            _ => None,
        }
    }

    pub fn bn(&self, layer: usize) -> Option<&BnParams<T>> {
        match &self.layers[layer] {
            LayerParams::BatchNorm(b) => Some(b),
            _ => None,
        }
    }

    pub fn bn_mut(&mut self, layer: usize) -> Option<&mut BnParams<T>> {
        match &mut self.layers[layer] {
            LayerParams::BatchNorm(b) => Some(b),
            _ => None,
        }
    }

    pub fn weight(&self, layer: usize) -> Option<&Tensor<T>> {
        self.dense(layer).map(|d| &d.weight)
    }

    /// Checks every tensor against the architecture.
    pub fn check(&self, net: &NetworkSpec) -> Result<()> {
        if self.layers.len() != net.layers.len() {
            return Err(DressError::shape(format!(
                "parameter store has {} layers, network has {}",
                self.layers.len(),
                net.layers.len()
            )));
        }
        for (i, (p, l)) in self.layers.iter().zip(&net.layers).enumerate() {
            let ok = match (p, &l.kind) {
                (LayerParams::Dense(d), _) if l.is_sampled() => {
                    Some(d.weight.shape().to_vec()) == l.weight_shape()
                        && d.bias.as_ref().map(|b| b.len()) == l.has_bias().then(|| d.weight.shape()[0])
                }
                (LayerParams::BatchNorm(b), LayerKind::BatchNorm { channels }) => {
                    b.gamma.len() == *channels
                        && b.beta.len() == *channels
                        && b.running_mean.len() == *channels
                        && b.running_var.len() == *channels
                        && b.running_var.iter().all(|v| *v >= T::zero())
                }
                (LayerParams::Stateless, k) => !matches!(
                    k,
                    LayerKind::FullyConnected { .. } | LayerKind::Conv2d { .. } | LayerKind::BatchNorm { .. }
                ),
                _ => false,
            };
            if !ok {
                return Err(DressError::shape(format!(
                    "parameters of layer {} ({}) do not match its spec",
                    i, l.name
                )));
            }
        }
        Ok(())
    }

    /// Copy with every masked-out weight set to zero.
    pub fn masked(&self, mask: &SubnetMask) -> Self {
        let mut out = self.clone();
        for (i, layer) in out.layers.iter_mut().enumerate() {
            if let (LayerParams::Dense(d), Some(m)) = (layer, mask.layer(i)) {
                for (w, &keep) in d.weight.data_mut().iter_mut().zip(m.bits()) {
                    if !keep {
                        *w = T::zero();
                    }
                }
            }
        }
        out
    }

    pub fn bn_state(&self) -> BnState<T> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerParams::BatchNorm(b) => Some(b.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn set_bn_state(&mut self, state: &BnState<T>) -> Result<()> {
        let mut it = state.iter();
        for layer in self.layers.iter_mut() {
            if let LayerParams::BatchNorm(b) = layer {
                let src = it
                    .next()
                    .ok_or_else(|| DressError::shape("BN state has too few layers"))?;
                if src.channels() != b.channels() {
                    return Err(DressError::shape("BN state channel count differs"));
                }
                *b = src.clone();
            }
        }
        if it.next().is_some() {
            return Err(DressError::shape("BN state has too many layers"));
        }
        Ok(())
    }

    pub fn with_bn_state(&self, state: &BnState<T>) -> Result<Self> {
        let mut p = self.clone();
        p.set_bn_state(state)?;
        Ok(p)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::from_f64_lossy(x.to_f64_lossy())).collect::<Vec<U>>();
        ParamStore {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    LayerParams::Stateless => LayerParams::Stateless,
                    LayerParams::Dense(d) => LayerParams::Dense(DenseParams {
                        weight: d.weight.cast(),
                        bias: d.bias.as_deref().map(conv),
                    }),
                    LayerParams::BatchNorm(b) => LayerParams::BatchNorm(BnParams {
                        gamma: conv(&b.gamma),
                        beta: conv(&b.beta),
                        running_mean: conv(&b.running_mean),
                        running_var: conv(&b.running_var),
                    }),
                })
                .collect(),
            version: self.version,
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DRSW";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes a tensor as `rank u32, extents u32[rank], f32[]`, little-endian.
pub(crate) fn write_tensor(w: &mut impl Write, shape: &[usize], data: &[f32]) -> Result<()> {
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> DressError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        DressError::format("truncated file")
    } else {
        DressError::Io(e)
    }
}

pub(crate) fn read_tensor(r: &mut impl Read) -> Result<Tensor<f32>> {
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(DressError::format(format!("implausible tensor rank {}", rank)));
    }
    let shape = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(&shape, data)
}

impl ParamStore<f32> {
    /// Binary checkpoint: magic `DRSW`, version, layer count, then per layer a
    /// tensor count followed by the tensors (weight, bias; or BN gamma, beta,
    /// running mean, running var).
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            match layer {
                LayerParams::Stateless => w.write_all(&0u32.to_le_bytes())?,
                LayerParams::Dense(d) => {
                    let n = 1 + d.bias.is_some() as u32;
                    w.write_all(&n.to_le_bytes())?;
                    write_tensor(w, d.weight.shape(), d.weight.data())?;
                    if let Some(b) = &d.bias {
                        write_tensor(w, &[b.len()], b)?;
                    }
                }
                LayerParams::BatchNorm(b) => {
                    w.write_all(&4u32.to_le_bytes())?;
                    for v in [&b.gamma, &b.beta, &b.running_mean, &b.running_var] {
                        write_tensor(w, &[v.len()], v)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read, net: &NetworkSpec) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(DressError::format("bad checkpoint magic"));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(DressError::format(format!("unsupported checkpoint version {}", version)));
        }
        let count = read_u32(r)? as usize;
        if count != net.layers.len() {
            return Err(DressError::shape(format!(
                "checkpoint has {} layers, network has {}",
                count,
                net.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(count);
        for spec in &net.layers {
            let n = read_u32(r)?;
            let tensors = (0..n).map(|_| read_tensor(r)).collect::<Result<Vec<_>>>()?;
            let layer = match (&spec.kind, tensors.len()) {
                (LayerKind::BatchNorm { .. }, 4) => {
                    let mut it = tensors.into_iter().map(|t| t.into_data());
                    LayerParams::BatchNorm(BnParams {
                        gamma: it.next().expect("4 tensors"),
                        beta: it.next().expect("4 tensors"),
                        running_mean: it.next().expect("4 tensors"),
                        running_var: it.next().expect("4 tensors"),
                    })
                }
                (_, 1 | 2) if spec.is_sampled() => {
                    let mut it = tensors.into_iter();
                    let weight = it.next().expect("weight tensor");
                    LayerParams::Dense(DenseParams {
                        weight,
                        bias: it.next().map(|t| t.into_data()),
                    })
                }
                (_, 0) => LayerParams::Stateless,
                _ => {
                    return Err(DressError::format(format!(
                        "unexpected tensor count {} for layer {}",
                        n, spec.name
                    )))
                }
            };
            layers.push(layer);
        }
        let store = ParamStore { layers, version: 0 };
        store.check(net)?;
        Ok(store)
    }
}

/// Gradients (or optimizer velocity) with the same layout as [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrads<T: Real> {
    Stateless,
    Dense { weight: Vec<T>, bias: Option<Vec<T>> },
    BatchNorm { gamma: Vec<T>, beta: Vec<T> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradStore<T: Real = f32> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Real> GradStore<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        GradStore {
            layers: params
                .layers
                .iter()
                .map(|l| match l {
                    LayerParams::Stateless => LayerGrads::Stateless,
                    LayerParams::Dense(d) => LayerGrads::Dense {
                        weight: vec![T::zero(); d.weight.len()],
                        bias: d.bias.as_ref().map(|b| vec![T::zero(); b.len()]),
                    },
                    LayerParams::BatchNorm(b) => LayerGrads::BatchNorm {
                        gamma: vec![T::zero(); b.channels()],
                        beta: vec![T::zero(); b.channels()],
                    },
                })
                .collect(),
        }
    }

    pub fn weight(&self, layer: usize) -> Option<&[T]> {
        match &self.layers[layer] {
            LayerGrads::Dense { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self, layer: usize) -> Option<&mut [T]> {
        match &mut self.layers[layer] {
            LayerGrads::Dense { weight, .. } => Some(weight),
            _ => None,
        }
    }

    /// `self += scale * other`, with weight entries additionally multiplied by
    /// `mask` when one is given. Biases and BN parameters are never masked.
    pub fn add_scaled(&mut self, other: &GradStore<T>, scale: T, mask: Option<&SubnetMask>) {
        for (i, (acc, g)) in self.layers.iter_mut().zip(&other.layers).enumerate() {
            match (acc, g) {
                (
                    LayerGrads::Dense { weight: aw, bias: ab },
                    LayerGrads::Dense { weight: gw, bias: gb },
                ) => {
                    match mask.and_then(|m| m.layer(i)) {
                        Some(m) => {
                            for ((a, &x), &keep) in aw.iter_mut().zip(gw).zip(m.bits()) {
                                if keep {
                                    *a += scale * x;
                                }
                            }
                        }
                        None => axpy(aw, scale, gw),
                    }
                    if let (Some(ab), Some(gb)) = (ab, gb) {
                        axpy(ab, scale, gb);
                    }
                }
                (
                    LayerGrads::BatchNorm { gamma: ag, beta: ab },
                    LayerGrads::BatchNorm { gamma: gg, beta: gb },
                ) => {
                    axpy(ag, scale, gg);
                    axpy(ab, scale, gb);
                }
                _ => {}
            }
        }
    }

    /// Zeroes weight entries outside `mask`.
    pub fn apply_mask(&mut self, mask: &SubnetMask) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let (LayerGrads::Dense { weight, .. }, Some(m)) = (layer, mask.layer(i)) {
                for (g, &keep) in weight.iter_mut().zip(m.bits()) {
                    if !keep {
                        *g = T::zero();
                    }
                }
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| match l {
            LayerGrads::Stateless => true,
            LayerGrads::Dense { weight, bias } => {
                weight.iter().all(|v| v.is_zero())
                    && bias.as_ref().map_or(true, |b| b.iter().all(|v| v.is_zero()))
            }
            LayerGrads::BatchNorm { gamma, beta } => {
                gamma.iter().chain(beta).all(|v| v.is_zero())
            }
        })
    }
}

fn axpy<T: Real>(acc: &mut [T], scale: T, x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += scale * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip() {
        let net = NetworkSpec::convnet(&[1, 8, 8], 3);
        let p = ParamStore::<f32>::init(&net, 7).unwrap();
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DRSW");
        let q = ParamStore::read_checkpoint(&mut buf.as_slice(), &net).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let net = NetworkSpec::mlp(&[4], &[3], 2, true);
        let p = ParamStore::<f32>::init(&net, 1).unwrap();
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] ^= 1;
        assert!(ParamStore::read_checkpoint(&mut bad.as_slice(), &net).is_err());
        let short = &buf[..buf.len() - 3];
        assert!(matches!(
            ParamStore::read_checkpoint(&mut &short[..], &net),
            Err(DressError::Format(_))
        ));
    }

    #[test]
    fn init_is_deterministic() {
        let net = NetworkSpec::mlp(&[10], &[8], 3, true);
        let a = ParamStore::<f32>::init(&net, 5).unwrap();
        let b = ParamStore::<f32>::init(&net, 5).unwrap();
        let c = ParamStore::<f32>::init(&net, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.check(&net).unwrap();
    }
}
