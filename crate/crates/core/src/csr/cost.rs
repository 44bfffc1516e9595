//! Storage and compute accounting.
//!
//! FLOPs are multiply-accumulates of conv and fc layers. A sparse layer at
//! level `k` costs `nnz * (4 + 1)` bytes (f32 value plus 8-bit index) plus
//! `4 * K` bytes of prefix counts; biases and BN parameters are dense f32.

use std::fmt;

use serde::Serialize;

use crate::csr::format::DressCsr;
use crate::error::{DressError, Result};
use crate::net::spec::{LayerKind, NetworkSpec};

/// Per-layer weight density used for accounting.
#[derive(Clone, Copy, Debug)]
pub enum Density<'a> {
    Dense,
    /// Nonzeros of every sampled layer (in layer order) of a `levels`-level model.
    Sparse { nnz: &'a [usize], levels: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub layer: usize,
    pub name: String,
    pub kind: &'static str,
    pub nnz: usize,
    pub memory_bytes: u64,
    pub flops: u64,
    /// Elementwise work outside conv/fc (BN, ReLU, pooling, residual adds).
    pub other_ops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub memory_bytes: u64,
    pub flops: u64,
    pub other_ops: u64,
    /// Extra storage for one BN state (scale, shift, mean, var) per level.
    pub bn_variant_bytes: u64,
}

fn kind_name(kind: &LayerKind) -> &'static str {
    match kind {
        LayerKind::FullyConnected { .. } => "fully-connected",
        LayerKind::Conv2d { .. } => "conv2d",
        LayerKind::BatchNorm { .. } => "batch-norm",
        LayerKind::Relu => "relu",
        LayerKind::AvgPool { .. } => "avg-pool",
        LayerKind::Flatten => "flatten",
        LayerKind::ResidualAdd { .. } => "residual-add",
    }
}

pub fn cost_report(net: &NetworkSpec, density: Density<'_>) -> Result<CostReport> {
    let shapes = net.shapes()?;
    let sampled = net.sampled_layers();
    if let Density::Sparse { nnz, .. } = density {
        if nnz.len() != sampled.len() {
            return Err(DressError::shape(format!(
                "{} nonzero counts for {} sampled layers",
                nnz.len(),
                sampled.len()
            )));
        }
    }
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut bn_channels = 0u64;
    let mut next_sampled = 0;
    for (i, spec) in net.layers.iter().enumerate() {
        let out = &shapes[i + 1];
        let out_len: u64 = out.iter().product::<usize>() as u64;
        let mut c = LayerCost {
            layer: i,
            name: spec.name.clone(),
            kind: kind_name(&spec.kind),
            nnz: 0,
            memory_bytes: 0,
            flops: 0,
            other_ops: 0,
        };
        match spec.kind {
            LayerKind::FullyConnected { .. } | LayerKind::Conv2d { .. } => {
                let total: usize = spec.weight_shape().expect("sampled").iter().product();
                let positions = if out.len() == 3 { (out[1] * out[2]) as u64 } else { 1 };
                let bias = if spec.has_bias() { 4 * out[0] as u64 } else { 0 };
                match density {
                    Density::Dense => {
                        c.nnz = total;
                        c.memory_bytes = 4 * total as u64 + bias;
                    }
                    Density::Sparse { nnz, levels } => {
                        c.nnz = nnz[next_sampled];
                        if c.nnz > total {
                            return Err(DressError::shape(format!(
                                "{} nonzeros exceed {} weights in {}",
                                c.nnz, total, spec.name
                            )));
                        }
                        c.memory_bytes = 5 * c.nnz as u64 + 4 * levels as u64 + bias;
                    }
                }
                c.flops = c.nnz as u64 * positions;
                next_sampled += 1;
            }
            LayerKind::BatchNorm { channels } => {
                c.memory_bytes = 8 * channels as u64;
                c.other_ops = 2 * out_len;
                bn_channels += channels as u64;
            }
            LayerKind::Relu | LayerKind::ResidualAdd { .. } => c.other_ops = out_len,
            LayerKind::AvgPool { kernel, .. } => c.other_ops = out_len * (kernel * kernel) as u64,
            LayerKind::Flatten => {}
        }
        layers.push(c);
    }
    let bn_variant_bytes = match density {
        Density::Dense => 0,
        Density::Sparse { levels, .. } => 16 * bn_channels * levels as u64,
    };
    Ok(CostReport {
        memory_bytes: layers.iter().map(|l| l.memory_bytes).sum(),
        flops: layers.iter().map(|l| l.flops).sum(),
        other_ops: layers.iter().map(|l| l.other_ops).sum(),
        layers,
        bn_variant_bytes,
    })
}

pub fn memory_cost(net: &NetworkSpec, density: Density<'_>) -> Result<u64> {
    cost_report(net, density).map(|r| r.memory_bytes)
}

pub fn flops_count(net: &NetworkSpec, density: Density<'_>) -> Result<u64> {
    cost_report(net, density).map(|r| r.flops)
}

impl DressCsr {
    /// Cost of subnet `k` (1-based) as stored in these tables.
    pub fn cost(&self, k: usize) -> Result<CostReport> {
        let nnz = self.nnz_per_layer(k)?;
        cost_report(
            &self.network,
            Density::Sparse {
                nnz: &nnz,
                levels: self.k(),
            },
        )
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:<16} {:>12} {:>14} {:>16}", "layer", "kind", "nnz", "bytes", "flops")?;
        for l in self.layers.iter().filter(|l| l.memory_bytes > 0 || l.flops > 0) {
            writeln!(
                f,
                "{:<24} {:<16} {:>12} {:>14} {:>16}",
                l.name, l.kind, l.nnz, l.memory_bytes, l.flops
            )?;
        }
        writeln!(f, "memory: {:.4} MB", self.memory_bytes as f64 / 1e6)?;
        writeln!(f, "flops: {:.2} M (multiply-accumulates)", self.flops as f64 / 1e6)?;
        writeln!(f, "other elementwise ops: {}", self.other_ops)?;
        write!(f, "per-level BN state: {} bytes", self.bn_variant_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b
    }

    #[test]
    fn resnet20_dense_cost() {
        let r = cost_report(&NetworkSpec::resnet20(), Density::Dense).unwrap();
        let mflops = r.flops as f64 / 1e6;
        let mb = r.memory_bytes as f64 / 1e6;
        assert!(rel(mflops, 41.0) <= 0.02, "{} MFLOPs", mflops);
        assert!(rel(mb, 1.09) <= 0.01, "{} MB", mb);
    }

    #[test]
    fn resnet50_dense_cost() {
        let r = cost_report(&NetworkSpec::resnet50(), Density::Dense).unwrap();
        let mflops = r.flops as f64 / 1e6;
        let mb = r.memory_bytes as f64 / 1e6;
        assert!(rel(mflops, 4089.0) <= 0.02, "{} MFLOPs", mflops);
        assert!(rel(mb, 102.23) <= 0.01, "{} MB", mb);
    }

    #[test]
    fn sparse_layer_bytes() {
        let net = NetworkSpec {
            name: "one".into(),
            input_shape: vec![40, 5, 5],
            classes: 10,
            layers: vec![
                crate::net::spec::LayerSpec {
                    name: "conv".into(),
                    kind: LayerKind::Conv2d {
                        in_channels: 40,
                        out_channels: 10,
                        kernel: 5,
                        stride: 1,
                        padding: 0,
                        bias: false,
                    },
                    input: None,
                },
                crate::net::spec::LayerSpec {
                    name: "flatten".into(),
                    kind: LayerKind::Flatten,
                    input: None,
                },
            ],
        };
        let r = cost_report(&net, Density::Sparse { nnz: &[1000], levels: 3 }).unwrap();
        assert_eq!(r.memory_bytes, 5012);
        assert_eq!(r.flops, 1000);
    }

    #[test]
    fn dense_fc_flops() {
        let net = NetworkSpec::mlp(&[10], &[], 10, false);
        assert_eq!(flops_count(&net, Density::Dense).unwrap(), 100);
        assert!(flops_count(&net, Density::Sparse { nnz: &[101], levels: 1 }).is_err());
    }
}
