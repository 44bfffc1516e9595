//! Sparse execution of one stored subnet.

use crate::csr::{DressCsr, SubnetCsr};
use crate::error::{DressError, Result};
use crate::net::graph::{avg_pool, bn_eval, im2col, ConvGeom};
use crate::net::params::BnParams;
use crate::net::spec::LayerKind;
use crate::par;
use crate::tensor::Tensor;

/// `out[rows, n] = a @ b` with `b` row-major `[a.cols, n]`. Each output row
/// accumulates in stored (importance) order. Returns the multiply-accumulates.
pub fn spmm(a: &SubnetCsr<'_>, b: &[f32], n: usize, out: &mut [f32]) -> Result<u64> {
    if b.len() != a.cols * n || out.len() != a.rows * n {
        return Err(DressError::shape(format!(
            "spmm of {}x{} by {} values into {}",
            a.rows,
            a.cols,
            b.len(),
            out.len()
        )));
    }
    par::for_each_chunk_mut(out, n, |r, dst| {
        dst.fill(0.0);
        let (cols, vals) = a.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            let src = &b[c as usize * n..(c as usize + 1) * n];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += v * s;
            }
        }
    });
    Ok((a.nnz() * n) as u64)
}

/// `out[batch, rows] = x @ a^T` for `x` row-major `[batch, a.cols]`.
pub fn sparse_linear(a: &SubnetCsr<'_>, x: &[f32], batch: usize, out: &mut [f32]) -> Result<u64> {
    if x.len() != batch * a.cols || out.len() != batch * a.rows {
        return Err(DressError::shape(format!(
            "sparse linear {}x{} on {} inputs",
            a.rows,
            a.cols,
            x.len()
        )));
    }
    par::for_each_chunk_mut(out, a.rows.max(1), |bi, dst| {
        let xs = &x[bi * a.cols..(bi + 1) * a.cols];
        for (r, d) in dst.iter_mut().enumerate() {
            let (cols, vals) = a.row(r);
            let mut acc = 0.0f32;
            for (&c, &v) in cols.iter().zip(vals) {
                acc += v * xs[c as usize];
            }
            *d = acc;
        }
    });
    Ok((a.nnz() * batch) as u64)
}

/// Convolution of a `[B, C, H, W]` batch with a sparse `[out, C*k*k]` filter
/// matrix; returns `[B, out, OH, OW]` and the multiply-accumulates.
pub fn sparse_conv2d(a: &SubnetCsr<'_>, x: &[f32], batch: usize, geom: &ConvGeom) -> Result<(Vec<f32>, u64)> {
    if a.cols != geom.row_len() {
        return Err(DressError::shape(format!(
            "filter rows of {} for patches of {}",
            a.cols,
            geom.row_len()
        )));
    }
    let p = geom.out_positions();
    let cols = im2col(x, batch, geom);
    let mut ym = vec![0.0f32; a.rows * batch * p];
    let macs = spmm(a, &cols, batch * p, &mut ym)?;
    let mut y = vec![0.0f32; batch * a.rows * p];
    let rows = a.rows;
    par::for_each_chunk_mut(&mut y, p, |bo, dst| {
        let (bi, o) = (bo / rows, bo % rows);
        dst.copy_from_slice(&ym[o * batch * p + bi * p..o * batch * p + (bi + 1) * p]);
    });
    Ok((y, macs))
}

/// Logits of a sparse forward and the multiply-accumulates it performed.
#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Tensor<f32>,
    pub macs: u64,
}

/// Subnet `level` of a [`DressCsr`] bound to its BN state, ready to run.
pub struct SparseExecPlan<'a> {
    csr: &'a DressCsr,
    level: usize,
    shapes: Vec<Vec<usize>>,
    weights: Vec<Option<SubnetCsr<'a>>>,
    bn: Vec<Option<&'a BnParams<f32>>>,
}

impl<'a> SparseExecPlan<'a> {
    pub fn new(csr: &'a DressCsr, level: usize) -> Result<Self> {
        let net = &csr.network;
        let shapes = net.shapes()?;
        let mut weights = vec![None; net.layers.len()];
        for l in &csr.layers {
            weights[l.layer] = Some(l.extract(level)?);
        }
        let mut bn = vec![None; net.layers.len()];
        for (&i, b) in net.bn_layers().iter().zip(csr.bn_variant(level)?) {
            bn[i] = Some(b);
        }
        Ok(SparseExecPlan {
            csr,
            level,
            shapes,
            weights,
            bn,
        })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn infer(&self, batch: &Tensor<f32>) -> Result<Inference> {
        let net = &self.csr.network;
        let shape = batch.shape();
        if shape.len() != net.input_shape.len() + 1 || shape[1..] != net.input_shape[..] {
            return Err(DressError::shape(format!(
                "batch shape {:?} does not match input shape {:?}",
                shape, net.input_shape
            )));
        }
        let b = shape[0];
        let mut last_use = vec![0usize; net.layers.len() + 1];
        for i in 0..net.layers.len() {
            last_use[net.input_of(i)] = i;
            if let LayerKind::ResidualAdd { skip } = net.layers[i].kind {
                last_use[skip] = i;
            }
        }
        let mut acts: Vec<Option<Vec<f32>>> = vec![None; net.layers.len() + 1];
        acts[0] = Some(batch.data().to_vec());
        let mut macs = 0u64;
        for (i, layer) in net.layers.iter().enumerate() {
            let src = net.input_of(i);
            let in_shape = &self.shapes[src];
            let x = acts[src].as_ref().expect("activation computed");
            let bias = self.csr.layer(i).and_then(|l| l.bias.as_deref());
            let mut y = match layer.kind {
                LayerKind::FullyConnected { out_features, .. } => {
                    let w = self.weights[i].as_ref().expect("sampled layer");
                    let mut y = vec![0.0; b * out_features];
                    macs += sparse_linear(w, x, b, &mut y)?;
                    y
                }
                LayerKind::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let w = self.weights[i].as_ref().expect("sampled layer");
                    let g = ConvGeom::new(in_shape, kernel, stride, padding);
                    let (y, m) = sparse_conv2d(w, x, b, &g)?;
                    macs += m;
                    y
                }
                LayerKind::BatchNorm { channels } => {
                    let spatial = in_shape[1..].iter().product::<usize>();
                    bn_eval(x, channels, spatial, self.bn[i].expect("bn layer"))
                }
                LayerKind::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
                LayerKind::AvgPool {
                    kernel,
                    stride,
                    padding,
                } => avg_pool(x, b, &ConvGeom::new(in_shape, kernel, stride, padding)),
                LayerKind::Flatten => x.clone(),
                LayerKind::ResidualAdd { skip } => {
                    let other = acts[skip].as_ref().expect("skip activation computed");
                    x.iter().zip(other).map(|(&a, &c)| a + c).collect()
                }
            };
            if let Some(bias) = bias {
                let per = self.shapes[i + 1][1..].iter().product::<usize>();
                let rows = bias.len();
                par::for_each_chunk_mut(&mut y, per, |idx, dst| {
                    let v = bias[idx % rows];
                    dst.iter_mut().for_each(|d| *d += v);
                });
            }
            if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
                return Err(DressError::Numeric {
                    layer: i,
                    detail: format!("non-finite activation at element {} of {}", pos, layer.name),
                });
            }
            acts[i + 1] = Some(y);
            for (a, &last) in last_use.iter().enumerate().take(i + 1) {
                if last == i {
                    acts[a] = None;
                }
            }
        }
        let logits = acts.pop().flatten().expect("output activation");
        Ok(Inference {
            logits: Tensor::from_vec(&[b, net.classes], logits)?,
            macs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csr::{build, flops_count, Density};
    use crate::net::graph::predict;
    use crate::net::params::ParamStore;
    use crate::net::spec::NetworkSpec;
    use crate::sampling::{allocate_layerwise, sample_masks};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check_against_dense(net: NetworkSpec, input: &[usize]) {
        let mut p = ParamStore::<f32>::init(&net, 5).unwrap();
        // Non-trivial BN statistics and biases.
        for bn in p.layers.iter_mut() {
            if let crate::net::params::LayerParams::BatchNorm(b) = bn {
                for (c, (m, v)) in b.running_mean.iter_mut().zip(b.running_var.iter_mut()).enumerate() {
                    *m = 0.05 * c as f32 - 0.1;
                    *v = 0.5 + 0.01 * c as f32;
                }
            }
            if let crate::net::params::LayerParams::Dense(d) = bn {
                if let Some(b) = d.bias.as_mut() {
                    b.iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * i as f32);
                }
            }
        }
        let levels = [0.5, 0.8, 0.9];
        let ladder = allocate_layerwise(&net, &p, &levels).unwrap();
        let masks = sample_masks(&net, &p, &ladder).unwrap();
        let t = build(&net, &p, &masks, &levels, vec![p.bn_state(); 3]).unwrap();
        let batch = random_batch(input, 11);
        for k in 1..=3 {
            let plan = SparseExecPlan::new(&t, k).unwrap();
            let out = plan.infer(&batch).unwrap();
            let oracle = predict(&net, &p, Some(masks.level(k).unwrap()), &batch).unwrap();
            for (a, o) in out.logits.data().iter().zip(oracle.data()) {
                assert!((a - o).abs() <= 1e-5 * (1.0 + o.abs()), "level {}: {} vs {}", k, a, o);
            }
            let nnz = t.nnz_per_layer(k).unwrap();
            let flops = flops_count(&net, Density::Sparse { nnz: &nnz, levels: 3 }).unwrap();
            assert_eq!(out.macs, flops * input[0] as u64);
        }
    }

    #[test]
    fn mlp_matches_dense_masked_oracle() {
        check_against_dense(NetworkSpec::preset("mlp-small").unwrap(), &[4, 64]);
    }

    #[test]
    fn convnet_matches_dense_masked_oracle() {
        check_against_dense(NetworkSpec::convnet(&[1, 12, 12], 10), &[3, 1, 12, 12]);
    }

    #[test]
    fn spmm_small_example() {
        // [[2, 0, 1], [0, 3, 0]] stored as (col 0, col 2) and (col 1, pad col 0 unused).
        let idx = [0u32, 2, 1, 0];
        let val = [2.0f32, 1.0, 3.0, 0.0];
        let a = SubnetCsr::from_tables(2, 3, 1, 2, &idx, &val).unwrap();
        let b = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = [0.0; 4];
        assert_eq!(spmm(&a, &b, 2, &mut out).unwrap(), 4);
        assert_eq!(out, [2.0, 4.0, 9.0, 12.0]);
        assert!(spmm(&a, &b[..4], 2, &mut out).is_err());
    }
}
