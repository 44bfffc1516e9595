//! Forward and backward passes over a [`NetworkSpec`].
//!
//! Activations are batch-major (`[B, C, H, W]` or `[B, F]`). Convolution
//! gathers input patches into a `[C*k*k, B*OH*OW]` matrix and multiplies it by
//! the `[out, C*k*k]` filter matrix, so one filter is one weight row.

use crate::error::{DressError, Result};
use crate::linalg::{gemm, Mat};
use crate::net::params::{BnParams, GradStore, LayerGrads, ParamStore};
use crate::net::spec::{LayerKind, NetworkSpec};
use crate::par;
use crate::sampling::SubnetMask;
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics updated.
    Train,
    /// Batch statistics; running statistics left untouched.
    TrainFrozenStats,
    /// Running statistics.
    Eval,
}

impl Mode {
    fn batch_stats(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

/// Convolution / pooling geometry for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: usize, stride: usize, padding: usize) -> Self {
        let (c, h, w) = (input[0], input[1], input[2]);
        ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel,
            stride,
            padding,
            out_h: (h + 2 * padding - kernel) / stride + 1,
            out_w: (w + 2 * padding - kernel) / stride + 1,
        }
    }

    /// Weights per filter row: `C * k * k`.
    pub fn row_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.height * self.width
    }

    /// Input coordinate read by output `(oy, ox)` at kernel offset `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
        if iy < 0 || ix < 0 || iy >= self.height as isize || ix >= self.width as isize {
            None
        } else {
            Some(iy as usize * self.width + ix as usize)
        }
    }
}

/// Gathers patches of a `[B, C, H, W]` batch into `[C*k*k, B*OH*OW]`.
pub fn im2col<T: Real>(x: &[T], batch: usize, g: &ConvGeom) -> Vec<T> {
    let p = g.out_positions();
    let cols_w = batch * p;
    let mut cols = vec![T::zero(); g.row_len() * cols_w];
    let plane = g.in_plane();
    let kk = g.kernel * g.kernel;
    par::for_each_chunk_mut(&mut cols, cols_w, |r, row| {
        let c = r / kk;
        let ky = (r % kk) / g.kernel;
        let kx = r % g.kernel;
        for b in 0..batch {
            let src = &x[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
            let dst = &mut row[b * p..(b + 1) * p];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    if let Some(i) = g.source(oy, ox, ky, kx) {
                        dst[oy * g.out_w + ox] = src[i];
                    }
                }
            }
        }
    });
    cols
}

/// Scatter-adds `[C*k*k, B*OH*OW]` patch gradients back to `[B, C, H, W]`.
pub fn col2im<T: Real>(cols: &[T], batch: usize, g: &ConvGeom) -> Vec<T> {
    let p = g.out_positions();
    let cols_w = batch * p;
    let plane = g.in_plane();
    let kk = g.kernel * g.kernel;
    let mut dx = vec![T::zero(); batch * g.channels * plane];
    par::for_each_chunk_mut(&mut dx, plane, |bc, dst| {
        let b = bc / g.channels;
        let c = bc % g.channels;
        for kidx in 0..kk {
            let (ky, kx) = (kidx / g.kernel, kidx % g.kernel);
            let row = &cols[(c * kk + kidx) * cols_w + b * p..(c * kk + kidx) * cols_w + (b + 1) * p];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    if let Some(i) = g.source(oy, ox, ky, kx) {
                        dst[i] += row[oy * g.out_w + ox];
                    }
                }
            }
        }
    });
    dx
}

enum LayerCache<T: Real> {
    None,
    Fc {
        input: Vec<T>,
        weight: Vec<T>,
    },
    Conv {
        cols: Vec<T>,
        weight: Vec<T>,
        geom: ConvGeom,
    },
    Bn {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        gamma: Vec<T>,
    },
    Relu {
        positive: Vec<bool>,
    },
    Pool {
        geom: ConvGeom,
    },
}

/// Everything backward needs from one forward call.
pub struct Cache<T: Real> {
    version: u64,
    batch: usize,
    shapes: Vec<Vec<usize>>,
    layers: Vec<LayerCache<T>>,
}

impl<T: Real> Cache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn version(&self) -> u64 {
        self.version
    }
}

fn effective_weight<'a, T: Real>(w: &'a [T], mask: Option<&crate::sampling::Mask>) -> std::borrow::Cow<'a, [T]> {
    match mask {
        None => std::borrow::Cow::Borrowed(w),
        Some(m) => std::borrow::Cow::Owned(
            w.iter()
                .zip(m.bits())
                .map(|(&v, &keep)| if keep { v } else { T::zero() })
                .collect(),
        ),
    }
}

fn check_batch<T: Real>(net: &NetworkSpec, batch: &Tensor<T>) -> Result<usize> {
    let shape = batch.shape();
    if shape.len() != net.input_shape.len() + 1 || shape[1..] != net.input_shape[..] {
        return Err(DressError::shape(format!(
            "batch shape {:?} does not match input shape {:?}",
            shape, net.input_shape
        )));
    }
    Ok(shape[0])
}

/// Forward pass. In [`Mode::Train`] BN layers normalize with batch statistics
/// and fold them into the running statistics of `params`.
///
/// With a mask, each sampled layer multiplies by `w` where the mask is set and
/// by an exact zero elsewhere, which makes the result bit-identical to
/// forwarding [`ParamStore::masked`].
pub fn forward<T: Real>(
    net: &NetworkSpec,
    params: &mut ParamStore<T>,
    mask: Option<&SubnetMask>,
    batch: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Cache<T>)> {
    let mut stats = Vec::new();
    let out = run(net, params, mask, batch, mode, true, &mut stats)?;
    if mode == Mode::Train {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        for (layer, mean, var, n) in stats {
            let bn = params.bn_mut(layer).expect("bn layer");
            let unbias = if n > 1 {
                T::from_usize(n).unwrap() / T::from_usize(n - 1).unwrap()
            } else {
                T::one()
            };
            for c in 0..mean.len() {
                bn.running_mean[c] = (T::one() - m) * bn.running_mean[c] + m * mean[c];
                bn.running_var[c] = (T::one() - m) * bn.running_var[c] + m * var[c] * unbias;
            }
        }
    }
    let (logits, cache) = out;
    Ok((logits, cache.expect("cache requested")))
}

/// Eval-mode forward without a cache.
pub fn predict<T: Real>(
    net: &NetworkSpec,
    params: &ParamStore<T>,
    mask: Option<&SubnetMask>,
    batch: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut stats = Vec::new();
    run(net, params, mask, batch, Mode::Eval, false, &mut stats).map(|(t, _)| t)
}

type BnStats<T> = Vec<(usize, Vec<T>, Vec<T>, usize)>;

fn run<T: Real>(
    net: &NetworkSpec,
    params: &ParamStore<T>,
    mask: Option<&SubnetMask>,
    batch: &Tensor<T>,
    mode: Mode,
    keep_cache: bool,
    stats: &mut BnStats<T>,
) -> Result<(Tensor<T>, Option<Cache<T>>)> {
    let shapes = net.shapes()?;
    params.check(net)?;
    if let Some(m) = mask {
        m.check_shapes(net)?;
    }
    let b = check_batch(net, batch)?;

    let mut acts: Vec<Option<Vec<T>>> = vec![None; net.layers.len() + 1];
    acts[0] = Some(batch.data().to_vec());
    let mut last_use = vec![0usize; net.layers.len() + 1];
    for i in 0..net.layers.len() {
        last_use[net.input_of(i)] = i;
        if let LayerKind::ResidualAdd { skip } = net.layers[i].kind {
            last_use[skip] = i;
        }
    }

    let mut caches = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let src = net.input_of(i);
        let in_shape = &shapes[src];
        let x = acts[src].as_ref().expect("activation computed");
        let (y, cache) = match layer.kind {
            LayerKind::FullyConnected {
                in_features,
                out_features,
                ..
            } => {
                let d = params.dense(i).expect("dense params");
                let w = effective_weight(d.weight.data(), mask.and_then(|m| m.layer(i)));
                let mut y = vec![T::zero(); b * out_features];
                gemm(
                    T::one(),
                    Mat::new(x, b, in_features),
                    Mat::new(&w, out_features, in_features).t(),
                    T::zero(),
                    &mut y,
                );
                if let Some(bias) = &d.bias {
                    for row in y.chunks_mut(out_features) {
                        for (v, &bb) in row.iter_mut().zip(bias) {
                            *v += bb;
                        }
                    }
                }
                let cache = if keep_cache {
                    LayerCache::Fc {
                        input: x.clone(),
                        weight: w.into_owned(),
                    }
                } else {
                    LayerCache::None
                };
                (y, cache)
            }
            LayerKind::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let d = params.dense(i).expect("dense params");
                let g = ConvGeom::new(in_shape, kernel, stride, padding);
                let w = effective_weight(d.weight.data(), mask.and_then(|m| m.layer(i)));
                let cols = im2col(x, b, &g);
                let p = g.out_positions();
                let mut ym = vec![T::zero(); out_channels * b * p];
                gemm(
                    T::one(),
                    Mat::new(&w, out_channels, g.row_len()),
                    Mat::new(&cols, g.row_len(), b * p),
                    T::zero(),
                    &mut ym,
                );
                let mut y = vec![T::zero(); b * out_channels * p];
                let bias = d.bias.as_deref();
                par::for_each_chunk_mut(&mut y, p, |bo, dst| {
                    let (bi, o) = (bo / out_channels, bo % out_channels);
                    dst.copy_from_slice(&ym[o * b * p + bi * p..o * b * p + (bi + 1) * p]);
                    if let Some(bias) = bias {
                        dst.iter_mut().for_each(|v| *v += bias[o]);
                    }
                });
                let cache = if keep_cache {
                    LayerCache::Conv {
                        cols,
                        weight: w.into_owned(),
                        geom: g,
                    }
                } else {
                    LayerCache::None
                };
                (y, cache)
            }
            LayerKind::BatchNorm { channels } => {
                let bn = params.bn(i).expect("bn params");
                let spatial = in_shape[1..].iter().product::<usize>();
                let n = b * spatial;
                let eps = T::from_f64_lossy(BN_EPS);
                let (mean, var) = if mode.batch_stats() {
                    let (mean, var) = channel_stats(x, b, channels, spatial);
                    stats.push((i, mean.clone(), var.clone(), n));
                    (mean, var)
                } else {
                    (bn.running_mean.clone(), bn.running_var.clone())
                };
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut xhat = vec![T::zero(); x.len()];
                let mut y = vec![T::zero(); x.len()];
                par::for_each_chunk_pair_mut(&mut xhat, spatial, &mut y, spatial, |bc, xh, yy| {
                    let c = bc % channels;
                    let src = &x[bc * spatial..(bc + 1) * spatial];
                    for s in 0..spatial {
                        xh[s] = (src[s] - mean[c]) * inv_std[c];
                        yy[s] = bn.gamma[c] * xh[s] + bn.beta[c];
                    }
                });
                let cache = if keep_cache {
                    LayerCache::Bn {
                        xhat,
                        inv_std,
                        gamma: bn.gamma.clone(),
                    }
                } else {
                    LayerCache::None
                };
                (y, cache)
            }
            LayerKind::Relu => {
                let y: Vec<T> = x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
                let cache = if keep_cache {
                    LayerCache::Relu {
                        positive: x.iter().map(|&v| v > T::zero()).collect(),
                    }
                } else {
                    LayerCache::None
                };
                (y, cache)
            }
            LayerKind::AvgPool {
                kernel,
                stride,
                padding,
            } => {
                let g = ConvGeom::new(in_shape, kernel, stride, padding);
                let y = avg_pool(x, b, &g);
                (y, LayerCache::Pool { geom: g })
            }
            LayerKind::Flatten => (x.clone(), LayerCache::None),
            LayerKind::ResidualAdd { skip } => {
                let other = acts[skip].as_ref().expect("skip activation computed");
                let y = x.iter().zip(other).map(|(&a, &c)| a + c).collect();
                (y, LayerCache::None)
            }
        };
        if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
            return Err(DressError::Numeric {
                layer: i,
                detail: format!("non-finite activation at element {} of {}", pos, layer.name),
            });
        }
        acts[i + 1] = Some(y);
        if !keep_cache {
            for (a, &last) in last_use.iter().enumerate().take(i + 1) {
                if last == i {
                    acts[a] = None;
                }
            }
        }
        caches.push(cache);
    }

    let logits = acts.pop().flatten().expect("output activation");
    let out = Tensor::from_vec(&[b, net.classes], logits)?;
    let cache = keep_cache.then(|| Cache {
        version: params.version(),
        batch: b,
        shapes,
        layers: caches,
    });
    Ok((out, cache))
}

/// Average pooling of a `[B, C, H, W]` batch; padded positions count as zeros.
pub(crate) fn avg_pool<T: Real>(x: &[T], batch: usize, g: &ConvGeom) -> Vec<T> {
    let p = g.out_positions();
    let plane = g.in_plane();
    let scale = T::one() / T::from_usize(g.kernel * g.kernel).unwrap();
    let mut y = vec![T::zero(); batch * g.channels * p];
    par::for_each_chunk_mut(&mut y, p, |bc, dst| {
        let src = &x[bc * plane..(bc + 1) * plane];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = T::zero();
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        if let Some(s) = g.source(oy, ox, ky, kx) {
                            acc += src[s];
                        }
                    }
                }
                dst[oy * g.out_w + ox] = acc * scale;
            }
        }
    });
    y
}

/// Eval-mode batch norm with running statistics.
pub(crate) fn bn_eval<T: Real>(x: &[T], channels: usize, spatial: usize, bn: &BnParams<T>) -> Vec<T> {
    let eps = T::from_f64_lossy(BN_EPS);
    let inv_std: Vec<T> = bn.running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut y, spatial, |bc, yy| {
        let c = bc % channels;
        let src = &x[bc * spatial..(bc + 1) * spatial];
        for s in 0..spatial {
            let xh = (src[s] - bn.running_mean[c]) * inv_std[c];
            yy[s] = bn.gamma[c] * xh + bn.beta[c];
        }
    });
    y
}

/// Per-channel mean and biased variance over batch and spatial positions.
fn channel_stats<T: Real>(x: &[T], batch: usize, channels: usize, spatial: usize) -> (Vec<T>, Vec<T>) {
    let n = T::from_usize(batch * spatial).unwrap();
    let stats = par::map_range(channels, |c| {
        let mut sum = T::zero();
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            for &v in &x[base..base + spatial] {
                sum += v;
            }
        }
        let mean = sum / n;
        let mut sq = T::zero();
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            for &v in &x[base..base + spatial] {
                let d = v - mean;
                sq += d * d;
            }
        }
        (mean, sq / n)
    });
    stats.into_iter().unzip()
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
    }
}

/// Backward pass for a train-mode forward. Returns `dL/dw` for the weights
/// that were used in the forward (masked-out weights included, as the chain
/// rule gives them); the caller applies the mask.
pub fn backward<T: Real>(
    net: &NetworkSpec,
    params: &ParamStore<T>,
    cache: &Cache<T>,
    loss_grad: &Tensor<T>,
) -> Result<GradStore<T>> {
    if cache.version != params.version() {
        return Err(DressError::StaleCache {
            cached: cache.version,
            current: params.version(),
        });
    }
    let b = cache.batch;
    if loss_grad.shape() != [b, net.classes] {
        return Err(DressError::shape(format!(
            "loss gradient shape {:?}, expected [{}, {}]",
            loss_grad.shape(),
            b,
            net.classes
        )));
    }
    let mut grads = GradStore::zeros_like(params);
    let mut dacts: Vec<Option<Vec<T>>> = vec![None; net.layers.len() + 1];
    dacts[net.layers.len()] = Some(loss_grad.data().to_vec());

    for i in (0..net.layers.len()).rev() {
        let src = net.input_of(i);
        let in_shape = &cache.shapes[src];
        let out_len = b * cache.shapes[i + 1].iter().product::<usize>();
        let dy = dacts[i + 1].take().unwrap_or_else(|| vec![T::zero(); out_len]);
        let need_dx = src != 0;
        let dx: Option<Vec<T>> = match (&net.layers[i].kind, &cache.layers[i]) {
            (
                LayerKind::FullyConnected {
                    in_features,
                    out_features,
                    ..
                },
                LayerCache::Fc { input, weight },
            ) => {
                let (fi, fo) = (*in_features, *out_features);
                if let LayerGrads::Dense { weight: gw, bias: gb } = &mut grads.layers[i] {
                    gemm(T::one(), Mat::new(&dy, b, fo).t(), Mat::new(input, b, fi), T::zero(), gw);
                    if let Some(gb) = gb {
                        for row in dy.chunks(fo) {
                            gb.iter_mut().zip(row).for_each(|(g, &v)| *g += v);
                        }
                    }
                }
                need_dx.then(|| {
                    let mut dx = vec![T::zero(); b * fi];
                    gemm(T::one(), Mat::new(&dy, b, fo), Mat::new(weight, fo, fi), T::zero(), &mut dx);
                    dx
                })
            }
            (LayerKind::Conv2d { out_channels, .. }, LayerCache::Conv { cols, weight, geom }) => {
                let oc = *out_channels;
                let p = geom.out_positions();
                let n = geom.row_len();
                let mut dym = vec![T::zero(); oc * b * p];
                par::for_each_chunk_mut(&mut dym, b * p, |o, dst| {
                    for bi in 0..b {
                        dst[bi * p..(bi + 1) * p]
                            .copy_from_slice(&dy[(bi * oc + o) * p..(bi * oc + o + 1) * p]);
                    }
                });
                if let LayerGrads::Dense { weight: gw, bias: gb } = &mut grads.layers[i] {
                    gemm(T::one(), Mat::new(&dym, oc, b * p), Mat::new(cols, n, b * p).t(), T::zero(), gw);
                    if let Some(gb) = gb {
                        for (o, g) in gb.iter_mut().enumerate() {
                            *g = dym[o * b * p..(o + 1) * b * p].iter().copied().sum();
                        }
                    }
                }
                need_dx.then(|| {
                    let mut dcols = vec![T::zero(); n * b * p];
                    gemm(T::one(), Mat::new(weight, oc, n).t(), Mat::new(&dym, oc, b * p), T::zero(), &mut dcols);
                    col2im(&dcols, b, geom)
                })
            }
            (LayerKind::BatchNorm { channels }, LayerCache::Bn { xhat, inv_std, gamma }) => {
                let c_n = *channels;
                let spatial = in_shape[1..].iter().product::<usize>();
                let n = T::from_usize(b * spatial).unwrap();
                let sums = par::map_range(c_n, |c| {
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xhat = T::zero();
                    for bi in 0..b {
                        let base = (bi * c_n + c) * spatial;
                        for s in base..base + spatial {
                            sum_dy += dy[s];
                            sum_dy_xhat += dy[s] * xhat[s];
                        }
                    }
                    (sum_dy, sum_dy_xhat)
                });
                if let LayerGrads::BatchNorm { gamma: gg, beta: gbeta } = &mut grads.layers[i] {
                    for (c, &(sdy, sdyx)) in sums.iter().enumerate() {
                        gg[c] = sdyx;
                        gbeta[c] = sdy;
                    }
                }
                let mut dx = vec![T::zero(); dy.len()];
                par::for_each_chunk_mut(&mut dx, spatial, |bc, dst| {
                    let c = bc % c_n;
                    let (sdy, sdyx) = sums[c];
                    let k = gamma[c] * inv_std[c] / n;
                    let base = bc * spatial;
                    for s in 0..spatial {
                        dst[s] = k * (n * dy[base + s] - sdy - xhat[base + s] * sdyx);
                    }
                });
                Some(dx)
            }
            (LayerKind::Relu, LayerCache::Relu { positive }) => Some(
                dy.iter()
                    .zip(positive)
                    .map(|(&g, &p)| if p { g } else { T::zero() })
                    .collect(),
            ),
            (LayerKind::AvgPool { kernel, .. }, LayerCache::Pool { geom }) => {
                let g = *geom;
                let p = g.out_positions();
                let plane = g.in_plane();
                let scale = T::one() / T::from_usize(kernel * kernel).unwrap();
                let mut dx = vec![T::zero(); b * g.channels * plane];
                par::for_each_chunk_mut(&mut dx, plane, |bc, dst| {
                    let src = &dy[bc * p..(bc + 1) * p];
                    for oy in 0..g.out_h {
                        for ox in 0..g.out_w {
                            let v = src[oy * g.out_w + ox] * scale;
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    if let Some(s) = g.source(oy, ox, ky, kx) {
                                        dst[s] += v;
                                    }
                                }
                            }
                        }
                    }
                });
                Some(dx)
            }
            (LayerKind::Flatten, _) => Some(dy),
            (LayerKind::ResidualAdd { skip }, _) => {
                accumulate(&mut dacts[*skip], dy.clone());
                Some(dy)
            }
            _ => {
                return Err(DressError::invariant(format!(
                    "cache for layer {} does not come from a train-mode forward of this network",
                    i
                )))
            }
        };
        if let Some(dx) = dx {
            if src != 0 {
                accumulate(&mut dacts[src], dx);
            }
        }
    }
    Ok(grads)
}
