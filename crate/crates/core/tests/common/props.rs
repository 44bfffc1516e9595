//! Property bodies shared by the property suites and the acceptance runner.

use dress::csr::{build, DressCsr};
use dress::infer::{sparse_conv2d, sparse_linear, spmm};
use dress::net::graph::ConvGeom;
use dress::net::params::ParamStore;
use dress::net::spec::NetworkSpec;
use dress::sampling::{allocate_layerwise, sample_masks};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{conv_fixture, fixture, ConvCase, Counts};

pub type Outcome = Result<(), TestCaseError>;

pub fn counts_mode() -> impl Strategy<Value = Counts> {
    prop_oneof![
        4 => Just(Counts::Random),
        1 => Just(Counts::AllOnes),
        1 => Just(Counts::SingleNonzero),
    ]
}

/// `(n, h, k, seed, mode)` with `n <= 32`, `h <= 16`, `k <= 4`.
pub fn table_case() -> impl Strategy<Value = (usize, usize, usize, u64, Counts)> {
    (1usize..=32, 1usize..=16, 1usize..=4, any::<u64>(), counts_mode())
}

pub fn conv_case() -> impl Strategy<Value = (ConvCase, usize, u64, Counts, usize)> {
    (1usize..=3, 1usize..=4, 1usize..=3, 1usize..=2, 3usize..=7, 3usize..=7)
        .prop_flat_map(|(cin, cout, kernel, stride, height, width)| {
            (0..kernel).prop_map(move |padding| ConvCase { cin, cout, kernel, stride, padding, height, width })
        })
        .prop_filter("kernel fits", |c| c.kernel <= c.height + 2 * c.padding && c.kernel <= c.width + 2 * c.padding)
        .prop_flat_map(|c| (Just(c), 1usize..=4, any::<u64>(), counts_mode(), 1usize..=3))
}

/// Prefix counts, nesting, row-uniformity and exact prefix densification.
pub fn tables_reproduce_every_level(n: usize, h: usize, k: usize, seed: u64, mode: Counts) -> Outcome {
    let f = fixture(n, h, k, seed, mode);
    let layer = &f.model.layers[0];
    prop_assert!(f.model.validate().is_ok());
    prop_assert!(f.masks.is_nested());
    prop_assert_eq!(&layer.prefix_counts, &f.counts);
    prop_assert!(layer.prefix_counts.windows(2).all(|w| w[0] >= w[1]));
    prop_assert_eq!(layer.indices.len(), h * layer.width());
    let w = f.weights();
    for level in 1..=k {
        let bits = f.bits(level);
        for r in 0..h {
            let c = bits[r * n..(r + 1) * n].iter().filter(|&&b| b).count();
            prop_assert_eq!(c, f.counts[level - 1]);
        }
        let sub = layer.extract(level).unwrap();
        prop_assert_eq!(sub.nnz(), h * f.counts[level - 1]);
        let want: Vec<f32> = w.iter().zip(bits).map(|(&x, &b)| if b { x } else { 0.0 }).collect();
        let got = sub.densify();
        prop_assert!(got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()));
        for r in 0..h {
            let (cols, _) = sub.row(r);
            let mut got: Vec<usize> = cols.iter().map(|&c| c as usize).collect();
            got.sort_unstable();
            let expect: Vec<usize> = (0..n).filter(|&j| bits[r * n + j]).collect();
            prop_assert_eq!(got, expect);
        }
        let (ptr, cols, vals) = sub.to_standard();
        prop_assert!(ptr.windows(2).all(|p| p[1] - p[0] == f.counts[level - 1]));
        prop_assert_eq!(*ptr.last().unwrap(), cols.len());
        prop_assert_eq!(cols.len(), vals.len());
    }
    prop_assert!(layer.extract(0).is_err());
    prop_assert!(layer.extract(k + 1).is_err());
    Ok(())
}

pub fn rows_ordered_by_depth_magnitude_column(n: usize, h: usize, k: usize, seed: u64) -> Outcome {
    let f = fixture(n, h, k, seed, Counts::Random);
    let layer = &f.model.layers[0];
    let width = layer.width();
    for r in 0..h {
        let cols = &layer.indices[r * width..(r + 1) * width];
        let vals = &layer.values[r * width..(r + 1) * width];
        for i in 1..width {
            let (a, b) = (cols[i - 1] as usize, cols[i] as usize);
            let (da, db) = (f.depth(r * n + a), f.depth(r * n + b));
            prop_assert!(da >= db);
            if da == db {
                prop_assert!(vals[i - 1].abs() >= vals[i].abs());
                if vals[i - 1].abs() == vals[i].abs() {
                    prop_assert!(a < b);
                }
            }
        }
    }
    Ok(())
}

pub fn round_trip_is_byte_identical(n: usize, h: usize, k: usize, seed: u64, mode: Counts) -> Outcome {
    let f = fixture(n, h, k, seed, mode);
    let bytes = f.model.to_bytes().unwrap();
    let back = DressCsr::from_bytes(&bytes).unwrap();
    prop_assert_eq!(&back, &f.model);
    prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    Ok(())
}

/// Magnitude-sampled masks are nested and row-uniform, and each stored row
/// is in plain descending magnitude.
pub fn magnitude_masks_are_nested(n: usize, h: usize, k: usize, seed: u64) -> Outcome {
    let net = NetworkSpec::mlp(&[n], &[], h, false);
    let params = ParamStore::<f32>::init(&net, seed).unwrap();
    let levels: Vec<f64> = (0..k).map(|i| 0.2 * i as f64).collect();
    let ladder = allocate_layerwise(&net, &params, &levels).unwrap();
    let masks = sample_masks(&net, &params, &ladder).unwrap();
    prop_assert!(masks.is_nested());
    for m in masks.levels() {
        let counts = m.layer(0).unwrap().row_counts(n);
        prop_assert!(counts.windows(2).all(|c| c[0] == c[1]));
    }
    let model = build(&net, &params, &masks, &levels, vec![params.bn_state(); k]).unwrap();
    let layer = &model.layers[0];
    let width = layer.width();
    for r in 0..h {
        let vals = &layer.values[r * width..(r + 1) * width];
        prop_assert!(vals.windows(2).all(|p| p[0].abs() >= p[1].abs()));
    }
    Ok(())
}

fn dense_mm(a: &[f32], rows: usize, cols: usize, b: &[f32], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for c in 0..cols {
            let x = a[r * cols + c] as f64;
            for j in 0..n {
                out[r * n + j] += x * b[c * n + j] as f64;
            }
        }
    }
    out
}

/// `|got - want| / max(|want|, 1)`.
fn rel_err(got: f32, want: f64) -> f64 {
    (got as f64 - want).abs() / want.abs().max(1.0)
}

pub const KERNEL_TOL: f64 = 1e-5;

pub fn spmm_matches_dense(n: usize, h: usize, k: usize, seed: u64, mode: Counts, cols: usize) -> Outcome {
    let f = fixture(n, h, k, seed, mode);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let b: Vec<f32> = (0..n * cols).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
    for level in 1..=k {
        let sub = f.model.layers[0].extract(level).unwrap();
        let want = dense_mm(&sub.densify(), h, n, &b, cols);

        let mut out = vec![f32::NAN; h * cols];
        let macs = spmm(&sub, &b, cols, &mut out).unwrap();
        prop_assert_eq!(macs, (h * f.counts[level - 1] * cols) as u64);
        for (&g, &w) in out.iter().zip(&want) {
            prop_assert!(rel_err(g, w) < KERNEL_TOL, "spmm {} vs {}", g, w);
        }

        // The same product through the batch-major linear kernel.
        let x: Vec<f32> = (0..cols).flat_map(|j| (0..n).map(move |c| (c, j))).map(|(c, j)| b[c * cols + j]).collect();
        let mut lin = vec![f32::NAN; cols * h];
        sparse_linear(&sub, &x, cols, &mut lin).unwrap();
        for j in 0..cols {
            for r in 0..h {
                let (g, w) = (lin[j * h + r], want[r * cols + j]);
                prop_assert!(rel_err(g, w) < KERNEL_TOL, "linear {} vs {}", g, w);
            }
        }
    }
    Ok(())
}

/// Direct convolution in f64 with filter rows laid out as `[C, k, k]`.
fn dense_conv(w: &[f32], c: &ConvCase, x: &[f32], batch: usize) -> Vec<f64> {
    let oh = (c.height + 2 * c.padding - c.kernel) / c.stride + 1;
    let ow = (c.width + 2 * c.padding - c.kernel) / c.stride + 1;
    let row_len = c.cin * c.kernel * c.kernel;
    let mut y = vec![0.0; batch * c.cout * oh * ow];
    for b in 0..batch {
        for o in 0..c.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ci in 0..c.cin {
                        for ky in 0..c.kernel {
                            for kx in 0..c.kernel {
                                let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                                let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                                if iy < 0 || ix < 0 || iy >= c.height as isize || ix >= c.width as isize {
                                    continue;
                                }
                                let xv = x[((b * c.cin + ci) * c.height + iy as usize) * c.width + ix as usize];
                                let wv = w[o * row_len + (ci * c.kernel + ky) * c.kernel + kx];
                                acc += wv as f64 * xv as f64;
                            }
                        }
                    }
                    y[((b * c.cout + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    y
}

pub fn conv_matches_dense(c: ConvCase, k: usize, seed: u64, mode: Counts, batch: usize) -> Outcome {
    let f = conv_fixture(c, k, seed, mode);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de);
    let x: Vec<f32> = (0..batch * c.cin * c.height * c.width).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
    let geom = ConvGeom::new(&[c.cin, c.height, c.width], c.kernel, c.stride, c.padding);
    for level in 1..=k {
        let sub = f.model.layers[0].extract(level).unwrap();
        let want = dense_conv(&sub.densify(), &c, &x, batch);
        let (got, macs) = sparse_conv2d(&sub, &x, batch, &geom).unwrap();
        prop_assert_eq!(macs, (c.cout * f.counts[level - 1] * batch * geom.out_positions()) as u64);
        prop_assert_eq!(got.len(), want.len());
        for (&g, &w) in got.iter().zip(&want) {
            prop_assert!(rel_err(g, w) < KERNEL_TOL, "conv {} vs {}", g, w);
        }
    }
    Ok(())
}
