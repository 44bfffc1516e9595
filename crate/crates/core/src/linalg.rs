//! Dense matrix products used by the fully-connected and convolution layers.

use crate::par;
use crate::tensor::Real;

/// Row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy, Debug)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    /// Rows and columns of the stored buffer.
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T: Real> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical shape after the optional transpose.
    pub fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

const ROW_BLOCK: usize = 64;
const PAR_THRESHOLD: usize = 1 << 18;

/// `c = alpha * a @ b + beta * c`, with `c` row-major `[m, n]`.
///
/// Large products are split into row blocks of `c`; each element is computed by
/// one block, so the split does not change any result bit.
pub fn gemm<T: Real>(alpha: T, a: Mat<'_, T>, b: Mat<'_, T>, beta: T, c: &mut [T]) {
    let (m, k) = a.dims();
    let (kb, n) = b.dims();
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!(c.len(), m * n, "output buffer has wrong size");
    if m == 0 || n == 0 {
        return;
    }
    let block = if m * n * k >= PAR_THRESHOLD && par::workers() > 1 {
        ROW_BLOCK
    } else {
        m
    };
    gemm_blocked(alpha, a, b, beta, c, block);
}

pub(crate) fn gemm_blocked<T: Real>(
    alpha: T,
    a: Mat<'_, T>,
    b: Mat<'_, T>,
    beta: T,
    c: &mut [T],
    block: usize,
) {
    let (_, k) = a.dims();
    let (_, n) = b.dims();
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    par::for_each_chunk_mut(c, block * n, |bi, chunk| {
        let r0 = bi * block;
        let rows = chunk.len() / n;
        // SAFETY: `a` holds m*k elements addressed by (rsa, csa) and r0 + rows <= m;
        // `b` holds k*n elements; `chunk` is an exclusive [rows, n] slice.
        unsafe {
            T::gemm_raw(
                rows,
                k,
                n,
                alpha,
                a.data.as_ptr().offset(r0 as isize * rsa),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                beta,
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Transposes a row-major `[rows, cols]` buffer.
pub fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for j in 0..cols {
        for i in 0..rows {
            out.push(src[i * cols + j]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_with_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm(1.0, Mat::new(&a, m, k), Mat::new(&b, k, n), 0.0, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        let mut c2 = vec![0.0; m * n];
        gemm(1.0, Mat::new(&at, k, m).t(), Mat::new(&bt, n, k).t(), 0.0, &mut c2);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn row_blocking_is_bitwise_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, k, n) = (133, 77, 41);
        let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut whole = vec![0.0f32; m * n];
        gemm_blocked(1.0, Mat::new(&a, m, k), Mat::new(&b, k, n), 0.0, &mut whole, m);
        for block in [1, 5, 16, 64] {
            let mut split = vec![0.0f32; m * n];
            gemm_blocked(1.0, Mat::new(&a, m, k), Mat::new(&b, k, n), 0.0, &mut split, block);
            assert!(whole
                .iter()
                .zip(&split)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
