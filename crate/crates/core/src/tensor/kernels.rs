//! Matrix-multiply kernels over row-major slices.
//!
//! Every output element is accumulated by exactly one thread in a fixed
//! order, so results do not depend on whether the parallel path is taken.

use rayon::prelude::*;

use super::Scalar;

const ROW_BLOCK: usize = 16;
const INNER_BLOCK: usize = 128;
const COL_BLOCK: usize = 64;
/// Below this many multiply-accumulates the serial path is always used.
const PARALLEL_MIN_MACS: usize = 1 << 16;

/// Runs `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `out`.
pub(crate) fn for_chunks<S, F>(parallel: bool, out: &mut [S], chunk: usize, f: F)
where
    S: Send,
    F: Fn(usize, &mut [S]) + Sync + Send,
{
    if chunk == 0 || out.is_empty() {
        return;
    }
    if parallel {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::ZERO; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = S::ZERO;
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `c[m,n] = a[m,k] · b[k,n]`
pub fn gemm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize, parallel: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.fill(S::ZERO);
    if n == 0 || m == 0 {
        return;
    }
    let par = parallel && m * k * n >= PARALLEL_MIN_MACS;
    for_chunks(par, c, ROW_BLOCK * n, |blk, c_blk| {
        let row0 = blk * ROW_BLOCK;
        let rows = c_blk.len() / n;
        for p0 in (0..k).step_by(INNER_BLOCK) {
            let p1 = (p0 + INNER_BLOCK).min(k);
            for r in 0..rows {
                let a_row = &a[(row0 + r) * k..(row0 + r + 1) * k];
                let c_row = &mut c_blk[r * n..(r + 1) * n];
                for p in p0..p1 {
                    axpy(a_row[p], &b[p * n..(p + 1) * n], c_row);
                }
            }
        }
    });
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize, parallel: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    let par = parallel && m * k * n >= PARALLEL_MIN_MACS;
    for_chunks(par, c, ROW_BLOCK * n, |blk, c_blk| {
        let row0 = blk * ROW_BLOCK;
        let rows = c_blk.len() / n;
        for j0 in (0..n).step_by(COL_BLOCK) {
            let j1 = (j0 + COL_BLOCK).min(n);
            for r in 0..rows {
                let a_row = &a[(row0 + r) * k..(row0 + r + 1) * k];
                for j in j0..j1 {
                    c_blk[r * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
                }
            }
        }
    });
}

/// `c[m,n] = a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize, parallel: bool) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.fill(S::ZERO);
    if n == 0 || m == 0 {
        return;
    }
    let par = parallel && m * k * n >= PARALLEL_MIN_MACS;
    for_chunks(par, c, ROW_BLOCK * n, |blk, c_blk| {
        let row0 = blk * ROW_BLOCK;
        let rows = c_blk.len() / n;
        for p0 in (0..k).step_by(INNER_BLOCK) {
            let p1 = (p0 + INNER_BLOCK).min(k);
            for r in 0..rows {
                let c_row = &mut c_blk[r * n..(r + 1) * n];
                for p in p0..p1 {
                    axpy(a[p * m + row0 + r], &b[p * n..(p + 1) * n], c_row);
                }
            }
        }
    });
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

    fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn kernels_agree_with_naive_product_on_odd_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (17, 130, 9), (33, 7, 70), (20, 200, 65)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let want = naive(&a, &b, m, k, n);
            for par in [false, true] {
                let mut c = vec![0.0; m * n];
                gemm_nn(&a, &b, &mut c, m, k, n, par);
                assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

                let bt = transpose(&b, k, n);
                gemm_nt(&a, &bt, &mut c, m, k, n, par);
                assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

                let at = transpose(&a, m, k);
                gemm_tn(&at, &b, &mut c, m, k, n, par);
                assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn parallel_and_serial_paths_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, k, n) = (64, 96, 80);
        let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut c1 = vec![0.0; m * n];
        let mut c2 = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c1, m, k, n, false);
        gemm_nn(&a, &b, &mut c2, m, k, n, true);
        assert_eq!(c1, c2);
    }
}
