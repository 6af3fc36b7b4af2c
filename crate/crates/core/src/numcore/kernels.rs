//! Dense kernels behind the graph ops.
//!
//! Every output element of `gemm` is summed over the shared dimension in
//! ascending order starting from zero, so results are bit-identical to the
//! naive triple loop and independent of how many rows are in the batch.

use super::Real;

const MR: usize = 6;
const NR: usize = 32;

/// `c = a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n` (overwrites `c`).
pub fn gemm<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let full_cols = n - n % NR;
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j < full_cols {
            let mut acc = [[T::zero(); NR]; MR];
            for kk in 0..k {
                let brow: &[T; NR] = b[kk * n + j..kk * n + j + NR].try_into().unwrap();
                for r in 0..MR {
                    let av = a[(i + r) * k + kk];
                    for l in 0..NR {
                        acc[r][l] += av * brow[l];
                    }
                }
            }
            for r in 0..MR {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(&acc[r]);
            }
            j += NR;
        }
        for r in 0..MR {
            tail_cols(a, b, c, i + r, k, n, full_cols);
        }
        i += MR;
    }
    while i < m {
        let mut j = 0;
        while j < full_cols {
            let mut acc = [T::zero(); NR];
            for kk in 0..k {
                let av = a[i * k + kk];
                let brow = &b[kk * n + j..kk * n + j + NR];
                for l in 0..NR {
                    acc[l] += av * brow[l];
                }
            }
            c[i * n + j..i * n + j + NR].copy_from_slice(&acc);
            j += NR;
        }
        tail_cols(a, b, c, i, k, n, full_cols);
        i += 1;
    }
}

#[inline]
fn tail_cols<T: Real>(a: &[T], b: &[T], c: &mut [T], i: usize, k: usize, n: usize, from: usize) {
    for j in from..n {
        let mut acc = T::zero();
        for kk in 0..k {
            acc += a[i * k + kk] * b[kk * n + j];
        }
        c[i * n + j] = acc;
    }
}

/// `c += aᵀ · b` for `a: m×k`, `b: m×n`, `c: k×n`.
pub fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let at = transpose(a, m, k);
    let mut tmp = vec![T::zero(); k * n];
    gemm(&at, b, &mut tmp, k, m, n);
    for (cv, &t) in c.iter_mut().zip(&tmp) {
        *cv += t;
    }
}

/// Row-major transpose of an `m×n` matrix.
pub fn transpose<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn gemm_is_bit_identical_to_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, k, n) in &[(1, 1, 1), (5, 7, 3), (9, 33, 40), (4, 16, 16), (13, 64, 50)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut c = vec![0.0; m * n];
            gemm(&a, &b, &mut c, m, k, n);
            assert_eq!(c, naive(&a, &b, m, k, n), "m={m} k={k} n={n}");
        }
    }

    #[test]
    fn gemm_rows_do_not_depend_on_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, k, n) = (11, 24, 37);
        let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut full = vec![0.0; m * n];
        gemm(&a, &b, &mut full, m, k, n);
        for i in 0..m {
            let mut one = vec![0.0; n];
            gemm(&a[i * k..(i + 1) * k], &b, &mut one, 1, k, n);
            assert_eq!(&full[i * n..(i + 1) * n], &one[..]);
        }
    }

    #[test]
    fn transposed_accumulate_matches_explicit_transpose() {
        let (m, k, n) = (3, 2, 4);
        let a: Vec<f64> = (0..m * k).map(|x| x as f64).collect();
        let b: Vec<f64> = (0..m * n).map(|x| (x as f64) * 0.5).collect();
        let mut c = vec![0.0; k * n];
        gemm_tn_acc(&a, &b, &mut c, m, k, n);
        let at = transpose(&a, m, k);
        let mut expect = vec![0.0; k * n];
        gemm(&at, &b, &mut expect, k, m, n);
        assert_eq!(c, expect);
    }
}
