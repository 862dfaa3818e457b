//! Unpacked matrix product for skinny right-hand sides.
//!
//! Frame-by-frame inference multiplies large weight matrices by a handful
//! of columns. A packing GEMM spends most of its time copying the weights
//! there, so this kernel reads both operands in place, row-major along the
//! shared dimension, and keeps a small block of dot products in registers.

use super::Scalar;

/// `c[i·n + j] += Σ_l a[i·k + l] · b[j·k + l]`, i.e. `C += A·Bᵀ` with
/// `A: [m, k]`, `B: [n, k]`, `C: [m, n]`, all row-major.
pub fn gemm_nt_acc<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n, "gemm_nt operand too short");
    T::gemm_nt_acc(m, n, k, a, b, c);
}

/// Portable implementation, used for `f64` and when AVX2 is unavailable.
pub(crate) fn gemm_nt_generic<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let col = &b[j * k..(j + 1) * k];
            // Four partial sums break the dependency chain.
            let mut acc = [T::zero(); 4];
            let mut chunks = row.chunks_exact(4).zip(col.chunks_exact(4));
            for (x, y) in &mut chunks {
                for z in 0..4 {
                    acc[z] += x[z] * y[z];
                }
            }
            let tail = k / 4 * 4;
            let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
            for l in tail..k {
                s += row[l] * col[l];
            }
            c[i * n + j] += s;
        }
    }
}

pub(crate) fn gemm_nt_f32(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: as below.
            unsafe { avx512::gemm(m, n, k, a, b, c) };
            return;
        }
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the CPU features were detected at runtime and the
            // operand lengths were checked by the caller.
            unsafe { avx::gemm(m, n, k, a, b, c) };
            return;
        }
    }
    gemm_nt_generic(m, n, k, a, b, c);
}

#[cfg(target_arch = "x86_64")]
mod avx {
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn gemm(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        let (a, b, c) = (a.as_ptr(), b.as_ptr(), c.as_mut_ptr());
        let mut i = 0;
        while i < m {
            let mut j = 0;
            if m - i >= 4 {
                while n - j >= 2 {
                    block::<4, 2>(i, j, n, k, a, b, c);
                    j += 2;
                }
                if j < n {
                    block::<4, 1>(i, j, n, k, a, b, c);
                }
                i += 4;
            } else {
                while n - j >= 2 {
                    block::<1, 2>(i, j, n, k, a, b, c);
                    j += 2;
                }
                if j < n {
                    block::<1, 1>(i, j, n, k, a, b, c);
                }
                i += 1;
            }
        }
    }

    #[inline(always)]
    unsafe fn block<const MR: usize, const NR: usize>(
        i: usize,
        j: usize,
        n: usize,
        k: usize,
        a: *const f32,
        b: *const f32,
        c: *mut f32,
    ) {
        let body = k / 8 * 8;
        let mut acc = [[_mm256_setzero_ps(); NR]; MR];
        let mut l = 0;
        while l < body {
            let mut bv = [_mm256_setzero_ps(); NR];
            for q in 0..NR {
                bv[q] = _mm256_loadu_ps(b.add((j + q) * k + l));
            }
            for r in 0..MR {
                let av = _mm256_loadu_ps(a.add((i + r) * k + l));
                for q in 0..NR {
                    acc[r][q] = _mm256_fmadd_ps(av, bv[q], acc[r][q]);
                }
            }
            l += 8;
        }
        for r in 0..MR {
            for q in 0..NR {
                let mut lanes = [0.0f32; 8];
                _mm256_storeu_ps(lanes.as_mut_ptr(), acc[r][q]);
                let mut s = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
                for t in body..k {
                    s += *a.add((i + r) * k + t) * *b.add((j + q) * k + t);
                }
                *c.add((i + r) * n + j + q) += s;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn gemm(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        let (a, b, c) = (a.as_ptr(), b.as_ptr(), c.as_mut_ptr());
        let mut i = 0;
        while i < m {
            let rows = if m - i >= 4 { 4 } else { 1 };
            let mut j = 0;
            while j < n {
                let cols = (n - j).min(4);
                match (rows, cols) {
                    (4, 4) => block::<4, 4>(i, j, n, k, a, b, c),
                    (4, 3) => block::<4, 3>(i, j, n, k, a, b, c),
                    (4, 2) => block::<4, 2>(i, j, n, k, a, b, c),
                    (4, _) => block::<4, 1>(i, j, n, k, a, b, c),
                    (_, 4) => block::<1, 4>(i, j, n, k, a, b, c),
                    (_, 3) => block::<1, 3>(i, j, n, k, a, b, c),
                    (_, 2) => block::<1, 2>(i, j, n, k, a, b, c),
                    _ => block::<1, 1>(i, j, n, k, a, b, c),
                }
                j += cols;
            }
            i += rows;
        }
    }

    #[inline(always)]
    unsafe fn block<const MR: usize, const NR: usize>(
        i: usize,
        j: usize,
        n: usize,
        k: usize,
        a: *const f32,
        b: *const f32,
        c: *mut f32,
    ) {
        let mut acc = [[_mm512_setzero_ps(); NR]; MR];
        let mut l = 0;
        while l < k {
            let left = k - l;
            let mask: __mmask16 = if left >= 16 { 0xffff } else { (1u16 << left) - 1 };
            let mut bv = [_mm512_setzero_ps(); NR];
            for q in 0..NR {
                bv[q] = _mm512_maskz_loadu_ps(mask, b.add((j + q) * k + l));
            }
            for r in 0..MR {
                let av = _mm512_maskz_loadu_ps(mask, a.add((i + r) * k + l));
                for q in 0..NR {
                    acc[r][q] = _mm512_fmadd_ps(av, bv[q], acc[r][q]);
                }
            }
            l += 16;
        }
        for r in 0..MR {
            for q in 0..NR {
                *c.add((i + r) * n + j + q) += _mm512_reduce_add_ps(acc[r][q]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c0: &[f64]) -> Vec<f64> {
        (0..m * n)
            .map(|ij| {
                let (i, j) = (ij / n, ij % n);
                c0[ij] + (0..k).map(|l| a[i * k + l] * b[j * k + l]).sum::<f64>()
            })
            .collect()
    }

    proptest! {
        #[test]
        fn matches_naive_product(m in 1usize..13, n in 1usize..6, k in 1usize..40, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c0: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let want = naive(m, n, k, &a, &b, &c0);

            let mut c = c0.clone();
            gemm_nt_acc(m, n, k, &a, &b, &mut c);
            for (x, y) in c.iter().zip(&want) {
                prop_assert!((x - y).abs() <= 1e-12);
            }

            let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
            let mut c32 = f(&c0);
            gemm_nt_acc(m, n, k, &f(&a), &f(&b), &mut c32);
            for (x, y) in c32.iter().zip(&want) {
                prop_assert!((*x as f64 - y).abs() <= 1e-4);
            }
        }
    }
}
