//! Row-major matrix product kernels.
//!
//! All three variants accumulate into `c` using the packed kernels of the
//! `matrixmultiply` crate. Output rows are split into blocks of a fixed
//! size, so every element is computed the same way whether or not the rayon
//! pool is used and results are bit-identical across thread counts.

use rayon::prelude::*;

const BLOCK_ROWS: usize = 128;

/// Runs `f(first_row, rows, c_block)` over fixed row blocks of `c`.
fn for_row_blocks(c: &mut [f64], m: usize, n: usize, f: impl Fn(usize, usize, &mut [f64]) + Sync) {
    if m <= BLOCK_ROWS || n == 0 {
        f(0, m, c);
        return;
    }
    c.par_chunks_mut(BLOCK_ROWS * n)
        .enumerate()
        .for_each(|(b, block)| f(b * BLOCK_ROWS, block.len() / n, block));
}

/// `c[rows×n] += A·B` where `A` and `B` are described by element strides.
#[allow(clippy::too_many_arguments)]
fn strided(
    rows: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    if rows == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(a.len() > (rows - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert_eq!(c.len(), rows * n);
    // SAFETY: the asserted extents keep every strided access inside the
    // slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    for_row_blocks(c, m, n, |i0, rows, cb| {
        strided(rows, k, n, &a[i0 * k..], k, 1, b, n, 1, cb)
    });
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    for_row_blocks(c, m, n, |i0, rows, cb| {
        strided(rows, k, n, &a[i0 * k..], k, 1, b, 1, k, cb)
    });
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    for_row_blocks(c, m, n, |i0, rows, cb| strided(rows, k, n, &a[i0..], 1, m, b, n, 1, cb));
}

#[cfg(test)]
mod tests {
    use super::*;

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

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn variants_agree_with_naive() {
        for &(m, k, n) in &[
            (1, 1, 1),
            (3, 5, 2),
            (7, 9, 13),
            (64, 40, 70),
            (300, 17, 5),
            (129, 3, 257),
        ] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 3 % 13) as f64) * 0.5).collect();
            let want = naive(&a, &b, m, k, n);

            let mut c = vec![0.0; m * n];
            gemm_nn(&a, &b, &mut c, m, k, n);
            assert_eq!(c, want);
            // accumulates
            gemm_nn(&a, &b, &mut c, m, k, n);
            assert!(c.iter().zip(&want).all(|(x, y)| *x == 2.0 * y));

            let mut c = vec![0.0; m * n];
            gemm_nt(&a, &transpose(&b, k, n), &mut c, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-9);
            }

            let mut c = vec![0.0; m * n];
            gemm_tn(&transpose(&a, m, k), &b, &mut c, m, k, n);
            assert_eq!(c, want);
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let (m, k, n) = (517, 33, 29);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7919 % 1013) as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 104_729 % 2011) as f64).cos()).collect();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut c = vec![0.0; m * n];
                gemm_nn(&a, &b, &mut c, m, k, n);
                let mut d = vec![0.0; k * n];
                gemm_tn(&a, &c, &mut d, k, m, n);
                (c, d)
            })
        };
        assert_eq!(run(1), run(4));
    }
}
