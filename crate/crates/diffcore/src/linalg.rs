// Row-blocked dense products on top of matrixmultiply. Blocks are a fixed
// number of rows so reductions over rows happen in the same order whatever
// the thread count.

use rayon::prelude::*;

const BLOCK_ROWS: usize = 512;

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: slice extents cover m*k, k*n and m*n elements for the given
    // strides, checked by the callers below.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a[m, k] * b[k, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(BLOCK_ROWS * n)
        .enumerate()
        .for_each(|(blk, c)| {
            let rows = c.len() / n;
            let a_blk = &a[blk * BLOCK_ROWS * k..(blk * BLOCK_ROWS + rows) * k];
            gemm(rows, k, n, a_blk, k as isize, 1, b, n as isize, 1, c);
        });
    out
}

/// `a[m, k] * b[n, k]^T`.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(BLOCK_ROWS * n)
        .enumerate()
        .for_each(|(blk, c)| {
            let rows = c.len() / n;
            let a_blk = &a[blk * BLOCK_ROWS * k..(blk * BLOCK_ROWS + rows) * k];
            gemm(rows, k, n, a_blk, k as isize, 1, b, 1, k as isize, c);
        });
    out
}

/// `a[m, k]^T * b[m, n]`, reduced over `m` block by block in order.
pub fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), m * n);
    let blocks = m.div_ceil(BLOCK_ROWS).max(1);
    let partials: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .map(|blk| {
            let r0 = blk * BLOCK_ROWS;
            let rows = (m - r0).min(BLOCK_ROWS);
            let mut c = vec![0.0; k * n];
            if rows > 0 {
                let a_blk = &a[r0 * k..(r0 + rows) * k];
                let b_blk = &b[r0 * n..(r0 + rows) * n];
                gemm(k, rows, n, a_blk, 1, k as isize, b_blk, n as isize, 1, &mut c);
            }
            c
        })
        .collect();
    let mut out = vec![0.0; k * n];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}
