//! Matrix-multiply kernels.
//!
//! Every product is expressed as `C[m,n] = beta * C + op(A) * op(B)` over
//! row-major buffers. With the `parallel` feature, large products are split
//! into fixed 64-row blocks of `C` that run on the rayon pool; block
//! boundaries never depend on the thread count, so results are reproducible.

#![allow(clippy::too_many_arguments)]

/// Storage layout of the two operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `A` is `[m,k]`, `B` is `[k,n]`.
    NN,
    /// `A` is `[m,k]`, `B` is stored `[n,k]` and used transposed.
    NT,
    /// `A` is stored `[k,m]` and used transposed, `B` is `[k,n]`.
    TN,
}

pub const ROW_BLOCK: usize = 64;
const PAR_THRESHOLD: usize = 1 << 18;

struct Strides {
    rsa: isize,
    csa: isize,
    rsb: isize,
    csb: isize,
}

fn strides(layout: Layout, m: usize, k: usize, n: usize) -> Strides {
    let (m, k, n) = (m as isize, k as isize, n as isize);
    match layout {
        Layout::NN => Strides { rsa: k, csa: 1, rsb: n, csb: 1 },
        Layout::NT => Strides { rsa: k, csa: 1, rsb: 1, csb: k },
        Layout::TN => Strides { rsa: 1, csa: m, rsb: n, csb: 1 },
    }
}

fn check(layout: Layout, m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &[f32]) {
    assert_eq!(a.len(), m * k, "{layout:?} gemm: lhs length");
    assert_eq!(b.len(), k * n, "{layout:?} gemm: rhs length");
    assert_eq!(c.len(), m * n, "{layout:?} gemm: output length");
}

/// Rows `[row0, row0 + rows)` of the product, written into `c_block`.
fn block(
    s: &Strides,
    row0: usize,
    rows: usize,
    k: usize,
    n: usize,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c_block: &mut [f32],
) {
    if rows == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c_block.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: strides and extents were validated against the buffer lengths
    // in `check`; `row0 * rsa` stays inside `a` because `row0 < m`.
    unsafe {
        matrixmultiply::sgemm(
            rows,
            k,
            n,
            1.0,
            a.as_ptr().offset(row0 as isize * s.rsa),
            s.rsa,
            s.csa,
            b.as_ptr(),
            s.rsb,
            s.csb,
            beta,
            c_block.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Single-threaded product. Always available.
pub fn gemm_seq(layout: Layout, m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    check(layout, m, k, n, a, b, c);
    let s = strides(layout, m, k, n);
    for (bi, c_block) in c.chunks_mut(ROW_BLOCK * n.max(1)).enumerate() {
        let row0 = bi * ROW_BLOCK;
        let rows = ROW_BLOCK.min(m - row0);
        block(&s, row0, rows, k, n, a, b, beta, c_block);
    }
}

/// Block-parallel product over the rayon pool.
#[cfg(feature = "parallel")]
pub fn gemm_par(layout: Layout, m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    use rayon::prelude::*;
    check(layout, m, k, n, a, b, c);
    let s = strides(layout, m, k, n);
    c.par_chunks_mut(ROW_BLOCK * n.max(1))
        .enumerate()
        .for_each(|(bi, c_block)| {
            let row0 = bi * ROW_BLOCK;
            let rows = ROW_BLOCK.min(m - row0);
            block(&s, row0, rows, k, n, a, b, beta, c_block);
        });
}

/// `C = beta * C + op(A) op(B)`, dispatching to the parallel kernel for
/// large products when the feature is enabled.
pub fn gemm_acc(layout: Layout, m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_THRESHOLD && m > ROW_BLOCK && rayon::current_num_threads() > 1 {
        return gemm_par(layout, m, k, n, a, b, beta, c);
    }
    let _ = PAR_THRESHOLD;
    gemm_seq(layout, m, k, n, a, b, beta, c)
}

/// `C = op(A) op(B)`.
pub fn gemm(layout: Layout, m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    gemm_acc(layout, m, k, n, a, b, 0.0, c)
}
