//! Matrix-product kernels shared by the tape and the inference path.
//!
//! Each output element accumulates its terms in increasing index order, so
//! results do not depend on blocking or on the caller.

use core::ops::{Add, Mul};

/// `out[m,n] += a[m,k] * b[k,n]`.
pub fn matmul_acc<S>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize)
where
    S: Copy + Add<Output = S> + Mul<Output = S>,
{
    debug_assert_eq!(b.len(), k * n);
    matmul_acc_block(a, k, 0, b, out, m, n);
}

/// `out[m,n] += a[m, start..start+kb] * b[kb,n]` where `a` has `k` columns and
/// `kb = b.len() / n`. Feeding consecutive row blocks of `b` in order gives the
/// same bits as one [`matmul_acc`] call.
pub fn matmul_acc_block<S>(a: &[S], k: usize, start: usize, b: &[S], out: &mut [S], m: usize, n: usize)
where
    S: Copy + Add<Output = S> + Mul<Output = S>,
{
    let kb = b.len().checked_div(n).unwrap_or(0);
    debug_assert_eq!(a.len(), m * k);
    debug_assert!(start + kb <= k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k + start..i * k + start + kb];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`.
pub fn matmul_acc_bt<S>(g: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize)
where
    S: Copy + Add<Output = S> + Mul<Output = S>,
{
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = out[i * k + p];
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                acc = acc + gv * bv;
            }
            out[i * k + p] = acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`.
pub fn matmul_acc_at<S>(a: &[S], g: &[S], out: &mut [S], m: usize, k: usize, n: usize)
where
    S: Copy + Add<Output = S> + Mul<Output = S>,
{
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in o_row.iter_mut().zip(g_row) {
                *o = *o + av * gv;
            }
        }
    }
}
