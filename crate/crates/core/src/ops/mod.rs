//! Differentiable primitives, implemented as methods on [`crate::Tape`].
//!
//! Shapes are static per forward pass. Binary elementwise ops broadcast by
//! trailing-axis rules only (right-aligned shapes, extent-1 axes stretch).

mod element;
mod linalg;
mod layout;
mod norm;
mod reduce;
mod scan;

pub use scan::{scan_flops, ScanInputs};

use crate::array::strides;
use crate::{Error, Result};

/// Broadcast result shape under trailing-axis rules.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = dim_at(a, rank, i);
        let db = dim_at(b, rank, i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

fn dim_at(shape: &[usize], rank: usize, i: usize) -> usize {
    let off = rank - shape.len();
    if i < off {
        1
    } else {
        shape[i - off]
    }
}

/// Strides of `shape` viewed under the (broadcast-compatible) `out` shape;
/// stretched axes get stride 0.
pub(crate) fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let s = strides(shape);
    let mut r = vec![0usize; out.len()];
    for i in off..out.len() {
        if shape[i - off] != 1 {
            r[i] = s[i - off];
        }
    }
    r
}

/// Walks every flat index of `out_shape`, handing the callback the matching
/// flat indices into two broadcast operands.
pub(crate) fn for_each_pair(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for o in 0..numel {
        f(o, ia, ib);
        // odometer increment
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[m,n] += a[m,k] · b[n,k]^T
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o += dot(arow, brow);
        }
    }
}

// out[k,n] += a[m,k]^T · b[m,n]
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = acc[0] + acc[1] + acc[2] + acc[3];
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[2, 1, 3], &[4, 3]).unwrap(), vec![2, 4, 3]);
        assert_eq!(broadcast_shape("t", &[5], &[1]).unwrap(), vec![5]);
        assert!(broadcast_shape("t", &[2, 3], &[4, 3]).is_err());
    }

    #[test]
    fn gemm_variants_agree() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut c1 = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c1);

        // b^T laid out [n,k], a^T laid out [k,m]
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut c2);
        for (x, y) in c1.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c3 = vec![0.0; m * n];
        gemm_tn(k, m, n, &at, &b, &mut c3);
        for (x, y) in c1.iter().zip(&c3) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
