//! Raw slice kernels shared by forward ops and their backward rules.

use crate::scalar::Scalar;

/// out[m,n] += a[m,k] . b[k,n]
pub(crate) fn mm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// da[m,k] += g[m,n] . b[k,n]^T
pub(crate) fn mm_grad_lhs_acc<T: Scalar>(
    g: &[T],
    b: &[T],
    da: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let da_row = &mut da[i * k..(i + 1) * k];
        for (kk, d) in da_row.iter_mut().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                acc = acc + gv * bv;
            }
            *d = *d + acc;
        }
    }
}

/// db[k,n] += a[m,k]^T . g[m,n]
pub(crate) fn mm_grad_rhs_acc<T: Scalar>(
    a: &[T],
    g: &[T],
    db: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let db_row = &mut db[kk * n..(kk + 1) * n];
            for (d, &gv) in db_row.iter_mut().zip(g_row) {
                *d = *d + av * gv;
            }
        }
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Materializes `dst[p(i)] = src[i]` where `p` reindexes axes by `perm`:
/// output axis `j` reads input axis `perm[j]`.
pub(crate) fn permute_into<T: Scalar>(src: &[T], dst: &mut [T], shape: &[usize], perm: &[usize]) {
    let rank = shape.len();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut idx = vec![0usize; rank];
    for slot in dst.iter_mut() {
        let mut src_off = 0;
        for j in 0..rank {
            src_off += idx[j] * in_strides[perm[j]];
        }
        *slot = src[src_off];
        for j in (0..rank).rev() {
            idx[j] += 1;
            if idx[j] < out_shape[j] {
                break;
            }
            idx[j] = 0;
        }
    }
}

/// One interpolation tap along an axis: source indices and the weight of
/// the second sample. align-corners=false convention.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_hi: f64,
}

/// Taps for upsampling an axis of `len` samples by an integer `factor`.
pub(crate) fn bilinear_taps(len: usize, factor: usize) -> Vec<Tap> {
    let f = factor as f64;
    (0..len * factor)
        .map(|o| {
            let src = (o as f64 + 0.5) / f - 0.5;
            let floor = src.floor();
            let lo = floor.max(0.0) as usize;
            let hi = (lo + 1).min(len - 1);
            let w_hi = if floor < 0.0 { 0.0 } else { src - floor };
            Tap {
                lo: lo.min(len - 1),
                hi,
                w_hi,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[5]), vec![1]);
        assert!(strides_of(&[]).is_empty());
    }

    #[test]
    fn permute_transposes() {
        let src = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let mut dst = [0.0f32; 6];
        permute_into(&src, &mut dst, &[2, 3], &[1, 0]);
        assert_eq!(dst, [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn unit_factor_taps_are_identity() {
        for (i, tap) in bilinear_taps(5, 1).iter().enumerate() {
            assert_eq!(tap.lo, i);
            assert_eq!(tap.w_hi, 0.0);
        }
    }
}
