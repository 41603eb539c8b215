//! Straight-loop matrix kernels over row-major slices. None of these touch
//! the multiply counter; callers record the forward products they issue.

use super::Real;

/// `out = a[p x q] * b[q x r]`
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    out.iter_mut().for_each(|x| *x = T::zero());
    matmul_acc(a, b, out, p, q, r);
}

/// `out += a[p x q] * b[q x r]`
pub(crate) fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        let out_row = &mut out[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b[k * r..(k + 1) * r];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
}

/// `out += a[p x q] * b[r x q]^T`
pub(crate) fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        for j in 0..r {
            let b_row = &b[j * q..(j + 1) * q];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * r + j] += acc;
        }
    }
}

/// `out += a[q x p]^T * b[q x r]`
pub(crate) fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for k in 0..q {
        let a_row = &a[k * p..(k + 1) * p];
        let b_row = &b[k * r..(k + 1) * r];
        for (i, &aki) in a_row.iter().enumerate() {
            let out_row = &mut out[i * r..(i + 1) * r];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
}
