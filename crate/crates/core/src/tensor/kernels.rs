//! Dense matrix-product kernels. All of them accumulate into `out`.

use crate::scalar::Scalar;

/// `out[m×p] += a[m×k] · b[k×p]`
pub(crate) fn mm_nn<S: Scalar>(m: usize, k: usize, p: usize, a: &[S], b: &[S], out: &mut [S]) {
    for i in 0..m {
        let out_row = &mut out[i * p..(i + 1) * p];
        for l in 0..k {
            let av = a[i * k + l];
            if av == S::zero() {
                continue;
            }
            let b_row = &b[l * p..(l + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×p] += a[m×k] · b[p×k]ᵀ`
pub(crate) fn mm_nt<S: Scalar>(m: usize, k: usize, p: usize, a: &[S], b: &[S], out: &mut [S]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * p + j] += acc;
        }
    }
}

/// `out[m×p] += a[k×m]ᵀ · b[k×p]`
pub(crate) fn mm_tn<S: Scalar>(m: usize, k: usize, p: usize, a: &[S], b: &[S], out: &mut [S]) {
    for l in 0..k {
        let b_row = &b[l * p..(l + 1) * p];
        for i in 0..m {
            let av = a[l * m + i];
            if av == S::zero() {
                continue;
            }
            let out_row = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}
