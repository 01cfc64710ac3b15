//! Row-major matrix products used by the convolutions.

use crate::Scalar;

/// Column tile; four rows of it stay in L1.
const TILE: usize = 256;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for j0 in (0..n).step_by(TILE) {
        let j1 = (j0 + TILE).min(n);
        let mut rows = c.chunks_exact_mut(n);
        let mut i = 0;
        while i + 4 <= m {
            let r0 = &mut rows.next().expect("row")[j0..j1];
            let r1 = &mut rows.next().expect("row")[j0..j1];
            let r2 = &mut rows.next().expect("row")[j0..j1];
            let r3 = &mut rows.next().expect("row")[j0..j1];
            for kk in 0..k {
                let w = [a[i * k + kk], a[(i + 1) * k + kk], a[(i + 2) * k + kk], a[(i + 3) * k + kk]];
                let brow = &b[kk * n + j0..kk * n + j1];
                for ((((x0, x1), x2), x3), &bv) in r0
                    .iter_mut()
                    .zip(r1.iter_mut())
                    .zip(r2.iter_mut())
                    .zip(r3.iter_mut())
                    .zip(brow)
                {
                    *x0 += w[0] * bv;
                    *x1 += w[1] * bv;
                    *x2 += w[2] * bv;
                    *x3 += w[3] * bv;
                }
            }
            i += 4;
        }
        for row in rows {
            let r = &mut row[j0..j1];
            for kk in 0..k {
                let w = a[i * k + kk];
                for (x, &bv) in r.iter_mut().zip(&b[kk * n + j0..kk * n + j1]) {
                    *x += w * bv;
                }
            }
            i += 1;
        }
    }
}

/// Transpose of a row-major `rows×cols` matrix.
pub(crate) fn transpose<T: Scalar>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}
