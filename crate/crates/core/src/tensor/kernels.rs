use super::Element;

/// Width of the column tile kept hot in L1 by [`gemm`].
const TILE: usize = 256;

/// `c += a · b` for row-major `a` (m×p), `b` (p×n), `c` (m×n).
///
/// Every output element accumulates its products in ascending `k`, which
/// is exactly the naive triple-loop order, so results are bitwise equal to
/// it. Rows are processed four at a time over column tiles so each loaded
/// row of `b` is reused.
pub(crate) fn gemm<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, p: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime just above.
        unsafe { gemm_avx2(a, b, c, m, p, n) };
        return;
    }
    gemm_body(a, b, c, m, p, n);
}

/// Same body compiled with wider vectors. No FMA is enabled, so products
/// and sums round exactly as in the portable build.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, p: usize, n: usize) {
    gemm_body(a, b, c, m, p, n);
}

#[inline(always)]
fn gemm_body<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, p: usize, n: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(c.len(), m * n);
    let mut j0 = 0;
    while j0 < n {
        let jw = TILE.min(n - j0);
        let mut i = 0;
        while i + 4 <= m {
            let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            let (c0, c1, c2, c3) = (
                &mut c0[j0..j0 + jw],
                &mut c1[j0..j0 + jw],
                &mut c2[j0..j0 + jw],
                &mut c3[j0..j0 + jw],
            );
            for k in 0..p {
                let (a0, a1, a2, a3) = (a[i * p + k], a[(i + 1) * p + k], a[(i + 2) * p + k], a[(i + 3) * p + k]);
                let br = &b[k * n + j0..k * n + j0 + jw];
                for jj in 0..jw {
                    let bv = br[jj];
                    c0[jj] += a0 * bv;
                    c1[jj] += a1 * bv;
                    c2[jj] += a2 * bv;
                    c3[jj] += a3 * bv;
                }
            }
            i += 4;
        }
        for i in i..m {
            let cr = &mut c[i * n + j0..i * n + j0 + jw];
            for k in 0..p {
                let aik = a[i * p + k];
                let br = &b[k * n + j0..k * n + j0 + jw];
                for (cv, &bv) in cr.iter_mut().zip(br) {
                    *cv += aik * bv;
                }
            }
        }
        j0 += jw;
    }
}

pub(crate) fn transpose<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    transpose_into(a, rows, cols, &mut out);
    out
}

/// Writes the transpose of row-major `a` (rows×cols) into `out`.
pub(crate) fn transpose_into<T: Element>(a: &[T], rows: usize, cols: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        for (j, &v) in a[i * cols..(i + 1) * cols].iter().enumerate() {
            out[j * rows + i] = v;
        }
    }
}
