//! Slice-level numeric kernels. Every reduction runs in a fixed order on one thread, so
//! results are bitwise reproducible.

use super::real::Real;

/// Outputs narrower than this use the row-dot-product formulation, which keeps the inner
/// loop long when `n` is a small adapter rank.
const NARROW: usize = 32;

/// Calls `$avx(args)` when the CPU has AVX2, else `$plain(args)`. Both variants compile
/// the same source without FMA contraction, so they produce identical bits.
macro_rules! dispatch {
    ($plain:ident, $avx:ident($($arg:expr),*)) => {{
        #[cfg(target_arch = "x86_64")]
        {
            #[target_feature(enable = "avx2")]
            unsafe fn $avx<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
                $plain(a, b, m, k, n)
            }
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the feature was detected at runtime just above.
                return unsafe { $avx($($arg),*) };
            }
        }
        $plain($($arg),*)
    }};
}

/// Dot product with eight independent accumulators, combined in a fixed order.
#[inline(always)]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `c[i, j] = dot(a[i, :], bt[j, :])` for `a: m×k`, `bt: n×k`.
fn matmul_rows<T: Real>(a: &[T], bt: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    dispatch!(matmul_rows_impl, matmul_rows_avx2(a, bt, m, k, n))
}

#[inline(always)]
fn matmul_rows_impl<T: Real>(a: &[T], bt: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = Vec::with_capacity(m * n);
    if k == 0 {
        c.resize(m * n, T::zero());
        return c;
    }
    for arow in a.chunks_exact(k).take(m) {
        for brow in bt.chunks_exact(k) {
            c.push(dot(arow, brow));
        }
    }
    c
}

/// `a · b` for `a: m×k`, `b: k×n`, row-major.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    if n < NARROW && k >= NARROW {
        return matmul_rows(a, &transpose(b, k, n), m, k, n);
    }
    dispatch!(matmul_tiled, matmul_tiled_avx2(a, b, m, k, n))
}

#[inline(always)]
fn matmul_tiled<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    if n == 0 || k == 0 {
        return c;
    }
    // Register tiles of MR×NR outputs; each output still sums over k in index order.
    const MR: usize = 4;
    const NR: usize = 16;
    let mut i0 = 0;
    while i0 < m {
        let mr = MR.min(m - i0);
        let mut j0 = 0;
        while j0 < n {
            let nr = NR.min(n - j0);
            if mr == MR && nr == NR {
                let mut acc = [[T::zero(); NR]; MR];
                for p in 0..k {
                    let brow: &[T; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("tile");
                    for (r, row) in acc.iter_mut().enumerate() {
                        let av = a[(i0 + r) * k + p];
                        for q in 0..NR {
                            row[q] += av * brow[q];
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
                }
            } else {
                for r in i0..i0 + mr {
                    for p in 0..k {
                        let av = a[r * k + p];
                        let brow = &b[p * n + j0..p * n + j0 + nr];
                        for (cv, &bv) in c[r * n + j0..r * n + j0 + nr].iter_mut().zip(brow) {
                            *cv += av * bv;
                        }
                    }
                }
            }
            j0 += nr;
        }
        i0 += mr;
    }
    c
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    if k >= NARROW {
        return matmul_rows(a, b, m, k, n);
    }
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

/// `aᵀ · b` for `a: m×k`, `b: m×n`; result `k×n`.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let at = transpose(a, m, k);
    if n < NARROW {
        return matmul_rows(&at, &transpose(b, m, n), k, m, n);
    }
    matmul(&at, b, k, m, n)
}

/// In-place `acc += x`.
pub fn add_assign<T: Real>(acc: &mut [T], x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

/// Softmax over each contiguous row of length `n`, with max subtraction.
pub fn softmax_rows<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(n) {
        softmax_in_place(row);
    }
    out
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(row)`, stable.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in row {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// d silu / dx = σ(x)·(1 + x·(1 − σ(x))).
#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a[i * k + t] * b[t * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn narrow_paths_match_triple_loop() {
        let mut rng = crate::tensor::Rng::new(11);
        for &(m, k, n) in &[(70, 64, 4), (9, 40, 3), (33, 172, 8), (5, 3, 50)] {
            let a = rng.normals(m * k, 1.0);
            let b = rng.normals(k * n, 1.0);
            let want = naive(&a, &b, m, k, n);
            let close = |got: &[f64]| got.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-10);
            assert!(close(&matmul(&a, &b, m, k, n)));
            assert!(close(&matmul_nt(&a, &transpose(&b, k, n), m, k, n)));
            assert!(close(&matmul_tn(&transpose(&a, m, k), &b, k, m, n)));
        }
    }

    #[test]
    fn matmul_matches_triple_loop_on_small_shapes() {
        let mut rng = crate::tensor::Rng::new(5);
        for m in 1..=4 {
            for k in 1..=4 {
                for n in 1..=4 {
                    let a = rng.normals(m * k, 1.0);
                    let b = rng.normals(k * n, 1.0);
                    let c = matmul(&a, &b, m, k, n);
                    // Same accumulation order as the oracle, so exact.
                    assert_eq!(c, naive(&a, &b, m, k, n));
                }
            }
        }
    }

    #[test]
    fn transposed_variants_agree() {
        let mut rng = crate::tensor::Rng::new(6);
        let (m, k, n) = (3, 5, 4);
        let a = rng.normals(m * k, 1.0);
        let b = rng.normals(n * k, 1.0);
        let nt = matmul_nt(&a, &b, m, k, n);
        assert_eq!(nt, naive(&a, &transpose(&b, n, k), m, k, n));
        let c = rng.normals(m * n, 1.0);
        let tn = matmul_tn(&a, &c, m, k, n);
        assert_eq!(tn, naive(&transpose(&a, m, k), &c, k, m, n));
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!((silu(20.0f64) - 20.0).abs() < 1e-7);
    }
}
