//! Central finite differences, the independent oracle for every backward rule.

use super::real::Real;
use super::tensor::Tensor;

/// Central-difference gradient of `f` at `params`, one coordinate at a time:
/// `(f(p + eps·e_i) − f(p − eps·e_i)) / (2·eps)`.
pub fn finite_diff_grad<T, F>(f: F, params: &[Tensor<T>], eps: f64) -> Vec<Tensor<T>>
where
    T: Real,
    F: FnMut(&[Tensor<T>]) -> f64,
{
    stencil(f, params, eps, &[(1.0, 1.0), (-1.0, -1.0)], 2.0)
}

/// Five-point central difference
/// `(−f(p + 2h) + 8·f(p + h) − 8·f(p − h) + f(p − 2h)) / 12h` with `h = eps`.
/// Truncation error is `O(h⁴)`, so `h` can be large enough to keep round-off small on
/// whole-model objectives.
pub fn finite_diff_grad_five_point<T, F>(f: F, params: &[Tensor<T>], eps: f64) -> Vec<Tensor<T>>
where
    T: Real,
    F: FnMut(&[Tensor<T>]) -> f64,
{
    stencil(
        f,
        params,
        eps,
        &[(2.0, -1.0), (1.0, 8.0), (-1.0, -8.0), (-2.0, 1.0)],
        12.0,
    )
}

/// `Σ w·f(p + o·eps·e_i) / (denom·eps)` over `(o, w)` taps.
fn stencil<T, F>(mut f: F, params: &[Tensor<T>], eps: f64, taps: &[(f64, f64)], denom: f64) -> Vec<Tensor<T>>
where
    T: Real,
    F: FnMut(&[Tensor<T>]) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].shape());
        for i in 0..params[p].numel() {
            let orig = work[p].data()[i];
            let mut acc = 0.0;
            for &(o, w) in taps {
                work[p].data_mut()[i] = T::from_f64_lossy(orig.as_f64() + o * eps);
                acc += w * f(&work);
            }
            work[p].data_mut()[i] = orig;
            grad.data_mut()[i] = T::from_f64_lossy(acc / (denom * eps));
        }
        out.push(grad);
    }
    out
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps coordinates whose true gradient is
/// (numerically) zero from dividing rounding noise by zero.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest [`relative_error`] across all coordinates of paired tensors.
pub fn max_relative_error<T: Real>(a: &[Tensor<T>], b: &[Tensor<T>], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(&x, &y)| relative_error(x.as_f64(), y.as_f64(), floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let p = vec![Tensor::<f64>::from_f64(&[1], &[3.0]).unwrap()];
        let g = finite_diff_grad(|ps| ps[0].data()[0].powi(2), &p, 1e-4);
        assert!((g[0].data()[0] - 6.0).abs() < 1e-6);
        // exact for quartics
        let g = finite_diff_grad_five_point(|ps| ps[0].data()[0].powi(4), &p, 0.5);
        assert!((g[0].data()[0] - 108.0).abs() < 1e-9);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = vec![Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 5.0]).unwrap()];
        let g = finite_diff_grad(|_| 4.25, &p, 1e-4);
        assert!(g[0].data().iter().all(|v| *v == 0.0));
    }
}
