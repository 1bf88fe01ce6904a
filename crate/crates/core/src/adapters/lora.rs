//! Plain low-rank adapter: `x·W + (α/r)·x·A·B` with `W` frozen.

use crate::error::{Error, Result};
use crate::model::ParamSource;
use crate::tensor::{Real, Rng, Tape, Tensor, Var};

/// Standard deviation of the Gaussian used for every `A` factor.
pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    /// `d_in × r`
    pub a: Tensor<T>,
    /// `r × d_out`
    pub b: Tensor<T>,
    pub alpha: f64,
}

/// `A ~ N(0, 0.02²)`, `B = 0`; both trainable.
pub fn lora_init<T: Real>(
    d_in: usize,
    d_out: usize,
    rank: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<LoraAdapter<T>> {
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(Error::AdapterRank { rank, d_in, d_out });
    }
    Ok(LoraAdapter {
        a: Tensor::randn(&[d_in, rank], LORA_INIT_STD, rng).with_requires_grad(true),
        b: Tensor::zeros(&[rank, d_out]).with_requires_grad(true),
        alpha,
    })
}

impl<T: Real> LoraAdapter<T> {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn d_in(&self) -> usize {
        self.a.rows()
    }

    pub fn d_out(&self) -> usize {
        self.b.cols()
    }

    /// `α/r`, always derived from the current rank.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// Records `(α/r)·x·A·B` on the tape.
    pub fn record_delta<S: ParamSource<T>>(
        &self,
        tape: &mut Tape<T>,
        src: &mut S,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        let a = src.bind(tape, &format!("{prefix}.A"), &self.a);
        let b = src.bind(tape, &format!("{prefix}.B"), &self.b);
        let xa = tape.matmul(x, a)?;
        let xab = tape.matmul(xa, b)?;
        tape.scale(xab, self.scale())
    }

    /// Dense `(α/r)·A·B`, the amount merged into `W`.
    pub fn delta_weight(&self) -> Result<Tensor<T>> {
        let ab = crate::tensor::matmul(&self.a, &self.b)?;
        let s = T::from_f64_lossy(self.scale());
        let data = ab.data().iter().map(|&v| v * s).collect();
        Tensor::new(ab.shape().to_vec(), data)
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.a.set_requires_grad(flag);
        self.b.set_requires_grad(flag);
    }

    pub fn cast<U: Real>(&self) -> LoraAdapter<U> {
        LoraAdapter {
            a: self.a.cast(),
            b: self.b.cast(),
            alpha: self.alpha,
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}.A"), &self.a);
        f(format!("{prefix}.B"), &self.b);
    }

    pub(crate) fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut Tensor<T>),
    ) {
        f(format!("{prefix}.A"), &mut self.a);
        f(format!("{prefix}.B"), &mut self.b);
    }
}

/// Eager `x·W + (α/r)·x·A·B`.
pub fn lora_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    adapter: &LoraAdapter<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut src = crate::model::Anonymous;
    let xv = tape.leaf(x);
    let wv = tape.leaf(w);
    let base = tape.matmul(xv, wv)?;
    let delta = adapter.record_delta(&mut tape, &mut src, "lora", xv)?;
    let out = tape.add(base, delta)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_b_gives_exact_base_output() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f32>::randn(&[5, 6], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&[6, 3], 1.0, &mut rng);
        let ad = lora_init::<f32>(6, 3, 2, 4.0, &mut rng).unwrap();
        assert!(crate::tensor::matmul(&ad.a, &ad.b).unwrap().is_all_zero());
        let out = lora_forward(&x, &w, &ad).unwrap();
        let base = crate::tensor::matmul(&x, &w).unwrap();
        assert!(out.bitwise_eq(&base));
    }

    #[test]
    fn scalar_hand_computation() {
        let ad = LoraAdapter::<f64> {
            a: Tensor::from_f64(&[1, 1], &[2.0]).unwrap(),
            b: Tensor::from_f64(&[1, 1], &[3.0]).unwrap(),
            alpha: 2.0,
        };
        let x = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
        let w = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
        assert_eq!(lora_forward(&x, &w, &ad).unwrap().data(), &[13.0]);
    }

    #[test]
    fn rank_16_alpha_32_scales_by_two() {
        let ad = lora_init::<f32>(32, 32, 16, 32.0, &mut Rng::new(0)).unwrap();
        assert_eq!(ad.scale(), 2.0);
    }

    #[test]
    fn scale_follows_rank() {
        let mut ad = lora_init::<f32>(8, 8, 4, 8.0, &mut Rng::new(0)).unwrap();
        assert_eq!(ad.scale(), 2.0);
        ad.a = Tensor::zeros(&[8, 2]);
        ad.b = Tensor::zeros(&[2, 8]);
        assert_eq!(ad.scale(), 4.0);
    }

    #[test]
    fn rank_above_min_dim_is_rejected() {
        let err = lora_init::<f32>(4, 3, 4, 8.0, &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, Error::AdapterRank { rank: 4, .. }));
        assert!(lora_init::<f32>(4, 3, 0, 8.0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn a_init_mean_is_near_zero() {
        let (d_in, r) = (64, 8);
        let ad = lora_init::<f64>(d_in, 64, r, 16.0, &mut Rng::new(11)).unwrap();
        let mean = ad.a.data().iter().sum::<f64>() / (d_in * r) as f64;
        assert!(mean.abs() < 3.0 * LORA_INIT_STD / ((d_in * r) as f64).sqrt());
    }
}
