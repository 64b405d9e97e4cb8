//! Learnable parameter tensors and seeded initialization.
//!
//! Training runs in f32; gradient checking switches the whole model to f64,
//! so everything on the learnable path is generic over [`Scalar`].

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt::Debug;

/// Floating-point scalar used for features, weights and gradients.
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + Debug
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
}

/// Shorthand cast from f64 into the model scalar.
#[inline]
pub fn c<T: Scalar>(x: f64) -> T {
    T::from_f64(x)
}

/// A named weight tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Param {
            name: name.into(),
            value: ArrayD::zeros(IxDyn(shape)),
            grad: ArrayD::zeros(IxDyn(shape)),
        }
    }

    /// He-style init: normal with std sqrt(2 / fan_in) where fan_in is the
    /// product of all dimensions but the last.
    pub fn he_init(name: impl Into<String>, shape: &[usize], rng: &mut impl Rng) -> Self {
        let fan_in: usize = shape[..shape.len() - 1].iter().product::<usize>().max(1);
        let std = (2.0 / fan_in as f64).sqrt();
        let mut value = ArrayD::zeros(IxDyn(shape));
        for v in value.iter_mut() {
            let g: f64 = StandardNormal.sample(rng);
            *v = c(g * std);
        }
        let grad = ArrayD::zeros(IxDyn(shape));
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Scales accumulated gradients, used when averaging over a batch.
    pub fn scale_grad(&mut self, factor: T) {
        self.grad.mapv_inplace(|g| g * factor);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn he_init_is_seeded_and_scaled() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a: Param<f64> = Param::he_init("w", &[64, 32], &mut rng);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let b: Param<f64> = Param::he_init("w", &[64, 32], &mut rng);
        assert_eq!(a.value, b.value);

        let var: f64 =
            a.value.iter().map(|x| x * x).sum::<f64>() / a.len() as f64;
        let expect = 2.0 / 64.0;
        assert!((var - expect).abs() < expect * 0.3, "var {var} vs {expect}");
    }
}
