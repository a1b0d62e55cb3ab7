use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::real::Real;

/// A trainable array together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Real> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { value: vec![T::zero(); n], grad: vec![T::zero(); n], shape: shape.to_vec() }
    }

    pub fn from_vec(shape: &[usize], value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "param shape mismatch");
        let grad = vec![T::zero(); value.len()];
        Self { value, grad, shape: shape.to_vec() }
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let value = (0..n).map(|_| T::of(dist.sample(rng))).collect();
        Self::from_vec(shape, value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param::from_vec(&self.shape, self.value.iter().map(|&x| U::of(x.as_f64())).collect())
    }
}

/// Anything that owns named parameters.
pub trait Module<T: Real> {
    fn named_params(&self) -> Vec<(String, &Param<T>)>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}

pub fn prefixed<'a, T>(prefix: &str, items: Vec<(String, &'a Param<T>)>) -> Vec<(String, &'a Param<T>)> {
    items.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}
