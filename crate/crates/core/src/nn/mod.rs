//! Minimal layer library with explicit forward/backward passes.
//!
//! Every layer offers two forward paths: `infer(&self, ..)` (inference
//! statistics, no caching, safe to share across threads) and
//! `forward(&mut self, ..)` (training statistics, caches what `backward`
//! needs). `backward` consumes the cache, accumulates parameter gradients and
//! returns the gradient with respect to the layer input.

mod blocks;
mod layers;

pub use blocks::{BasicBlock, DecoderBlock};
pub use layers::{
    upsample_nearest2x, upsample_nearest2x_backward, BatchNorm2d, Conv2d, Linear, MaxPool2d,
    Padding, Relu, Tanh,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Scalar;

/// A named array of weights together with its accumulated gradient.
///
/// Non-trainable entries (batch-norm running statistics) share the container
/// so they travel through checkpoints with everything else.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: &[usize], value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        Self {
            grad: vec![T::zero(); value.len()],
            value,
            shape: shape.to_vec(),
            trainable: true,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self::new(shape, vec![v; shape.iter().product()])
    }

    /// He-normal initialisation for layers followed by rectifiers.
    pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = (0..shape.iter().product::<usize>())
            .map(|_| T::from_f64(dist.sample(rng)))
            .collect();
        Self::new(shape, value)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let value = (0..shape.iter().product::<usize>())
            .map(|_| T::from_f64(rng.random_range(-bound..=bound)))
            .collect();
        Self::new(shape, value)
    }

    pub fn buffer(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Callback handed every parameter of a module together with its dotted name.
pub type VisitFn<'a, T> = dyn FnMut(&str, &mut Param<T>) + 'a;

/// Anything owning parameters.
pub trait Module<T: Scalar> {
    fn visit(&mut self, prefix: &str, f: &mut VisitFn<'_, T>);

    fn zero_grad(&mut self) {
        self.visit("", &mut |_, p| p.zero_grad());
    }

    /// Number of trainable scalars.
    fn num_parameters(&mut self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.len();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
