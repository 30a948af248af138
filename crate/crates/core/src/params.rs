//! Small generic parameter containers.
//!
//! Containers are generic over the leaf type so the same structure can hold
//! concrete tensors, tape handles, gradients, or optimizer moments.

use crate::numerics::Tensor;

/// Affine projection `x·weight + bias`; `weight` is `d_in × d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

impl<T> Linear<T> {
    pub fn map<'a, U>(&'a self, name: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> Linear<U> {
        Linear {
            weight: f(&format!("{name}.weight"), &self.weight),
            bias: f(&format!("{name}.bias"), &self.bias),
        }
    }

    pub fn visit_mut<'a>(&'a mut self, name: &str, f: &mut impl FnMut(&str, &'a mut T)) {
        f(&format!("{name}.weight"), &mut self.weight);
        f(&format!("{name}.bias"), &mut self.bias);
    }
}

impl Linear<Tensor> {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros([d_in, d_out]),
            bias: Tensor::zeros([d_out]),
        }
    }
}

/// Layer-norm scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T = Tensor> {
    pub gamma: T,
    pub beta: T,
}

impl<T> Norm<T> {
    pub fn map<'a, U>(&'a self, name: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> Norm<U> {
        Norm {
            gamma: f(&format!("{name}.gamma"), &self.gamma),
            beta: f(&format!("{name}.beta"), &self.beta),
        }
    }

    pub fn visit_mut<'a>(&'a mut self, name: &str, f: &mut impl FnMut(&str, &'a mut T)) {
        f(&format!("{name}.gamma"), &mut self.gamma);
        f(&format!("{name}.beta"), &mut self.beta);
    }
}

impl Norm<Tensor> {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Tensor::ones([d]),
            beta: Tensor::zeros([d]),
        }
    }
}
