//! Fully-connected layer parameters.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `y = x W + b` with `W: [inputs, outputs]`, `b: [outputs]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Scalar> Linear<T> {
    /// Weights uniform in `[-1/sqrt(inputs), 1/sqrt(inputs)]`, zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        Linear {
            weight: Tensor::from_parts(vec![inputs, outputs], data),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> LinearVars {
        LinearVars {
            weight: g.leaf(self.weight.clone(), trainable),
            bias: g.leaf(self.bias.clone(), trainable),
        }
    }
}

impl LinearVars {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.weight)?;
        g.add_row(h, self.bias)
    }
}
