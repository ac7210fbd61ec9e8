use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
    /// `a + b * exp(x)`
    ExpAffine { a: f32, b: f32 },
}

impl Activation {
    /// The regression output transform `6 + 3 exp(x)`.
    pub const REGRESSION: Activation = Activation::ExpAffine { a: 6.0, b: 3.0 };

    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
            Activation::ExpAffine { a, b } => a + b * x.exp(),
        }
    }

    /// Derivative at input `x` with output `y`.
    #[inline]
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Activation::Relu => (x > 0.0) as u8 as f32,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
            Activation::ExpAffine { b, .. } => b * x.exp(),
        }
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation_forward(input: &Tensor, kind: Activation) -> Tensor {
    if kind == Activation::Identity {
        return input.clone();
    }
    input.map(|x| kind.apply(x))
}

/// `grad_output * f'(input)`; `output` must be `activation_forward(input)`.
/// A zero upstream gradient stays zero even where `f'` overflowed, as it
/// does for the exponential on masked-out regression voxels.
pub fn activation_backward(input: &Tensor, output: &Tensor, grad_output: &Tensor, kind: Activation) -> Result<Tensor> {
    super::check_same_shape("activation_backward", input, grad_output)?;
    super::check_same_shape("activation_backward", output, grad_output)?;
    if kind == Activation::Identity {
        return Ok(grad_output.clone());
    }
    let x = input.values();
    let y = output.values();
    let g = grad_output.values();
    let out = x
        .iter()
        .zip(y.iter())
        .zip(g.iter())
        .map(|((&x, &y), &g)| if g == 0.0 { 0.0 } else { g * kind.derivative(x, y) })
        .collect();
    Tensor::from_vec(input.shape().to_vec(), out)
}
