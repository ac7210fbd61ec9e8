//! Dense row-major tensors and the operator set the BCAE models are built from.
//!
//! Every operator has an explicit backward pass. Half-precision tensors keep
//! their payload as 16-bit floats; operators widen to `f32` to compute, so
//! products and sums are always accumulated in at least 32 bits, and round
//! the result back to 16 bits on the way out.

mod activation;
pub(crate) mod conv;
mod gemm;
mod pool;

use std::borrow::Cow;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use activation::{activation_backward, activation_forward, Activation};
pub use conv::{
    conv_backward, conv_forward, conv_transpose_backward, conv_transpose_forward, ConvGrads,
    ConvParams,
};
pub use pool::{avgpool2d, avgpool2d_backward, upsample_nearest2d, upsample_nearest2d_backward};

/// Element storage precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Full32,
    Half16,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::Full32 => 4,
            Precision::Half16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    F32(Vec<f32>),
    F16(Vec<f16>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Storage,
}

/// Result of a precision cast: the new tensor plus how many finite values
/// had to be saturated because they exceeded the half-precision range.
#[derive(Debug, Clone)]
pub struct CastOutcome {
    pub tensor: Tensor,
    pub overflow: usize,
}

/// Round to the nearest half-precision value (ties to even), saturating
/// out-of-range finite values to the largest finite half.
#[inline]
pub(crate) fn to_f16_saturating(v: f32) -> (f16, bool) {
    let h = f16::from_f32(v);
    if h.is_infinite() && v.is_finite() {
        (if v > 0.0 { f16::MAX } else { f16::MIN }, true)
    } else {
        (h, false)
    }
}

pub(crate) fn round_to_f16(values: &[f32]) -> (Vec<f16>, usize) {
    let mut overflow = 0;
    let out = values
        .iter()
        .map(|&v| {
            let (h, sat) = to_f16_saturating(v);
            overflow += sat as usize;
            h
        })
        .collect();
    (out, overflow)
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("Tensor::from_vec", "payload", expected, data.len()));
        }
        if shape.contains(&0) {
            return Err(Error::config(format!("tensor extents must be positive, got {shape:?}")));
        }
        Ok(Self {
            shape,
            storage: Storage::F32(data),
        })
    }

    pub fn from_f16(shape: Vec<usize>, data: Vec<f16>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("Tensor::from_f16", "payload", expected, data.len()));
        }
        Ok(Self {
            shape,
            storage: Storage::F16(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            storage: Storage::F32(vec![value; n]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        match &self.storage {
            Storage::F32(v) => v.len(),
            Storage::F16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn precision(&self) -> Precision {
        match self.storage {
            Storage::F32(_) => Precision::Full32,
            Storage::F16(_) => Precision::Half16,
        }
    }

    /// Borrow the payload as `f32`, widening half-precision storage.
    pub fn values(&self) -> Cow<'_, [f32]> {
        match &self.storage {
            Storage::F32(v) => Cow::Borrowed(v),
            Storage::F16(v) => Cow::Owned(v.iter().map(|h| h.to_f32()).collect()),
        }
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.values().into_owned()
    }

    /// Raw `f32` payload; `None` for half-precision tensors.
    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.storage {
            Storage::F32(v) => Some(v),
            Storage::F16(_) => None,
        }
    }

    pub fn as_f32_mut(&mut self) -> Option<&mut [f32]> {
        match &mut self.storage {
            Storage::F32(v) => Some(v),
            Storage::F16(_) => None,
        }
    }

    pub fn as_f16(&self) -> Option<&[f16]> {
        match &self.storage {
            Storage::F16(v) => Some(v),
            Storage::F32(_) => None,
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::dim("Tensor::reshape", "element count", self.len(), n));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Re-encode the payload in `target` precision.
    pub fn cast(&self, target: Precision) -> CastOutcome {
        match (&self.storage, target) {
            (Storage::F32(v), Precision::Half16) => {
                let (h, overflow) = round_to_f16(v);
                CastOutcome {
                    tensor: Tensor {
                        shape: self.shape.clone(),
                        storage: Storage::F16(h),
                    },
                    overflow,
                }
            }
            (Storage::F16(v), Precision::Full32) => CastOutcome {
                tensor: Tensor {
                    shape: self.shape.clone(),
                    storage: Storage::F32(v.iter().map(|h| h.to_f32()).collect()),
                },
                overflow: 0,
            },
            _ => CastOutcome {
                tensor: self.clone(),
                overflow: 0,
            },
        }
    }

    /// Build a tensor of `precision` from freshly computed `f32` values.
    pub(crate) fn with_precision(shape: Vec<usize>, data: Vec<f32>, precision: Precision) -> Self {
        let storage = match precision {
            Precision::Full32 => Storage::F32(data),
            Precision::Half16 => Storage::F16(round_to_f16(&data).0),
        };
        Self { shape, storage }
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        match &self.storage {
            Storage::F32(v) => v.iter().map(|&x| x as f64).sum(),
            Storage::F16(v) => v.iter().map(|x| x.to_f64()).sum(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("add", self, other)?;
        let precision = combine(self.precision(), other.precision());
        let a = self.values();
        let b = other.values();
        let out = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        Ok(Tensor::with_precision(self.shape.clone(), out, precision))
    }

    /// `self += other`, full precision only.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        check_same_shape("add_assign", self, other)?;
        let rhs = other.values();
        match &mut self.storage {
            Storage::F32(v) => v.iter_mut().zip(rhs.iter()).for_each(|(a, b)| *a += b),
            Storage::F16(v) => v
                .iter_mut()
                .zip(rhs.iter())
                .for_each(|(a, b)| *a = to_f16_saturating(a.to_f32() + b).0),
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        let out = self.values().iter().map(|&x| f(x)).collect();
        Tensor::with_precision(self.shape.clone(), out, self.precision())
    }
}

pub(crate) fn combine(a: Precision, b: Precision) -> Precision {
    if a == Precision::Half16 || b == Precision::Half16 {
        Precision::Half16
    } else {
        Precision::Full32
    }
}

pub(crate) fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape.len() != b.shape.len() {
        return Err(Error::dim(op, "rank", a.shape.len(), b.shape.len()));
    }
    for (axis, (&x, &y)) in a.shape.iter().zip(&b.shape).enumerate() {
        if x != y {
            return Err(Error::dim(op, format!("axis {axis}"), x, y));
        }
    }
    Ok(())
}
