//! Dense row-major tensors over `f32` or `f64`.
//!
//! Training paths run in `f32`; exactness checks (gradient checks, nesting,
//! soft-prune equivalence) run the same code in `f64`.

use std::fmt::{self, Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::LinalgScalar;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage tag written into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

/// Real scalar usable as tensor element.
pub trait Scalar:
    Float + LinalgScalar + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!("tensor {:?}", shape), numel, data.len()));
        }
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {:?}",
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("gradient buffer", self.data.len(), grad.len()));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", self.data.len(), numel));
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Bitwise equality of shape and values (`-0.0 != 0.0`, NaN payloads compared raw).
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// (outer, extent, inner) sizes around `axis`.
    fn axis_split(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        (outer, self.shape[axis], inner)
    }

    /// Gathers channels along `axis`, where channel `c` covers positions
    /// `c*block .. (c+1)*block` of that axis.
    pub fn gather_axis(&self, axis: usize, channels: &[usize], block: usize) -> Result<Self> {
        self.check_axis(axis, channels, block)?;
        let (outer, extent, inner) = self.axis_split(axis);
        let run = block * inner;
        let mut data = Vec::with_capacity(outer * channels.len() * run);
        for o in 0..outer {
            let base = o * extent * inner;
            for &c in channels {
                let start = base + c * run;
                data.extend_from_slice(&self.data[start..start + run]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = channels.len() * block;
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// Inverse of [`gather_axis`](Self::gather_axis): writes `src` into the given channels.
    pub fn scatter_axis(&mut self, axis: usize, channels: &[usize], block: usize, src: &Tensor<T>) -> Result<()> {
        self.check_axis(axis, channels, block)?;
        let mut expected = self.shape.clone();
        expected[axis] = channels.len() * block;
        if src.shape != expected {
            return Err(Error::InvalidArgument(format!(
                "scatter source shape {:?} does not match {:?}",
                src.shape, expected
            )));
        }
        let (outer, extent, inner) = self.axis_split(axis);
        let run = block * inner;
        let mut cursor = 0;
        for o in 0..outer {
            let base = o * extent * inner;
            for &c in channels {
                let start = base + c * run;
                self.data[start..start + run].copy_from_slice(&src.data[cursor..cursor + run]);
                cursor += run;
            }
        }
        Ok(())
    }

    /// Returns a tensor with `axis` widened to `extent` channels-of-`block`,
    /// placing this tensor's channels at `positions` and zeros elsewhere.
    pub fn expand_axis(&self, axis: usize, extent: usize, positions: &[usize], block: usize) -> Result<Self> {
        let mut shape = self.shape.clone();
        shape[axis] = extent * block;
        let mut out = Tensor::zeros(&shape);
        out.scatter_axis(axis, positions, block, self)?;
        Ok(out)
    }

    /// Per-channel views along `axis`; returns for each channel the values in its slice.
    pub fn channel_slices(&self, axis: usize, block: usize) -> Result<Vec<Vec<T>>> {
        let (outer, extent, inner) = self.axis_split(axis);
        if block == 0 || extent % block != 0 {
            return Err(Error::InvalidArgument(format!(
                "axis {} extent {} not divisible by block {}",
                axis, extent, block
            )));
        }
        let channels = extent / block;
        let run = block * inner;
        let mut out = vec![Vec::with_capacity(outer * run); channels];
        for o in 0..outer {
            let base = o * extent * inner;
            for (c, slot) in out.iter_mut().enumerate() {
                let start = base + c * run;
                slot.extend_from_slice(&self.data[start..start + run]);
            }
        }
        Ok(out)
    }

    fn check_axis(&self, axis: usize, channels: &[usize], block: usize) -> Result<()> {
        if axis >= self.shape.len() {
            return Err(Error::InvalidArgument(format!(
                "axis {} out of range for rank {}",
                axis,
                self.shape.len()
            )));
        }
        if block == 0 || !self.shape[axis].is_multiple_of(block) {
            return Err(Error::InvalidArgument(format!(
                "axis extent {} not divisible by block {}",
                self.shape[axis], block
            )));
        }
        let width = self.shape[axis] / block;
        if let Some(&bad) = channels.iter().find(|&&c| c >= width) {
            return Err(Error::IllegalDrop(format!(
                "channel {} out of range for width {}",
                bad, width
            )));
        }
        Ok(())
    }
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("head", &preview)
            .finish()
    }
}
