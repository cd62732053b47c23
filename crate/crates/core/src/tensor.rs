//! Dense row-major `f32` tensors.
//!
//! Every tensor that crosses a public boundary is finite: constructors reject
//! NaN and infinities so downstream stages never have to re-check.

use crate::error::{Error, Result};

/// A contiguous, row-major `f32` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, validating `product(shape) == data.len()` and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let len = checked_len(&shape)?;
        if len != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {:?} holds {} elements but {} were supplied",
                shape,
                len,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    /// Narrows `f64` values to `f32` (round-to-nearest-even).
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Fails unless the tensor has exactly `ndim` axes.
    pub fn expect_ndim(&self, ndim: usize, context: &str) -> Result<()> {
        if self.shape.len() != ndim {
            return Err(Error::InvalidTensor(format!(
                "{context}: expected {ndim} axes, found shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Fails unless every value lies in `[lo, hi]`.
    pub fn expect_range(&self, lo: f32, hi: f32, context: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|&v| v < lo || v > hi) {
            return Err(Error::InvalidTensor(format!(
                "{context}: value {} at flat index {pos} outside [{lo}, {hi}]",
                self.data[pos]
            )));
        }
        Ok(())
    }

    /// Fails unless every value is exactly 0.0 or 1.0.
    pub fn expect_binary(&self, context: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidTensor(format!(
                "{context}: non-binary value {} at flat index {pos}",
                self.data[pos]
            )));
        }
        Ok(())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub(crate) fn checked_len(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n.checked_mul(8).is_some())
        .ok_or_else(|| Error::ShapeOverflow(shape.to_vec()))
}

/// Height, width and channel count of an `[H, W, C]` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn of(t: &Tensor, context: &str) -> Result<Self> {
        t.expect_ndim(3, context)?;
        Ok(Self::new(t.shape()[0], t.shape()[1], t.shape()[2]))
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.height, self.width, self.channels]
    }

    #[inline]
    pub fn at(&self, pixel: usize, channel: usize) -> usize {
        pixel * self.channels + channel
    }
}

/// Declares an `[H, W, C]` newtype over [`Tensor`] with a validating constructor.
macro_rules! hwc_newtype {
    ($(#[$meta:meta])* $name:ident, $check:expr) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Tensor);

        impl $name {
            pub fn new(t: Tensor) -> $crate::error::Result<Self> {
                let ctx = stringify!($name);
                t.expect_ndim(3, ctx)?;
                let check: fn(&Tensor, &str) -> $crate::error::Result<()> = $check;
                check(&t, ctx)?;
                Ok(Self(t))
            }

            pub fn tensor(&self) -> &Tensor {
                &self.0
            }

            pub fn into_tensor(self) -> Tensor {
                self.0
            }

            pub fn grid(&self) -> $crate::tensor::Grid {
                let s = self.0.shape();
                $crate::tensor::Grid::new(s[0], s[1], s[2])
            }

            pub fn data(&self) -> &[f32] {
                self.0.data()
            }

            /// Values of one channel, in pixel order.
            pub fn channel(&self, c: usize) -> Vec<f32> {
                let g = self.grid();
                (0..g.pixels()).map(|v| self.0.data()[g.at(v, c)]).collect()
            }
        }
    };
}

pub(crate) use hwc_newtype;

pub(crate) fn check_any(_: &Tensor, _: &str) -> Result<()> {
    Ok(())
}

pub(crate) fn check_unit(t: &Tensor, ctx: &str) -> Result<()> {
    t.expect_range(0.0, 1.0, ctx)
}

pub(crate) fn check_nonneg(t: &Tensor, ctx: &str) -> Result<()> {
    t.expect_range(0.0, f32::INFINITY, ctx)
}

pub(crate) fn check_binary(t: &Tensor, ctx: &str) -> Result<()> {
    t.expect_binary(ctx)
}

/// Stacks per-channel pixel vectors into an `[H, W, C]` tensor.
pub fn stack_channels(height: usize, width: usize, channels: &[Vec<f32>]) -> Result<Tensor> {
    let g = Grid::new(height, width, channels.len());
    let mut data = vec![0.0; g.pixels() * g.channels];
    for (c, values) in channels.iter().enumerate() {
        if values.len() != g.pixels() {
            return Err(Error::shape("stack_channels", &[g.pixels()], &[values.len()]));
        }
        for (v, &x) in values.iter().enumerate() {
            data[g.at(v, c)] = x;
        }
    }
    Tensor::new(g.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn overflowing_shape_is_reported() {
        let err = checked_len(&[usize::MAX, 2]).unwrap_err();
        assert!(matches!(err, Error::ShapeOverflow(_)));
    }

    #[test]
    fn empty_shape_is_scalar() {
        let t = Tensor::new(vec![], vec![3.0]).unwrap();
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn bitwise_eq_distinguishes_signed_zero() {
        let a = Tensor::new(vec![1], vec![0.0]).unwrap();
        let b = Tensor::new(vec![1], vec![-0.0]).unwrap();
        assert_eq!(a, b);
        assert!(!a.bitwise_eq(&b));
    }
}
