//! Dense row-major tensors.
//!
//! A [`Tensor`] is a shape plus a contiguous buffer. Image tensors use
//! `(batch, channels, height, width)` order throughout the crate. The
//! element type is any [`Real`]; training defaults to `f32` and all
//! gradient checks run in `f64`.

use std::fmt;
use std::io::{BufRead, Write};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Name used in configs and manifests.
    const NAME: &'static str;

    /// Converts an `f64` literal.
    fn lit(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    fn lit(x: f64) -> Self {
        x as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    fn lit(x: f64) -> Self {
        x
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Ordered list of positive extents.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!("zero extent in {dims:?}")));
        }
        let mut total: u64 = 1;
        for &d in &dims {
            total = total
                .checked_mul(d as u64)
                .ok_or_else(|| Error::InvalidShape(format!("element count overflows: {dims:?}")))?;
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Returns `(n, c, h, w)` for rank-4 shapes.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.0[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::InvalidShape(format!(
                "expected (batch, channels, height, width), got {self:?}"
            ))),
        }
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        f.write_str(&parts.join("x"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape(vec![1]),
            data: vec![value],
        }
    }

    pub(crate) fn from_shape(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data[..] {
            [v] => Ok(v),
            _ => Err(Error::InvalidArgument(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::InvalidShape(format!(
                "cannot add {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::InvalidShape(format!(
                "cannot compare {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    /// Converts to another precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// Copies channels `start..end` of an NCHW tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        let (n, c, h, w) = self.shape.nchw()?;
        if start >= end || end > c {
            return Err(Error::InvalidArgument(format!(
                "channel range {start}..{end} outside 0..{c}"
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (end - start) * plane);
        for b in 0..n {
            let base = b * c * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Self::from_vec([n, end - start, h, w], data)
    }

    /// Writes a debug dump: a shape header line, then one value per line.
    pub fn dump<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "shape {}", self.shape)?;
        for v in &self.data {
            writeln!(out, "{:e}", v.to_f64_lossy())?;
        }
        Ok(())
    }

    pub fn read_dump<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let parse_err = |line: usize, message: String| Error::Parse {
            line: line + 1,
            column: 1,
            message,
        };
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(0, "missing shape header".into()))?;
        let header = header?;
        let dims_text = header
            .strip_prefix("shape ")
            .ok_or_else(|| parse_err(0, format!("expected `shape ...`, got {header:?}")))?;
        let dims = dims_text
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(0, e.to_string()))?;
        let mut data = Vec::new();
        for (i, line) in lines {
            let line = line?;
            let v: f64 = line.trim().parse().map_err(|e| parse_err(i, format!("{e}")))?;
            data.push(T::lit(v));
        }
        Self::from_vec(dims, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_zero_extent() {
        assert!(Shape::new(vec![2, 0, 3]).is_err());
        assert_eq!(Shape::new(vec![2, 3, 4]).unwrap().numel(), 24);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec([2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let t = Tensor::<f64>::from_vec([2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-7, 9.0]).unwrap();
        let mut buf = Vec::new();
        t.dump(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("shape 2x3\n"));
        let back = Tensor::<f64>::read_dump(&buf[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn slice_channels_picks_planes() {
        let t = Tensor::<f64>::from_vec([1, 3, 1, 2], (0..6).map(f64::from).collect()).unwrap();
        let s = t.slice_channels(1, 3).unwrap();
        assert_eq!(s.data(), &[2.0, 3.0, 4.0, 5.0]);
    }
}
