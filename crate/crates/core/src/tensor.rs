//! Dense rank-4 tensors in batch/channel/height/width layout.

use std::fmt;

use num_traits::Float;
use thiserror::Error;

/// Floating-point element type usable in tensors.
///
/// Implemented for `f64` (gradient checks, exact oracles) and `f32`
/// (training and inference).
pub trait Real: Float + Default + Send + Sync + fmt::Debug + fmt::Display + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// One of the four tensor axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Batch,
    Channel,
    Height,
    Width,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Axis::Batch => "batch",
            Axis::Channel => "channel",
            Axis::Height => "height",
            Axis::Width => "width",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch on {axis} axis (expected {expected}, got {actual})")]
    ShapeMismatch {
        op: &'static str,
        axis: Axis,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: {len} elements cannot fill shape {dims}")]
    DataLength {
        op: &'static str,
        dims: Dims,
        len: usize,
    },
    #[error("{op}: invalid configuration: {reason}")]
    Config { op: &'static str, reason: String },
}

/// Tensor extents in (n, c, h, w) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Checks every axis against `other`, reporting the first that differs.
    pub fn expect_eq(&self, other: &Dims, op: &'static str) -> Result<(), TensorError> {
        let pairs = [
            (Axis::Batch, self.n, other.n),
            (Axis::Channel, self.c, other.c),
            (Axis::Height, self.h, other.h),
            (Axis::Width, self.w, other.w),
        ];
        for (axis, expected, actual) in pairs {
            if expected != actual {
                return Err(TensorError::ShapeMismatch {
                    op,
                    axis,
                    expected,
                    actual,
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major tensor with (n, c, h, w) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T = f64> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: Dims, value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != dims.len() {
            return Err(TensorError::DataLength {
                op: "from_vec",
                dims,
                len: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for y in 0..dims.h {
                    for x in 0..dims.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(n < self.dims.n && c < self.dims.c && y < self.dims.h && x < self.dims.w);
        ((n * self.dims.c + c) * self.dims.h + y) * self.dims.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = value;
    }

    /// The contiguous `h*w` slice for sample `n`, channel `c`.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), TensorError> {
        self.dims.expect_eq(&other.dims, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn dot(&self, other: &Self) -> Result<T, TensorError> {
        self.dims.expect_eq(&other.dims, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T, TensorError> {
        self.dims.expect_eq(&other.dims, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise cast to another precision.
    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Extracts sample `n` as a batch-of-one tensor.
    pub fn sample(&self, n: usize) -> Self {
        let per = self.dims.c * self.dims.plane();
        Self {
            dims: Dims::new(1, self.dims.c, self.dims.h, self.dims.w),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks batch-of-one (or larger) tensors along the batch axis.
    pub fn stack(parts: &[Self]) -> Result<Self, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::Config {
            op: "stack",
            reason: "no tensors to stack".into(),
        })?;
        let template = Dims { n: 0, ..first.dims };
        let mut dims = template;
        let mut data = Vec::new();
        for part in parts {
            template.expect_eq(&Dims { n: 0, ..part.dims }, "stack")?;
            dims.n += part.dims.n;
            data.extend_from_slice(&part.data);
        }
        Ok(Self { dims, data })
    }
}

/// Square convolution geometry with stride 1 and same padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Odd `kernel` with padding `(kernel - 1) / 2`.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self, TensorError> {
        if kernel.is_multiple_of(2) {
            return Err(TensorError::Config {
                op: "conv_spec",
                reason: format!("kernel size {kernel} must be odd"),
            });
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            padding: (kernel - 1) / 2,
        })
    }

    /// 3x3 kernel, padding 1.
    pub fn k3(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 3,
            padding: 1,
        }
    }

    pub fn weight_dims(&self) -> Dims {
        Dims::new(self.out_channels, self.in_channels, self.kernel, self.kernel)
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Weights plus biases.
    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}
