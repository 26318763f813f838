//! Images and latent vectors as flat `f64` buffers.
//!
//! Images are stored row-major with channels innermost (`HWC`): element
//! `(row, col, ch)` lives at `(row * width + col) * channels + ch`.

use std::fmt;

/// Height, width and channel count of an image-shaped tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub const fn volume(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub const fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// An image (or intermediate activation) in the flow's continuous pixel range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Panics if `data.len()` disagrees with the shape.
    pub fn new(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            shape.volume(),
            "image buffer length does not match shape {shape}"
        );
        Self { shape, data }
    }

    pub fn try_new(shape: Shape, data: Vec<f64>) -> Option<Self> {
        (data.len() == shape.volume()).then_some(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.volume()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.shape.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.shape.index(row, col, ch);
        self.data[i] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f64 {
        max_abs_diff(&self.data, &other.data)
    }
}

/// A flow latent: the concatenation of every multi-scale split output and
/// the final level's output, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector {
    data: Vec<f64>,
}

impl LatentVector {
    pub fn new(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { data: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for LatentVector {
    fn from(data: Vec<f64>) -> Self {
        Self { data }
    }
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
