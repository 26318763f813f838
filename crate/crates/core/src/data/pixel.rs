//! Mapping between 8-bit pixels and the flow's continuous range `[-0.5, 0.5]`.
//!
//! Pixel `p` occupies the bin `[p/256 - 0.5, (p+1)/256 - 0.5)`. Deterministic
//! use (privatization, scoring, file I/O) takes the bin midpoint; training
//! draws a uniform point inside the bin.

use rand::Rng;

use crate::tensor::{ImageTensor, Shape};

pub const LEVELS: f64 = 256.0;
pub const MIN_VALUE: f64 = -0.5;
pub const MAX_VALUE: f64 = 0.5;

#[inline]
pub fn from_u8(p: u8) -> f64 {
    (p as f64 + 0.5) / LEVELS - 0.5
}

/// Clamps to the pixel range and picks the containing bin.
#[inline]
pub fn to_u8(v: f64) -> u8 {
    let scaled = ((v + 0.5) * LEVELS).floor();
    if scaled.is_nan() {
        0
    } else {
        scaled.clamp(0.0, 255.0) as u8
    }
}

pub fn image_from_u8(shape: Shape, pixels: &[u8]) -> ImageTensor {
    ImageTensor::new(shape, pixels.iter().map(|&p| from_u8(p)).collect())
}

pub fn image_to_u8(x: &ImageTensor) -> Vec<u8> {
    x.data().iter().map(|&v| to_u8(v)).collect()
}

/// Snap every value to its bin midpoint.
pub fn quantize(x: &ImageTensor) -> ImageTensor {
    ImageTensor::new(x.shape(), x.data().iter().map(|&v| from_u8(to_u8(v))).collect())
}

/// Uniform dequantization of a mid-bin image.
pub fn dequantize<R: Rng + ?Sized>(x: &ImageTensor, rng: &mut R) -> ImageTensor {
    ImageTensor::new(
        x.shape(),
        x.data()
            .iter()
            .map(|&v| v + (rng.gen::<f64>() - 0.5) / LEVELS)
            .collect(),
    )
}

#[inline]
pub fn clamp_to_range(v: f64) -> f64 {
    v.clamp(MIN_VALUE, MAX_VALUE)
}
