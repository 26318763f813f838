//! Identifying features injected before privatization (block markers and
//! mirror-flipped anatomy) and the metrics that measure how much of them
//! survives.

use std::fmt;
use std::str::FromStr;

use super::{pixel, DataError};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(row: usize, col: usize, height: usize, width: usize) -> Self {
        Rect {
            row,
            col,
            height,
            width,
        }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    /// Cells of the rectangle that fall inside an `h`×`w` grid.
    pub fn cells(&self, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let r1 = (self.row + self.height).min(h);
        let c1 = (self.col + self.width).min(w);
        (self.row.min(r1)..r1).flat_map(move |r| (self.col.min(c1)..c1).map(move |c| (r, c)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Perturbation {
    #[default]
    None,
    Flip,
    /// Constant block; `value` is an 8-bit pixel level.
    Marker {
        rect: Rect,
        value: u8,
    },
}

impl Perturbation {
    /// The default marker for an `h`×`w` image: a white square near the
    /// top-left corner, in the background.
    pub fn default_marker(h: usize, w: usize) -> Self {
        let side = (h.min(w) / 5).max(1);
        Perturbation::Marker {
            rect: Rect::new(1, 1, side, side),
            value: 255,
        }
    }

    pub fn apply(&self, x: &ImageTensor) -> ImageTensor {
        match *self {
            Perturbation::None => x.clone(),
            Perturbation::Flip => apply_flip(x),
            Perturbation::Marker { rect, value } => apply_block_marker(x, rect, pixel::from_u8(value)),
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::None => f.write_str("none"),
            Perturbation::Flip => f.write_str("flip"),
            Perturbation::Marker { rect, value } => {
                write!(
                    f,
                    "marker:{},{},{},{},{}",
                    rect.row, rect.col, rect.height, rect.width, value
                )
            }
        }
    }
}

impl FromStr for Perturbation {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || {
            DataError::Format(format!(
                "unknown perturbation tag {s:?} (expected none, flip or marker:r,c,h,w,v)"
            ))
        };
        match s {
            "none" => Ok(Perturbation::None),
            "flip" => Ok(Perturbation::Flip),
            _ => {
                let body = s.strip_prefix("marker:").ok_or_else(bad)?;
                let parts: Vec<&str> = body.split(',').collect();
                if parts.len() != 5 {
                    return Err(bad());
                }
                let n: Vec<usize> = parts[..4]
                    .iter()
                    .map(|p| p.parse().map_err(|_| bad()))
                    .collect::<Result<_, _>>()?;
                let value: u8 = parts[4].parse().map_err(|_| bad())?;
                Ok(Perturbation::Marker {
                    rect: Rect::new(n[0], n[1], n[2], n[3]),
                    value,
                })
            }
        }
    }
}

/// Sets every channel inside `rect` to `value` (model scale).
pub fn apply_block_marker(x: &ImageTensor, rect: Rect, value: f64) -> ImageTensor {
    let s = x.shape();
    let mut y = x.clone();
    for (r, c) in rect.cells(s.height, s.width) {
        for ch in 0..s.channels {
            y.set(r, c, ch, value);
        }
    }
    y
}

/// Mirror about the vertical axis.
pub fn apply_flip(x: &ImageTensor) -> ImageTensor {
    let s = x.shape();
    let mut y = x.clone();
    for r in 0..s.height {
        for c in 0..s.width {
            for ch in 0..s.channels {
                y.set(r, c, ch, x.get(r, s.width - 1 - c, ch));
            }
        }
    }
    y
}

/// Mean absolute difference between `a` and `b` inside `rect`.
pub fn region_mean_abs_diff(a: &ImageTensor, b: &ImageTensor, rect: Rect) -> f64 {
    let s = a.shape();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (r, c) in rect.cells(s.height, s.width) {
        for ch in 0..s.channels {
            sum += (a.get(r, c, ch) - b.get(r, c, ch)).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// ‖x − flip(x)‖₁.
pub fn asymmetry(x: &ImageTensor) -> f64 {
    x.data()
        .iter()
        .zip(apply_flip(x).data())
        .map(|(a, b)| (a - b).abs())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObfuscationMetrics {
    /// Mean |privatized − original| inside the marker, when there is one.
    pub marker_residual: Option<f64>,
    /// Mean |perturbed − original| inside the marker.
    pub marker_energy: Option<f64>,
    pub asymmetry: f64,
    pub original_asymmetry: f64,
}

pub fn obfuscation_metrics(
    original: &ImageTensor,
    perturbation: &Perturbation,
    privatized: &ImageTensor,
) -> ObfuscationMetrics {
    let perturbed = perturbation.apply(original);
    let (marker_residual, marker_energy) = match perturbation {
        Perturbation::Marker { rect, .. } => (
            Some(region_mean_abs_diff(privatized, original, *rect)),
            Some(region_mean_abs_diff(&perturbed, original, *rect)),
        ),
        _ => (None, None),
    };
    ObfuscationMetrics {
        marker_residual,
        marker_energy,
        asymmetry: asymmetry(privatized),
        original_asymmetry: asymmetry(original),
    }
}
