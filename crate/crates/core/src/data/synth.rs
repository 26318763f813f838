//! Toy chest-radiograph-like scenes: a dark background with a vertical
//! gradient, two bright elliptical "lungs", faint texture, and for abnormal
//! images a smooth opacity blob inside one lung.

use rand::Rng;
use rand_distr::StandardNormal;

use super::DataError;
use crate::rng;
use crate::tensor::{ImageTensor, Shape};

pub const MIN_SIDE: usize = 8;
/// Normalized radius of the lung core used by [`ToyScene::lung_mask`].
pub const LUNG_CORE: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    /// Center row/col in pixels.
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
}

impl Ellipse {
    /// Squared normalized radius; `<= 1` is inside.
    pub fn radius2(&self, row: f64, col: f64) -> f64 {
        let dy = (row - self.cy) / self.ry;
        let dx = (col - self.cx) / self.rx;
        dy * dy + dx * dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub cy: f64,
    pub cx: f64,
    /// Support radius; the profile is a smooth bump vanishing at `radius`.
    pub radius: f64,
    pub amplitude: f64,
}

/// Every random quantity of one scene. Drawn identically whether or not
/// the image is abnormal, so a normal and an abnormal render from the same
/// seed differ only by the blob.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    pub shape: Shape,
    pub background: f64,
    pub gradient: f64,
    pub lungs: [Ellipse; 2],
    pub lung_level: [f64; 2],
    pub edge: f64,
    pub blob: Blob,
    /// Index into `lungs` holding the blob.
    pub blob_lung: usize,
    pub texture_seed: u64,
    pub texture_std: f64,
}

impl ToyScene {
    pub fn sample(seed: u64, shape: Shape) -> Result<Self, DataError> {
        if shape.height < MIN_SIDE || shape.width < MIN_SIDE {
            return Err(DataError::Usage(format!(
                "toy images need at least {MIN_SIDE}x{MIN_SIDE} pixels, got {}x{}",
                shape.height, shape.width
            )));
        }
        let mut r = rng::seeded(seed);
        let h = shape.height as f64;
        let w = shape.width as f64;
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * r.gen::<f64>();

        let background = u(18.0, 34.0);
        let gradient = u(10.0, 26.0);
        let cy = h * u(0.48, 0.54);
        let spread = w * u(0.21, 0.25);
        let ry = h * u(0.30, 0.35);
        let rx = w * u(0.14, 0.17);
        let level = u(144.5, 145.5);
        let mut lungs = [Ellipse { cy, cx: 0.0, ry, rx }; 2];
        let mut lung_level = [level; 2];
        for (i, side) in [-1.0, 1.0].into_iter().enumerate() {
            lungs[i].cx = w / 2.0 + side * spread + w * u(-0.015, 0.015);
            lungs[i].cy = cy + h * u(-0.015, 0.015);
            lungs[i].ry = ry * u(0.95, 1.05);
            lungs[i].rx = rx * u(0.95, 1.05);
            lung_level[i] = level + u(-0.25, 0.25);
        }
        let edge = u(0.06, 0.10);

        let blob_lung = usize::from(u(0.0, 1.0) >= 0.5);
        let lung = lungs[blob_lung];
        let angle = u(0.0, std::f64::consts::TAU);
        let dist = u(0.0, 0.45);
        let blob = Blob {
            cy: lung.cy + dist * lung.ry * angle.sin(),
            cx: lung.cx + dist * lung.rx * angle.cos(),
            radius: h.min(w) * u(0.17, 0.22),
            amplitude: u(11.0, 20.0),
        };
        let texture_seed = r.gen();
        Ok(ToyScene {
            shape,
            background,
            gradient,
            lungs,
            lung_level,
            edge,
            blob,
            blob_lung,
            texture_seed,
            texture_std: 4.0,
        })
    }

    fn base_value(&self, row: usize, col: usize) -> f64 {
        let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
        let h = self.shape.height as f64;
        let mut v = self.background + self.gradient * (y / h);
        for (lung, &level) in self.lungs.iter().zip(&self.lung_level) {
            // smooth edge: logistic in normalized radius
            let t = (1.0 - lung.radius2(y, x).sqrt()) / self.edge;
            let weight = 1.0 / (1.0 + (-t).exp());
            v += (level - v) * weight;
        }
        v
    }

    fn blob_value(&self, row: usize, col: usize) -> f64 {
        let dy = row as f64 + 0.5 - self.blob.cy;
        let dx = col as f64 + 0.5 - self.blob.cx;
        let t = 1.0 - (dy * dy + dx * dx) / (self.blob.radius * self.blob.radius);
        if t > 0.0 {
            self.blob.amplitude * t * t
        } else {
            0.0
        }
    }

    /// Renders 8-bit pixels in HWC order (C = 1 duplicates across channels).
    pub fn render(&self, abnormal: bool) -> Vec<u8> {
        let s = self.shape;
        let mut tex = rng::seeded(self.texture_seed);
        let mut out = Vec::with_capacity(s.volume());
        for row in 0..s.height {
            for col in 0..s.width {
                let noise: f64 = tex.sample(StandardNormal);
                let mut v = self.base_value(row, col) + self.texture_std * noise;
                if abnormal {
                    v += self.blob_value(row, col);
                }
                let p = v.round().clamp(0.0, 255.0) as u8;
                out.extend(std::iter::repeat(p).take(s.channels));
            }
        }
        out
    }

    /// Pixel mask (row-major, H·W) of both lung interiors, excluding the
    /// soft rim.
    pub fn lung_mask(&self) -> Vec<bool> {
        self.mask(|y, x| self.lungs.iter().any(|l| l.radius2(y, x) <= LUNG_CORE * LUNG_CORE))
    }

    /// Support of the blob.
    pub fn blob_mask(&self) -> Vec<bool> {
        let b = self.blob;
        self.mask(|y, x| (y - b.cy).powi(2) + (x - b.cx).powi(2) < b.radius * b.radius)
    }

    fn mask(&self, inside: impl Fn(f64, f64) -> bool) -> Vec<bool> {
        let s = self.shape;
        (0..s.height)
            .flat_map(|r| (0..s.width).map(move |c| (r, c)))
            .map(|(r, c)| inside(r as f64 + 0.5, c as f64 + 0.5))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyImage {
    pub pixels: Vec<u8>,
    pub abnormal: bool,
    pub scene: ToyScene,
}

impl ToyImage {
    pub fn tensor(&self) -> ImageTensor {
        super::pixel::image_from_u8(self.scene.shape, &self.pixels)
    }
}

pub fn gen_toy_image(seed: u64, abnormal: bool, shape: Shape) -> Result<ToyImage, DataError> {
    let scene = ToyScene::sample(seed, shape)?;
    Ok(ToyImage {
        pixels: scene.render(abnormal),
        abnormal,
        scene,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHAPE: Shape = Shape {
        height: 16,
        width: 16,
        channels: 1,
    };

    #[test]
    fn same_seed_same_pixels() {
        let a = gen_toy_image(11, true, SHAPE).unwrap();
        let b = gen_toy_image(11, true, SHAPE).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.pixels, gen_toy_image(12, true, SHAPE).unwrap().pixels);
    }

    #[test]
    fn normal_render_has_no_blob() {
        for seed in 0..50 {
            let n = gen_toy_image(seed, false, SHAPE).unwrap();
            let a = gen_toy_image(seed, true, SHAPE).unwrap();
            assert_eq!(n.scene, a.scene);
            let mask = n.scene.blob_mask();
            assert!(mask.iter().any(|&m| m));
            for (i, &m) in mask.iter().enumerate() {
                if !m {
                    assert_eq!(n.pixels[i], a.pixels[i], "blob leaks outside its mask");
                }
            }
            let inside: u32 = mask
                .iter()
                .zip(&a.pixels)
                .filter(|(m, _)| **m)
                .map(|(_, &p)| p as u32)
                .sum();
            let plain: u32 = mask
                .iter()
                .zip(&n.pixels)
                .filter(|(m, _)| **m)
                .map(|(_, &p)| p as u32)
                .sum();
            assert!(inside > plain);
        }
    }

    #[test]
    fn blob_center_lies_in_a_lung() {
        for seed in 0..200 {
            let s = ToyScene::sample(seed, SHAPE).unwrap();
            assert!(s.lungs[s.blob_lung].radius2(s.blob.cy, s.blob.cx) <= 1.0);
        }
    }

    #[test]
    fn rejects_tiny_shapes() {
        assert!(matches!(
            gen_toy_image(0, false, Shape::new(4, 16, 1)),
            Err(DataError::Usage(_))
        ));
    }

    #[test]
    fn multi_channel_duplicates() {
        let img = gen_toy_image(3, false, Shape::new(8, 8, 3)).unwrap();
        assert_eq!(img.pixels.len(), 192);
        assert!(img.pixels.chunks(3).all(|c| c[0] == c[1] && c[1] == c[2]));
    }
}
