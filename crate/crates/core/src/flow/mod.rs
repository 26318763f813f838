//! Multi-scale invertible flow: image -> latent (`forward`), latent -> image
//! (`inverse`), with exact log-determinant accounting.
//!
//! Each level is `squeeze`, then `depth` steps of
//! `actnorm -> permutation -> coupling`, then (except on the last level) a
//! `split` that routes the second half of the channels straight into the
//! latent. The latent is laid out as the split outputs in level order
//! followed by the final level's output, each flattened in `HWC` order.

pub mod checkpoint;
pub mod layers;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{ImageTensor, LatentVector, Shape};
pub use layers::{ActNorm, Coupling, CouplingKind, CouplingNet, InvConv};

/// `0.5 * ln(2 pi)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("configuration error: input shape {found} does not match model shape {expected}")]
    ShapeMismatch { expected: Shape, found: Shape },
    #[error("configuration error: latent has dimension {found}, model expects {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("numeric overflow: non-finite values after layer {layer}")]
    NonFinite { layer: usize },
    #[error("numeric error: 1x1 convolution at layer {layer} is singular")]
    Singular { layer: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PermutationKind {
    /// Fixed channel reversal.
    Reverse,
    /// Learned LU-parameterized 1x1 convolution.
    InvConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowConfig {
    pub input_shape: Shape,
    pub levels: usize,
    pub depth: usize,
    pub coupling: CouplingKind,
    pub permutation: PermutationKind,
    /// Width of the conditioner's hidden layer.
    pub hidden: usize,
}

impl FlowConfig {
    /// Affine coupling with 1x1 convolutions.
    pub fn glow(input_shape: Shape, levels: usize, depth: usize) -> Self {
        Self {
            input_shape,
            levels,
            depth,
            coupling: CouplingKind::Affine,
            permutation: PermutationKind::InvConv,
            hidden: 32,
        }
    }

    /// Additive coupling with channel reversal.
    pub fn nice(input_shape: Shape, levels: usize, depth: usize) -> Self {
        Self {
            coupling: CouplingKind::Additive,
            permutation: PermutationKind::Reverse,
            ..Self::glow(input_shape, levels, depth)
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    /// Default desk-scale model: 16x16x1, two levels of depth four.
    pub fn desk() -> Self {
        Self::glow(Shape::new(16, 16, 1), 2, 4)
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let s = self.input_shape;
        if self.levels == 0 || self.depth == 0 || self.hidden == 0 {
            return Err(FlowError::Config(
                "levels, depth and hidden width must all be at least 1".into(),
            ));
        }
        if s.channels == 0 || s.height == 0 || s.width == 0 {
            return Err(FlowError::Config(format!("degenerate input shape {s}")));
        }
        let factor = 1usize << self.levels;
        if s.height % factor != 0 || s.width % factor != 0 {
            return Err(FlowError::Config(format!(
                "input {s} is not divisible by 2^{} in height and width",
                self.levels
            )));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.input_shape.volume()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Squeeze,
    Split,
    ActNorm(ActNorm),
    InvConv(InvConv),
    Reverse,
    Coupling(Coupling),
}

impl LayerOp {
    pub fn name(&self) -> &'static str {
        match self {
            LayerOp::Squeeze => "squeeze",
            LayerOp::Split => "split",
            LayerOp::ActNorm(_) => "actnorm",
            LayerOp::InvConv(_) => "invconv1x1",
            LayerOp::Reverse => "reverse",
            LayerOp::Coupling(c) => match c.kind {
                CouplingKind::Additive => "additive-coupling",
                CouplingKind::Affine => "affine-coupling",
            },
        }
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            LayerOp::ActNorm(a) => vec![("log_scale", &a.log_scale), ("shift", &a.shift)],
            LayerOp::InvConv(c) => vec![("lower", &c.lower), ("upper", &c.upper), ("log_s", &c.log_s)],
            LayerOp::Coupling(c) => vec![
                ("w1", &c.net.w1),
                ("b1", &c.net.b1),
                ("w2", &c.net.w2),
                ("b2", &c.net.b2),
            ],
            LayerOp::Squeeze | LayerOp::Split | LayerOp::Reverse => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            LayerOp::ActNorm(a) => vec![&mut a.log_scale, &mut a.shift],
            LayerOp::InvConv(c) => vec![&mut c.lower, &mut c.upper, &mut c.log_s],
            LayerOp::Coupling(c) => vec![&mut c.net.w1, &mut c.net.b1, &mut c.net.w2, &mut c.net.b2],
            LayerOp::Squeeze | LayerOp::Split | LayerOp::Reverse => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowLayer {
    pub level: usize,
    pub op: LayerOp,
}

/// Reference to one trainable tensor.
#[derive(Debug, Clone, Copy)]
pub struct ParamRef<'a> {
    pub layer: usize,
    pub name: &'static str,
    pub values: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    config: FlowConfig,
    layers: Vec<FlowLayer>,
    /// Dataset tag, e.g. `"M0"` or `"M1"`.
    pub trained_on: String,
    pub epochs_trained: u32,
}

/// Per-layer inputs recorded by a forward pass, for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub inputs: Vec<ImageTensor>,
    pub latent: LatentVector,
    pub logdet: f64,
}

impl FlowModel {
    /// Every layer initialized to the identity map.
    pub fn identity(config: FlowConfig) -> Result<Self, FlowError> {
        Self::build(config, |_, op| op)
    }

    /// Training initialization: random rotations for 1x1 convolutions, random
    /// first conditioner convolution, zero last conditioner convolution (so
    /// every coupling starts as the identity), and actnorm layers awaiting
    /// data-dependent initialization.
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self, FlowError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, |_, op| match op {
            LayerOp::ActNorm(mut a) => {
                a.initialized = false;
                LayerOp::ActNorm(a)
            }
            LayerOp::InvConv(c) => LayerOp::InvConv(InvConv::random_rotation(c.channels(), &mut rng)),
            LayerOp::Coupling(mut c) => {
                let std = (1.0 / (9.0 * c.net.in_channels as f64)).sqrt();
                for w in c.net.w1.iter_mut() {
                    *w = std * layers::standard_normal(&mut rng);
                }
                LayerOp::Coupling(c)
            }
            other => other,
        })
    }

    /// Every parameter randomized, including the conditioner output weights.
    /// Used to exercise non-trivial maps in tests and diagnostics.
    pub fn random(config: FlowConfig, seed: u64) -> Result<Self, FlowError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, |_, op| match op {
            LayerOp::ActNorm(mut a) => {
                for v in a.log_scale.iter_mut().chain(a.shift.iter_mut()) {
                    *v = rng.gen_range(-0.3..0.3);
                }
                LayerOp::ActNorm(a)
            }
            LayerOp::InvConv(c) => {
                let mut conv = InvConv::random_rotation(c.channels(), &mut rng);
                for v in conv.log_s.iter_mut() {
                    *v += rng.gen_range(-0.2..0.2);
                }
                LayerOp::InvConv(conv)
            }
            LayerOp::Coupling(mut c) => {
                let s1 = (1.0 / (9.0 * c.net.in_channels as f64)).sqrt();
                let s2 = 0.3 / (c.net.hidden as f64).sqrt();
                for w in c.net.w1.iter_mut() {
                    *w = s1 * layers::standard_normal(&mut rng);
                }
                for w in c.net.b1.iter_mut() {
                    *w = 0.1 * layers::standard_normal(&mut rng);
                }
                for w in c.net.w2.iter_mut() {
                    *w = s2 * layers::standard_normal(&mut rng);
                }
                for w in c.net.b2.iter_mut() {
                    *w = 0.05 * layers::standard_normal(&mut rng);
                }
                LayerOp::Coupling(c)
            }
            other => other,
        })
    }

    fn build(config: FlowConfig, mut init: impl FnMut(usize, LayerOp) -> LayerOp) -> Result<Self, FlowError> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut shape = config.input_shape;
        for level in 0..config.levels {
            layers.push(FlowLayer {
                level,
                op: LayerOp::Squeeze,
            });
            shape = Shape::new(shape.height / 2, shape.width / 2, shape.channels * 4);
            let c = shape.channels;
            for _ in 0..config.depth {
                let ops = [
                    LayerOp::ActNorm(ActNorm::identity(c)),
                    match config.permutation {
                        PermutationKind::InvConv => LayerOp::InvConv(InvConv::identity(c)),
                        PermutationKind::Reverse => LayerOp::Reverse,
                    },
                    LayerOp::Coupling(Coupling::identity(config.coupling, c, config.hidden)),
                ];
                for op in ops {
                    let idx = layers.len();
                    layers.push(FlowLayer {
                        level,
                        op: init(idx, op),
                    });
                }
            }
            if level + 1 < config.levels {
                layers.push(FlowLayer {
                    level,
                    op: LayerOp::Split,
                });
                shape = Shape::new(shape.height, shape.width, shape.channels / 2);
            }
        }
        Ok(Self {
            config,
            layers,
            trained_on: String::new(),
            epochs_trained: 0,
        })
    }

    pub(crate) fn from_parts(
        config: FlowConfig,
        layers: Vec<FlowLayer>,
        trained_on: String,
        epochs_trained: u32,
    ) -> Result<Self, FlowError> {
        let reference = Self::identity(config)?;
        if reference.layers.len() != layers.len() {
            return Err(FlowError::Config(format!(
                "expected {} layers for this architecture, found {}",
                reference.layers.len(),
                layers.len()
            )));
        }
        for (i, (want, got)) in reference.layers.iter().zip(&layers).enumerate() {
            let same_kind = want.level == got.level && want.op.name() == got.op.name();
            let same_sizes = want
                .op
                .params()
                .iter()
                .zip(got.op.params())
                .all(|(a, b)| a.1.len() == b.1.len())
                && want.op.params().len() == got.op.params().len();
            let extra_ok = match (&want.op, &got.op) {
                (LayerOp::InvConv(a), LayerOp::InvConv(b)) => {
                    a.perm.len() == b.perm.len() && a.sign.len() == b.sign.len() && is_permutation(&b.perm)
                }
                (LayerOp::Coupling(a), LayerOp::Coupling(b)) => {
                    (a.net.in_channels, a.net.hidden, a.net.out_channels)
                        == (b.net.in_channels, b.net.hidden, b.net.out_channels)
                }
                _ => true,
            };
            if !(same_kind && same_sizes && extra_ok) {
                return Err(FlowError::Config(format!(
                    "layer {i} ({}) is inconsistent with the declared architecture",
                    got.op.name()
                )));
            }
        }
        Ok(Self {
            config,
            layers,
            trained_on,
            epochs_trained,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn input_shape(&self) -> Shape {
        self.config.input_shape
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    #[cfg(test)]
    pub(crate) fn layers_mut(&mut self) -> &mut [FlowLayer] {
        &mut self.layers
    }

    pub fn params(&self) -> Vec<ParamRef<'_>> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(layer, l)| {
                l.op.params()
                    .into_iter()
                    .map(move |(name, values)| ParamRef { layer, name, values })
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| l.op.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.values.len()).sum()
    }

    pub fn needs_data_init(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(&l.op, LayerOp::ActNorm(a) if !a.initialized))
    }

    /// Data-dependent initialization of every uninitialized actnorm layer,
    /// in order, using this batch's activations at that layer.
    pub fn data_init(&mut self, batch: &[ImageTensor]) -> Result<(), FlowError> {
        if batch.is_empty() {
            return Err(FlowError::Config("data-dependent init needs a non-empty batch".into()));
        }
        for x in batch {
            self.check_shape(x)?;
        }
        let mut acts: Vec<ImageTensor> = batch.to_vec();
        for idx in 0..self.layers.len() {
            if let LayerOp::ActNorm(a) = &mut self.layers[idx].op {
                if !a.initialized {
                    a.initialize_from(&acts);
                }
            }
            let layer = &self.layers[idx];
            for act in acts.iter_mut() {
                let (next, _, _) = step_forward(idx, layer, act)?;
                *act = next;
            }
        }
        Ok(())
    }

    fn check_shape(&self, x: &ImageTensor) -> Result<(), FlowError> {
        if x.shape() != self.config.input_shape {
            return Err(FlowError::ShapeMismatch {
                expected: self.config.input_shape,
                found: x.shape(),
            });
        }
        if !x.is_finite() {
            return Err(FlowError::Config("input image contains non-finite values".into()));
        }
        Ok(())
    }

    /// Image -> latent, with `log|det dz/dx|`.
    pub fn forward(&self, x: &ImageTensor) -> Result<(LatentVector, f64), FlowError> {
        let t = self.run_forward(x, false)?;
        Ok((t.latent, t.logdet))
    }

    /// Forward pass that also keeps every layer's input.
    pub fn forward_trace(&self, x: &ImageTensor) -> Result<ForwardTrace, FlowError> {
        self.run_forward(x, true)
    }

    fn run_forward(&self, x: &ImageTensor, keep: bool) -> Result<ForwardTrace, FlowError> {
        self.check_shape(x)?;
        let mut cur = x.clone();
        let mut latent = Vec::with_capacity(self.latent_dim());
        let mut logdet = 0.0;
        let mut inputs = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            let (next, ld, exited) = step_forward(idx, layer, &cur)?;
            if let Some(e) = exited {
                latent.extend_from_slice(e.data());
            }
            if keep {
                inputs.push(std::mem::replace(&mut cur, next));
            } else {
                cur = next;
            }
            logdet += ld;
        }
        latent.extend_from_slice(cur.data());
        if !logdet.is_finite() {
            return Err(FlowError::NonFinite {
                layer: self.layers.len().saturating_sub(1),
            });
        }
        Ok(ForwardTrace {
            inputs,
            latent: LatentVector::new(latent),
            logdet,
        })
    }

    /// Latent -> image, with `log|det dx/dz|`.
    pub fn inverse(&self, z: &LatentVector) -> Result<(ImageTensor, f64), FlowError> {
        let d = self.latent_dim();
        if z.dim() != d {
            return Err(FlowError::DimMismatch {
                expected: d,
                found: z.dim(),
            });
        }
        let shapes = self.layer_input_shapes();
        let final_shape = self.output_shape();
        let data = z.data();
        let mut end = d;
        let mut cur = ImageTensor::new(final_shape, data[end - final_shape.volume()..end].to_vec());
        end -= final_shape.volume();
        let mut logdet = 0.0;
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let in_shape = shapes[idx];
            let (prev, ld) = match &layer.op {
                LayerOp::Squeeze => (layers::unsqueeze_unchecked(&cur), 0.0),
                LayerOp::Split => {
                    let (_, cb) = split_channels(in_shape.channels);
                    let exit_shape = Shape::new(in_shape.height, in_shape.width, cb);
                    let start = end - exit_shape.volume();
                    let exited = ImageTensor::new(exit_shape, data[start..end].to_vec());
                    end = start;
                    (layers::concat_channels(&cur, &exited), 0.0)
                }
                LayerOp::ActNorm(a) => a.inverse(&cur),
                LayerOp::InvConv(c) => c.inverse(&cur).ok_or(FlowError::Singular { layer: idx })?,
                LayerOp::Reverse => (layers::reverse_channels(&cur), 0.0),
                LayerOp::Coupling(c) => c.inverse(&cur),
            };
            if !prev.is_finite() || !ld.is_finite() {
                return Err(FlowError::NonFinite { layer: idx });
            }
            cur = prev;
            logdet += ld;
        }
        debug_assert_eq!(end, 0);
        Ok((cur, logdet))
    }

    /// `log p(x) = sum_k log N(z_k; 0, 1) + log|det dz/dx|`.
    pub fn log_prob(&self, x: &ImageTensor) -> Result<f64, FlowError> {
        let (z, logdet) = self.forward(x)?;
        Ok(standard_normal_log_density(z.data()) + logdet)
    }

    /// Input shape of every layer, in order.
    pub fn layer_input_shapes(&self) -> Vec<Shape> {
        let mut shape = self.config.input_shape;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            out.push(shape);
            shape = match layer.op {
                LayerOp::Squeeze => Shape::new(shape.height / 2, shape.width / 2, shape.channels * 4),
                LayerOp::Split => Shape::new(shape.height, shape.width, split_channels(shape.channels).0),
                _ => shape,
            };
        }
        out
    }

    /// Shape of the last level's output (the tail of the latent).
    pub fn output_shape(&self) -> Shape {
        let mut s = self.config.input_shape;
        for l in &self.layers {
            s = match l.op {
                LayerOp::Squeeze => Shape::new(s.height / 2, s.width / 2, s.channels * 4),
                LayerOp::Split => Shape::new(s.height, s.width, split_channels(s.channels).0),
                _ => s,
            };
        }
        s
    }
}

fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&i| i < p.len() && !std::mem::replace(&mut seen[i], true))
}

/// Kept and exited channel counts at a split.
fn split_channels(c: usize) -> (usize, usize) {
    (c / 2, c - c / 2)
}

/// One layer forward: output, log-det, and the exited half for splits.
fn step_forward(
    idx: usize,
    layer: &FlowLayer,
    x: &ImageTensor,
) -> Result<(ImageTensor, f64, Option<ImageTensor>), FlowError> {
    let (y, ld, exited) = match &layer.op {
        LayerOp::Squeeze => (layers::squeeze_unchecked(x), 0.0, None),
        LayerOp::Split => {
            let (ck, cb) = split_channels(x.shape().channels);
            (
                layers::take_channels(x, 0, ck),
                0.0,
                Some(layers::take_channels(x, ck, cb)),
            )
        }
        LayerOp::ActNorm(a) => {
            let (y, ld) = a.forward(x);
            (y, ld, None)
        }
        LayerOp::InvConv(c) => {
            if !c.is_invertible() {
                return Err(FlowError::Singular { layer: idx });
            }
            let (y, ld) = c.forward(x);
            (y, ld, None)
        }
        LayerOp::Reverse => (layers::reverse_channels(x), 0.0, None),
        LayerOp::Coupling(c) => {
            let (y, ld) = c.forward(x);
            (y, ld, None)
        }
    };
    if !y.is_finite() || !ld.is_finite() {
        return Err(FlowError::NonFinite { layer: idx });
    }
    Ok((y, ld, exited))
}

/// `sum_k log N(v_k; 0, 1)`.
pub fn standard_normal_log_density(v: &[f64]) -> f64 {
    -0.5 * v.iter().map(|x| x * x).sum::<f64>() - HALF_LN_2PI * v.len() as f64
}

/// `(H, W, C) -> (H/2, W/2, 4C)`; see [`layers`] for the channel order.
pub fn squeeze(x: &ImageTensor) -> Result<ImageTensor, FlowError> {
    let s = x.shape();
    if s.height % 2 != 0 || s.width % 2 != 0 {
        return Err(FlowError::Config(format!(
            "cannot squeeze {s}: height and width must be even"
        )));
    }
    Ok(layers::squeeze_unchecked(x))
}

pub fn unsqueeze(y: &ImageTensor) -> Result<ImageTensor, FlowError> {
    let s = y.shape();
    if s.channels % 4 != 0 {
        return Err(FlowError::Config(format!(
            "cannot unsqueeze {s}: channel count must be a multiple of 4"
        )));
    }
    Ok(layers::unsqueeze_unchecked(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(shape: Shape, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(shape, (0..shape.volume()).map(|_| rng.gen_range(-0.5..0.5)).collect())
    }

    #[test]
    fn identity_model_maps_to_squeezed_input() {
        // One level: the latent is exactly the squeezed image.
        let cfg = FlowConfig::glow(Shape::new(4, 4, 1), 1, 3);
        let m = FlowModel::identity(cfg).unwrap();
        let x = image(cfg.input_shape, 1);
        let (z, ld) = m.forward(&x).unwrap();
        assert_eq!(z.data(), squeeze(&x).unwrap().data());
        assert_eq!(ld, 0.0);
        let (back, ild) = m.inverse(&z).unwrap();
        assert_eq!(back, x);
        assert_eq!(ild, 0.0);
    }

    #[test]
    fn single_actnorm_doubles_and_logdet() {
        let cfg = FlowConfig::glow(Shape::new(4, 4, 1), 1, 1);
        let mut m = FlowModel::identity(cfg).unwrap();
        for l in m.layers_mut() {
            if let LayerOp::ActNorm(a) = &mut l.op {
                a.log_scale.iter_mut().for_each(|v| *v = 2f64.ln());
            }
        }
        let x = image(cfg.input_shape, 2);
        let (z, ld) = m.forward(&x).unwrap();
        let sq = squeeze(&x).unwrap();
        for (a, b) in z.data().iter().zip(sq.data()) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
        // 2x2 pixels x 4 channels after squeeze = 16 elements, each scaled by 2.
        assert!((ld - 16.0 * 2f64.ln()).abs() < 1e-12);
        assert!((ld - 11.0904).abs() < 1e-4);
    }

    #[test]
    fn log_prob_of_zero_image_under_identity() {
        let m = FlowModel::identity(FlowConfig::glow(Shape::new(4, 4, 1), 2, 2)).unwrap();
        let mut x = ImageTensor::zeros(Shape::new(4, 4, 1));
        let lp0 = m.log_prob(&x).unwrap();
        assert!((lp0 - 16.0 * -HALF_LN_2PI).abs() < 1e-12);
        assert!((lp0 + 14.7031).abs() < 1e-4);
        x.set(1, 2, 0, 1.0);
        let lp1 = m.log_prob(&x).unwrap();
        assert!((lp1 - (lp0 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn log_prob_is_density_plus_logdet() {
        let m = FlowModel::random(FlowConfig::glow(Shape::new(8, 8, 1), 2, 2).with_hidden(8), 4).unwrap();
        let x = image(Shape::new(8, 8, 1), 5);
        let (z, ld) = m.forward(&x).unwrap();
        assert_eq!(m.log_prob(&x).unwrap(), standard_normal_log_density(z.data()) + ld);
    }

    #[test]
    fn latent_layout_puts_split_first() {
        let cfg = FlowConfig::glow(Shape::new(4, 4, 1), 2, 1);
        let m = FlowModel::identity(cfg).unwrap();
        let x = image(cfg.input_shape, 6);
        let (z, _) = m.forward(&x).unwrap();
        let sq = squeeze(&x).unwrap();
        // Level 0 exits channels 2..4 of the squeezed 2x2x4 tensor.
        let exited = layers::take_channels(&sq, 2, 2);
        assert_eq!(&z.data()[..8], exited.data());
        let kept = squeeze(&layers::take_channels(&sq, 0, 2)).unwrap();
        assert_eq!(&z.data()[8..], kept.data());
    }

    #[test]
    fn shape_and_dim_errors() {
        let m = FlowModel::identity(FlowConfig::glow(Shape::new(4, 4, 1), 1, 1)).unwrap();
        assert!(matches!(
            m.forward(&ImageTensor::zeros(Shape::new(2, 2, 1))),
            Err(FlowError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            m.inverse(&LatentVector::zeros(3)),
            Err(FlowError::DimMismatch { expected: 16, found: 3 })
        ));
        assert!(FlowConfig::glow(Shape::new(6, 6, 1), 2, 1).validate().is_err());
        assert!(squeeze(&ImageTensor::zeros(Shape::new(3, 2, 1))).is_err());
    }

    #[test]
    fn overflow_names_layer() {
        let cfg = FlowConfig::glow(Shape::new(2, 2, 1), 1, 1);
        let mut m = FlowModel::identity(cfg).unwrap();
        if let LayerOp::ActNorm(a) = &mut m.layers_mut()[1].op {
            a.log_scale[0] = 800.0;
        }
        let x = ImageTensor::new(cfg.input_shape, vec![0.5; 4]);
        assert_eq!(m.forward(&x), Err(FlowError::NonFinite { layer: 1 }));
    }

    #[test]
    fn nice_identity_is_channel_permutation() {
        let cfg = FlowConfig::nice(Shape::new(2, 2, 1), 1, 1);
        let m = FlowModel::identity(cfg).unwrap();
        let x = ImageTensor::new(cfg.input_shape, vec![1.0, 2.0, 3.0, 4.0]);
        let (z, ld) = m.forward(&x).unwrap();
        assert_eq!(z.data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(ld, 0.0);
    }
}
