//! Maximum-likelihood training with hand-derived reverse-mode gradients.
//!
//! The per-image loss is `-log p(x) = 0.5 |z|^2 + D/2 ln(2 pi) - logdet`,
//! in nats per image on the flow's continuous pixel scale. Batch losses and
//! gradients are means over images. Per-image gradients are computed in
//! parallel and then summed in image order, so results do not depend on the
//! worker count.

use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::pixel;
use crate::flow::{layers, FlowError, FlowModel, LayerOp, HALF_LN_2PI};
use crate::rng;
use crate::tensor::ImageTensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("numeric error: non-finite gradient at layer {layer}")]
    NonFiniteGradient { layer: usize },
    #[error("training diverged in epoch {epoch}: NLL became non-finite")]
    Diverged {
        epoch: u32,
        /// Model as of the last completed epoch with a finite NLL.
        last_good: Box<FlowModel>,
        log: TrainLog,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub minibatch: usize,
    pub epochs: u32,
    pub samples_per_epoch: usize,
    pub learning_rate: f64,
    pub warmup_epochs: u32,
    pub seed: u64,
    /// Global-norm gradient clipping; off when `None`.
    pub clip_grad_norm: Option<f64>,
    /// Images used for actnorm data-dependent initialization.
    pub init_batch: usize,
    /// Size of the fixed evaluation subset behind the per-epoch NLL.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            minibatch: 16,
            epochs: 30,
            samples_per_epoch: 2000,
            learning_rate: 1e-3,
            warmup_epochs: 1,
            seed: 0,
            clip_grad_norm: None,
            init_batch: 256,
            eval_samples: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.minibatch == 0 {
            return Err(TrainError::Usage("minibatch must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Usage(
                "learning rate must be finite and non-negative".into(),
            ));
        }
        if self.init_batch == 0 || self.eval_samples == 0 {
            return Err(TrainError::Usage(
                "init_batch and eval_samples must be at least 1".into(),
            ));
        }
        if matches!(self.clip_grad_norm, Some(c) if !(c > 0.0)) {
            return Err(TrainError::Usage("gradient clip norm must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples_per_epoch.div_ceil(self.minibatch).max(1)
    }
}

/// One gradient tensor per model parameter tensor, in [`FlowModel::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub tensors: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(model: &FlowModel) -> Self {
        Self {
            tensors: model.params().iter().map(|p| vec![0.0; p.values.len()]).collect(),
        }
    }

    fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, k: f64) {
        self.tensors.iter_mut().flatten().for_each(|v| *v *= k);
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

/// Loss and parameter gradient for a single image.
pub fn image_loss_and_grad(model: &FlowModel, x: &ImageTensor) -> Result<(f64, GradientSet), TrainError> {
    let trace = model.forward_trace(x)?;
    let z = trace.latent.data();
    let d = z.len();
    let loss = 0.5 * z.iter().map(|v| v * v).sum::<f64>() + HALF_LN_2PI * d as f64 - trace.logdet;

    let mut grads = GradientSet::zeros_like(model);
    let mut slot_start = Vec::with_capacity(model.layers().len());
    let mut acc = 0;
    for l in model.layers() {
        slot_start.push(acc);
        acc += l.op.params().len();
    }

    let shapes = model.layer_input_shapes();
    let out_shape = model.output_shape();
    let mut end = d;
    let mut g = ImageTensor::new(out_shape, z[end - out_shape.volume()..end].to_vec());
    end -= out_shape.volume();
    for (idx, layer) in model.layers().iter().enumerate().rev() {
        let input = &trace.inputs[idx];
        let n = layer.op.params().len();
        let slots = &mut grads.tensors[slot_start[idx]..slot_start[idx] + n];
        g = match &layer.op {
            LayerOp::Squeeze => layers::unsqueeze_unchecked(&g),
            LayerOp::Split => {
                let s = shapes[idx];
                let cb = s.channels - s.channels / 2;
                let exit = crate::tensor::Shape::new(s.height, s.width, cb);
                let start = end - exit.volume();
                let ge = ImageTensor::new(exit, z[start..end].to_vec());
                end = start;
                layers::concat_channels(&g, &ge)
            }
            LayerOp::Reverse => layers::reverse_channels(&g),
            LayerOp::ActNorm(a) => a.backward(input, &g, slots),
            LayerOp::InvConv(c) => c.backward(input, &g, slots),
            LayerOp::Coupling(c) => c.backward(input, &g, slots),
        };
        if !g.is_finite() || slots.iter().flatten().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient { layer: idx });
        }
    }
    Ok((loss, grads))
}

fn check_batch(batch: &[ImageTensor]) -> Result<(), TrainError> {
    let Some(first) = batch.first() else {
        return Err(TrainError::Usage("empty batch".into()));
    };
    if batch.iter().any(|x| x.shape() != first.shape()) {
        return Err(TrainError::Usage("batch images have differing shapes".into()));
    }
    Ok(())
}

/// `-mean(log p(x))` over the batch, in nats per image.
pub fn nll_loss(model: &FlowModel, batch: &[ImageTensor]) -> Result<f64, TrainError> {
    check_batch(batch)?;
    let lps = batch
        .par_iter()
        .map(|x| model.log_prob(x))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(-lps.iter().sum::<f64>() / batch.len() as f64)
}

/// Mean loss and exact mean gradient over the batch.
pub fn loss_and_backward(model: &FlowModel, batch: &[ImageTensor]) -> Result<(f64, GradientSet), TrainError> {
    check_batch(batch)?;
    let per_image = batch
        .par_iter()
        .map(|x| image_loss_and_grad(model, x))
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = GradientSet::zeros_like(model);
    let mut loss = 0.0;
    for (l, g) in &per_image {
        loss += l;
        total.add_assign(g);
    }
    let k = 1.0 / batch.len() as f64;
    total.scale(k);
    Ok((loss * k, total))
}

/// Exact gradient of [`nll_loss`] with respect to every parameter.
pub fn backward(model: &FlowModel, batch: &[ImageTensor]) -> Result<GradientSet, TrainError> {
    loss_and_backward(model, batch).map(|(_, g)| g)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(model: &FlowModel) -> Self {
        let zeros = GradientSet::zeros_like(model).tensors;
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut FlowModel, grads: &GradientSet, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in model
            .params_mut()
            .into_iter()
            .zip(&grads.tensors)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub nll: f64,
}

/// Evaluation NLL before training (first entry) and after each epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn initial(&self) -> Option<f64> {
        self.records.first().map(|r| r.nll)
    }

    pub fn last(&self) -> Option<f64> {
        self.records.last().map(|r| r.nll)
    }
}

impl fmt::Display for TrainLog {
    /// One line per record: `epoch <n> nll <value>`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.records {
            writeln!(f, "epoch {} nll {}", r.epoch, r.nll)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FlowModel,
    pub log: TrainLog,
}

/// Trains on 8-bit-valued images (mid-bin values in the flow's pixel range),
/// dequantizing each draw with fresh uniform noise. Minibatches are sampled
/// with replacement.
pub fn train(initial: &FlowModel, dataset: &[ImageTensor], config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    check_batch(dataset).map_err(|_| TrainError::Usage("dataset is empty or has mixed shapes".into()))?;
    if dataset[0].shape() != initial.input_shape() {
        return Err(FlowError::ShapeMismatch {
            expected: initial.input_shape(),
            found: dataset[0].shape(),
        }
        .into());
    }
    let mut model = initial.clone();
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            log: TrainLog::default(),
        });
    }

    let mut rng = rng::seeded(config.seed);
    let n = dataset.len();
    if model.needs_data_init() {
        let init: Vec<ImageTensor> = (0..config.init_batch.min(n))
            .map(|_| pixel::dequantize(&dataset[rng.gen_range(0..n)], &mut rng))
            .collect();
        model.data_init(&init)?;
    }

    let eval_set = {
        let mut erng = rng::seeded(rng::derive(config.seed, 1));
        (0..config.eval_samples.min(n))
            .map(|i| pixel::dequantize(&dataset[i * n / config.eval_samples.min(n)], &mut erng))
            .collect::<Vec<_>>()
    };

    let start_epoch = model.epochs_trained;
    let mut log = TrainLog::default();
    let initial_nll = nll_loss(&model, &eval_set)?;
    log.records.push(EpochRecord {
        epoch: start_epoch,
        nll: initial_nll,
    });

    let mut adam = Adam::new(&model);
    let steps = config.steps_per_epoch();
    let warmup_steps = config.warmup_epochs as usize * steps;
    let mut last_good = model.clone();
    let mut step_index = 0usize;

    for e in 0..config.epochs {
        let epoch = start_epoch + e + 1;
        let mut diverged = false;
        for _ in 0..steps {
            let batch: Vec<ImageTensor> = (0..config.minibatch)
                .map(|_| pixel::dequantize(&dataset[rng.gen_range(0..n)], &mut rng))
                .collect();
            let mut grads = match loss_and_backward(&model, &batch) {
                Ok((loss, g)) if loss.is_finite() && g.is_finite() => g,
                Ok(_)
                | Err(TrainError::Flow(FlowError::NonFinite { .. }))
                | Err(TrainError::NonFiniteGradient { .. }) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            if let Some(max_norm) = config.clip_grad_norm {
                let norm = grads.global_norm();
                if norm > max_norm {
                    grads.scale(max_norm / norm);
                }
            }
            let lr = if warmup_steps > 0 {
                config.learning_rate * ((step_index + 1) as f64 / warmup_steps as f64).min(1.0)
            } else {
                config.learning_rate
            };
            adam.step(&mut model, &grads, lr);
            step_index += 1;
        }
        let nll = if diverged {
            f64::NAN
        } else {
            nll_loss(&model, &eval_set).unwrap_or(f64::NAN)
        };
        if !nll.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                last_good: Box::new(last_good),
                log,
            });
        }
        model.epochs_trained = epoch;
        log.records.push(EpochRecord { epoch, nll });
        last_good = model.clone();
    }
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use crate::tensor::Shape;

    fn images(shape: Shape, n: usize, seed: u64) -> Vec<ImageTensor> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| ImageTensor::new(shape, (0..shape.volume()).map(|_| r.gen_range(-0.4..0.4)).collect()))
            .collect()
    }

    #[test]
    fn identity_zero_batch_loss() {
        let m = FlowModel::identity(FlowConfig::glow(Shape::new(4, 4, 1), 2, 2)).unwrap();
        let batch = vec![ImageTensor::zeros(Shape::new(4, 4, 1)); 3];
        let loss = nll_loss(&m, &batch).unwrap();
        assert!((loss - 16.0 * HALF_LN_2PI).abs() < 1e-12);
        assert!((loss - 14.7031).abs() < 1e-4);
    }

    #[test]
    fn empty_batch_is_usage_error() {
        let m = FlowModel::identity(FlowConfig::glow(Shape::new(4, 4, 1), 1, 1)).unwrap();
        assert!(matches!(nll_loss(&m, &[]), Err(TrainError::Usage(_))));
        assert!(matches!(backward(&m, &[]), Err(TrainError::Usage(_))));
    }

    #[test]
    fn loss_matches_image_loss() {
        let m = FlowModel::random(FlowConfig::glow(Shape::new(4, 4, 1), 2, 1).with_hidden(4), 3).unwrap();
        let batch = images(Shape::new(4, 4, 1), 4, 1);
        let (loss, _) = loss_and_backward(&m, &batch).unwrap();
        assert!((loss - nll_loss(&m, &batch).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn reordering_and_duplication() {
        let m = FlowModel::random(FlowConfig::glow(Shape::new(4, 4, 1), 2, 1).with_hidden(4), 8).unwrap();
        let batch = images(Shape::new(4, 4, 1), 3, 2);
        let mut rev = batch.clone();
        rev.reverse();
        let a = nll_loss(&m, &batch).unwrap();
        let b = nll_loss(&m, &rev).unwrap();
        assert!((a - b).abs() < 1e-12);

        let g = backward(&m, &batch[..1]).unwrap();
        let g2 = backward(&m, &[batch[0].clone(), batch[0].clone()]).unwrap();
        for (x, y) in g.tensors.iter().flatten().zip(g2.tensors.iter().flatten()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn actnorm_shift_gradient_is_mean_score() {
        // Identity flow on D = 4: z is the squeezed image, the first actnorm
        // shift gradient is the batch mean of z per channel.
        let m = FlowModel::identity(FlowConfig::glow(Shape::new(2, 2, 1), 1, 2)).unwrap();
        let batch = images(Shape::new(2, 2, 1), 5, 4);
        let g = backward(&m, &batch).unwrap();
        let shift_slot = m.params().iter().position(|p| p.name == "shift").unwrap();
        for ch in 0..4 {
            let mean: f64 = batch.iter().map(|x| x.data()[ch]).sum::<f64>() / 5.0;
            assert!((g.tensors[shift_slot][ch] - mean).abs() < 1e-14);
        }
        // Log-scale gradient: mean z^2 - 1 per channel.
        let ls_slot = shift_slot - 1;
        for ch in 0..4 {
            let ms: f64 = batch.iter().map(|x| x.data()[ch].powi(2)).sum::<f64>() / 5.0;
            assert!((g.tensors[ls_slot][ch] - (ms - 1.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_learning_rate_is_bitwise_noop() {
        let m = FlowModel::random(FlowConfig::glow(Shape::new(4, 4, 1), 2, 1).with_hidden(4), 9).unwrap();
        let data = images(Shape::new(4, 4, 1), 8, 5);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            samples_per_epoch: 16,
            minibatch: 4,
            ..TrainConfig::default()
        };
        let out = train(&m, &data, &cfg).unwrap();
        for (a, b) in out.model.params().iter().zip(m.params()) {
            assert_eq!(a.values, b.values);
        }
        assert_eq!(out.model.epochs_trained, 2);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let m = FlowModel::new(FlowConfig::glow(Shape::new(4, 4, 1), 1, 1).with_hidden(4), 1).unwrap();
        let data = images(Shape::new(4, 4, 1), 4, 6);
        let out = train(
            &m,
            &data,
            &TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.model, m);
        assert!(out.log.records.is_empty());
    }

    #[test]
    fn log_format() {
        let log = TrainLog {
            records: vec![EpochRecord { epoch: 0, nll: 1.5 }, EpochRecord { epoch: 1, nll: -2.25 }],
        };
        assert_eq!(log.to_string(), "epoch 0 nll 1.5\nepoch 1 nll -2.25\n");
    }
}
