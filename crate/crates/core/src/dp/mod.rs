//! Latent-space Laplace mechanism, the pixel-domain baseline, and an
//! empirical auditor for the local privacy bound.

pub mod budget;
pub mod laplace;
pub mod params;
pub mod verify;

use std::fmt;

use rand::Rng;
use thiserror::Error;

pub use budget::{epsilon_decompose, BudgetTable, Epsilon};
pub use laplace::{laplace_cdf, laplace_log_density, laplace_sample};
pub use params::{
    clip_fraction, clip_latent, compute_clip_params, compute_sensitivity, count_clipped, PrivacyParams,
    SensitivityMode, DEFAULT_ALPHA,
};

use crate::data::pixel;
use crate::flow::{FlowError, FlowModel};
use crate::rng;
use crate::tensor::{ImageTensor, LatentVector};

#[derive(Debug, Error)]
pub enum DpError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// Adds Lap(0, b_k) to each element.
pub fn laplace_privatize<R: Rng + ?Sized>(z: &LatentVector, params: &PrivacyParams, rng: &mut R) -> LatentVector {
    let scales = params.noise_scales();
    LatentVector::new(
        z.data()
            .iter()
            .zip(&scales)
            .map(|(&v, &b)| v + laplace_sample(rng, b))
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrivatizeOptions {
    /// Apply the clip box before and after noising.
    pub clip: bool,
}

impl Default for PrivatizeOptions {
    fn default() -> Self {
        PrivatizeOptions { clip: true }
    }
}

/// One line of the audit log.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRecord {
    pub id: String,
    pub mechanism: &'static str,
    pub epsilon: Epsilon,
    pub dim: usize,
    pub seed: u64,
    pub clip: bool,
    pub mode: SensitivityMode,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Elements with zero sensitivity: pinned by clipping, no noise.
    pub zero_scale: usize,
    /// Elements that the first clip moved.
    pub clipped: usize,
}

impl fmt::Display for AuditRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "id={} mechanism={} eps_total={} eps_element={} seed={} clip={} sensitivity={} scale_min={:.6e} scale_max={:.6e} zero_scale={} clipped={}",
            self.id,
            self.mechanism,
            self.epsilon,
            self.epsilon.per_element(self.dim),
            self.seed,
            if self.clip { "on" } else { "off" },
            self.mode.name(),
            self.scale_min,
            self.scale_max,
            self.zero_scale,
            self.clipped,
        )
    }
}

fn scale_summary(scales: &[f64]) -> (f64, f64, usize) {
    let min = scales.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scales.iter().copied().fold(0.0, f64::max);
    (
        if min.is_finite() { min } else { 0.0 },
        max,
        scales.iter().filter(|&&b| b == 0.0).count(),
    )
}

/// Latent part of the pipeline: clip, noise, clip.
pub fn privatize_latent(z: &LatentVector, params: &PrivacyParams, opts: PrivatizeOptions, seed: u64) -> LatentVector {
    let mut r = rng::seeded(seed);
    let mut zt = if opts.clip { clip_latent(z, params) } else { z.clone() };
    if !params.epsilon.is_infinite() {
        zt = laplace_privatize(&zt, params, &mut r);
        if opts.clip {
            zt = clip_latent(&zt, params);
        }
    }
    zt
}

/// Image → latent → clip → noise → clip → image.
pub fn privatize_image(
    model: &FlowModel,
    x: &ImageTensor,
    params: &PrivacyParams,
    opts: PrivatizeOptions,
    seed: u64,
) -> Result<(ImageTensor, AuditRecord), DpError> {
    if params.dim() != model.latent_dim() {
        return Err(DpError::Usage(format!(
            "privacy params cover {} latent elements but the model has {}",
            params.dim(),
            model.latent_dim()
        )));
    }
    let (z, _) = model.forward(x)?;
    let clipped = if opts.clip { count_clipped(&z, params) } else { 0 };
    let zt = privatize_latent(&z, params, opts, seed);
    let (xt, _) = model.inverse(&zt)?;
    let (scale_min, scale_max, zero_scale) = scale_summary(&params.noise_scales());
    Ok((
        xt,
        AuditRecord {
            id: String::new(),
            mechanism: "latent",
            epsilon: params.epsilon,
            dim: params.dim(),
            seed,
            clip: opts.clip,
            mode: params.mode,
            scale_min,
            scale_max,
            zero_scale,
            clipped,
        },
    ))
}

/// Per-pixel max − min over training images.
pub fn pixel_sensitivity(images: &[ImageTensor]) -> Result<Vec<f64>, DpError> {
    let latents: Vec<LatentVector> = images.iter().map(|x| LatentVector::new(x.data().to_vec())).collect();
    compute_sensitivity(&latents)
}

/// Image-domain baseline: Lap(0, Δx·D/ε) per pixel, clamped to the pixel range.
pub fn privatize_pixels<R: Rng + ?Sized>(
    x: &ImageTensor,
    epsilon: Epsilon,
    pixel_sensitivity: &[f64],
    rng: &mut R,
) -> ImageTensor {
    assert_eq!(
        x.data().len(),
        pixel_sensitivity.len(),
        "sensitivity length differs from image volume"
    );
    if epsilon.is_infinite() {
        return x.clone();
    }
    let per = epsilon.per_element(x.data().len());
    ImageTensor::new(
        x.shape(),
        x.data()
            .iter()
            .zip(pixel_sensitivity)
            .map(|(&v, &d)| {
                let b = if d == 0.0 { 0.0 } else { d / per };
                pixel::clamp_to_range(v + laplace_sample(rng, b))
            })
            .collect(),
    )
}

pub fn pixel_audit(id: &str, epsilon: Epsilon, sensitivity: &[f64], seed: u64) -> AuditRecord {
    let per = epsilon.per_element(sensitivity.len());
    let scales: Vec<f64> = sensitivity
        .iter()
        .map(|&d| {
            if epsilon.is_infinite() || d == 0.0 {
                0.0
            } else {
                d / per
            }
        })
        .collect();
    let (scale_min, scale_max, zero_scale) = scale_summary(&scales);
    AuditRecord {
        id: id.to_string(),
        mechanism: "pixel",
        epsilon,
        dim: sensitivity.len(),
        seed,
        clip: false,
        mode: SensitivityMode::Conservative,
        scale_min,
        scale_max,
        zero_scale,
        clipped: 0,
    }
}

/// log p(z̃ | z) for the unclipped-output Laplace kernel centred on clip(z).
/// Requires every scale to be positive.
pub fn latent_log_density(z_tilde: &LatentVector, z: &LatentVector, params: &PrivacyParams) -> f64 {
    let mu = clip_latent(z, params);
    params
        .noise_scales()
        .iter()
        .zip(z_tilde.data().iter().zip(mu.data()))
        .map(|(&b, (&t, &m))| laplace_log_density(t, m, b))
        .sum()
}

pub fn latent_log_ratio(
    z_tilde: &LatentVector,
    z: &LatentVector,
    z_prime: &LatentVector,
    params: &PrivacyParams,
) -> f64 {
    latent_log_density(z_tilde, z, params) - latent_log_density(z_tilde, z_prime, params)
}

/// log p(x̃ | x) in image space by change of variables: the latent density at
/// G⁻¹(x̃) plus log |det ∂z̃/∂x̃|.
pub fn image_log_density(
    model: &FlowModel,
    x_tilde: &ImageTensor,
    x: &ImageTensor,
    params: &PrivacyParams,
) -> Result<f64, DpError> {
    let (zt, logdet) = model.forward(x_tilde)?;
    let (z, _) = model.forward(x)?;
    Ok(latent_log_density(&zt, &z, params) + logdet)
}

pub fn image_log_ratio(
    model: &FlowModel,
    x_tilde: &ImageTensor,
    x: &ImageTensor,
    x_prime: &ImageTensor,
    params: &PrivacyParams,
) -> Result<f64, DpError> {
    Ok(image_log_density(model, x_tilde, x, params)? - image_log_density(model, x_tilde, x_prime, params)?)
}
