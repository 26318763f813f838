//! Per-element clip box and sensitivity, plus the `FDPP` sidecar format.
//!
//! ```text
//! "FDPP"  u16 version
//! payload:
//!   u32 dim, f64 alpha, u8 sensitivity mode (0 clipped, 1 conservative)
//!   u8 budget kind (0 finite, 1 infinite), f64 budget
//!   u32 model checksum (CRC-32 of the checkpoint bytes, 0 if unknown)
//!   f64[dim] delta_z, f64[dim] center, f64[dim] width, f64[dim] range
//! u32 CRC-32 of the payload
//! ```

use std::fs;
use std::path::Path;

use super::{DpError, Epsilon};
use crate::tensor::LatentVector;

pub const MAGIC: &[u8; 4] = b"FDPP";
pub const VERSION: u16 = 1;
pub const DEFAULT_ALPHA: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SensitivityMode {
    /// Δz_k = w_k: after clipping every input lies inside the box.
    #[default]
    Clipped,
    /// Δz_k = raw training range max_k − min_k.
    Conservative,
}

impl SensitivityMode {
    pub fn name(self) -> &'static str {
        match self {
            SensitivityMode::Clipped => "clipped",
            SensitivityMode::Conservative => "conservative",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyParams {
    pub delta_z: Vec<f64>,
    pub center: Vec<f64>,
    pub width: Vec<f64>,
    /// Raw per-element training range.
    pub range: Vec<f64>,
    pub alpha: f64,
    pub epsilon: Epsilon,
    pub mode: SensitivityMode,
    pub model_checksum: u32,
}

fn check_latents(latents: &[LatentVector], min: usize) -> Result<usize, DpError> {
    if latents.len() < min {
        return Err(DpError::Usage(format!(
            "need at least {min} training latents, got {}",
            latents.len()
        )));
    }
    let dim = latents[0].dim();
    if let Some(bad) = latents.iter().find(|z| z.dim() != dim) {
        return Err(DpError::Usage(format!(
            "latent dimensions differ: {dim} vs {}",
            bad.dim()
        )));
    }
    Ok(dim)
}

fn extrema(latents: &[LatentVector], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for z in latents {
        for (k, &v) in z.data().iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    (lo, hi)
}

/// Per-element max over pairs of |z_k − z′_k|, computed as max − min.
pub fn compute_sensitivity(latents: &[LatentVector]) -> Result<Vec<f64>, DpError> {
    let dim = check_latents(latents, 2)?;
    let (lo, hi) = extrema(latents, dim);
    Ok(hi.iter().zip(&lo).map(|(h, l)| h - l).collect())
}

/// Box centers at the range midpoint and widths `alpha` times the range.
pub fn compute_clip_params(latents: &[LatentVector], alpha: f64) -> Result<(Vec<f64>, Vec<f64>), DpError> {
    check_alpha(alpha)?;
    let dim = check_latents(latents, 1)?;
    let (lo, hi) = extrema(latents, dim);
    let center = hi.iter().zip(&lo).map(|(h, l)| (h + l) / 2.0).collect();
    let width = hi.iter().zip(&lo).map(|(h, l)| alpha * (h - l)).collect();
    Ok((center, width))
}

fn check_alpha(alpha: f64) -> Result<(), DpError> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(DpError::Usage(format!("alpha must lie in (0, 1], got {alpha}")))
    }
}

impl PrivacyParams {
    pub fn from_latents(latents: &[LatentVector], alpha: f64, mode: SensitivityMode) -> Result<Self, DpError> {
        let range = compute_sensitivity(latents)?;
        let (center, width) = compute_clip_params(latents, alpha)?;
        let delta_z = match mode {
            SensitivityMode::Clipped => width.clone(),
            SensitivityMode::Conservative => range.clone(),
        };
        Ok(PrivacyParams {
            delta_z,
            center,
            width,
            range,
            alpha,
            epsilon: Epsilon::Infinite,
            mode,
            model_checksum: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.delta_z.len()
    }

    pub fn with_epsilon(mut self, epsilon: Epsilon) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn lower(&self, k: usize) -> f64 {
        self.center[k] - self.width[k] / 2.0
    }

    pub fn upper(&self, k: usize) -> f64 {
        self.center[k] + self.width[k] / 2.0
    }

    /// b_k = Δz_k · D / ε; zero under the infinite budget.
    pub fn noise_scales(&self) -> Vec<f64> {
        let per = self.epsilon.per_element(self.dim());
        self.delta_z
            .iter()
            .map(|&d| {
                if self.epsilon.is_infinite() || d == 0.0 {
                    0.0
                } else {
                    d / per
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), DpError> {
        let d = self.dim();
        if [self.center.len(), self.width.len(), self.range.len()]
            .iter()
            .any(|&n| n != d)
        {
            return Err(DpError::Usage("privacy parameter arrays differ in length".into()));
        }
        check_alpha(self.alpha)?;
        let arrays = [&self.delta_z, &self.center, &self.width, &self.range];
        if arrays.iter().any(|a| a.iter().any(|v| !v.is_finite())) {
            return Err(DpError::Usage("privacy parameters contain non-finite values".into()));
        }
        if self.delta_z.iter().chain(&self.width).any(|&v| v < 0.0) {
            return Err(DpError::Usage("negative sensitivity or clip width".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = Vec::new();
        p.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        p.extend_from_slice(&self.alpha.to_le_bytes());
        p.push(match self.mode {
            SensitivityMode::Clipped => 0,
            SensitivityMode::Conservative => 1,
        });
        match self.epsilon {
            Epsilon::Finite(v) => {
                p.push(0);
                p.extend_from_slice(&v.to_le_bytes());
            }
            Epsilon::Infinite => {
                p.push(1);
                p.extend_from_slice(&f64::INFINITY.to_le_bytes());
            }
        }
        p.extend_from_slice(&self.model_checksum.to_le_bytes());
        for a in [&self.delta_z, &self.center, &self.width, &self.range] {
            for v in a.iter() {
                p.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&p);
        out.extend_from_slice(&crc32fast::hash(&p).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DpError> {
        let bad = |m: &str| DpError::Format(format!("privacy params: {m}"));
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        if bytes.len() < 6 + 4 {
            return Err(bad("truncated"));
        }
        let (payload, tail) = bytes[6..].split_at(bytes.len() - 10);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if stored != crc32fast::hash(payload) {
            return Err(bad("checksum mismatch"));
        }
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], DpError> {
            let s = payload
                .get(pos..pos + n)
                .ok_or_else(|| bad(&format!("truncated at byte {}", 6 + pos)))?;
            pos += n;
            Ok(s)
        };
        let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let alpha = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let mode = match take(1)?[0] {
            0 => SensitivityMode::Clipped,
            1 => SensitivityMode::Conservative,
            m => return Err(bad(&format!("unknown sensitivity mode {m}"))),
        };
        let kind = take(1)?[0];
        let eps = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let epsilon = match kind {
            0 => Epsilon::finite(eps)?,
            1 => Epsilon::Infinite,
            k => return Err(bad(&format!("unknown budget kind {k}"))),
        };
        let model_checksum = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let mut arrays = Vec::new();
        for _ in 0..4 {
            let raw = take(dim * 8)?;
            arrays.push(
                raw.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect::<Vec<_>>(),
            );
        }
        if pos != payload.len() {
            return Err(bad("trailing bytes"));
        }
        let range = arrays.pop().unwrap();
        let width = arrays.pop().unwrap();
        let center = arrays.pop().unwrap();
        let delta_z = arrays.pop().unwrap();
        let p = PrivacyParams {
            delta_z,
            center,
            width,
            range,
            alpha,
            epsilon,
            mode,
            model_checksum,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DpError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| DpError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DpError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| DpError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Clamp each element into `[c_k − w_k/2, c_k + w_k/2]`.
pub fn clip_latent(z: &LatentVector, params: &PrivacyParams) -> LatentVector {
    assert_eq!(z.dim(), params.dim(), "latent and params dimensions differ");
    LatentVector::new(
        z.data()
            .iter()
            .enumerate()
            .map(|(k, &v)| v.max(params.lower(k)).min(params.upper(k)))
            .collect(),
    )
}

/// Number of elements outside the box.
pub fn count_clipped(z: &LatentVector, params: &PrivacyParams) -> usize {
    z.data()
        .iter()
        .enumerate()
        .filter(|&(k, &v)| v < params.lower(k) || v > params.upper(k))
        .count()
}

/// Fraction of all latent elements that clipping would move.
pub fn clip_fraction(latents: &[LatentVector], params: &PrivacyParams) -> f64 {
    let total: usize = latents.iter().map(LatentVector::dim).sum();
    if total == 0 {
        return 0.0;
    }
    latents.iter().map(|z| count_clipped(z, params)).sum::<usize>() as f64 / total as f64
}
