//! Detection AUC after privatization, swept over budgets.

use std::fmt::{self, Write as _};

use rayon::prelude::*;

use super::{auc, posterior_score, DetectError, ScoreSet};
use crate::data::{pixel, Label};
use crate::dp::{privatize_image, privatize_pixels, Epsilon, PrivacyParams, PrivatizeOptions};
use crate::flow::FlowModel;
use crate::rng;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MechanismKind {
    /// Clip, Laplace noise and decode through the privatization flow.
    Latent,
    /// Laplace noise on pixels.
    Pixel,
}

impl MechanismKind {
    pub fn name(self) -> &'static str {
        match self {
            MechanismKind::Latent => "latent",
            MechanismKind::Pixel => "pixel",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilityConfig {
    pub epsilons: Vec<Epsilon>,
    pub mechanisms: Vec<MechanismKind>,
    pub seeds: Vec<u64>,
    /// Clip latents under the infinite budget too (off reproduces a plain
    /// roundtrip).
    pub clip_at_infinity: bool,
    /// Round privatized images to 8 bits before scoring, as released files are.
    pub quantize: bool,
}

impl Default for UtilityConfig {
    fn default() -> Self {
        UtilityConfig {
            epsilons: Vec::new(),
            mechanisms: vec![MechanismKind::Latent, MechanismKind::Pixel],
            seeds: vec![0, 1, 2],
            clip_at_infinity: false,
            quantize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilityCell {
    pub mechanism: MechanismKind,
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilityRow {
    pub epsilon: Epsilon,
    pub cells: Vec<UtilityCell>,
}

impl UtilityRow {
    pub fn cell(&self, m: MechanismKind) -> Option<&UtilityCell> {
        self.cells.iter().find(|c| c.mechanism == m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilityTable {
    pub dim: usize,
    pub mechanisms: Vec<MechanismKind>,
    pub rows: Vec<UtilityRow>,
}

impl UtilityTable {
    pub fn row(&self, eps: Epsilon) -> Option<&UtilityRow> {
        self.rows.iter().find(|r| r.epsilon == eps)
    }

    /// Per-seed values, one line per (ε, mechanism, seed index).
    pub fn detail_tsv(&self) -> String {
        let mut out = String::from("epsilon\tepsilon_per_element\tmechanism\tseed_index\tauc\n");
        for r in &self.rows {
            for c in &r.cells {
                for (i, a) in c.per_seed.iter().enumerate() {
                    writeln!(
                        out,
                        "{}\t{}\t{}\t{i}\t{a:.6}",
                        r.epsilon,
                        r.epsilon.per_element(self.dim),
                        c.mechanism.name()
                    )
                    .unwrap();
                }
            }
        }
        out
    }
}

/// Mean AUC table: one row per budget, one column per mechanism.
impl fmt::Display for UtilityTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epsilon\tepsilon_per_element")?;
        for m in &self.mechanisms {
            write!(f, "\t{}", m.name())?;
        }
        writeln!(f)?;
        for r in &self.rows {
            write!(f, "{}\t{}", r.epsilon, r.epsilon.per_element(self.dim))?;
            for c in &r.cells {
                write!(f, "\t{:.6}", c.mean)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub struct UtilityInputs<'a> {
    pub m0: &'a FlowModel,
    pub m1: &'a FlowModel,
    pub images: &'a [ImageTensor],
    pub labels: &'a [Label],
    /// Latent clip box and sensitivity, from the privatization flow.
    pub params: &'a PrivacyParams,
    /// Per-pixel training range for the baseline.
    pub pixel_sensitivity: &'a [f64],
}

/// Stream seed for one (mechanism, ε index, seed) cell; images then use
/// `cell_seed XOR index`.
pub fn cell_seed(mechanism: MechanismKind, eps_index: usize, seed: u64) -> u64 {
    let tag = match mechanism {
        MechanismKind::Latent => 0u64,
        MechanismKind::Pixel => 1,
    };
    rng::derive(seed, (tag << 32) | eps_index as u64)
}

pub fn privatize_set(
    inputs: &UtilityInputs<'_>,
    mechanism: MechanismKind,
    epsilon: Epsilon,
    base_seed: u64,
    cfg: &UtilityConfig,
) -> Result<Vec<ImageTensor>, DetectError> {
    let params = inputs.params.clone().with_epsilon(epsilon);
    let opts = PrivatizeOptions {
        clip: !epsilon.is_infinite() || cfg.clip_at_infinity,
    };
    inputs
        .images
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let seed = rng::image_seed(base_seed, i as u64);
            let y = match mechanism {
                MechanismKind::Latent => privatize_image(inputs.m1, x, &params, opts, seed)?.0,
                MechanismKind::Pixel => privatize_pixels(x, epsilon, inputs.pixel_sensitivity, &mut rng::seeded(seed)),
            };
            Ok(if cfg.quantize { pixel::quantize(&y) } else { y })
        })
        .collect()
}

pub fn utility_curve(inputs: &UtilityInputs<'_>, cfg: &UtilityConfig) -> Result<UtilityTable, DetectError> {
    if cfg.epsilons.is_empty() || cfg.mechanisms.is_empty() || cfg.seeds.is_empty() {
        return Err(DetectError::Usage(
            "utility curve needs at least one budget, mechanism and seed".into(),
        ));
    }
    if inputs.images.len() != inputs.labels.len() {
        return Err(DetectError::Usage("image and label counts differ".into()));
    }
    let mut rows = Vec::new();
    for (ei, &eps) in cfg.epsilons.iter().enumerate() {
        let mut cells = Vec::new();
        for &mech in &cfg.mechanisms {
            let mut per_seed = Vec::new();
            for &seed in &cfg.seeds {
                let released = privatize_set(inputs, mech, eps, cell_seed(mech, ei, seed), cfg)?;
                let scores: Vec<f64> = released
                    .par_iter()
                    .map(|x| posterior_score(inputs.m0, inputs.m1, x))
                    .collect::<Result<_, _>>()?;
                per_seed.push(auc(&ScoreSet::from_parts(inputs.labels, &scores))?);
            }
            let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
            cells.push(UtilityCell {
                mechanism: mech,
                per_seed,
                mean,
            });
        }
        rows.push(UtilityRow { epsilon: eps, cells });
    }
    Ok(UtilityTable {
        dim: inputs.params.dim(),
        mechanisms: cfg.mechanisms.clone(),
        rows,
    })
}
