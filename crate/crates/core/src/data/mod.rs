//! Synthetic datasets, image I/O and identifying perturbations.

pub mod manifest;
pub mod perturb;
pub mod pgm;
pub mod pixel;
pub mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

pub use manifest::{DatasetManifest, Label, ManifestEntry, Split};
pub use perturb::{Perturbation, Rect};
pub use pgm::PgmError;

use crate::rng;
use crate::tensor::Shape;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Format(String),
    #[error("image file {0} listed in manifest does not exist")]
    Missing(PathBuf),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Pgm(#[from] PgmError),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub shape: Shape,
    pub train_normal: usize,
    pub train_mixture: usize,
    pub test: usize,
    /// Fraction of the smaller normal pool shared between the two training splits.
    pub overlap: f64,
    /// Marked copies of fresh normal images, written as an extra test manifest.
    pub marked: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            shape: Shape::new(16, 16, 1),
            train_normal: 600,
            train_mixture: 1000,
            test: 400,
            overlap: 0.8,
            marked: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImage {
    pub entry: ManifestEntry,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSplit {
    /// Manifest file stem, e.g. `train_normal` or `test_marked`.
    pub name: String,
    pub split: Split,
    pub images: Vec<GeneratedImage>,
}

struct Pending {
    label: Label,
    seed: u64,
    perturbation: Perturbation,
}

fn render(dir: &str, shape: Shape, items: Vec<Pending>) -> Result<Vec<GeneratedImage>, DataError> {
    items
        .into_par_iter()
        .enumerate()
        .map(|(i, p)| {
            let img = synth::gen_toy_image(p.seed, p.label == Label::Abnormal, shape)?;
            let pixels = match p.perturbation {
                Perturbation::None => img.pixels,
                other => pixel::image_to_u8(&other.apply(&img.tensor())),
            };
            Ok(GeneratedImage {
                entry: ManifestEntry {
                    path: format!("{dir}/{i:05}.pgm"),
                    label: p.label,
                    perturbation: p.perturbation,
                    seed: p.seed,
                },
                pixels,
            })
        })
        .collect()
}

/// Builds all splits in memory. Same config, same bytes.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<GeneratedSplit>, DataError> {
    if cfg.train_normal + cfg.train_mixture + cfg.test == 0 {
        return Err(DataError::Usage("empty dataset: all split counts are zero".into()));
    }
    if cfg.shape.channels != 1 {
        return Err(DataError::Usage("toy datasets are single-channel".into()));
    }
    if !(0.0..=1.0).contains(&cfg.overlap) {
        return Err(DataError::Usage(format!(
            "overlap must lie in [0, 1], got {}",
            cfg.overlap
        )));
    }
    // keep the image shape check inside the generator, but fail before any work
    synth::ToyScene::sample(0, cfg.shape)?;

    let mut next_id = 0u64;
    let mut fresh = || {
        next_id += 1;
        rng::derive(cfg.seed, next_id)
    };
    let pending = |label, seed| Pending {
        label,
        seed,
        perturbation: Perturbation::None,
    };

    let normal_seeds: Vec<u64> = (0..cfg.train_normal).map(|_| fresh()).collect();
    let mix_abnormal = cfg.train_mixture / 2;
    let mix_normal = cfg.train_mixture - mix_abnormal;
    let shared = ((cfg.overlap * cfg.train_normal.min(mix_normal) as f64).round() as usize).min(mix_normal);
    let mut mixture: Vec<Pending> = normal_seeds[..shared]
        .iter()
        .map(|&s| pending(Label::Normal, s))
        .collect();
    mixture.extend((shared..mix_normal).map(|_| pending(Label::Normal, fresh())));
    mixture.extend((0..mix_abnormal).map(|_| pending(Label::Abnormal, fresh())));
    mixture.shuffle(&mut rng::seeded(rng::derive(cfg.seed, u64::MAX)));

    let train_normal = render(
        Split::TrainNormal.name(),
        cfg.shape,
        normal_seeds.iter().map(|&s| pending(Label::Normal, s)).collect(),
    )?;
    let train_mixture = render(Split::TrainMixture.name(), cfg.shape, mixture)?;
    let seen: HashSet<&[u8]> = train_normal
        .iter()
        .chain(&train_mixture)
        .map(|g| g.pixels.as_slice())
        .collect();

    // Held-out images are drawn one at a time so byte-level duplicates of a
    // training image can be skipped.
    let mut held_out = |label: Label, perturbation: Perturbation| -> Result<Pending, DataError> {
        loop {
            let seed = fresh();
            let img = synth::gen_toy_image(seed, label == Label::Abnormal, cfg.shape)?;
            let pixels = match perturbation {
                Perturbation::None => img.pixels,
                p => pixel::image_to_u8(&p.apply(&img.tensor())),
            };
            if !seen.contains(pixels.as_slice()) {
                return Ok(Pending {
                    label,
                    seed,
                    perturbation,
                });
            }
        }
    };
    let test_abnormal = cfg.test / 2;
    let mut test = Vec::with_capacity(cfg.test);
    for i in 0..cfg.test {
        let label = if i < cfg.test - test_abnormal {
            Label::Normal
        } else {
            Label::Abnormal
        };
        test.push(held_out(label, Perturbation::None)?);
    }
    test.shuffle(&mut rng::seeded(rng::derive(cfg.seed, u64::MAX - 1)));
    let marker = Perturbation::default_marker(cfg.shape.height, cfg.shape.width);
    let marked: Vec<Pending> = (0..cfg.marked)
        .map(|_| held_out(Label::Normal, marker))
        .collect::<Result<_, _>>()?;

    let test = render(Split::TestUnknown.name(), cfg.shape, test)?;
    let marked = render("test_marked", cfg.shape, marked)?;

    let mut out = vec![
        GeneratedSplit {
            name: Split::TrainNormal.name().into(),
            split: Split::TrainNormal,
            images: train_normal,
        },
        GeneratedSplit {
            name: Split::TrainMixture.name().into(),
            split: Split::TrainMixture,
            images: train_mixture,
        },
        GeneratedSplit {
            name: Split::TestUnknown.name().into(),
            split: Split::TestUnknown,
            images: test,
        },
    ];
    if cfg.marked > 0 {
        out.push(GeneratedSplit {
            name: "test_marked".into(),
            split: Split::TestUnknown,
            images: marked,
        });
    }
    Ok(out)
}

/// Writes images and one `<name>.tsv` manifest per split under `dir`.
/// Returns the manifest paths.
pub fn write_dataset(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, DataError> {
    let dir = dir.as_ref();
    let splits = generate(cfg)?;
    let mut manifests = Vec::new();
    for s in &splits {
        let sub = dir.join(&s.name);
        fs::create_dir_all(&sub).map_err(|e| DataError::io(&sub, e))?;
        s.images.par_iter().try_for_each(|g| {
            let path = dir.join(&g.entry.path);
            let bytes = pgm::encode(&pgm::Gray8 {
                width: cfg.shape.width,
                height: cfg.shape.height,
                pixels: g.pixels.clone(),
            });
            fs::write(&path, bytes).map_err(|e| DataError::io(&path, e))
        })?;
        let manifest = DatasetManifest {
            split: s.split,
            shape: cfg.shape,
            seed: cfg.seed,
            entries: s.images.iter().map(|g| g.entry.clone()).collect(),
            root: dir.to_path_buf(),
        };
        let path = dir.join(format!("{}.tsv", s.name));
        manifest.save(&path)?;
        manifests.push(path);
    }
    Ok(manifests)
}
