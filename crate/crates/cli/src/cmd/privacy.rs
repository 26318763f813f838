use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use flowpriv::data::{perturb, pixel, synth, DatasetManifest, Label, ManifestEntry, Perturbation};
use flowpriv::dp::{self, Epsilon, PrivacyParams, PrivatizeOptions, SensitivityMode, DEFAULT_ALPHA};
use flowpriv::{rng, ImageTensor, LatentVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::util;

#[derive(Args, Serialize)]
pub struct LatentStatsArgs {
    /// Privatization flow checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Manifest of the images the model was trained on.
    #[arg(long)]
    pub data: PathBuf,
    /// Clip-box width as a fraction of each element's training range.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Calibrate noise to the raw training range instead of the clip width.
    #[arg(long)]
    pub conservative_sensitivity: bool,
    /// Held-out manifest on which to report the clipped fraction.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    /// Output params sidecar.
    #[arg(long)]
    pub out: PathBuf,
}

fn latents(model: &flowpriv::FlowModel, images: &[ImageTensor]) -> CliResult<Vec<LatentVector>> {
    Ok(images
        .par_iter()
        .map(|x| model.forward(x).map(|(z, _)| z))
        .collect::<Result<_, _>>()?)
}

fn summary(v: &[f64]) -> (f64, f64, f64) {
    let mut s = v.to_vec();
    let med = util::median(&mut s);
    (s[0], med, s[s.len() - 1])
}

pub fn latent_stats(a: LatentStatsArgs) -> CliResult {
    let model = util::load_model(&a.model)?;
    let manifest = util::load_manifest(&a.data)?;
    let images = manifest.load_images()?;
    let z = latents(&model, &images)?;
    let mode = if a.conservative_sensitivity {
        SensitivityMode::Conservative
    } else {
        SensitivityMode::Clipped
    };
    let mut params = PrivacyParams::from_latents(&z, a.alpha, mode)?;
    params.model_checksum = util::checkpoint_crc(&a.model)?;
    params.save(&a.out)?;
    util::write_resolved(&util::parent_dir(&a.out), &util::file_stem(&a.out), &a)?;

    let (lo, med, hi) = summary(&params.delta_z);
    println!("latent dim {} from {} images", params.dim(), z.len());
    println!("alpha {} sensitivity {}", a.alpha, mode.name());
    println!("delta_z min {lo:.6} median {med:.6} max {hi:.6}");
    println!(
        "constant elements (zero sensitivity) {}",
        params.delta_z.iter().filter(|&&d| d == 0.0).count()
    );
    println!("clip_fraction train {:.4}", dp::clip_fraction(&z, &params));
    if let Some(p) = &a.probe {
        let probe = util::load_manifest(p)?;
        let pz = latents(&model, &probe.load_images()?)?;
        println!("clip_fraction probe {:.4}", dp::clip_fraction(&pz, &params));
    }
    // split-half stability of the sensitivity estimate
    if z.len() >= 4 {
        let (even, odd): (Vec<_>, Vec<_>) = z.iter().cloned().enumerate().partition(|(i, _)| i % 2 == 0);
        let strip = |v: Vec<(usize, LatentVector)>| v.into_iter().map(|(_, z)| z).collect::<Vec<_>>();
        let da = dp::compute_sensitivity(&strip(even))?;
        let db = dp::compute_sensitivity(&strip(odd))?;
        let mut ratios: Vec<f64> = da
            .iter()
            .zip(&db)
            .filter(|(a, b)| **a > 0.0 && **b > 0.0)
            .map(|(a, b)| a / b)
            .collect();
        if !ratios.is_empty() {
            ratios.sort_by(f64::total_cmp);
            println!(
                "split-half delta_z ratio p05 {:.4} median {:.4} p95 {:.4}",
                util::quantile(&ratios, 0.05),
                util::quantile(&ratios, 0.5),
                util::quantile(&ratios, 0.95)
            );
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Args, Serialize)]
pub struct PrivatizeArgs {
    /// Privatization flow checkpoint (not needed with --pixel-baseline).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Params sidecar written by `latent-stats`.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Total budget: inf, a number, or AxD meaning A times the image size (e.g. 1e2xD).
    #[arg(long)]
    pub eps: String,
    /// Manifest of images to privatize.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Base seed; image i uses seed XOR i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Add Laplace noise to pixels instead of latents.
    #[arg(long)]
    pub pixel_baseline: bool,
    /// Training manifest for the per-pixel sensitivity of --pixel-baseline.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Skip latent clipping.
    #[arg(long)]
    pub no_clip: bool,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

enum Mech {
    Latent {
        model: flowpriv::FlowModel,
        params: PrivacyParams,
        opts: PrivatizeOptions,
    },
    Pixel {
        sensitivity: Vec<f64>,
    },
}

pub fn privatize(a: PrivatizeArgs) -> CliResult {
    let manifest = util::load_manifest(&a.input)?;
    let dim = manifest.shape.volume();
    let eps = Epsilon::parse(&a.eps, dim)?;
    let mech = if a.pixel_baseline {
        let train = a
            .train
            .as_ref()
            .ok_or_else(|| CliError::usage("--pixel-baseline needs --train MANIFEST for the per-pixel sensitivity"))?;
        Mech::Pixel {
            sensitivity: dp::pixel_sensitivity(&util::load_manifest(train)?.load_images()?)?,
        }
    } else {
        let model_path = a.model.as_ref().ok_or_else(|| CliError::usage("--model is required"))?;
        let params_path = a
            .params
            .as_ref()
            .ok_or_else(|| CliError::usage("--params is required; create it with `flowpriv latent-stats`"))?;
        if !params_path.exists() {
            return Err(CliError::io(format!(
                "params file {} not found; create it with `flowpriv latent-stats --model {} --data TRAIN_MANIFEST --out {}`",
                params_path.display(),
                model_path.display(),
                params_path.display()
            )));
        }
        let model = util::load_model(model_path)?;
        let params = PrivacyParams::load(params_path)?.with_epsilon(eps);
        if params.model_checksum != 0 && params.model_checksum != util::checkpoint_crc(model_path)? {
            eprintln!("warning: params were computed for a different checkpoint");
        }
        Mech::Latent {
            model,
            params,
            opts: PrivatizeOptions { clip: !a.no_clip },
        }
    };
    util::ensure_writable_dir(&a.out, a.force)?;
    util::write_resolved(&a.out, "privatize", &a)?;

    let images = manifest.load_images()?;
    let results: Vec<(ImageTensor, dp::AuditRecord)> = images
        .par_iter()
        .zip(&manifest.entries)
        .enumerate()
        .map(|(i, (x, e))| {
            let seed = rng::image_seed(a.seed, i as u64);
            let (y, mut audit) = match &mech {
                Mech::Latent { model, params, opts } => dp::privatize_image(model, x, params, *opts, seed)?,
                Mech::Pixel { sensitivity } => {
                    let y = dp::privatize_pixels(x, eps, sensitivity, &mut rng::seeded(seed));
                    (y, dp::pixel_audit("", eps, sensitivity, seed))
                }
            };
            audit.id = e.path.clone();
            Ok((pixel::quantize(&y), audit))
        })
        .collect::<Result<_, dp::DpError>>()?;

    let img_dir = a.out.join("images");
    std::fs::create_dir_all(&img_dir)?;
    let mut audit_log = String::new();
    let mut obfuscation = String::new();
    let mut entries = Vec::new();
    for (i, ((y, audit), e)) in results.iter().zip(&manifest.entries).enumerate() {
        let rel = format!("images/{i:05}.pgm");
        flowpriv::data::pgm::write_pgm(y, a.out.join(&rel)).map_err(|e| CliError::io(e.to_string()))?;
        writeln!(audit_log, "{audit}").unwrap();
        entries.push(ManifestEntry {
            path: rel,
            label: e.label,
            perturbation: e.perturbation,
            seed: e.seed,
        });
        if e.perturbation != Perturbation::None {
            let original = synth::gen_toy_image(e.seed, e.label == Label::Abnormal, manifest.shape)?.tensor();
            let m = perturb::obfuscation_metrics(&original, &e.perturbation, y);
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
            writeln!(
                obfuscation,
                "{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
                e.path,
                e.perturbation,
                opt(m.marker_residual),
                opt(m.marker_energy),
                m.asymmetry,
                m.original_asymmetry
            )
            .unwrap();
        }
    }
    DatasetManifest {
        split: manifest.split,
        shape: manifest.shape,
        seed: manifest.seed,
        entries,
        root: a.out.clone(),
    }
    .save(a.out.join("privatized.tsv"))?;
    util::write_text(&a.out.join("audit.log"), &audit_log)?;
    if !obfuscation.is_empty() {
        let header = "source\tperturbation\tmarker_residual\tmarker_energy\tasymmetry\toriginal_asymmetry\n";
        util::write_text(&a.out.join("obfuscation.tsv"), &format!("{header}{obfuscation}"))?;
        let residuals: Vec<f64> = obfuscation
            .lines()
            .filter_map(|l| l.split('\t').nth(2)?.parse().ok())
            .collect();
        if !residuals.is_empty() {
            println!(
                "mean marker residual {:.6} over {} images",
                residuals.iter().sum::<f64>() / residuals.len() as f64,
                residuals.len()
            );
        }
    }
    println!(
        "privatized {} images at eps {} (per element {}) into {}",
        results.len(),
        eps,
        eps.per_element(dim),
        a.out.display()
    );
    Ok(())
}
