use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use flowpriv::data::DatasetManifest;
use flowpriv::detect::{self, plot, utility, ScoreEntry, ScoreSet, UtilityConfig};
use flowpriv::dp::{self, Epsilon, PrivacyParams};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::util;

#[derive(Args, Serialize)]
pub struct ScoreArgs {
    /// Flow trained on normal images only.
    #[arg(long)]
    pub m0: PathBuf,
    /// Flow trained on the normal/abnormal mixture.
    #[arg(long)]
    pub m1: PathBuf,
    /// Manifest (or directory holding one) of the images to score.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output score file (id, label, score).
    #[arg(long)]
    pub out: PathBuf,
}

fn score_manifest(m0: &Path, m1: &Path, input: &Path) -> CliResult<(DatasetManifest, ScoreSet)> {
    let m0 = util::load_model(m0)?;
    let m1 = util::load_model(m1)?;
    let manifest = util::load_manifest(input)?;
    let images = manifest.load_images()?;
    let scores = detect::score_all(&m0, &m1, &images)?;
    let set = ScoreSet::new(
        manifest
            .entries
            .iter()
            .zip(scores)
            .map(|(e, score)| ScoreEntry {
                id: e.path.clone(),
                label: e.label,
                score,
            })
            .collect(),
    );
    Ok((manifest, set))
}

pub fn score(a: ScoreArgs) -> CliResult {
    let (_, set) = score_manifest(&a.m0, &a.m1, &a.input)?;
    set.save(&a.out)?;
    util::write_resolved(&util::parent_dir(&a.out), &util::file_stem(&a.out), &a)?;
    println!("scored {} images into {}", set.entries.len(), a.out.display());
    Ok(())
}

#[derive(Args, Serialize)]
pub struct EvalAucArgs {
    /// Flow trained on normal images only.
    #[arg(long)]
    pub m0: Option<PathBuf>,
    /// Flow trained on the mixture; in utility mode also the privatization flow.
    #[arg(long)]
    pub m1: Option<PathBuf>,
    /// Manifest of test images to score.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Use an existing score file instead of scoring.
    #[arg(long, conflicts_with_all = ["m0", "m1", "input"])]
    pub scores: Option<PathBuf>,
    /// Score file to write [default: <report>/scores.tsv].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for ROC points and utility outputs [default: directory of --out, else .].
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Comma-separated total budgets for the utility curve, e.g. inf,1e3xD,1e2xD,1e1xD.
    #[arg(long, value_delimiter = ',')]
    pub eps_grid: Vec<String>,
    /// Params sidecar for the latent mechanism (utility mode).
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Training manifest for the pixel baseline's sensitivity (utility mode).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Noise seeds averaged per budget (utility mode).
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    /// Also clip latents under the infinite budget.
    #[arg(long)]
    pub clip_at_infinity: bool,
}

fn check_two_classes(set: &ScoreSet) -> CliResult {
    let normal = set.entries.iter().filter(|e| e.label.is_normal()).count();
    if normal == 0 || normal == set.entries.len() {
        return Err(CliError::usage(format!(
            "AUC needs both normal and abnormal images; input has {normal} normal of {}",
            set.entries.len()
        )));
    }
    Ok(())
}

fn roc_tsv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("fpr\ttpr\n");
    for (x, y) in points {
        writeln!(out, "{x:.6}\t{y:.6}").unwrap();
    }
    out
}

pub fn eval_auc(a: EvalAucArgs) -> CliResult {
    let report = a
        .report
        .clone()
        .or_else(|| a.out.as_deref().map(util::parent_dir))
        .unwrap_or_else(|| PathBuf::from("."));
    if !a.eps_grid.is_empty() {
        return utility_mode(&a, &report);
    }
    let set = match &a.scores {
        Some(p) => ScoreSet::load(p)?,
        None => {
            let need =
                |o: &Option<PathBuf>, f: &str| o.clone().ok_or_else(|| CliError::usage(format!("--{f} is required")));
            let (_, set) = score_manifest(&need(&a.m0, "m0")?, &need(&a.m1, "m1")?, &need(&a.input, "in")?)?;
            let out = a.out.clone().unwrap_or_else(|| report.join("scores.tsv"));
            util::write_text(&out, &set.to_tsv())?;
            set
        }
    };
    check_two_classes(&set)?;
    let auc = detect::auc(&set)?;
    let roc = detect::roc_points(&set)?;
    let roc_path = report.join("roc.tsv");
    util::write_text(&roc_path, &roc_tsv(&roc))?;
    util::write_resolved(&report, "eval-auc", &a)?;
    println!("images {}", set.entries.len());
    println!("auc {auc:.6}");
    println!("wrote {}", roc_path.display());
    Ok(())
}

fn utility_mode(a: &EvalAucArgs, report: &Path) -> CliResult {
    let need = |o: &Option<PathBuf>, f: &str| {
        o.clone()
            .ok_or_else(|| CliError::usage(format!("utility mode (--eps-grid) needs --{f}")))
    };
    let m0 = util::load_model(&need(&a.m0, "m0")?)?;
    let m1_path = need(&a.m1, "m1")?;
    let m1 = util::load_model(&m1_path)?;
    let params_path = need(&a.params, "params")?;
    if !params_path.exists() {
        return Err(CliError::io(format!(
            "params file {} not found; create it with `flowpriv latent-stats`",
            params_path.display()
        )));
    }
    let params = PrivacyParams::load(&params_path)?;
    let manifest = util::load_manifest(&need(&a.input, "in")?)?;
    let train = util::load_manifest(&need(&a.train, "train")?)?;
    let dim = manifest.shape.volume();
    let epsilons = a
        .eps_grid
        .iter()
        .map(|e| Epsilon::parse(e, dim))
        .collect::<Result<Vec<_>, _>>()?;
    let images = manifest.load_images()?;
    let labels: Vec<_> = manifest.entries.iter().map(|e| e.label).collect();
    check_two_classes(&ScoreSet::from_parts(&labels, &vec![0.0; labels.len()]))?;
    let pixel_sensitivity = dp::pixel_sensitivity(&train.load_images()?)?;
    let cfg = UtilityConfig {
        epsilons,
        seeds: a.seeds.clone(),
        clip_at_infinity: a.clip_at_infinity,
        ..UtilityConfig::default()
    };
    let table = detect::utility_curve(
        &utility::UtilityInputs {
            m0: &m0,
            m1: &m1,
            images: &images,
            labels: &labels,
            params: &params,
            pixel_sensitivity: &pixel_sensitivity,
        },
        &cfg,
    )?;
    std::fs::create_dir_all(report)?;
    util::write_text(&report.join("utility.tsv"), &table.to_string())?;
    util::write_text(&report.join("utility_detail.tsv"), &table.detail_tsv())?;
    util::write_text(&report.join("utility.svg"), &plot::utility_svg(&table))?;
    util::write_resolved(report, "eval-auc", a)?;
    println!(
        "sensitivity {} alpha {} clip_fraction_test {:.4}",
        params.mode.name(),
        params.alpha,
        clip_fraction(&m1, &images, &params)?
    );
    print!("{table}");
    println!("wrote {}", report.join("utility.tsv").display());
    Ok(())
}

fn clip_fraction(m: &flowpriv::FlowModel, images: &[flowpriv::ImageTensor], params: &PrivacyParams) -> CliResult<f64> {
    let z = images
        .iter()
        .map(|x| m.forward(x).map(|(z, _)| z))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(dp::clip_fraction(&z, params))
}
