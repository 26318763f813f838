use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use flowpriv::data::Split;
use flowpriv::flow::checkpoint;
use flowpriv::train::{self as trainer, TrainConfig, TrainError, TrainLog};
use flowpriv::{FlowConfig, FlowModel, Shape};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::util;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Affine coupling with learned 1x1 channel mixing.
    Glow,
    /// Additive coupling with fixed channel reversal.
    Nice,
}

/// Training settings; every field may come from the command line or from a
/// TOML/JSON file given with `--config`. Flags win over the file.
#[derive(Args, Serialize, Deserialize, Default, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    /// Manifest of the training images.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Metrics log path [default: <model>.metrics.log].
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Architecture family [default: glow].
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    /// Multi-scale levels [default: 2].
    #[arg(long)]
    pub levels: Option<usize>,
    /// Flow steps per level [default: 4].
    #[arg(long)]
    pub depth: Option<usize>,
    /// Hidden channels of each coupling network [default: 32].
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Epochs [default: 30].
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Images per optimizer step [default: 16].
    #[arg(long)]
    pub minibatch: Option<usize>,
    /// Images drawn (with replacement) per epoch [default: 2000].
    #[arg(long)]
    pub samples_per_epoch: Option<usize>,
    /// Steady-state learning rate [default: 1e-3].
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Epochs of linear learning-rate warmup [default: 1].
    #[arg(long)]
    pub warmup_epochs: Option<u32>,
    /// Seed for initialization, minibatches and dequantization [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Clip gradients to this global norm [default: off].
    #[arg(long)]
    pub clip_grad_norm: Option<f64>,
    /// Images used for actnorm data initialization [default: 256].
    #[arg(long)]
    pub init_batch: Option<usize>,
    /// Fixed images behind the per-epoch NLL [default: 256].
    #[arg(long)]
    pub eval_samples: Option<usize>,
    /// Model tag stored in the checkpoint [default: M0 for train_normal, M1 for train_mixture].
    #[arg(long)]
    pub tag: Option<String>,
    /// Continue training from this checkpoint; the epoch counter carries on.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub settings: TrainSettings,
    /// TOML or JSON file with the same keys as the flags (underscored).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident, $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl TrainSettings {
    fn overlay(&mut self, o: &TrainSettings) {
        overlay!(
            self,
            o,
            data,
            model,
            metrics,
            arch,
            levels,
            depth,
            hidden,
            epochs,
            minibatch,
            samples_per_epoch,
            learning_rate,
            warmup_epochs,
            seed,
            clip_grad_norm,
            init_batch,
            eval_samples,
            tag,
            resume
        );
    }
}

fn read_config(path: &Path) -> CliResult<TrainSettings> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let parsed = if is_json {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
}

#[derive(Serialize)]
struct Resolved<'a> {
    #[serde(flatten)]
    settings: &'a TrainSettings,
    input_shape: String,
    trained_on: String,
    start_epoch: u32,
}

fn write_log(path: &Path, log: &TrainLog, append: bool) -> CliResult {
    let text = if append {
        // the first record repeats the resumed checkpoint's last epoch
        let mut trimmed = log.clone();
        trimmed.records.remove(0);
        let mut old = fs::read_to_string(path).unwrap_or_default();
        old.push_str(&trimmed.to_string());
        old
    } else {
        log.to_string()
    };
    util::write_text(path, &text)
}

pub fn train(a: TrainArgs) -> CliResult {
    let mut s = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainSettings::default(),
    };
    s.overlay(&a.settings);
    let data_path = s.data.clone().ok_or_else(|| CliError::usage("--data is required"))?;
    let model_path = s.model.clone().ok_or_else(|| CliError::usage("--model is required"))?;
    let d = TrainConfig::default();
    s.arch.get_or_insert(Arch::Glow);
    s.levels.get_or_insert(2);
    s.depth.get_or_insert(4);
    s.hidden.get_or_insert(32);
    s.epochs.get_or_insert(d.epochs);
    s.minibatch.get_or_insert(d.minibatch);
    s.samples_per_epoch.get_or_insert(d.samples_per_epoch);
    s.learning_rate.get_or_insert(d.learning_rate);
    s.warmup_epochs.get_or_insert(d.warmup_epochs);
    s.seed.get_or_insert(d.seed);
    s.init_batch.get_or_insert(d.init_batch);
    s.eval_samples.get_or_insert(d.eval_samples);
    let metrics_path = s
        .metrics
        .get_or_insert_with(|| PathBuf::from(format!("{}.metrics.log", model_path.display())))
        .clone();

    let manifest = util::load_manifest(&data_path)?;
    let images = manifest.load_images()?;
    let shape = Shape::new(manifest.shape.height, manifest.shape.width, 1);
    let tag = s
        .tag
        .get_or_insert_with(|| match manifest.split {
            Split::TrainNormal => "M0".into(),
            Split::TrainMixture => "M1".into(),
            Split::TestUnknown => "test".into(),
        })
        .clone();

    let initial = match &s.resume {
        Some(p) => {
            let m = util::load_model(p)?;
            if m.input_shape() != shape {
                return Err(CliError::usage(format!(
                    "checkpoint input {} does not match data shape {shape}",
                    m.input_shape()
                )));
            }
            m
        }
        None => {
            let (levels, depth) = (s.levels.unwrap(), s.depth.unwrap());
            let cfg = match s.arch.unwrap() {
                Arch::Glow => FlowConfig::glow(shape, levels, depth),
                Arch::Nice => FlowConfig::nice(shape, levels, depth),
            }
            .with_hidden(s.hidden.unwrap());
            let mut m = FlowModel::new(cfg, s.seed.unwrap())?;
            m.trained_on = tag.clone();
            m
        }
    };
    let tc = TrainConfig {
        minibatch: s.minibatch.unwrap(),
        epochs: s.epochs.unwrap(),
        samples_per_epoch: s.samples_per_epoch.unwrap(),
        learning_rate: s.learning_rate.unwrap(),
        warmup_epochs: s.warmup_epochs.unwrap(),
        seed: s.seed.unwrap(),
        clip_grad_norm: s.clip_grad_norm,
        init_batch: s.init_batch.unwrap(),
        eval_samples: s.eval_samples.unwrap(),
    };
    util::write_resolved(
        &util::parent_dir(&model_path),
        &util::file_stem(&model_path),
        &Resolved {
            settings: &s,
            input_shape: shape.to_string(),
            trained_on: tag.clone(),
            start_epoch: initial.epochs_trained,
        },
    )?;
    let resumed = s.resume.is_some();
    match trainer::train(&initial, &images, &tc) {
        Ok(out) => {
            let mut model = out.model;
            model.trained_on = tag;
            checkpoint::save(&model, &model_path)?;
            if !out.log.records.is_empty() {
                write_log(&metrics_path, &out.log, resumed)?;
            }
            match (out.log.initial(), out.log.last()) {
                (Some(a), Some(b)) => println!(
                    "trained {} epochs: nll {a:.4} -> {b:.4} nats/image ({} parameters)",
                    tc.epochs,
                    model.param_count()
                ),
                _ => println!(
                    "no epochs run; wrote initialization ({} parameters)",
                    model.param_count()
                ),
            }
            println!("wrote {}", model_path.display());
            Ok(())
        }
        Err(TrainError::Diverged { epoch, last_good, log }) => {
            checkpoint::save(&last_good, &model_path)?;
            write_log(&metrics_path, &log, resumed)?;
            Err(CliError::Tolerance(format!(
                "training diverged in epoch {epoch}; kept last good checkpoint at {}",
                model_path.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}
