use std::path::PathBuf;

use clap::{Args, ValueEnum};
use flowpriv::data::synth;
use flowpriv::dp::verify::{self, BinRange, FlowMechanism, LdpReport, ScalarLaplace};
use flowpriv::dp::{Epsilon, PrivacyParams, PrivatizeOptions, SensitivityMode, DEFAULT_ALPHA};
use flowpriv::{rng, FlowConfig, FlowModel, ImageTensor, Shape};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::util;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VerifyMode {
    /// x + Laplace(sensitivity/eps) on a scalar, inputs 0 and the sensitivity.
    Scalar,
    /// Full clip/noise/decode pipeline through a flow with four latent elements.
    Subflow,
}

#[derive(Args, Serialize)]
pub struct VerifyLdpArgs {
    #[arg(long, value_enum, default_value_t = VerifyMode::Scalar)]
    pub mode: VerifyMode,
    /// Claimed total budget; `xD` multiplies by the mechanism dimension.
    #[arg(long, default_value = "1")]
    pub eps: String,
    /// Releases drawn per input.
    #[arg(long, default_value_t = 1_000_000)]
    pub trials: usize,
    /// Histogram bins per output axis [default: 50 scalar, 6 subflow].
    #[arg(long)]
    pub bins: Option<usize>,
    /// Scalar sensitivity.
    #[arg(long, default_value_t = 1.0)]
    pub sensitivity: f64,
    /// Histogram range as LO,HI [default: -6,7 scalar, pilot quantiles subflow].
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub range: Option<Vec<f64>>,
    /// 2x2x1 checkpoint for subflow mode [default: a seeded random flow].
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Clip-box fraction for subflow mode.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Claim half the budget the noise was calibrated for; the audit should fail.
    #[arg(long)]
    pub inject_violation: bool,
}

const SUB_SHAPE: Shape = Shape::new(2, 2, 1);
const SUB_SOURCE: Shape = Shape::new(16, 16, 1);
const SUB_TRAIN: u64 = 256;

/// Block average of a toy image down to 2x2.
fn downsampled_toy(seed: u64, abnormal: bool) -> CliResult<ImageTensor> {
    let x = synth::gen_toy_image(seed, abnormal, SUB_SOURCE)?.tensor();
    let (bh, bw) = (SUB_SOURCE.height / 2, SUB_SOURCE.width / 2);
    let mut out = ImageTensor::zeros(SUB_SHAPE);
    for r in 0..2 {
        for c in 0..2 {
            let mut s = 0.0;
            for i in 0..bh {
                for j in 0..bw {
                    s += x.get(r * bh + i, c * bw + j, 0);
                }
            }
            out.set(r, c, 0, s / (bh * bw) as f64);
        }
    }
    Ok(out)
}

fn report(r: &LdpReport, mode: VerifyMode, injected: bool) -> CliResult {
    println!(
        "mode {}",
        if mode == VerifyMode::Scalar {
            "scalar"
        } else {
            "subflow"
        }
    );
    if injected {
        println!("inject_violation on (claimed budget halved)");
    }
    println!("{r}");
    if r.pass {
        Ok(())
    } else {
        Err(CliError::Tolerance(format!(
            "log ratio exceeds claimed budget {} by {:.4} beyond slack",
            r.claimed_epsilon,
            r.max_excess - r.claimed_epsilon
        )))
    }
}

pub fn verify_ldp(a: VerifyLdpArgs) -> CliResult {
    if a.trials == 0 {
        return Err(CliError::usage("--trials must be at least 1"));
    }
    let dim = match a.mode {
        VerifyMode::Scalar => 1,
        VerifyMode::Subflow => SUB_SHAPE.volume(),
    };
    let eps = match Epsilon::parse(&a.eps, dim)? {
        Epsilon::Finite(e) => e,
        Epsilon::Infinite => return Err(CliError::usage("the audit needs a finite budget")),
    };
    let claimed = if a.inject_violation { eps / 2.0 } else { eps };
    let range = match (&a.range, a.mode) {
        (Some(r), _) if r.len() != 2 => return Err(CliError::usage("--range takes LO,HI")),
        (Some(r), _) => BinRange::Fixed { lo: r[0], hi: r[1] },
        (None, VerifyMode::Scalar) => BinRange::Fixed { lo: -6.0, hi: 7.0 },
        (None, VerifyMode::Subflow) => BinRange::Auto,
    };
    let r = match a.mode {
        VerifyMode::Scalar => {
            if !(a.sensitivity > 0.0) {
                return Err(CliError::usage("--sensitivity must be positive"));
            }
            let mech = ScalarLaplace {
                sensitivity: a.sensitivity,
                epsilon: eps,
            };
            let bins = a.bins.unwrap_or(50);
            verify::verify_ldp(&mech, &0.0, &a.sensitivity, claimed, bins, range, a.trials, a.seed)?
        }
        VerifyMode::Subflow => {
            let model = match &a.model {
                Some(p) => util::load_model(p)?,
                None => FlowModel::random(FlowConfig::glow(SUB_SHAPE, 1, 2).with_hidden(8), a.seed)?,
            };
            if model.input_shape() != SUB_SHAPE {
                return Err(CliError::usage(format!(
                    "subflow mode needs a {SUB_SHAPE} model, checkpoint takes {}",
                    model.input_shape()
                )));
            }
            let train: Vec<ImageTensor> = (0..SUB_TRAIN)
                .map(|i| downsampled_toy(rng::derive(a.seed, i), i % 2 == 1))
                .collect::<CliResult<_>>()?;
            let latents = train
                .par_iter()
                .map(|x| model.forward(x).map(|(z, _)| z))
                .collect::<Result<Vec<_>, _>>()?;
            let params = PrivacyParams::from_latents(&latents, a.alpha, SensitivityMode::Clipped)?
                .with_epsilon(Epsilon::finite(eps)?);
            let mech = FlowMechanism {
                model: &model,
                params: &params,
                options: PrivatizeOptions::default(),
            };
            let bins = a.bins.unwrap_or(6);
            verify::verify_ldp(&mech, &train[0], &train[1], claimed, bins, range, a.trials, a.seed)?
        }
    };
    report(&r, a.mode, a.inject_violation)
}

#[derive(Args, Serialize)]
pub struct RoundtripArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Manifest of images to push through forward and inverse.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Largest allowed reconstruction error (max abs pixel).
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Largest allowed |forward logdet + inverse logdet|.
    #[arg(long, default_value_t = 1e-6)]
    pub logdet_tol: f64,
}

pub fn roundtrip(a: RoundtripArgs) -> CliResult {
    let model = util::load_model(&a.model)?;
    let manifest = util::load_manifest(&a.input)?;
    let images = manifest.load_images()?;
    let errs = images
        .par_iter()
        .map(|x| {
            let (z, fwd) = model.forward(x)?;
            let (y, inv) = model.inverse(&z)?;
            Ok((x.max_abs_diff(&y), (fwd + inv).abs()))
        })
        .collect::<Result<Vec<_>, flowpriv::FlowError>>()?;
    let max_err = errs.iter().map(|e| e.0).fold(0.0, f64::max);
    let max_ld = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    println!("images {}", errs.len());
    println!("max_roundtrip_error {max_err:.3e}");
    println!("max_logdet_sum {max_ld:.3e}");
    if !(max_err <= a.tol) {
        return Err(CliError::Tolerance(format!(
            "roundtrip error {max_err:.3e} exceeds {:.1e}",
            a.tol
        )));
    }
    if !(max_ld <= a.logdet_tol) {
        return Err(CliError::Tolerance(format!(
            "logdet mismatch {max_ld:.3e} exceeds {:.1e}",
            a.logdet_tol
        )));
    }
    println!("PASS");
    Ok(())
}
