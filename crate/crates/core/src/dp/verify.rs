//! Histogram audit of the local privacy bound on low-dimensional mechanisms.
//!
//! Each input is released `trials` times; the outputs are binned on a grid
//! with `bins` cells per axis (out-of-range draws fold into the edge cells,
//! which keeps every cell a valid event). For every cell with at least
//! [`MIN_COUNT`] hits under both inputs the log count ratio is compared with
//! the claimed budget, allowing a three-sigma slack of
//! `3 · sqrt(1/n_a + 1/n_b)` (delta-method standard error of a log ratio of
//! two independent counts).

use std::fmt;

use rayon::prelude::*;

use super::{laplace_sample, privatize_image, DpError, PrivacyParams, PrivatizeOptions};
use crate::flow::FlowModel;
use crate::rng::{self, ChaCha8Rng};
use crate::tensor::ImageTensor;

pub const MIN_COUNT: u64 = 25;
pub const MAX_DIM: usize = 4;
const CHUNK: usize = 8192;
const PILOT: usize = 20_000;

pub trait Mechanism: Sync {
    type Input: Sync;
    fn output_dim(&self) -> usize;
    fn release(&self, x: &Self::Input, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, DpError>;
}

/// x + Lap(0, Δ/ε).
#[derive(Debug, Clone, Copy)]
pub struct ScalarLaplace {
    pub sensitivity: f64,
    pub epsilon: f64,
}

impl Mechanism for ScalarLaplace {
    type Input = f64;

    fn output_dim(&self) -> usize {
        1
    }

    fn release(&self, x: &f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, DpError> {
        Ok(vec![x + laplace_sample(rng, self.sensitivity / self.epsilon)])
    }
}

/// The full latent pipeline on a flow with at most four elements.
pub struct FlowMechanism<'a> {
    pub model: &'a FlowModel,
    pub params: &'a PrivacyParams,
    pub options: PrivatizeOptions,
}

impl Mechanism for FlowMechanism<'_> {
    type Input = ImageTensor;

    fn output_dim(&self) -> usize {
        self.model.latent_dim()
    }

    fn release(&self, x: &ImageTensor, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, DpError> {
        use rand::Rng;
        let (xt, _) = privatize_image(self.model, x, self.params, self.options, rng.gen())?;
        Ok(xt.into_data())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BinRange {
    /// Same interval on every axis.
    Fixed { lo: f64, hi: f64 },
    /// Per-axis 0.1% to 99.9% quantiles of a pooled pilot run.
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdpReport {
    pub claimed_epsilon: f64,
    pub trials: usize,
    pub bins_per_axis: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Largest |log ratio| over included cells.
    pub max_log_ratio: f64,
    /// Slack of the cell attaining `max_log_ratio`.
    pub slack_at_max: f64,
    /// Largest |log ratio| − slack over included cells.
    pub max_excess: f64,
    pub included_bins: usize,
    pub excluded_bins: usize,
    pub pass: bool,
}

impl fmt::Display for LdpReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "claimed_epsilon {}", self.claimed_epsilon)?;
        writeln!(f, "trials {} bins_per_axis {}", self.trials, self.bins_per_axis)?;
        writeln!(f, "max_log_ratio {:.6}", self.max_log_ratio)?;
        writeln!(f, "slack_at_max {:.6}", self.slack_at_max)?;
        writeln!(f, "max_excess_over_slack {:.6}", self.max_excess)?;
        writeln!(
            f,
            "bins included {} excluded {} (fewer than {MIN_COUNT} counts)",
            self.included_bins, self.excluded_bins
        )?;
        write!(f, "{}", if self.pass { "PASS" } else { "FAIL" })
    }
}

fn sample_chunks<'a, M: Mechanism>(
    mech: &'a M,
    x: &'a M::Input,
    n: usize,
    seed: u64,
) -> impl IndexedParallelIterator<Item = Result<Vec<f64>, DpError>> + 'a {
    let chunks = n.div_ceil(CHUNK);
    (0..chunks).into_par_iter().map(move |c| {
        let len = CHUNK.min(n - c * CHUNK);
        let mut r = rng::seeded(rng::derive(seed, c as u64));
        let mut out = Vec::with_capacity(len * mech.output_dim());
        for _ in 0..len {
            out.extend(mech.release(x, &mut r)?);
        }
        Ok(out)
    })
}

fn histogram<M: Mechanism>(
    mech: &M,
    x: &M::Input,
    trials: usize,
    seed: u64,
    lo: &[f64],
    hi: &[f64],
    bins: usize,
) -> Result<Vec<u64>, DpError> {
    let dim = lo.len();
    let cells = bins.pow(dim as u32);
    sample_chunks(mech, x, trials, seed)
        .map(|chunk| {
            let chunk = chunk?;
            let mut h = vec![0u64; cells];
            for point in chunk.chunks_exact(dim) {
                let mut idx = 0usize;
                for d in 0..dim {
                    let t = (point[d] - lo[d]) / (hi[d] - lo[d]) * bins as f64;
                    let b = if t.is_nan() {
                        0
                    } else {
                        (t.floor().max(0.0) as usize).min(bins - 1)
                    };
                    idx = idx * bins + b;
                }
                h[idx] += 1;
            }
            Ok(h)
        })
        .try_reduce(
            || vec![0u64; cells],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                Ok(a)
            },
        )
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

#[allow(clippy::too_many_arguments)]
pub fn verify_ldp<M: Mechanism>(
    mech: &M,
    x_a: &M::Input,
    x_b: &M::Input,
    claimed_epsilon: f64,
    bins: usize,
    range: BinRange,
    trials: usize,
    seed: u64,
) -> Result<LdpReport, DpError> {
    if trials == 0 {
        return Err(DpError::Usage("trials must be at least 1".into()));
    }
    if bins < 2 {
        return Err(DpError::Usage("need at least 2 bins per axis".into()));
    }
    if !(claimed_epsilon > 0.0) {
        return Err(DpError::Usage(format!(
            "claimed budget must be positive, got {claimed_epsilon}"
        )));
    }
    let dim = mech.output_dim();
    if dim == 0 || dim > MAX_DIM {
        return Err(DpError::Usage(format!(
            "histogram audit supports 1..={MAX_DIM} output dimensions, mechanism has {dim}"
        )));
    }
    let (lo, hi) = match range {
        BinRange::Fixed { lo, hi } if hi > lo => (vec![lo; dim], vec![hi; dim]),
        BinRange::Fixed { lo, hi } => return Err(DpError::Usage(format!("empty bin range [{lo}, {hi}]"))),
        BinRange::Auto => {
            let pilot_seed = rng::derive(seed, 2);
            let mut pooled = Vec::new();
            for (i, x) in [x_a, x_b].into_iter().enumerate() {
                for c in sample_chunks(mech, x, PILOT, rng::derive(pilot_seed, i as u64)).collect::<Vec<_>>() {
                    pooled.extend(c?);
                }
            }
            let mut lo = Vec::with_capacity(dim);
            let mut hi = Vec::with_capacity(dim);
            for d in 0..dim {
                let mut axis: Vec<f64> = pooled.iter().skip(d).step_by(dim).copied().collect();
                axis.sort_by(f64::total_cmp);
                let (a, b) = (quantile(&axis, 0.001), quantile(&axis, 0.999));
                let pad = if b > a { 0.0 } else { 1e-9 };
                lo.push(a - pad);
                hi.push(b + pad);
            }
            (lo, hi)
        }
    };
    let ha = histogram(mech, x_a, trials, rng::derive(seed, 0), &lo, &hi, bins)?;
    let hb = histogram(mech, x_b, trials, rng::derive(seed, 1), &lo, &hi, bins)?;

    let mut max_log_ratio = 0.0f64;
    let mut slack_at_max = 0.0;
    let mut max_excess = f64::NEG_INFINITY;
    let (mut included, mut excluded) = (0, 0);
    for (&na, &nb) in ha.iter().zip(&hb) {
        if na < MIN_COUNT || nb < MIN_COUNT {
            if na + nb > 0 {
                excluded += 1;
            }
            continue;
        }
        included += 1;
        let (fa, fb) = (na as f64, nb as f64);
        let lr = (fa / fb).ln().abs();
        let slack = 3.0 * (1.0 / fa + 1.0 / fb).sqrt();
        if lr > max_log_ratio {
            max_log_ratio = lr;
            slack_at_max = slack;
        }
        max_excess = max_excess.max(lr - slack);
    }
    if included == 0 {
        return Err(DpError::Usage(format!(
            "no histogram cell reached {MIN_COUNT} counts under both inputs; raise trials or lower bins"
        )));
    }
    Ok(LdpReport {
        claimed_epsilon,
        trials,
        bins_per_axis: bins,
        lo,
        hi,
        max_log_ratio,
        slack_at_max,
        max_excess,
        included_bins: included,
        excluded_bins: excluded,
        pass: max_excess <= claimed_epsilon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_show_no_ratio() {
        let m = ScalarLaplace {
            sensitivity: 1.0,
            epsilon: 1.0,
        };
        let r = verify_ldp(
            &m,
            &0.0,
            &0.0,
            0.05,
            20,
            BinRange::Fixed { lo: -5.0, hi: 5.0 },
            200_000,
            4,
        )
        .unwrap();
        assert!(r.max_excess <= 0.0, "{r}");
        assert!(r.pass);
    }

    #[test]
    fn rejects_bad_arguments() {
        let m = ScalarLaplace {
            sensitivity: 1.0,
            epsilon: 1.0,
        };
        let range = BinRange::Fixed { lo: -6.0, hi: 7.0 };
        assert!(matches!(
            verify_ldp(&m, &0.0, &1.0, 1.0, 50, range.clone(), 0, 0),
            Err(DpError::Usage(_))
        ));
        assert!(matches!(
            verify_ldp(&m, &0.0, &1.0, 1.0, 1, range, 10, 0),
            Err(DpError::Usage(_))
        ));
    }

    #[test]
    fn chunked_sampling_is_deterministic() {
        let m = ScalarLaplace {
            sensitivity: 1.0,
            epsilon: 2.0,
        };
        let a = verify_ldp(&m, &0.0, &1.0, 2.0, 30, BinRange::Auto, 50_000, 8).unwrap();
        let b = verify_ldp(&m, &0.0, &1.0, 2.0, 30, BinRange::Auto, 50_000, 8).unwrap();
        assert_eq!(a, b);
    }
}
