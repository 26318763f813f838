//! Two-model likelihood-ratio anomaly scoring and rank-based evaluation.

pub mod plot;
pub mod utility;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

pub use utility::{utility_curve, UtilityConfig, UtilityRow, UtilityTable};

use crate::data::Label;
use crate::dp::DpError;
use crate::flow::{FlowError, FlowModel};
use crate::tensor::ImageTensor;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Dp(#[from] DpError),
}

/// log p_M0(x) − log p_M1(x); larger means more normal.
pub fn posterior_score(m0: &FlowModel, m1: &FlowModel, x: &ImageTensor) -> Result<f64, DetectError> {
    for m in [m0, m1] {
        if m.input_shape() != x.shape() {
            return Err(DetectError::Usage(format!(
                "image shape {} does not match model input {}",
                x.shape(),
                m.input_shape()
            )));
        }
    }
    Ok(m0.log_prob(x)? - m1.log_prob(x)?)
}

pub fn score_all(m0: &FlowModel, m1: &FlowModel, images: &[ImageTensor]) -> Result<Vec<f64>, DetectError> {
    images.par_iter().map(|x| posterior_score(m0, m1, x)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry {
    pub id: String,
    pub label: Label,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    pub entries: Vec<ScoreEntry>,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoreEntry>) -> Self {
        ScoreSet { entries }
    }

    pub fn from_parts(labels: &[Label], scores: &[f64]) -> Self {
        ScoreSet::new(
            labels
                .iter()
                .zip(scores)
                .enumerate()
                .map(|(i, (&label, &score))| ScoreEntry {
                    id: i.to_string(),
                    label,
                    score,
                })
                .collect(),
        )
    }

    fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let mut normal = Vec::new();
        let mut abnormal = Vec::new();
        for e in &self.entries {
            match e.label {
                Label::Normal => normal.push(e.score),
                Label::Abnormal => abnormal.push(e.score),
            }
        }
        (normal, abnormal)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            writeln!(out, "{}\t{}\t{}", e.id, e.label, e.score).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, DetectError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: &str| DetectError::Format(format!("score line {}: {m}", i + 1));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(bad("expected id, label and score"));
            }
            let score: f64 = cols[2].parse().map_err(|_| bad("bad score"))?;
            if !score.is_finite() {
                return Err(bad("non-finite score"));
            }
            entries.push(ScoreEntry {
                id: cols[0].to_string(),
                label: cols[1].parse().map_err(|_| bad("bad label"))?,
                score,
            });
        }
        Ok(ScoreSet { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DetectError> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| DetectError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DetectError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DetectError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

fn require_both(n: usize, a: usize) -> Result<(), DetectError> {
    if n == 0 || a == 0 {
        return Err(DetectError::Usage(format!(
            "AUC needs both labels; got {n} normal and {a} abnormal scores"
        )));
    }
    Ok(())
}

/// P(random normal outranks random abnormal), ties counted one half.
/// Sorts once; O((n + m) log(n + m)).
pub fn auc(scores: &ScoreSet) -> Result<f64, DetectError> {
    let (normal, abnormal) = scores.split();
    require_both(normal.len(), abnormal.len())?;
    let mut all: Vec<(f64, bool)> = normal
        .iter()
        .map(|&s| (s, true))
        .chain(abnormal.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Walk tie groups in ascending order: each normal earns one per abnormal
    // strictly below and a half per abnormal tied with it.
    let mut wins = 0.0;
    let mut abnormal_below = 0usize;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let n_norm = all[i..j].iter().filter(|e| e.1).count();
        let n_abn = j - i - n_norm;
        wins += n_norm as f64 * (abnormal_below as f64 + 0.5 * n_abn as f64);
        abnormal_below += n_abn;
        i = j;
    }
    Ok(wins / (normal.len() as f64 * abnormal.len() as f64))
}

/// ROC points `(false positive rate, true positive rate)` treating
/// "normal" as the positive class, one point per distinct threshold,
/// from (0, 0) to (1, 1).
pub fn roc_points(scores: &ScoreSet) -> Result<Vec<(f64, f64)>, DetectError> {
    let (normal, abnormal) = scores.split();
    require_both(normal.len(), abnormal.len())?;
    let mut all: Vec<(f64, bool)> = scores.entries.iter().map(|e| (e.score, e.label.is_normal())).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (normal.len() as f64, abnormal.len() as f64);
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / nn, tp as f64 / np));
    }
    Ok(pts)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(normal: &[f64], abnormal: &[f64]) -> ScoreSet {
        let labels: Vec<Label> = normal
            .iter()
            .map(|_| Label::Normal)
            .chain(abnormal.iter().map(|_| Label::Abnormal))
            .collect();
        let scores: Vec<f64> = normal.iter().chain(abnormal).copied().collect();
        ScoreSet::from_parts(&labels, &scores)
    }

    #[test]
    fn hand_examples() {
        assert_eq!(auc(&set(&[3.0, 2.0], &[1.0, 2.0])).unwrap(), 0.875);
        assert_eq!(auc(&set(&[5.0, 6.0], &[1.0, 2.0])).unwrap(), 1.0);
        assert_eq!(auc(&set(&[1.0, 1.0], &[1.0, 1.0, 1.0])).unwrap(), 0.5);
        assert!(matches!(auc(&set(&[1.0], &[])), Err(DetectError::Usage(_))));
    }

    #[test]
    fn roc_area_matches_auc() {
        let s = set(&[3.0, 2.0, 0.5, 2.0], &[1.0, 2.0, -1.0]);
        let pts = roc_points(&s).unwrap();
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
        assert!((trapezoid_area(&pts) - auc(&s).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn tsv_roundtrip() {
        let s = set(&[0.1, -3.25e-5], &[1e10]);
        assert_eq!(ScoreSet::parse(&s.to_tsv()).unwrap(), s);
        assert!(ScoreSet::parse("a\tnormal\tNaN\n").is_err());
        assert!(ScoreSet::parse("a\tcat\t1\n").is_err());
    }
}
