//! Tab-separated dataset manifests.
//!
//! ```text
//! # split train_normal
//! # shape 16x16x1
//! # seed 42
//! train_normal/00000.pgm	normal	none	9265013785014758905
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::perturb::Perturbation;
use super::{pgm, DataError};
use crate::tensor::{ImageTensor, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn is_normal(self) -> bool {
        self == Label::Normal
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        })
    }
}

impl FromStr for Label {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(Label::Normal),
            "abnormal" => Ok(Label::Abnormal),
            _ => Err(DataError::Format(format!("unknown label {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    TrainNormal,
    TrainMixture,
    TestUnknown,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::TrainNormal, Split::TrainMixture, Split::TestUnknown];

    pub fn name(self) -> &'static str {
        match self {
            Split::TrainNormal => "train_normal",
            Split::TrainMixture => "train_mixture",
            Split::TestUnknown => "test_unknown",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| DataError::Format(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: Label,
    pub perturbation: Perturbation,
    /// Generator seed of the unperturbed image.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: Split,
    pub shape: Shape,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
}

fn parse_shape(s: &str) -> Option<Shape> {
    let dims: Vec<usize> = s.split('x').map(|p| p.parse().ok()).collect::<Option<_>>()?;
    match dims[..] {
        [h, w] => Some(Shape::new(h, w, 1)),
        [h, w, c] => Some(Shape::new(h, w, c)),
        _ => None,
    }
}

impl DatasetManifest {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# split {}\n# shape {}\n# seed {}\n", self.split, self.shape, self.seed);
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", e.path, e.label, e.perturbation, e.seed));
        }
        out
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self, DataError> {
        let mut split = None;
        let mut shape = None;
        let mut seed = None;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let bad = |what: &str| DataError::Format(format!("manifest line {lineno}: {what}"));
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let mut it = meta.split_whitespace();
                match (it.next(), it.next()) {
                    (Some("split"), Some(v)) => split = Some(v.parse::<Split>()?),
                    (Some("shape"), Some(v)) => shape = Some(parse_shape(v).ok_or_else(|| bad("bad shape"))?),
                    (Some("seed"), Some(v)) => seed = Some(v.parse().map_err(|_| bad("bad seed"))?),
                    _ => {}
                }
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad(&format!("expected 4 tab-separated columns, found {}", cols.len())));
            }
            entries.push(ManifestEntry {
                path: cols[0].to_string(),
                label: cols[1].parse()?,
                perturbation: cols[2].parse()?,
                seed: cols[3].parse().map_err(|_| bad("bad seed column"))?,
            });
        }
        let missing = |k: &str| DataError::Format(format!("manifest header lacks '# {k}'"));
        let m = DatasetManifest {
            split: split.ok_or_else(|| missing("split"))?,
            shape: shape.ok_or_else(|| missing("shape"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            entries,
            root,
        };
        if m.split == Split::TrainNormal && m.entries.iter().any(|e| e.label == Label::Abnormal) {
            return Err(DataError::Format(
                "train_normal manifest contains abnormal entries".into(),
            ));
        }
        Ok(m)
    }

    /// Reads a manifest and checks that every listed image exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, root)?;
        for e in &m.entries {
            let p = m.resolve(e);
            if !p.is_file() {
                return Err(DataError::Missing(p));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| DataError::io(path, e))
    }

    pub fn resolve(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.path)
    }

    pub fn load_image(&self, e: &ManifestEntry) -> Result<ImageTensor, DataError> {
        let x = pgm::read_pgm(self.resolve(e))?;
        if x.shape() != Shape::new(self.shape.height, self.shape.width, 1) || self.shape.channels != 1 {
            return Err(DataError::Format(format!(
                "{} has shape {}, manifest says {}",
                e.path,
                x.shape(),
                self.shape
            )));
        }
        Ok(x)
    }

    pub fn load_images(&self) -> Result<Vec<ImageTensor>, DataError> {
        self.entries.iter().map(|e| self.load_image(e)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::perturb::Rect;

    fn sample() -> DatasetManifest {
        DatasetManifest {
            split: Split::TestUnknown,
            shape: Shape::new(16, 16, 1),
            seed: 42,
            entries: vec![
                ManifestEntry {
                    path: "test_unknown/00000.pgm".into(),
                    label: Label::Normal,
                    perturbation: Perturbation::None,
                    seed: 7,
                },
                ManifestEntry {
                    path: "test_unknown/00001.pgm".into(),
                    label: Label::Abnormal,
                    perturbation: Perturbation::Marker {
                        rect: Rect::new(1, 1, 3, 3),
                        value: 255,
                    },
                    seed: u64::MAX,
                },
            ],
            root: PathBuf::new(),
        }
    }

    #[test]
    fn tsv_roundtrip() {
        let m = sample();
        let text = m.to_tsv();
        assert!(text.contains("test_unknown/00001.pgm\tabnormal\tmarker:1,1,3,3,255\t18446744073709551615\n"));
        assert_eq!(DatasetManifest::parse(&text, PathBuf::new()).unwrap(), m);
    }

    #[test]
    fn rejects_abnormal_in_normal_split() {
        let mut m = sample();
        m.split = Split::TrainNormal;
        assert!(DatasetManifest::parse(&m.to_tsv(), PathBuf::new()).is_err());
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(DatasetManifest::parse(
            "# split test_unknown\n# shape 8x8\n# seed 1\na\tnormal\n",
            PathBuf::new()
        )
        .is_err());
        assert!(DatasetManifest::parse("a\tnormal\tnone\t1\n", PathBuf::new()).is_err());
    }

    #[test]
    fn load_checks_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample();
        let path = dir.path().join("m.tsv");
        m.save(&path).unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(DataError::Missing(_))));
    }
}
