use std::fs;
use std::path::{Path, PathBuf};

use flowpriv::data::DatasetManifest;
use flowpriv::flow::checkpoint;
use flowpriv::{FlowModel, Shape};
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Writes `<stem>.config.json` into `dir`, the fully resolved settings of a run.
pub fn write_resolved(dir: &Path, stem: &str, config: &impl Serialize) -> CliResult<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    let path = dir.join(format!("{stem}.config.json"));
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

/// Directory holding `path`, for files written beside an output file.
pub fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

pub fn load_model(path: &Path) -> CliResult<FlowModel> {
    checkpoint::load(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

/// CRC-32 of a whole checkpoint file; ties a params sidecar to one model.
pub fn checkpoint_crc(path: &Path) -> CliResult<u32> {
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(crc32fast::hash(&bytes))
}

/// Accepts a manifest file, or a directory holding exactly one `.tsv`.
pub fn load_manifest(path: &Path) -> CliResult<DatasetManifest> {
    let file = if path.is_dir() {
        let mut tsv: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "tsv") && !p.to_string_lossy().ends_with("scores.tsv"))
            .collect();
        tsv.sort();
        match tsv.len() {
            1 => tsv.pop().unwrap(),
            0 => return Err(CliError::usage(format!("{} holds no manifest (.tsv)", path.display()))),
            _ => {
                return Err(CliError::usage(format!(
                    "{} holds several manifests; pass one explicitly",
                    path.display()
                )))
            }
        }
    } else {
        path.to_path_buf()
    };
    Ok(DatasetManifest::load(&file)?)
}

pub fn parse_shape(s: &str) -> Result<Shape, String> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("bad shape {s:?}, expected HxW or HxWxC"))?;
    match dims[..] {
        [h, w] => Ok(Shape::new(h, w, 1)),
        [h, w, c] => Ok(Shape::new(h, w, c)),
        _ => Err(format!("bad shape {s:?}, expected HxW or HxWxC")),
    }
}

pub fn ensure_writable_dir(dir: &Path, force: bool) -> CliResult {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::usage(format!(
                "{} exists and is not a directory",
                dir.display()
            )));
        }
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::usage(format!(
                "{} is not empty; pass --force to write into it",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))
}

pub fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            fs::create_dir_all(p)?;
        }
    }
    fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}
