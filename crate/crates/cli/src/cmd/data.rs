use std::path::PathBuf;

use clap::Args;
use flowpriv::data::{self, SynthConfig};
use flowpriv::Shape;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::util;

#[derive(Args, Serialize)]
pub struct GenDataArgs {
    /// Output directory; receives one subdirectory and one manifest per split.
    #[arg(long)]
    pub out: PathBuf,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image shape, HxW.
    #[arg(long, default_value = "16x16", value_parser = util::parse_shape)]
    #[serde(serialize_with = "ser_shape")]
    pub shape: Shape,
    /// Image counts for train_normal, train_mixture and test_unknown.
    #[arg(long, default_value = "600,1000,400", value_delimiter = ',')]
    pub counts: Vec<usize>,
    /// Fraction of the smaller normal pool shared by the two training splits.
    #[arg(long, default_value_t = 0.8)]
    pub overlap: f64,
    /// Extra held-out normal images carrying a block marker (test_marked.tsv).
    #[arg(long, default_value_t = 0)]
    pub marked: usize,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

fn ser_shape<S: serde::Serializer>(s: &Shape, ser: S) -> Result<S::Ok, S::Error> {
    ser.serialize_str(&format!("{}x{}x{}", s.height, s.width, s.channels))
}

pub fn gen_data(a: GenDataArgs) -> CliResult {
    if a.counts.len() != 3 {
        return Err(CliError::usage("--counts takes three values"));
    }
    let cfg = SynthConfig {
        seed: a.seed,
        shape: a.shape,
        train_normal: a.counts[0],
        train_mixture: a.counts[1],
        test: a.counts[2],
        overlap: a.overlap,
        marked: a.marked,
    };
    // validate before touching the filesystem
    if cfg.train_normal + cfg.train_mixture + cfg.test == 0 {
        return Err(CliError::usage("empty dataset: all split counts are zero"));
    }
    util::ensure_writable_dir(&a.out, a.force)?;
    let manifests = data::write_dataset(&cfg, &a.out)?;
    util::write_resolved(&a.out, "gen-data", &a)?;
    for m in &manifests {
        println!("wrote {}", m.display());
    }
    let total = cfg.train_normal + cfg.train_mixture + cfg.test + cfg.marked;
    println!("{total} images, shape {}", cfg.shape);
    Ok(())
}
