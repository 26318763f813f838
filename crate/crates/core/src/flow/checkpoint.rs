//! Binary checkpoint format.
//!
//! ```text
//! "FDP1"                      magic
//! u16                         format version
//! payload:
//!   u32 H, u32 W, u32 C       input shape
//!   u32 levels, u32 depth, u32 hidden
//!   u8 coupling (0 additive, 1 affine), u8 permutation (0 reverse, 1 1x1 conv)
//!   str trained_on            (u32 byte length + UTF-8)
//!   u32 epochs_trained
//!   u32 layer count, then per layer:
//!     u8 kind, u32 level, kind-specific body
//! u32                         CRC-32 of the payload
//! ```
//!
//! All integers and `f64` arrays (`u32` length prefix) are little-endian.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::layers::{ActNorm, Coupling, CouplingKind, CouplingNet, InvConv};
use super::{FlowConfig, FlowError, FlowLayer, FlowModel, LayerOp, PermutationKind};
use crate::tensor::Shape;

pub const MAGIC: &[u8; 4] = b"FDP1";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    UnsupportedVersion(u16),
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("checkpoint inconsistent with its architecture: {0}")]
    Inconsistent(#[from] FlowError),
}

const KIND_SQUEEZE: u8 = 0;
const KIND_SPLIT: u8 = 1;
const KIND_ACTNORM: u8 = 2;
const KIND_INVCONV: u8 = 3;
const KIND_REVERSE: u8 = 4;
const KIND_COUPLING: u8 = 5;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("checkpoint field exceeds u32"));
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Absolute offset of `buf[0]` in the file, for error messages.
    base: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(self.base + self.buf.len()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize, CheckpointError> {
        Ok(self.u32()? as usize)
    }
    fn f64s(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = self.usize()?;
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or(CheckpointError::Truncated(self.base + self.pos))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.usize()?;
        let at = self.base + self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.malformed_at(at, "invalid UTF-8"))
    }
    fn malformed_at(&self, offset: usize, reason: &str) -> CheckpointError {
        CheckpointError::Malformed {
            offset,
            reason: reason.to_string(),
        }
    }
    fn offset(&self) -> usize {
        self.base + self.pos
    }
}

fn write_payload(model: &FlowModel, w: &mut Writer) {
    let cfg = model.config();
    let s = cfg.input_shape;
    w.usize(s.height);
    w.usize(s.width);
    w.usize(s.channels);
    w.usize(cfg.levels);
    w.usize(cfg.depth);
    w.usize(cfg.hidden);
    w.u8(match cfg.coupling {
        CouplingKind::Additive => 0,
        CouplingKind::Affine => 1,
    });
    w.u8(match cfg.permutation {
        PermutationKind::Reverse => 0,
        PermutationKind::InvConv => 1,
    });
    w.str(&model.trained_on);
    w.u32(model.epochs_trained);
    w.usize(model.layers().len());
    for layer in model.layers() {
        let kind = match &layer.op {
            LayerOp::Squeeze => KIND_SQUEEZE,
            LayerOp::Split => KIND_SPLIT,
            LayerOp::ActNorm(_) => KIND_ACTNORM,
            LayerOp::InvConv(_) => KIND_INVCONV,
            LayerOp::Reverse => KIND_REVERSE,
            LayerOp::Coupling(_) => KIND_COUPLING,
        };
        w.u8(kind);
        w.usize(layer.level);
        match &layer.op {
            LayerOp::ActNorm(a) => {
                w.u8(a.initialized as u8);
                w.f64s(&a.log_scale);
                w.f64s(&a.shift);
            }
            LayerOp::InvConv(c) => {
                w.usize(c.perm.len());
                for &p in &c.perm {
                    w.usize(p);
                }
                w.f64s(&c.sign);
                w.f64s(&c.lower);
                w.f64s(&c.upper);
                w.f64s(&c.log_s);
            }
            LayerOp::Coupling(c) => {
                w.usize(c.net.in_channels);
                w.usize(c.net.hidden);
                w.usize(c.net.out_channels);
                w.f64s(&c.net.w1);
                w.f64s(&c.net.b1);
                w.f64s(&c.net.w2);
                w.f64s(&c.net.b2);
            }
            LayerOp::Squeeze | LayerOp::Split | LayerOp::Reverse => {}
        }
    }
}

/// Serializes a model; identical models always give identical bytes.
pub fn to_bytes(model: &FlowModel) -> Vec<u8> {
    let mut payload = Writer(Vec::new());
    write_payload(model, &mut payload);
    let mut out = Vec::with_capacity(payload.0.len() + 10);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&payload.0);
    out.extend_from_slice(&crc32fast::hash(&payload.0).to_le_bytes());
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<FlowModel, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 6 + 4 {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let (payload, tail) = bytes[6..].split_at(bytes.len() - 10);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let mut r = Reader {
        buf: payload,
        pos: 0,
        base: 6,
    };
    let shape = Shape::new(r.usize()?, r.usize()?, r.usize()?);
    let (levels, depth, hidden) = (r.usize()?, r.usize()?, r.usize()?);
    let at = r.offset();
    let coupling = match r.u8()? {
        0 => CouplingKind::Additive,
        1 => CouplingKind::Affine,
        _ => return Err(r.malformed_at(at, "unknown coupling kind")),
    };
    let at = r.offset();
    let permutation = match r.u8()? {
        0 => PermutationKind::Reverse,
        1 => PermutationKind::InvConv,
        _ => return Err(r.malformed_at(at, "unknown permutation kind")),
    };
    let config = FlowConfig {
        input_shape: shape,
        levels,
        depth,
        coupling,
        permutation,
        hidden,
    };
    let trained_on = r.str()?;
    let epochs_trained = r.u32()?;
    let n_layers = r.usize()?;
    let mut layers = Vec::with_capacity(n_layers.min(1 << 16));
    for _ in 0..n_layers {
        let at = r.offset();
        let kind = r.u8()?;
        let level = r.usize()?;
        let op = match kind {
            KIND_SQUEEZE => LayerOp::Squeeze,
            KIND_SPLIT => LayerOp::Split,
            KIND_REVERSE => LayerOp::Reverse,
            KIND_ACTNORM => {
                let initialized = r.u8()? != 0;
                let log_scale = r.f64s()?;
                let shift = r.f64s()?;
                if log_scale.len() != shift.len() {
                    return Err(r.malformed_at(at, "actnorm scale/shift length mismatch"));
                }
                LayerOp::ActNorm(ActNorm {
                    log_scale,
                    shift,
                    initialized,
                })
            }
            KIND_INVCONV => {
                let n = r.usize()?;
                if n > payload.len() {
                    return Err(r.malformed_at(at, "implausible permutation length"));
                }
                let perm = (0..n).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
                let sign = r.f64s()?;
                let lower = r.f64s()?;
                let upper = r.f64s()?;
                let log_s = r.f64s()?;
                if sign.len() != n || log_s.len() != n || lower.len() != n * n || upper.len() != n * n {
                    return Err(r.malformed_at(at, "1x1 convolution tensor sizes disagree"));
                }
                LayerOp::InvConv(InvConv {
                    perm,
                    sign,
                    lower,
                    upper,
                    log_s,
                })
            }
            KIND_COUPLING => {
                let (cin, hid, cout) = (r.usize()?, r.usize()?, r.usize()?);
                let net = CouplingNet {
                    in_channels: cin,
                    hidden: hid,
                    out_channels: cout,
                    w1: r.f64s()?,
                    b1: r.f64s()?,
                    w2: r.f64s()?,
                    b2: r.f64s()?,
                };
                LayerOp::Coupling(Coupling { kind: coupling, net })
            }
            _ => return Err(r.malformed_at(at, "unknown layer kind")),
        };
        layers.push(FlowLayer { level, op });
    }
    if r.pos != payload.len() {
        return Err(r.malformed_at(r.offset(), "trailing bytes after layer list"));
    }
    Ok(FlowModel::from_parts(config, layers, trained_on, epochs_trained)?)
}

pub fn save(model: &FlowModel, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<FlowModel, CheckpointError> {
    from_bytes(&fs::read(path)?)
}
