//! Binary PGM (`P5`, maxval 255) reading and writing.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::pixel;
use crate::tensor::{ImageTensor, Shape};

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed PGM header at byte {offset}: {reason}")]
    Header { offset: usize, reason: String },
    #[error("unsupported PGM maxval {maxval} at byte {offset} (only 255 is supported)")]
    Maxval { offset: usize, maxval: u32 },
    #[error("truncated PGM payload at byte {offset}: expected {expected} pixel bytes, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },
}

/// A decoded 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    /// Skips whitespace and `#` comments running to end of line.
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, PgmError> {
        self.skip_separators();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PgmError::Header {
                offset: start,
                reason: format!("expected {what}"),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| PgmError::Header {
                offset: start,
                reason: format!("{what} out of range"),
            })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Gray8, PgmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(PgmError::Header {
            offset: 0,
            reason: "missing P5 magic".into(),
        });
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(PgmError::Header {
            offset: 2,
            reason: "expected whitespace after magic".into(),
        });
    }
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval_at = {
        cur.skip_separators();
        cur.pos
    };
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(PgmError::Maxval {
            offset: maxval_at,
            maxval,
        });
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => {
            return Err(PgmError::Header {
                offset: cur.pos,
                reason: "expected a single whitespace byte before pixel data".into(),
            })
        }
    }
    if width == 0 || height == 0 {
        return Err(PgmError::Header {
            offset: 3,
            reason: "zero image dimension".into(),
        });
    }
    let expected = width * height;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(PgmError::Truncated {
            offset: cur.pos + payload.len(),
            expected,
            found: payload.len(),
        });
    }
    Ok(Gray8 {
        width,
        height,
        pixels: payload[..expected].to_vec(),
    })
}

pub fn encode(img: &Gray8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Reads a P5 file as a single-channel image of mid-bin values.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<ImageTensor, PgmError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| PgmError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let g = decode(&bytes)?;
    Ok(pixel::image_from_u8(Shape::new(g.height, g.width, 1), &g.pixels))
}

/// Writes a single-channel image, clamping and quantizing to 8 bits.
pub fn write_pgm(x: &ImageTensor, path: impl AsRef<Path>) -> Result<(), PgmError> {
    let s = x.shape();
    assert_eq!(s.channels, 1, "PGM holds single-channel images");
    let path = path.as_ref();
    let img = Gray8 {
        width: s.width,
        height: s.height,
        pixels: pixel::image_to_u8(x),
    };
    fs::write(path, encode(&img)).map_err(|source| PgmError::Io {
        path: path.display().to_string(),
        source,
    })
}
