//! IDX containers (the MNIST family): big-endian, `0 0 dtype rank` magic,
//! `rank` u32 dimensions, then the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::Array;

const UBYTE: u8 = 0x08;

/// Parses an in-memory IDX file with a u8 payload.
pub fn parse_idx(bytes: &[u8]) -> Result<Array<u8>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: 4,
            found: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::BadMagic { found: magic });
    }
    match bytes[2] {
        UBYTE => {}
        0x09 | 0x0B | 0x0C | 0x0D | 0x0E => {
            return Err(Error::UnsupportedDtype(format!(
                "idx type code {:#04x}",
                bytes[2]
            )))
        }
        _ => return Err(Error::BadMagic { found: magic }),
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(Error::MalformedHeader("idx rank is zero".into()));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Truncated {
            expected: header,
            found: bytes.len(),
        });
    }
    let shape: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::MalformedHeader(format!("idx shape {shape:?} overflows")))?;
    let payload = &bytes[header..];
    if payload.len() < numel {
        return Err(Error::Truncated {
            expected: header + numel,
            found: bytes.len(),
        });
    }
    if payload.len() > numel {
        return Err(Error::MalformedHeader(format!(
            "{} trailing bytes after idx payload",
            payload.len() - numel
        )));
    }
    Array::new(shape, payload.to_vec())
}

pub fn load_idx(path: &Path) -> Result<Array<u8>> {
    parse_idx(&fs::read(path)?)
}

pub fn encode_idx(a: &Array<u8>) -> Result<Vec<u8>> {
    let rank = u8::try_from(a.shape.len())
        .map_err(|_| Error::InvalidArgument("idx rank above 255".into()))?;
    let mut out = vec![0, 0, UBYTE, rank];
    for &d in &a.shape {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&a.data);
    Ok(out)
}

pub fn write_idx(path: &Path, a: &Array<u8>) -> Result<()> {
    Ok(fs::write(path, encode_idx(a)?)?)
}
