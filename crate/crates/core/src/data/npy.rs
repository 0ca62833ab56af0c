//! `.npy` version 1.0 reader and writer for C-ordered u8, f32 and f64 arrays.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::Array;

const MAGIC: &[u8; 8] = b"\x93NUMPY\x01\x00";

#[derive(Clone, Debug, PartialEq)]
pub enum NpyArray {
    U8(Array<u8>),
    F32(Array<f32>),
    F64(Array<f64>),
}

impl NpyArray {
    pub fn shape(&self) -> &[usize] {
        match self {
            NpyArray::U8(a) => &a.shape,
            NpyArray::F32(a) => &a.shape,
            NpyArray::F64(a) => &a.shape,
        }
    }

    fn descr(&self) -> &'static str {
        match self {
            NpyArray::U8(_) => "|u1",
            NpyArray::F32(_) => "<f4",
            NpyArray::F64(_) => "<f8",
        }
    }

    pub fn into_u8(self) -> Result<Array<u8>> {
        match self {
            NpyArray::U8(a) => Ok(a),
            other => Err(Error::UnsupportedDtype(format!(
                "expected u8 array, found {}",
                other.descr()
            ))),
        }
    }
}

struct Header {
    descr: String,
    fortran: bool,
    shape: Vec<usize>,
}

fn dict_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}':");
    let start = header
        .find(&pat)
        .ok_or_else(|| Error::MalformedHeader(format!("npy header lacks '{key}'")))?
        + pat.len();
    Ok(header[start..].trim_start())
}

fn parse_header(text: &str) -> Result<Header> {
    let text = text.trim();
    if !text.starts_with('{') || !text.ends_with('}') {
        return Err(Error::MalformedHeader("npy header is not a dict".into()));
    }
    let descr = dict_value(text, "descr")?;
    let descr = descr
        .strip_prefix('\'')
        .and_then(|d| d.split('\'').next())
        .ok_or_else(|| Error::MalformedHeader("descr is not a string".into()))?
        .to_string();
    let fortran = dict_value(text, "fortran_order")?;
    let fortran = if fortran.starts_with("False") {
        false
    } else if fortran.starts_with("True") {
        true
    } else {
        return Err(Error::MalformedHeader("fortran_order is not a bool".into()));
    };
    let shape = dict_value(text, "shape")?;
    let inner = shape
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| Error::MalformedHeader("shape is not a tuple".into()))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::MalformedHeader(format!("bad dimension {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Header {
        descr,
        fortran,
        shape,
    })
}

/// Parses an in-memory `.npy` file.
pub fn parse_npy(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 10 {
        return Err(Error::Truncated {
            expected: 10,
            found: bytes.len(),
        });
    }
    if &bytes[..6] != b"\x93NUMPY" {
        return Err(Error::BadMagic {
            found: u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]),
        });
    }
    if bytes[6..8] != [1, 0] {
        return Err(Error::MalformedHeader(format!(
            "npy version {}.{} not supported",
            bytes[6], bytes[7]
        )));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let end = 10 + hlen;
    if bytes.len() < end {
        return Err(Error::Truncated {
            expected: end,
            found: bytes.len(),
        });
    }
    let text = std::str::from_utf8(&bytes[10..end])
        .map_err(|_| Error::MalformedHeader("npy header is not ASCII".into()))?;
    let h = parse_header(text)?;
    if h.fortran {
        return Err(Error::UnsupportedLayout("fortran_order arrays".into()));
    }
    let width = match h.descr.as_str() {
        "|u1" | "u1" | "<u1" => 1,
        "<f4" => 4,
        "<f8" => 8,
        other => return Err(Error::UnsupportedDtype(other.to_string())),
    };
    let numel = h
        .shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| Error::MalformedHeader(format!("shape {:?} overflows", h.shape)))?;
    let payload = &bytes[end..];
    if payload.len() != numel {
        return Err(if payload.len() < numel {
            Error::Truncated {
                expected: end + numel,
                found: bytes.len(),
            }
        } else {
            Error::MalformedHeader(format!(
                "payload of {} bytes does not match shape {:?}",
                payload.len(),
                h.shape
            ))
        });
    }
    let shape = if h.shape.is_empty() { vec![1] } else { h.shape };
    Ok(match width {
        1 => NpyArray::U8(Array::new(shape, payload.to_vec())?),
        4 => NpyArray::F32(Array::new(
            shape,
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )?),
        _ => NpyArray::F64(Array::new(
            shape,
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        )?),
    })
}

pub fn load_npy(path: &Path) -> Result<NpyArray> {
    parse_npy(&fs::read(path)?)
}

pub fn encode_npy(a: &NpyArray) -> Vec<u8> {
    let dims: Vec<String> = a.shape().iter().map(usize::to_string).collect();
    let shape = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {shape}, }}",
        a.descr()
    );
    let unpadded = MAGIC.len() + 2 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match a {
        NpyArray::U8(x) => out.extend_from_slice(&x.data),
        NpyArray::F32(x) => x
            .data
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        NpyArray::F64(x) => x
            .data
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub fn write_npy(path: &Path, a: &NpyArray) -> Result<()> {
    Ok(fs::write(path, encode_npy(a))?)
}
