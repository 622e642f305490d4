//! NPY v1.0/v2.0 tensor files.
//!
//! Only C-order little-endian f32/f64 payloads are accepted. Readers
//! widen f32 to the in-memory f64 tensor exactly; writers emit either
//! dtype. Writing then reading an f64 tensor is a bitwise round trip.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Payload element type of a tensor file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NpyDtype {
    F32,
    F64,
}

impl NpyDtype {
    fn descr(self) -> &'static str {
        match self {
            NpyDtype::F32 => "<f4",
            NpyDtype::F64 => "<f8",
        }
    }

    fn item_size(self) -> usize {
        match self {
            NpyDtype::F32 => 4,
            NpyDtype::F64 => 8,
        }
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|reason| Error::format(path, reason))
}

fn parse(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err("not an NPY file (bad magic)".into());
    }
    let major = bytes[6];
    let (header_len, header_start) = match major {
        1 => {
            let n = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
            (n, 10)
        }
        2 => {
            if bytes.len() < 12 {
                return Err("truncated v2 header length".into());
            }
            let n = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
            (n, 12)
        }
        v => return Err(format!("unsupported NPY major version {v}")),
    };
    let header_end = header_start + header_len;
    if bytes.len() < header_end {
        return Err("truncated header".into());
    }
    let header = std::str::from_utf8(&bytes[header_start..header_end])
        .map_err(|_| "header is not ASCII".to_string())?;

    let descr = dict_str(header, "descr")?;
    let dtype = match descr.as_str() {
        "<f4" => NpyDtype::F32,
        "<f8" => NpyDtype::F64,
        other => return Err(format!("unsupported dtype {other:?} (want <f4 or <f8)")),
    };
    match dict_bool(header, "fortran_order")? {
        false => {}
        true => return Err("Fortran-order payloads are not supported".into()),
    }
    let shape = dict_shape(header)?;

    let count: usize = shape.iter().product();
    let payload = &bytes[header_end..];
    let want = count * dtype.item_size();
    if payload.len() < want {
        return Err(format!(
            "payload short: want {} bytes, got {}",
            want,
            payload.len()
        ));
    }

    let mut data = Vec::with_capacity(count);
    match dtype {
        NpyDtype::F32 => {
            for chunk in payload[..want].chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        NpyDtype::F64 => {
            for chunk in payload[..want].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

fn dict_str(header: &str, key: &str) -> std::result::Result<String, String> {
    let pat = format!("'{key}':");
    let at = header
        .find(&pat)
        .ok_or_else(|| format!("header missing {key:?}"))?;
    let rest = &header[at + pat.len()..];
    let open = rest
        .find('\'')
        .ok_or_else(|| format!("malformed {key:?} value"))?;
    let rest = &rest[open + 1..];
    let close = rest
        .find('\'')
        .ok_or_else(|| format!("malformed {key:?} value"))?;
    Ok(rest[..close].to_string())
}

fn dict_bool(header: &str, key: &str) -> std::result::Result<bool, String> {
    let pat = format!("'{key}':");
    let at = header
        .find(&pat)
        .ok_or_else(|| format!("header missing {key:?}"))?;
    let rest = header[at + pat.len()..].trim_start();
    if rest.starts_with("True") {
        Ok(true)
    } else if rest.starts_with("False") {
        Ok(false)
    } else {
        Err(format!("malformed {key:?} value"))
    }
}

fn dict_shape(header: &str) -> std::result::Result<Vec<usize>, String> {
    let at = header
        .find("'shape':")
        .ok_or_else(|| "header missing 'shape'".to_string())?;
    let rest = &header[at + "'shape':".len()..];
    let open = rest
        .find('(')
        .ok_or_else(|| "malformed shape".to_string())?;
    let close = rest[open..]
        .find(')')
        .ok_or_else(|| "malformed shape".to_string())?
        + open;
    let inner = &rest[open + 1..close];
    let mut shape = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        shape.push(
            part.parse::<usize>()
                .map_err(|_| format!("bad shape entry {part:?}"))?,
        );
    }
    Ok(shape)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_tensor_as(t, path, NpyDtype::F64)
}

pub fn write_tensor_as(t: &Tensor, path: impl AsRef<Path>, dtype: NpyDtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(t, dtype);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn encode(t: &Tensor, dtype: NpyDtype) -> Vec<u8> {
    let shape_str = match t.shape().len() {
        0 => "()".to_string(),
        1 => format!("({},)", t.shape()[0]),
        _ => format!(
            "({})",
            t.shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        dtype.descr(),
        shape_str
    );
    // Pad so that magic + version + length + header is a multiple of 64
    // and the header ends with a newline, as numpy writes it.
    let unpadded = 10 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.push_str(&" ".repeat(pad));
    header.push('\n');

    let mut out = Vec::with_capacity(10 + header.len() + t.len() * dtype.item_size());
    out.extend_from_slice(MAGIC);
    out.push(1);
    out.push(0);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match dtype {
        NpyDtype::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        NpyDtype::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}
