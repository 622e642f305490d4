//! Middlebury `.flo` optical flow files.
//!
//! Layout: f32 magic 202021.25, i32 width, i32 height, then row-major
//! interleaved (u, v) f32 pairs. Components with magnitude >= 1e9 are the
//! Middlebury "unknown flow" sentinel; readers surface them as occluded.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::FlowField;

const MAGIC: f32 = 202021.25;
const UNKNOWN_FLOW: f64 = 1e9;

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|reason| Error::format(path, reason))
}

fn parse(bytes: &[u8]) -> std::result::Result<FlowField, String> {
    if bytes.len() < 12 {
        return Err("not a .flo file (too short)".into());
    }
    let magic = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if magic != MAGIC {
        return Err(format!("not a .flo file (magic {magic}, want {MAGIC})"));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 {
        return Err(format!("bad dimensions {width}x{height}"));
    }
    let (w, h) = (width as usize, height as usize);
    let want = w * h * 2 * 4;
    let payload = &bytes[12..];
    if payload.len() < want {
        return Err(format!(
            "payload short: want {} bytes, got {}",
            want,
            payload.len()
        ));
    }

    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    let mut occlusion = vec![0u8; w * h];
    for (i, pair) in payload[..want].chunks_exact(8).enumerate() {
        let uu = f32::from_le_bytes(pair[0..4].try_into().unwrap()) as f64;
        let vv = f32::from_le_bytes(pair[4..8].try_into().unwrap()) as f64;
        if uu.abs() >= UNKNOWN_FLOW || vv.abs() >= UNKNOWN_FLOW {
            occlusion[i] = 1;
        }
        u.push(uu);
        v.push(vv);
    }
    FlowField::with_occlusion(h, w, u, v, occlusion).map_err(|e| e.to_string())
}

/// Write `(u, v)` as f32 pairs. The occlusion map is derived data and is
/// not part of the format.
pub fn write_flo(field: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (field.height(), field.width());
    let mut out = Vec::with_capacity(12 + h * w * 8);
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for i in 0..h * w {
        out.extend_from_slice(&(field.u()[i] as f32).to_le_bytes());
        out.extend_from_slice(&(field.v()[i] as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("zero.flo");
        let field = FlowField::zero(4, 4);
        write_flo(&field, &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        let back = read_flo(&p).unwrap();
        assert_eq!(back.u(), field.u());
        assert_eq!(back.v(), field.v());
        write_flo(&back, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn constant_flow_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.flo");
        let field = FlowField::constant(3, 5, 1.0, 0.0);
        write_flo(&field, &p).unwrap();
        let back = read_flo(&p).unwrap();
        assert_eq!(back.u(), field.u());
        assert_eq!(back.v(), field.v());
        assert!(back.occlusion().iter().all(|&o| o == 0));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.flo");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0.0f32.to_le_bytes());
        bytes.extend_from_slice(&1i32.to_le_bytes());
        bytes.extend_from_slice(&1i32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 8]);
        std::fs::write(&p, &bytes).unwrap();
        let err = read_flo(&p).unwrap_err().to_string();
        assert!(err.contains("not a .flo file"), "{err}");
    }

    #[test]
    fn unknown_flow_sentinel_marks_occlusion() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.flo");
        let mut field = FlowField::zero(1, 2);
        field.u_mut()[1] = 1e9;
        write_flo(&field, &p).unwrap();
        let back = read_flo(&p).unwrap();
        assert_eq!(back.occlusion(), &[0, 1]);
    }
}
