//! Binary raster formats and JSON sidecars.
//!
//! VDR1 layout (little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 0..4  | magic `VDR1` |
//! | 4..8  | width, u32 |
//! | 8..12 | height, u32 |
//! | 12    | domain flag, 0 = metric depth, 1 = inverse depth |
//! | 13..16 | zero padding |
//! | 16..  | `height * width` f32 values, row-major |
//! | then  | `height * width` u8 mask, 1 = valid |
//!
//! VDR2 is identical except for the magic and two interleaved f32 channels
//! per pixel (the flow vector `(du, dv)`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::frame::{CameraIntrinsics, Domain, FlowField, Frame, Pose};

const HEADER_LEN: usize = 16;

fn header(magic: &[u8; 4], width: usize, height: usize, flag: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.push(flag);
    out.extend_from_slice(&[0, 0, 0]);
    out
}

struct Parsed<'a> {
    width: usize,
    height: usize,
    flag: u8,
    body: &'a [u8],
}

fn parse_header<'a>(bytes: &'a [u8], magic: &[u8; 4], channels: usize, path: &Path) -> Result<Parsed<'a>> {
    if bytes.len() < HEADER_LEN || &bytes[0..4] != magic {
        return Err(Error::format(path, format!("missing {} magic", String::from_utf8_lossy(magic))));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let flag = bytes[12];
    let n = width * height;
    let expected = HEADER_LEN + n * 4 * channels + n;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes for {width}x{height}, found {}", bytes.len()),
        ));
    }
    Ok(Parsed {
        width,
        height,
        flag,
        body: &bytes[HEADER_LEN..],
    })
}

fn read_f32(body: &[u8], i: usize) -> f64 {
    f32::from_le_bytes(body[4 * i..4 * i + 4].try_into().unwrap()) as f64
}

/// Encodes a frame as VDR1. Invalid pixels are written as 0.
pub fn encode_vdr1<D: Domain>(frame: &Frame<D>) -> Vec<u8> {
    let mut out = header(b"VDR1", frame.width(), frame.height(), D::FLAG);
    for (&v, &m) in frame.values().iter().zip(frame.mask()) {
        let v = if m { v as f32 } else { 0.0 };
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(frame.mask().iter().map(|&m| m as u8));
    out
}

pub fn decode_vdr1<D: Domain>(bytes: &[u8], path: &Path) -> Result<Frame<D>> {
    let p = parse_header(bytes, b"VDR1", 1, path)?;
    if p.flag != D::FLAG {
        return Err(Error::format(
            path,
            format!("domain flag {} does not match expected {} depth", p.flag, D::NAME),
        ));
    }
    let n = p.width * p.height;
    let values = (0..n).map(|i| read_f32(p.body, i)).collect();
    let mask = p.body[4 * n..].iter().map(|&b| b != 0).collect();
    Frame::new(p.width, p.height, values, mask).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads the domain flag of a VDR1 file without decoding the body.
pub fn peek_vdr1_domain(path: &Path) -> Result<u8> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN || &bytes[0..4] != b"VDR1" {
        return Err(Error::format(path, "missing VDR1 magic"));
    }
    Ok(bytes[12])
}

pub fn write_vdr1<D: Domain>(path: &Path, frame: &Frame<D>) -> Result<()> {
    fs::write(path, encode_vdr1(frame))?;
    Ok(())
}

pub fn read_vdr1<D: Domain>(path: &Path) -> Result<Frame<D>> {
    decode_vdr1(&fs::read(path)?, path)
}

pub fn encode_vdr2(flow: &FlowField) -> Vec<u8> {
    let mut out = header(b"VDR2", flow.width, flow.height, 0);
    for (v, &m) in flow.vectors.iter().zip(&flow.mask) {
        let (a, b) = if m { (v[0] as f32, v[1] as f32) } else { (0.0, 0.0) };
        out.extend_from_slice(&a.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
    }
    out.extend(flow.mask.iter().map(|&m| m as u8));
    out
}

pub fn decode_vdr2(bytes: &[u8], path: &Path) -> Result<FlowField> {
    let p = parse_header(bytes, b"VDR2", 2, path)?;
    let n = p.width * p.height;
    let vectors = (0..n).map(|i| [read_f32(p.body, 2 * i), read_f32(p.body, 2 * i + 1)]).collect();
    let mask = p.body[8 * n..].iter().map(|&b| b != 0).collect();
    FlowField::new(p.width, p.height, vectors, mask)
}

pub fn write_vdr2(path: &Path, flow: &FlowField) -> Result<()> {
    fs::write(path, encode_vdr2(flow))?;
    Ok(())
}

pub fn read_vdr2(path: &Path) -> Result<FlowField> {
    decode_vdr2(&fs::read(path)?, path)
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.vdr")
}

pub fn flow_file_name(index: usize) -> String {
    format!("flow_{index:06}.vdr2")
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let rows: Vec<[[f64; 4]; 3]> = poses.iter().map(Pose::to_rows).collect();
    write_json(path, &rows)
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let rows: Vec<[[f64; 4]; 3]> = read_json(path)?;
    rows.iter()
        .map(|r| Pose::from_rows(r).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    write_json(path, k)
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let k: CameraIntrinsics = read_json(path)?;
    CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a directory atomically: `fill` populates a temporary sibling which
/// is renamed onto `dest` only if it succeeds. On failure nothing is left
/// behind.
pub fn write_dir_atomic(dest: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let parent = match dest.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let name = dest
        .file_name()
        .ok_or_else(|| Error::config(format!("output path {} has no file name", dest.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if dest.exists() {
        fs::remove_dir_all(dest)?;
    }
    fs::rename(&tmp, dest)?;
    Ok(())
}

/// Writes a single file through a temporary sibling and a rename.
pub fn write_file_atomic(dest: &Path, bytes: &[u8]) -> Result<()> {
    let name = dest
        .file_name()
        .ok_or_else(|| Error::config(format!("output path {} has no file name", dest.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = dest.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, dest)?;
    Ok(())
}

/// 8-bit binary PGM (`P5`, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{InvDepthFrame, MetricDepthFrame};
    use proptest::prelude::*;

    #[test]
    fn vdr1_layout_is_bit_exact() {
        let f = MetricDepthFrame::new(2, 1, vec![1.5, 9.0], vec![true, false]).unwrap();
        let bytes = encode_vdr1(&f);
        let mut expected = b"VDR1".to_vec();
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&[0, 0, 0, 0]);
        expected.extend_from_slice(&1.5f32.to_le_bytes());
        expected.extend_from_slice(&0f32.to_le_bytes());
        expected.extend_from_slice(&[1, 0]);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn domain_flag_is_checked() {
        let f = InvDepthFrame::constant(2, 2, 0.5).unwrap();
        let bytes = encode_vdr1(&f);
        assert_eq!(bytes[12], 1);
        assert!(decode_vdr1::<crate::frame::Metric>(&bytes, Path::new("x")).is_err());
        assert!(decode_vdr1::<crate::frame::Inverse>(&bytes[..20], Path::new("x")).is_err());
    }

    #[test]
    fn atomic_dir_leaves_nothing_on_failure() {
        let root = tempfile::tempdir().unwrap();
        let dest = root.path().join("out");
        let r = write_dir_atomic(&dest, |tmp| {
            fs::write(tmp.join("a"), b"x")?;
            Err(Error::config("boom"))
        });
        assert!(r.is_err());
        assert_eq!(fs::read_dir(root.path()).unwrap().count(), 0);
        write_dir_atomic(&dest, |tmp| Ok(fs::write(tmp.join("a"), b"x")?)).unwrap();
        assert!(dest.join("a").exists());
    }

    proptest! {
        #[test]
        fn vdr_round_trip(
            vals in proptest::collection::vec(-100.0f32..100.0, 12),
            mask in proptest::collection::vec(any::<bool>(), 12),
        ) {
            let f = InvDepthFrame::new(4, 3, vals.iter().map(|&v| v as f64).collect(), mask.clone()).unwrap();
            let back: InvDepthFrame = decode_vdr1(&encode_vdr1(&f), Path::new("x")).unwrap();
            prop_assert_eq!(back.mask(), f.mask());
            for i in 0..12 {
                if mask[i] { prop_assert_eq!(back.values()[i], f.values()[i]); }
            }
            let flow = FlowField::new(4, 3, vals.iter().map(|&v| [v as f64, -(v as f64)]).collect(), mask.clone()).unwrap();
            let fb = decode_vdr2(&encode_vdr2(&flow), Path::new("x")).unwrap();
            prop_assert_eq!(&fb.mask, &flow.mask);
            for i in 0..12 {
                if mask[i] { prop_assert_eq!(fb.vectors[i], flow.vectors[i]); }
            }
        }
    }
}
