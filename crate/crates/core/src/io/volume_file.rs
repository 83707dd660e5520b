//! Self-describing raw volumes: `<name>.json` header plus `<name>.raw`
//! little-endian payload in `(z·H + y)·W + x` order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, MaskVolume, Volume};

pub const MAGIC: &str = "voxseg-raw-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Mask,
    Prob,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub format: String,
    pub dims: [usize; 3],
    pub dtype: Dtype,
    pub kind: VolumeKind,
}

impl VolumeHeader {
    pub fn new(dims: Dims, dtype: Dtype, kind: VolumeKind) -> Self {
        VolumeHeader {
            format: MAGIC.to_string(),
            dims: dims.to_array(),
            dtype,
            kind,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims::from_array(self.dims)
    }

    pub fn payload_len(&self) -> usize {
        self.dims().len() * self.dtype.size()
    }
}

/// Header and payload paths for a volume. `path` may name either file or
/// the shared stem.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json" | "raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let add = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (add("json"), add("raw"))
}

fn write_raw(path: &Path, header: &VolumeHeader, payload: &[u8]) -> Result<()> {
    let (hp, rp) = volume_paths(path);
    if let Some(dir) = hp.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string(header).expect("header serializes");
    fs::write(&hp, text).map_err(|e| Error::io(&hp, e))?;
    fs::write(&rp, payload).map_err(|e| Error::io(&rp, e))
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn write_volume(path: &Path, v: &Volume, kind: VolumeKind) -> Result<()> {
    write_raw(path, &VolumeHeader::new(v.dims(), Dtype::F32, kind), &f32_bytes(v.voxels()))
}

/// Crisp masks are stored as `u8`, soft masks as `f32`.
pub fn write_mask(path: &Path, m: &MaskVolume) -> Result<()> {
    if m.is_crisp() {
        let bytes: Vec<u8> = m.voxels().iter().map(|&v| v as u8).collect();
        write_raw(path, &VolumeHeader::new(m.dims(), Dtype::U8, VolumeKind::Mask), &bytes)
    } else {
        write_raw(path, &VolumeHeader::new(m.dims(), Dtype::F32, VolumeKind::Mask), &f32_bytes(m.voxels()))
    }
}

pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let (hp, _) = volume_paths(path);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: VolumeHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(&hp, format!("bad header: {e}")))?;
    if header.format != MAGIC {
        return Err(Error::format(
            &hp,
            format!("bad magic {:?}, expected {MAGIC:?}", header.format),
        ));
    }
    if header.dims.contains(&0) {
        return Err(Error::format(&hp, format!("non-positive dims {:?}", header.dims)));
    }
    Ok(header)
}

/// Checks the header and the payload size without decoding voxels.
pub fn check_volume(path: &Path) -> Result<VolumeHeader> {
    let header = read_header(path)?;
    let (_, rp) = volume_paths(path);
    let actual = fs::metadata(&rp).map_err(|e| Error::io(&rp, e))?.len() as usize;
    if actual != header.payload_len() {
        return Err(Error::format(
            &rp,
            format!("payload is {actual} bytes, expected {}", header.payload_len()),
        ));
    }
    Ok(header)
}

/// Reads any volume file as raw `f32` voxels.
pub fn read_volume(path: &Path) -> Result<(VolumeHeader, Vec<f32>)> {
    let header = read_header(path)?;
    let (_, rp) = volume_paths(path);
    let bytes = fs::read(&rp).map_err(|e| Error::io(&rp, e))?;
    if bytes.len() != header.payload_len() {
        return Err(Error::format(
            &rp,
            format!("payload is {} bytes, expected {}", bytes.len(), header.payload_len()),
        ));
    }
    let voxels: Vec<f32> = match header.dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::U8 => {
            if header.kind == VolumeKind::Mask {
                if let Some(i) = bytes.iter().position(|&b| b > 1) {
                    return Err(Error::format(
                        &rp,
                        format!("mask byte at offset {i} is {}, expected 0 or 1", bytes[i]),
                    ));
                }
                bytes.iter().map(|&b| b as f32).collect()
            } else {
                bytes.iter().map(|&b| b as f32 / 255.0).collect()
            }
        }
    };
    if let Some(i) = voxels.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::format(
            &rp,
            format!("value {} at byte offset {} is outside [0, 1]", voxels[i], i * header.dtype.size()),
        ));
    }
    Ok((header, voxels))
}

pub fn read_image(path: &Path) -> Result<Volume> {
    let (h, v) = read_volume(path)?;
    Volume::new(h.dims(), v)
}

pub fn read_mask(path: &Path) -> Result<MaskVolume> {
    let (h, v) = read_volume(path)?;
    MaskVolume::new(h.dims(), v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ramp");
        let v = Volume::new(Dims::new(2, 2, 2), (0..8).map(|i| i as f32 / 7.0).collect()).unwrap();
        write_volume(&p, &v, VolumeKind::Image).unwrap();
        assert_eq!(read_image(&p).unwrap(), v);
        assert_eq!(read_image(&p.with_extension("json")).unwrap(), v);
    }

    #[test]
    fn truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t");
        write_volume(&p, &Volume::filled(Dims::new(2, 2, 2), 0.5), VolumeKind::Image).unwrap();
        let raw = p.with_extension("raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..30]).unwrap();
        let msg = read_image(&p).unwrap_err().to_string();
        assert!(msg.contains("30 bytes") && msg.contains("expected 32"), "{msg}");
    }

    #[test]
    fn u8_mask_rejects_two() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m");
        write_mask(&p, &MaskVolume::from_fn(Dims::new(2, 1, 1), |x, _, _| x == 0)).unwrap();
        fs::write(p.with_extension("raw"), [1u8, 2]).unwrap();
        let msg = read_mask(&p).unwrap_err().to_string();
        assert!(msg.contains("offset 1"), "{msg}");
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b");
        write_volume(&p, &Volume::filled(Dims::new(1, 1, 1), 0.0), VolumeKind::Image).unwrap();
        fs::write(
            p.with_extension("json"),
            r#"{"format":"nope","dims":[1,1,1],"dtype":"f32","kind":"image"}"#,
        )
        .unwrap();
        assert!(read_image(&p).unwrap_err().to_string().contains("bad magic"));
    }
}
