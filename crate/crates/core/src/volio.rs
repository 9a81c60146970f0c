//! On-disk volume format: a minimal, bit-exact binary container for
//! intensity volumes, binary masks, and displacement fields.
//!
//! Layout: magic `VOL1`, format version (u32), kind (u32: 0 intensity,
//! 1 mask, 2 displacement), extents D, H, W, C (u32 each), then C·D·H·W
//! little-endian f32 values in (z, y, x, c) order with the channel fastest.
//! In-memory tensors are channel-major, so writing and reading transpose.

use std::fs;
use std::path::Path;

use crate::deform::{DisplacementField, MaskVolume, Volume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VOL1";
const VERSION: u32 = 1;

/// Payload kind stored in the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolKind {
    Intensity = 0,
    Mask = 1,
    Displacement = 2,
}

/// A parsed volume file of any kind.
#[derive(Debug, Clone)]
pub enum VolFile {
    Intensity(Volume),
    Mask(MaskVolume),
    Displacement(DisplacementField),
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// Serializes a channel-major tensor ([C, D, H, W]) into the interleaved
/// file payload.
fn encode(grid: &Tensor, kind: VolKind) -> Vec<u8> {
    let shape = grid.shape();
    let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut bytes = Vec::with_capacity(4 + 6 * 4 + grid.len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(kind as u32).to_le_bytes());
    for extent in [d, h, w, c] {
        bytes.extend_from_slice(&(extent as u32).to_le_bytes());
    }
    let data = grid.data();
    let plane = d * h * w;
    for voxel in 0..plane {
        for ch in 0..c {
            bytes.extend_from_slice(&data[ch * plane + voxel].to_le_bytes());
        }
    }
    bytes
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    fs::write(path, encode(v.grid(), VolKind::Intensity))?;
    Ok(())
}

pub fn write_mask(path: &Path, m: &MaskVolume) -> Result<()> {
    fs::write(path, encode(m.grid(), VolKind::Mask))?;
    Ok(())
}

pub fn write_field(path: &Path, f: &DisplacementField) -> Result<()> {
    fs::write(path, encode(f.u(), VolKind::Displacement))?;
    Ok(())
}

fn read_u32(bytes: &[u8], offset: &mut usize, path: &Path, what: &str) -> Result<u32> {
    let end = *offset + 4;
    if bytes.len() < end {
        return Err(Error::format(path_str(path), format!("truncated before {what}")));
    }
    let v = u32::from_le_bytes(bytes[*offset..end].try_into().unwrap());
    *offset = end;
    Ok(v)
}

/// Parses any volume file, dispatching on the header kind.
pub fn read_vol(path: &Path) -> Result<VolFile> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(path_str(path), "bad magic"));
    }
    let mut offset = 4;
    let version = read_u32(&bytes, &mut offset, path, "version")?;
    if version != VERSION {
        return Err(Error::format(
            path_str(path),
            format!("unsupported version {version}"),
        ));
    }
    let kind = read_u32(&bytes, &mut offset, path, "kind")?;
    let d = read_u32(&bytes, &mut offset, path, "extent D")? as usize;
    let h = read_u32(&bytes, &mut offset, path, "extent H")? as usize;
    let w = read_u32(&bytes, &mut offset, path, "extent W")? as usize;
    let c = read_u32(&bytes, &mut offset, path, "channel count")? as usize;
    let expected_channels = match kind {
        0 | 1 => 1,
        2 => 3,
        _ => {
            return Err(Error::format(path_str(path), format!("unknown kind {kind}")));
        }
    };
    if c != expected_channels {
        return Err(Error::format(
            path_str(path),
            format!("kind {kind} requires {expected_channels} channel(s), header says {c}"),
        ));
    }
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::format(path_str(path), "zero extent"));
    }
    let plane = d
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .filter(|&v| v <= (1usize << 31) / (4 * c))
        .ok_or_else(|| Error::format(path_str(path), "extents overflow"))?;
    let payload = plane * c * 4;
    if bytes.len() != offset + payload {
        return Err(Error::format(
            path_str(path),
            format!(
                "payload holds {} bytes but extents require {payload}",
                bytes.len() - offset
            ),
        ));
    }
    let mut data = vec![0.0f32; plane * c];
    for voxel in 0..plane {
        for ch in 0..c {
            let at = offset + (voxel * c + ch) * 4;
            data[ch * plane + voxel] =
                f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        }
    }
    let grid = Tensor::new(vec![c, d, h, w], data)?;
    match kind {
        0 => Ok(VolFile::Intensity(Volume::new(grid)?)),
        1 => Ok(VolFile::Mask(MaskVolume::new(grid).map_err(|e| {
            Error::format(path_str(path), format!("mask payload rejected: {e}"))
        })?)),
        _ => Ok(VolFile::Displacement(DisplacementField::new(grid)?)),
    }
}

/// Reads a file that must contain an intensity volume.
pub fn read_volume(path: &Path) -> Result<Volume> {
    match read_vol(path)? {
        VolFile::Intensity(v) => Ok(v),
        other => Err(Error::format(
            path_str(path),
            format!("expected an intensity volume, found {}", kind_name(&other)),
        )),
    }
}

/// Reads a file that must contain a binary mask.
pub fn read_mask(path: &Path) -> Result<MaskVolume> {
    match read_vol(path)? {
        VolFile::Mask(m) => Ok(m),
        other => Err(Error::format(
            path_str(path),
            format!("expected a mask, found {}", kind_name(&other)),
        )),
    }
}

/// Reads a file that must contain a displacement field.
pub fn read_field(path: &Path) -> Result<DisplacementField> {
    match read_vol(path)? {
        VolFile::Displacement(f) => Ok(f),
        other => Err(Error::format(
            path_str(path),
            format!("expected a displacement field, found {}", kind_name(&other)),
        )),
    }
}

fn kind_name(v: &VolFile) -> &'static str {
    match v {
        VolFile::Intensity(_) => "an intensity volume",
        VolFile::Mask(_) => "a mask",
        VolFile::Displacement(_) => "a displacement field",
    }
}
