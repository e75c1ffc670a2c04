//! FRV1 volume container.
//!
//! ```text
//! "FRV1" | dx dy dz: u32 LE | sx sy sz: f32 LE | dtype: u8 | voxels
//! ```
//!
//! `dtype` 0 stores `f32` LE voxels (images, saliency), 1 stores `u8` voxels
//! (binary masks). Voxels are x-fastest.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Mask, VolumeGrid};

pub const FRV1_MAGIC: &[u8; 4] = b"FRV1";
const HEADER_LEN: usize = 4 + 12 + 12 + 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Frv1Volume {
    Image(VolumeGrid),
    Mask(Mask),
}

fn header(dims: [usize; 3], spacing: [f32; 3], dtype: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(FRV1_MAGIC);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(dtype);
    out
}

pub fn encode_image(v: &VolumeGrid) -> Vec<u8> {
    let mut out = header(v.dims(), v.spacing_mm(), 0);
    out.reserve(v.len() * 4);
    for x in v.values() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_mask(m: &Mask) -> Result<Vec<u8>> {
    if !m.is_binary() {
        return Err(Error::Invalid("mask voxels must be 0 or 1".into()));
    }
    let mut out = header(m.dims(), m.spacing_mm(), 1);
    out.extend_from_slice(m.values());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Frv1Volume> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != FRV1_MAGIC {
        return Err(Error::Format("not an FRV1 volume".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dims = [u32_at(4), u32_at(8), u32_at(12)];
    let spacing = [f32_at(16), f32_at(20), f32_at(24)];
    let n: usize = dims.iter().product();
    let body = &bytes[HEADER_LEN..];
    match bytes[28] {
        0 => {
            if body.len() != n * 4 {
                return Err(Error::Format(format!(
                    "FRV1 f32 body has {} bytes, expected {}",
                    body.len(),
                    n * 4
                )));
            }
            let values = body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(Frv1Volume::Image(VolumeGrid::new(dims, spacing, values)?))
        }
        1 => {
            if body.len() != n {
                return Err(Error::Format(format!(
                    "FRV1 u8 body has {} bytes, expected {n}",
                    body.len()
                )));
            }
            Ok(Frv1Volume::Mask(Mask::new(dims, spacing, body.to_vec())?))
        }
        code => Err(Error::Format(format!("unknown FRV1 dtype code {code}"))),
    }
}

pub fn write_image(path: impl AsRef<Path>, v: &VolumeGrid) -> Result<()> {
    fs::write(path, encode_image(v))?;
    Ok(())
}

pub fn write_mask(path: impl AsRef<Path>, m: &Mask) -> Result<()> {
    fs::write(path, encode_mask(m)?)?;
    Ok(())
}

pub fn read_frv1(path: impl AsRef<Path>) -> Result<Frv1Volume> {
    decode(&fs::read(path)?)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<VolumeGrid> {
    match read_frv1(path)? {
        Frv1Volume::Image(v) => Ok(v),
        Frv1Volume::Mask(_) => Err(Error::Format("expected an f32 image, found a mask".into())),
    }
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    match read_frv1(path)? {
        Frv1Volume::Mask(m) => Ok(m),
        Frv1Volume::Image(_) => Err(Error::Format("expected a u8 mask, found an image".into())),
    }
}
