//! Grayscale slice rendering.

use std::str::FromStr;

use fractrack_core::VolumeGrid;
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ErrorCode};

/// Slice orientation. Axes are x left-right, y posterior-anterior,
/// z inferior-superior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Fixed z; image rows run along y.
    Axial,
    /// Fixed y; image rows run along z, superior at the top.
    Coronal,
    /// Fixed x; image rows run along z, superior at the top.
    Sagittal,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Axial => "axial",
            Axis::Coronal => "coronal",
            Axis::Sagittal => "sagittal",
        }
    }

    /// Number of slices along this axis.
    pub fn len(self, dims: [usize; 3]) -> usize {
        match self {
            Axis::Axial => dims[2],
            Axis::Coronal => dims[1],
            Axis::Sagittal => dims[0],
        }
    }
}

impl FromStr for Axis {
    type Err = ApiError;

    fn from_str(s: &str) -> Result<Self, ApiError> {
        match s {
            "axial" => Ok(Axis::Axial),
            "coronal" => Ok(Axis::Coronal),
            "sagittal" => Ok(Axis::Sagittal),
            other => Err(ApiError::new(
                ErrorCode::InvalidSlice,
                format!("unknown axis `{other}`"),
            )),
        }
    }
}

/// 8-bit slice window-leveled by the min and max of the whole volume.
/// Returns `(width, height, pixels)` with rows top to bottom.
pub fn slice_pixels(v: &VolumeGrid, axis: Axis, index: usize) -> Result<(usize, usize, Vec<u8>), ApiError> {
    let dims = v.dims();
    let n = axis.len(dims);
    if index >= n {
        return Err(ApiError::new(
            ErrorCode::InvalidSlice,
            format!("{} slice {index} out of range 0..{n}", axis.name()),
        ));
    }
    let (lo, hi) = v.min_max();
    let range = hi - lo;
    let level = |x: f32| -> u8 {
        if range > 0.0 {
            (((x - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    };
    let [dx, dy, dz] = dims;
    let mut out = Vec::new();
    let (w, h) = match axis {
        Axis::Axial => {
            for y in 0..dy {
                for x in 0..dx {
                    out.push(level(v.get(x, y, index)));
                }
            }
            (dx, dy)
        }
        Axis::Coronal => {
            for z in (0..dz).rev() {
                for x in 0..dx {
                    out.push(level(v.get(x, index, z)));
                }
            }
            (dx, dz)
        }
        Axis::Sagittal => {
            for z in (0..dz).rev() {
                for y in 0..dy {
                    out.push(level(v.get(index, y, z)));
                }
            }
            (dy, dz)
        }
    };
    Ok((w, h, out))
}

/// PNG-encoded slice.
pub fn render_png(v: &VolumeGrid, axis: Axis, index: usize) -> Result<Vec<u8>, ApiError> {
    let (w, h, pixels) = slice_pixels(v, axis, index)?;
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let internal = |e: png::EncodingError| ApiError::new(ErrorCode::Internal, e.to_string());
        let mut writer = enc.write_header().map_err(internal)?;
        writer.write_image_data(&pixels).map_err(internal)?;
    }
    Ok(buf)
}
