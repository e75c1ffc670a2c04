//! Spatially weighted Grad-CAM, saliency peaks, group averages and
//! saliency-restricted crops.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataio::{OrderedPair, Organ};
use crate::error::{Error, Result};
use crate::model::{SiameseModel, Side};
use crate::morphology::{dilate, union};
use crate::volume::{BoundingBox, Dims, Mask, VolumeGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub grid: VolumeGrid,
    pub pair_id: String,
    pub side: Side,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyCrop {
    pub bbox: BoundingBox,
    pub image: VolumeGrid,
    pub threshold: f64,
}

/// The side holding the later acquisition; the second image for identical
/// pairs.
pub fn later_side(pair: &OrderedPair) -> Side {
    if pair.label == 0.0 {
        Side::First
    } else {
        Side::Second
    }
}

/// Saliency of `side` for `pair`: at the final convolutional activation, the
/// elementwise product of activation and logit gradient summed over
/// channels, rectified, then trilinearly upsampled to the input grid.
pub fn gradcam(model: &mut SiameseModel, pair: &OrderedPair, side: Side) -> Result<SaliencyMap> {
    let image = match side {
        Side::First => &pair.first.image,
        Side::Second => &pair.second.image,
    };
    let tap = model.cam_tap(image, side)?;
    let [_, c, d, h, w] = tap.activation.shape;
    let n = d * h * w;
    let mut cam = vec![0.0f32; n];
    for ch in 0..c {
        let a = &tap.activation.data[ch * n..(ch + 1) * n];
        let g = &tap.gradient.data[ch * n..(ch + 1) * n];
        for i in 0..n {
            cam[i] += a[i] * g[i];
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    // Tensor layout (d, h, w) is the volume's (z, y, x) with x fastest.
    let low = VolumeGrid::new([w, h, d], image.spacing_mm(), cam)?;
    let mut grid = upsample_trilinear(&low, image.dims());
    grid = VolumeGrid::new(image.dims(), image.spacing_mm(), grid.into_values())?;
    Ok(SaliencyMap {
        grid,
        pair_id: pair.id(),
        side,
    })
}

/// Trilinear resize with half-pixel centers (`align_corners = false`):
/// output voxel `i` samples source coordinate `(i + 0.5)·in/out - 0.5`,
/// clamped to the source extent.
pub fn upsample_trilinear(src: &VolumeGrid, out_dims: Dims) -> VolumeGrid {
    let in_dims = src.dims();
    let taps: Vec<Vec<(usize, usize, f32)>> = (0..3)
        .map(|a| {
            let scale = in_dims[a] as f64 / out_dims[a] as f64;
            (0..out_dims[a])
                .map(|i| {
                    let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_dims[a] - 1) as f64);
                    let lo = s.floor() as usize;
                    let hi = (lo + 1).min(in_dims[a] - 1);
                    (lo, hi, (s - lo as f64) as f32)
                })
                .collect()
        })
        .collect();
    let mut out = VolumeGrid::zeros(out_dims, src.spacing_mm());
    for (z, &(z0, z1, fz)) in taps[2].iter().enumerate() {
        for (y, &(y0, y1, fy)) in taps[1].iter().enumerate() {
            for (x, &(x0, x1, fx)) in taps[0].iter().enumerate() {
                let c = |xx, yy, zz| src.get(xx, yy, zz);
                let c00 = c(x0, y0, z0) * (1.0 - fx) + c(x1, y0, z0) * fx;
                let c10 = c(x0, y1, z0) * (1.0 - fx) + c(x1, y1, z0) * fx;
                let c01 = c(x0, y0, z1) * (1.0 - fx) + c(x1, y0, z1) * fx;
                let c11 = c(x0, y1, z1) * (1.0 - fx) + c(x1, y1, z1) * fx;
                let c0 = c00 * (1.0 - fy) + c10 * fy;
                let c1 = c01 * (1.0 - fy) + c11 * fy;
                out.set(x, y, z, c0 * (1.0 - fz) + c1 * fz);
            }
        }
    }
    out
}

/// Argmax voxel; ties go to the lowest linear index. `None` for an
/// all-zero map.
pub fn saliency_peak(map: &VolumeGrid) -> Result<Option<[usize; 3]>> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in map.values().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("saliency value {v} at index {i}")));
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    Ok(match best {
        Some((i, v)) if v != 0.0 => Some(map.coords(i)),
        _ => None,
    })
}

/// Voxelwise mean of maps on a shared grid.
pub fn group_average(maps: &[&VolumeGrid]) -> Result<VolumeGrid> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InsufficientData("no maps to average".into()))?;
    let mut acc = vec![0.0f64; first.len()];
    for m in maps {
        m.check_dims(first.dims())?;
        for (a, &v) in acc.iter_mut().zip(m.values()) {
            *a += v as f64;
        }
    }
    let n = maps.len() as f64;
    first.with_values(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Crops `image` to the tight box around voxels whose min-max scaled
/// saliency is at least `threshold`. A constant map selects the whole volume.
pub fn restrict_by_saliency(image: &VolumeGrid, map: &VolumeGrid, threshold: f64) -> Result<SaliencyCrop> {
    map.check_dims(image.dims())?;
    if map.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("saliency map".into()));
    }
    let (lo, hi) = map.min_max();
    let bbox = if hi > lo {
        let range = (hi - lo) as f64;
        map.bounding_box_where(|v| (v - lo) as f64 / range >= threshold)
            .ok_or_else(|| Error::Degenerate(format!("no voxel reaches threshold {threshold}")))?
    } else {
        BoundingBox {
            lo: [0; 3],
            hi: image.dims(),
        }
    };
    Ok(SaliencyCrop {
        image: image.crop_box(&bbox)?,
        bbox,
        threshold,
    })
}

/// Union of the effect-bearing organ masks dilated by `dilation` voxels.
pub fn effect_region(masks: &[&Mask], dilation: usize) -> Result<Mask> {
    dilate(&union(masks)?, dilation)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakRow {
    pub pair_id: String,
    pub side: Side,
    /// `None` for an all-zero map.
    pub peak: Option<[usize; 3]>,
    /// First organ in canonical order whose mask holds the peak, else
    /// `background`.
    pub organ: String,
    pub in_effect_region: bool,
}

/// Locates the peak of `map` against the ground-truth masks of the record on
/// its side.
pub fn peak_row(map: &SaliencyMap, pair: &OrderedPair, effect_organs: &[Organ], dilation: usize) -> Result<PeakRow> {
    let record = match map.side {
        Side::First => &pair.first,
        Side::Second => &pair.second,
    };
    let peak = saliency_peak(&map.grid)?;
    let (organ, inside) = match peak {
        None => ("none".to_string(), false),
        Some([x, y, z]) => {
            let organ = Organ::ALL
                .iter()
                .find(|&&o| record.masks.get(&o).is_some_and(|m| m.get(x, y, z) == 1))
                .map_or("background".to_string(), |o| o.name().to_string());
            let masks = effect_organs
                .iter()
                .map(|&o| record.mask(o))
                .collect::<Result<Vec<_>>>()?;
            let inside = !masks.is_empty() && effect_region(&masks, dilation)?.get(x, y, z) == 1;
            (organ, inside)
        }
    };
    Ok(PeakRow {
        pair_id: map.pair_id.clone(),
        side: map.side,
        peak,
        organ,
        in_effect_region: inside,
    })
}

pub fn write_peak_csv(rows: &[PeakRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "pair_id,side,x,y,z,organ,in_effect_region")?;
    for r in rows {
        let side = match r.side {
            Side::First => "first",
            Side::Second => "second",
        };
        let [x, y, z] = r.peak.map_or([String::new(), String::new(), String::new()], |p| {
            p.map(|v| v.to_string())
        });
        writeln!(w, "{},{side},{x},{y},{z},{},{}", r.pair_id, r.organ, r.in_effect_region)?;
    }
    Ok(())
}
