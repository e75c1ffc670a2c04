//! Dense 3D scalar grids shared by images, organ masks and saliency maps.
//!
//! Voxels are stored x-fastest: the linear index of `(x, y, z)` is
//! `x + dx * (y + dy * z)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];

/// Inclusive-exclusive index ranges per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn extent(&self) -> Dims {
        [
            self.hi[0] - self.lo[0],
            self.hi[1] - self.lo[1],
            self.hi[2] - self.lo[2],
        ]
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] < self.hi[a])
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            lo: [0, 1, 2].map(|a| self.lo[a].min(other.lo[a])),
            hi: [0, 1, 2].map(|a| self.hi[a].max(other.hi[a])),
        }
    }
}

/// Scalar grid with voxel spacing. `f32` carries images and saliency maps,
/// `u8` carries binary organ masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeGrid<T = f32> {
    dims: Dims,
    spacing_mm: [f32; 3],
    values: Vec<T>,
}

/// Binary organ mask with values in {0, 1}.
pub type Mask = VolumeGrid<u8>;

impl<T: Copy + Default + PartialEq + Into<f64>> VolumeGrid<T> {
    pub fn new(dims: Dims, spacing_mm: [f32; 3], values: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Invalid(format!("volume dims must be positive, got {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if values.len() != n {
            return Err(Error::Invalid(format!(
                "value buffer has {} entries, dims {:?} need {}",
                values.len(),
                dims,
                n
            )));
        }
        Ok(Self {
            dims,
            spacing_mm,
            values,
        })
    }

    pub fn zeros(dims: Dims, spacing_mm: [f32; 3]) -> Self {
        Self::filled(dims, spacing_mm, T::default())
    }

    pub fn filled(dims: Dims, spacing_mm: [f32; 3], v: T) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "volume dims must be positive");
        Self {
            dims,
            spacing_mm,
            values: vec![v; dims[0] * dims[1] * dims[2]],
        }
    }

    /// Same geometry as `self`, values from `values`.
    pub fn with_values<U: Copy + Default + PartialEq + Into<f64>>(&self, values: Vec<U>) -> Result<VolumeGrid<U>> {
        VolumeGrid::new(self.dims, self.spacing_mm, values)
    }

    pub fn map<U: Copy + Default + PartialEq + Into<f64>>(&self, f: impl Fn(T) -> U) -> VolumeGrid<U> {
        VolumeGrid {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f32; 3] {
        self.spacing_mm
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.values[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.values[i] = v;
    }

    pub fn same_geometry<U>(&self, other: &VolumeGrid<U>) -> bool {
        self.dims == other.dims
    }

    pub fn check_dims(&self, expected: Dims) -> Result<()> {
        if self.dims != expected {
            return Err(Error::DimMismatch {
                expected,
                actual: self.dims,
            });
        }
        Ok(())
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm.iter().map(|&s| s as f64).product()
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| {
            let v: f64 = v.into();
            v == 0.0 || v == 1.0
        })
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|&&v| v != T::default()).count()
    }

    /// Mean position of nonzero voxels, `None` for an empty mask.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        let mut acc = [0.0f64; 3];
        let mut n = 0usize;
        for (i, &v) in self.values.iter().enumerate() {
            if v != T::default() {
                let c = self.coords(i);
                for a in 0..3 {
                    acc[a] += c[a] as f64;
                }
                n += 1;
            }
        }
        (n > 0).then(|| acc.map(|s| s / n as f64))
    }

    /// Tight box around voxels for which `keep` holds.
    pub fn bounding_box_where(&self, keep: impl Fn(T) -> bool) -> Option<BoundingBox> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, &v) in self.values.iter().enumerate() {
            if keep(v) {
                let c = self.coords(i);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a] + 1);
                }
                any = true;
            }
        }
        any.then_some(BoundingBox { lo, hi })
    }

    pub fn crop_box(&self, bbox: &BoundingBox) -> Result<VolumeGrid<T>> {
        if (0..3).any(|a| bbox.hi[a] > self.dims[a] || bbox.lo[a] >= bbox.hi[a]) {
            return Err(Error::Invalid(format!(
                "box {bbox:?} does not fit volume {:?}",
                self.dims
            )));
        }
        let out_dims = bbox.extent();
        let mut out = Vec::with_capacity(out_dims.iter().product());
        for z in bbox.lo[2]..bbox.hi[2] {
            for y in bbox.lo[1]..bbox.hi[1] {
                let start = self.index(bbox.lo[0], y, z);
                out.extend_from_slice(&self.values[start..start + out_dims[0]]);
            }
        }
        VolumeGrid::new(out_dims, self.spacing_mm, out)
    }

    pub fn bounding_box(&self) -> Option<BoundingBox> {
        self.bounding_box_where(|v| v != T::default())
    }
}

impl VolumeGrid<f32> {
    pub fn min_max(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Mean and sample SD of image values where `mask` is nonzero.
    pub fn masked_mean_sd(&self, mask: &Mask) -> Option<(f64, f64)> {
        let vals: Vec<f64> = self
            .values
            .iter()
            .zip(mask.values())
            .filter(|(_, &m)| m != 0)
            .map(|(&v, _)| v as f64)
            .collect();
        if vals.len() < 2 {
            return None;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Some((mean, var.sqrt()))
    }

    /// Rescale values linearly to [0, 1]; constant volumes map to 0.
    pub fn min_max_scaled(&self) -> VolumeGrid {
        let (lo, hi) = self.min_max();
        let range = hi - lo;
        let values = if range > 0.0 {
            self.values.iter().map(|&v| (v - lo) / range).collect()
        } else {
            vec![0.0; self.values.len()]
        };
        VolumeGrid {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            values,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let v = VolumeGrid::<f32>::zeros([3, 4, 5], [1.0; 3]);
        for i in 0..v.len() {
            let [x, y, z] = v.coords(i);
            assert_eq!(v.index(x, y, z), i);
        }
        assert_eq!(v.index(1, 0, 0), 1);
        assert_eq!(v.index(0, 1, 0), 3);
        assert_eq!(v.index(0, 0, 1), 12);
    }

    #[test]
    fn rejects_bad_buffer() {
        assert!(VolumeGrid::<f32>::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(VolumeGrid::<f32>::new([0, 2, 2], [1.0; 3], vec![]).is_err());
    }

    #[test]
    fn bbox_and_crop() {
        let mut v = VolumeGrid::<f32>::zeros([8, 8, 8], [1.0; 3]);
        v.set(2, 3, 4, 1.0);
        v.set(5, 3, 6, 2.0);
        let b = v.bounding_box().unwrap();
        assert_eq!(b.lo, [2, 3, 4]);
        assert_eq!(b.hi, [6, 4, 7]);
        let c = v.crop_box(&b).unwrap();
        assert_eq!(c.dims(), [4, 1, 3]);
        assert_eq!(c.get(0, 0, 0), 1.0);
        assert_eq!(c.get(3, 0, 2), 2.0);
    }

    #[test]
    fn centroid_of_empty_is_none() {
        let v = VolumeGrid::<f32>::zeros([4, 4, 4], [1.0; 3]);
        assert!(v.centroid().is_none());
    }
}
