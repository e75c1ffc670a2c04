//! Binary morphology on masks.

use crate::error::{Error, Result};
use crate::volume::{BoundingBox, Mask};

/// One dilation step with the 3×3×3 all-ones element, clipped to the grid.
fn dilate_once(m: &Mask) -> Mask {
    let [dx, dy, dz] = m.dims();
    let src = m.values();
    // Separable: the 26-neighborhood max is a max over each axis in turn.
    let mut a = src.to_vec();
    let mut b = vec![0u8; src.len()];
    let strides = [1, dx, dx * dy];
    let dims = [dx, dy, dz];
    for axis in 0..3 {
        let s = strides[axis];
        let n = dims[axis];
        for (i, out) in b.iter_mut().enumerate() {
            let pos = (i / s) % n;
            let mut v = a[i];
            if pos > 0 {
                v |= a[i - s];
            }
            if pos + 1 < n {
                v |= a[i + s];
            }
            *out = v;
        }
        std::mem::swap(&mut a, &mut b);
    }
    m.with_values(a).expect("same geometry")
}

/// `iterations` steps of 26-connected dilation.
pub fn dilate(mask: &Mask, iterations: usize) -> Result<Mask> {
    if !mask.is_binary() {
        return Err(Error::Invalid("dilation needs a binary mask".into()));
    }
    let mut m = mask.clone();
    for _ in 0..iterations {
        m = dilate_once(&m);
    }
    Ok(m)
}

/// Voxelwise union of equally shaped masks.
pub fn union(masks: &[&Mask]) -> Result<Mask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Invalid("union of no masks".into()))?;
    let mut out = (*first).clone();
    for m in &masks[1..] {
        m.check_dims(first.dims())?;
        for (o, &v) in out.values_mut().iter_mut().zip(m.values()) {
            *o |= v;
        }
    }
    Ok(out)
}

/// Mask of the voxels inside `bbox`.
pub fn box_mask(like: &Mask, bbox: &BoundingBox) -> Mask {
    let mut out = Mask::zeros(like.dims(), like.spacing_mm());
    for z in bbox.lo[2]..bbox.hi[2] {
        for y in bbox.lo[1]..bbox.hi[1] {
            for x in bbox.lo[0]..bbox.hi[0] {
                out.set(x, y, z, 1);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct definition: a voxel is set when any voxel within Chebyshev
    /// distance `r` is set.
    fn oracle(m: &Mask, r: i64) -> Mask {
        let [dx, dy, dz] = m.dims().map(|d| d as i64);
        let mut out = Mask::zeros(m.dims(), m.spacing_mm());
        for z in 0..dz {
            for y in 0..dy {
                for x in 0..dx {
                    let mut hit = false;
                    for oz in -r..=r {
                        for oy in -r..=r {
                            for ox in -r..=r {
                                let (a, b, c) = (x + ox, y + oy, z + oz);
                                if a >= 0 && b >= 0 && c >= 0 && a < dx && b < dy && c < dz {
                                    hit |= m.get(a as usize, b as usize, c as usize) == 1;
                                }
                            }
                        }
                    }
                    out.set(x as usize, y as usize, z as usize, hit as u8);
                }
            }
        }
        out
    }

    #[test]
    fn single_voxel_grows_to_cube() {
        let mut m = Mask::zeros([11, 11, 11], [1.0; 3]);
        m.set(5, 5, 5, 1);
        let d = dilate(&m, 2).unwrap();
        assert_eq!(d.count_nonzero(), 125);
        assert_eq!(d, oracle(&m, 2));
    }

    #[test]
    fn empty_and_boundary() {
        let m = Mask::zeros([5, 5, 5], [1.0; 3]);
        assert_eq!(dilate(&m, 2).unwrap().count_nonzero(), 0);
        let mut m = Mask::zeros([6, 5, 4], [1.0; 3]);
        m.set(0, 0, 0, 1);
        m.set(5, 4, 3, 1);
        let d = dilate(&m, 2).unwrap();
        assert_eq!(d, oracle(&m, 2));
        assert_eq!(d.count_nonzero(), 27 + 27);
    }

    #[test]
    fn rejects_non_binary() {
        let m = Mask::new([1, 1, 2], [1.0; 3], vec![0, 3]).unwrap();
        assert!(dilate(&m, 1).is_err());
    }

    proptest! {
        #[test]
        fn matches_oracle(bits in prop::collection::vec(prop::bool::weighted(0.05), 7 * 6 * 5), it in 0usize..3) {
            let m = Mask::new([7, 6, 5], [1.0; 3], bits.into_iter().map(u8::from).collect()).unwrap();
            prop_assert_eq!(dilate(&m, it).unwrap(), oracle(&m, it as i64));
        }
    }
}
