//! Records, pair construction, patient-wise splits, centroid cropping and
//! on-disk formats.

mod frv1;
mod manifest;

pub use frv1::{
    decode as decode_frv1, encode_image, encode_mask, read_frv1, read_image, read_mask, write_image, write_mask,
    Frv1Volume, FRV1_MAGIC,
};
pub use manifest::{load_cohort, read_manifest, save_cohort, ManifestEntry};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::PatientSeries;
use crate::volume::{Dims, Mask, VolumeGrid};

/// Segmented structure carried as a mask channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Organ {
    Prostate,
    Bladder,
    Symphysis,
}

impl Organ {
    pub const ALL: [Organ; 3] = [Organ::Prostate, Organ::Bladder, Organ::Symphysis];

    pub fn name(self) -> &'static str {
        match self {
            Organ::Prostate => "prostate",
            Organ::Bladder => "bladder",
            Organ::Symphysis => "symphysis",
        }
    }
}

impl fmt::Display for Organ {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Organ {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prostate" => Ok(Organ::Prostate),
            "bladder" => Ok(Organ::Bladder),
            "symphysis" => Ok(Organ::Symphysis),
            other => Err(Error::Invalid(format!("unknown organ `{other}`"))),
        }
    }
}

/// One acquisition. Fraction index 0 is the pre-treatment Sim scan; treatment
/// fractions are numbered from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionRecord {
    pub patient_id: String,
    pub fraction_index: u32,
    /// Days relative to F1 (negative for Sim).
    pub day_offset: i32,
    pub image: VolumeGrid,
    pub masks: BTreeMap<Organ, Mask>,
}

impl FractionRecord {
    pub fn is_sim(&self) -> bool {
        self.fraction_index == 0
    }

    /// Short identifier used in error messages, e.g. `P007/F3`.
    pub fn label(&self) -> String {
        if self.is_sim() {
            format!("{}/Sim", self.patient_id)
        } else {
            format!("{}/F{}", self.patient_id, self.fraction_index)
        }
    }

    pub fn mask(&self, organ: Organ) -> Result<&Mask> {
        self.masks.get(&organ).ok_or_else(|| Error::MissingMask {
            organ: organ.name().into(),
            record: self.label(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (organ, m) in &self.masks {
            if !m.same_geometry(&self.image) {
                return Err(Error::Invalid(format!(
                    "{}: {organ} mask dims {:?} differ from image dims {:?}",
                    self.label(),
                    m.dims(),
                    self.image.dims()
                )));
            }
        }
        Ok(())
    }
}

/// Two records of one patient plus the temporal-order label:
/// 1 when `second` is later, 0 when earlier, 0.5 for the identical record.
#[derive(Debug, Clone)]
pub struct OrderedPair {
    pub first: Arc<FractionRecord>,
    pub second: Arc<FractionRecord>,
    pub label: f64,
    pub interval_days: i32,
    pub interval_fractions: i32,
}

impl OrderedPair {
    pub fn new(first: Arc<FractionRecord>, second: Arc<FractionRecord>) -> Result<Self> {
        if first.patient_id != second.patient_id {
            return Err(Error::Invalid(format!(
                "pair spans patients {} and {}",
                first.patient_id, second.patient_id
            )));
        }
        let interval_fractions = second.fraction_index as i32 - first.fraction_index as i32;
        let label = match interval_fractions.signum() {
            1 => 1.0,
            -1 => 0.0,
            _ => 0.5,
        };
        Ok(Self {
            interval_days: second.day_offset - first.day_offset,
            interval_fractions,
            label,
            first,
            second,
        })
    }

    pub fn patient_id(&self) -> &str {
        &self.first.patient_id
    }

    pub fn is_identical(&self) -> bool {
        self.label == 0.5
    }

    /// Stable identifier, e.g. `P007:F1>F5`.
    pub fn id(&self) -> String {
        let tag = |r: &FractionRecord| {
            if r.is_sim() {
                "Sim".to_string()
            } else {
                format!("F{}", r.fraction_index)
            }
        };
        format!("{}:{}>{}", self.patient_id(), tag(&self.first), tag(&self.second))
    }

    /// The same two records presented in the opposite order.
    pub fn swapped(&self) -> OrderedPair {
        OrderedPair::new(self.second.clone(), self.first.clone()).expect("same patient")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Both orderings of (F1, FL).
    #[serde(rename = "f1fl")]
    F1Fl,
    /// Every ordered pair with repetition over F1..Fn.
    All,
    /// Both orderings of (Sim, F1).
    #[serde(rename = "simf1")]
    SimF1,
}

impl FromStr for PairMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f1fl" => Ok(PairMode::F1Fl),
            "all" => Ok(PairMode::All),
            "simf1" | "sim_f1" => Ok(PairMode::SimF1),
            other => Err(Error::Invalid(format!("unknown pair mode `{other}`"))),
        }
    }
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairMode::F1Fl => "f1fl",
            PairMode::All => "all",
            PairMode::SimF1 => "simf1",
        })
    }
}

pub fn make_pairs(series: &PatientSeries, mode: PairMode) -> Result<Vec<OrderedPair>> {
    let fractions: Vec<&Arc<FractionRecord>> = series.records.iter().filter(|r| !r.is_sim()).collect();
    if fractions.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "patient {} has {} treatment fractions, need 2",
            series.patient_id,
            fractions.len()
        )));
    }
    match mode {
        PairMode::All => {
            let mut out = Vec::with_capacity(fractions.len() * fractions.len());
            for a in &fractions {
                for b in &fractions {
                    out.push(OrderedPair::new((*a).clone(), (*b).clone())?);
                }
            }
            Ok(out)
        }
        PairMode::F1Fl => {
            let f1 = fractions[0].clone();
            let fl = fractions[fractions.len() - 1].clone();
            Ok(vec![
                OrderedPair::new(f1.clone(), fl.clone())?,
                OrderedPair::new(fl, f1)?,
            ])
        }
        PairMode::SimF1 => {
            let sim = series
                .records
                .iter()
                .find(|r| r.is_sim())
                .ok_or_else(|| Error::MissingSim(series.patient_id.clone()))?
                .clone();
            let f1 = fractions[0].clone();
            Ok(vec![
                OrderedPair::new(sim.clone(), f1.clone())?,
                OrderedPair::new(f1, sim)?,
            ])
        }
    }
}

pub fn make_cohort_pairs(cohort: &[PatientSeries], mode: PairMode) -> Result<Vec<OrderedPair>> {
    let mut out = Vec::new();
    for s in cohort {
        out.extend(make_pairs(s, mode)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitAssignment {
    pub fn ids(&self, split: Split) -> BTreeSet<&str> {
        self.assignment
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignment.values().filter(|&&s| s == split).count()
    }

    pub fn get(&self, id: &str) -> Option<Split> {
        self.assignment.get(id).copied()
    }

    /// Series of `cohort` assigned to `split`, in cohort order.
    pub fn select(&self, cohort: &[PatientSeries], split: Split) -> Vec<PatientSeries> {
        cohort
            .iter()
            .filter(|s| self.get(&s.patient_id) == Some(split))
            .cloned()
            .collect()
    }
}

/// Shuffles patient ids and cuts them into train/val/test. Validation and
/// test counts are `round(ratio · n)`; training takes the remainder.
pub fn split_patients(ids: &[String], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| r < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "split ratios {ratios:?} must be >= 0 and sum to 1"
        )));
    }
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::Invalid("duplicate patient ids".into()));
    }
    let wanted = ratios.iter().filter(|&&r| r > 0.0).count();
    if ids.len() < wanted {
        return Err(Error::InsufficientData(format!(
            "{} patients cannot fill {wanted} splits",
            ids.len()
        )));
    }
    let n = ids.len();
    let n_val = (ratios[1] * n as f64).round() as usize;
    let n_test = (ratios[2] * n as f64).round() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    let mut order: Vec<&String> = ids.iter().collect();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = BTreeMap::new();
    for (i, id) in order.into_iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        assignment.insert(id.clone(), split);
    }
    Ok(SplitAssignment {
        assignment,
        ratios,
        seed,
    })
}

/// Crops `crop_dims` around the rounded centroid of `mask`
/// (`floor(c + 0.5)` per axis); regions outside the source are zero.
///
/// The window along each axis starts at `center - crop/2`.
pub fn crop_centered(image: &VolumeGrid, mask: &Mask, crop_dims: Dims) -> Result<VolumeGrid> {
    crop_centered_named(image, mask, crop_dims, "volume")
}

pub fn crop_centered_named(image: &VolumeGrid, mask: &Mask, crop_dims: Dims, name: &str) -> Result<VolumeGrid> {
    if !mask.same_geometry(image) {
        return Err(Error::DimMismatch {
            expected: image.dims(),
            actual: mask.dims(),
        });
    }
    let centroid = mask.centroid().ok_or_else(|| Error::EmptyMask(name.to_string()))?;
    let start = crop_window_start(centroid, crop_dims);
    Ok(crop_at(image, start, crop_dims))
}

pub(crate) fn crop_window_start(centroid: [f64; 3], crop_dims: Dims) -> [i64; 3] {
    [0, 1, 2].map(|a| (centroid[a] + 0.5).floor() as i64 - (crop_dims[a] / 2) as i64)
}

/// Copies the window starting at `start` (may be negative) with zero padding.
pub fn crop_at<T: Copy + Default + PartialEq + Into<f64>>(
    image: &VolumeGrid<T>,
    start: [i64; 3],
    crop_dims: Dims,
) -> VolumeGrid<T> {
    let src = image.dims();
    let mut out = VolumeGrid::zeros(crop_dims, image.spacing_mm());
    for z in 0..crop_dims[2] {
        let sz = start[2] + z as i64;
        if sz < 0 || sz >= src[2] as i64 {
            continue;
        }
        for y in 0..crop_dims[1] {
            let sy = start[1] + y as i64;
            if sy < 0 || sy >= src[1] as i64 {
                continue;
            }
            let x_lo = (-start[0]).max(0) as usize;
            let x_hi = ((src[0] as i64 - start[0]).min(crop_dims[0] as i64)).max(0) as usize;
            if x_lo >= x_hi {
                continue;
            }
            let s0 = image.index((start[0] + x_lo as i64) as usize, sy as usize, sz as usize);
            let d0 = out.index(x_lo, y, z);
            let n = x_hi - x_lo;
            out.values_mut()[d0..d0 + n].copy_from_slice(&image.values()[s0..s0 + n]);
        }
    }
    out
}

/// Crops a record's image and every mask with one window centered on the
/// rounded centroid of the record's `center_on` mask.
pub fn crop_record(record: &FractionRecord, center_on: Organ, crop_dims: Dims) -> Result<FractionRecord> {
    let mask = record.mask(center_on)?;
    let centroid = mask
        .centroid()
        .ok_or_else(|| Error::EmptyMask(format!("{} {center_on}", record.label())))?;
    let start = crop_window_start(centroid, crop_dims);
    Ok(FractionRecord {
        patient_id: record.patient_id.clone(),
        fraction_index: record.fraction_index,
        day_offset: record.day_offset,
        image: crop_at(&record.image, start, crop_dims),
        masks: record
            .masks
            .iter()
            .map(|(&o, m)| (o, crop_at(m, start, crop_dims)))
            .collect(),
    })
}

/// [`crop_record`] applied to every record of a series.
pub fn crop_series(series: &PatientSeries, center_on: Organ, crop_dims: Dims) -> Result<PatientSeries> {
    Ok(PatientSeries {
        patient_id: series.patient_id.clone(),
        records: series
            .records
            .iter()
            .map(|r| crop_record(r, center_on, crop_dims).map(Arc::new))
            .collect::<Result<_>>()?,
        ground_truth: series.ground_truth.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(n: u32, with_sim: bool) -> PatientSeries {
        let dims = [4, 4, 4];
        let mk = |k: u32, day: i32| {
            Arc::new(FractionRecord {
                patient_id: "P1".into(),
                fraction_index: k,
                day_offset: day,
                image: VolumeGrid::filled(dims, [1.0; 3], k as f32),
                masks: BTreeMap::new(),
            })
        };
        let mut records = Vec::new();
        if with_sim {
            records.push(mk(0, -7));
        }
        for k in 1..=n {
            records.push(mk(k, 2 * (k as i32 - 1)));
        }
        PatientSeries {
            patient_id: "P1".into(),
            records,
            ground_truth: Default::default(),
        }
    }

    #[test]
    fn all_pairs_count_and_labels() {
        let pairs = make_pairs(&series(5, false), PairMode::All).unwrap();
        assert_eq!(pairs.len(), 25);
        let ones = pairs.iter().filter(|p| p.label == 1.0).count();
        let zeros = pairs.iter().filter(|p| p.label == 0.0).count();
        let halves = pairs.iter().filter(|p| p.label == 0.5).count();
        assert_eq!((ones, zeros, halves), (10, 10, 5));
        for p in &pairs {
            assert_eq!(p.interval_days, p.second.day_offset - p.first.day_offset);
        }
    }

    #[test]
    fn f1fl_pairs() {
        let pairs = make_pairs(&series(2, false), PairMode::F1Fl).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(
            (
                pairs[0].first.fraction_index,
                pairs[0].second.fraction_index,
                pairs[0].label
            ),
            (1, 2, 1.0)
        );
        assert_eq!(
            (
                pairs[1].first.fraction_index,
                pairs[1].second.fraction_index,
                pairs[1].label
            ),
            (2, 1, 0.0)
        );
    }

    #[test]
    fn sim_pairs_need_sim() {
        let pairs = make_pairs(&series(3, true), PairMode::SimF1).unwrap();
        let labels: Vec<f64> = pairs.iter().map(|p| p.label).collect();
        assert_eq!(labels, vec![1.0, 0.0]);
        assert!(pairs[0].first.is_sim());
        assert!(matches!(
            make_pairs(&series(3, false), PairMode::SimF1),
            Err(Error::MissingSim(_))
        ));
        // Sim never enters the treatment pairings.
        assert_eq!(make_pairs(&series(3, true), PairMode::All).unwrap().len(), 9);
    }

    #[test]
    fn single_fraction_is_rejected() {
        assert!(make_pairs(&series(1, false), PairMode::All).is_err());
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("P{i:04}")).collect()
    }

    #[test]
    fn split_counts() {
        let s = split_patients(&ids(10), [0.6, 0.2, 0.2], 1).unwrap();
        assert_eq!(
            (s.count(Split::Train), s.count(Split::Val), s.count(Split::Test)),
            (6, 2, 2)
        );
        let s = split_patients(&ids(761), [0.6, 0.2, 0.2], 1).unwrap();
        assert_eq!(
            (s.count(Split::Train), s.count(Split::Val), s.count(Split::Test)),
            (457, 152, 152)
        );
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let a = split_patients(&ids(50), [0.6, 0.2, 0.2], 9).unwrap();
        let b = split_patients(&ids(50), [0.6, 0.2, 0.2], 9).unwrap();
        assert_eq!(a, b);
        let tr = a.ids(Split::Train);
        let va = a.ids(Split::Val);
        let te = a.ids(Split::Test);
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        assert_eq!(tr.len() + va.len() + te.len(), 50);
    }

    #[test]
    fn split_errors() {
        assert!(split_patients(&ids(2), [0.6, 0.2, 0.2], 0).is_err());
        assert!(split_patients(&ids(10), [0.5, 0.2, 0.2], 0).is_err());
    }

    /// Brute-force oracle: output voxel (x,y,z) comes from source
    /// `(x,y,z) + round(centroid) - crop/2` or is zero outside the source.
    fn oracle_crop(image: &VolumeGrid, center: [i64; 3], crop: Dims) -> VolumeGrid {
        let mut out = VolumeGrid::zeros(crop, image.spacing_mm());
        let d = image.dims();
        for z in 0..crop[2] {
            for y in 0..crop[1] {
                for x in 0..crop[0] {
                    let s = [
                        x as i64 + center[0] - (crop[0] / 2) as i64,
                        y as i64 + center[1] - (crop[1] / 2) as i64,
                        z as i64 + center[2] - (crop[2] / 2) as i64,
                    ];
                    if (0..3).all(|a| s[a] >= 0 && s[a] < d[a] as i64) {
                        out.set(x, y, z, image.get(s[0] as usize, s[1] as usize, s[2] as usize));
                    }
                }
            }
        }
        out
    }

    fn ramp(dims: Dims) -> VolumeGrid {
        let n: usize = dims.iter().product();
        VolumeGrid::new(dims, [1.0; 3], (0..n).map(|i| i as f32 + 1.0).collect()).unwrap()
    }

    fn point_mask(dims: Dims, p: [usize; 3]) -> Mask {
        let mut m = Mask::zeros(dims, [1.0; 3]);
        m.set(p[0], p[1], p[2], 1);
        m
    }

    #[test]
    fn crop_identity_when_centered() {
        let img = ramp([64; 3]);
        let out = crop_centered(&img, &point_mask([64; 3], [32, 32, 32]), [64; 3]).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn crop_pads_left_planes() {
        let img = ramp([64; 3]);
        let out = crop_centered(&img, &point_mask([64; 3], [8, 32, 32]), [64; 3]).unwrap();
        assert_eq!(out, oracle_crop(&img, [8, 32, 32], [64; 3]));
        for z in 0..64 {
            for y in 0..64 {
                for x in 0..24 {
                    assert_eq!(out.get(x, y, z), 0.0);
                }
                assert_ne!(out.get(24, y, z), 0.0);
            }
        }
    }

    #[test]
    fn crop_single_voxel_window() {
        let img = ramp([64; 3]);
        let out = crop_centered(&img, &point_mask([64; 3], [10, 20, 30]), [16; 3]).unwrap();
        assert_eq!(out, oracle_crop(&img, [10, 20, 30], [16; 3]));
        // Window [2..18)×[12..28)×[22..38).
        assert_eq!(out.get(0, 0, 0), img.get(2, 12, 22));
        assert_eq!(out.get(15, 15, 15), img.get(17, 27, 37));
    }

    #[test]
    fn crop_empty_mask_names_record() {
        let img = ramp([8; 3]);
        let err = crop_centered_named(&img, &Mask::zeros([8; 3], [1.0; 3]), [4; 3], "P3/F2").unwrap_err();
        assert!(err.to_string().contains("P3/F2"));
    }

    #[test]
    fn centroid_rounds_half_up() {
        assert_eq!(crop_window_start([2.5, 3.49, 0.0], [4, 4, 4]), [1, 1, -2]);
    }
}
