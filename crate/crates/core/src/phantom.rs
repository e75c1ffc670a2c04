//! Synthetic longitudinal pelvis phantoms.
//!
//! Each organ is an analytic ellipsoid. At treatment fraction `k` (Sim uses
//! the F1 state) an organ's semi-axes are scaled by
//! `(1 + s·volume_rate)^(k-1)`, its mean intensity shifted by
//! `s·intensity_rate·(k-1)` and its texture SD shifted by
//! `s·heterogeneity_rate·(k-1)`, where `s` is the patient's effect scale.
//! Texture is a per-patient standard-normal field, so two records of one
//! patient differ only through these effects and independent acquisition
//! noise.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{FractionRecord, Organ};
use crate::error::{Error, Result};
use crate::volume::{Mask, VolumeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TissueLabel {
    /// Soft-tissue body outline; painted first and carries no mask channel.
    Background,
    Prostate,
    Bladder,
    Symphysis,
}

impl TissueLabel {
    pub fn organ(self) -> Option<Organ> {
        match self {
            TissueLabel::Background => None,
            TissueLabel::Prostate => Some(Organ::Prostate),
            TissueLabel::Bladder => Some(Organ::Bladder),
            TissueLabel::Symphysis => Some(Organ::Symphysis),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    /// Center in voxel coordinates (x, y, z).
    pub center: [f64; 3],
    /// Semi-axes in voxels.
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    pub fn scaled(&self, factor: f64) -> Ellipsoid {
        Ellipsoid {
            center: self.center,
            semi_axes: self.semi_axes.map(|a| a * factor),
        }
    }

    /// Voxel centers `p` with `Σ ((p - c) / a)² ≤ 1`.
    #[inline]
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|i| {
                let d = (p[i] as f64 - self.center[i]) / self.semi_axes[i];
                d * d
            })
            .sum::<f64>()
            <= 1.0
    }

    /// Index range per axis that can hold interior voxels, clipped to `dims`.
    fn voxel_range(&self, dims: [usize; 3]) -> [(usize, usize); 3] {
        [0, 1, 2].map(|a| {
            let lo = (self.center[a] - self.semi_axes[a]).ceil().max(0.0) as usize;
            let hi = ((self.center[a] + self.semi_axes[a]).floor() + 1.0).clamp(0.0, dims[a] as f64) as usize;
            (lo.min(hi), hi)
        })
    }

    pub fn fits_inside(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| {
            self.center[a] - self.semi_axes[a] >= 0.0 && self.center[a] + self.semi_axes[a] <= (dims[a] - 1) as f64
        })
    }

    /// Exact rasterization at voxel centers.
    pub fn rasterize(&self, dims: [usize; 3], spacing: [f32; 3]) -> Mask {
        let mut m = Mask::zeros(dims, spacing);
        let [(x0, x1), (y0, y1), (z0, z1)] = self.voxel_range(dims);
        for z in z0..z1 {
            for y in y0..y1 {
                for x in x0..x1 {
                    if self.contains([x, y, z]) {
                        m.set(x, y, z, 1);
                    }
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrganSpec {
    pub label: TissueLabel,
    pub base_shape: Ellipsoid,
    pub base_intensity: f64,
    /// Texture SD at F1.
    pub base_heterogeneity: f64,
    /// Fractional semi-axis change per fraction.
    pub volume_rate: f64,
    /// Mean-intensity change per fraction.
    pub intensity_rate: f64,
    /// Texture-SD change per fraction.
    pub heterogeneity_rate: f64,
}

impl OrganSpec {
    pub fn has_effect(&self) -> bool {
        self.volume_rate != 0.0 || self.intensity_rate != 0.0 || self.heterogeneity_rate != 0.0
    }

    /// State after `steps` fractions beyond F1 with effect scale `s`.
    pub fn at(&self, steps: u32, s: f64) -> (Ellipsoid, f64, f64) {
        let k = steps as f64;
        let shape = self.base_shape.scaled((1.0 + s * self.volume_rate).powf(k));
        let mean = self.base_intensity + s * self.intensity_rate * k;
        let sd = (self.base_heterogeneity + s * self.heterogeneity_rate * k).max(0.0);
        (shape, mean, sd)
    }
}

/// Discrete distribution over inter-fraction gaps in days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DayGapDistribution {
    pub values: Vec<u32>,
    pub weights: Vec<f64>,
}

impl Default for DayGapDistribution {
    fn default() -> Self {
        Self {
            values: vec![2],
            weights: vec![1.0],
        }
    }
}

impl DayGapDistribution {
    fn validate(&self) -> Result<()> {
        if self.values.is_empty()
            || self.values.len() != self.weights.len()
            || self.weights.iter().any(|&w| !(w >= 0.0))
            || self.weights.iter().sum::<f64>() <= 0.0
            || self.values.iter().any(|&v| v == 0)
        {
            return Err(Error::Config(
                "day_gap_distribution needs matching positive values and nonnegative weights".into(),
            ));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> u32 {
        let total: f64 = self.weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (&v, &w) in self.values.iter().zip(&self.weights) {
            if u < w {
                return v;
            }
            u -= w;
        }
        *self.values.last().expect("validated nonempty")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub grid_size: usize,
    pub voxel_spacing_mm: f32,
    pub organs: Vec<OrganSpec>,
    pub n_fractions: u32,
    pub day_gap_distribution: DayGapDistribution,
    /// Day offset of the Sim scan relative to F1.
    pub sim_day_offset: i32,
    pub noise_sd: f64,
    /// Gaussian blur (voxels) applied to the texture field; 0 disables it.
    pub texture_smoothing: f64,
    pub include_sim: bool,
    pub effect_scale: f64,
    /// SD of the per-patient lognormal multiplier on `effect_scale`.
    pub effect_jitter_sd: f64,
    /// SD (voxels) of per-patient organ center shifts.
    pub center_jitter_vox: f64,
    /// SD of the per-patient multiplicative organ size factor.
    pub size_jitter: f64,
    /// SD of per-patient additive organ intensity offsets.
    pub intensity_jitter: f64,
    /// Reuse one acquisition-noise stream for every record of a patient.
    pub shared_noise: bool,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            grid_size: 64,
            voxel_spacing_mm: 1.5,
            organs: default_organs(),
            n_fractions: 5,
            day_gap_distribution: DayGapDistribution::default(),
            sim_day_offset: -7,
            noise_sd: 0.03,
            texture_smoothing: 0.0,
            include_sim: true,
            effect_scale: 1.0,
            effect_jitter_sd: 0.25,
            center_jitter_vox: 1.0,
            size_jitter: 0.03,
            intensity_jitter: 0.02,
            shared_noise: false,
            seed: 0,
        }
    }
}

/// Pelvis layout on a 64³ grid: x left-right, y posterior-anterior,
/// z inferior-superior, prostate at the center.
pub fn default_organs() -> Vec<OrganSpec> {
    vec![
        OrganSpec {
            label: TissueLabel::Background,
            base_shape: Ellipsoid {
                center: [32.0, 32.0, 32.0],
                semi_axes: [44.0, 29.0, 48.0],
            },
            base_intensity: 0.35,
            base_heterogeneity: 0.03,
            volume_rate: 0.0,
            intensity_rate: 0.0,
            heterogeneity_rate: 0.0,
        },
        OrganSpec {
            label: TissueLabel::Symphysis,
            base_shape: Ellipsoid {
                center: [32.0, 56.0, 20.0],
                semi_axes: [12.0, 3.0, 5.0],
            },
            base_intensity: 0.12,
            base_heterogeneity: 0.02,
            volume_rate: 0.0,
            intensity_rate: 0.0,
            heterogeneity_rate: 0.0,
        },
        OrganSpec {
            label: TissueLabel::Bladder,
            base_shape: Ellipsoid {
                center: [32.0, 36.0, 50.0],
                semi_axes: [15.0, 11.0, 7.0],
            },
            base_intensity: 0.9,
            base_heterogeneity: 0.03,
            volume_rate: -0.008,
            intensity_rate: -0.005,
            heterogeneity_rate: -0.002,
        },
        OrganSpec {
            label: TissueLabel::Prostate,
            base_shape: Ellipsoid {
                center: [32.0, 32.0, 30.0],
                semi_axes: [15.0, 14.0, 13.0],
            },
            base_intensity: 0.55,
            base_heterogeneity: 0.04,
            volume_rate: 0.03,
            intensity_rate: -0.005,
            heterogeneity_rate: 0.004,
        },
    ]
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 32 {
            return Err(Error::Config(format!("grid_size {} < 32", self.grid_size)));
        }
        if self.n_fractions < 2 {
            return Err(Error::Config(format!("n_fractions {} < 2", self.n_fractions)));
        }
        if !(self.effect_scale >= 0.0) {
            return Err(Error::Config(format!("effect_scale {} < 0", self.effect_scale)));
        }
        if !(self.voxel_spacing_mm > 0.0) {
            return Err(Error::Config("voxel_spacing_mm must be positive".into()));
        }
        if !(self.noise_sd >= 0.0)
            || !(self.effect_jitter_sd >= 0.0)
            || !(self.center_jitter_vox >= 0.0)
            || !(self.size_jitter >= 0.0)
            || !(self.intensity_jitter >= 0.0)
            || !(self.texture_smoothing >= 0.0)
        {
            return Err(Error::Config("noise and jitter parameters must be >= 0".into()));
        }
        if self.sim_day_offset >= 0 {
            return Err(Error::Config("sim_day_offset must be negative".into()));
        }
        self.day_gap_distribution.validate()?;
        let mut seen = std::collections::BTreeSet::new();
        for o in &self.organs {
            if !seen.insert(o.label) {
                return Err(Error::Config(format!("duplicate organ label {:?}", o.label)));
            }
            if o.base_shape.semi_axes.iter().any(|&a| !(a > 0.0)) {
                return Err(Error::Config(format!("{:?} semi-axes must be positive", o.label)));
            }
        }
        Ok(())
    }

    fn dims(&self) -> [usize; 3] {
        [self.grid_size; 3]
    }

    fn spacing(&self) -> [f32; 3] {
        [self.voxel_spacing_mm; 3]
    }
}

/// Effects actually used for one patient, after per-patient jitter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub effect_scale: f64,
    pub organs: Vec<OrganSpec>,
}

impl GroundTruth {
    pub fn organ(&self, organ: Organ) -> Option<&OrganSpec> {
        self.organs.iter().find(|o| o.label.organ() == Some(organ))
    }

    /// Organs with a nonzero per-fraction effect.
    pub fn effect_organs(&self) -> Vec<Organ> {
        if self.effect_scale == 0.0 {
            return Vec::new();
        }
        self.organs
            .iter()
            .filter(|o| o.has_effect())
            .filter_map(|o| o.label.organ())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct PatientSeries {
    pub patient_id: String,
    /// Optional Sim record, then F1..Fn.
    pub records: Vec<Arc<FractionRecord>>,
    pub ground_truth: GroundTruth,
}

impl PatientSeries {
    pub fn fraction(&self, index: u32) -> Option<&Arc<FractionRecord>> {
        self.records.iter().find(|r| r.fraction_index == index)
    }

    pub fn first_fraction(&self) -> Option<&Arc<FractionRecord>> {
        self.records.iter().find(|r| !r.is_sim())
    }

    pub fn last_fraction(&self) -> Option<&Arc<FractionRecord>> {
        self.records.iter().rev().find(|r| !r.is_sim())
    }

    pub fn sim(&self) -> Option<&Arc<FractionRecord>> {
        self.records.iter().find(|r| r.is_sim())
    }
}

/// Stable 64-bit seed from a master seed and a string key.
pub fn derive_seed(master: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn gaussian_field(n: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Separable Gaussian blur, renormalized to unit sample SD.
fn smooth_unit_field(field: &mut [f32], dims: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let ksum: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / ksum).collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut tmp = vec![0.0f32; field.len()];
    for axis in 0..3 {
        let len = dims[axis] as isize;
        for (i, out) in tmp.iter_mut().enumerate() {
            let pos = ((i / strides[axis]) % dims[axis]) as isize;
            let mut acc = 0.0;
            for (j, &k) in kernel.iter().enumerate() {
                let q = (pos + j as isize - radius).clamp(0, len - 1);
                acc += k * field[(i as isize + (q - pos) * strides[axis] as isize) as usize];
            }
            *out = acc;
        }
        field.copy_from_slice(&tmp);
    }
    let n = field.len() as f64;
    let mean = field.iter().map(|&v| v as f64).sum::<f64>() / n;
    let sd = (field.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        field.iter_mut().for_each(|v| *v = ((*v as f64 - mean) / sd) as f32);
    }
}

/// Applies per-patient anatomical jitter to the configured organs.
fn jitter_organs(config: &PhantomConfig, rng: &mut ChaCha8Rng) -> Vec<OrganSpec> {
    let center = Normal::new(0.0, config.center_jitter_vox.max(1e-12)).expect("finite sd");
    let size = LogNormal::new(0.0, config.size_jitter.max(1e-12)).expect("finite sd");
    let intensity = Normal::new(0.0, config.intensity_jitter.max(1e-12)).expect("finite sd");
    config
        .organs
        .iter()
        .map(|o| {
            let mut o = o.clone();
            // Draw unconditionally so the stream layout does not depend on
            // which jitters are enabled.
            let dc = [center.sample(rng), center.sample(rng), center.sample(rng)];
            let ds = size.sample(rng);
            let di = intensity.sample(rng);
            if o.label != TissueLabel::Background {
                if config.center_jitter_vox > 0.0 {
                    for a in 0..3 {
                        o.base_shape.center[a] += dc[a];
                    }
                }
                if config.size_jitter > 0.0 {
                    o.base_shape.semi_axes = o.base_shape.semi_axes.map(|v| v * ds);
                }
                if config.intensity_jitter > 0.0 {
                    o.base_intensity += di;
                }
            }
            o
        })
        .collect()
}

pub fn generate_patient(config: &PhantomConfig, patient_id: &str) -> Result<PatientSeries> {
    config.validate()?;
    let dims = config.dims();
    let spacing = config.spacing();
    let n_vox = dims.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, patient_id));

    let jitter = LogNormal::new(0.0, config.effect_jitter_sd.max(1e-12)).expect("finite sd");
    let factor = jitter.sample(&mut rng);
    let effect = if config.effect_jitter_sd > 0.0 {
        config.effect_scale * factor
    } else {
        config.effect_scale
    };
    let organs = jitter_organs(config, &mut rng);

    let last_step = config.n_fractions - 1;
    for o in &organs {
        let step_factor = 1.0 + effect * o.volume_rate;
        if step_factor <= 0.0 {
            return Err(Error::Config(format!(
                "{:?}: volume_rate {} collapses the ellipsoid at effect scale {effect:.3}",
                o.label, o.volume_rate
            )));
        }
        if o.label == TissueLabel::Background {
            continue;
        }
        let (shape_last, ..) = o.at(last_step, effect);
        for shape in [o.base_shape, shape_last] {
            if !shape.fits_inside(dims) {
                return Err(Error::Config(format!(
                    "{:?} escapes the {}³ grid for patient {patient_id} (center {:?}, semi-axes {:?})",
                    o.label, config.grid_size, shape.center, shape.semi_axes
                )));
            }
        }
    }

    let mut texture = gaussian_field(n_vox, &mut rng);
    smooth_unit_field(&mut texture, dims, config.texture_smoothing);

    let mut day_offsets = vec![0i32];
    for _ in 1..config.n_fractions {
        let gap = config.day_gap_distribution.sample(&mut rng) as i32;
        day_offsets.push(day_offsets.last().unwrap() + gap);
    }

    let noise_seed_base = rng.random::<u64>();
    let mut records = Vec::new();
    let mut indices: Vec<u32> = Vec::new();
    if config.include_sim {
        indices.push(0);
    }
    indices.extend(1..=config.n_fractions);
    for index in indices {
        let steps = index.saturating_sub(1);
        let day_offset = if index == 0 {
            config.sim_day_offset
        } else {
            day_offsets[(index - 1) as usize]
        };
        let mut image = vec![0.0f32; n_vox];
        let mut masks: BTreeMap<Organ, Mask> = BTreeMap::new();
        let mut grid = VolumeGrid::zeros(dims, spacing);
        for o in &organs {
            let (shape, mean, sd) = o.at(steps, effect);
            let mask = shape.rasterize(dims, spacing);
            for (i, &m) in mask.values().iter().enumerate() {
                if m != 0 {
                    image[i] = (mean + sd * texture[i] as f64) as f32;
                }
            }
            // Later organs occlude earlier ones, so each mask keeps only the
            // voxels its organ still paints.
            for earlier in masks.values_mut() {
                for (e, &m) in earlier.values_mut().iter_mut().zip(mask.values()) {
                    if m != 0 {
                        *e = 0;
                    }
                }
            }
            if let Some(organ) = o.label.organ() {
                masks.insert(organ, mask);
            }
        }
        let noise_seed = if config.shared_noise {
            noise_seed_base
        } else {
            noise_seed_base.wrapping_add(index as u64 + 1)
        };
        if config.noise_sd > 0.0 {
            let mut nrng = ChaCha8Rng::seed_from_u64(noise_seed);
            let sd = config.noise_sd as f32;
            for v in image.iter_mut() {
                *v += sd * nrng.sample::<f32, _>(StandardNormal);
            }
        }
        grid.values_mut().copy_from_slice(&image);
        records.push(Arc::new(FractionRecord {
            patient_id: patient_id.to_string(),
            fraction_index: index,
            day_offset,
            image: grid,
            masks,
        }));
    }

    Ok(PatientSeries {
        patient_id: patient_id.to_string(),
        records,
        ground_truth: GroundTruth {
            effect_scale: effect,
            organs,
        },
    })
}

pub fn patient_id(i: usize) -> String {
    format!("P{i:04}")
}

/// `n_patients` series with ids `P0000..`; per-patient streams derive from
/// `seed`, so the cohort is a pure function of `(config, n_patients, seed)`.
pub fn cohort(config: &PhantomConfig, n_patients: usize, seed: u64) -> Result<Vec<PatientSeries>> {
    if n_patients == 0 {
        return Err(Error::Config("n_patients must be >= 1".into()));
    }
    let config = PhantomConfig { seed, ..config.clone() };
    (0..n_patients)
        .map(|i| generate_patient(&config, &patient_id(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_config() -> PhantomConfig {
        PhantomConfig {
            effect_jitter_sd: 0.0,
            center_jitter_vox: 0.0,
            size_jitter: 0.0,
            intensity_jitter: 0.0,
            ..PhantomConfig::default()
        }
    }

    /// Brute-force voxel count of an ellipsoid over the whole grid.
    fn count_voxels(e: &Ellipsoid, n: usize) -> usize {
        let mut c = 0;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let s: f64 = (0..3)
                        .map(|a| ((([x, y, z][a] as f64) - e.center[a]) / e.semi_axes[a]).powi(2))
                        .sum();
                    if s <= 1.0 {
                        c += 1;
                    }
                }
            }
        }
        c
    }

    #[test]
    fn zero_effect_with_shared_noise_is_bitwise_constant() {
        let cfg = PhantomConfig {
            effect_scale: 0.0,
            shared_noise: true,
            ..PhantomConfig::default()
        };
        let s = generate_patient(&cfg, "P1").unwrap();
        assert_eq!(s.records.len(), 6);
        for r in &s.records[1..] {
            assert_eq!(r.image.values(), s.records[0].image.values());
        }
    }

    #[test]
    fn prostate_volume_ratio_follows_cubic_scaling() {
        let mut cfg = quiet_config();
        cfg.include_sim = false;
        for o in cfg.organs.iter_mut().filter(|o| o.label == TissueLabel::Prostate) {
            o.volume_rate = 0.02;
        }
        let s = generate_patient(&cfg, "P1").unwrap();
        let f1 = s.records[0].mask(Organ::Prostate).unwrap().count_nonzero() as f64;
        let f5 = s.records[4].mask(Organ::Prostate).unwrap().count_nonzero() as f64;
        let expected = 1.02f64.powi(12);
        assert!(
            ((f5 / f1) / expected - 1.0).abs() < 0.03,
            "ratio {} vs {expected}",
            f5 / f1
        );
        // Oracle: rasterize the analytic ellipsoids over the full grid.
        let spec = cfg.organs.iter().find(|o| o.label == TissueLabel::Prostate).unwrap();
        let o1 = count_voxels(&spec.base_shape, 64) as f64;
        let o5 = count_voxels(&spec.base_shape.scaled(1.02f64.powi(4)), 64) as f64;
        assert_eq!((f1, f5), (o1, o5));
    }

    #[test]
    fn masks_match_analytic_rasterization() {
        let s = generate_patient(&PhantomConfig::default(), "P9").unwrap();
        let gt = &s.ground_truth;
        for r in &s.records {
            let steps = r.fraction_index.saturating_sub(1);
            for (i, o) in gt.organs.iter().enumerate() {
                let Some(organ) = o.label.organ() else { continue };
                let (shape, ..) = o.at(steps, gt.effect_scale);
                let later: Vec<Ellipsoid> = gt.organs[i + 1..]
                    .iter()
                    .map(|l| l.at(steps, gt.effect_scale).0)
                    .collect();
                let m = r.mask(organ).unwrap();
                for z in 0..64 {
                    for y in 0..64 {
                        for x in 0..64 {
                            let p = [x, y, z];
                            let visible = shape.contains(p) && !later.iter().any(|l| l.contains(p));
                            assert_eq!(m.get(x, y, z) == 1, visible);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn monotone_organ_volumes() {
        let s = generate_patient(&PhantomConfig::default(), "P3").unwrap();
        let counts = |organ| -> Vec<usize> {
            s.records
                .iter()
                .filter(|r| !r.is_sim())
                .map(|r| r.mask(organ).unwrap().count_nonzero())
                .collect()
        };
        let p = counts(Organ::Prostate);
        let b = counts(Organ::Bladder);
        assert!(p.windows(2).all(|w| w[1] >= w[0]), "{p:?}");
        assert!(b.windows(2).all(|w| w[1] <= w[0]), "{b:?}");
        assert!(p[4] > p[0] && b[4] < b[0]);
    }

    #[test]
    fn sim_and_f1_differ_only_by_noise() {
        // Mean |mean(Sim - F1)| over the prostate across seeds stays below
        // 3·σ/√N (its expectation is 2/√π·σ/√N ≈ 1.13·σ/√N).
        let cfg = PhantomConfig {
            grid_size: 32,
            organs: vec![OrganSpec {
                label: TissueLabel::Prostate,
                base_shape: Ellipsoid {
                    center: [16.0; 3],
                    semi_axes: [6.0; 3],
                },
                base_intensity: 0.5,
                base_heterogeneity: 0.05,
                volume_rate: 0.03,
                intensity_rate: -0.02,
                heterogeneity_rate: 0.01,
            }],
            n_fractions: 2,
            ..quiet_config()
        };
        let mut acc = 0.0;
        let mut n_vox = 0usize;
        for seed in 0..100 {
            let s = generate_patient(&PhantomConfig { seed, ..cfg.clone() }, "P").unwrap();
            let (sim, f1) = (&s.records[0], &s.records[1]);
            assert!(sim.is_sim());
            let m = f1.mask(Organ::Prostate).unwrap();
            assert_eq!(m, sim.mask(Organ::Prostate).unwrap());
            n_vox = m.count_nonzero();
            let diff: f64 = sim
                .image
                .values()
                .iter()
                .zip(f1.image.values())
                .zip(m.values())
                .filter(|(_, &mv)| mv == 1)
                .map(|((&a, &b), _)| (a - b) as f64)
                .sum::<f64>()
                / n_vox as f64;
            acc += diff.abs();
        }
        let bound = 3.0 * cfg.noise_sd / (n_vox as f64).sqrt();
        assert!(acc / 100.0 < bound, "{} >= {bound}", acc / 100.0);
    }

    #[test]
    fn day_offsets_and_indices() {
        let s = generate_patient(&PhantomConfig::default(), "P2").unwrap();
        let idx: Vec<u32> = s.records.iter().map(|r| r.fraction_index).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4, 5]);
        let days: Vec<i32> = s.records.iter().map(|r| r.day_offset).collect();
        assert_eq!(days, vec![-7, 0, 2, 4, 6, 8]);
    }

    #[test]
    fn cohort_is_deterministic_with_unique_ids() {
        let cfg = PhantomConfig {
            grid_size: 32,
            organs: vec![],
            n_fractions: 2,
            ..PhantomConfig::default()
        };
        let a = cohort(&cfg, 152, 5).unwrap();
        assert_eq!(a.len(), 152);
        let ids: std::collections::BTreeSet<_> = a.iter().map(|s| s.patient_id.clone()).collect();
        assert_eq!(ids.len(), 152);
        let b = cohort(&cfg, 152, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (r, q) in x.records.iter().zip(&y.records) {
                assert_eq!(r, q);
            }
        }
        assert!(cohort(&cfg, 0, 5).is_err());
    }

    #[test]
    fn jittered_cohort_has_varying_volume_ratios() {
        let cfg = PhantomConfig {
            include_sim: false,
            ..PhantomConfig::default()
        };
        let c = cohort(&cfg, 12, 1).unwrap();
        let ratios: Vec<f64> = c
            .iter()
            .map(|s| {
                let f = |r: &Arc<FractionRecord>| r.mask(Organ::Prostate).unwrap().count_nonzero();
                f(s.last_fraction().unwrap()) as f64 / f(s.first_fraction().unwrap()) as f64
            })
            .collect();
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (ratios.len() - 1) as f64;
        assert!(var.sqrt() > 0.0);
    }

    #[test]
    fn config_errors() {
        let mut cfg = PhantomConfig::default();
        cfg.organs[3].base_shape.semi_axes = [30.0, 30.0, 30.0];
        assert!(matches!(generate_patient(&cfg, "P"), Err(Error::Config(_))));
        let cfg = PhantomConfig {
            grid_size: 16,
            ..PhantomConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PhantomConfig {
            n_fractions: 1,
            ..PhantomConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = PhantomConfig::default();
        cfg.organs.push(cfg.organs[3].clone());
        assert!(cfg.validate().is_err());
        let cfg = PhantomConfig {
            effect_scale: -1.0,
            ..PhantomConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn organs_fit_at_every_jittered_patient() {
        let c = cohort(&PhantomConfig::default(), 40, 3);
        assert!(c.is_ok(), "{:?}", c.err());
    }
}
