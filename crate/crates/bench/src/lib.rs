//! Deterministic inputs shared by the benchmarks.

use fractrack_core::evaluation::LogitRecord;
use fractrack_core::phantom::{generate_patient, PhantomConfig};
use fractrack_core::stats::LmeObservation;
use fractrack_core::{Mask, Organ, VolumeGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// F1 image and prostate mask of one default phantom patient.
pub fn phantom_record() -> (VolumeGrid, Mask) {
    let series = generate_patient(&PhantomConfig::default(), "P0000").expect("default phantom");
    let r = series.first_fraction().expect("has F1");
    (r.image.clone(), r.mask(Organ::Prostate).expect("prostate mask").clone())
}

/// `n` scores with roughly balanced labels and frequent ties.
pub fn scored(n: usize, seed: u64) -> Vec<(f64, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let label = rng.random_bool(0.5);
            let s = (rng.random::<f64>() * 20.0).round() + if label { 3.0 } else { 0.0 };
            (s, label)
        })
        .collect()
}

/// Logit records for `n_patients` patients with five fractions each.
pub fn trend_records(n_patients: usize, seed: u64) -> Vec<LogitRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for p in 0..n_patients {
        let slope = 1.0 + 0.3 * (rng.random::<f64>() - 0.5);
        for second in 2..=5u32 {
            let dx = (second - 1) as i32;
            out.push(LogitRecord {
                patient_id: format!("P{p:04}"),
                first_fraction: 1,
                second_fraction: second,
                interval_days: 2 * dx,
                interval_fractions: dx,
                logit: slope * dx as f64 + 0.2 * (rng.random::<f64>() - 0.5),
                label: 1.0,
            });
        }
    }
    out
}

pub fn trend_observations(n_patients: usize, seed: u64) -> Vec<LmeObservation> {
    fractrack_core::stats::lme_observations(&trend_records(n_patients, seed))
}
