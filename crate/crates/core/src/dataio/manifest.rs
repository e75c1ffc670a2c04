//! Cohort manifest: one JSON object per line, one line per record.
//!
//! ```text
//! {"patient_id":"P0001","fraction_index":1,"day_offset":0,
//!  "files":{"image":"P0001/F1_image.frv","prostate":"P0001/F1_prostate.frv",...}}
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::frv1::{read_image, read_mask, write_image, write_mask};
use super::{FractionRecord, Organ};
use crate::error::{Error, Result};
use crate::phantom::PatientSeries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub fraction_index: u32,
    pub day_offset: i32,
    pub files: BTreeMap<String, String>,
}

fn record_stem(r: &FractionRecord) -> String {
    if r.is_sim() {
        "Sim".into()
    } else {
        format!("F{}", r.fraction_index)
    }
}

/// Writes every record as FRV1 files under `dir` and the manifest to
/// `dir/manifest.jsonl`. Returns the manifest path.
pub fn save_cohort(dir: impl AsRef<Path>, cohort: &[PatientSeries]) -> Result<std::path::PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut out = BufWriter::new(File::create(&manifest_path)?);
    for series in cohort {
        fs::create_dir_all(dir.join(&series.patient_id))?;
        for r in &series.records {
            let stem = record_stem(r);
            let mut files = BTreeMap::new();
            let rel = format!("{}/{stem}_image.frv", series.patient_id);
            write_image(dir.join(&rel), &r.image)?;
            files.insert("image".to_string(), rel);
            for (organ, mask) in &r.masks {
                let rel = format!("{}/{stem}_{organ}.frv", series.patient_id);
                write_mask(dir.join(&rel), mask)?;
                files.insert(organ.name().to_string(), rel);
            }
            let entry = ManifestEntry {
                patient_id: r.patient_id.clone(),
                fraction_index: r.fraction_index,
                day_offset: r.day_offset,
                files,
            };
            serde_json::to_writer(&mut out, &entry)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(manifest_path)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

/// Loads a manifest written by [`save_cohort`]. Records are grouped per
/// patient in manifest order and sorted by fraction index.
pub fn load_cohort(manifest: impl AsRef<Path>) -> Result<Vec<PatientSeries>> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(manifest)?;
    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<String, Vec<Arc<FractionRecord>>> = BTreeMap::new();
    for e in entries {
        let image_rel = e
            .files
            .get("image")
            .ok_or_else(|| Error::Format(format!("{} F{} has no image", e.patient_id, e.fraction_index)))?;
        let image = read_image(base.join(image_rel))?;
        let mut masks = BTreeMap::new();
        for (key, rel) in &e.files {
            if key == "image" {
                continue;
            }
            let organ: Organ = key.parse()?;
            masks.insert(organ, read_mask(base.join(rel))?);
        }
        let record = FractionRecord {
            patient_id: e.patient_id.clone(),
            fraction_index: e.fraction_index,
            day_offset: e.day_offset,
            image,
            masks,
        };
        record.validate()?;
        if !grouped.contains_key(&e.patient_id) {
            order.push(e.patient_id.clone());
        }
        grouped.entry(e.patient_id).or_default().push(Arc::new(record));
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let mut records = grouped.remove(&id).unwrap_or_default();
            records.sort_by_key(|r| r.fraction_index);
            PatientSeries {
                patient_id: id,
                records,
                ground_truth: Default::default(),
            }
        })
        .collect())
}
