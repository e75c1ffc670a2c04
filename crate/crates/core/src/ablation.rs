//! Input ablations against a frozen model: organ regions zeroed, boxed out,
//! exclusively retained, or replaced by their binary masks.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataio::{make_cohort_pairs, FractionRecord, Organ, PairMode};
use crate::error::{Error, Result};
use crate::evaluation::{collect_logits, metric_report, MetricReport};
use crate::model::SiameseModel;
use crate::morphology::{box_mask, dilate, union};
use crate::phantom::PatientSeries;
use crate::volume::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    OrganMasked,
    BoxMasked,
    OnlyOrgan,
    MaskOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrganSet {
    Prostate,
    Bladder,
    Both,
}

impl OrganSet {
    pub fn organs(self) -> &'static [Organ] {
        match self {
            OrganSet::Prostate => &[Organ::Prostate],
            OrganSet::Bladder => &[Organ::Bladder],
            OrganSet::Both => &[Organ::Prostate, Organ::Bladder],
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationMode::OrganMasked => "organ_masked",
            AblationMode::BoxMasked => "box_masked",
            AblationMode::OnlyOrgan => "only_organ",
            AblationMode::MaskOnly => "mask_only",
        })
    }
}

impl fmt::Display for OrganSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OrganSet::Prostate => "prostate",
            OrganSet::Bladder => "bladder",
            OrganSet::Both => "both",
        })
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Invalid(format!("unknown ablation mode `{s}`")))
    }
}

impl FromStr for OrganSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Invalid(format!("unknown organ set `{s}`")))
    }
}

fn default_dilation() -> usize {
    2
}

fn default_connectivity() -> u32 {
    26
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub mode: AblationMode,
    pub organs: OrganSet,
    #[serde(default = "default_dilation")]
    pub dilation_voxels: usize,
    /// Only the 3×3×3 (26-connected) element is supported.
    #[serde(default = "default_connectivity")]
    pub connectivity: u32,
}

impl AblationSpec {
    pub fn new(mode: AblationMode, organs: OrganSet) -> Self {
        Self {
            mode,
            organs,
            dilation_voxels: default_dilation(),
            connectivity: default_connectivity(),
        }
    }

    pub fn name(&self) -> String {
        format!("{}({})", self.mode, self.organs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.connectivity != 26 {
            return Err(Error::Config(format!(
                "connectivity {} unsupported; only 26 is implemented",
                self.connectivity
            )));
        }
        Ok(())
    }

    /// The twelve mode × organ-set combinations.
    pub fn all() -> Vec<AblationSpec> {
        let mut out = Vec::new();
        for mode in [
            AblationMode::OrganMasked,
            AblationMode::BoxMasked,
            AblationMode::OnlyOrgan,
            AblationMode::MaskOnly,
        ] {
            for organs in [OrganSet::Prostate, OrganSet::Bladder, OrganSet::Both] {
                out.push(AblationSpec::new(mode, organs));
            }
        }
        out
    }
}

/// Voxels whose image values a spec replaces or keeps, as a mask.
fn region(record: &FractionRecord, spec: &AblationSpec) -> Result<Mask> {
    let masks = spec
        .organs
        .organs()
        .iter()
        .map(|&o| record.mask(o))
        .collect::<Result<Vec<_>>>()?;
    match spec.mode {
        AblationMode::MaskOnly => union(&masks),
        AblationMode::BoxMasked => {
            let boxes = masks
                .iter()
                .map(|m| {
                    let d = dilate(m, spec.dilation_voxels)?;
                    Ok(d.bounding_box().map(|b| box_mask(&d, &b)).unwrap_or(d))
                })
                .collect::<Result<Vec<_>>>()?;
            union(&boxes.iter().collect::<Vec<_>>())
        }
        AblationMode::OrganMasked | AblationMode::OnlyOrgan => dilate(&union(&masks)?, spec.dilation_voxels),
    }
}

/// Applies `spec` to the image; masks are carried over unchanged.
pub fn ablate(record: &FractionRecord, spec: &AblationSpec) -> Result<FractionRecord> {
    spec.validate()?;
    let region = region(record, spec)?;
    let mut image = record.image.clone();
    let keep_inside = match spec.mode {
        AblationMode::MaskOnly => {
            image = region.map(|v| v as f32);
            None
        }
        AblationMode::OrganMasked | AblationMode::BoxMasked => Some(false),
        AblationMode::OnlyOrgan => Some(true),
    };
    if let Some(keep_inside) = keep_inside {
        for (v, &m) in image.values_mut().iter_mut().zip(region.values()) {
            if (m == 1) != keep_inside {
                *v = 0.0;
            }
        }
    }
    Ok(FractionRecord {
        image,
        ..record.clone()
    })
}

pub fn ablate_series(series: &PatientSeries, spec: &AblationSpec) -> Result<PatientSeries> {
    Ok(PatientSeries {
        patient_id: series.patient_id.clone(),
        records: series
            .records
            .iter()
            .map(|r| ablate(r, spec).map(Arc::new))
            .collect::<Result<_>>()?,
        ground_truth: series.ground_truth.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub pairing: PairMode,
    pub metrics: MetricReport,
    /// Difference from the unablated baseline; zero on the baseline row.
    pub delta_accuracy: f64,
    pub delta_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `baseline` or the ablation name, e.g. `organ_masked(prostate)`.
    pub name: String,
    pub spec: Option<AblationSpec>,
    pub cells: Vec<AblationCell>,
}

impl AblationRow {
    pub fn cell(&self, pairing: PairMode) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.pairing == pairing)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// How the per-cell SDs were obtained.
    pub sd_method: String,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// One line per row; baseline values are absolute, other rows are
    /// deltas from the baseline with bootstrap SDs.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let pairings: Vec<PairMode> = self
            .rows
            .first()
            .map_or(Vec::new(), |r| r.cells.iter().map(|c| c.pairing).collect());
        write!(w, "row")?;
        for p in &pairings {
            write!(w, ",{p}_acc,{p}_acc_sd,{p}_auc,{p}_auc_sd")?;
        }
        writeln!(w)?;
        for (i, r) in self.rows.iter().enumerate() {
            write!(w, "{}", r.name)?;
            for c in &r.cells {
                let (acc, auc) = if i == 0 {
                    (c.metrics.accuracy, c.metrics.auc)
                } else {
                    (c.delta_accuracy, c.delta_auc)
                };
                write!(w, ",{acc},{},{auc},{}", c.metrics.accuracy_sd, c.metrics.auc_sd)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn cell_metrics(
    model: &mut SiameseModel,
    series: &[PatientSeries],
    pairing: PairMode,
    n_bootstrap: usize,
    seed: u64,
) -> Result<MetricReport> {
    let pairs = make_cohort_pairs(series, pairing)?;
    let records = collect_logits(model, &pairs)?;
    metric_report(&records, n_bootstrap, 0.95, seed)
}

/// Baseline row then one row per spec, each evaluated on F1–FL and all
/// pairs of `test` (identical pairs excluded).
pub fn run_suite(
    model: &mut SiameseModel,
    test: &[PatientSeries],
    specs: &[AblationSpec],
    n_bootstrap: usize,
    seed: u64,
) -> Result<AblationReport> {
    let pairings = [PairMode::F1Fl, PairMode::All];
    let mut baseline = Vec::new();
    for &p in &pairings {
        baseline.push(cell_metrics(model, test, p, n_bootstrap, seed)?);
    }
    let mut rows = vec![AblationRow {
        name: "baseline".into(),
        spec: None,
        cells: pairings
            .iter()
            .zip(&baseline)
            .map(|(&p, m)| AblationCell {
                pairing: p,
                metrics: m.clone(),
                delta_accuracy: 0.0,
                delta_auc: 0.0,
            })
            .collect(),
    }];
    for spec in specs {
        let ablated = test
            .iter()
            .map(|s| ablate_series(s, spec))
            .collect::<Result<Vec<_>>>()?;
        let mut cells = Vec::new();
        for (&p, base) in pairings.iter().zip(&baseline) {
            let m = cell_metrics(model, &ablated, p, n_bootstrap, seed)?;
            cells.push(AblationCell {
                pairing: p,
                delta_accuracy: m.accuracy - base.accuracy,
                delta_auc: m.auc - base.auc,
                metrics: m,
            });
        }
        rows.push(AblationRow {
            name: spec.name(),
            spec: Some(*spec),
            cells,
        });
    }
    Ok(AblationReport {
        rows,
        sd_method: format!("bootstrap ({n_bootstrap} resamples of test pairs)"),
    })
}
