//! Run configuration: one TOML file, unknown keys rejected.
//!
//! ```toml
//! seed = 0
//!
//! [cohort]
//! n_patients = 100
//! split = [0.6, 0.2, 0.2]
//! crop_dims = [64, 64, 64]
//! center_on = "prostate"
//!
//! [phantom]          # phantom generator fields, all optional
//! grid_size = 64
//!
//! [model]            # encoder fields, all optional
//! input_pool = 2
//!
//! [stage1]           # F1–FL stage
//! epochs = 10
//!
//! [stage2]           # all-pairs stage, initialized from the best stage-1 epoch
//! epochs = 10
//!
//! [evaluation]
//! n_bootstrap = 1000
//! level = 0.95
//!
//! [saliency]
//! threshold = 0.3
//! dilation = 2
//! side = "later"     # later | first | second
//!
//! [ablation]
//! n_bootstrap = 200
//! specs = [{ mode = "organ_masked", organs = "prostate" }]   # default: all twelve
//!
//! [stats]
//! organs = ["prostate", "bladder"]
//!
//! [study]
//! port = 8080
//! task_type = "full_volume"
//! ```
//!
//! The top-level `seed` overrides every seed inside the blocks.

use std::path::Path;

use anyhow::{bail, Context};
use fractrack_core::ablation::AblationSpec;
use fractrack_core::model::ModelConfig;
use fractrack_core::phantom::{derive_seed, PhantomConfig};
use fractrack_core::training::TrainConfig;
use fractrack_core::{Dims, Organ, PairMode};
use fractrack_studysvc::TaskType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub cohort: CohortSection,
    pub phantom: PhantomConfig,
    pub model: ModelConfig,
    pub stage1: TrainSection,
    pub stage2: TrainSection,
    pub evaluation: EvaluationSection,
    pub saliency: SaliencySection,
    pub ablation: AblationSection,
    pub stats: StatsSection,
    pub study: StudySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cohort: CohortSection::default(),
            phantom: PhantomConfig::default(),
            model: ModelConfig::default(),
            stage1: TrainSection::default(),
            stage2: TrainSection::default(),
            evaluation: EvaluationSection::default(),
            saliency: SaliencySection::default(),
            ablation: AblationSection::default(),
            stats: StatsSection::default(),
            study: StudySection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSection {
    pub n_patients: usize,
    /// Train, validation and test fractions of patients.
    pub split: [f64; 3],
    pub crop_dims: Dims,
    pub center_on: Organ,
}

impl Default for CohortSection {
    fn default() -> Self {
        Self {
            n_patients: 100,
            split: [0.6, 0.2, 0.2],
            crop_dims: [64, 64, 64],
            center_on: Organ::Prostate,
        }
    }
}

/// Training stage settings; the pairing is fixed by the stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: 10,
            base_lr: d.base_lr,
            lr_decay_factor: d.lr_decay_factor,
            lr_decay_every: d.lr_decay_every,
            batch_size: d.batch_size,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, stage: PairMode, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            base_lr: self.base_lr,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_every: self.lr_decay_every,
            batch_size: self.batch_size,
            stage,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub n_bootstrap: usize,
    pub level: f64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            n_bootstrap: 1000,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SaliencySide {
    Later,
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencySection {
    pub threshold: f64,
    pub dilation: usize,
    pub side: SaliencySide,
}

impl Default for SaliencySection {
    fn default() -> Self {
        Self {
            threshold: 0.3,
            dilation: 2,
            side: SaliencySide::Later,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub specs: Vec<AblationSpec>,
    pub n_bootstrap: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            specs: AblationSpec::all(),
            n_bootstrap: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsSection {
    pub organs: Vec<Organ>,
}

impl Default for StatsSection {
    fn default() -> Self {
        Self {
            organs: vec![Organ::Prostate, Organ::Bladder],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySection {
    pub port: u16,
    pub task_type: TaskType,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            port: 8080,
            task_type: TaskType::FullVolume,
        }
    }
}

impl RunConfig {
    /// Reads `path`, or the defaults when `None`.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Pushes the global seed into every block.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.phantom.seed = seed;
        self.model.seed = derive_seed(seed, "model");
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.phantom.validate()?;
        self.model.validate()?;
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            s.train_config(PairMode::F1Fl, 0)
                .validate()
                .with_context(|| format!("[{name}]"))?;
        }
        if self.cohort.n_patients < 3 {
            bail!("cohort.n_patients must be >= 3");
        }
        if self.cohort.crop_dims != self.model.input_dims {
            bail!(
                "cohort.crop_dims {:?} must equal model.input_dims {:?}",
                self.cohort.crop_dims,
                self.model.input_dims
            );
        }
        if self.cohort.crop_dims.iter().any(|&d| d > self.phantom.grid_size) {
            bail!("cohort.crop_dims exceed phantom.grid_size {}", self.phantom.grid_size);
        }
        if self.evaluation.n_bootstrap == 0 || self.ablation.n_bootstrap == 0 {
            bail!("n_bootstrap must be >= 1");
        }
        if !(self.evaluation.level > 0.0 && self.evaluation.level < 1.0) {
            bail!("evaluation.level must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.saliency.threshold) {
            bail!("saliency.threshold must lie in [0, 1]");
        }
        for spec in &self.ablation.specs {
            spec.validate()?;
        }
        if self.stats.organs.is_empty() {
            bail!("stats.organs must not be empty");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
