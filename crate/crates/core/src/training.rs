//! Curriculum training: a first stage on F1–FL pairs, then a second stage on
//! all pairs starting from the best first-stage checkpoint.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{FractionRecord, OrderedPair, PairMode};
use crate::error::{Error, Result};
use crate::model::{loss, Checkpoint, ModelConfig, SiameseModel};
use crate::nn::{Adam, Tensor};
use crate::phantom::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Minimum number of pairs per optimizer step. Batches hold whole
    /// patients so each image is encoded once per step.
    pub batch_size: usize,
    pub stage: PairMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            base_lr: 1e-3,
            lr_decay_factor: 0.5,
            lr_decay_every: 20,
            batch_size: 16,
            stage: PairMode::F1Fl,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor {} outside (0, 1]",
                self.lr_decay_factor
            )));
        }
        if !(self.base_lr > 0.0) || self.lr_decay_every == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "base_lr, lr_decay_every and batch_size must be positive".into(),
            ));
        }
        if self.stage == PairMode::SimF1 {
            return Err(Error::Config("training stage must be f1fl or all".into()));
        }
        Ok(())
    }

    /// `base_lr · decay^⌊epoch / every⌋`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.base_lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// One checkpoint per epoch, aligned with `history`.
    pub checkpoints: Vec<Checkpoint>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn best(&self) -> &Checkpoint {
        &self.checkpoints[self.best_epoch]
    }

    pub fn write_loss_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "epoch,lr,train_loss,val_loss")?;
        for r in &self.history {
            writeln!(w, "{},{},{},{}", r.epoch, r.lr, r.train_loss, r.val_loss)?;
        }
        Ok(())
    }
}

/// Index of the smallest validation loss; the earliest epoch wins ties.
pub fn select_best(history: &[EpochRecord]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in history.iter().enumerate() {
        if best.is_none_or(|(_, l)| r.val_loss < l) {
            best = Some((i, r.val_loss));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::InsufficientData("no recorded epochs".into()))
}

/// Prepared model inputs for every distinct record referenced by `pairs`,
/// plus each pair as `(first, second, label)` indices into them.
struct PairIndex {
    inputs: Vec<Tensor>,
    pairs: Vec<(usize, usize, f64)>,
    patient_of_pair: Vec<usize>,
    n_patients: usize,
}

impl PairIndex {
    fn build(model: &SiameseModel, pairs: &[OrderedPair]) -> Result<Self> {
        let mut slot: HashMap<*const FractionRecord, usize> = HashMap::new();
        let mut patients: HashMap<&str, usize> = HashMap::new();
        let mut inputs = Vec::new();
        let mut out = Vec::with_capacity(pairs.len());
        let mut patient_of_pair = Vec::with_capacity(pairs.len());
        let mut index_of = |r: &Arc<FractionRecord>, inputs: &mut Vec<Tensor>| -> Result<usize> {
            if let Some(&i) = slot.get(&Arc::as_ptr(r)) {
                return Ok(i);
            }
            inputs.push(model.prepare(&r.image)?);
            slot.insert(Arc::as_ptr(r), inputs.len() - 1);
            Ok(inputs.len() - 1)
        };
        for p in pairs {
            let a = index_of(&p.first, &mut inputs)?;
            let b = index_of(&p.second, &mut inputs)?;
            out.push((a, b, p.label));
            let n = patients.len();
            patient_of_pair.push(*patients.entry(p.patient_id()).or_insert(n));
        }
        Ok(Self {
            inputs,
            pairs: out,
            patient_of_pair,
            n_patients: patients.len(),
        })
    }

    /// Batches of whole patients in a shuffled order, each holding at least
    /// `batch_size` pairs (the last may hold fewer). Image indices are local
    /// to the batch.
    fn batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<(Vec<usize>, Vec<(usize, usize, f64)>)> {
        let mut by_patient: Vec<Vec<usize>> = vec![Vec::new(); self.n_patients];
        for (i, &p) in self.patient_of_pair.iter().enumerate() {
            by_patient[p].push(i);
        }
        let mut order: Vec<usize> = (0..self.n_patients).collect();
        order.shuffle(rng);
        let mut out = Vec::new();
        let mut images: Vec<usize> = Vec::new();
        let mut local: HashMap<usize, usize> = HashMap::new();
        let mut batch = Vec::new();
        for p in order {
            for &i in &by_patient[p] {
                let (a, b, label) = self.pairs[i];
                let mut map = |g: usize| {
                    *local.entry(g).or_insert_with(|| {
                        images.push(g);
                        images.len() - 1
                    })
                };
                let (la, lb) = (map(a), map(b));
                batch.push((la, lb, label));
            }
            if batch.len() >= batch_size {
                out.push((std::mem::take(&mut images), std::mem::take(&mut batch)));
                local.clear();
            }
        }
        if !batch.is_empty() {
            out.push((images, batch));
        }
        out
    }
}

/// Mean loss over `pairs` in inference mode.
pub fn evaluate_loss(model: &mut SiameseModel, pairs: &[OrderedPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no pairs to evaluate".into()));
    }
    let index = PairIndex::build(model, pairs)?;
    mean_loss(model, &index)
}

fn mean_loss(model: &mut SiameseModel, index: &PairIndex) -> Result<f64> {
    let feats = model.encode_prepared(&index.inputs)?;
    let mut total = 0.0;
    for &(a, b, label) in &index.pairs {
        total += loss(model.logit_from_features(&feats[a], &feats[b]), label)?;
    }
    Ok(total / index.pairs.len() as f64)
}

/// Trains one stage. `init_from` seeds the parameters (the optimizer state
/// always starts fresh); otherwise the model is initialized from
/// `model_config.seed`.
pub fn train_stage(
    model_config: &ModelConfig,
    config: &TrainConfig,
    init_from: Option<&Checkpoint>,
    train: &[OrderedPair],
    val: &[OrderedPair],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientData(
            "training and validation pairs must be nonempty".into(),
        ));
    }
    let mut model = match init_from {
        Some(ckpt) => {
            if &ckpt.model != model_config {
                return Err(Error::Config(
                    "init_from checkpoint was trained with a different model configuration".into(),
                ));
            }
            ckpt.to_model()?
        }
        None => SiameseModel::new(model_config.clone())?,
    };
    let train_index = PairIndex::build(&model, train)?;
    let val_index = PairIndex::build(&model, val)?;
    let mut optimizer = Adam::new();
    let stage = config.stage.to_string();
    let mut history = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.learning_rate(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("epoch{epoch}")));
        let mut weighted = 0.0;
        let mut n_pairs = 0usize;
        for (bi, (images, pairs)) in train_index.batches(config.batch_size, &mut rng).into_iter().enumerate() {
            let inputs: Vec<Tensor> = images.iter().map(|&g| train_index.inputs[g].clone()).collect();
            model.zero_grad();
            let batch_loss = model.accumulate_gradients(&inputs, &pairs).map_err(|e| match e {
                Error::NonFinite(d) => Error::NonFinite(format!("{stage} epoch {epoch} batch {bi}: {d}")),
                other => other,
            })?;
            weighted += batch_loss * pairs.len() as f64;
            n_pairs += pairs.len();
            optimizer.update(lr, |f| model.visit_params(f));
        }
        let train_loss = weighted / n_pairs as f64;
        let val_loss = mean_loss(&mut model, &val_index)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "{stage} epoch {epoch}: validation loss {val_loss}"
            )));
        }
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
        });
        checkpoints.push(Checkpoint::from_model(&mut model, &stage, Some(epoch), Some(val_loss)));
    }
    let best_epoch = select_best(&history)?;
    Ok(TrainOutcome {
        history,
        checkpoints,
        best_epoch,
    })
}

#[derive(Debug, Clone)]
pub struct CurriculumOutcome {
    pub stage1: TrainOutcome,
    pub stage2: TrainOutcome,
}

impl CurriculumOutcome {
    pub fn best(&self) -> &Checkpoint {
        self.stage2.best()
    }
}

/// Stage 1 on F1–FL pairs, stage 2 on all pairs from the best stage-1
/// checkpoint.
pub fn train_curriculum(
    model_config: &ModelConfig,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    train: &[crate::phantom::PatientSeries],
    val: &[crate::phantom::PatientSeries],
) -> Result<CurriculumOutcome> {
    use crate::dataio::make_cohort_pairs;
    let s1 = TrainConfig {
        stage: PairMode::F1Fl,
        ..stage1.clone()
    };
    let s2 = TrainConfig {
        stage: PairMode::All,
        ..stage2.clone()
    };
    let first = train_stage(
        model_config,
        &s1,
        None,
        &make_cohort_pairs(train, PairMode::F1Fl)?,
        &make_cohort_pairs(val, PairMode::F1Fl)?,
    )?;
    let second = train_stage(
        model_config,
        &s2,
        Some(first.best()),
        &make_cohort_pairs(train, PairMode::All)?,
        &make_cohort_pairs(val, PairMode::All)?,
    )?;
    Ok(CurriculumOutcome {
        stage1: first,
        stage2: second,
    })
}
