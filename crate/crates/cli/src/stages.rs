//! Pipeline stages. Each stage reads only files it declares through
//! [`StageIo::input`], writes only through [`StageIo::output`], and is
//! recorded in the run manifest when it completes.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use fractrack_core::ablation::{run_suite, AblationSpec};
use fractrack_core::dataio::{
    crop_series, load_cohort, make_pairs, read_image, save_cohort, split_patients, write_image, Split, SplitAssignment,
};
use fractrack_core::evaluation::{collect_logits, metric_report, pairwise_logit_analysis, LogitRecord, MetricReport};
use fractrack_core::interpret::{gradcam, group_average, later_side, peak_row, restrict_by_saliency, write_peak_csv};
use fractrack_core::model::{Checkpoint, Side};
use fractrack_core::phantom::{cohort, derive_seed, GroundTruth, PatientSeries};
use fractrack_core::stats::{
    fit_fixed_only, fit_lme, lme_observations, lrt_random_slope, organ_change, ttest_summaries, Alternative,
    OrganChangeReport, Summary,
};
use fractrack_core::training::{train_stage, TrainOutcome};
use fractrack_core::{BoundingBox, OrderedPair, PairMode, VolumeGrid};
use fractrack_studysvc::{read_pairs, write_pairs, AppState, ServiceConfig, StudyPair, TaskType};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{RunConfig, SaliencySide};
use crate::manifest::{sha256_file, RunManifest, StageRecord};
use crate::plot::write_heatmap;

pub const COHORT_MANIFEST: &str = "cohort/manifest.jsonl";
pub const GROUND_TRUTH: &str = "cohort/ground_truth.json";
pub const SPLITS: &str = "pairs/splits.json";
pub const BEST_CHECKPOINT: &str = "train/best.frck";
pub const METRICS: &str = "eval/metrics.json";
pub const LOGITS_ALL: &str = "eval/logits_all.jsonl";
pub const MAP_INDEX: &str = "saliency/maps.jsonl";
pub const CROP_INDEX: &str = "restrict/crops.jsonl";
pub const ABLATION_REPORT: &str = "ablate/report.json";
pub const LME_REPORT: &str = "stats/lme.json";
pub const ORGAN_CHANGE_REPORT: &str = "stats/organ_change.json";
pub const TESTS_REPORT: &str = "stats/tests.json";
pub const STUDY_PAIRS: &str = "study/pairs.jsonl";
pub const SUMMARY: &str = "report/summary.md";

pub fn pairs_file(mode: PairMode) -> String {
    format!("pairs/{mode}.jsonl")
}

/// Pipeline state rooted at the output directory.
pub struct Ctx {
    pub root: PathBuf,
    pub config: RunConfig,
    pub config_hash: String,
    manifest: RunManifest,
}

impl Ctx {
    pub fn new(root: PathBuf, config: RunConfig) -> anyhow::Result<Self> {
        std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        let mut manifest = RunManifest::load_or_default(&root)?;
        let config_hash = config.hash();
        manifest.config_hash = config_hash.clone();
        Ok(Self {
            root,
            config,
            config_hash,
            manifest,
        })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn io(&self) -> StageIo<'_> {
        StageIo {
            ctx: self,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn finish(&mut self, stage: &str, io: StageRecord) -> anyhow::Result<()> {
        let root = self.root.clone();
        self.manifest.record(&root, stage, io)?;
        self.manifest.save(&root)
    }
}

/// Declared reads and writes of one stage.
struct StageIo<'a> {
    ctx: &'a Ctx,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl StageIo<'_> {
    /// Registers `rel` as consumed; it must exist.
    fn input(&mut self, rel: &str) -> anyhow::Result<PathBuf> {
        let path = self.ctx.root.join(rel);
        if !path.exists() {
            bail!("missing input {rel}; run the stage that produces it first");
        }
        self.inputs.insert(rel.to_string(), sha256_file(&path)?);
        Ok(path)
    }

    /// Registers an input given on the command line, relative to the output
    /// directory when it lies inside it.
    fn external_input(&mut self, path: &Path) -> anyhow::Result<PathBuf> {
        let key = path
            .strip_prefix(&self.ctx.root)
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_else(|_| path.to_string_lossy().into_owned());
        if !path.exists() {
            bail!("missing input {}", path.display());
        }
        self.inputs.insert(key, sha256_file(path)?);
        Ok(path.to_path_buf())
    }

    fn output(&mut self, rel: &str) -> anyhow::Result<PathBuf> {
        let path = self.ctx.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.outputs.push(rel.to_string());
        Ok(path)
    }

    /// Writes `value` as pretty JSON with the config hash as its first key.
    fn json(&mut self, rel: &str, value: impl Serialize) -> anyhow::Result<()> {
        let mut obj = serde_json::Map::new();
        obj.insert("config_hash".into(), Value::String(self.ctx.config_hash.clone()));
        match serde_json::to_value(value)? {
            Value::Object(m) => obj.extend(m),
            other => {
                obj.insert("data".into(), other);
            }
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(obj))?;
        text.push('\n');
        std::fs::write(self.output(rel)?, text)?;
        Ok(())
    }

    fn jsonl<T: Serialize>(&mut self, rel: &str, rows: &[T]) -> anyhow::Result<()> {
        let mut w = BufWriter::new(File::create(self.output(rel)?)?);
        for r in rows {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    fn writer(&mut self, rel: &str) -> anyhow::Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.output(rel)?)?))
    }

    fn record(self) -> StageRecord {
        StageRecord {
            config_hash: self.ctx.config_hash.clone(),
            inputs: self.inputs,
            outputs: self.outputs,
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
        }
    }
    Ok(out)
}

/// File-name form of a pair id, e.g. `P0003_F1-F5`.
fn file_stem(pair_id: &str) -> String {
    pair_id.replace(':', "_").replace('>', "-")
}

/// One line of a pair file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub pair_id: String,
    pub patient_id: String,
    /// 0 is the Sim scan.
    pub first_fraction: u32,
    pub second_fraction: u32,
    pub label: f64,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroundTruthFile {
    patients: BTreeMap<String, GroundTruth>,
}

/// The cohort as written by `synth`, with ground truth reattached.
fn read_cohort(io: &mut StageIo) -> anyhow::Result<Vec<PatientSeries>> {
    let manifest = io.input(COHORT_MANIFEST)?;
    let truth: GroundTruthFile = read_json(&io.input(GROUND_TRUTH)?)?;
    let mut series = load_cohort(manifest)?;
    for s in &mut series {
        s.ground_truth = truth
            .patients
            .get(&s.patient_id)
            .cloned()
            .ok_or_else(|| anyhow!("no ground truth for {}", s.patient_id))?;
    }
    Ok(series)
}

/// Cohort cropped to the model grid.
fn read_model_cohort(io: &mut StageIo) -> anyhow::Result<Vec<PatientSeries>> {
    let c = &io.ctx.config.cohort;
    let (center, dims) = (c.center_on, c.crop_dims);
    read_cohort(io)?
        .iter()
        .map(|s| crop_series(s, center, dims).map_err(Into::into))
        .collect()
}

fn resolve_pairs(entries: &[PairEntry], cohort: &[PatientSeries]) -> anyhow::Result<Vec<OrderedPair>> {
    let by_id: HashMap<&str, &PatientSeries> = cohort.iter().map(|s| (s.patient_id.as_str(), s)).collect();
    entries
        .iter()
        .map(|e| {
            let s = by_id
                .get(e.patient_id.as_str())
                .ok_or_else(|| anyhow!("pair {} names unknown patient", e.pair_id))?;
            let get = |i: u32| {
                s.fraction(i)
                    .cloned()
                    .ok_or_else(|| anyhow!("pair {}: {} has no record {i}", e.pair_id, e.patient_id))
            };
            Ok(OrderedPair::new(get(e.first_fraction)?, get(e.second_fraction)?)?)
        })
        .collect()
}

fn split_pairs(
    io: &mut StageIo,
    mode: PairMode,
    split: Split,
    cohort: &[PatientSeries],
) -> anyhow::Result<Vec<OrderedPair>> {
    let entries: Vec<PairEntry> = read_jsonl(&io.input(&pairs_file(mode))?)?;
    let kept: Vec<PairEntry> = entries.into_iter().filter(|e| e.split == split).collect();
    resolve_pairs(&kept, cohort)
}

fn load_checkpoint(io: &mut StageIo, ckpt: Option<&Path>) -> anyhow::Result<Checkpoint> {
    let path = match ckpt {
        Some(p) => io.external_input(p)?,
        None => io.input(BEST_CHECKPOINT)?,
    };
    Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))
}

pub fn synth(ctx: &mut Ctx) -> anyhow::Result<()> {
    let mut io = ctx.io();
    let cfg = &ctx.config;
    let series = cohort(&cfg.phantom, cfg.cohort.n_patients, cfg.seed)?;
    let dir = ctx.root.join("cohort");
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    save_cohort(&dir, &series)?;
    io.output(COHORT_MANIFEST)?;
    for s in &series {
        for r in &s.records {
            let stem = if r.is_sim() {
                "Sim".to_string()
            } else {
                format!("F{}", r.fraction_index)
            };
            io.output(&format!("cohort/{}/{stem}_image.frv", s.patient_id))?;
            for organ in r.masks.keys() {
                io.output(&format!("cohort/{}/{stem}_{organ}.frv", s.patient_id))?;
            }
        }
    }
    let truth = GroundTruthFile {
        patients: series
            .iter()
            .map(|s| (s.patient_id.clone(), s.ground_truth.clone()))
            .collect(),
    };
    io.json(GROUND_TRUTH, truth)?;
    let rec = io.record();
    ctx.finish("synth", rec)
}

pub fn pair(ctx: &mut Ctx, only: Option<PairMode>) -> anyhow::Result<()> {
    let mut io = ctx.io();
    let series = read_cohort(&mut io)?;
    let ids: Vec<String> = series.iter().map(|s| s.patient_id.clone()).collect();
    let splits = split_patients(&ids, ctx.config.cohort.split, derive_seed(ctx.config.seed, "split"))?;
    io.json(SPLITS, &splits)?;
    let has_sim = series.iter().all(|s| s.sim().is_some());
    let modes: Vec<PairMode> = match only {
        Some(m) => vec![m],
        None if has_sim => vec![PairMode::F1Fl, PairMode::All, PairMode::SimF1],
        None => vec![PairMode::F1Fl, PairMode::All],
    };
    for mode in modes {
        let mut rows = Vec::new();
        for s in &series {
            let split = splits.get(&s.patient_id).expect("every patient assigned");
            for p in make_pairs(s, mode)? {
                rows.push(PairEntry {
                    pair_id: p.id(),
                    patient_id: s.patient_id.clone(),
                    first_fraction: p.first.fraction_index,
                    second_fraction: p.second.fraction_index,
                    label: p.label,
                    split,
                });
            }
        }
        io.jsonl(&pairs_file(mode), &rows)?;
    }
    let rec = io.record();
    ctx.finish("pair", rec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TrainStage {
    F1fl,
    All,
    Curriculum,
}

fn write_outcome(io: &mut StageIo, mode: PairMode, outcome: &TrainOutcome) -> anyhow::Result<()> {
    let dir = format!("train/{mode}");
    outcome.write_loss_csv(io.writer(&format!("{dir}/loss.csv"))?)?;
    for (i, ckpt) in outcome.checkpoints.iter().enumerate() {
        ckpt.save(io.output(&format!("{dir}/epoch_{i:03}.frck"))?)?;
    }
    outcome.best().save(io.output(&format!("{dir}/best.frck"))?)?;
    Ok(())
}

pub fn train(ctx: &mut Ctx, stage: TrainStage, init_from: Option<&Path>) -> anyhow::Result<()> {
    let mut io = ctx.io();
    let cfg = ctx.config.clone();
    let cohort = read_model_cohort(&mut io)?;
    let mut summary = BTreeMap::new();
    let mut init = match init_from {
        Some(p) => Some(Checkpoint::load(io.external_input(p)?)?),
        None => None,
    };
    let mut last_best = None;
    if matches!(stage, TrainStage::F1fl | TrainStage::Curriculum) {
        let train_pairs = split_pairs(&mut io, PairMode::F1Fl, Split::Train, &cohort)?;
        let val_pairs = split_pairs(&mut io, PairMode::F1Fl, Split::Val, &cohort)?;
        let tc = cfg.stage1.train_config(PairMode::F1Fl, derive_seed(cfg.seed, "stage1"));
        let outcome = train_stage(&cfg.model, &tc, init.as_ref(), &train_pairs, &val_pairs)?;
        write_outcome(&mut io, PairMode::F1Fl, &outcome)?;
        summary.insert(
            "f1fl",
            json!({"best_epoch": outcome.best_epoch, "history": outcome.history}),
        );
        init = Some(outcome.best().clone());
        last_best = Some(outcome.best().clone());
    }
    if matches!(stage, TrainStage::All | TrainStage::Curriculum) {
        if init.is_none() && ctx.root.join("train/f1fl/best.frck").exists() {
            init = Some(Checkpoint::load(io.input("train/f1fl/best.frck")?)?);
        }
        let train_pairs = split_pairs(&mut io, PairMode::All, Split::Train, &cohort)?;
        let val_pairs = split_pairs(&mut io, PairMode::All, Split::Val, &cohort)?;
        let tc = cfg.stage2.train_config(PairMode::All, derive_seed(cfg.seed, "stage2"));
        let outcome = train_stage(&cfg.model, &tc, init.as_ref(), &train_pairs, &val_pairs)?;
        write_outcome(&mut io, PairMode::All, &outcome)?;
        summary.insert(
            "all",
            json!({"best_epoch": outcome.best_epoch, "history": outcome.history}),
        );
        last_best = Some(outcome.best().clone());
    }
    let best = last_best.expect("at least one stage trained");
    best.save(io.output(BEST_CHECKPOINT)?)?;
    io.json("train/summary.json", json!({ "stages": summary }))?;
    let rec = io.record();
    ctx.finish("train", rec)
}

fn write_logits(io: &mut StageIo, name: &str, records: &[LogitRecord]) -> anyhow::Result<()> {
    io.jsonl(&format!("eval/logits_{name}.jsonl"), records)?;
    let mut w = io.writer(&format!("eval/logits_{name}.csv"))?;
    writeln!(
        w,
        "patient_id,first_fraction,second_fraction,interval_days,interval_fractions,logit,label"
    )?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.patient_id, r.first_fraction, r.second_fraction, r.interval_days, r.interval_fractions, r.logit, r.label
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn eval(ctx: &mut Ctx, ckpt: Option<&Path>, pairs: Option<&Path>, bootstrap: Option<usize>) -> anyhow::Result<()> {
    let mut io = ctx.io();
    let cfg = ctx.config.clone();
    let n_bootstrap = bootstrap.unwrap_or(cfg.evaluation.n_bootstrap);
    if n_bootstrap == 0 {
        bail!("--bootstrap must be >= 1");
    }
    let checkpoint = load_checkpoint(&mut io, ckpt)?;
    let mut model = checkpoint.to_model()?;
    let cohort = read_model_cohort(&mut io)?;
    let mut sets: Vec<(String, Vec<OrderedPair>)> = Vec::new();
    match pairs {
        Some(p) => {
            let entries: Vec<PairEntry> = read_jsonl(&io.external_input(p)?)?;
            sets.push(("custom".into(), resolve_pairs(&entries, &cohort)?));
        }
        None => {
            for mode in [PairMode::F1Fl, PairMode::All, PairMode::SimF1] {
                if mode == PairMode::SimF1 && !ctx.root.join(pairs_file(mode)).exists() {
                    continue;
                }
                sets.push((mode.to_string(), split_pairs(&mut io, mode, Split::Test, &cohort)?));
            }
        }
    }
    let seed = derive_seed(cfg.seed, "eval");
    let mut metrics: BTreeMap<String, MetricReport> = BTreeMap::new();
    for (name, set) in &sets {
        let records = collect_logits(&mut model, set)?;
        metrics.insert(
            name.clone(),
            metric_report(&records, n_bootstrap, cfg.evaluation.level, seed)?,
        );
        write_logits(&mut io, name, &records)?;
        if name == "all" {
            let forward: Vec<LogitRecord> = records.iter().filter(|r| r.label == 1.0).cloned().collect();
            let analysis = pairwise_logit_analysis(&forward)?;
            analysis.write_csv(io.writer("eval/pairwise.csv")?)?;
            io.json("eval/pairwise.json", &analysis)?;
            write_heatmap(&analysis, io.writer("eval/pairwise.png")?)?;
        }
    }
    io.json(
        METRICS,
        json!({ "checkpoint_stage": checkpoint.stage, "metrics": metrics }),
    )?;
    let rec = io.record();
    ctx.finish("eval", rec)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MapEntry {
    pair_id: String,
    patient_id: String,
    first_fraction: u32,
    second_fraction: u32,
    side: Side,
    map: String,
}

/// Test-split F1→FL pairs (label 1).
fn forward_f1fl(io: &mut StageIo, cohort: &[PatientSeries]) -> anyhow::Result<Vec<(PairEntry, OrderedPair)>> {
    let entries: Vec<PairEntry> = read_jsonl(&io.input(&pairs_file(PairMode::F1Fl))?)?;
    let kept: Vec<PairEntry> = entries
        .into_iter()
        .filter(|e| e.split == Split::Test && e.label == 1.0)
        .collect();
    let pairs = resolve_pairs(&kept, cohort)?;
    Ok(kept.into_iter().zip(pairs).collect())
}

pub fn saliency(ctx: &mut Ctx, ckpt: Option<&Path>, side: Option<SaliencySide>) -> anyhow::Result<()> {
    let mut io = ctx.io();
    let cfg = ctx.config.saliency.clone();
    let side = side.unwrap_or(cfg.side);
    let mut model = load_checkpoint(&mut io, ckpt)?.to_model()?;
    let cohort = read_model_cohort(&mut io)?;
    let truth: HashMap<String, GroundTruth> = cohort
        .iter()
        .map(|s| (s.patient_id.clone(), s.ground_truth.clone()))
        .collect();
    let mut index = Vec::new();
    let mut rows = Vec::new();
    let mut maps: Vec<VolumeGrid> = Vec::new();
    for (entry, pair) in forward_f1fl(&mut io, &cohort)? {
        let s = match side {
            SaliencySide::Later => later_side(&pair),
            SaliencySide::First => Side::First,
            SaliencySide::Second => Side::Second,
        };
        let map = gradcam(&mut model, &pair, s)?;
        let rel = format!("saliency/maps/{}.frv", file_stem(&entry.pair_id));
        write_image(io.output(&rel)?, &map.grid)?;
        let effect = truth[&entry.patient_id].effect_organs();
        rows.push(peak_row(&map, &pair, &effect, cfg.dilation)?);
        index.push(MapEntry {
            pair_id: entry.pair_id.clone(),
            patient_id: entry.patient_id.clone(),
            first_fraction: entry.first_fraction,
            second_fraction: entry.second_fraction,
            side: s,
            map: rel,
        });
        maps.push(map.grid);
    }
    if maps.is_empty() {
        bail!("no test-split F1-FL pairs to explain");
    }
    io.jsonl(MAP_INDEX, &index)?;
    write_peak_csv(&rows, io.writer("saliency/peaks.csv")?)?;
    let mut tally: BTreeMap<String, usize> = BTreeMap::new();
    for r in &rows {
        *tally.entry(r.organ.clone()).or_default() += 1;
    }
    let inside = rows.iter().filter(|r| r.in_effect_region).count();
    io.json(
        "saliency/region_tally.json",
        json!({
            "n_maps": rows.len(),
            "peak_organ": tally,
            "in_effect_region": inside,
            "fraction_in_effect_region": inside as f64 / rows.len() as f64,
            "dilation": cfg.dilation,
        }),
    )?;
    let refs: Vec<&VolumeGrid> = maps.iter().collect();
    write_image(io.output("saliency/group_average.frv")?, &group_average(&refs)?)?;
    let rec = io.record();
    ctx.finish("saliency", rec)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CropEntry {
    pair_id: String,
    bbox: BoundingBox,
    threshold: f64,
    first_crop: String,
    second_crop: String,
}

/// Crops both images of each explained pair to the box where the map of
/// the explained side reaches the threshold.
pub fn restrict(ctx: &mut Ctx, threshold: Option<f64>) -> anyhow::Result<()> {
    let mut io = ctx.io();
    let threshold = threshold.unwrap_or(ctx.config.saliency.threshold);
    let cohort = read_model_cohort(&mut io)?;
    let index: Vec<MapEntry> = read_jsonl(&io.input(MAP_INDEX)?)?;
    let by_id: HashMap<&str, &PatientSeries> = cohort.iter().map(|s| (s.patient_id.as_str(), s)).collect();
    let mut rows = Vec::new();
    for e in &index {
        let s = by_id
            .get(e.patient_id.as_str())
            .ok_or_else(|| anyhow!("map {} names unknown patient", e.pair_id))?;
        let record = |i: u32| {
            s.fraction(i)
                .ok_or_else(|| anyhow!("{} has no record {i}", e.patient_id))
        };
        let (first, second) = (record(e.first_fraction)?, record(e.second_fraction)?);
        let map = read_image(io.input(&e.map)?)?;
        let explained = match e.side {
            Side::First => &first.image,
            Side::Second => &second.image,
        };
        let crop = restrict_by_saliency(explained, &map, threshold)?;
        let stem = file_stem(&e.pair_id);
        let (a, b) = (
            format!("restrict/crops/{stem}_first.frv"),
            format!("restrict/crops/{stem}_second.frv"),
        );
        write_image(io.output(&a)?, &first.image.crop_box(&crop.bbox)?)?;
        write_image(io.output(&b)?, &second.image.crop_box(&crop.bbox)?)?;
        rows.push(CropEntry {
            pair_id: e.pair_id.clone(),
            bbox: crop.bbox,
            threshold,
            first_crop: a,
            second_crop: b,
        });
    }
    io.jsonl(CROP_INDEX, &rows)?;
    let rec = io.record();
    ctx.finish("restrict", rec)
}

pub fn ablate(ctx: &mut Ctx, ckpt: Option<&Path>, specs: Option<&Path>) -> anyhow::Result<()> {
    let mut io = ctx.io();
    let cfg = ctx.config.clone();
    let specs: Vec<AblationSpec> = match specs {
        Some(p) => read_json(&io.external_input(p)?)?,
        None => cfg.ablation.specs.clone(),
    };
    for s in &specs {
        s.validate()?;
    }
    let mut model = load_checkpoint(&mut io, ckpt)?.to_model()?;
    let cohort = read_model_cohort(&mut io)?;
    let splits: SplitAssignment = read_json(&io.input(SPLITS)?)?;
    let test = splits.select(&cohort, Split::Test);
    let report = run_suite(
        &mut model,
        &test,
        &specs,
        cfg.ablation.n_bootstrap,
        derive_seed(cfg.seed, "ablate"),
    )?;
    io.json(ABLATION_REPORT, &report)?;
    report.write_csv(io.writer("ablate/report.csv")?)?;
    let rec = io.record();
    ctx.finish("ablate", rec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum StatsKind {
    Lme,
    OrganChange,
    Tests,
    All,
}

pub fn stats(ctx: &mut Ctx, kind: StatsKind) -> anyhow::Result<()> {
    if matches!(kind, StatsKind::Lme | StatsKind::All) {
        stats_lme(ctx)?;
    }
    if matches!(kind, StatsKind::OrganChange | StatsKind::All) {
        stats_organ_change(ctx)?;
    }
    if matches!(kind, StatsKind::Tests | StatsKind::All) {
        stats_tests(ctx)?;
    }
    Ok(())
}

fn stats_lme(ctx: &mut Ctx) -> anyhow::Result<()> {
    let mut io = ctx.io();
    let records: Vec<LogitRecord> = read_jsonl(&io.input(LOGITS_ALL)?)?;
    let obs = lme_observations(&records);
    let full = fit_lme(&obs)?;
    let reduced = fit_fixed_only(&obs)?;
    let lrt = lrt_random_slope(&full, &reduced)?;
    full.write_slopes_csv(io.writer("stats/slopes.csv")?)?;
    io.json(
        LME_REPORT,
        json!({ "random_slope": full, "fixed_only": reduced, "lrt": lrt }),
    )?;
    let rec = io.record();
    ctx.finish("stats-lme", rec)
}

fn stats_organ_change(ctx: &mut Ctx) -> anyhow::Result<()> {
    let mut io = ctx.io();
    let cohort = read_cohort(&mut io)?;
    let report = organ_change(&cohort, &ctx.config.stats.organs)?;
    io.json(ORGAN_CHANGE_REPORT, &report)?;
    report.write_csv(io.writer("stats/organ_change.csv")?)?;
    let rec = io.record();
    ctx.finish("stats-organ-change", rec)
}

fn summary_of(m: &MetricReport, auc: bool) -> Summary {
    let (mean, sd) = if auc {
        (m.auc, m.auc_sd)
    } else {
        (m.accuracy, m.accuracy_sd)
    };
    Summary {
        mean,
        sd,
        n: m.n_bootstrap,
    }
}

/// Rank and t tests of the organ changes, plus Welch comparisons of the
/// F1–FL and all-pairs metrics using their bootstrap SDs.
fn stats_tests(ctx: &mut Ctx) -> anyhow::Result<()> {
    let mut io = ctx.io();
    let organ: OrganChangeReport = read_json(&io.input(ORGAN_CHANGE_REPORT)?)?;
    organ.write_tests_csv(io.writer("stats/tests.csv")?)?;
    let metrics: Value = read_json(&io.input(METRICS)?)?;
    let metric = |name: &str| -> anyhow::Result<MetricReport> {
        Ok(serde_json::from_value(
            metrics["metrics"]
                .get(name)
                .cloned()
                .ok_or_else(|| anyhow!("{METRICS} has no `{name}` metrics"))?,
        )?)
    };
    let (f1fl, all) = (metric("f1fl")?, metric("all")?);
    let mut comparisons = BTreeMap::new();
    for (name, auc) in [("accuracy", false), ("auc", true)] {
        let t = ttest_summaries(
            &summary_of(&f1fl, auc),
            &summary_of(&all, auc),
            true,
            Alternative::TwoSided,
        );
        comparisons.insert(format!("f1fl_vs_all_{name}"), t.map_err(|e| e.to_string()));
    }
    let organ_tests: Vec<Value> = organ
        .changes
        .iter()
        .map(|c| {
            json!({
                "organ": c.organ,
                "quantity": c.quantity.name(),
                "median_change": c.median_change,
                "wilcoxon": c.wilcoxon,
                "welch": c.welch,
            })
        })
        .collect();
    io.json(
        TESTS_REPORT,
        json!({ "organ_tests": organ_tests, "metric_comparisons": comparisons }),
    )?;
    let rec = io.record();
    ctx.finish("stats-tests", rec)
}

/// Writes the reader-study pair file: one F1→FL pair per test patient, with
/// saliency crops when the restrict stage has run.
pub fn study_prepare(ctx: &mut Ctx) -> anyhow::Result<()> {
    let mut io = ctx.io();
    let manifest = io.input(COHORT_MANIFEST)?;
    let entries = fractrack_core::dataio::read_manifest(&manifest)?;
    let image_of: HashMap<(String, u32), String> = entries
        .iter()
        .filter_map(|e| {
            e.files
                .get("image")
                .map(|f| ((e.patient_id.clone(), e.fraction_index), f.clone()))
        })
        .collect();
    let crops: HashMap<String, CropEntry> = if ctx.root.join(CROP_INDEX).exists() {
        read_jsonl::<CropEntry>(&io.input(CROP_INDEX)?)?
            .into_iter()
            .map(|c| (c.pair_id.clone(), c))
            .collect()
    } else {
        HashMap::new()
    };
    let pair_entries: Vec<PairEntry> = read_jsonl(&io.input(&pairs_file(PairMode::F1Fl))?)?;
    let mut out = Vec::new();
    for e in pair_entries.iter().filter(|e| e.split == Split::Test && e.label == 1.0) {
        let path = |i: u32| {
            image_of
                .get(&(e.patient_id.clone(), i))
                .map(|f| PathBuf::from("../cohort").join(f))
                .ok_or_else(|| anyhow!("{} has no image for record {i}", e.patient_id))
        };
        let crop = crops.get(&e.pair_id);
        out.push(StudyPair {
            pair_id: e.pair_id.clone(),
            first: path(e.first_fraction)?,
            second: path(e.second_fraction)?,
            label: e.label,
            first_crop: crop.map(|c| PathBuf::from("..").join(&c.first_crop)),
            second_crop: crop.map(|c| PathBuf::from("..").join(&c.second_crop)),
        });
    }
    if ctx.config.study.task_type == TaskType::SaliencyRestricted && out.iter().any(|p| p.first_crop.is_none()) {
        bail!("study.task_type is saliency_restricted but some pairs have no crops; run `restrict` first");
    }
    write_pairs(io.output(STUDY_PAIRS)?, &out)?;
    let rec = io.record();
    ctx.finish("study", rec)
}

/// Serves the reader study until interrupted. Session logs live under
/// `study/logs` and are not part of the run manifest.
pub fn study_serve(ctx: &Ctx, port: Option<u16>, pairs: Option<&Path>) -> anyhow::Result<()> {
    let pairs_path = pairs
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.root.join(STUDY_PAIRS));
    let pairs = read_pairs(&pairs_path).with_context(|| format!("reading {}", pairs_path.display()))?;
    let metrics_path = ctx.root.join(METRICS);
    let model_report = if metrics_path.exists() {
        let v: Value = read_json(&metrics_path)?;
        v["metrics"]
            .get("f1fl")
            .cloned()
            .map(serde_json::from_value)
            .transpose()?
    } else {
        None
    };
    let state = AppState::open(ServiceConfig {
        log_dir: ctx.root.join("study/logs"),
        pairs,
        model_report,
    })?;
    let port = port.unwrap_or(ctx.config.study.port);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
        eprintln!("study service listening on {}", listener.local_addr()?);
        fractrack_studysvc::serve(listener, state).await?;
        Ok(())
    })
}

fn fmt_ci(point: f64, lo: f64, hi: f64) -> String {
    format!("{point:.3} ({lo:.3}, {hi:.3})")
}

/// Markdown summary of whatever reports exist, with a stale-artifact check.
pub fn report(ctx: &mut Ctx) -> anyhow::Result<Vec<String>> {
    let stale: Vec<String> = ctx.manifest().stale(&ctx.root).iter().map(|s| s.to_string()).collect();
    let mut io = ctx.io();
    let mut md = String::new();
    md.push_str("# fractrack run summary\n\n");
    md.push_str(&format!("Config hash: `{}`\n\n", ctx.config_hash));

    if ctx.root.join(METRICS).exists() {
        let v: Value = read_json(&io.input(METRICS)?)?;
        md.push_str(
            "## Ordering metrics (test split)\n\n| pairs | n | accuracy (CI) | AUC (CI) |\n|---|---|---|---|\n",
        );
        if let Some(m) = v["metrics"].as_object() {
            for (name, m) in m {
                let m: MetricReport = serde_json::from_value(m.clone())?;
                md.push_str(&format!(
                    "| {name} | {} | {} | {} |\n",
                    m.n_pairs,
                    fmt_ci(m.accuracy, m.accuracy_ci_low, m.accuracy_ci_high),
                    fmt_ci(m.auc, m.auc_ci_low, m.auc_ci_high)
                ));
            }
        }
        md.push('\n');
    }
    if ctx.root.join("eval/pairwise.json").exists() {
        let v: Value = read_json(&io.input("eval/pairwise.json")?)?;
        let c = &v["correlation"];
        md.push_str(&format!(
            "Logit vs fraction interval: r = {:.3}, p = {:.3e}, n = {}\n\n",
            c["r"].as_f64().unwrap_or(f64::NAN),
            c["p"].as_f64().unwrap_or(f64::NAN),
            c["n"]
        ));
    }
    if ctx.root.join(LME_REPORT).exists() {
        let v: Value = read_json(&io.input(LME_REPORT)?)?;
        let f = &v["random_slope"];
        md.push_str(&format!(
            "## Trend model\n\nfixed slope {:.4}, random-slope SD {:.4}, residual SD {:.4}; LRT statistic {:.3}, p = {:.3e}\n\n",
            f["fixed_slope"].as_f64().unwrap_or(f64::NAN),
            f["random_slope_sd"].as_f64().unwrap_or(f64::NAN),
            f["residual_sd"].as_f64().unwrap_or(f64::NAN),
            v["lrt"]["statistic"].as_f64().unwrap_or(f64::NAN),
            v["lrt"]["p"].as_f64().unwrap_or(f64::NAN),
        ));
    }
    if ctx.root.join(ORGAN_CHANGE_REPORT).exists() {
        let r: OrganChangeReport = read_json(&io.input(ORGAN_CHANGE_REPORT)?)?;
        md.push_str(
            "## Organ change F1 to FL\n\n| organ | quantity | median change | Wilcoxon p |\n|---|---|---|---|\n",
        );
        for c in &r.changes {
            let p = c.p_value().map_or("n/a".to_string(), |p| format!("{p:.3e}"));
            md.push_str(&format!(
                "| {} | {} | {:.4} | {p} |\n",
                c.organ,
                c.quantity.name(),
                c.median_change
            ));
        }
        md.push('\n');
    }
    if ctx.root.join("saliency/region_tally.json").exists() {
        let v: Value = read_json(&io.input("saliency/region_tally.json")?)?;
        md.push_str(&format!(
            "## Saliency\n\npeaks by organ: {}; inside the effect region: {} of {}\n\n",
            v["peak_organ"], v["in_effect_region"], v["n_maps"]
        ));
    }
    if ctx.root.join(ABLATION_REPORT).exists() {
        let v: Value = read_json(&io.input(ABLATION_REPORT)?)?;
        md.push_str("## Input ablation (delta from baseline)\n\n| row | F1-FL acc | F1-FL AUC | all acc | all AUC |\n|---|---|---|---|---|\n");
        for row in v["rows"].as_array().into_iter().flatten() {
            let cell = |i: usize, k: &str| row["cells"][i][k].as_f64().unwrap_or(f64::NAN);
            let base = row["name"] == "baseline";
            let pick = |i: usize, abs: &str, delta: &str| {
                if base {
                    row["cells"][i]["metrics"][abs].as_f64().unwrap_or(f64::NAN)
                } else {
                    cell(i, delta)
                }
            };
            let vals = [
                pick(0, "accuracy", "delta_accuracy"),
                pick(0, "auc", "delta_auc"),
                pick(1, "accuracy", "delta_accuracy"),
                pick(1, "auc", "delta_auc"),
            ];
            let cells: Vec<String> = vals
                .iter()
                .map(|v| if base { format!("{v:.3}") } else { format!("{v:+.3}") })
                .collect();
            md.push_str(&format!(
                "| {} | {} |\n",
                row["name"].as_str().unwrap_or("?"),
                cells.join(" | ")
            ));
        }
        md.push('\n');
    }
    md.push_str("## Artifact check\n\n");
    if stale.is_empty() {
        md.push_str("All recorded artifacts match their hashes.\n");
    } else {
        for s in &stale {
            md.push_str(&format!("- stale: {s}\n"));
        }
    }
    std::fs::write(io.output(SUMMARY)?, md)?;
    let rec = io.record();
    ctx.finish("report", rec)?;
    Ok(stale)
}
