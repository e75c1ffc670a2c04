//! Sessions, the JSON-lines event log, and scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use fractrack_core::evaluation::{accuracy, bootstrap_ci, LogitRecord, MetricReport};
use fractrack_core::stats::{ttest_summaries, Alternative, Summary};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ErrorCode};

pub const LOG_SCHEMA_VERSION: u32 = 1;

/// One pair offered to readers. `label` is 1 when `first` was acquired
/// before `second` and 0 otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyPair {
    pub pair_id: String,
    pub first: PathBuf,
    pub second: PathBuf,
    pub label: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_crop: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_crop: Option<PathBuf>,
}

/// Reads a JSON-lines pair file. Relative paths resolve against its directory.
pub fn read_pairs(path: impl AsRef<Path>) -> std::io::Result<Vec<StudyPair>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut p: StudyPair = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), i + 1),
            )
        })?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut p.first);
        resolve(&mut p.second);
        p.first_crop.as_mut().map(resolve);
        p.second_crop.as_mut().map(resolve);
        out.push(p);
    }
    Ok(out)
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[StudyPair]) -> std::io::Result<()> {
    let mut out = File::create(path)?;
    for p in pairs {
        writeln!(out, "{}", serde_json::to_string(p)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    FullVolume,
    SaliencyRestricted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    /// The left image was acquired first.
    LeftFirst,
    RightFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub pair_id: String,
    /// Whether the pair's `first` volume is shown on the left.
    pub left_is_first: bool,
    /// Ground truth: the left image was acquired first.
    pub truth_left_first: bool,
    pub left: PathBuf,
    pub right: PathBuf,
}

impl Item {
    pub fn path(&self, side: Side) -> &Path {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn is_correct(&self, choice: Choice) -> bool {
        (choice == Choice::LeftFirst) == self.truth_left_first
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub session_id: String,
    pub reader_id: String,
    pub task_type: TaskType,
    /// Seed of the presentation randomization.
    pub seed: u64,
    pub items: Vec<Item>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub item_id: String,
    pub choice: Choice,
    pub rationale: String,
    #[serde(default)]
    pub tags: Vec<String>,
    pub response_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventBody {
    Create {
        session: SessionHeader,
    },
    Serve {
        item_id: String,
    },
    View {
        item_id: String,
        side: Side,
        axis: String,
        index: usize,
    },
    Respond {
        response: Response,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub v: u32,
    pub at_ms: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Active,
    Complete,
}

/// Session state reconstructed from its events.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub header: SessionHeader,
    pub served: BTreeSet<String>,
    pub responses: BTreeMap<String, Response>,
}

impl Session {
    pub fn status(&self) -> Status {
        if self.responses.len() == self.header.items.len() {
            Status::Complete
        } else {
            Status::Active
        }
    }

    pub fn item(&self, item_id: &str) -> Option<&Item> {
        self.header.items.iter().find(|i| i.item_id == item_id)
    }

    /// First unanswered item in presentation order.
    pub fn next_item(&self) -> Option<(usize, &Item)> {
        self.header
            .items
            .iter()
            .enumerate()
            .find(|(_, i)| !self.responses.contains_key(&i.item_id))
    }

    /// Applies one event; rejects events inconsistent with the state.
    pub fn apply(&mut self, body: &EventBody) -> Result<(), ApiError> {
        match body {
            EventBody::Create { .. } => Err(ApiError::new(ErrorCode::CorruptLog, "second create event")),
            EventBody::Serve { item_id } => {
                self.require_item(item_id)?;
                self.served.insert(item_id.clone());
                Ok(())
            }
            EventBody::View { item_id, .. } => self.require_item(item_id).map(|_| ()),
            EventBody::Respond { response } => {
                self.require_item(&response.item_id)?;
                if !self.served.contains(&response.item_id) {
                    return Err(ApiError::new(ErrorCode::ItemNotServed, "item has not been served yet"));
                }
                if self.responses.contains_key(&response.item_id) {
                    return Err(ApiError::new(ErrorCode::AlreadyAnswered, "item already answered"));
                }
                self.responses.insert(response.item_id.clone(), response.clone());
                Ok(())
            }
        }
    }

    fn require_item(&self, item_id: &str) -> Result<&Item, ApiError> {
        self.item(item_id)
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownItem, format!("unknown item `{item_id}`")))
    }
}

/// Randomized presentation of `pairs`. Pairs without a temporal order are
/// rejected, as are restricted tasks lacking crops.
pub fn build_header(
    session_id: &str,
    reader_id: &str,
    task_type: TaskType,
    seed: u64,
    pairs: &[StudyPair],
) -> Result<SessionHeader, ApiError> {
    if pairs.is_empty() {
        return Err(ApiError::new(
            ErrorCode::InvalidRequest,
            "a session needs at least one pair",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<&StudyPair> = pairs.iter().collect();
    order.shuffle(&mut rng);
    let mut items = Vec::with_capacity(order.len());
    for (k, p) in order.into_iter().enumerate() {
        if p.label != 0.0 && p.label != 1.0 {
            return Err(ApiError::new(
                ErrorCode::UnorderedPair,
                format!("pair `{}` has no temporal order", p.pair_id),
            ));
        }
        let (first, second) = match task_type {
            TaskType::FullVolume => (p.first.clone(), p.second.clone()),
            TaskType::SaliencyRestricted => match (&p.first_crop, &p.second_crop) {
                (Some(a), Some(b)) if a.is_file() && b.is_file() => (a.clone(), b.clone()),
                _ => {
                    return Err(ApiError::new(
                        ErrorCode::MissingCrops,
                        format!("pair `{}` lacks saliency-restricted crops", p.pair_id),
                    ))
                }
            },
        };
        let left_is_first = rng.random_bool(0.5);
        let first_earlier = p.label == 1.0;
        let (left, right) = if left_is_first {
            (first, second)
        } else {
            (second, first)
        };
        items.push(Item {
            item_id: format!("{session_id}.{k}"),
            pair_id: p.pair_id.clone(),
            left_is_first,
            truth_left_first: left_is_first == first_earlier,
            left,
            right,
        });
    }
    Ok(SessionHeader {
        session_id: session_id.to_string(),
        reader_id: reader_id.to_string(),
        task_type,
        seed,
        items,
    })
}

pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Append-only log of one session. Every append is flushed and synced
/// before it returns.
#[derive(Debug)]
pub struct EventLog {
    file: File,
    path: PathBuf,
}

impl EventLog {
    pub fn path_for(dir: &Path, session_id: &str) -> PathBuf {
        dir.join(format!("{session_id}.jsonl"))
    }

    pub fn create(dir: &Path, header: &SessionHeader) -> std::io::Result<EventLog> {
        fs::create_dir_all(dir)?;
        let path = Self::path_for(dir, &header.session_id);
        let file = OpenOptions::new().create_new(true).append(true).open(&path)?;
        let mut log = EventLog { file, path };
        log.append(&EventBody::Create {
            session: header.clone(),
        })?;
        Ok(log)
    }

    pub fn append(&mut self, body: &EventBody) -> std::io::Result<()> {
        let event = Event {
            v: LOG_SCHEMA_VERSION,
            at_ms: now_ms(),
            body: body.clone(),
        };
        let mut line = serde_json::to_vec(&event)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Replays a log file into a session and reopens it for appending.
    /// A torn final line is cut off so new events start on a fresh line.
    pub fn open(path: &Path) -> Result<(Session, EventLog), ApiError> {
        let (session, valid_len) = replay_prefix(path)?;
        let storage = |e: std::io::Error| ApiError::new(ErrorCode::Storage, e.to_string());
        let file = OpenOptions::new().append(true).open(path).map_err(storage)?;
        if file.metadata().map_err(storage)?.len() > valid_len {
            file.set_len(valid_len).map_err(storage)?;
            file.sync_data().map_err(storage)?;
        }
        Ok((
            session,
            EventLog {
                file,
                path: path.to_path_buf(),
            },
        ))
    }
}

/// Reconstructs a session from its event log. A torn final line (a write
/// that never completed, hence was never acknowledged) is ignored.
pub fn replay(path: &Path) -> Result<Session, ApiError> {
    replay_prefix(path).map(|(s, _)| s)
}

/// Replayed session and the byte length of the log's complete lines.
fn replay_prefix(path: &Path) -> Result<(Session, u64), ApiError> {
    let text = fs::read_to_string(path).map_err(|e| ApiError::new(ErrorCode::Storage, e.to_string()))?;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut session: Option<Session> = None;
    let mut valid_len = 0u64;
    for (i, line) in lines.iter().enumerate() {
        if i + 1 == lines.len() && !complete {
            // Never acknowledged: the append did not finish its newline.
            break;
        }
        valid_len += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let event: Event = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(e) => {
                return Err(ApiError::new(
                    ErrorCode::CorruptLog,
                    format!("{}:{}: {e}", path.display(), i + 1),
                ))
            }
        };
        if event.v != LOG_SCHEMA_VERSION {
            return Err(ApiError::new(
                ErrorCode::CorruptLog,
                format!("unsupported log schema version {}", event.v),
            ));
        }
        match (&mut session, event.body) {
            (None, EventBody::Create { session: header }) => {
                session = Some(Session {
                    header,
                    served: BTreeSet::new(),
                    responses: BTreeMap::new(),
                });
            }
            (None, _) => return Err(ApiError::new(ErrorCode::CorruptLog, "log does not start with create")),
            (Some(s), body) => s.apply(&body)?,
        }
    }
    let session = session.ok_or_else(|| ApiError::new(ErrorCode::CorruptLog, "empty log"))?;
    Ok((session, valid_len))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub model_accuracy: f64,
    /// Welch statistic for reader minus model, from bootstrap SDs.
    pub statistic: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderReport {
    pub session_id: String,
    pub reader_id: String,
    pub task_type: TaskType,
    pub n_items: usize,
    pub n_answered: usize,
    pub accuracy: f64,
    pub accuracy_ci_low: f64,
    pub accuracy_ci_high: f64,
    pub accuracy_sd: f64,
    pub n_bootstrap: usize,
    /// Responses per lowercased tag; untagged responses count under `untagged`.
    pub rationale_tally: BTreeMap<String, usize>,
    pub mean_response_time_ms: f64,
    pub model_comparison: Option<ModelComparison>,
}

pub const REPORT_BOOTSTRAP: usize = 1000;

/// Scores answered items. Incomplete sessions need `partial`.
pub fn score(session: &Session, partial: bool, model: Option<&MetricReport>) -> Result<ReaderReport, ApiError> {
    if session.responses.is_empty() {
        return Err(ApiError::new(ErrorCode::NothingAnswered, "no answered items to score"));
    }
    if session.status() != Status::Complete && !partial {
        return Err(ApiError::new(
            ErrorCode::SessionIncomplete,
            "session incomplete; request a partial report",
        ));
    }
    // Presentation order keeps the resampling deterministic.
    let answered: Vec<(&Item, &Response)> = session
        .header
        .items
        .iter()
        .filter_map(|i| session.responses.get(&i.item_id).map(|r| (i, r)))
        .collect();
    let records: Vec<LogitRecord> = answered
        .iter()
        .map(|(item, r)| LogitRecord {
            patient_id: item.item_id.clone(),
            first_fraction: 0,
            second_fraction: 0,
            interval_days: 0,
            interval_fractions: 0,
            logit: if item.is_correct(r.choice) { 1.0 } else { -1.0 },
            label: 1.0,
        })
        .collect();
    let internal = |e: fractrack_core::Error| ApiError::new(ErrorCode::Internal, e.to_string());
    let acc = accuracy(&records).map_err(internal)?;
    let ci = bootstrap_ci(&records, accuracy, REPORT_BOOTSTRAP, 0.95, session.header.seed).map_err(internal)?;
    let mut tally = BTreeMap::new();
    for (_, r) in &answered {
        if r.tags.is_empty() {
            *tally.entry("untagged".to_string()).or_insert(0) += 1;
        }
        let tags: BTreeSet<String> = r
            .tags
            .iter()
            .map(|t| t.trim().to_lowercase())
            .filter(|t| !t.is_empty())
            .collect();
        for t in tags {
            *tally.entry(t).or_insert(0) += 1;
        }
    }
    let model_comparison = model.and_then(|m| {
        let reader = Summary {
            mean: acc,
            sd: ci.sd,
            n: REPORT_BOOTSTRAP,
        };
        let model = Summary {
            mean: m.accuracy,
            sd: m.accuracy_sd,
            n: m.n_bootstrap,
        };
        ttest_summaries(&reader, &model, true, Alternative::TwoSided)
            .ok()
            .map(|t| ModelComparison {
                model_accuracy: m.accuracy,
                statistic: t.statistic,
                p: t.p,
            })
    });
    let n = answered.len();
    Ok(ReaderReport {
        session_id: session.header.session_id.clone(),
        reader_id: session.header.reader_id.clone(),
        task_type: session.header.task_type,
        n_items: session.header.items.len(),
        n_answered: n,
        accuracy: acc,
        accuracy_ci_low: ci.low,
        accuracy_ci_high: ci.high,
        accuracy_sd: ci.sd,
        n_bootstrap: REPORT_BOOTSTRAP,
        rationale_tally: tally,
        mean_response_time_ms: answered.iter().map(|(_, r)| r.response_time_ms as f64).sum::<f64>() / n as f64,
        model_comparison,
    })
}
