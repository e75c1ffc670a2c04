//! HTTP routes and shared service state.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use fractrack_core::dataio::read_image;
use fractrack_core::evaluation::MetricReport;
use fractrack_core::VolumeGrid;
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ErrorCode};
use crate::render::{render_png, Axis};
use crate::session::{
    build_header, score, Choice, EventBody, EventLog, ReaderReport, Response, Session, Side, Status, StudyPair,
    TaskType,
};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Directory holding one event log per session.
    pub log_dir: PathBuf,
    pub pairs: Vec<StudyPair>,
    /// Model metrics the reader is compared against in reports.
    pub model_report: Option<MetricReport>,
}

struct SessionEntry {
    session: Session,
    log: EventLog,
}

pub struct AppState {
    log_dir: PathBuf,
    pairs: BTreeMap<String, StudyPair>,
    pair_order: Vec<String>,
    model_report: Option<MetricReport>,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionEntry>>>>,
    volumes: Mutex<HashMap<PathBuf, Arc<VolumeGrid>>>,
}

fn storage(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(ErrorCode::Storage, e.to_string())
}

impl AppState {
    /// Loads the pair list and replays every session log in `log_dir`.
    pub fn open(config: ServiceConfig) -> Result<Arc<AppState>, ApiError> {
        fs::create_dir_all(&config.log_dir).map_err(storage)?;
        let mut pairs = BTreeMap::new();
        let mut pair_order = Vec::new();
        for p in config.pairs {
            if pairs.contains_key(&p.pair_id) {
                return Err(ApiError::new(
                    ErrorCode::InvalidRequest,
                    format!("duplicate pair id `{}`", p.pair_id),
                ));
            }
            pair_order.push(p.pair_id.clone());
            pairs.insert(p.pair_id.clone(), p);
        }
        let mut sessions = HashMap::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(&config.log_dir)
            .map_err(storage)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        entries.sort();
        for path in entries {
            let (session, log) = EventLog::open(&path)?;
            let id = session.header.session_id.clone();
            sessions.insert(id, Arc::new(Mutex::new(SessionEntry { session, log })));
        }
        Ok(Arc::new(AppState {
            log_dir: config.log_dir,
            pairs,
            pair_order,
            model_report: config.model_report,
            sessions: RwLock::new(sessions),
            volumes: Mutex::new(HashMap::new()),
        }))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .keys()
            .cloned()
            .collect();
        ids.sort();
        ids
    }

    fn entry(&self, session_id: &str) -> Result<Arc<Mutex<SessionEntry>>, ApiError> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(session_id)
            .cloned()
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownSession, format!("unknown session `{session_id}`")))
    }

    fn volume(&self, path: &Path) -> Result<Arc<VolumeGrid>, ApiError> {
        if let Some(v) = self.volumes.lock().unwrap_or_else(|e| e.into_inner()).get(path) {
            return Ok(v.clone());
        }
        let v = Arc::new(read_image(path).map_err(storage)?);
        self.volumes
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(path.to_path_buf(), v.clone());
        Ok(v)
    }

    pub fn create_session(&self, req: CreateSession) -> Result<SessionCreated, ApiError> {
        let ids = req.pair_ids.unwrap_or_else(|| self.pair_order.clone());
        let pairs = ids
            .iter()
            .map(|id| {
                self.pairs
                    .get(id)
                    .cloned()
                    .ok_or_else(|| ApiError::new(ErrorCode::UnknownPair, format!("unknown pair `{id}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if req.reader_id.trim().is_empty() {
            return Err(ApiError::new(ErrorCode::InvalidRequest, "reader_id must be nonempty"));
        }
        let session_id = uuid::Uuid::new_v4().simple().to_string();
        let header = build_header(&session_id, &req.reader_id, req.task_type, req.seed, &pairs)?;
        let log = EventLog::create(&self.log_dir, &header).map_err(storage)?;
        let created = SessionCreated {
            session_id: session_id.clone(),
            reader_id: header.reader_id.clone(),
            task_type: header.task_type,
            n_items: header.items.len(),
        };
        let session = Session {
            header,
            served: Default::default(),
            responses: Default::default(),
        };
        self.sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(session_id, Arc::new(Mutex::new(SessionEntry { session, log })));
        Ok(created)
    }

    pub fn next_item(&self, session_id: &str) -> Result<NextItem, ApiError> {
        let entry = self.entry(session_id)?;
        let mut e = entry.lock().unwrap_or_else(|e| e.into_inner());
        let n_items = e.session.header.items.len();
        let n_answered = e.session.responses.len();
        let Some((position, item)) = e.session.next_item() else {
            return Ok(NextItem {
                session_id: session_id.into(),
                n_items,
                n_answered,
                status: Status::Complete,
                item: None,
            });
        };
        let item = item.clone();
        let view = ItemView {
            item_id: item.item_id.clone(),
            position,
            left: VolumeInfo::of(&*self.volume(&item.left)?),
            right: VolumeInfo::of(&*self.volume(&item.right)?),
        };
        if !e.session.served.contains(&item.item_id) {
            let body = EventBody::Serve {
                item_id: item.item_id.clone(),
            };
            e.log.append(&body).map_err(storage)?;
            e.session.apply(&body)?;
        }
        Ok(NextItem {
            session_id: session_id.into(),
            n_items,
            n_answered,
            status: Status::Active,
            item: Some(view),
        })
    }

    pub fn slice(&self, item_id: &str, q: &SliceQuery) -> Result<Vec<u8>, ApiError> {
        let (entry, item_id) = self.item_entry(item_id)?;
        let axis: Axis = q.axis.parse()?;
        let path = {
            let mut e = entry.lock().unwrap_or_else(|e| e.into_inner());
            let item = e.session.item(&item_id).cloned().expect("item checked");
            if !e.session.served.contains(&item_id) {
                return Err(ApiError::new(ErrorCode::ItemNotServed, "item has not been served yet"));
            }
            let body = EventBody::View {
                item_id,
                side: q.side,
                axis: axis.name().into(),
                index: q.index,
            };
            e.log.append(&body).map_err(storage)?;
            e.session.apply(&body)?;
            item.path(q.side).to_path_buf()
        };
        render_png(&*self.volume(&path)?, axis, q.index)
    }

    pub fn respond(&self, item_id: &str, req: SubmitResponse) -> Result<ResponseAck, ApiError> {
        let (entry, item_id) = self.item_entry(item_id)?;
        let mut e = entry.lock().unwrap_or_else(|e| e.into_inner());
        let response = Response {
            item_id: item_id.clone(),
            choice: req.choice,
            rationale: req.rationale,
            tags: req.tags,
            response_time_ms: req.response_time_ms,
        };
        let body = EventBody::Respond {
            response: response.clone(),
        };
        // Validate against a copy first so a rejected event is never logged.
        let mut probe = e.session.clone();
        probe.apply(&body)?;
        e.log.append(&body).map_err(storage)?;
        e.session = probe;
        Ok(ResponseAck {
            item_id,
            choice: response.choice,
            rationale: response.rationale,
            tags: response.tags,
            n_answered: e.session.responses.len(),
            status: e.session.status(),
        })
    }

    pub fn report(&self, session_id: &str, partial: bool) -> Result<ReaderReport, ApiError> {
        let entry = self.entry(session_id)?;
        let e = entry.lock().unwrap_or_else(|e| e.into_inner());
        score(&e.session, partial, self.model_report.as_ref())
    }

    fn item_entry(&self, item_id: &str) -> Result<(Arc<Mutex<SessionEntry>>, String), ApiError> {
        let unknown = || ApiError::new(ErrorCode::UnknownItem, format!("unknown item `{item_id}`"));
        let (session_id, _) = item_id.rsplit_once('.').ok_or_else(unknown)?;
        let entry = self.entry(session_id).map_err(|_| unknown())?;
        if entry
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .session
            .item(item_id)
            .is_none()
        {
            return Err(unknown());
        }
        Ok((entry, item_id.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub reader_id: String,
    #[serde(default = "default_task")]
    pub task_type: TaskType,
    #[serde(default)]
    pub seed: u64,
    /// Subset of pairs to present; all pairs when absent.
    #[serde(default)]
    pub pair_ids: Option<Vec<String>>,
}

fn default_task() -> TaskType {
    TaskType::FullVolume
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub reader_id: String,
    pub task_type: TaskType,
    pub n_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeInfo {
    pub dims: [usize; 3],
    pub spacing_mm: [f32; 3],
}

impl VolumeInfo {
    fn of(v: &VolumeGrid) -> Self {
        VolumeInfo {
            dims: v.dims(),
            spacing_mm: v.spacing_mm(),
        }
    }
}

/// What a reader sees of an item before answering: an opaque id and the
/// geometry of the two panels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub item_id: String,
    pub position: usize,
    pub left: VolumeInfo,
    pub right: VolumeInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextItem {
    pub session_id: String,
    pub n_items: usize,
    pub n_answered: usize,
    pub status: Status,
    pub item: Option<ItemView>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceQuery {
    pub side: Side,
    pub axis: String,
    pub index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitResponse {
    pub choice: Choice,
    #[serde(default)]
    pub rationale: String,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub response_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseAck {
    pub item_id: String,
    pub choice: Choice,
    pub rationale: String,
    pub tags: Vec<String>,
    pub n_answered: usize,
    pub status: Status,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportQuery {
    #[serde(default)]
    pub partial: bool,
}

fn bad_request(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(ErrorCode::InvalidRequest, e.to_string())
}

/// Runs `f` off the async executor; event-log appends sync to disk.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body.map_err(bad_request)?;
    let created = blocking(move || state.create_session(req)).await?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn next_item(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<NextItem>, ApiError> {
    Ok(Json(blocking(move || state.next_item(&id)).await?))
}

async fn slice(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    query: Result<Query<SliceQuery>, QueryRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::new(ErrorCode::InvalidSlice, e.to_string()))?;
    let png = blocking(move || state.slice(&id, &q)).await?;
    Ok((
        [(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-store")],
        png,
    ))
}

async fn respond(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<SubmitResponse>, JsonRejection>,
) -> Result<Json<ResponseAck>, ApiError> {
    let Json(req) = body.map_err(bad_request)?;
    Ok(Json(blocking(move || state.respond(&id, req)).await?))
}

async fn report(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    query: Result<Query<ReportQuery>, QueryRejection>,
) -> Result<Json<ReaderReport>, ApiError> {
    let Query(q) = query.map_err(bad_request)?;
    Ok(Json(blocking(move || state.report(&id, q.partial)).await?))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next_item))
        .route("/sessions/{id}/report", get(report))
        .route("/items/{id}/slice", get(slice))
        .route("/items/{id}/response", post(respond))
        .with_state(state)
}

/// Serves the API on `listener` until the task is cancelled.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
