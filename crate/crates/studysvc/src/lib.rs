//! Reader-study service: blinded pair-ordering tasks over HTTP/JSON, an
//! append-only event log per session, and scoring against model metrics.
//!
//! Routes:
//!
//! | method | path | body / query |
//! |---|---|---|
//! | POST | `/sessions` | `{reader_id, task_type, seed, pair_ids?}` |
//! | GET | `/sessions/{id}/next` | |
//! | GET | `/items/{id}/slice` | `?side=left&axis=axial&index=10` (PNG) |
//! | POST | `/items/{id}/response` | `{choice, rationale, tags, response_time_ms}` |
//! | GET | `/sessions/{id}/report` | `?partial=true` |
//!
//! Errors carry `{"error": {"code": <stable integer>, "message": ...}}`.

pub mod api;
pub mod error;
pub mod render;
pub mod session;

pub use api::{router, serve, AppState, ServiceConfig};
pub use error::{ApiError, ErrorCode};
pub use session::{read_pairs, replay, score, write_pairs, ReaderReport, StudyPair, TaskType};
