//! HTTP surface: submission intake, status, leaderboard and timeline.
//!
//! | method | path                        | success                     |
//! |--------|-----------------------------|-----------------------------|
//! | POST   | `/api/v1/submissions`       | 202 `{id, queue_position}`  |
//! | GET    | `/api/v1/submissions`       | caller's submissions        |
//! | GET    | `/api/v1/submissions/{id}`  | status, position, record    |
//! | GET    | `/api/v1/leaderboard`       | snapshot JSON               |
//! | GET    | `/api/v1/timeline`          | daily series CSV            |
//! | GET    | `/api/v1/health`            | `{status, queue_length}`    |
//!
//! Errors are `{http_status, code, detail}`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chrono::{NaiveDate, Utc};
use lpref_core::leaderboard::{daily_series, snapshot, Track};
use lpref_core::referee::{RecordFilter, Referee, RefereeError, Status, Submission, SubmissionView};
use lpref_core::runner::{inspect_archive, RunnerError};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Mutex;

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
const IDEMPOTENCY_LOG: &str = "idempotency.ndjson";
/// Room for multipart boundaries and headers on top of the archive cap.
const MULTIPART_OVERHEAD: u64 = 64 << 10;
const MAX_TIMELINE_DAYS: i64 = 3660;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub http_status: u16,
    pub code: String,
    pub detail: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, detail: impl Into<String>) -> Self {
        ApiError {
            http_status: status.as_u16(),
            code: code.into(),
            detail: detail.into(),
        }
    }

    fn internal(detail: impl std::fmt::Display) -> Self {
        log::error!("internal error: {detail}");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "StorageFailure", detail.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.http_status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Serialize, Deserialize)]
struct IdempotencyEntry {
    team: String,
    key: String,
    id: String,
}

/// Serializes intake so that idempotency and cooldown checks see each
/// accepted submission.
struct IntakeGate {
    last_accepted: HashMap<String, Instant>,
    keys: HashMap<(String, String), String>,
    log: File,
}

pub struct AppState {
    referee: Arc<Referee>,
    teams: BTreeMap<String, String>,
    max_archive_bytes: u64,
    cooldown: Duration,
    gate: Mutex<IntakeGate>,
}

impl AppState {
    pub fn new(
        referee: Arc<Referee>,
        data_dir: &Path,
        teams: BTreeMap<String, String>,
        max_archive_bytes: u64,
        cooldown: Duration,
    ) -> std::io::Result<Self> {
        std::fs::create_dir_all(data_dir)?;
        let path = data_dir.join(IDEMPOTENCY_LOG);
        let mut keys = HashMap::new();
        if let Ok(f) = File::open(&path) {
            for line in BufReader::new(f).lines() {
                match serde_json::from_str::<IdempotencyEntry>(&line?) {
                    Ok(e) => {
                        keys.insert((e.team, e.key), e.id);
                    }
                    Err(e) => log::warn!("{}: skipping bad line: {e}", path.display()),
                }
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(AppState {
            referee,
            teams,
            max_archive_bytes,
            cooldown,
            gate: Mutex::new(IntakeGate {
                last_accepted: HashMap::new(),
                keys,
                log,
            }),
        })
    }

    pub fn referee(&self) -> &Arc<Referee> {
        &self.referee
    }

    fn team(&self, headers: &HeaderMap) -> ApiResult<String> {
        let raw = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "UnknownToken", "missing Authorization header"))?;
        let token = raw.strip_prefix("Bearer ").unwrap_or(raw).trim();
        self.teams
            .get(token)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "UnknownToken", "token not recognised"))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let body_cap = state.max_archive_bytes.saturating_add(MULTIPART_OVERHEAD);
    Router::new()
        .route(
            "/api/v1/submissions",
            get(list_submissions)
                .post(submit)
                .layer(DefaultBodyLimit::max(usize::try_from(body_cap).unwrap_or(usize::MAX))),
        )
        .route("/api/v1/submissions/{id}", get(get_submission))
        .route("/api/v1/leaderboard", get(get_leaderboard))
        .route("/api/v1/timeline", get(get_timeline))
        .route("/api/v1/health", get(health))
        .with_state(state)
}

fn too_large(cap: u64) -> ApiError {
    ApiError::new(
        StatusCode::PAYLOAD_TOO_LARGE,
        "ArchiveTooLarge",
        format!("archive exceeds the {cap}-byte limit"),
    )
}

async fn read_archive(state: &AppState, headers: &HeaderMap, mut form: Multipart) -> ApiResult<Vec<u8>> {
    let cap = state.max_archive_bytes;
    let declared = headers
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok());
    if declared.is_some_and(|n| n > cap.saturating_add(MULTIPART_OVERHEAD)) {
        return Err(too_large(cap));
    }
    let multipart_err = |e: axum::extract::multipart::MultipartError| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            too_large(cap)
        } else {
            ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", e.body_text())
        }
    };
    while let Some(mut field) = form.next_field().await.map_err(multipart_err)? {
        if field.name() != Some("archive") {
            continue;
        }
        let mut buf = Vec::new();
        while let Some(chunk) = field.chunk().await.map_err(multipart_err)? {
            if buf.len() as u64 + chunk.len() as u64 > cap {
                return Err(too_large(cap));
            }
            buf.extend_from_slice(&chunk);
        }
        return Ok(buf);
    }
    Err(ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", "multipart field \"archive\" is required"))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Accepted {
    pub id: String,
    pub queue_position: Option<usize>,
}

async fn submit(State(state): State<Arc<AppState>>, headers: HeaderMap, form: Multipart) -> ApiResult<Response> {
    let team = state.team(&headers)?;
    let key = headers
        .get(IDEMPOTENCY_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned);
    let archive = read_archive(&state, &headers, form).await?;

    let mut gate = state.gate.lock().await;
    if let Some(k) = &key {
        if let Some(id) = gate.keys.get(&(team.clone(), k.clone())) {
            let view = state.referee.submission(id).map_err(ApiError::internal)?;
            let body = Accepted {
                id: id.clone(),
                queue_position: view.position,
            };
            return Ok((StatusCode::ACCEPTED, Json(body)).into_response());
        }
    }
    if let Some(last) = gate.last_accepted.get(&team) {
        let wait = state.cooldown.saturating_sub(last.elapsed());
        if !wait.is_zero() {
            let err = ApiError::new(
                StatusCode::TOO_MANY_REQUESTS,
                "CooldownActive",
                format!("next submission allowed in {} s", wait.as_secs().max(1)),
            );
            let mut resp = err.into_response();
            resp.headers_mut().insert(header::RETRY_AFTER, wait.as_secs().max(1).into());
            return Ok(resp);
        }
    }
    if let Err(e) = inspect_archive(&archive) {
        let code = match e {
            RunnerError::MissingManifest => "MissingManifest",
            RunnerError::ManifestInvalid(_) => "ManifestInvalid",
            RunnerError::PathEscape(_) => "PathEscape",
            _ => "CorruptArchive",
        };
        return Err(ApiError::new(StatusCode::BAD_REQUEST, code, e.to_string()));
    }

    let referee = state.referee.clone();
    let submitter = team.clone();
    let (id, position) = tokio::task::spawn_blocking(move || -> Result<(String, usize), RefereeError> {
        let archive_ref = referee.blobs().put(&archive)?;
        let id = uuid::Uuid::new_v4().to_string();
        let pos = referee.enqueue(Submission {
            id: id.clone(),
            team: submitter,
            submitted_at: Utc::now(),
            archive_ref,
            status: Status::Queued,
        })?;
        Ok((id, pos))
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(ApiError::internal)?;

    gate.last_accepted.insert(team.clone(), Instant::now());
    if let Some(k) = key {
        let entry = IdempotencyEntry {
            team: team.clone(),
            key: k.clone(),
            id: id.clone(),
        };
        let mut line = serde_json::to_vec(&entry).map_err(ApiError::internal)?;
        line.push(b'\n');
        gate.log.write_all(&line).map_err(ApiError::internal)?;
        gate.keys.insert((team, k), id.clone());
    }
    drop(gate);
    log::info!("accepted submission {id} at position {position}");
    let body = Accepted {
        id,
        queue_position: Some(position),
    };
    Ok((StatusCode::ACCEPTED, Json(body)).into_response())
}

fn view_json(v: SubmissionView) -> serde_json::Value {
    let mut out = json!({
        "id": v.submission.id,
        "team": v.submission.team,
        "submitted_at": v.submission.submitted_at,
        "status": v.submission.status,
    });
    if let Some(p) = v.position {
        out["position"] = json!(p);
    }
    if let Some(r) = v.record {
        out["record"] = json!(r);
    }
    out
}

async fn get_submission(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    match state.referee.submission(&id) {
        Ok(v) => Ok(Json(view_json(v))),
        Err(RefereeError::UnknownSubmission(_)) => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "UnknownSubmission",
            format!("no submission {id:?}"),
        )),
        Err(e) => Err(ApiError::internal(e)),
    }
}

async fn list_submissions(State(state): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<Json<serde_json::Value>> {
    let team = state.team(&headers)?;
    let list: Vec<_> = state.referee.submissions_of(&team).into_iter().map(view_json).collect();
    Ok(Json(json!({ "team": team, "submissions": list })))
}

async fn get_leaderboard(
    State(state): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<serde_json::Value>> {
    let track = match q.get("track").map(String::as_str) {
        None | Some("") => None,
        Some(t) => Some(
            t.parse::<Track>()
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "UnknownTrack", e.to_string()))?,
        ),
    };
    let records = state.referee.load_records(&RecordFilter::All).map_err(ApiError::internal)?;
    let mut body = serde_json::to_value(snapshot(&records, track, Utc::now())).map_err(ApiError::internal)?;
    let cfg = state.referee.config();
    body["reference"] = json!({
        "accuracy": cfg.reference_accuracy,
        "mean_time": cfg.reference_mean_time,
        "score": cfg.reference_accuracy / (cfg.reference_mean_time / 1000.0),
    });
    Ok(Json(body))
}

fn parse_day(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<NaiveDate>> {
    match q.get(key).filter(|v| !v.is_empty()) {
        None => Ok(None),
        Some(v) => NaiveDate::parse_from_str(v, "%Y-%m-%d").map(Some).map_err(|e| {
            ApiError::new(StatusCode::BAD_REQUEST, "InvalidRange", format!("{key}={v:?}: {e}"))
        }),
    }
}

async fn get_timeline(State(state): State<Arc<AppState>>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Response> {
    let records = state.referee.load_records(&RecordFilter::All).map_err(ApiError::internal)?;
    let today = Utc::now().date_naive();
    let to = parse_day(&q, "to")?.unwrap_or(today);
    let from = match parse_day(&q, "from")? {
        Some(d) => d,
        None => records.first().map(|r| r.submitted_at.date_naive()).unwrap_or(to).min(to),
    };
    if (to - from).num_days() > MAX_TIMELINE_DAYS {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "InvalidRange",
            format!("range longer than {MAX_TIMELINE_DAYS} days"),
        ));
    }
    let series = daily_series(&records, from, to)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "InvalidRange", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], series.to_csv()).into_response())
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "queue_length": state.referee.queue_len() }))
}
