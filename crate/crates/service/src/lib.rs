//! HTTP API for the interactive supervision loop.
//!
//! Sessions hold one image. Clients store a patch set, start runs, follow
//! the energy trace as newline-delimited JSON and fetch the artifacts.
//! Payload schemas are the ones the `sms` CLI reads and writes.

mod state;

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use sms_core::Supervision;
use sms_io::{decode_image, peek_dimensions, RunRequest};
use uuid::Uuid;

pub use state::{AppState, EventRow, Phase, Run, RunResult, ServiceConfig, Session};
use state::StartError;

/// Uploads larger than this are refused before decoding.
const MAX_BODY_BYTES: usize = 512 * 1024 * 1024;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("{what} not found"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/sessions", post(create_session))
        .route("/api/v1/sessions/{id}", get(session_info))
        .route("/api/v1/sessions/{id}/supervision", put(put_supervision))
        .route("/api/v1/sessions/{id}/runs", post(start_run))
        .route("/api/v1/sessions/{id}/runs/{rid}", get(run_info))
        .route("/api/v1/sessions/{id}/runs/{rid}/events", get(run_events))
        .route("/api/v1/sessions/{id}/runs/{rid}/ownership/{i}", get(ownership_png))
        .route("/api/v1/sessions/{id}/runs/{rid}/labels", get(labels_png))
        .route("/api/v1/sessions/{id}/runs/{rid}/labels/palette", get(labels_palette))
        .route("/api/v1/sessions/{id}/runs/{rid}/summary", get(summary))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

fn parse_id(raw: &str, what: &str) -> ApiResult<Uuid> {
    raw.parse().map_err(|_| ApiError::not_found(what))
}

fn session(state: &AppState, id: &str) -> ApiResult<Arc<Session>> {
    state
        .session(parse_id(id, "session")?)
        .ok_or_else(|| ApiError::not_found("session"))
}

fn run(state: &AppState, id: &str, rid: &str) -> ApiResult<Arc<Run>> {
    session(state, id)?
        .run(parse_id(rid, "run")?)
        .ok_or_else(|| ApiError::not_found("run"))
}

fn finished(run: &Run) -> ApiResult<Arc<RunResult>> {
    run.snapshot()
        .result
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "run not finished"))
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    if body.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty body"));
    }
    let (w, h) = peek_dimensions(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("unsupported image: {e}")))?;
    let max = state.config().max_pixels;
    if w.saturating_mul(h) > max {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("{w}x{h} exceeds the {max}-pixel limit"),
        ));
    }
    let image = decode_image(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("unsupported image: {e}")))?;
    let bands = image.k();
    let session = state.create_session(image, &body).map_err(internal)?;
    Ok(Json(json!({
        "session_id": session.id,
        "width": w,
        "height": h,
        "bands": bands,
    }))
    .into_response())
}

async fn session_info(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = session(&state, &id)?;
    let (w, h) = s.dims();
    Ok(Json(json!({
        "session_id": s.id,
        "width": w,
        "height": h,
        "bands": s.image.k(),
        "supervision": s.supervision(),
        "runs": s.run_ids(),
    }))
    .into_response())
}

async fn put_supervision(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let s = session(&state, &id)?;
    let sup: Supervision = serde_json::from_slice(&body).map_err(|e| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("malformed patch document: {e}"))
    })?;
    let (w, h) = s.dims();
    let report = sup
        .validate(w, h)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    state.set_supervision(&s, sup).map_err(internal)?;
    Ok(Json(report).into_response())
}

async fn start_run(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let s = session(&state, &id)?;
    let unprocessable = |msg: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, msg);
    let request: RunRequest = serde_json::from_slice(&body)
        .map_err(|e| unprocessable(format!("malformed run request: {e}")))?;
    request
        .to_config()
        .map_err(|e| unprocessable(e.to_string()))?;
    let sup = s.supervision();
    let (w, h) = s.dims();
    sup.validate_for(w, h, request.k)
        .map_err(|e| unprocessable(e.to_string()))?;
    match state.start_run(&s, request, sup) {
        Ok(run) => Ok((StatusCode::ACCEPTED, Json(json!({ "run_id": run.id }))).into_response()),
        Err(StartError::Busy(active)) => Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("run {active} is still active on this session"),
        )),
    }
}

fn terminator(st: &state::RunState) -> serde_json::Value {
    match (&st.result, &st.error) {
        (Some(r), _) => json!({
            "status": st.phase,
            "run_status": r.summary.status,
            "iterations": r.summary.iterations,
        }),
        (None, Some(e)) => json!({ "status": st.phase, "error": e }),
        (None, None) => json!({ "status": st.phase }),
    }
}

async fn run_info(
    State(state): State<AppState>,
    Path((id, rid)): Path<(String, String)>,
) -> ApiResult<Response> {
    let r = run(&state, &id, &rid)?;
    let st = r.snapshot();
    let mut body = terminator(&st);
    body["run_id"] = json!(r.id);
    body["rows"] = json!(st.rows.len());
    body["parameters"] = json!(r.request);
    Ok(Json(body).into_response())
}

#[derive(Deserialize)]
struct EventsQuery {
    #[serde(default)]
    from: usize,
}

fn ndjson_line(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string(v).expect("serializable event");
    s.push('\n');
    s
}

/// Streams rows with `iter >= from` as they appear, then one terminator.
async fn run_events(
    State(state): State<AppState>,
    Path((id, rid)): Path<(String, String)>,
    Query(q): Query<EventsQuery>,
) -> ApiResult<Response> {
    let r = run(&state, &id, &rid)?;
    let rx = r.subscribe();
    let stream = futures::stream::unfold(
        Some((r, rx, q.from)),
        |cursor| async move {
            let (run, mut rx, mut next) = cursor?;
            loop {
                rx.borrow_and_update();
                let (rows, st) = run.rows_since(next);
                if !rows.is_empty() {
                    next += rows.len();
                    let chunk: String = rows.iter().map(ndjson_line).collect();
                    return Some((Ok::<_, Infallible>(Bytes::from(chunk)), Some((run, rx, next))));
                }
                if st.phase.is_terminal() {
                    return Some((Ok(Bytes::from(ndjson_line(&terminator(&st)))), None));
                }
                if rx.changed().await.is_err() {
                    // The sender lives in the run, which this stream holds.
                    unreachable!("run dropped while streaming");
                }
            }
        },
    );
    Ok((
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        Body::from_stream(stream),
    )
        .into_response())
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn json_bytes(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

async fn ownership_png(
    State(state): State<AppState>,
    Path((id, rid, i)): Path<(String, String, String)>,
) -> ApiResult<Response> {
    let r = run(&state, &id, &rid)?;
    let result = finished(&r)?;
    let channel: usize = i.parse().map_err(|_| ApiError::not_found("channel"))?;
    if channel == 0 || channel > result.ownership_pngs.len() {
        return Err(ApiError::not_found("channel"));
    }
    Ok(png(result.ownership_pngs[channel - 1].clone()))
}

async fn labels_png(
    State(state): State<AppState>,
    Path((id, rid)): Path<(String, String)>,
) -> ApiResult<Response> {
    let r = run(&state, &id, &rid)?;
    Ok(png(finished(&r)?.labels_png.clone()))
}

async fn labels_palette(
    State(state): State<AppState>,
    Path((id, rid)): Path<(String, String)>,
) -> ApiResult<Response> {
    let r = run(&state, &id, &rid)?;
    Ok(json_bytes(finished(&r)?.palette_json.clone()))
}

async fn summary(
    State(state): State<AppState>,
    Path((id, rid)): Path<(String, String)>,
) -> ApiResult<Response> {
    let r = run(&state, &id, &rid)?;
    Ok(json_bytes(finished(&r)?.summary_json.clone()))
}
