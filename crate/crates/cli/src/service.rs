//! HTTP front end of a loaded [`Generator`].
//!
//! Every error is a JSON body `{"error": {"code", "message"}}`: 400 for bad
//! input, 404 for an unknown clip, 409 for a config hash mismatch.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use act2g_core::persist;
use act2g_core::retrieval::{random_projection, GenerationRequest, Generator, WordWeight};
use act2g_core::text_encoder::tokenize_words;
use act2g_core::Error;
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Text features kept for `/space`.
pub const RECENT_CAPACITY: usize = 64;

#[derive(Clone, Debug, Serialize)]
struct RecentText {
    id: u64,
    label: String,
    feature: Vec<f64>,
}

#[derive(Default)]
struct Recent {
    next: u64,
    items: VecDeque<RecentText>,
}

struct AppState {
    generator: Generator,
    recent: Mutex<Recent>,
    space_seed: u64,
}

impl AppState {
    fn remember(&self, label: String, feature: Vec<f64>) {
        let mut r = self.recent.lock().expect("recent buffer");
        let id = r.next;
        r.next += 1;
        if r.items.len() == RECENT_CAPACITY {
            r.items.pop_front();
        }
        r.items.push_back(RecentText { id, label, feature });
    }
}

type Shared = Arc<AppState>;

pub fn router(generator: Generator, space_seed: u64) -> Router {
    let state = Arc::new(AppState {
        generator,
        recent: Mutex::new(Recent::default()),
        space_seed,
    });
    Router::new()
        .route("/healthz", get(healthz))
        .route("/tokenize", post(tokenize))
        .route("/attention", post(attention))
        .route("/generate", post(generate))
        .route("/library/{clip_id}", get(library_clip))
        .route("/space", get(space))
        .with_state(state)
}

struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "bad_request",
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::ConfigMismatch { .. } => (StatusCode::CONFLICT, "config_mismatch"),
            Error::Validation(_) => (StatusCode::BAD_REQUEST, "validation"),
            Error::InvalidInput(_) => (StatusCode::BAD_REQUEST, "invalid_input"),
            Error::Json { .. } | Error::Format { .. } => (StatusCode::BAD_REQUEST, "bad_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self {
            status,
            code,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({"error": {"code": self.code, "message": self.message}});
        (self.status, json_body(body.to_string())).into_response()
    }
}

fn json_body(text: String) -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/json")], text)
}

fn ok<T: Serialize>(value: &T) -> Response {
    json_body(persist::to_json(value)).into_response()
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("request body: {e}")))
}

async fn healthz(State(s): State<Shared>) -> Response {
    ok(&serde_json::json!({
        "status": "ok",
        "config_hash": s.generator.config_hash(),
        "library_size": s.generator.library.len(),
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TextBody {
    text: String,
    #[serde(default)]
    attention_override: Option<Vec<WordWeight>>,
}

async fn tokenize(State(s): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let req: TextBody = parse(&body)?;
    let tokens = tokenize_words(&req.text);
    Ok(ok(&serde_json::json!({
        "tokens": tokens,
        "max_tokens": s.generator.model.max_tokens,
        "segment_words": s.generator.retrieval.segment_words,
    })))
}

#[derive(Serialize)]
struct AttentionSegment {
    token_offset: usize,
    tokens: Vec<String>,
    raw_attention: Vec<f64>,
    attention: Vec<f64>,
}

async fn attention(State(s): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let req: TextBody = parse(&body)?;
    let words = tokenize_words(&req.text);
    let overrides: Option<Vec<(usize, f64)>> = req
        .attention_override
        .map(|o| o.iter().map(|w| (w.index, w.weight)).collect());
    let segs = s.generator.attend(&words, overrides.as_deref())?;
    let mut out = Vec::with_capacity(segs.len());
    for seg in segs {
        s.remember(seg.tokens.join(" "), seg.attended.feature);
        out.push(AttentionSegment {
            token_offset: seg.token_offset,
            tokens: seg.tokens,
            raw_attention: seg.attended.raw_attention,
            attention: seg.attended.attention,
        });
    }
    Ok(ok(&serde_json::json!({
        "config_hash": s.generator.config_hash(),
        "segments": out,
    })))
}

async fn generate(State(s): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let req: GenerationRequest = parse(&body)?;
    let state = s.clone();
    let out = tokio::task::spawn_blocking(move || state.generator.generate(&req))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: e.to_string(),
        })??;
    for seg in &out.diagnostics.segments {
        s.remember(seg.tokens.join(" "), seg.feature.clone());
    }
    Ok(ok(&out))
}

async fn library_clip(State(s): State<Shared>, Path(clip_id): Path<String>) -> Result<Response, ApiError> {
    match s.generator.library.clip(&clip_id) {
        Some(c) => Ok(json_body(c.to_json()).into_response()),
        None => Err(ApiError {
            status: StatusCode::NOT_FOUND,
            code: "not_found",
            message: format!("no clip {clip_id} in the library"),
        }),
    }
}

#[derive(Serialize)]
struct SpacePoint {
    kind: &'static str,
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    cluster: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    coords: Vec<f64>,
}

/// Library features and recent text features under one seeded projection.
async fn space(State(s): State<Shared>, Query(q): Query<HashMap<String, String>>) -> Result<Response, ApiError> {
    let dims = match q.get("dims") {
        Some(d) => d.parse::<usize>().map_err(|_| ApiError::bad_request(format!("dims: not a count: {d}")))?,
        None => 2,
    };
    let feature_dim = s.generator.model.feature_dim;
    if dims == 0 || dims > feature_dim {
        return Err(ApiError::bad_request(format!("dims must be between 1 and {feature_dim}")));
    }
    let recent: Vec<RecentText> = s.recent.lock().expect("recent buffer").items.iter().cloned().collect();
    let lib = &s.generator.library.index.entries;
    let mut feats: Vec<Vec<f64>> = lib.iter().map(|e| e.feature.clone()).collect();
    feats.extend(recent.iter().map(|r| r.feature.clone()));
    let coords = random_projection(&feats, dims, s.space_seed)?;
    let mut points = Vec::with_capacity(coords.len());
    let mut coords = coords.into_iter();
    for e in lib {
        points.push(SpacePoint {
            kind: "gesture",
            id: e.clip_id.clone(),
            cluster: e.cluster,
            label: None,
            coords: coords.next().expect("one row per point"),
        });
    }
    for r in recent {
        points.push(SpacePoint {
            kind: "text",
            id: format!("t{}", r.id),
            cluster: None,
            label: Some(r.label),
            coords: coords.next().expect("one row per point"),
        });
    }
    Ok(ok(&serde_json::json!({
        "dims": dims,
        "seed": s.space_seed,
        "points": points,
    })))
}
