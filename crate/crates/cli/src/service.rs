//! HTTP service: schema introspection, generation and scoring over one
//! immutable model loaded at startup.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use styledlm::corpus::tokenize;
use styledlm::model::Checkpoint;
use styledlm::sampler::{sample_many, SamplerConfig, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE};
use styledlm::schema::{default_schema, ParameterSchema, SchemaError, StyleAssignment};

pub const MAX_COUNT: usize = 100;

pub struct LoadedModel {
    pub checkpoint: Checkpoint,
    /// Short content hash reported to clients.
    pub id: String,
}

impl LoadedModel {
    pub fn new(checkpoint: Checkpoint) -> Self {
        let id = checkpoint.digest()[..12].to_string();
        LoadedModel { checkpoint, id }
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    pub model: Option<Arc<LoadedModel>>,
}

impl AppState {
    pub fn with_model(checkpoint: Checkpoint) -> Self {
        AppState { model: Some(Arc::new(LoadedModel::new(checkpoint))) }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    pub field: Option<String>,
}

struct Failure(StatusCode, ApiError);

impl Failure {
    fn bad(code: &str, message: impl Into<String>, field: Option<&str>) -> Self {
        Failure(
            StatusCode::BAD_REQUEST,
            ApiError { code: code.into(), message: message.into(), field: field.map(String::from) },
        )
    }

    fn unavailable() -> Self {
        Failure(
            StatusCode::SERVICE_UNAVAILABLE,
            ApiError { code: "model_unavailable".into(), message: "no model is loaded".into(), field: None },
        )
    }

    fn internal(message: impl Into<String>) -> Self {
        Failure(
            StatusCode::INTERNAL_SERVER_ERROR,
            ApiError { code: "internal".into(), message: message.into(), field: None },
        )
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<SchemaError> for Failure {
    fn from(e: SchemaError) -> Self {
        let field = e.field().map(|f| format!("assignment.{f}"));
        Failure::bad("invalid_assignment", e.to_string(), field.as_deref())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/schema", get(schema))
        .route("/generate", post(generate))
        .route("/score", post(score))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    Json(serde_json::json!({
        "status": "ok",
        "model_loaded": state.model.is_some(),
        "model": state.model.as_ref().map(|m| m.id.clone()),
    }))
}

#[derive(Serialize)]
struct SchemaParam<'a> {
    name: &'a str,
    values: &'a [String],
    embedding_dim: usize,
}

fn schema_document(schema: &ParameterSchema) -> Value {
    let params: Vec<SchemaParam> = schema
        .parameters()
        .iter()
        .map(|p| SchemaParam { name: &p.name, values: &p.values, embedding_dim: p.embedding_dim })
        .collect();
    serde_json::json!({ "parameters": params })
}

async fn schema(State(state): State<AppState>) -> Json<Value> {
    match &state.model {
        Some(m) => Json(schema_document(m.checkpoint.model.schema())),
        None => Json(schema_document(&default_schema())),
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, Failure> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Err(Failure::bad("empty_body", "request body is empty", None));
    }
    serde_json::from_slice(body).map_err(|e| Failure::bad("malformed_body", e.to_string(), None))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRequest {
    pub assignment: StyleAssignment,
    pub count: usize,
    pub temperature: Option<f64>,
    pub max_tokens: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct GeneratedItem {
    pub text: String,
    pub logprob: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct GenerationResponse {
    pub sentences: Vec<GeneratedItem>,
    pub model: String,
    pub config: EffectiveConfig,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct EffectiveConfig {
    pub assignment: StyleAssignment,
    pub count: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

async fn generate(State(state): State<AppState>, body: Bytes) -> Result<Json<GenerationResponse>, Failure> {
    let model = state.model.clone().ok_or_else(Failure::unavailable)?;
    let req: GenerationRequest = parse_body(&body)?;
    if !(1..=MAX_COUNT).contains(&req.count) {
        return Err(Failure::bad("invalid_count", format!("count must be between 1 and {MAX_COUNT}"), Some("count")));
    }
    let temperature = req.temperature.unwrap_or(DEFAULT_TEMPERATURE);
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Failure::bad("invalid_temperature", "temperature must be positive", Some("temperature")));
    }
    let max_tokens = req.max_tokens.unwrap_or(DEFAULT_MAX_TOKENS);
    if max_tokens == 0 {
        return Err(Failure::bad("invalid_max_tokens", "max_tokens must be at least 1", Some("max_tokens")));
    }
    model.checkpoint.model.schema().validate(&req.assignment)?;
    let seed = req.seed.unwrap_or_else(rand::random);
    let cfg = SamplerConfig { temperature, max_tokens, seed };
    let assignment = req.assignment.clone();
    let count = req.count;
    let worker = model.clone();
    let sampled = tokio::task::spawn_blocking(move || {
        let ck = &worker.checkpoint;
        sample_many(&ck.model, &ck.bpe, &assignment, count, &cfg, 0)
    })
    .await
    .map_err(|e| Failure::internal(e.to_string()))?
    .map_err(|e| Failure::internal(e.to_string()))?;
    Ok(Json(GenerationResponse {
        sentences: sampled.iter().map(|s| GeneratedItem { text: s.text(), logprob: s.log_probability }).collect(),
        model: model.id.clone(),
        config: EffectiveConfig { assignment: req.assignment, count, temperature, max_tokens, seed },
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub text: String,
    pub assignment: StyleAssignment,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ScoreResponse {
    pub logprob: f64,
    /// Subword units scored, EOS included.
    pub token_count: usize,
    pub perplexity: f64,
}

async fn score(State(state): State<AppState>, body: Bytes) -> Result<Json<ScoreResponse>, Failure> {
    let model = state.model.clone().ok_or_else(Failure::unavailable)?;
    let req: ScoreRequest = parse_body(&body)?;
    let tokens = tokenize(&req.text);
    if tokens.is_empty() {
        return Err(Failure::bad("empty_text", "text has no tokens", Some("text")));
    }
    let ck = &model.checkpoint;
    ck.model.schema().validate(&req.assignment)?;
    let ids = ck.bpe.encode(&tokens);
    let assignment = req.assignment.clone();
    let worker = model.clone();
    let nll = tokio::task::spawn_blocking(move || worker.checkpoint.model.sentence_nll(&ids, &assignment))
        .await
        .map_err(|e| Failure::internal(e.to_string()))?
        .map_err(|e| Failure::internal(e.to_string()))?;
    let token_count = ck.bpe.encode(&tokens).len() + 1;
    Ok(Json(ScoreResponse { logprob: -nll, token_count, perplexity: (nll / token_count as f64).exp() }))
}
