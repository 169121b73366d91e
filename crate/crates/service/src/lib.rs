//! Batch reward scoring over HTTP.
//!
//! | method | path              | body                                   |
//! |--------|-------------------|----------------------------------------|
//! | POST   | `/v1/score`       | [`ScoreRequest`] → [`ScoreResponse`]   |
//! | POST   | `/v1/advantages`  | [`AdvantageRequest`] → [`AdvantageResponse`] |
//! | GET    | `/v1/ontology`    | [`OntologyResponse`]                   |
//! | GET    | `/v1/health`      | [`HealthResponse`]                     |
//!
//! Errors are `{"code", "message", "path"}` with a 4xx status.

use std::collections::BTreeMap;
use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cxr_reward::corpus::ScoredRecord;
use cxr_reward::grpo::normalize_group;
use cxr_reward::ontology::{ClassId, LabelSet, Ontology, WeightTable, NUM_CLASSES};
use cxr_reward::reward::{RewardConfig, RewardEngine};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

pub const DEFAULT_MAX_BATCH: usize = 1024;
pub const DEFAULT_BODY_LIMIT: usize = 64 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("invalid reward config: {0}")]
    Config(#[from] cxr_reward::reward::ConfigError),
    #[error("server error: {0}")]
    Serve(std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_batch: usize,
    pub body_limit: usize,
    /// Defaults for every request. `token_scheme` is fixed for the lifetime
    /// of the server.
    pub reward: RewardConfig,
    pub ontology: Arc<Ontology>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_batch: DEFAULT_MAX_BATCH,
            body_limit: DEFAULT_BODY_LIMIT,
            reward: RewardConfig::default(),
            ontology: Ontology::shared_builtin().clone(),
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    config: Arc<ServiceConfig>,
    engine: Arc<RewardEngine>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Result<Self, ServiceError> {
        let engine = RewardEngine::new(config.reward.clone(), config.ontology.clone())?;
        Ok(AppState { config: Arc::new(config), engine: Arc::new(engine) })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.config.body_limit;
    Router::new()
        .route("/v1/score", post(score))
        .route("/v1/advantages", post(advantages))
        .route("/v1/ontology", get(ontology))
        .route("/v1/health", get(health))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

pub async fn bind(addr: SocketAddr) -> Result<TcpListener, ServiceError> {
    TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind { addr, source })
}

/// Serves until `shutdown` resolves, then lets in-flight requests finish.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await.map_err(ServiceError::Serve)
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutdown requested, draining");
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    pub path: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>, path: impl Into<String>) -> Self {
        ApiError { status: status.as_u16(), code: code.into(), message: message.into(), path: path.into() }
    }

    fn invalid(message: impl Into<String>, path: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", message, path)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::BAD_REQUEST);
        (status, Json(self)).into_response()
    }
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { String::new() } else { path };
        ApiError::new(StatusCode::BAD_REQUEST, "malformed", e.into_inner().to_string(), path)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreItem {
    pub id: String,
    pub text: String,
    /// Canonical class names.
    pub gold: Vec<String>,
}

/// Per-request changes to the server's reward defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_min: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_group: Option<f64>,
    /// Class name → weight; unnamed classes keep the server default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<BTreeMap<String, f64>>,
    /// Accepted only if it equals the server's scheme.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_scheme: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub items: Vec<ScoreItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RewardOverrides>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub engine_version: String,
    pub lexicon_version: String,
    pub config_hash: String,
    pub records: Vec<ScoredRecord>,
}

fn resolve_config(base: &RewardConfig, o: &RewardOverrides) -> Result<RewardConfig, ApiError> {
    let mut cfg = base.clone();
    if let Some(l) = o.l_min {
        cfg.l_min = l;
    }
    if let Some(e) = o.epsilon_group {
        cfg.epsilon_group = e;
    }
    if let Some(scheme) = &o.token_scheme {
        if *scheme != base.token_scheme {
            return Err(ApiError::invalid(
                format!("token_scheme is fixed at {:?} for this server", base.token_scheme),
                "config.token_scheme",
            ));
        }
    }
    if let Some(map) = &o.weights {
        let mut w: [f64; NUM_CLASSES] = *base.weights.as_array();
        for (name, value) in map {
            let c = ClassId::from_name(name).ok_or_else(|| {
                ApiError::invalid(format!("unknown class {name:?}"), format!("config.weights.{name}"))
            })?;
            w[c.index()] = *value;
        }
        cfg.weights = WeightTable::new(w).map_err(|e| ApiError::invalid(e.to_string(), "config.weights"))?;
    }
    cfg.validate().map_err(|e| ApiError::invalid(e.to_string(), "config"))?;
    Ok(cfg)
}

/// Validates every item before any scoring; one bad item rejects the batch.
fn validate_items(items: &[ScoreItem]) -> Result<Vec<LabelSet>, ApiError> {
    let mut seen = std::collections::HashSet::new();
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            if !seen.insert(item.id.as_str()) {
                return Err(ApiError::invalid(format!("duplicate id {:?}", item.id), format!("items[{i}].id")));
            }
            let mut set = LabelSet::empty();
            for (j, name) in item.gold.iter().enumerate() {
                let c = ClassId::from_name(name).ok_or_else(|| {
                    ApiError::invalid(format!("unknown class {name:?}"), format!("items[{i}].gold[{j}]"))
                })?;
                set.insert(c);
            }
            Ok(set)
        })
        .collect()
}

pub fn handle_score(state: &AppState, req: ScoreRequest) -> Result<ScoreResponse, ApiError> {
    if req.items.len() > state.config.max_batch {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "batch_too_large",
            format!("{} items exceeds the limit of {}", req.items.len(), state.config.max_batch),
            "items",
        ));
    }
    let golds = validate_items(&req.items)?;
    let engine = match &req.config {
        None => state.engine.as_ref().clone(),
        Some(o) => {
            let cfg = resolve_config(state.engine.config(), o)?;
            RewardEngine::new(cfg, state.config.ontology.clone())
                .map_err(|e| ApiError::invalid(e.to_string(), "config"))?
        }
    };
    let hash = engine.config().config_hash();
    let work: Vec<(&str, LabelSet)> = req.items.iter().map(|i| i.text.as_str()).zip(golds).collect();
    let records = engine
        .score_batch(&work)
        .into_iter()
        .zip(&req.items)
        .map(|(b, item)| ScoredRecord::new(item.id.clone(), b, hash.clone()))
        .collect();
    Ok(ScoreResponse {
        engine_version: cxr_reward::VERSION.to_string(),
        lexicon_version: state.config.ontology.lexicon_version().to_string(),
        config_hash: hash,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvantageRequest {
    pub groups: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageResponse {
    pub advantages: Vec<Vec<f64>>,
}

pub fn handle_advantages(state: &AppState, req: AdvantageRequest) -> Result<AdvantageResponse, ApiError> {
    let eps = req.epsilon.unwrap_or(state.engine.config().epsilon_group);
    let advantages = req
        .groups
        .iter()
        .enumerate()
        .map(|(i, g)| normalize_group(g, eps).map_err(|e| ApiError::invalid(e.to_string(), format!("groups[{i}]"))))
        .collect::<Result<_, _>>()?;
    Ok(AdvantageResponse { advantages })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OntologyClass {
    pub id: u8,
    pub name: String,
    pub is_abnormality: bool,
    pub alias_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OntologyResponse {
    pub lexicon_version: String,
    pub classes: Vec<OntologyClass>,
}

pub fn handle_ontology(state: &AppState) -> OntologyResponse {
    let ont = &state.config.ontology;
    OntologyResponse {
        lexicon_version: ont.lexicon_version().to_string(),
        classes: ClassId::all()
            .map(|c| OntologyClass {
                id: c.index() as u8,
                name: c.name().to_string(),
                is_abnormality: c.is_abnormality(),
                alias_count: ont.aliases(c).len(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub version: String,
    pub token_scheme: String,
    pub max_batch: usize,
}

pub fn handle_health(state: &AppState) -> HealthResponse {
    HealthResponse {
        status: "ok".into(),
        version: cxr_reward::VERSION.to_string(),
        token_scheme: state.engine.config().token_scheme.clone(),
        max_batch: state.config.max_batch,
    }
}

async fn score(State(state): State<AppState>, body: Bytes) -> Result<Json<ScoreResponse>, ApiError> {
    let req: ScoreRequest = parse_body(&body)?;
    // Scoring is CPU-bound and fans out on the rayon pool.
    tokio::task::spawn_blocking(move || handle_score(&state, req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string(), ""))?
        .map(Json)
}

async fn advantages(State(state): State<AppState>, body: Bytes) -> Result<Json<AdvantageResponse>, ApiError> {
    let req: AdvantageRequest = parse_body(&body)?;
    handle_advantages(&state, req).map(Json)
}

async fn ontology(State(state): State<AppState>) -> Json<OntologyResponse> {
    Json(handle_ontology(&state))
}

async fn health(State(state): State<AppState>) -> Json<HealthResponse> {
    Json(handle_health(&state))
}
