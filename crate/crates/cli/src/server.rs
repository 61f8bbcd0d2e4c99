//! HTTP prediction service over an immutable catalogue snapshot.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{info, warn};
use mlaqp_core::catalogue::MANIFEST;
use mlaqp_core::engine::{Engine, EngineError, Estimate, GroupEstimate, IntervalOut};
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Exactly one of `sql` and `extracted`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sql: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted: Option<Extracted>,
}

/// Pre-vectorized query: aggregate key plus present slots by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Extracted {
    pub af: String,
    pub meta: BTreeMap<usize, f64>,
}

/// The top-level `af`, `estimate`, `interval` and `model_id` repeat the
/// first entry of `estimates`, which has one entry per aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub af: String,
    pub estimate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<IntervalOut>,
    pub model_id: String,
    pub estimates: Vec<Estimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<GroupEstimate>>,
    pub latency_micros: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryInfo {
    pub af: String,
    pub interval: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clusters: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogueIndex {
    pub table: String,
    pub fingerprint: String,
    pub feature_width: usize,
    pub entries: Vec<EntryInfo>,
    pub groupby: Vec<Vec<String>>,
}

#[derive(Debug)]
enum LoadState {
    Loading,
    Failed(String),
    Ready(Arc<Engine>),
}

/// Shared service state. The engine is swapped whole on reload.
#[derive(Debug)]
pub struct AppState {
    dir: PathBuf,
    engine: RwLock<LoadState>,
    stamp: Mutex<Option<Vec<u8>>>,
}

/// The manifest lists every file's checksum, so its bytes identify the
/// catalogue version.
fn manifest_stamp(dir: &Path) -> Option<Vec<u8>> {
    std::fs::read(dir.join(MANIFEST)).ok()
}

impl AppState {
    /// Not yet loaded; every prediction answers 503 until [`AppState::load`].
    pub fn new(dir: impl Into<PathBuf>) -> Arc<Self> {
        Arc::new(AppState {
            dir: dir.into(),
            engine: RwLock::new(LoadState::Loading),
            stamp: Mutex::new(None),
        })
    }

    pub fn with_engine(dir: impl Into<PathBuf>, engine: Engine) -> Arc<Self> {
        let s = Self::new(dir);
        *s.engine.write().unwrap() = LoadState::Ready(Arc::new(engine));
        s
    }

    /// Loads the catalogue and swaps it in. A failed reload keeps the
    /// previous snapshot.
    pub fn load(&self) -> Result<(), String> {
        let stamp = manifest_stamp(&self.dir);
        match Engine::load(&self.dir) {
            Ok(engine) => {
                info!("loaded catalogue {} ({} entries)", self.dir.display(), engine.catalogue().entries.len());
                *self.engine.write().unwrap() = LoadState::Ready(Arc::new(engine));
                *self.stamp.lock().unwrap() = stamp;
                Ok(())
            }
            Err(e) => {
                let msg = e.to_string();
                let mut guard = self.engine.write().unwrap();
                if !matches!(*guard, LoadState::Ready(_)) {
                    *guard = LoadState::Failed(msg.clone());
                }
                Err(msg)
            }
        }
    }

    /// Reloads when the manifest changed since the last successful load.
    pub fn reload_if_changed(&self) -> Option<Result<(), String>> {
        let now = manifest_stamp(&self.dir)?;
        if self.stamp.lock().unwrap().as_deref() == Some(now.as_slice()) {
            return None;
        }
        Some(self.load())
    }

    pub fn engine(&self) -> Option<Arc<Engine>> {
        match &*self.engine.read().unwrap() {
            LoadState::Ready(e) => Some(Arc::clone(e)),
            _ => None,
        }
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn not_ready(state: &AppState) -> Response {
    let msg = match &*state.engine.read().unwrap() {
        LoadState::Failed(m) => format!("catalogue failed to load: {m}"),
        _ => "catalogue is loading".to_string(),
    };
    error(StatusCode::SERVICE_UNAVAILABLE, msg)
}

fn engine_error(e: EngineError) -> Response {
    match e {
        EngineError::UnknownAggregate { af, known } => (
            StatusCode::BAD_REQUEST,
            Json(json!({ "error": format!("no model for {af}"), "known": known })),
        )
            .into_response(),
        EngineError::WidthMismatch { .. } => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        EngineError::Parse(_) | EngineError::Vectorize(_) => error(StatusCode::BAD_REQUEST, e.to_string()),
        other => error(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
    }
}

/// Runs one request against an engine; shared by the HTTP handler and tests.
pub fn answer(engine: &Engine, req: &PredictRequest) -> Result<PredictResponse, Response> {
    let start = Instant::now();
    let (estimates, groups) = match (&req.sql, &req.extracted) {
        (Some(sql), None) => {
            let q = engine.predict_sql(sql).map_err(engine_error)?;
            (q.estimates, q.groups)
        }
        (None, Some(x)) => {
            let meta = engine.sparse_meta(&x.meta).map_err(engine_error)?;
            let e = engine.predict_meta(&x.af, meta.as_raw()).map_err(engine_error)?;
            (vec![e], None)
        }
        _ => {
            return Err(error(
                StatusCode::BAD_REQUEST,
                "request needs exactly one of `sql` and `extracted`",
            ))
        }
    };
    let latency_micros = start.elapsed().as_micros() as u64;
    let first = estimates
        .first()
        .cloned()
        .ok_or_else(|| error(StatusCode::BAD_REQUEST, "query has no aggregate"))?;
    Ok(PredictResponse {
        af: first.af,
        estimate: first.estimate,
        interval: first.interval,
        model_id: first.model_id,
        estimates,
        groups,
        latency_micros,
    })
}

async fn predict(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let Some(engine) = state.engine() else {
        return not_ready(&state);
    };
    let req: PredictRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    match answer(&engine, &req) {
        Ok(resp) => Json(resp).into_response(),
        Err(r) => r,
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match state.engine() {
        Some(e) => Json(json!({
            "status": "ok",
            "entries": e.catalogue().entries.len(),
            "fingerprint": e.catalogue().schema.fingerprint(),
        }))
        .into_response(),
        None => not_ready(&state),
    }
}

pub fn index(engine: &Engine) -> CatalogueIndex {
    let cat = engine.catalogue();
    CatalogueIndex {
        table: cat.schema.name.clone(),
        fingerprint: cat.schema.fingerprint(),
        feature_width: cat.feature_width(),
        entries: cat
            .entries
            .iter()
            .map(|(k, e)| EntryInfo {
                af: k.clone(),
                interval: e.interval.is_some(),
                clusters: e.ensemble.as_ref().map(|x| x.local_models.len()),
            })
            .collect(),
        groupby: cat.groupby.keys().cloned().collect(),
    }
}

async fn catalogue(State(state): State<Arc<AppState>>) -> Response {
    match state.engine() {
        Some(e) => Json(index(&e)).into_response(),
        None => not_ready(&state),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .route("/health", get(health))
        .route("/catalogue", get(catalogue))
        .with_state(state)
}

/// Binds, loads the catalogue in the background and serves until Ctrl-C.
/// `reload` of zero disables polling the manifest for changes.
pub async fn serve(dir: PathBuf, bind: &str, reload: Duration) -> anyhow::Result<()> {
    let state = AppState::new(dir);
    let listener = tokio::net::TcpListener::bind(bind).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    let loader = Arc::clone(&state);
    tokio::task::spawn_blocking(move || {
        if let Err(e) = loader.load() {
            warn!("catalogue load failed: {e}");
        }
    });
    if !reload.is_zero() {
        let watcher = Arc::clone(&state);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(reload);
            loop {
                tick.tick().await;
                let w = Arc::clone(&watcher);
                if let Ok(Some(Err(e))) = tokio::task::spawn_blocking(move || w.reload_if_changed()).await {
                    warn!("reload failed, keeping the previous catalogue: {e}");
                }
            }
        });
    }
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
