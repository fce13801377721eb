//! HTTP/JSON API over a region catalog.
//!
//! | route                          | result                                   |
//! |--------------------------------|------------------------------------------|
//! | `POST /regions`                | 202 `{region_id, status}`, ingests in the background |
//! | `GET /regions`                 | `[{region_id, name, status, spec, ...}]` |
//! | `GET /regions/{id}`            | full manifest                            |
//! | `DELETE /regions/{id}`         | 204                                      |
//! | `GET /regions/{id}/query?...`  | heatmap JSON                             |
//! | `GET /healthz`                 | 200                                      |
//!
//! Errors are `{"error": ..., "status": ...}` with 404 (unknown region), 409
//! (region pending or failed), 422 (invalid parameters) or 500.

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Argmax, QueryEngine, QueryRequest};
use crate::error::{Error, Result};
use crate::geodata::{build_grid, BBox, CaptureTime, RegionSpec, RetryPolicy};
use crate::mapstore::{open_provider, Catalog, PrecomputeOptions, RegionStatus, RegionStore, StoreManifest};

pub const CATALOG_ENV: &str = "XVIEW_CATALOG";
pub const PORT_ENV: &str = "XVIEW_PORT";
pub const MODEL_ENV: &str = "XVIEW_MODEL";
pub const DEFAULT_PORT: u16 = 8080;

pub struct AppState {
    pub catalog: Arc<Catalog>,
    pub engine: Arc<QueryEngine>,
    pub retry: RetryPolicy,
    stores: RwLock<HashMap<String, Arc<RegionStore>>>,
    jobs: Mutex<HashSet<String>>,
}

impl AppState {
    pub fn new(catalog: Catalog, engine: QueryEngine) -> Arc<Self> {
        Arc::new(AppState {
            catalog: Arc::new(catalog),
            engine: Arc::new(engine),
            retry: RetryPolicy::default(),
            stores: RwLock::new(HashMap::new()),
            jobs: Mutex::new(HashSet::new()),
        })
    }

    fn job_running(&self, id: &str) -> bool {
        self.jobs.lock().expect("job set poisoned").contains(id)
    }

    fn store(&self, id: &str) -> Result<Arc<RegionStore>> {
        if let Some(s) = self.stores.read().expect("store cache poisoned").get(id) {
            return Ok(Arc::clone(s));
        }
        let store = Arc::new(self.catalog.load(id)?);
        self.stores
            .write()
            .expect("store cache poisoned")
            .insert(id.to_string(), Arc::clone(&store));
        Ok(store)
    }
}

pub struct ApiError(pub Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match &self.0 {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::Domain(_) | Error::Config(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        let body = Json(json!({ "error": self.0.to_string(), "status": status.as_u16() }));
        (status, body).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum BBoxInput {
    Array([f64; 4]),
    Object(BBox),
}

#[derive(Debug, Deserialize)]
struct CreateRegion {
    name: String,
    bbox: BBoxInput,
    zoom: i32,
    provider: String,
    #[serde(default)]
    tile_px: Option<u32>,
    #[serde(default)]
    meta: Option<CaptureTime>,
}

#[derive(Debug, Serialize)]
struct RegionSummary {
    region_id: String,
    name: String,
    status: RegionStatus,
    spec: RegionSpec,
    rows: usize,
    cols: usize,
    created_at: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    pub region_id: String,
    pub rows: usize,
    pub cols: usize,
    pub bbox: BBox,
    pub values: Vec<f64>,
    pub argmax: Argmax,
    pub query: String,
    pub meta: Option<CaptureTime>,
    pub raw: bool,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/regions", get(list_regions).post(create_region))
        .route("/regions/{id}", get(get_region).delete(delete_region))
        .route("/regions/{id}/query", get(query_region))
        .with_state(state)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn list_regions(State(st): State<Arc<AppState>>) -> ApiResult<Json<Vec<RegionSummary>>> {
    let catalog = Arc::clone(&st.catalog);
    let manifests = blocking(move || catalog.list()).await?;
    Ok(Json(
        manifests
            .into_iter()
            .map(|m| RegionSummary {
                region_id: m.region_id,
                name: m.name,
                status: m.status,
                spec: m.spec,
                rows: m.rows,
                cols: m.cols,
                created_at: m.created_at,
            })
            .collect(),
    ))
}

async fn get_region(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<StoreManifest>> {
    Ok(Json(st.catalog.get(&id)?))
}

async fn delete_region(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    if st.job_running(&id) {
        return Err(Error::Conflict(format!("region {id} is being ingested")).into());
    }
    st.catalog.delete(&id)?;
    st.stores.write().expect("store cache poisoned").remove(&id);
    Ok(StatusCode::NO_CONTENT)
}

async fn create_region(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let req: CreateRegion =
        serde_json::from_slice(&body).map_err(|e| Error::domain(format!("invalid region request: {e}")))?;
    let bbox = match req.bbox {
        BBoxInput::Array([min_lat, min_lon, max_lat, max_lon]) => BBox {
            min_lat,
            min_lon,
            max_lat,
            max_lon,
        },
        BBoxInput::Object(b) => b,
    };
    let spec = RegionSpec::new(bbox, req.zoom, req.tile_px.unwrap_or(256))?;
    build_grid(&spec)?;
    open_provider(&req.provider)?;
    let manifest = StoreManifest::pending(&req.name, spec, &req.provider, req.meta, &st.engine.model)?;
    let id = manifest.region_id.clone();
    let current = st.catalog.register(manifest.clone())?;
    let status = if current.status == RegionStatus::Ready && !stale(&current, &manifest) {
        RegionStatus::Ready
    } else {
        spawn_ingest(&st, manifest);
        RegionStatus::Pending
    };
    Ok((StatusCode::ACCEPTED, Json(json!({ "region_id": id, "status": status }))))
}

/// A ready region registered with different inputs than the new request.
fn stale(current: &StoreManifest, requested: &StoreManifest) -> bool {
    current.meta != requested.meta || current.provider != requested.provider || current.model_checksum != requested.model_checksum
}

fn spawn_ingest(st: &Arc<AppState>, manifest: StoreManifest) {
    let id = manifest.region_id.clone();
    if !st.jobs.lock().expect("job set poisoned").insert(id.clone()) {
        return;
    }
    st.stores.write().expect("store cache poisoned").remove(&id);
    let st = Arc::clone(st);
    tokio::task::spawn_blocking(move || {
        let outcome = open_provider(&manifest.provider).and_then(|provider| {
            let opts = PrecomputeOptions {
                retry: st.retry,
                ..PrecomputeOptions::default()
            };
            st.catalog.ingest(manifest, &st.engine.model, provider.as_ref(), &opts)
        });
        match outcome {
            Ok(store) => tracing::info!(region = %id, status = ?store.manifest.status, "ingest finished"),
            Err(e) => {
                tracing::error!(region = %id, "ingest failed: {e}");
                if let Err(e2) = st.catalog.mark_failed(&id, &e.to_string()) {
                    tracing::error!(region = %id, "could not record failure: {e2}");
                }
            }
        }
        st.jobs.lock().expect("job set poisoned").remove(&id);
    });
}

fn parse_field<T: std::str::FromStr>(params: &HashMap<String, String>, key: &str) -> Result<Option<T>> {
    match params.get(key).map(|s| s.trim()).filter(|s| !s.is_empty()) {
        None => Ok(None),
        Some(s) => s
            .parse()
            .map(Some)
            .map_err(|_| Error::domain(format!("invalid value {s:?} for {key}"))),
    }
}

fn parse_bool(params: &HashMap<String, String>, key: &str) -> Result<Option<bool>> {
    match params.get(key).map(|s| s.trim().to_ascii_lowercase()) {
        None => Ok(None),
        Some(s) => match s.as_str() {
            "" => Ok(None),
            "true" | "1" | "yes" => Ok(Some(true)),
            "false" | "0" | "no" => Ok(Some(false)),
            _ => Err(Error::domain(format!("invalid value {s:?} for {key}"))),
        },
    }
}

/// Builds a request from query-string parameters.
pub fn parse_query(id: &str, params: &HashMap<String, String>) -> Result<QueryRequest> {
    let text = params.get("text").map(|t| t.trim()).unwrap_or_default();
    if text.is_empty() {
        return Err(Error::domain("text parameter is required"));
    }
    let req = QueryRequest {
        region_id: id.to_string(),
        text: text.to_string(),
        year: parse_field(params, "year")?,
        month: parse_field(params, "month")?,
        day: parse_field(params, "day")?,
        hour: parse_field(params, "hour")?,
        use_meta: parse_bool(params, "use_meta")?,
        raw: parse_bool(params, "raw")?.unwrap_or(false),
    };
    req.capture_time(None)?;
    Ok(req)
}

async fn query_region(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<Json<QueryResponse>> {
    let manifest = st.catalog.get(&id)?;
    match manifest.status {
        RegionStatus::Ready => {}
        RegionStatus::Pending => return Err(Error::Conflict(format!("region {id} is still being ingested")).into()),
        RegionStatus::Failed => return Err(Error::Conflict(format!("region {id} failed to ingest")).into()),
    }
    let req = parse_query(&id, &params)?;
    let st2 = Arc::clone(&st);
    let heatmap = blocking(move || {
        let store = st2.store(&req.region_id)?;
        st2.engine.query(&store, &req)
    })
    .await?;
    Ok(Json(QueryResponse {
        region_id: id,
        rows: heatmap.rows,
        cols: heatmap.cols,
        bbox: heatmap.bbox,
        values: heatmap.values,
        argmax: heatmap.argmax,
        query: heatmap.query,
        meta: heatmap.meta,
        raw: heatmap.raw,
    }))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| Error::Internal(format!("worker task failed: {e}")))?
}

/// Serves until the listener fails or ctrl-c is received.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Internal(format!("cannot bind {addr}: {e}")))?;
    serve_listener(state, listener).await
}

/// Serves on an already bound listener.
pub async fn serve_listener(state: Arc<AppState>, listener: tokio::net::TcpListener) -> Result<()> {
    if let Ok(addr) = listener.local_addr() {
        tracing::info!(%addr, "listening");
    }
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::Internal(format!("server stopped: {e}")))
}
