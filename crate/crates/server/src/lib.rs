//! HTTP/JSON service over a data directory.
//!
//! Readers work on an immutable [`Snapshot`] of the global model and every
//! loaded tenant, swapped atomically after each write. Each tenant has one
//! writer; a global reload excludes all writers while it rebuilds tenants.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use coltype_core::dpbd::{DpbdError, FeedbackEvent};
use coltype_core::ensemble::PipelineConfig;
use coltype_core::state::{prediction_response, summarize, to_json_text, GlobalModel, StateError, TenantModel};
use coltype_core::store::{load_global, DataDir, StoreError, TableDir, TenantStore, SNAPSHOT_EVERY};
use coltype_core::table::{ParseOptions, TableError, DEFAULT_MAX_ROWS};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Mutex;

pub const TENANT_HEADER: &str = "x-tenant";
pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 8 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub data: DataDir,
    pub max_upload_bytes: usize,
    /// Overrides the pipeline config stored with the global model.
    pub pipeline: Option<PipelineConfig>,
    pub snapshot_every: u64,
}

impl ServerConfig {
    pub fn new(data: DataDir) -> Self {
        ServerConfig { data, max_upload_bytes: DEFAULT_MAX_UPLOAD_BYTES, pipeline: None, snapshot_every: SNAPSHOT_EVERY }
    }
}

/// Everything a read needs, consistent across global and tenants.
#[derive(Debug)]
pub struct Snapshot {
    pub global: Arc<GlobalModel>,
    pub tenants: HashMap<String, Arc<TenantModel>>,
}

struct Inner {
    config: ServerConfig,
    snapshot: RwLock<Arc<Snapshot>>,
    stores: Mutex<HashMap<String, Arc<Mutex<TenantStore>>>>,
    /// Held shared by tenant writers and exclusively by a reload.
    writers: tokio::sync::RwLock<()>,
}

#[derive(Clone)]
pub struct App {
    inner: Arc<Inner>,
}

/// A JSON error body: `{code, message, detail}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into(), detail: Value::Null }
    }

    fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.code, "message": self.message, "detail": self.detail });
        json_response(self.status, to_json_text(&body))
    }
}

fn table_error(e: &TableError) -> ApiError {
    let detail = e.offset().map_or(Value::Null, |o| json!({ "offset": o }));
    ApiError::new(StatusCode::BAD_REQUEST, "parse_error", e.to_string()).with_detail(detail)
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match &e {
            StoreError::Table { source, .. } => table_error(source),
            StoreError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", e.to_string()),
            StoreError::InvalidTenant(_) => ApiError::new(StatusCode::BAD_REQUEST, "invalid_tenant", e.to_string()),
            StoreError::Feedback(f) => match f {
                DpbdError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", e.to_string()),
                DpbdError::Validation(_) | DpbdError::Ontology(_) => {
                    ApiError::new(StatusCode::BAD_REQUEST, "invalid_feedback", e.to_string())
                }
                _ => internal(&e),
            },
            _ => internal(&e),
        }
    }
}

impl From<StateError> for ApiError {
    fn from(e: StateError) -> Self {
        internal(&e)
    }
}

fn internal(e: &dyn std::error::Error) -> ApiError {
    tracing::error!(error = %e, "request failed");
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
}

fn json_response(status: StatusCode, body: String) -> Response {
    let mut r = (status, body).into_response();
    r.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    r
}

fn ok_json<T: Serialize>(value: &T) -> Response {
    json_response(StatusCode::OK, to_json_text(value))
}

fn tenant_of(headers: &HeaderMap) -> Result<String, ApiError> {
    let v = headers
        .get(TENANT_HEADER)
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing_tenant", "the X-Tenant header is required"))?;
    let id = v
        .to_str()
        .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "invalid_tenant", "X-Tenant is not valid text"))?;
    if !coltype_core::store::valid_tenant_id(id) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_tenant", format!("invalid tenant id `{id}`")));
    }
    Ok(id.to_string())
}

impl App {
    /// Loads the global model from `config.data`.
    pub fn open(config: ServerConfig) -> Result<Self, StoreError> {
        let global = load_global(&config.data)?;
        Ok(Self::with_global(config, global))
    }

    pub fn with_global(config: ServerConfig, global: GlobalModel) -> Self {
        let snapshot = Snapshot { global: Arc::new(global), tenants: HashMap::new() };
        App {
            inner: Arc::new(Inner {
                config,
                snapshot: RwLock::new(Arc::new(snapshot)),
                stores: Mutex::new(HashMap::new()),
                writers: tokio::sync::RwLock::new(()),
            }),
        }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        Arc::clone(&self.inner.snapshot.read().expect("snapshot lock"))
    }

    fn pipeline_config(&self, global: &GlobalModel) -> PipelineConfig {
        self.inner.config.pipeline.clone().unwrap_or_else(|| global.config.clone())
    }

    fn publish(&self, tenant: Arc<TenantModel>) {
        let mut slot = self.inner.snapshot.write().expect("snapshot lock");
        let mut tenants = slot.tenants.clone();
        tenants.insert(tenant.tenant_id.clone(), tenant);
        *slot = Arc::new(Snapshot { global: Arc::clone(&slot.global), tenants });
    }

    /// The tenant's store, opened on first use. Callers hold `writers`.
    async fn store(&self, tenant_id: &str) -> Result<Arc<Mutex<TenantStore>>, ApiError> {
        let mut stores = self.inner.stores.lock().await;
        if let Some(s) = stores.get(tenant_id) {
            return Ok(Arc::clone(s));
        }
        let global = self.snapshot().global.clone();
        let store = TenantStore::open(&self.inner.config.data, tenant_id, &global)?
            .with_snapshot_every(self.inner.config.snapshot_every);
        self.publish(store.model());
        let store = Arc::new(Mutex::new(store));
        stores.insert(tenant_id.to_string(), Arc::clone(&store));
        Ok(store)
    }

    /// A consistent (global, tenant) pair for reads.
    async fn read_view(&self, tenant_id: &str) -> Result<(Arc<GlobalModel>, Arc<TenantModel>), ApiError> {
        let snap = self.snapshot();
        if let Some(t) = snap.tenants.get(tenant_id) {
            return Ok((Arc::clone(&snap.global), Arc::clone(t)));
        }
        let _w = self.inner.writers.read().await;
        self.store(tenant_id).await?;
        let snap = self.snapshot();
        let t = snap.tenants.get(tenant_id).expect("published on open");
        Ok((Arc::clone(&snap.global), Arc::clone(t)))
    }

    fn tables(&self, tenant_id: &str) -> Result<TableDir, ApiError> {
        Ok(TableDir::new(&self.inner.config.data.tenant_dir(tenant_id)?))
    }

    /// Reloads `data/global` and rebuilds every loaded tenant against it.
    /// On failure nothing changes.
    pub async fn reload_global(&self) -> Result<u64, ApiError> {
        let _w = self.inner.writers.write().await;
        let reload_err = |e: StoreError| ApiError::new(StatusCode::BAD_REQUEST, "reload_failed", e.to_string());
        let mut global = load_global(&self.inner.config.data).map_err(reload_err)?;
        global.version = self.snapshot().global.version + 1;
        let stores = self.inner.stores.lock().await;
        let mut rebuilt = Vec::new();
        for (id, store) in stores.iter() {
            let guard = store.lock().await;
            rebuilt.push((id.clone(), guard.replay_with(&global).map_err(reload_err)?));
        }
        let mut tenants = HashMap::new();
        for (id, model) in rebuilt {
            let mut guard = stores[&id].lock().await;
            guard.install(model, &global)?;
            tenants.insert(id, guard.model());
        }
        let version = global.version;
        *self.inner.snapshot.write().expect("snapshot lock") = Arc::new(Snapshot { global: Arc::new(global), tenants });
        tracing::info!(version, "global model reloaded");
        Ok(version)
    }
}

#[derive(Debug, Deserialize)]
struct UploadParams {
    name: Option<String>,
    delimiter: Option<char>,
    has_header: Option<bool>,
    max_rows: Option<usize>,
}

#[derive(Debug, Serialize)]
struct UploadResponse {
    table_id: String,
    name: String,
    n_rows: usize,
    n_columns: usize,
    headers: Vec<String>,
}

async fn read_body(body: Body, limit: usize) -> Result<axum::body::Bytes, ApiError> {
    axum::body::to_bytes(body, limit).await.map_err(|e| {
        let too_large = std::error::Error::source(&e)
            .is_some_and(|s| s.is::<http_body_util::LengthLimitError>());
        if too_large {
            ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", format!("body exceeds {limit} bytes"))
        } else {
            ApiError::new(StatusCode::BAD_REQUEST, "bad_body", e.to_string())
        }
    })
}

async fn upload_table(
    State(app): State<App>,
    headers: HeaderMap,
    Query(params): Query<UploadParams>,
    body: Body,
) -> Result<Response, ApiError> {
    let tenant = tenant_of(&headers)?;
    let bytes = read_body(body, app.inner.config.max_upload_bytes).await?;
    let delimiter = match params.delimiter {
        None => b',',
        Some(c) if c.is_ascii() => c as u8,
        Some(_) => return Err(table_error(&TableError::InvalidDelimiter)),
    };
    let options = ParseOptions {
        delimiter,
        has_header: params.has_header.unwrap_or(true),
        max_rows: params.max_rows.unwrap_or(DEFAULT_MAX_ROWS),
    };
    let _w = app.inner.writers.read().await;
    let store = app.store(&tenant).await?;
    let mut store = store.lock().await;
    let name = params.name.unwrap_or_default();
    let table = store.put_table(&bytes, &name, &options)?;
    Ok(ok_json(&UploadResponse {
        n_rows: table.n_rows(),
        n_columns: table.n_columns(),
        headers: table.headers.clone(),
        name,
        table_id: table.table_id,
    }))
}

#[derive(Debug, Deserialize)]
struct TableParams {
    limit: Option<usize>,
}

/// Table contents for review; at most `limit` rows (default 20).
async fn get_table(
    State(app): State<App>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(params): Query<TableParams>,
) -> Result<Response, ApiError> {
    let tenant = tenant_of(&headers)?;
    let table = app.tables(&tenant)?.load(&id)?;
    let limit = params.limit.unwrap_or(20).min(table.n_rows());
    let rows: Vec<Vec<&str>> =
        (0..limit).map(|r| table.columns.iter().map(|c| c.values[r].as_str()).collect()).collect();
    Ok(ok_json(&json!({
        "table_id": table.table_id,
        "name": table.name,
        "headers": table.headers,
        "n_rows": table.n_rows(),
        "rows": rows,
    })))
}

#[derive(Debug, Deserialize)]
struct PredictionParams {
    expected_ontology_version: Option<u64>,
}

async fn get_predictions(
    State(app): State<App>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(params): Query<PredictionParams>,
) -> Result<Response, ApiError> {
    let tenant = tenant_of(&headers)?;
    let (global, model) = app.read_view(&tenant).await?;
    let table = app.tables(&tenant)?.load(&id)?;
    let config = app.pipeline_config(&global);
    let response = prediction_response(&global, &model, &table, &config)?;
    if let Some(expected) = params.expected_ontology_version {
        if expected != response.ontology_version {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "stale_ontology",
                format!("ontology is at version {}, not {expected}", response.ontology_version),
            )
            .with_detail(json!({ "ontology_version": response.ontology_version })));
        }
    }
    Ok(ok_json(&response))
}

async fn post_feedback(State(app): State<App>, headers: HeaderMap, body: Body) -> Result<Response, ApiError> {
    let tenant = tenant_of(&headers)?;
    let bytes = read_body(body, app.inner.config.max_upload_bytes).await?;
    let mut event: FeedbackEvent = serde_json::from_slice(&bytes)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_feedback", e.to_string()))?;
    if event.tenant_id.is_empty() {
        event.tenant_id = tenant.clone();
    } else if event.tenant_id != tenant {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_feedback", "tenant_id does not match X-Tenant"));
    }

    let _w = app.inner.writers.read().await;
    let store = app.store(&tenant).await?.lock_owned().await;
    let global = app.snapshot().global.clone();
    let (result, model) = tokio::task::spawn_blocking(move || {
        let mut store = store;
        let result = store.submit(&global, &event);
        (result, store.model())
    })
    .await
    .map_err(|e| internal(&e))?;
    let result = result?;
    if result.duplicate {
        return Err(ApiError::new(StatusCode::CONFLICT, "duplicate_event", "event_id was already applied")
            .with_detail(serde_json::to_value(&result.report).expect("serializes")));
    }
    app.publish(model);
    Ok(ok_json(&result.report))
}

async fn get_state(State(app): State<App>, headers: HeaderMap) -> Result<Response, ApiError> {
    let tenant = tenant_of(&headers)?;
    let (global, model) = app.read_view(&tenant).await?;
    let mut summary = summarize(&global, &model)?;
    let config = app.pipeline_config(&global);
    summary.tau = config.abstain_threshold;
    summary.c = config.stage_gate;
    summary.top_k = config.top_k;
    Ok(ok_json(&summary))
}

async fn get_ontology(State(app): State<App>, headers: HeaderMap) -> Result<Response, ApiError> {
    let tenant = tenant_of(&headers)?;
    let (global, model) = app.read_view(&tenant).await?;
    let ontology = model.effective_ontology(&global).map_err(StateError::from)?;
    let mut body = serde_json::to_value(&ontology).expect("serializes");
    body["global_version"] = json!(global.version);
    Ok(ok_json(&body))
}

async fn reload(State(app): State<App>) -> Result<Response, ApiError> {
    let version = app.reload_global().await?;
    Ok(ok_json(&json!({ "global_version": version })))
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

pub fn router(app: App) -> Router {
    Router::new()
        .route("/v1/tables", post(upload_table))
        .route("/v1/tables/{id}", get(get_table))
        .route("/v1/tables/{id}/predictions", get(get_predictions))
        .route("/v1/feedback", post(post_feedback))
        .route("/v1/state", get(get_state))
        .route("/v1/ontology", get(get_ontology))
        .route("/v1/admin/global/reload", post(reload))
        .fallback(fallback)
        .layer(axum::extract::DefaultBodyLimit::disable())
        .with_state(app)
}

/// Serves until ctrl-c.
pub async fn serve(app: App, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
