//! HTTP JSON API over a read-only store snapshot.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use uvstyle::fewshot::{fewshot_query, ExampleSelection};
use uvstyle::geom::{load_dataset, Dataset, Labels, UVSolid};
use uvstyle::grad::{glyphs, style_gradient, GradMode, Glyph, Pipeline};
use uvstyle::index::{topk, Ranked, StoreDir};
use uvstyle::style::{triu_len, LayerWeights};
use uvstyle::Error;

use crate::mesh::{mesh_preview, MeshPreview};

pub const DEFAULT_PORT: u16 = 8080;
pub const PAGE_SIZE: usize = 50;
const MAX_PAGE_SIZE: usize = 1000;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub store: PathBuf,
    pub data: PathBuf,
    pub port: u16,
    /// Directory of the built UI bundle, served at `/`.
    pub static_dir: Option<PathBuf>,
}

/// Store, dataset and a lazily filled mesh cache. Never mutated apart from the cache.
pub struct Snapshot {
    pub store: StoreDir,
    pub dataset: Dataset,
    by_id: HashMap<String, usize>,
    meshes: Mutex<HashMap<String, Arc<MeshPreview>>>,
}

impl Snapshot {
    pub fn load(store: &Path, data: &Path) -> uvstyle::Result<Self> {
        let store = StoreDir::load(store, None)?;
        let dataset = load_dataset(data)?;
        let by_id: HashMap<String, usize> = dataset
            .solids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.solid_id.clone(), i))
            .collect();
        if let Some(id) = store.store.ids().iter().find(|id| !by_id.contains_key(*id)) {
            return Err(Error::Incompatible(format!(
                "store entry {id} is not in the dataset at {}",
                data.display()
            )));
        }
        Ok(Snapshot {
            store,
            dataset,
            by_id,
            meshes: Mutex::new(HashMap::new()),
        })
    }

    fn solid(&self, id: &str) -> Result<&UVSolid, ApiError> {
        self.by_id
            .get(id)
            .map(|&i| &self.dataset.solids[i])
            .ok_or_else(|| ApiError::from(Error::UnknownId(id.to_string())))
    }

    fn mesh(&self, id: &str) -> Result<Arc<MeshPreview>, ApiError> {
        if let Some(m) = self.meshes.lock().expect("mesh cache").get(id) {
            return Ok(m.clone());
        }
        let m = Arc::new(mesh_preview(self.solid(id)?));
        self.meshes.lock().expect("mesh cache").insert(id.to_string(), m.clone());
        Ok(m)
    }
}

pub struct AppState {
    config: ServiceConfig,
    current: RwLock<Arc<Snapshot>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> uvstyle::Result<Self> {
        let snap = Snapshot::load(&config.store, &config.data)?;
        Ok(AppState {
            config,
            current: RwLock::new(Arc::new(snap)),
        })
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().expect("snapshot lock").clone()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<&'static str>,
}

impl ApiError {
    fn invalid(field: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
            field: Some(field),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::UnknownId(_) => StatusCode::NOT_FOUND,
            Error::Contract(_) | Error::Incompatible(_) | Error::DegenerateLayer { .. } => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            message: e.to_string(),
            field: None,
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError {
            status: r.status(),
            message: r.body_text(),
            field: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = match self.field {
            Some(f) => json!({ "error": self.message, "field": f }),
            None => json!({ "error": self.message }),
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn weights_field(w: Option<Vec<f64>>, layers: usize) -> Result<LayerWeights, ApiError> {
    let Some(w) = w else {
        return Ok(LayerWeights::uniform(layers));
    };
    if w.len() != layers {
        return Err(ApiError::invalid(
            "weights",
            format!("expected {layers} layer weights, got {}", w.len()),
        ));
    }
    LayerWeights::new(w).map_err(|e| ApiError::invalid("weights", e.to_string()))
}

fn check_k(k: usize) -> Result<(), ApiError> {
    if k == 0 {
        return Err(ApiError::invalid("k", "k must be at least 1"));
    }
    Ok(())
}

fn check_id(field: &'static str, id: &str) -> Result<(), ApiError> {
    if id.is_empty() {
        return Err(ApiError::invalid(field, "must not be empty"));
    }
    Ok(())
}

fn default_k() -> usize {
    10
}

fn yes() -> bool {
    true
}

// ---------------------------------------------------------------- solids

#[derive(Debug, Deserialize)]
pub struct PageQuery {
    #[serde(default)]
    pub page: usize,
    pub per_page: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SolidSummary {
    pub id: String,
    pub labels: Option<Labels>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SolidPage {
    pub page: usize,
    pub per_page: usize,
    pub total: usize,
    pub solids: Vec<SolidSummary>,
}

async fn list_solids(State(app): State<Arc<AppState>>, Query(q): Query<PageQuery>) -> ApiResult<SolidPage> {
    let per_page = q.per_page.unwrap_or(PAGE_SIZE);
    if per_page == 0 || per_page > MAX_PAGE_SIZE {
        return Err(ApiError::invalid("per_page", format!("must be in 1..={MAX_PAGE_SIZE}")));
    }
    let snap = app.snapshot();
    let ids = snap.store.store.ids();
    let solids = ids
        .iter()
        .skip(q.page.saturating_mul(per_page))
        .take(per_page)
        .map(|id| SolidSummary {
            id: id.clone(),
            labels: snap.dataset.manifest.labels.get(id).cloned(),
        })
        .collect();
    Ok(Json(SolidPage {
        page: q.page,
        per_page,
        total: ids.len(),
        solids,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SolidInfo {
    pub id: String,
    pub labels: Option<Labels>,
    pub num_faces: usize,
    pub visible_samples: usize,
    pub adjacency: Vec<(usize, usize)>,
    pub bbox_min: [f32; 3],
    pub bbox_max: [f32; 3],
}

async fn solid_info(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<SolidInfo> {
    let snap = app.snapshot();
    let s = snap.solid(&id)?;
    let (lo, hi) = s.bounds();
    Ok(Json(SolidInfo {
        id: s.solid_id.clone(),
        labels: s.labels.clone(),
        num_faces: s.num_faces(),
        visible_samples: s.visible_count(),
        adjacency: s.adjacency.clone(),
        bbox_min: lo,
        bbox_max: hi,
    }))
}

async fn solid_mesh(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let m = app.snapshot().mesh(&id)?;
    Ok(Json(&*m).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LayerInfo {
    pub index: usize,
    pub name: String,
    pub dims: usize,
    pub gram_length: usize,
    pub stored_length: usize,
    pub normalization: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LayersResponse {
    pub layers: Vec<LayerInfo>,
    pub fingerprint: String,
    pub reduction: Option<String>,
    pub entries: usize,
}

async fn layers(State(app): State<Arc<AppState>>) -> Json<LayersResponse> {
    let snap = app.snapshot();
    let sd = &snap.store;
    let spec = &sd.weights.spec;
    let layers = spec
        .layer_names()
        .into_iter()
        .zip(spec.layer_dims())
        .enumerate()
        .map(|(i, (name, d))| LayerInfo {
            index: i,
            name,
            dims: d,
            gram_length: triu_len(d),
            stored_length: sd.store.layer_lengths()[i],
            normalization: sd.policy.layers[i].tag().to_string(),
        })
        .collect();
    Json(LayersResponse {
        layers,
        fingerprint: sd.store.fingerprint().to_string(),
        reduction: sd.store.fingerprint().reduction.clone(),
        entries: sd.store.len(),
    })
}

// ---------------------------------------------------------------- queries

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRequest {
    pub query_id: String,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "yes")]
    pub exclude_self: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    pub query_id: String,
    pub k: usize,
    pub weights: LayerWeights,
    pub results: Vec<Ranked>,
}

async fn query(State(app): State<Arc<AppState>>, body: Result<Json<QueryRequest>, JsonRejection>) -> ApiResult<QueryResponse> {
    let Json(req) = body?;
    check_id("query_id", &req.query_id)?;
    check_k(req.k)?;
    let snap = app.snapshot();
    let store = &snap.store.store;
    let w = weights_field(req.weights, store.num_layers())?;
    let r = topk(store, &req.query_id, &w, req.k, req.exclude_self)?;
    Ok(Json(QueryResponse {
        query_id: r.query_id,
        k: r.k,
        weights: w,
        results: r.results,
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FewshotRequest {
    pub positives: Vec<String>,
    #[serde(default)]
    pub negatives: Vec<String>,
    #[serde(default)]
    pub auto_negative_count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub target_id: Option<String>,
    #[serde(default = "default_k")]
    pub k: usize,
}

async fn fewshot(
    State(app): State<Arc<AppState>>,
    body: Result<Json<FewshotRequest>, JsonRejection>,
) -> ApiResult<uvstyle::fewshot::FewshotResult> {
    let Json(req) = body?;
    if req.positives.is_empty() {
        return Err(ApiError::invalid("positives", "at least one positive is required"));
    }
    for id in req.positives.iter().chain(&req.negatives) {
        check_id("positives", id)?;
    }
    check_k(req.k)?;
    let sel = ExampleSelection {
        positives: req.positives,
        negatives: req.negatives,
        auto_negative_count: req.auto_negative_count,
        seed: req.seed,
    };
    let snap = app.snapshot();
    Ok(Json(fewshot_query(&sel, req.target_id.as_deref(), req.k, &snap.store.store)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientRequest {
    pub subject_id: String,
    pub reference_id: String,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    /// Glyph scale; by default the longest glyph is 5% of the subject's diagonal.
    #[serde(default)]
    pub k_scale: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GradientResponse {
    pub subject_id: String,
    pub reference_id: String,
    pub weights: LayerWeights,
    pub distance: f64,
    pub k_scale: f64,
    pub glyphs: Vec<Glyph>,
}

async fn gradient(
    State(app): State<Arc<AppState>>,
    body: Result<Json<GradientRequest>, JsonRejection>,
) -> ApiResult<GradientResponse> {
    let Json(req) = body?;
    check_id("subject_id", &req.subject_id)?;
    check_id("reference_id", &req.reference_id)?;
    if let Some(k) = req.k_scale {
        if !k.is_finite() || k < 0.0 {
            return Err(ApiError::invalid("k_scale", "must be finite and non-negative"));
        }
    }
    let snap = app.snapshot();
    let w = weights_field(req.weights, snap.store.store.num_layers())?;
    snap.solid(&req.subject_id)?;
    snap.solid(&req.reference_id)?;
    let out = tokio::task::spawn_blocking(move || -> Result<GradientResponse, ApiError> {
        let sd = &snap.store;
        let pipe = Pipeline {
            weights: &sd.weights,
            policy: &sd.policy,
            pca: sd.pca.as_ref(),
        };
        let field = style_gradient(
            &pipe,
            snap.solid(&req.subject_id)?,
            snap.solid(&req.reference_id)?,
            &w,
            GradMode::Analytic,
        )?;
        let k = req.k_scale.unwrap_or_else(|| field.default_scale());
        Ok(GradientResponse {
            subject_id: field.subject_id.clone(),
            reference_id: field.reference_id.clone(),
            weights: w,
            distance: field.distance,
            k_scale: k,
            glyphs: glyphs(&field, k),
        })
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        message: e.to_string(),
        field: None,
    })??;
    Ok(Json(out))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReloadResponse {
    pub entries: usize,
    pub fingerprint: String,
}

/// Loads a fresh snapshot from the configured paths and swaps it in. On
/// failure the previous snapshot stays live.
async fn reload(State(app): State<Arc<AppState>>) -> ApiResult<ReloadResponse> {
    let cfg = app.config.clone();
    let snap = tokio::task::spawn_blocking(move || Snapshot::load(&cfg.store, &cfg.data))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
            field: None,
        })?
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: format!("reload failed, previous snapshot kept: {e}"),
            field: None,
        })?;
    let resp = ReloadResponse {
        entries: snap.store.store.len(),
        fingerprint: snap.store.store.fingerprint().to_string(),
    };
    *app.current.write().expect("snapshot lock") = Arc::new(snap);
    Ok(Json(resp))
}

pub fn router(app: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/solids", get(list_solids))
        .route("/solids/{id}", get(solid_info))
        .route("/solids/{id}/mesh", get(solid_mesh))
        .route("/layers", get(layers))
        .route("/query", post(query))
        .route("/fewshot", post(fewshot))
        .route("/gradient", post(gradient))
        .route("/reload", post(reload));
    let static_dir = app.config.static_dir.clone();
    let r = Router::new().nest("/api", api).with_state(app);
    match static_dir {
        Some(dir) => r.fallback_service(ServeDir::new(dir)),
        None => r,
    }
}

/// Binds `0.0.0.0:port` and serves until the process is stopped.
pub async fn serve(config: ServiceConfig) -> Result<(), Box<dyn std::error::Error>> {
    let port = config.port;
    let app = Arc::new(AppState::new(config)?);
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("serving {} solids on http://{addr}", app.snapshot().store.store.len());
    axum::serve(listener, router(app)).await?;
    Ok(())
}
