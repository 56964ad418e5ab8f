//! HTTP/JSON referral service over a [`CaseStore`].
//!
//! All mutations go through the single store writer behind a
//! `tokio::sync::RwLock`; MC inference itself runs on the blocking pool
//! with no lock held.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use mcunet_core::referral::{CohortReport, Decision, Normalization, ThresholdConfig, VerdictKind};
use mcunet_core::uncertainty::{Metric, Reduction};
use mcunet_core::unet::ModelParams;
use mcunet_core::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::RwLock;
use tower_http::cors::CorsLayer;

use crate::config::parse_tau_grid;
use crate::error::TriageError;
use crate::pipeline::{self, CaseScores};
use crate::report::{report_csv, threshold_report, what_if};
use crate::store::{CaseState, CaseStore, ReviewOutcome, Status};
use crate::{pgm, tns};

pub struct AppState {
    pub store: RwLock<CaseStore>,
    pub params: Arc<ModelParams>,
    pub dropout_p: f64,
    pub default_samples: usize,
    pub default_seed: u64,
}

impl AppState {
    pub fn new(
        store: CaseStore,
        params: ModelParams,
        dropout_p: f64,
        default_samples: usize,
        default_seed: u64,
    ) -> Self {
        AppState { store: RwLock::new(store), params: Arc::new(params), dropout_p, default_samples, default_seed }
    }
}

pub type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/cases", post(ingest))
        .route("/cases/{id}", get(case))
        .route("/cases/{id}/infer", post(infer))
        .route("/cases/{id}/review", post(review))
        .route("/cases/{id}/maps/{name}", get(map))
        .route("/queue", get(queue))
        .route("/whatif", get(whatif))
        .route("/report", get(report))
        .route("/config", get(get_config).put(put_config))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Shared) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<TriageError> for ApiError {
    fn from(e: TriageError) -> Self {
        use mcunet_core::Error as E;
        let status = match &e {
            TriageError::Config { .. } | TriageError::Data(_) => StatusCode::BAD_REQUEST,
            TriageError::NotFound(_) => StatusCode::NOT_FOUND,
            TriageError::Conflict(_) => StatusCode::CONFLICT,
            TriageError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            TriageError::Core(c) => match c {
                E::Shape { .. } | E::InvalidArgument { .. } | E::InvalidProbability { .. } => StatusCode::BAD_REQUEST,
                E::Empty { .. } | E::MissingGroundTruth { .. } => StatusCode::CONFLICT,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message, "status": self.status.as_u16() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InferenceView {
    pub samples: usize,
    pub seed: u64,
    pub dropout_p: f64,
    /// Raw case scores under the active reduction.
    pub scores: CaseScores,
    pub foreground_pixels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecisionView {
    pub decision: Decision,
    pub metric: Metric,
    pub raw_score: f64,
    pub normalized_score: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VerdictView {
    pub reviewer: String,
    pub verdict: VerdictKind,
    pub has_corrected_mask: bool,
    pub verdict_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CaseView {
    pub id: String,
    pub status: Status,
    pub height: usize,
    pub width: usize,
    pub has_ground_truth: bool,
    pub inference: Option<InferenceView>,
    pub decision: Option<DecisionView>,
    pub verdict: Option<VerdictView>,
}

impl CaseView {
    pub fn of(case: &CaseState, config: &ThresholdConfig) -> Result<Self, TriageError> {
        let inference = match &case.inference {
            Some(inf) => Some(InferenceView {
                samples: inf.samples,
                seed: inf.seed,
                dropout_p: inf.dropout_p,
                scores: CaseScores::from_fields(&inf.fields, config.reduction)?,
                foreground_pixels: inf.predicted.data().iter().filter(|&&v| v > 0.5).count(),
            }),
            None => None,
        };
        Ok(CaseView {
            id: case.id.clone(),
            status: case.status,
            height: case.height(),
            width: case.width(),
            has_ground_truth: case.ground_truth.is_some(),
            inference,
            decision: case.decision.map(|d| DecisionView {
                decision: d.decision,
                metric: config.metric,
                raw_score: d.raw_score,
                normalized_score: d.normalized_score,
                tau: config.tau,
            }),
            verdict: case.verdict.as_ref().map(|v| VerdictView {
                reviewer: v.reviewer.clone(),
                verdict: v.kind,
                has_corrected_mask: v.corrected_mask.is_some(),
                verdict_hash: v.verdict_hash.clone(),
            }),
        })
    }
}

async fn health(State(app): State<Shared>) -> ApiResult<Json<serde_json::Value>> {
    let store = app.store.read().await;
    Ok(Json(json!({
        "status": "ok",
        "cases": store.state().cases.len(),
        "events": store.state().events,
        "log_digest": store.log_digest()?,
    })))
}

#[derive(Debug, Default, Deserialize)]
pub struct IngestQuery {
    pub id: Option<String>,
}

/// JSON ingestion body. Images are base64 PGM or a server-side path.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestRequest {
    pub id: Option<String>,
    pub image: Option<String>,
    pub image_path: Option<PathBuf>,
    pub mask: Option<String>,
    pub mask_path: Option<PathBuf>,
}

fn pgm_source(inline: Option<&str>, path: Option<&std::path::Path>, what: &str) -> ApiResult<Option<Tensor<f32>>> {
    match (inline, path) {
        (Some(_), Some(_)) => Err(ApiError::bad_request(format!("give {what} inline or by path, not both"))),
        (Some(b64), None) => {
            let bytes =
                BASE64.decode(b64).map_err(|e| ApiError::bad_request(format!("{what}: invalid base64: {e}")))?;
            Ok(Some(pgm::decode(&bytes)?))
        }
        (None, Some(p)) => Ok(Some(pgm::read(p).map_err(|e| match e {
            TriageError::Io { .. } => ApiError::bad_request(e.to_string()),
            other => other.into(),
        })?)),
        (None, None) => Ok(None),
    }
}

fn is_json(headers: &HeaderMap) -> bool {
    headers.get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok()).is_some_and(|v| v.starts_with("application/json"))
}

async fn ingest(
    State(app): State<Shared>,
    Query(q): Query<IngestQuery>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<CaseView>)> {
    let (id, image, mask) = if is_json(&headers) {
        let req: IngestRequest =
            serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))?;
        let image = pgm_source(req.image.as_deref(), req.image_path.as_deref(), "image")?
            .ok_or_else(|| ApiError::bad_request("image or image_path is required"))?;
        let mask = pgm_source(req.mask.as_deref(), req.mask_path.as_deref(), "mask")?;
        (req.id.or(q.id), image, mask)
    } else {
        (q.id, pgm::decode(&body)?, None)
    };
    let mut store = app.store.write().await;
    let id = store.ingest(id, image, mask)?;
    let view = CaseView::of(store.case(&id)?, &store.config())?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn case(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<CaseView>> {
    let store = app.store.read().await;
    Ok(Json(CaseView::of(store.case(&id)?, &store.config())?))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferRequest {
    #[serde(rename = "T", alias = "samples")]
    pub samples: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InferResponse {
    #[serde(flatten)]
    pub case: CaseView,
    /// Predicted mask as base64 TNS1, `[H, W]` in {0, 1}.
    pub prediction: String,
}

async fn infer(State(app): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<InferResponse>> {
    let req: InferRequest = if body.iter().all(u8::is_ascii_whitespace) {
        InferRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))?
    };
    let samples = req.samples.unwrap_or(app.default_samples);
    if samples == 0 {
        return Err(ApiError::bad_request("T must be at least 1"));
    }
    let seed = req.seed.unwrap_or(app.default_seed);
    let image = {
        let store = app.store.read().await;
        let case = store.case(&id)?;
        if case.status == Status::Reviewed {
            return Err(TriageError::Conflict(format!("case {id:?} is already reviewed")).into());
        }
        case.image.clone()
    };
    let params = Arc::clone(&app.params);
    let dropout_p = app.dropout_p;
    let maps = tokio::task::spawn_blocking(move || pipeline::infer(&params, &image, samples, dropout_p, seed))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("inference task failed: {e}")))?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("inference failed: {e}")))?;
    let mut store = app.store.write().await;
    store.record_inference(&id, samples, seed, dropout_p, &maps)?;
    let case = store.case(&id)?;
    let prediction = BASE64.encode(tns::encode(&case.inference.as_ref().expect("just recorded").predicted));
    Ok(Json(InferResponse { case: CaseView::of(case, &store.config())?, prediction }))
}

#[derive(Debug, Deserialize)]
pub struct QueueQuery {
    pub status: Option<String>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct QueueEntry {
    pub id: String,
    pub status: Status,
    pub metric: Metric,
    pub normalized_score: Option<f64>,
    pub raw_score: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct QueueView {
    pub config: ThresholdConfig,
    pub cases: Vec<QueueEntry>,
}

/// Cases in `status` (default `referred`, `all` for every case), by
/// descending normalised score with ties and unscored cases in id order.
pub fn queue_view(store: &CaseStore, status: Option<&str>) -> Result<QueueView, TriageError> {
    let filter: Option<Status> = match status.unwrap_or("referred") {
        "all" => None,
        s => Some(s.parse()?),
    };
    let config = store.config();
    let mut cases: Vec<QueueEntry> = store
        .state()
        .cases
        .values()
        .filter(|c| filter.is_none_or(|s| c.status == s))
        .map(|c| QueueEntry {
            id: c.id.clone(),
            status: c.status,
            metric: config.metric,
            normalized_score: c.decision.map(|d| d.normalized_score),
            raw_score: c.decision.map(|d| d.raw_score),
        })
        .collect();
    cases.sort_by(|a, b| {
        let key = |e: &QueueEntry| e.normalized_score.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a)).then_with(|| a.id.cmp(&b.id))
    });
    Ok(QueueView { config, cases })
}

async fn queue(State(app): State<Shared>, Query(q): Query<QueueQuery>) -> ApiResult<Json<QueueView>> {
    let store = app.store.read().await;
    Ok(Json(queue_view(&store, q.status.as_deref())?))
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum MaskPayload {
    Rows(Vec<Vec<f32>>),
    /// Base64 TNS1 or PGM.
    Encoded(String),
}

impl MaskPayload {
    pub fn into_tensor(self) -> Result<Tensor<f32>, TriageError> {
        match self {
            MaskPayload::Rows(rows) => {
                let h = rows.len();
                let w = rows.first().map_or(0, Vec::len);
                if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
                    return Err(TriageError::data("corrected_mask must be a non-empty rectangular array"));
                }
                Ok(Tensor::new(vec![h, w], rows.into_iter().flatten().collect())?)
            }
            MaskPayload::Encoded(b64) => {
                let bytes = BASE64.decode(&b64).map_err(|e| TriageError::data(format!("corrected_mask: {e}")))?;
                if bytes.starts_with(tns::MAGIC) {
                    tns::decode(&bytes)
                } else {
                    pgm::decode(&bytes)
                }
            }
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewRequest {
    #[serde(default = "default_reviewer")]
    pub reviewer: String,
    pub verdict: VerdictKind,
    pub corrected_mask: Option<MaskPayload>,
}

fn default_reviewer() -> String {
    "reviewer".into()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReviewResponse {
    #[serde(flatten)]
    pub case: CaseView,
    /// False when an identical verdict was already on file.
    pub recorded: bool,
}

async fn review(State(app): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<ReviewResponse>> {
    let req: ReviewRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid review body: {e}")))?;
    let mask = req.corrected_mask.map(MaskPayload::into_tensor).transpose()?;
    let mut store = app.store.write().await;
    let outcome = store.review(&id, &req.reviewer, req.verdict, mask)?;
    Ok(Json(ReviewResponse {
        case: CaseView::of(store.case(&id)?, &store.config())?,
        recorded: outcome == ReviewOutcome::Recorded,
    }))
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct ConfigQuery {
    pub tau: Option<String>,
    pub metric: Option<String>,
    pub reduction: Option<String>,
    pub normalization: Option<String>,
    pub grid: Option<String>,
    pub format: Option<String>,
}

impl ConfigQuery {
    /// Active config with the query's overrides applied.
    fn resolve(&self, active: ThresholdConfig) -> ApiResult<ThresholdConfig> {
        let mut cfg = active;
        if let Some(t) = &self.tau {
            cfg.tau = t.parse().map_err(|_| ApiError::bad_request(format!("tau {t:?} is not a number")))?;
        }
        if let Some(m) = &self.metric {
            cfg.metric = m.parse::<Metric>().map_err(TriageError::from)?;
        }
        if let Some(r) = &self.reduction {
            cfg.reduction = r.parse::<Reduction>().map_err(TriageError::from)?;
        }
        if let Some(n) = &self.normalization {
            cfg.normalization = n.parse::<Normalization>().map_err(TriageError::from)?;
        }
        cfg.validate().map_err(TriageError::from)?;
        Ok(cfg)
    }
}

async fn whatif(State(app): State<Shared>, Query(q): Query<ConfigQuery>) -> ApiResult<Json<CohortReport>> {
    let store = app.store.read().await;
    let cfg = q.resolve(store.config())?;
    Ok(Json(what_if(store.state(), &cfg)?))
}

async fn report(State(app): State<Shared>, Query(q): Query<ConfigQuery>, headers: HeaderMap) -> ApiResult<Response> {
    let store = app.store.read().await;
    let template = ConfigQuery { tau: None, grid: None, format: None, ..q.clone() }.resolve(store.config())?;
    let grid = parse_tau_grid(q.grid.as_deref().unwrap_or("0.1:0.9:0.1")).map_err(TriageError::from)?;
    let rows = threshold_report(store.state(), &template, &grid)?;
    let wants_csv = match q.format.as_deref() {
        Some("csv") => true,
        Some("json") => false,
        None => headers.get(header::ACCEPT).and_then(|v| v.to_str().ok()).is_some_and(|v| v.contains("text/csv")),
        Some(other) => return Err(ApiError::bad_request(format!("unknown format {other:?}"))),
    };
    if wants_csv {
        Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], report_csv(&rows)).into_response())
    } else {
        Ok(Json(rows).into_response())
    }
}

async fn get_config(State(app): State<Shared>) -> Json<ThresholdConfig> {
    Json(app.store.read().await.config())
}

async fn put_config(State(app): State<Shared>, body: Bytes) -> ApiResult<Json<ThresholdConfig>> {
    let cfg: ThresholdConfig =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid config: {e}")))?;
    let mut store = app.store.write().await;
    store.set_config(cfg)?;
    Ok(Json(store.config()))
}

#[derive(Debug, Default, Deserialize)]
pub struct MapQuery {
    pub format: Option<String>,
}

/// Artifact reference for a named map of a case.
fn map_ref<'a>(case: &'a CaseState, name: &str) -> Result<&'a str, TriageError> {
    let missing = |what: &str| TriageError::NotFound(format!("case {:?} has no {what}", case.id));
    let inferred = || case.inference.as_ref().ok_or_else(|| missing("inference"));
    Ok(match name {
        "image" => &case.image_ref,
        "ground-truth" => case.ground_truth_ref.as_deref().ok_or_else(|| missing("ground truth"))?,
        "corrected-mask" => {
            case.verdict.as_ref().and_then(|v| v.mask_ref.as_deref()).ok_or_else(|| missing("corrected mask"))?
        }
        "foreground" => &inferred()?.maps.foreground,
        "prediction" => &inferred()?.maps.predicted,
        metric => {
            let m: Metric = metric.parse().map_err(|_| TriageError::NotFound(format!("map {metric:?}")))?;
            &inferred()?.maps.metrics[m.index()]
        }
    })
}

async fn map(
    State(app): State<Shared>,
    Path((id, name)): Path<(String, String)>,
    Query(q): Query<MapQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let store = app.store.read().await;
    let case = store.case(&id)?;
    let bytes = store.artifacts().bytes(map_ref(case, &name)?)?;
    let as_json = match q.format.as_deref() {
        Some("base64") | Some("json") => true,
        Some("tns") | Some("binary") => false,
        Some(other) => return Err(ApiError::bad_request(format!("unknown format {other:?}"))),
        None => {
            headers.get(header::ACCEPT).and_then(|v| v.to_str().ok()).is_some_and(|v| v.contains("application/json"))
        }
    };
    if as_json {
        let shape = tns::decode(&bytes)?.shape().to_vec();
        Ok(Json(json!({
            "case": id,
            "map": name,
            "shape": shape,
            "encoding": "tns1+base64",
            "data": BASE64.encode(&bytes),
        }))
        .into_response())
    } else {
        Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
    }
}
