//! HTTP facade over the segmentation engine.
//!
//! | method | path                    | body / query                              | reply                |
//! |--------|-------------------------|-------------------------------------------|----------------------|
//! | POST   | `/volumes`              | NIfTI-1 or single-blob MVOL               | `{volume_id}`        |
//! | GET    | `/volumes/{id}/meta`    |                                           | geometry + range     |
//! | GET    | `/volumes/{id}/slice`   | `plane, index, center?, width?`           | 8-bit grey PNG       |
//! | POST   | `/volumes/{id}/jobs`    | `{clicks, annotation_seconds?}`           | `{job_id}`           |
//! | GET    | `/jobs/{id}`            |                                           | job JSON             |
//! | POST   | `/jobs/{id}/score`      | `{score, evaluation_seconds}`             | 204                  |
//! | GET    | `/healthz`              |                                           | 200                  |
//!
//! Errors are `{"error": reason}` with status 400, 404, 409 or 413.

pub mod rle;
pub mod slice;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use extremeseg::engine::{segment_ensemble, Stage};
use extremeseg::inference::Ensemble;
use extremeseg::interactions::{ClickPoint, InteractionSet, Space};
use extremeseg::preprocess::clicks_on_grid;
use extremeseg::stats::{QualityScore, Timings};
use extremeseg::volume::parse_volume_bytes;
use extremeseg::{Geometry, Mask3D, Modality, Volume3D};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

pub use rle::RleMask;
pub use slice::Plane;

pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 256 << 20;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_upload_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_upload_bytes: DEFAULT_MAX_UPLOAD_BYTES,
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(what: &str, id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, format!("unknown {what} {id}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Preprocessing,
    Inferring,
    Postprocessing,
    Done,
    Failed,
}

/// One segmentation request and its outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegJob {
    pub id: String,
    pub volume_id: String,
    pub clicks: InteractionSet,
    pub state: JobState,
    pub timings: Timings,
    pub mask: Option<RleMask>,
    pub score: Option<QualityScore>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub volume_id: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub direction: [[f64; 3]; 3],
    pub modality: Modality,
    pub intensity_range: [f32; 2],
}

struct VolumeEntry {
    volume: Arc<Volume3D>,
    queue: mpsc::UnboundedSender<String>,
}

struct Inner {
    ensemble: Arc<Ensemble>,
    config: ServiceConfig,
    volumes: Mutex<HashMap<String, VolumeEntry>>,
    jobs: Mutex<HashMap<String, SegJob>>,
    next_id: AtomicU64,
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(ensemble: Ensemble, config: ServiceConfig) -> Self {
        AppState {
            inner: Arc::new(Inner {
                ensemble: Arc::new(ensemble),
                config,
                volumes: Mutex::new(HashMap::new()),
                jobs: Mutex::new(HashMap::new()),
                next_id: AtomicU64::new(1),
            }),
        }
    }

    fn fresh_id(&self, prefix: &str) -> String {
        format!("{prefix}-{}", self.inner.next_id.fetch_add(1, Ordering::Relaxed))
    }

    fn volume(&self, id: &str) -> ApiResult<Arc<Volume3D>> {
        let vols = self.inner.volumes.lock().expect("volume table poisoned");
        vols.get(id)
            .map(|e| e.volume.clone())
            .ok_or_else(|| ApiError::not_found("volume", id))
    }

    fn update_job(&self, id: &str, f: impl FnOnce(&mut SegJob)) {
        if let Some(job) = self.inner.jobs.lock().expect("job table poisoned").get_mut(id) {
            f(job);
        }
    }

    /// Registers a volume and starts its FIFO job worker.
    pub fn add_volume(&self, volume: Volume3D) -> String {
        let id = self.fresh_id("vol");
        let (tx, mut rx) = mpsc::unbounded_channel::<String>();
        let volume = Arc::new(volume);
        self.inner.volumes.lock().expect("volume table poisoned").insert(
            id.clone(),
            VolumeEntry {
                volume: volume.clone(),
                queue: tx,
            },
        );
        let state = self.clone();
        tokio::spawn(async move {
            while let Some(job_id) = rx.recv().await {
                let s = state.clone();
                let v = volume.clone();
                // A panicking job only fails that job.
                if tokio::task::spawn_blocking(move || s.run_job(&job_id, &v)).await.is_err() {
                    continue;
                }
            }
        });
        id
    }

    fn run_job(&self, job_id: &str, volume: &Volume3D) {
        let clicks = {
            let jobs = self.inner.jobs.lock().expect("job table poisoned");
            match jobs.get(job_id) {
                Some(j) => j.clicks.clone(),
                None => return,
            }
        };
        let result = segment_ensemble(volume, Some(&clicks), &self.inner.ensemble, |stage| {
            let s = match stage {
                Stage::Preprocessing => JobState::Preprocessing,
                Stage::Inferring => JobState::Inferring,
                Stage::Postprocessing => JobState::Postprocessing,
            };
            self.update_job(job_id, |j| j.state = s);
        });
        self.update_job(job_id, |j| match result {
            Ok(seg) => {
                j.timings.preprocessing = Some(seg.timings.preprocessing);
                j.timings.model_inference = Some(seg.timings.model_inference);
                j.timings.postprocessing = Some(seg.timings.postprocessing);
                j.mask = Some(RleMask::encode(&seg.mask));
                j.state = JobState::Done;
            }
            Err(e) => {
                j.error = Some(e.to_string());
                j.state = JobState::Failed;
            }
        });
    }

    /// Validates clicks and queues a job on the volume's worker.
    pub fn submit_job(&self, volume_id: &str, clicks: Vec<ClickPoint>, annotation_seconds: Option<f64>) -> ApiResult<String> {
        let set = InteractionSet::new(clicks).map_err(|e| ApiError::bad_request(e.to_string()))?;
        if set.space() != Space::World {
            return Err(ApiError::bad_request("clicks must be world-space points"));
        }
        if let Some(t) = annotation_seconds {
            if !(t.is_finite() && t >= 0.0) {
                return Err(ApiError::bad_request("annotation_seconds must be a non-negative number"));
            }
        }
        let vols = self.inner.volumes.lock().expect("volume table poisoned");
        let entry = vols.get(volume_id).ok_or_else(|| ApiError::not_found("volume", volume_id))?;
        let g: &Geometry = entry.volume.geometry();
        clicks_on_grid(&set, g, g).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let id = self.fresh_id("job");
        let job = SegJob {
            id: id.clone(),
            volume_id: volume_id.to_string(),
            clicks: set,
            state: JobState::Queued,
            timings: Timings {
                annotation: annotation_seconds,
                ..Timings::default()
            },
            mask: None,
            score: None,
            error: None,
        };
        self.inner.jobs.lock().expect("job table poisoned").insert(id.clone(), job);
        entry
            .queue
            .send(id.clone())
            .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "volume worker stopped"))?;
        Ok(id)
    }

    pub fn job(&self, id: &str) -> Option<SegJob> {
        self.inner.jobs.lock().expect("job table poisoned").get(id).cloned()
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

async fn healthz() -> StatusCode {
    StatusCode::OK
}

async fn upload(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let volume = parse_volume_bytes(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let id = state.add_volume(volume);
    Ok(Json(serde_json::json!({ "volume_id": id })))
}

async fn meta(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<VolumeMeta>> {
    let v = state.volume(&id)?;
    let g = v.geometry();
    let (lo, hi) = v.min_max();
    Ok(Json(VolumeMeta {
        volume_id: id,
        dims: g.dims,
        spacing: g.spacing,
        origin: g.origin,
        direction: g.direction,
        modality: v.modality(),
        intensity_range: [lo, hi],
    }))
}

#[derive(Debug, Deserialize)]
struct SliceQuery {
    plane: Option<String>,
    index: Option<String>,
    center: Option<String>,
    width: Option<String>,
}

fn parse_number(name: &str, value: &Option<String>) -> ApiResult<Option<f64>> {
    value
        .as_deref()
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| ApiError::bad_request(format!("{name} must be a number, got {s:?}")))
        })
        .transpose()
}

async fn slice_png(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Response> {
    let v = state.volume(&id)?;
    let plane_name = q.plane.as_deref().ok_or_else(|| ApiError::bad_request("missing plane"))?;
    let plane = Plane::parse(plane_name)
        .ok_or_else(|| ApiError::bad_request(format!("bad plane {plane_name:?}; use axial, coronal or sagittal")))?;
    let index_s = q.index.as_deref().ok_or_else(|| ApiError::bad_request("missing index"))?;
    let index: usize = index_s
        .parse()
        .map_err(|_| ApiError::bad_request(format!("bad index {index_s:?}")))?;
    let (dc, dw) = slice::default_window(&v);
    let center = parse_number("center", &q.center)?.unwrap_or(dc);
    let width = parse_number("width", &q.width)?.unwrap_or(dw);
    if width <= 0.0 {
        return Err(ApiError::bad_request("width must be positive"));
    }
    let (w, h, px) = slice::render(&v, plane, index, center, width).ok_or_else(|| {
        ApiError::bad_request(format!(
            "index {index} out of range for {plane_name} plane (size {})",
            v.dims()[plane.fixed_axis()]
        ))
    })?;
    let png = slice::encode_png(w, h, &px)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Debug, Deserialize)]
struct JobRequest {
    clicks: Vec<ClickPoint>,
    #[serde(default)]
    annotation_seconds: Option<f64>,
}

async fn create_job(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: JobRequest = parse_json(&body)?;
    let job_id = state.submit_job(&id, req.clicks, req.annotation_seconds)?;
    Ok((StatusCode::ACCEPTED, Json(serde_json::json!({ "job_id": job_id }))).into_response())
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SegJob>> {
    state.job(&id).map(Json).ok_or_else(|| ApiError::not_found("job", &id))
}

#[derive(Debug, Deserialize)]
struct ScoreRequest {
    score: QualityScore,
    evaluation_seconds: f64,
}

async fn score_job(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<StatusCode> {
    let req: ScoreRequest = parse_json(&body)?;
    if !(req.evaluation_seconds.is_finite() && req.evaluation_seconds >= 0.0) {
        return Err(ApiError::bad_request("evaluation_seconds must be a non-negative number"));
    }
    let mut jobs = state.inner.jobs.lock().expect("job table poisoned");
    let job = jobs.get_mut(&id).ok_or_else(|| ApiError::not_found("job", &id))?;
    if job.state != JobState::Done {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("job {id} is {:?}, not done", job.state),
        ));
    }
    job.score = Some(req.score);
    job.timings.evaluation = Some(req.evaluation_seconds);
    Ok(StatusCode::NO_CONTENT)
}

pub fn router(state: AppState) -> Router {
    let limit = state.inner.config.max_upload_bytes;
    Router::new()
        .route("/healthz", get(healthz))
        .route("/volumes", post(upload))
        .route("/volumes/{id}/meta", get(meta))
        .route("/volumes/{id}/slice", get(slice_png))
        .route("/volumes/{id}/jobs", post(create_job))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/score", post(score_job))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Binds `addr` and serves until the process exits.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

/// Decodes a finished job's mask onto the volume's geometry.
pub fn job_mask(job: &SegJob, geometry: &Geometry) -> Option<Mask3D> {
    job.mask.as_ref().and_then(|m| m.decode(geometry).ok())
}
