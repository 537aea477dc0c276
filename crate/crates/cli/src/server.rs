//! HTTP API over sessions and generation jobs.
//!
//! Every mutating request may carry an `Idempotency-Key` header. A repeat
//! with the same key and body gets the recorded response; the same key
//! with a different body is rejected.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::{to_bytes, Body, Bytes};
use axum::extract::{Path as UrlPath, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::Deserialize;
use serde_json::{json, Value};

use mf_core::conditioning::{spec_to_json, Box3D};
use mf_core::geometry::{CameraIntrinsics, CameraPose, Vec3};
use mf_core::io::{decode_pfm, decode_png, encode_png, read_pfm, read_png, write_pfm, write_png};
use mf_dit::generate::DEFAULT_STEPS;
use mf_dit::Branches;

use crate::jobs::{JobManager, JobRequest};
use crate::session::{CameraPanel, Selection, Session, DEPTH_FILE, REFERENCE_FILE};
use crate::ServiceError;

pub const DEFAULT_PORT: u16 = 8787;
/// Request bodies above this size are refused.
pub const MAX_BODY_BYTES: usize = 16 << 20;

pub struct AppState {
    pub data_dir: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    next_session: AtomicU64,
    pub jobs: Arc<JobManager>,
    replies: Mutex<HashMap<String, Recorded>>,
}

#[derive(Clone)]
struct Recorded {
    body_hash: u64,
    status: StatusCode,
    content_type: Option<HeaderValue>,
    body: Bytes,
}

impl AppState {
    pub fn new(data_dir: PathBuf, workers: usize) -> Arc<Self> {
        Arc::new(Self {
            jobs: JobManager::new(data_dir.join("jobs"), workers),
            data_dir,
            sessions: RwLock::new(HashMap::new()),
            next_session: AtomicU64::new(1),
            replies: Mutex::new(HashMap::new()),
        })
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        self.sessions
            .read()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.data_dir.join("sessions").join(id)
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type ApiResult = Result<Response, ServiceError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/select", post(select))
        .route("/sessions/{id}/preview", post(preview))
        .route("/sessions/{id}/spec", post(export_spec))
        .route("/jobs/generate", post(generate_job))
        .route("/jobs/{id}", get(job_status))
        .route("/jobs/{id}", delete(cancel_job))
        .route("/jobs/{id}/frames/{file}", get(job_frame))
        .layer(middleware::from_fn_with_state(Arc::clone(&state), idempotency))
        .with_state(state)
}

async fn idempotency(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let key = match req.headers().get("idempotency-key").and_then(|v| v.to_str().ok()) {
        Some(k) if req.method() != Method::GET => format!("{} {} {k}", req.method(), req.uri().path()),
        _ => return next.run(req).await,
    };
    let (parts, body) = req.into_parts();
    let bytes = match to_bytes(body, MAX_BODY_BYTES).await {
        Ok(b) => b,
        Err(_) => return ServiceError::BadRequest("request body too large".into()).into_response(),
    };
    let mut h = DefaultHasher::new();
    bytes.hash(&mut h);
    let body_hash = h.finish();
    if let Some(r) = state.replies.lock().expect("reply cache lock").get(&key).cloned() {
        if r.body_hash != body_hash {
            return ServiceError::Conflict("idempotency key reused with a different body".into()).into_response();
        }
        return replay(&r);
    }
    let resp = next.run(Request::from_parts(parts, Body::from(bytes))).await;
    let (parts, body) = resp.into_parts();
    let body = match to_bytes(body, usize::MAX).await {
        Ok(b) => b,
        Err(e) => return ServiceError::Internal(e.to_string()).into_response(),
    };
    let rec = Recorded {
        body_hash,
        status: parts.status,
        content_type: parts.headers.get(header::CONTENT_TYPE).cloned(),
        body,
    };
    // server errors are not recorded, so a retry can succeed
    if !rec.status.is_server_error() {
        let mut replies = state.replies.lock().expect("reply cache lock");
        return replay(replies.entry(key).or_insert(rec));
    }
    replay(&rec)
}

fn replay(r: &Recorded) -> Response {
    let mut resp = Response::new(Body::from(r.body.clone()));
    *resp.status_mut() = r.status;
    if let Some(ct) = &r.content_type {
        resp.headers_mut().insert(header::CONTENT_TYPE, ct.clone());
    }
    resp
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("invalid JSON body: {e}")))
}

fn png_b64(img: &mf_core::raster::Image) -> Result<String, ServiceError> {
    Ok(B64.encode(encode_png(img).map_err(|e| ServiceError::Internal(e.to_string()))?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IntrinsicsBody {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    /// Base64 PNG, or `image_path` on the server's filesystem.
    image: Option<String>,
    image_path: Option<PathBuf>,
    /// Base64 PFM, or `depth_path`.
    depth: Option<String>,
    depth_path: Option<PathBuf>,
    intrinsics: IntrinsicsBody,
    #[serde(default = "default_frames")]
    num_frames: usize,
    #[serde(default)]
    caption: String,
    #[serde(default)]
    seed: u64,
}

fn default_frames() -> usize {
    17
}

fn load_upload<T>(
    what: &str,
    inline: Option<String>,
    path: Option<PathBuf>,
    decode: impl Fn(&[u8]) -> Result<T, String>,
    read: impl Fn(&Path) -> Result<T, mf_core::io::IoError>,
) -> Result<T, ServiceError> {
    match (inline, path) {
        (Some(b), None) => {
            let bytes = B64
                .decode(b.as_bytes())
                .map_err(|e| ServiceError::BadRequest(format!("{what}: invalid base64: {e}")))?;
            decode(&bytes).map_err(|e| ServiceError::BadRequest(format!("{what}: {e}")))
        }
        (None, Some(p)) => read(&p).map_err(|e| ServiceError::BadRequest(format!("{what}: {e}"))),
        _ => Err(ServiceError::BadRequest(format!(
            "give exactly one of \"{what}\" and \"{what}_path\""
        ))),
    }
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: CreateSession = parse(&body)?;
    let image = load_upload("image", req.image, req.image_path, decode_png, read_png)?;
    let depth = load_upload("depth", req.depth, req.depth_path, decode_pfm, read_pfm)?;
    let i = &req.intrinsics;
    let k = CameraIntrinsics::new(i.fx, i.fy, i.cx, i.cy, i.width, i.height)
        .map_err(|e| ServiceError::BadRequest(format!("intrinsics: {e}")))?;
    let id = format!("session-{:06}", state.next_session.fetch_add(1, Ordering::Relaxed));
    let mut session = Session::new(id.clone(), image, depth, k, req.num_frames)?;
    session.caption = req.caption;
    session.seed = req.seed;
    let dir = state.session_dir(&id);
    std::fs::create_dir_all(&dir).map_err(|e| ServiceError::Internal(e.to_string()))?;
    write_png(&dir.join(REFERENCE_FILE), &session.image).map_err(|e| ServiceError::Internal(e.to_string()))?;
    write_pfm(&dir.join(DEPTH_FILE), &session.depth).map_err(|e| ServiceError::Internal(e.to_string()))?;
    let reply = json!({
        "id": id,
        "width": k.width,
        "height": k.height,
        "num_frames": session.num_frames,
        "num_points": session.cloud.len(),
    });
    state
        .sessions
        .write()
        .expect("session table lock")
        .insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(reply)).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectBody {
    label: String,
    #[serde(flatten)]
    selection: Selection,
}

fn box_json(id: u32, b: &Box3D) -> Value {
    json!({ "object_id": id, "box": { "center": b.center, "half_extents": b.half_extents } })
}

async fn select(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult {
    let req: SelectBody = parse(&body)?;
    let session = state.session(&id)?;
    let mut s = session.lock().expect("session lock");
    let (oid, b) = s.add_object(&req.label, &req.selection)?;
    Ok(Json(box_json(oid, &b)).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseBody {
    rotation: [f64; 9],
    translation: [f64; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectKeyframes {
    id: u32,
    keyframes: Vec<(usize, Vec3<f64>)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PreviewBody {
    /// Panel values, or an explicit `trajectory`.
    camera: Option<CameraPanel>,
    trajectory: Option<Vec<PoseBody>>,
    #[serde(default)]
    objects: Vec<ObjectKeyframes>,
    #[serde(default = "default_stride")]
    stride: usize,
}

fn default_stride() -> usize {
    4
}

async fn preview(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult {
    let req: PreviewBody = parse(&body)?;
    let session = state.session(&id)?;
    let mut s = session.lock().expect("session lock");
    // validate everything on a copy so a bad request leaves the draft alone
    let mut draft = s.clone();
    match (req.camera, req.trajectory) {
        (Some(panel), None) => draft.camera = draft.panel_poses(&panel)?,
        (None, Some(poses)) => {
            if poses.len() != draft.num_frames {
                return Err(ServiceError::BadRequest(format!(
                    "trajectory has {} poses for {} frames",
                    poses.len(),
                    draft.num_frames
                )));
            }
            draft.camera = poses
                .iter()
                .map(|p| {
                    let r = p.rotation;
                    let pose = CameraPose::new([[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]], p.translation);
                    pose.validate().map(|_| pose).map_err(|e| ServiceError::BadRequest(e.to_string()))
                })
                .collect::<Result<_, _>>()?;
        }
        (None, None) => {}
        (Some(_), Some(_)) => {
            return Err(ServiceError::BadRequest("give either \"camera\" or \"trajectory\", not both".into()))
        }
    }
    for o in req.objects {
        draft.set_keyframes(o.id, o.keyframes)?;
    }
    let frames = draft.preview(req.stride)?;
    *s = draft;
    let encoded = frames.iter().map(png_b64).collect::<Result<Vec<_>, _>>()?;
    Ok(Json(json!({ "stride": req.stride, "frames": encoded })).into_response())
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SpecBody {
    caption: Option<String>,
    seed: Option<u64>,
}

fn apply_overrides(s: &mut Session, caption: Option<String>, seed: Option<u64>) {
    if let Some(c) = caption {
        s.caption = c;
    }
    if let Some(v) = seed {
        s.seed = v;
    }
}

async fn export_spec(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult {
    let req: SpecBody = if body.is_empty() { SpecBody::default() } else { parse(&body)? };
    let session = state.session(&id)?;
    let mut s = session.lock().expect("session lock");
    apply_overrides(&mut s, req.caption, req.seed);
    let text = spec_to_json(&s.spec());
    let path = state.session_dir(&id).join("spec.json");
    mf_core::tensor::write_bytes_atomic(&path, text.as_bytes()).map_err(|e| ServiceError::Internal(e.to_string()))?;
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    Ok((headers, text).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateBody {
    session_id: String,
    checkpoint: PathBuf,
    #[serde(default = "default_steps")]
    steps: usize,
    caption: Option<String>,
    seed: Option<u64>,
    #[serde(default = "default_true")]
    camera_branch: bool,
    #[serde(default = "default_true")]
    object_branch: bool,
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

fn default_true() -> bool {
    true
}

async fn generate_job(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: GenerateBody = parse(&body)?;
    let session = state.session(&req.session_id)?;
    let spec = {
        let mut s = session.lock().expect("session lock");
        apply_overrides(&mut s, req.caption, req.seed);
        s.spec()
    };
    let job = state.jobs.submit(JobRequest {
        spec,
        base_dir: state.session_dir(&req.session_id),
        checkpoint: req.checkpoint,
        steps: req.steps,
        branches: Branches {
            vcm: req.camera_branch,
            omm: req.object_branch,
        },
    });
    Ok((StatusCode::ACCEPTED, Json(job.snapshot())).into_response())
}

async fn job_status(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let job = state.jobs.get(&id).ok_or_else(|| ServiceError::NotFound(format!("job {id}")))?;
    Ok(Json(job.snapshot()).into_response())
}

async fn cancel_job(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let snap = state.jobs.delete(&id).ok_or_else(|| ServiceError::NotFound(format!("job {id}")))?;
    Ok(Json(snap).into_response())
}

async fn job_frame(State(state): State<Arc<AppState>>, UrlPath((id, file)): UrlPath<(String, String)>) -> ApiResult {
    let job = state.jobs.get(&id).ok_or_else(|| ServiceError::NotFound(format!("job {id}")))?;
    let k: usize = file
        .strip_suffix(".png")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ServiceError::NotFound(format!("frame {file}")))?;
    let path = job
        .frame_path(k)
        .ok_or_else(|| ServiceError::NotFound(format!("frame {k} of job {id}")))?;
    let bytes = tokio::fs::read(&path).await.map_err(|e| ServiceError::Internal(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

/// Binds `port` on all interfaces and serves until the process ends.
pub async fn serve(state: Arc<AppState>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    axum::serve(listener, router(state)).await
}
