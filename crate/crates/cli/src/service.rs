//! Loopback HTTP service backing the annotation tool.
//!
//! Clips are read from a directory of clip files on every request. Annotations
//! live in an append-only JSON-lines file; each accepted record is written and
//! synced before its id is returned.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use maaig_core::dataset::{AnnotationRecord, FieldError};
use maaig_core::model::{greedy_decode, Checkpoint, ModelParameters};
use maaig_core::skeleton::{self, ensure_local, frame_range, CoordSystem, Frame, MotionClip};
use maaig_core::tokenizer::Vocabulary;
use serde::{Deserialize, Serialize};

pub const DEFAULT_PORT: u16 = 8765;

/// An annotation as stored: the record plus the id assigned at write time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredAnnotation {
    pub id: u64,
    #[serde(flatten)]
    pub record: AnnotationRecord,
}

/// Append-only annotation log.
pub struct AnnotationStore {
    path: PathBuf,
    file: File,
    next_id: u64,
}

impl AnnotationStore {
    /// Opens (creating if needed) the log and replays it.
    pub fn open(path: &Path) -> anyhow::Result<(AnnotationStore, Vec<StoredAnnotation>)> {
        let existing = read_annotation_log(path)?;
        let next_id = existing.iter().map(|a| a.id).max().unwrap_or(0) + 1;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((
            AnnotationStore {
                path: path.to_path_buf(),
                file,
                next_id,
            },
            existing,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(&mut self, record: AnnotationRecord) -> std::io::Result<StoredAnnotation> {
        let stored = StoredAnnotation {
            id: self.next_id,
            record,
        };
        let mut line = serde_json::to_string(&stored).map_err(std::io::Error::other)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        self.next_id += 1;
        Ok(stored)
    }
}

/// Reads an annotation log. A missing file is an empty log; a torn final
/// line (crash mid-write, never acknowledged) is ignored.
pub fn read_annotation_log(path: &Path) -> anyhow::Result<Vec<StoredAnnotation>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(a) => out.push(a),
            Err(_) if Some(i) == last => log::warn!("ignoring torn final line in {}", path.display()),
            Err(e) => anyhow::bail!("{}:{}: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

/// A checkpoint ready for decoding.
pub struct LoadedModel {
    pub params: ModelParameters,
    pub vocab: Vocabulary,
}

impl LoadedModel {
    pub fn from_checkpoint(ck: Checkpoint) -> anyhow::Result<LoadedModel> {
        let words = ck
            .vocab
            .ok_or_else(|| anyhow::anyhow!("checkpoint carries no vocabulary"))?;
        let vocab = Vocabulary::from_words(words);
        anyhow::ensure!(
            vocab.len() == ck.params.config.vocab_size,
            "checkpoint vocabulary does not match its output layer"
        );
        Ok(LoadedModel {
            params: ck.params,
            vocab,
        })
    }

    pub fn load(path: &Path) -> anyhow::Result<LoadedModel> {
        LoadedModel::from_checkpoint(Checkpoint::load(path)?)
    }

    /// Instruction for `clip`, cut to `[start_s, end_s)` when given.
    pub fn generate(&self, clip: &MotionClip, interval: Option<(f64, f64)>) -> maaig_core::Result<String> {
        let segment = match interval {
            Some((s, e)) => skeleton::clip_by_time(clip, s, e)?,
            None => clip.clone(),
        };
        let local = ensure_local(&segment);
        let tokens = greedy_decode(&self.params, &local, self.params.config.max_tokens);
        self.vocab.decode(&tokens)
    }
}

pub struct ServiceState {
    pub clips_dir: PathBuf,
    pub model: Option<LoadedModel>,
    writer: Mutex<AnnotationStore>,
    annotations: RwLock<Vec<StoredAnnotation>>,
}

impl ServiceState {
    pub fn new(clips_dir: PathBuf, annotations: &Path, model: Option<LoadedModel>) -> anyhow::Result<ServiceState> {
        let (store, existing) = AnnotationStore::open(annotations)?;
        Ok(ServiceState {
            clips_dir,
            model,
            writer: Mutex::new(store),
            annotations: RwLock::new(existing),
        })
    }

    fn clip_path(&self, id: &str) -> Option<PathBuf> {
        let safe = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && !id.starts_with('.');
        safe.then(|| self.clips_dir.join(format!("{id}.json")))
    }

    fn load_clip(&self, id: &str) -> Result<MotionClip, ApiError> {
        let path = self
            .clip_path(id)
            .filter(|p| p.is_file())
            .ok_or_else(|| ApiError::not_found(format!("unknown clip {id}")))?;
        MotionClip::load(&path).map_err(|e| ApiError::internal(e.to_string()))
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> ApiError {
        ApiError {
            status,
            body: ErrorBody {
                error: msg.into(),
                fields: Vec::new(),
            },
        }
    }

    fn not_found(msg: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::NOT_FOUND, msg)
    }

    fn bad_request(msg: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::BAD_REQUEST, msg)
    }

    fn internal(msg: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, msg)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ClipSummary {
    pub clip_id: String,
    pub duration_s: f64,
    pub fps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FramesResponse {
    pub clip_id: String,
    pub fps: f64,
    pub coord: CoordSystem,
    /// Index of the first returned frame within the clip.
    pub start_frame: usize,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Deserialize)]
pub struct FramesQuery {
    pub from: Option<f64>,
    pub to: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub clip_id: String,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub instruction: String,
}

type Shared = Arc<ServiceState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/clips", get(list_clips))
        .route("/clips/{id}/frames", get(clip_frames))
        .route("/annotations", get(list_annotations).post(post_annotation))
        .route("/generate", post(generate))
        .with_state(state)
}

async fn list_clips(State(state): State<Shared>) -> Result<Json<Vec<ClipSummary>>, ApiError> {
    let dir = state.clips_dir.clone();
    let clips = tokio::task::spawn_blocking(move || skeleton::load_clip_dir(&dir))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(
        clips
            .iter()
            .map(|c| ClipSummary {
                clip_id: c.clip_id.clone(),
                duration_s: c.duration_s(),
                fps: c.fps,
            })
            .collect(),
    ))
}

async fn clip_frames(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<FramesQuery>,
) -> Result<Json<FramesResponse>, ApiError> {
    let clip = state.load_clip(&id)?;
    let from = q.from.unwrap_or(0.0);
    let to = q.to.unwrap_or_else(|| clip.duration_s());
    let range = frame_range(clip.len(), clip.fps, from, to).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(FramesResponse {
        clip_id: clip.clip_id,
        fps: clip.fps,
        coord: clip.coord,
        start_frame: range.start,
        frames: clip.frames[range].to_vec(),
    }))
}

async fn list_annotations(State(state): State<Shared>) -> Json<Vec<StoredAnnotation>> {
    Json(state.annotations.read().expect("annotation list lock").clone())
}

async fn post_annotation(
    State(state): State<Shared>,
    Json(record): Json<AnnotationRecord>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let mut fields = record.check().err().unwrap_or_default();
    if fields.is_empty() && state.clip_path(&record.video_id).filter(|p| p.is_file()).is_none() {
        fields.push(FieldError {
            field: "video_id".into(),
            message: format!("unknown clip {}", record.video_id),
        });
    }
    if !fields.is_empty() {
        return Err(ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: ErrorBody {
                error: fields.iter().map(|f| f.message.as_str()).collect::<Vec<_>>().join("; "),
                fields,
            },
        });
    }
    // single writer: the append, the sync and the in-memory publish happen
    // under one lock so ids stay in file order
    let mut store = state.writer.lock().expect("annotation writer lock");
    let stored = store.append(record).map_err(|e| ApiError::internal(e.to_string()))?;
    let id = stored.id;
    state.annotations.write().expect("annotation list lock").push(stored);
    drop(store);
    Ok((StatusCode::CREATED, Json(Created { id })))
}

async fn generate(
    State(state): State<Shared>,
    Json(req): Json<GenerateRequest>,
) -> Result<Json<GenerateResponse>, ApiError> {
    if state.model.is_none() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"));
    }
    let clip = state.load_clip(&req.clip_id)?;
    let st = state.clone();
    let text = tokio::task::spawn_blocking(move || {
        let model = st.model.as_ref().expect("checked above");
        model.generate(&clip, Some((req.start_s, req.end_s)))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(GenerateResponse { instruction: text }))
}

/// Serves on `127.0.0.1:port` until interrupted.
pub async fn serve(state: ServiceState, port: u16) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
