//! HTTP facade over the palette and recolor engine.
//!
//! Sessions hold an uploaded image and a memo of extracted source palettes.
//! Uploaded and recolored PNGs live in a content-addressed cache under the
//! data directory; sessions and bookmarks are appended to JSON-lines logs so
//! they survive restarts.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tessera_core::palette::{self, Extraction, ExtractionParams, Palette, PaletteError, PaletteFormat};
use tessera_core::recolor::{recolor, RecolorError, RecolorOptions, RecolorRequest};
use tessera_core::{Image, RasterError};

pub mod store;

use store::{Bookmark, SessionRecord, SourceKey, Store, StoreError};

pub const MIN_SIDE: usize = 16;
pub const MAX_SIDE: usize = 4096;
pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 32 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub addr: SocketAddr,
    pub data_dir: PathBuf,
    pub max_upload_bytes: usize,
}

// ---------------------------------------------------------------- errors

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    TooLarge(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Conflict(_) => StatusCode::CONFLICT,
            Self::TooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            Self::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if let Self::Internal(msg) = &self {
            tracing::error!("{msg}");
        }
        (self.status(), Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        Self::Internal(e.to_string())
    }
}

impl From<PaletteError> for ApiError {
    fn from(e: PaletteError) -> Self {
        match e {
            PaletteError::KOutOfRange(_) | PaletteError::InvalidParams(_) | PaletteError::ImageTooSmall { .. } => {
                Self::Unprocessable(e.to_string())
            }
            PaletteError::InvalidPalette(_) | PaletteError::Json(_) => Self::BadRequest(e.to_string()),
            other => Self::Internal(other.to_string()),
        }
    }
}

impl From<RecolorError> for ApiError {
    fn from(e: RecolorError) -> Self {
        match e {
            RecolorError::FormatMismatch { .. } | RecolorError::KMismatch { .. } | RecolorError::GridMismatch { .. } => {
                Self::Conflict(e.to_string())
            }
            RecolorError::InvalidTargets(_) | RecolorError::InvalidOptions(_) | RecolorError::DegenerateCenters => {
                Self::Unprocessable(e.to_string())
            }
            other => Self::Internal(other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

// ---------------------------------------------------------------- state

struct Session {
    record: SessionRecord,
    image: Arc<Image>,
    sources: Mutex<HashMap<SourceKey, Arc<Extraction>>>,
}

#[derive(Default)]
struct SessionSlot {
    record: Option<SessionRecord>,
    live: Option<Arc<Session>>,
}

struct Inner {
    store: Store,
    sessions: RwLock<HashMap<String, SessionSlot>>,
    bookmarks: Mutex<Vec<Bookmark>>,
    next_seq: AtomicU64,
}

/// Shared handle to the service state.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl AppState {
    /// Opens (or creates) the data directory and reloads persisted sessions
    /// and bookmarks.
    pub fn open(data_dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let store = Store::open(data_dir)?;
        let mut sessions = HashMap::new();
        for rec in store.sessions()? {
            sessions.insert(
                rec.id.clone(),
                SessionSlot {
                    record: Some(rec),
                    live: None,
                },
            );
        }
        let bookmarks = store.bookmarks()?;
        let next_seq = bookmarks.iter().map(|b| b.seq).max().unwrap_or(0) + 1;
        Ok(Self(Arc::new(Inner {
            store,
            sessions: RwLock::new(sessions),
            bookmarks: Mutex::new(bookmarks),
            next_seq: AtomicU64::new(next_seq),
        })))
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        let missing = || ApiError::NotFound(format!("unknown session {id}"));
        let record = {
            let map = self.0.sessions.read().expect("session lock");
            let slot = map.get(id).ok_or_else(missing)?;
            if let Some(s) = &slot.live {
                return Ok(s.clone());
            }
            slot.record.clone().ok_or_else(missing)?
        };
        let bytes = self.0.store.get_image(&record.image)?;
        let image = Image::decode_png(&bytes).map_err(|e| ApiError::Internal(e.to_string()))?;
        let session = Arc::new(Session {
            record,
            image: Arc::new(image),
            sources: Mutex::new(HashMap::new()),
        });
        let mut map = self.0.sessions.write().expect("session lock");
        let slot = map.entry(id.to_string()).or_default();
        Ok(slot.live.get_or_insert(session).clone())
    }

    /// Source extraction for `key`, computed once per session.
    async fn source(&self, session: &Arc<Session>, key: SourceKey) -> ApiResult<Arc<Extraction>> {
        if let Some(e) = session.sources.lock().expect("cache lock").get(&key) {
            return Ok(e.clone());
        }
        let image = session.image.clone();
        let params = key_params(&key);
        let extraction = tokio::task::spawn_blocking(move || palette::extract(&image, key.format, &params))
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))??;
        let extraction = Arc::new(extraction);
        Ok(session
            .sources
            .lock()
            .expect("cache lock")
            .entry(key)
            .or_insert(extraction)
            .clone())
    }
}

fn key_params(key: &SourceKey) -> ExtractionParams {
    ExtractionParams::with_k(key.k)
        .seed(key.seed)
        .grid(key.grid)
        .n_superpixels(key.n_superpixels)
}

// ---------------------------------------------------------------- routes

pub fn router(state: AppState, max_upload_bytes: usize) -> Router {
    Router::new()
        .route("/images", post(upload))
        .route("/images/{id}/palette", get(get_palette))
        .route("/images/{id}/recolor", post(post_recolor))
        .route("/images/{id}/bookmarks", post(create_bookmark).get(list_bookmarks))
        .route("/bookmarks/{bid}", delete(delete_bookmark))
        .route("/bookmarks/{bid}/result", get(bookmark_result))
        .layer(DefaultBodyLimit::max(max_upload_bytes))
        .with_state(state)
}

/// Binds `config.addr` and serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let state = AppState::open(&config.data_dir)?;
    let listener = tokio::net::TcpListener::bind(config.addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, config.max_upload_bytes))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn upload(State(state): State<AppState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let (w, h) = Image::png_dimensions(&body).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    if w > MAX_SIDE || h > MAX_SIDE {
        return Err(ApiError::TooLarge(format!("image {w}x{h} exceeds {MAX_SIDE}x{MAX_SIDE}")));
    }
    if w < MIN_SIDE || h < MIN_SIDE {
        return Err(ApiError::BadRequest(format!(
            "image {w}x{h} is below minimum size {MIN_SIDE}x{MIN_SIDE}"
        )));
    }
    let bytes = body.clone();
    let image = tokio::task::spawn_blocking(move || Image::decode_png(&bytes))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(|e: RasterError| ApiError::BadRequest(e.to_string()))?;
    let hash = state.0.store.put_image(&body)?;
    let record = SessionRecord {
        id: uuid::Uuid::new_v4().simple().to_string(),
        image: hash,
        width: w,
        height: h,
        created_ms: now_ms(),
    };
    state.0.store.add_session(&record)?;
    let session = Arc::new(Session {
        record: record.clone(),
        image: Arc::new(image),
        sources: Mutex::new(HashMap::new()),
    });
    state.0.sessions.write().expect("session lock").insert(
        record.id.clone(),
        SessionSlot {
            record: Some(record.clone()),
            live: Some(session),
        },
    );
    Ok((
        StatusCode::CREATED,
        Json(serde_json::json!({
            "session_id": record.id,
            "width": w,
            "height": h,
        })),
    ))
}

#[derive(Debug, Default, Deserialize)]
struct PaletteQuery {
    format: Option<String>,
    k: Option<String>,
    grid: Option<String>,
    seed: Option<String>,
    n_superpixels: Option<String>,
}

fn parse_num<T: std::str::FromStr>(name: &str, v: Option<&str>, default: T) -> ApiResult<T> {
    match v {
        None => Ok(default),
        Some(s) => s
            .parse()
            .map_err(|_| ApiError::BadRequest(format!("{name} must be a non-negative integer, got {s:?}"))),
    }
}

/// Validated extraction settings. k outside 4..=12 is a 422.
fn source_key(format: PaletteFormat, k: usize, grid: usize, seed: u64, n_superpixels: usize) -> ApiResult<SourceKey> {
    let key = SourceKey {
        format,
        k,
        // 1D formats do not use the grid; normalize it so they share a cache slot
        grid: if format == PaletteFormat::Spatial {
            grid
        } else {
            palette::DEFAULT_GRID
        },
        seed,
        n_superpixels,
    };
    key_params(&key).validate()?;
    Ok(key)
}

impl PaletteQuery {
    fn key(&self) -> ApiResult<SourceKey> {
        let format: PaletteFormat = self
            .format
            .as_deref()
            .unwrap_or("1d")
            .parse()
            .map_err(ApiError::BadRequest)?;
        source_key(
            format,
            parse_num("k", self.k.as_deref(), 5)?,
            parse_num("grid", self.grid.as_deref(), palette::DEFAULT_GRID)?,
            parse_num("seed", self.seed.as_deref(), 0)?,
            parse_num("n_superpixels", self.n_superpixels.as_deref(), palette::DEFAULT_N_SUPERPIXELS)?,
        )
    }
}

async fn get_palette(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<PaletteQuery>,
) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let key = q.key()?;
    let extraction = state.source(&session, key).await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], extraction.palette.to_json()).into_response())
}

/// Source settings a recolor runs against; unspecified fields follow the
/// target palette and `options.seed`.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub format: Option<PaletteFormat>,
    pub k: Option<usize>,
    pub grid: Option<usize>,
    pub seed: Option<u64>,
    pub n_superpixels: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct RecolorBody {
    pub target: Palette,
    #[serde(default)]
    pub options: RecolorOptions,
    #[serde(default)]
    pub source: SourceSpec,
}

impl RecolorBody {
    fn source_key(&self) -> ApiResult<SourceKey> {
        let s = &self.source;
        source_key(
            s.format.unwrap_or(self.target.format()),
            s.k.unwrap_or(self.target.k()),
            s.grid.or(self.target.grid_size()).unwrap_or(palette::DEFAULT_GRID),
            s.seed.unwrap_or(self.options.seed),
            s.n_superpixels.unwrap_or(palette::DEFAULT_N_SUPERPIXELS),
        )
    }
}

struct Rendered {
    png: Vec<u8>,
    headers: HeaderMap,
}

async fn run_recolor(state: &AppState, session: &Arc<Session>, body: &RecolorBody) -> ApiResult<(SourceKey, Rendered)> {
    let key = body.source_key()?;
    let source = state.source(session, key).await?;
    let image = session.image.clone();
    let target = body.target.clone();
    let options = body.options;
    let outcome = tokio::task::spawn_blocking(move || {
        let out = recolor(&RecolorRequest {
            image: &image,
            source: &source,
            target: &target,
            options,
        })?;
        let png = out.image.encode_png().map_err(|e| ApiError::Internal(e.to_string()))?;
        Ok::<_, ApiError>((png, out.balance))
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    let (png, balance) = outcome;
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    if let Some(b) = balance {
        let achieved = b.achieved.iter().map(|p| format!("{p:.6}")).collect::<Vec<_>>().join(",");
        headers.insert("x-achieved-proportions", HeaderValue::from_str(&achieved).expect("ascii"));
        headers.insert(
            "x-balance-residual",
            HeaderValue::from_str(&format!("{:.6}", b.residual)).expect("ascii"),
        );
        headers.insert("x-balance-iterations", HeaderValue::from(b.iterations as u64));
    }
    Ok((key, Rendered { png, headers }))
}

fn parse_body<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::BadRequest(format!("invalid request body: {e}")))
}

async fn post_recolor(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let body: RecolorBody = parse_body(&body)?;
    let (_, r) = run_recolor(&state, &session, &body).await?;
    Ok((r.headers, r.png).into_response())
}

async fn create_bookmark(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let body: RecolorBody = parse_body(&body)?;
    let key = body.source_key()?;
    let palette_json = body.target.to_json();
    let duplicate = |list: &[Bookmark]| {
        list.iter().find(|b| {
            b.session_id == session.record.id
                && b.source == key
                && b.options == body.options
                && b.palette.to_json() == palette_json
        })
        .map(|b| b.id.clone())
    };
    if let Some(existing) = duplicate(&state.0.bookmarks.lock().expect("bookmark lock")) {
        return Err(ApiError::Conflict(format!("identical bookmark {existing} already exists")));
    }
    let (_, rendered) = run_recolor(&state, &session, &body).await?;
    let result = state.0.store.put_image(&rendered.png)?;

    // the lock serializes log writes and the duplicate re-check
    let mut list = state.0.bookmarks.lock().expect("bookmark lock");
    if let Some(existing) = duplicate(&list) {
        return Err(ApiError::Conflict(format!("identical bookmark {existing} already exists")));
    }
    let bookmark = Bookmark {
        id: uuid::Uuid::new_v4().simple().to_string(),
        session_id: session.record.id.clone(),
        palette: body.target.clone(),
        options: body.options,
        source: key,
        result,
        created_ms: now_ms(),
        seq: state.0.next_seq.fetch_add(1, Ordering::SeqCst),
    };
    state.0.store.put_bookmark(&bookmark)?;
    list.push(bookmark.clone());
    Ok((StatusCode::CREATED, Json(bookmark)).into_response())
}

async fn list_bookmarks(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Vec<Bookmark>>> {
    state.session(&id)?;
    let mut out: Vec<Bookmark> = state
        .0
        .bookmarks
        .lock()
        .expect("bookmark lock")
        .iter()
        .filter(|b| b.session_id == id)
        .cloned()
        .collect();
    out.sort_by(|a, b| b.seq.cmp(&a.seq));
    Ok(Json(out))
}

async fn delete_bookmark(State(state): State<AppState>, Path(bid): Path<String>) -> ApiResult<StatusCode> {
    let mut list = state.0.bookmarks.lock().expect("bookmark lock");
    let pos = list
        .iter()
        .position(|b| b.id == bid)
        .ok_or_else(|| ApiError::NotFound(format!("unknown bookmark {bid}")))?;
    state.0.store.delete_bookmark(&bid)?;
    list.remove(pos);
    Ok(StatusCode::NO_CONTENT)
}

async fn bookmark_result(State(state): State<AppState>, Path(bid): Path<String>) -> ApiResult<Response> {
    let hash = state
        .0
        .bookmarks
        .lock()
        .expect("bookmark lock")
        .iter()
        .find(|b| b.id == bid)
        .map(|b| b.result.clone())
        .ok_or_else(|| ApiError::NotFound(format!("unknown bookmark {bid}")))?;
    let png = state.0.store.get_image(&hash)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}
