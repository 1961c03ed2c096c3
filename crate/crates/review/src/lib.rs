//! JSON API for triaging novel generated labels.
//!
//! Routes:
//! - `GET /api/instances?cursor=ID&size=N` pages through instances with novel
//!   predictions, ordered by id; `cursor` is the last id of the previous page.
//! - `GET /api/instances/{id}`
//! - `POST /api/reviews` records one judgment (last write wins per reviewer).
//! - `GET /api/stats` and `GET /api/export`.
//!
//! Anything else is served from the static directory, falling back to a
//! placeholder page.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use groov_core::review::{
    export_accepted, review_stats, validate_record, ReplayStats, ReviewBook, ReviewItem, ReviewRecord, ReviewStats,
    ReviewStore,
};

pub const DEFAULT_PAGE_SIZE: usize = 20;
pub const MAX_PAGE_SIZE: usize = 200;

const PLACEHOLDER: &str = "<!doctype html>\n<title>groov review</title>\n<p>The review app is not bundled here. \
The JSON API lives under <code>/api/</code>.</p>\n";

pub struct ReviewService {
    items: BTreeMap<String, ReviewItem>,
    store: Mutex<ReviewStore>,
    book: RwLock<ReviewBook>,
}

impl ReviewService {
    /// Opens the store at `store_path` and replays it.
    pub fn open(
        items: BTreeMap<String, ReviewItem>,
        store_path: impl AsRef<Path>,
    ) -> groov_core::Result<(Self, ReplayStats)> {
        let (store, book, replay) = ReviewStore::open(store_path, &items)?;
        Ok((
            ReviewService {
                items,
                store: Mutex::new(store),
                book: RwLock::new(book),
            },
            replay,
        ))
    }

    pub fn items(&self) -> &BTreeMap<String, ReviewItem> {
        &self.items
    }

    pub fn stats(&self) -> ReviewStats {
        review_stats(&self.items, &self.book.read().expect("book lock"))
    }

    pub fn export(&self) -> Vec<String> {
        export_accepted(&self.book.read().expect("book lock"))
    }

    /// Validates, persists, then applies a record.
    pub fn record(&self, record: ReviewRecord) -> Result<(), ApiError> {
        validate_record(&self.items, &record).map_err(|e| ApiError::not_found(e.to_string()))?;
        let mut store = self.store.lock().expect("store lock");
        store.append(&record).map_err(|e| ApiError::internal(e.to_string()))?;
        self.book.write().expect("book lock").apply(record);
        Ok(())
    }

    pub fn page(&self, cursor: Option<&str>, size: usize) -> Result<Page, ApiError> {
        if size == 0 || size > MAX_PAGE_SIZE {
            return Err(ApiError::bad_request(format!("size must be in 1..={MAX_PAGE_SIZE}")));
        }
        let rest: Box<dyn Iterator<Item = &ReviewItem>> = match cursor {
            None | Some("") => Box::new(self.items.values()),
            Some(c) => {
                if !self.items.contains_key(c) {
                    return Err(ApiError::bad_request(format!("unknown cursor {c:?}")));
                }
                Box::new(
                    self.items
                        .range::<str, _>((std::ops::Bound::Excluded(c), std::ops::Bound::Unbounded))
                        .map(|(_, v)| v),
                )
            }
        };
        let mut rest = rest.peekable();
        let items: Vec<ReviewItem> = rest.by_ref().take(size).cloned().collect();
        let next_cursor = match rest.peek() {
            Some(_) => items.last().map(|i| i.id.clone()),
            None => None,
        };
        Ok(Page {
            items,
            next_cursor,
            total: self.items.len(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Page {
    pub items: Vec<ReviewItem>,
    pub next_cursor: Option<String>,
    pub total: usize,
}

#[derive(Debug, Deserialize)]
struct PageQuery {
    cursor: Option<String>,
    size: Option<usize>,
}

/// Review submission; the server stamps the time when it is absent.
#[derive(Debug, Deserialize)]
struct ReviewBody {
    instance_id: String,
    label: String,
    sensible: bool,
    informative: bool,
    reviewer: String,
    timestamp: Option<u64>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: message.into(),
        }
    }

    pub fn status(&self) -> StatusCode {
        self.status
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type Shared = Arc<ReviewService>;

async fn list_instances(
    State(svc): State<Shared>,
    query: Result<Query<PageQuery>, QueryRejection>,
) -> Result<Json<Page>, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    svc.page(q.cursor.as_deref(), q.size.unwrap_or(DEFAULT_PAGE_SIZE)).map(Json)
}

async fn get_instance(State(svc): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<ReviewItem>, ApiError> {
    svc.items
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("no instance {id:?} with novel labels")))
}

async fn post_review(
    State(svc): State<Shared>,
    body: Result<Json<ReviewBody>, JsonRejection>,
) -> Result<(StatusCode, Json<ReviewRecord>), ApiError> {
    let Json(body) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    if body.reviewer.trim().is_empty() {
        return Err(ApiError::bad_request("reviewer must not be empty"));
    }
    let timestamp = body.timestamp.unwrap_or_else(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    });
    let record = ReviewRecord {
        instance_id: body.instance_id,
        label: body.label,
        sensible: body.sensible,
        informative: body.informative,
        reviewer: body.reviewer,
        timestamp,
    };
    svc.record(record.clone())?;
    Ok((StatusCode::CREATED, Json(record)))
}

async fn stats(State(svc): State<Shared>) -> Json<ReviewStats> {
    Json(svc.stats())
}

async fn export(State(svc): State<Shared>) -> impl IntoResponse {
    let mut body = svc.export().join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], body)
}

async fn placeholder() -> Html<&'static str> {
    Html(PLACEHOLDER)
}

pub fn router(service: Shared, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/instances", get(list_instances))
        .route("/api/instances/{id}", get(get_instance))
        .route("/api/reviews", axum::routing::post(post_review))
        .route("/api/stats", get(stats))
        .route("/api/export", get(export))
        .with_state(service);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).fallback(get(placeholder))),
        None => api.fallback(get(placeholder)),
    }
}

/// Serves `app` on `listener` until the process is stopped.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app).await
}
