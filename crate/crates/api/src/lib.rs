//! HTTP interface over an [`Engine`].
//!
//! Read endpoints are open and side-effect free; mutating endpoints need
//! `Authorization: Bearer <token>`. Every response body is JSON except the
//! CT export, which is the store's CSV verbatim.

mod error;
mod views;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, NaiveDate, Utc};
use epiqc_core::gate::{HoldDecision, TicketState};
use epiqc_core::issues::{IssueCategory, IssueState, Outcome};
use epiqc_core::reconciler::DiaryStatus;
use epiqc_core::{Engine, Metric};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{error, info};

pub use error::{ApiError, ErrorTag};
pub use views::*;

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

/// Listener and auth settings; `EPIQC_API_PORT` / `EPIQC_API_TOKEN` override.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApiConfig {
    pub bind: String,
    pub port: u16,
    pub token: Option<String>,
    /// Directory of pre-built console files served under `/`.
    pub static_dir: Option<PathBuf>,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            token: None,
            static_dir: None,
        }
    }
}

impl ApiConfig {
    pub fn apply_env(&mut self) -> Result<(), String> {
        if let Ok(port) = std::env::var("EPIQC_API_PORT") {
            self.port = port.parse().map_err(|_| format!("EPIQC_API_PORT `{port}` is not a port"))?;
        }
        if let Ok(token) = std::env::var("EPIQC_API_TOKEN") {
            self.token = Some(token);
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct AppState {
    engine: Arc<Mutex<Engine>>,
    token: Option<String>,
    store_dir: Option<PathBuf>,
    clock: Clock,
}

impl AppState {
    pub fn new(engine: Engine, token: Option<String>) -> Self {
        Self {
            engine: Arc::new(Mutex::new(engine)),
            token,
            store_dir: None,
            clock: Arc::new(Utc::now),
        }
    }

    /// Persist engine state to `dir` after every successful mutation.
    pub fn with_store_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.store_dir = Some(dir.into());
        self
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn engine(&self) -> MutexGuard<'_, Engine> {
        self.engine.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn shared_engine(&self) -> Arc<Mutex<Engine>> {
        self.engine.clone()
    }

    fn now(&self) -> DateTime<Utc> {
        (self.clock)()
    }

    fn authorize(&self, headers: &HeaderMap) -> Result<(), ApiError> {
        let Some(expected) = &self.token else {
            return Err(ApiError::new(ErrorTag::Unauthorized, "no API token configured; writes are disabled"));
        };
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        match given {
            Some(t) if t == expected => Ok(()),
            Some(_) => Err(ApiError::new(ErrorTag::Unauthorized, "bad bearer token")),
            None => Err(ApiError::new(ErrorTag::Unauthorized, "missing bearer token")),
        }
    }

    /// Runs a mutation under the engine lock and persists the result.
    fn mutate<T>(&self, headers: &HeaderMap, f: impl FnOnce(&mut Engine, DateTime<Utc>) -> Result<T, ApiError>) -> Result<T, ApiError> {
        self.authorize(headers)?;
        let now = self.now();
        let mut engine = self.engine();
        let out = f(&mut engine, now)?;
        if let Some(dir) = &self.store_dir {
            engine.save(dir).map_err(|e| {
                error!(error = %e, "persisting state failed");
                ApiError::new(ErrorTag::Internal, format!("persisting state failed: {e}"))
            })?;
        }
        Ok(out)
    }
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/regions", get(regions))
        .route("/series/{region}/{metric}", get(series))
        .route("/snapshot/{region}", get(snapshot))
        .route("/children-stats/{region}", get(children_stats))
        .route("/burndown/{region}", get(burndown))
        .route("/compare", get(compare))
        .route("/holds", get(holds))
        .route("/holds/{id}/decision", post(hold_decision))
        .route("/diary", get(diary))
        .route("/issues", get(list_issues).post(submit_issue))
        .route("/issues/{id}/assign", post(assign_issue))
        .route("/issues/{id}/resolve", post(resolve_issue))
        .route("/journal", get(journal))
        .route("/export/ct.csv", get(export_ct))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api.fallback(|| async { ApiError::new(ErrorTag::NotFound, "no such endpoint") }),
    }
}

/// Binds and serves until Ctrl-C.
pub async fn serve(state: AppState, config: &ApiConfig) -> std::io::Result<()> {
    let addr: SocketAddr = format!("{}:{}", config.bind, config.port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!(%addr, "api listening");
    axum::serve(listener, router(state, config.static_dir.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

type Params = Query<BTreeMap<String, String>>;

fn param<T: FromStr>(q: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, ApiError>
where
    T::Err: std::fmt::Display,
{
    match q.get(key).map(|s| s.trim()).filter(|s| !s.is_empty()) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|e| ApiError::validation(format!("bad `{key}`: {e}"))),
    }
}

fn metric_param(q: &BTreeMap<String, String>) -> Result<Metric, ApiError> {
    Ok(param::<Metric>(q, "metric")?.unwrap_or(Metric::Confirmed))
}

fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::validation(format!("bad request body: {e}")))
}

fn id_param(raw: &str, what: &str) -> Result<u64, ApiError> {
    raw.parse()
        .map_err(|_| ApiError::validation(format!("{what} id `{raw}` is not a number")))
}

async fn regions(State(s): State<AppState>, Query(q): Params) -> Result<Json<Value>, ApiError> {
    let engine = s.engine();
    let parent = q.get("parent").filter(|p| !p.is_empty());
    let regions = engine.store().regions();
    let list: Vec<_> = match parent {
        Some(p) => {
            regions.resolve(p)?;
            regions.children(p)
        }
        None => regions.countries(),
    };
    Ok(Json(json!({ "parent": parent, "regions": list })))
}

async fn series(
    State(s): State<AppState>,
    Path((region, metric)): Path<(String, String)>,
    Query(q): Params,
) -> Result<Json<SeriesView>, ApiError> {
    let metric: Metric = metric.parse().map_err(|e: epiqc_core::series::UnknownMetric| ApiError::validation(e.to_string()))?;
    let scale = param::<Scale>(&q, "scale")?.unwrap_or_default();
    let engine = s.engine();
    Ok(Json(views::series_view(
        &engine,
        &region,
        metric,
        param::<NaiveDate>(&q, "from")?,
        param::<NaiveDate>(&q, "to")?,
        scale,
        param::<u64>(&q, "align_threshold")?,
    )?))
}

async fn snapshot(State(s): State<AppState>, Path(region): Path<String>, Query(q): Params) -> Result<Json<SnapshotView>, ApiError> {
    let engine = s.engine();
    Ok(Json(views::snapshot_view(&engine, &region, param(&q, "date")?)?))
}

async fn children_stats(
    State(s): State<AppState>,
    Path(region): Path<String>,
    Query(q): Params,
) -> Result<Json<ChildrenStatsView>, ApiError> {
    let engine = s.engine();
    Ok(Json(views::children_stats_view(&engine, &region, metric_param(&q)?, param(&q, "date")?)?))
}

async fn burndown(State(s): State<AppState>, Path(region): Path<String>) -> Result<Json<BurndownView>, ApiError> {
    let engine = s.engine();
    Ok(Json(views::burndown_view(&engine, &region)?))
}

async fn compare(State(s): State<AppState>, Query(q): Params) -> Result<Json<CompareView>, ApiError> {
    let regions: Vec<String> = q
        .get("regions")
        .map(|r| r.split(',').map(str::trim).filter(|r| !r.is_empty()).map(String::from).collect())
        .unwrap_or_default();
    if regions.is_empty() {
        return Err(ApiError::validation("`regions` must list at least one region"));
    }
    let threshold = param::<u64>(&q, "align_threshold")?.unwrap_or(100);
    let engine = s.engine();
    Ok(Json(views::compare_view(&engine, &regions, metric_param(&q)?, threshold)?))
}

async fn holds(State(s): State<AppState>, Query(q): Params) -> Result<Json<Value>, ApiError> {
    let state = param::<TicketState>(&q, "state")?;
    let engine = s.engine();
    let tickets: Vec<_> = engine
        .holds()
        .tickets()
        .filter(|t| state.is_none_or(|s| t.state == s))
        .collect();
    Ok(Json(json!({ "tickets": tickets })))
}

#[derive(Debug, Deserialize)]
struct DecisionBody {
    decision: HoldDecision,
    operator: String,
}

async fn hold_decision(
    State(s): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    raw: Bytes,
) -> Result<Json<Value>, ApiError> {
    let id = id_param(&id, "ticket")?;
    let ticket = s.mutate(&headers, |engine, now| {
        let b: DecisionBody = body(&raw)?;
        if b.operator.trim().is_empty() {
            return Err(ApiError::validation("operator is required"));
        }
        Ok(engine.resolve_hold(id, b.decision, b.operator.trim(), now)?)
    })?;
    Ok(Json(json!({ "ticket": ticket })))
}

async fn diary(State(s): State<AppState>, Query(q): Params) -> Result<Json<Value>, ApiError> {
    let status = param::<DiaryStatus>(&q, "status")?;
    let engine = s.engine();
    Ok(Json(json!({ "entries": engine.diary().with_status(status) })))
}

#[derive(Debug, Deserialize)]
struct SubmitBody {
    category: IssueCategory,
    #[serde(default)]
    region_id: Option<String>,
    #[serde(default)]
    links: Vec<String>,
    #[serde(default)]
    body: String,
}

async fn submit_issue(State(s): State<AppState>, headers: HeaderMap, raw: Bytes) -> Result<Response, ApiError> {
    let issue = s.mutate(&headers, |engine, now| {
        let b: SubmitBody = body(&raw)?;
        Ok(engine.submit_issue(b.category, b.region_id, b.links, b.body, now)?)
    })?;
    Ok((StatusCode::CREATED, Json(json!({ "issue": issue }))).into_response())
}

async fn list_issues(State(s): State<AppState>, Query(q): Params) -> Result<Json<Value>, ApiError> {
    let state = param::<IssueState>(&q, "state")?;
    let category = param::<IssueCategory>(&q, "category")?;
    let engine = s.engine();
    Ok(Json(json!({
        "issues": engine.issues().list(state, category),
        "stats": engine.issues().queue_stats(),
    })))
}

#[derive(Debug, Deserialize)]
struct AssignBody {
    operator: String,
}

async fn assign_issue(
    State(s): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    raw: Bytes,
) -> Result<Json<Value>, ApiError> {
    let id = id_param(&id, "issue")?;
    let issue = s.mutate(&headers, |engine, now| {
        let b: AssignBody = body(&raw)?;
        if b.operator.trim().is_empty() {
            return Err(ApiError::validation("operator is required"));
        }
        Ok(engine.assign_issue(id, b.operator.trim(), now)?)
    })?;
    Ok(Json(json!({ "issue": issue })))
}

#[derive(Debug, Deserialize)]
struct ResolveBody {
    outcome: Outcome,
    #[serde(default)]
    note: String,
    #[serde(default)]
    resulting_records: Vec<String>,
}

async fn resolve_issue(
    State(s): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    raw: Bytes,
) -> Result<Json<Value>, ApiError> {
    let id = id_param(&id, "issue")?;
    let issue = s.mutate(&headers, |engine, now| {
        let b: ResolveBody = body(&raw)?;
        Ok(engine.resolve_issue(id, b.outcome, &b.note, b.resulting_records, now)?)
    })?;
    Ok(Json(json!({ "issue": issue })))
}

async fn journal(State(s): State<AppState>, Query(q): Params) -> Result<Json<Value>, ApiError> {
    let since = param::<u64>(&q, "since")?.unwrap_or(0);
    let engine = s.engine();
    let entries: Vec<_> = engine.journal().entries().iter().filter(|e| e.seq > since).collect();
    Ok(Json(json!({ "entries": entries })))
}

async fn export_ct(State(s): State<AppState>, Query(q): Params) -> Result<Response, ApiError> {
    let metric = metric_param(&q)?;
    let regions: Option<Vec<String>> = q
        .get("regions")
        .filter(|r| !r.trim().is_empty())
        .map(|r| r.split(',').map(|x| x.trim().to_string()).collect());
    let engine = s.engine();
    let csv = engine
        .store()
        .export_ct(regions.as_deref(), metric, param(&q, "from")?, param(&q, "to")?)?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response())
}
