//! HTTP front end for tidecast: forecasts, flood-probability queries and
//! metadata over JSON. Endpoints are described in `openapi.yaml`.

pub mod error;
pub mod state;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{Any, CorsLayer};

use tidecast::ensemble::{EnsembleSummary, ForecastEnsemble};
use tidecast::io::{format_timestamp, parse_timestamp};
use tidecast::query::{
    area_flood_probability, cells_overlapping, route_flood_probability, QueryKind, QueryPolygon, QueryResult,
};

pub use error::ApiError;
pub use state::{ForecastKey, ServiceState};

type Shared = Arc<ServiceState>;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastRequest {
    pub patch_id: String,
    /// Timestamp of the first forecast hour.
    pub start: String,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_scenarios")]
    pub scenarios: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_horizon() -> usize {
    12
}

fn default_scenarios() -> usize {
    8
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForecastResponse {
    pub ensemble_id: String,
    pub patch_id: String,
    pub start: String,
    pub horizon: usize,
    pub scenarios: usize,
    pub seed: u64,
    pub checkpoint_id: String,
    pub summary: EnsembleSummary,
}

/// Forecast parameters for queries that should sample their own ensembles.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryForecast {
    pub start: String,
    #[serde(default = "default_scenarios")]
    pub scenarios: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    /// `[[x, y], ...]` in raster cell coordinates (x = column, y = row).
    pub polygon: Vec<[f64; 2]>,
    /// Threshold in feet; ignored (fixed at 0) for route queries.
    #[serde(default)]
    pub d: Option<f64>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub ensemble_ids: Vec<String>,
    #[serde(default)]
    pub forecast: Option<QueryForecast>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    #[serde(flatten)]
    pub result: QueryResult,
    /// Ensemble used for each patch.
    pub ensemble_ids: BTreeMap<String, String>,
}

pub fn router(state: Shared) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods(Any)
        .allow_headers(Any);
    Router::new()
        .route("/health", get(health))
        .route("/patches", get(patches))
        .route("/model", get(model_info))
        .route("/forecast", post(forecast))
        .route("/query/area", post(query_area))
        .route("/query/route", post(query_route))
        .route("/ensemble/:id", get(ensemble_gsf))
        .layer(middleware::from_fn_with_state(state.clone(), record_request))
        .layer(cors)
        .with_state(state)
}

pub async fn serve(state: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn record_request(State(state): State<Shared>, req: Request, next: Next) -> Response {
    let method = req.method().to_string();
    let path = req.uri().path().to_string();
    let resp = next.run(req).await;
    let status = resp.status().as_u16();
    log::info!("{method} {path} -> {status}");
    state.record(state::LogEntry { method, path, status });
    resp
}

fn parse_ts(text: &str) -> Result<chrono::NaiveDateTime, ApiError> {
    parse_timestamp(text).ok_or_else(|| ApiError::unprocessable(format!("bad timestamp {text:?}")))
}

async fn health(State(state): State<Shared>) -> Response {
    match state.is_ready() {
        (true, true) => Json(json!({ "status": "ok" })).into_response(),
        (model, data) => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "status": "unavailable", "model_loaded": model, "data_loaded": data })),
        )
            .into_response(),
    }
}

async fn patches(State(state): State<Shared>) -> Result<Json<serde_json::Value>, ApiError> {
    let ds = state.dataset()?;
    let first = ds.patches.first().map(|p| &p.series);
    Ok(Json(json!({
        "patches": ds.layout(),
        "timesteps": ds.timesteps(),
        "start": first.map(|s| format_timestamp(s.start())),
    })))
}

async fn model_info(State(state): State<Shared>) -> Result<Json<serde_json::Value>, ApiError> {
    let (model, checkpoint_id) = state.model()?;
    Ok(Json(json!({
        "checkpoint_id": checkpoint_id,
        "config": model.config,
        "schedule": model.schedule_config,
        "parameter_count": model.parameter_count(),
    })))
}

async fn forecast(State(state): State<Shared>, body: Result<Json<ForecastRequest>, axum::extract::rejection::JsonRejection>) -> Result<Json<ForecastResponse>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::unprocessable(e.body_text()))?;
    let key = ForecastKey {
        patch_id: req.patch_id,
        start: parse_ts(&req.start)?,
        horizon: req.horizon,
        scenarios: req.scenarios,
        seed: req.seed,
    };
    let stored = state.forecast(key.clone()).await?;
    Ok(Json(ForecastResponse {
        ensemble_id: stored.id.clone(),
        patch_id: key.patch_id,
        start: format_timestamp(key.start),
        horizon: key.horizon,
        scenarios: key.scenarios,
        seed: key.seed,
        checkpoint_id: stored.ensemble.checkpoint_id.clone(),
        summary: stored.summary.clone(),
    }))
}

async fn run_query(state: &ServiceState, req: QueryRequest, kind: QueryKind) -> Result<QueryResponse, ApiError> {
    let vertices: Vec<(f64, f64)> = req.polygon.iter().map(|p| (p[0], p[1])).collect();
    let polygon = QueryPolygon::new(vertices, kind)?;
    let layout = state.dataset()?.layout();
    let mut ensembles: BTreeMap<String, ForecastEnsemble> = BTreeMap::new();
    let mut ids = BTreeMap::new();
    for id in &req.ensemble_ids {
        let stored = state
            .ensemble(id)
            .ok_or_else(|| ApiError::not_found(format!("unknown ensemble {id}")))?;
        let patch = stored.ensemble.patch_id.clone();
        if ensembles.insert(patch.clone(), stored.ensemble.clone()).is_some() {
            return Err(ApiError::unprocessable(format!("two ensembles given for patch {patch}")));
        }
        ids.insert(patch, id.clone());
    }
    if let Some(f) = &req.forecast {
        let start = parse_ts(&f.start)?;
        for patch_id in cells_overlapping(&polygon, &layout)?.into_keys() {
            if ensembles.contains_key(&patch_id) {
                continue;
            }
            let stored = state
                .forecast(ForecastKey {
                    patch_id: patch_id.clone(),
                    start,
                    horizon: req.horizon,
                    scenarios: f.scenarios,
                    seed: f.seed,
                })
                .await?;
            ids.insert(patch_id.clone(), stored.id.clone());
            ensembles.insert(patch_id, stored.ensemble.clone());
        }
    }
    let result = match kind {
        QueryKind::Area => {
            let d = req
                .d
                .ok_or_else(|| ApiError::unprocessable("area queries need a threshold d"))?;
            area_flood_probability(&polygon, d, req.horizon, &layout, &ensembles)?
        }
        QueryKind::Route => route_flood_probability(&polygon, req.horizon, &layout, &ensembles)?,
    };
    ids.retain(|patch, _| result.per_patch.iter().any(|p| &p.patch_id == patch));
    Ok(QueryResponse {
        result,
        ensemble_ids: ids,
    })
}

async fn query_area(State(state): State<Shared>, body: Result<Json<QueryRequest>, axum::extract::rejection::JsonRejection>) -> Result<Json<QueryResponse>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::unprocessable(e.body_text()))?;
    Ok(Json(run_query(&state, req, QueryKind::Area).await?))
}

async fn query_route(State(state): State<Shared>, body: Result<Json<QueryRequest>, axum::extract::rejection::JsonRejection>) -> Result<Json<QueryResponse>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::unprocessable(e.body_text()))?;
    Ok(Json(run_query(&state, req, QueryKind::Route).await?))
}

async fn ensemble_gsf(State(state): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let stored = state
        .ensemble(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown ensemble {id}")))?;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], stored.ensemble.encode()).into_response())
}
