//! HTTP routes and the job worker pool.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use steexlab_core::engine::{result_digest, save_result, ResultRecord, RESULT_JSON};
use steexlab_core::pngio;
use tokio::sync::Semaphore;

use crate::api::{
    ClassRef, DatasetItemView, ExplainRequest, JobAccepted, JobView, ModelList, RegisterModel, SchemaIndex,
    API_VERSION,
};
use crate::error::{Result, ServiceError};
use crate::jobs::{JobState, JobStore, ARTIFACT_NAMES};
use crate::pipeline::{dataset_item, execute, prepare, ModelCache, Prepared};
use crate::registry::Registry;
use crate::{check_id, read_json, schema};

pub struct AppState {
    pub home: PathBuf,
    pub registry: Registry,
    pub jobs: JobStore,
    pub cache: ModelCache,
    permits: Arc<Semaphore>,
}

/// Default worker count: one core is left for request handling.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get().saturating_sub(1)).unwrap_or(1).max(1)
}

impl AppState {
    pub fn open(home: &Path, workers: usize) -> Result<Arc<Self>> {
        std::fs::create_dir_all(home).map_err(|e| ServiceError::io(home, e))?;
        Ok(Arc::new(AppState {
            home: home.to_path_buf(),
            registry: Registry::open(home)?,
            jobs: JobStore::open(home)?,
            cache: ModelCache::default(),
            permits: Arc::new(Semaphore::new(workers.max(1))),
        }))
    }

    /// Restarts every queued job of a previous process. Must run inside a
    /// tokio runtime.
    pub fn resume_queued(self: &Arc<Self>) {
        for id in self.jobs.queued() {
            tokio::spawn(run_job(self.clone(), id, None));
        }
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Internal(format!("worker panicked: {e}")))?
}

/// Runs one job to a terminal state. `prepared` is absent for jobs
/// recovered after a restart, which are validated again.
async fn run_job(state: Arc<AppState>, id: String, prepared: Option<Prepared>) {
    let Ok(_permit) = state.permits.clone().acquire_owned().await else { return };
    let Ok(record) = state.jobs.start(&id) else { return };
    let st = state.clone();
    let job = id.clone();
    let outcome = blocking(move || {
        let p = match prepared {
            Some(p) => p,
            None => prepare(&st.home, &st.registry, &st.cache, &record.request)?,
        };
        let r = execute(&p)?;
        let dir = st.jobs.result_dir(&job);
        // leftovers of an interrupted attempt
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| ServiceError::io(&dir, e))?;
        }
        save_result(&dir, &r)?;
        Ok(result_digest(&r))
    })
    .await;
    let _ = state.jobs.finish(&id, outcome.map_err(|e| e.detail()));
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("invalid request body: {e}")))
}

async fn explain(State(state): State<Arc<AppState>>, body: Bytes) -> Result<(StatusCode, Json<JobAccepted>)> {
    let req: ExplainRequest = parse_json(&body)?;
    let st = state.clone();
    let r = req.clone();
    let prepared = blocking(move || prepare(&st.home, &st.registry, &st.cache, &r)).await?;
    let record = state.jobs.create(req)?;
    tokio::spawn(run_job(state.clone(), record.id.clone(), Some(prepared)));
    Ok((
        StatusCode::ACCEPTED,
        Json(JobAccepted { url: format!("/api/jobs/{}", record.id), job_id: record.id, state: record.state }),
    ))
}

fn job_view(state: &AppState, id: &str) -> Result<JobView> {
    check_id("job id", id)?;
    let record = state.jobs.get(id).ok_or_else(|| ServiceError::NotFound(format!("no job {id:?}")))?;
    let result = if record.state == JobState::Done {
        let rec: ResultRecord = read_json(&state.jobs.result_dir(id).join(RESULT_JSON))?;
        Some(rec)
    } else {
        None
    };
    Ok(JobView::new(record, result))
}

/// A failed job answers with status 500 and the job view, whose `error`
/// carries the class, message and, for numerical failures, the step and
/// trajectory.
async fn get_job(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response> {
    let view = blocking(move || job_view(&state, &id)).await?;
    let status = if view.state == JobState::Failed { StatusCode::INTERNAL_SERVER_ERROR } else { StatusCode::OK };
    Ok((status, Json(view)).into_response())
}

async fn get_artifact(
    State(state): State<Arc<AppState>>,
    UrlPath((id, name)): UrlPath<(String, String)>,
) -> Result<Response> {
    check_id("job id", &id)?;
    if !ARTIFACT_NAMES.contains(&name.as_str()) {
        return Err(ServiceError::NotFound(format!("no artifact {name:?}")));
    }
    let record = state.jobs.get(&id).ok_or_else(|| ServiceError::NotFound(format!("no job {id:?}")))?;
    if record.state != JobState::Done {
        return Err(ServiceError::NotFound(format!("job {id} has no artifacts while {:?}", record.state)));
    }
    let path = state.jobs.result_dir(&id).join(&name);
    let bytes = blocking(move || std::fs::read(&path).map_err(|e| ServiceError::io(&path, e))).await?;
    let mime = match name.rsplit('.').next() {
        Some("png") => "image/png",
        Some("csv") => "text/csv",
        _ => "application/json",
    };
    Ok(([(header::CONTENT_TYPE, mime)], Body::from(bytes)).into_response())
}

async fn list_models(State(state): State<Arc<AppState>>) -> Json<ModelList> {
    Json(ModelList { models: state.registry.snapshot().values().cloned().collect() })
}

async fn register_model(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response> {
    let req: RegisterModel = parse_json(&body)?;
    let entry = blocking(move || state.registry.register(&req.id, req.kind, &req.checkpoint)).await?;
    Ok((StatusCode::CREATED, Json(entry)).into_response())
}

async fn get_item(
    State(state): State<Arc<AppState>>,
    UrlPath((id, index)): UrlPath<(String, String)>,
) -> Result<Json<DatasetItemView>> {
    let index: usize = index.parse().map_err(|_| ServiceError::BadRequest(format!("item index {index:?} is not a number")))?;
    blocking(move || {
        let it = dataset_item(&state.home, &id, index)?;
        let b64 = base64::engine::general_purpose::STANDARD;
        let p = &it.manifest.profile;
        Ok(Json(DatasetItemView {
            index,
            count: it.manifest.count,
            height: p.height,
            width: p.width,
            split: it.split,
            label: it.label,
            label_name: it.label.and_then(|l| it.manifest.label_names.get(l - 1).cloned()),
            class_names: p.class_names.clone(),
            present_classes: it
                .mask
                .present_classes()
                .into_iter()
                .map(|c| ClassRef { id: c, name: p.class_name(c).to_string() })
                .collect(),
            image_png_base64: b64.encode(pngio::encode_image(&it.image)?),
            mask_png_base64: b64.encode(pngio::encode_mask(&it.mask)?),
            dataset: id,
        }))
    })
    .await
}

async fn get_schema() -> Json<SchemaIndex> {
    Json(SchemaIndex { version: API_VERSION.into(), schemas: schema::all() })
}

async fn fallback() -> ServiceError {
    ServiceError::NotFound("no such endpoint".into())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/jobs/explain", post(explain))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/jobs/{id}/artifacts/{name}", get(get_artifact))
        .route("/api/models", get(list_models).post(register_model))
        .route("/api/datasets/{id}/items/{n}", get(get_item))
        .route("/api/schema", get(get_schema))
        .fallback(fallback)
        .with_state(state)
}

/// Serves until ctrl-c, after restarting queued jobs.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    state.resume_queued();
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
