//! JSON API behind the annotation UI: trajectory cleaning and human grading.
//!
//! Data root layout: `trajectories.jsonl`, `cleanings.jsonl` and
//! `runs/<run id>/...` as written by the runner. Every write goes through the
//! shared [`Appender`] and is acknowledged only after it is synced.

use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use super::report::{build_report, ExportedReport, RunData};
use super::{Appender, DedupKey, GradeRecord, RunError, RunRecord, GRADES_LOG, RUN_MANIFEST};
use crate::manifest::ManifestError;
use crate::trajdata::{load_cleanings, load_trajectories, CleaningError, CleaningSelection, Trajectory3D};

pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const CLEANINGS_FILE: &str = "cleanings.jsonl";

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind,
            message: message.into(),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.kind, "message": self.message }))).into_response()
    }
}

impl From<CleaningError> for ApiError {
    fn from(e: CleaningError) -> Self {
        let (status, kind) = match &e {
            CleaningError::RotateNotCleanable => (StatusCode::BAD_REQUEST, "RotateNotCleanable"),
            CleaningError::BoundsError { .. } => (StatusCode::BAD_REQUEST, "BoundsError"),
            CleaningError::WrongTrajectory { .. } => (StatusCode::BAD_REQUEST, "WrongTrajectory"),
            CleaningError::UnknownTrajectory(_) => (StatusCode::NOT_FOUND, "UnknownTrajectory"),
        };
        Self::new(status, kind, e.to_string())
    }
}

impl From<RunError> for ApiError {
    fn from(e: RunError) -> Self {
        match &e {
            RunError::UnknownRun(_) => Self::new(StatusCode::NOT_FOUND, "UnknownRun", e.to_string()),
            RunError::UnknownFixture(_) => Self::new(StatusCode::NOT_FOUND, "UnknownFixture", e.to_string()),
            RunError::Metrics(_) => Self::new(StatusCode::CONFLICT, "NoRecords", e.to_string()),
            _ => Self::internal(e),
        }
    }
}

impl From<ManifestError> for ApiError {
    fn from(e: ManifestError) -> Self {
        Self::internal(e)
    }
}

#[derive(Clone)]
pub struct ApiState {
    root: PathBuf,
    trajectories: Arc<Vec<Trajectory3D>>,
    log: Appender,
}

impl ApiState {
    /// Loads the trajectory manifest under `root`; a missing file means no
    /// trajectories.
    pub fn load(root: &FsPath, log: Appender) -> Result<Self, ManifestError> {
        let path = root.join(TRAJECTORIES_FILE);
        let trajectories = if path.exists() {
            load_trajectories(&path)?
        } else {
            Vec::new()
        };
        Ok(ApiState {
            root: root.to_path_buf(),
            trajectories: Arc::new(trajectories),
            log,
        })
    }

    fn runs_root(&self) -> PathBuf {
        self.root.join("runs")
    }

    fn trajectory(&self, id: &str) -> Result<&Trajectory3D, ApiError> {
        self.trajectories
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| CleaningError::UnknownTrajectory(id.to_string()).into())
    }
}

pub fn router(state: ApiState, static_dir: Option<&FsPath>) -> Router {
    let api = Router::new()
        .route("/api/trajectories", get(list_trajectories))
        .route("/api/trajectories/{id}", get(get_trajectory))
        .route("/api/cleanings", get(list_cleanings).post(post_cleaning))
        .route("/api/runs", get(list_runs))
        .route("/api/runs/{id}/pending", get(pending))
        .route("/api/runs/{id}/report", get(report))
        .route("/api/grades", axum::routing::post(post_grade))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until the process is stopped.
pub async fn serve(root: &FsPath, addr: SocketAddr, static_dir: Option<&FsPath>) -> Result<(), RunError> {
    let state = ApiState::load(root, Appender::spawn())?;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(super::io_err(root))?;
    tracing::info!("serving {} on http://{}", root.display(), listener.local_addr().map_err(super::io_err(root))?);
    axum::serve(listener, router(state, static_dir))
        .await
        .map_err(super::io_err(root))
}

async fn list_trajectories(State(s): State<ApiState>) -> Json<Vec<Trajectory3D>> {
    Json(s.trajectories.as_ref().clone())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrajectoryDetail {
    pub trajectory: Trajectory3D,
    /// Every selection for this trajectory, oldest first; the last one is in
    /// force.
    pub cleanings: Vec<CleaningSelection>,
}

async fn get_trajectory(State(s): State<ApiState>, Path(id): Path<String>) -> Result<Json<TrajectoryDetail>, ApiError> {
    let trajectory = s.trajectory(&id)?.clone();
    let cleanings = load_cleanings(&s.root.join(CLEANINGS_FILE))?
        .into_iter()
        .filter(|c| c.trajectory_id == id)
        .collect();
    Ok(Json(TrajectoryDetail { trajectory, cleanings }))
}

#[derive(Debug, Deserialize)]
struct CleaningFilter {
    trajectory: Option<String>,
}

async fn list_cleanings(
    State(s): State<ApiState>,
    Query(filter): Query<CleaningFilter>,
) -> Result<Json<Vec<CleaningSelection>>, ApiError> {
    let all = load_cleanings(&s.root.join(CLEANINGS_FILE))?;
    Ok(Json(match filter.trajectory {
        Some(id) => all.into_iter().filter(|c| c.trajectory_id == id).collect(),
        None => all,
    }))
}

async fn post_cleaning(
    State(s): State<ApiState>,
    Json(sel): Json<CleaningSelection>,
) -> Result<Json<CleaningSelection>, ApiError> {
    if sel.annotator.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "InvalidSelection", "annotator is empty"));
    }
    sel.validate_for(s.trajectory(&sel.trajectory_id)?)?;
    let key = sel.submission_id.clone().map(|id| DedupKey::new("submission_id", id));
    s.log
        .append(&s.root.join(CLEANINGS_FILE), &sel, key)
        .await
        .map_err(ApiError::internal)?;
    Ok(Json(sel))
}

async fn list_runs(State(s): State<ApiState>) -> Result<Json<Vec<String>>, ApiError> {
    let mut ids = Vec::new();
    if let Ok(entries) = std::fs::read_dir(s.runs_root()) {
        for e in entries.flatten() {
            if e.path().join(RUN_MANIFEST).is_file() {
                ids.extend(e.file_name().to_str().map(String::from));
            }
        }
    }
    ids.sort();
    Ok(Json(ids))
}

async fn pending(State(s): State<ApiState>, Path(id): Path<String>) -> Result<Json<Vec<RunRecord>>, ApiError> {
    let data = RunData::load(&s.runs_root(), &id)?;
    Ok(Json(data.pending().into_iter().cloned().collect()))
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    compare: Option<String>,
}

async fn report(
    State(s): State<ApiState>,
    Path(id): Path<String>,
    Query(q): Query<ReportQuery>,
) -> Result<Json<ExportedReport>, ApiError> {
    let data = RunData::load(&s.runs_root(), &id)?;
    Ok(Json(build_report(&data, q.compare.as_deref())?))
}

async fn post_grade(State(s): State<ApiState>, Json(grade): Json<GradeRecord>) -> Result<Json<GradeRecord>, ApiError> {
    if grade.grader.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "InvalidGrade", "grader is empty"));
    }
    let data = RunData::load(&s.runs_root(), &grade.run_id)?;
    if !data.records.iter().any(|r| r.instance_id == grade.instance_id) {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "UnknownInstance",
            format!("run `{}` has no record for `{}`", grade.run_id, grade.instance_id),
        ));
    }
    let key = grade.submission_id.clone().map(|id| DedupKey::new("submission_id", id));
    let path = s.runs_root().join(&grade.run_id).join(GRADES_LOG);
    s.log.append(&path, &grade, key).await.map_err(ApiError::internal)?;
    Ok(Json(grade))
}
