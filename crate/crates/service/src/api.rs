//! HTTP surface under `/v1`. JSON in and out; errors are
//! `{"error": <code>, "detail": <message>}`.

use std::collections::BTreeSet;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use plurality_core::casemodel::ClinicalCase;
use plurality_core::synthesis::single_vs_ensemble_view;

use crate::app::{App, AppError, JobState, RunSpec};
use crate::store::RunStatus;

pub struct ApiError(AppError);

impl From<AppError> for ApiError {
    fn from(e: AppError) -> Self {
        ApiError(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(AppError::Invalid(e.body_text()))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = match &self.0 {
            AppError::CaseNotFound(_) => (StatusCode::NOT_FOUND, "case_not_found"),
            AppError::RunNotFound(_) => (StatusCode::NOT_FOUND, "run_not_found"),
            AppError::NoModelsSelected => (StatusCode::UNPROCESSABLE_ENTITY, "no_models_selected"),
            AppError::Invalid(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
            AppError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            AppError::NoResponders => (StatusCode::CONFLICT, "no_responders"),
            AppError::Provider(_) => (StatusCode::BAD_GATEWAY, "provider"),
            AppError::Store(_) | AppError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        (status, Json(json!({"error": code, "detail": self.0.to_string()}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/v1/cases", get(list_cases).post(create_case))
        .route("/v1/cases/{id}", get(get_case))
        .route("/v1/runs", get(list_runs).post(create_run))
        .route("/v1/runs/{id}", get(get_run))
        .route("/v1/runs/{id}/report", get(get_report))
        .route("/v1/runs/{id}/restratify", post(restratify))
        .route("/v1/models", get(list_models))
        .route("/v1/metrics", get(metrics))
        .with_state(app)
}

async fn list_cases(State(app): State<Arc<App>>) -> ApiResult<Json<Vec<ClinicalCase>>> {
    Ok(Json(app.cases()?))
}

async fn get_case(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult<Json<ClinicalCase>> {
    Ok(Json(app.case(&id)?))
}

async fn create_case(
    State(app): State<Arc<App>>,
    body: Result<Json<ClinicalCase>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(case) = body?;
    app.add_case(&case)?;
    Ok((StatusCode::CREATED, Json(json!({"case_id": case.case_id}))))
}

async fn list_models(State(app): State<Arc<App>>) -> Json<Value> {
    Json(json!(app.models()))
}

async fn create_run(State(app): State<Arc<App>>, body: Result<Json<RunSpec>, JsonRejection>) -> ApiResult<Response> {
    let Json(spec) = body?;
    let run_id = app.submit(&spec)?;
    let location = format!("/v1/runs/{run_id}");
    Ok((
        StatusCode::ACCEPTED,
        [(header::LOCATION, location)],
        Json(json!({"run_id": run_id, "state": "running"})),
    )
        .into_response())
}

#[derive(Debug, Serialize)]
struct RunSummary {
    run_id: String,
    state: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    case_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    status: Option<RunStatus>,
    #[serde(skip_serializing_if = "Option::is_none")]
    created_at: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn job_summary(run_id: String, state: JobState) -> RunSummary {
    let (state, error) = match state {
        JobState::Running => ("running", None),
        JobState::Failed { error } => ("failed", Some(error)),
    };
    RunSummary {
        run_id,
        state,
        case_id: None,
        status: None,
        created_at: None,
        error,
    }
}

async fn list_runs(State(app): State<Arc<App>>) -> ApiResult<Json<Vec<RunSummary>>> {
    let runs = app
        .runs()?
        .into_iter()
        .map(|(id, record, job)| match (record, job) {
            (Some(r), _) => RunSummary {
                run_id: id,
                state: "stored",
                case_id: Some(r.case_id),
                status: Some(r.status),
                created_at: Some(r.created_at.to_rfc3339()),
                error: None,
            },
            (None, Some(job)) => job_summary(id, job),
            (None, None) => job_summary(id, JobState::Running),
        })
        .collect();
    Ok(Json(runs))
}

/// Stored record, or the job state while the run is in flight.
async fn get_run(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult<Response> {
    match app.run(&id) {
        Ok(record) => Ok(Json(record).into_response()),
        Err(AppError::RunNotFound(_)) if app.job(&id).is_some() => {
            let summary = job_summary(id.clone(), app.job(&id).expect("checked"));
            Ok(Json(summary).into_response())
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn get_report(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    Query(q): Query<ReportQuery>,
) -> ApiResult<Response> {
    let record = match app.run(&id) {
        Ok(r) => r,
        Err(AppError::RunNotFound(_)) if app.job(&id) == Some(JobState::Running) => {
            return Err(AppError::Conflict(format!("run `{id}` is still running")).into())
        }
        Err(e) => return Err(e.into()),
    };
    let Some(report) = record.report else {
        return Err(AppError::NoResponders.into());
    };
    match q.format.as_deref() {
        None | Some("machine") | Some("json") => {
            let comparison = single_vs_ensemble_view(&report);
            Ok(Json(json!({"report": report, "comparison": comparison})).into_response())
        }
        Some("text") => Ok((
            [(header::CONTENT_TYPE, "text/plain; charset=utf-8")],
            app.store().report_text(&id).map_err(AppError::from)?,
        )
            .into_response()),
        Some(other) => Err(AppError::Invalid(format!("unknown format `{other}`")).into()),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RestratifyBody {
    model_ids: BTreeSet<String>,
}

async fn restratify(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    body: Result<Json<RestratifyBody>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(body) = body?;
    match app.restratify(&id, &body.model_ids) {
        Ok(analysis) => Ok(Json(json!({
            "run_id": id,
            "model_ids": body.model_ids,
            "status": "ok",
            "differential": analysis.differential,
            "bias_findings": analysis.findings,
            "template_narrative": analysis.template_narrative,
        }))),
        Err(AppError::NoResponders) => Ok(Json(json!({
            "run_id": id,
            "model_ids": body.model_ids,
            "status": "no_responders",
        }))),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Deserialize)]
struct MetricsQuery {
    /// Comma-separated run ids.
    runs: Option<String>,
}

async fn metrics(State(app): State<Arc<App>>, Query(q): Query<MetricsQuery>) -> ApiResult<Json<Value>> {
    let ids: Vec<String> = q
        .runs
        .as_deref()
        .unwrap_or("")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    Ok(Json(json!(app.metrics(&ids)?)))
}
