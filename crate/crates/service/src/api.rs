use std::convert::Infallible;
use std::ops::ControlFlow;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use rotdrag_core::case::PointPair;
use rotdrag_core::{
    BinaryMask, DragConfig, DragResult, EngineOverrides, Image, RunMetadata, Session, StopReason,
};
use serde::Deserialize;
use serde_json::json;

use crate::job::{now_ms, JobOutcome, JobRecord, JobState};
use crate::{AppState, SessionRecord};

pub(crate) struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl std::fmt::Display) -> Self {
        Self {
            status,
            body: json!({ "error": message.to_string() }),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        tracing::error!("{e}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn no_session(id: &str) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, format!("no session {id}"))
}

fn no_job(id: &str) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, format!("no job {id}"))
}

pub fn router(state: AppState) -> Router {
    let limit = state.config().max_upload_bytes;
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/points", put(put_points))
        .route("/sessions/{id}/mask", put(put_mask))
        .route("/sessions/{id}/edit", post(start_edit))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/progress", get(stream_progress))
        .route("/jobs/{id}/cancel", post(cancel_job))
        .route("/jobs/{id}/result", get(get_result))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let image = Image::decode(&body).map_err(|e| {
        ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            format!("not a PNG or JPEG image: {e}"),
        )
    })?;
    let digest = app.store().put_blob(&body).map_err(ApiError::internal)?;
    let now = now_ms();
    let record = SessionRecord {
        id: uuid::Uuid::new_v4().simple().to_string(),
        image: digest,
        width: image.width(),
        height: image.height(),
        points: Vec::new(),
        mask: None,
        created_at_ms: now,
        updated_at_ms: now,
    };
    app.put_session(record.clone())
        .map_err(ApiError::internal)?;
    let location = format!("/sessions/{}", record.id);
    Ok((
        StatusCode::CREATED,
        [(header::LOCATION, location)],
        Json(record),
    )
        .into_response())
}

async fn get_session(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionRecord>> {
    app.session(&id).map(Json).ok_or_else(|| no_session(&id))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PointsBody {
    points: Vec<PointPair>,
}

fn inside(p: rotdrag_core::Point2, w: usize, h: usize) -> bool {
    p.is_finite() && p.x >= 0.0 && p.y >= 0.0 && p.x <= (w - 1) as f64 && p.y <= (h - 1) as f64
}

async fn put_points(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SessionRecord>> {
    let mut session = app.session(&id).ok_or_else(|| no_session(&id))?;
    let parsed: PointsBody = serde_json::from_slice(&body).map_err(|e| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("bad points payload: {e}"),
        )
    })?;
    for (i, pair) in parsed.points.iter().enumerate() {
        for (role, p) in [("source", pair.source), ("target", pair.target)] {
            if !inside(p, session.width, session.height) {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!(
                        "{role} of pair {i} at {p} is outside the {}x{} image",
                        session.width, session.height
                    ),
                ));
            }
        }
    }
    if session.points != parsed.points {
        session.points = parsed.points;
        session.updated_at_ms = now_ms();
        app.put_session(session.clone())
            .map_err(ApiError::internal)?;
    }
    Ok(Json(session))
}

async fn put_mask(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SessionRecord>> {
    let mut session = app.session(&id).ok_or_else(|| no_session(&id))?;
    let mask = BinaryMask::decode(&body).map_err(|e| {
        ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            format!("not a mask image: {e}"),
        )
    })?;
    if (mask.width(), mask.height()) != (session.width, session.height) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!(
                "mask is {}x{}, image is {}x{}",
                mask.width(),
                mask.height(),
                session.width,
                session.height
            ),
        ));
    }
    let png = mask.encode_png().map_err(ApiError::internal)?;
    let digest = app.store().put_blob(&png).map_err(ApiError::internal)?;
    if session.mask.as_deref() != Some(digest.as_str()) {
        session.mask = Some(digest);
        session.updated_at_ms = now_ms();
        app.put_session(session.clone())
            .map_err(ApiError::internal)?;
    }
    Ok(Json(session))
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct EditBody {
    prompt: String,
    engine: EngineOverrides,
}

fn build_config(app: &AppState, session: &SessionRecord, body: EditBody) -> ApiResult<DragConfig> {
    let unprocessable = |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m);
    if session.points.is_empty() {
        return Err(unprocessable("session has no point pairs".into()));
    }
    let Some(mask) = &session.mask else {
        return Err(unprocessable("session has no mask".into()));
    };
    let image = Image::decode(
        &app.store()
            .get_blob(&session.image)
            .map_err(ApiError::internal)?,
    )
    .map_err(ApiError::internal)?;
    let mask = BinaryMask::decode(&app.store().get_blob(mask).map_err(ApiError::internal)?)
        .map_err(ApiError::internal)?;
    let config = DragConfig::new(
        image,
        session.points.iter().map(|p| p.source).collect(),
        session.points.iter().map(|p| p.target).collect(),
        mask,
        body.prompt,
    )
    .with_params(body.engine.resolve());
    config
        .validate()
        .map_err(|e| unprocessable(e.to_string()))?;
    Ok(config)
}

async fn start_edit(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let session = app.session(&id).ok_or_else(|| no_session(&id))?;
    let body: EditBody = if body.iter().all(u8::is_ascii_whitespace) {
        EditBody::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| {
            ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("bad edit payload: {e}"),
            )
        })?
    };
    let config = build_config(&app, &session, body)?;

    let record = {
        let mut jobs = app.inner.jobs.lock().unwrap();
        if let Some(active) = jobs
            .values()
            .find(|e| e.record.session_id == id && !e.record.state.is_terminal())
        {
            return Err(ApiError {
                status: StatusCode::CONFLICT,
                body: json!({
                    "error": format!("session {id} already has an active job"),
                    "job": active.record.id,
                }),
            });
        }
        let record = JobRecord::new(uuid::Uuid::new_v4().simple().to_string(), id.clone());
        app.store()
            .save_record("jobs", &record.id, &record)
            .map_err(ApiError::internal)?;
        let (changed, _) = tokio::sync::watch::channel(());
        jobs.insert(
            record.id.clone(),
            crate::JobEntry {
                record: record.clone(),
                changed,
            },
        );
        record
    };
    let worker = app.clone();
    let job_id = record.id.clone();
    tokio::task::spawn_blocking(move || run_job(worker, job_id, config));
    let location = format!("/jobs/{}", record.id);
    Ok((
        StatusCode::ACCEPTED,
        [(header::LOCATION, location)],
        Json(record),
    )
        .into_response())
}

fn outcome_of(result: &DragResult, metadata: RunMetadata) -> JobOutcome {
    let last = result.final_report();
    JobOutcome {
        stop_reason: result.stop_reason,
        steps: last.step,
        mean_final_distance: last.mean_dist_to_target,
        final_distances: last
            .handle_positions
            .iter()
            .zip(&metadata.targets)
            .map(|(h, t)| h.distance(*t))
            .collect(),
        final_angles: last.angle_used.clone(),
        timing: result.timing.clone(),
        metadata,
    }
}

fn run_job(app: AppState, job_id: String, config: DragConfig) {
    if !matches!(app.update_job(&job_id, |j| j.start()), Some(Ok(()))) {
        return;
    }
    let attempt = || -> rotdrag_core::Result<(DragResult, RunMetadata)> {
        let parts = (app.inner.factory)()?;
        let mut session = Session::new(config, parts)?;
        let result =
            session.run_with(
                |r| match app.update_job(&job_id, |j| j.record_step(r.clone())) {
                    Some(Ok(())) => ControlFlow::Continue(()),
                    _ => ControlFlow::Break(()),
                },
            )?;
        Ok((result, session.metadata()))
    };
    let finished = match attempt() {
        Err(e) => Err(e.to_string()),
        Ok((result, metadata)) => match (&result.image, result.stop_reason) {
            (Some(img), StopReason::Converged | StopReason::MaxSteps) => img
                .encode_png()
                .map_err(|e| e.to_string())
                .and_then(|png| app.store().put_blob(&png).map_err(|e| e.to_string()))
                .map(|digest| (digest, outcome_of(&result, metadata))),
            _ => Err(result.failure.unwrap_or_else(|| "run aborted".into())),
        },
    };
    let done = match finished {
        Ok((digest, outcome)) => app.update_job(&job_id, |j| j.finish(digest, outcome)),
        // a cancelled job stays cancelled
        Err(message) => app.update_job(&job_id, |j| {
            if j.state == JobState::Running {
                j.fail(message)
            } else {
                Ok(())
            }
        }),
    };
    if let Some(Err(e)) = done {
        tracing::debug!("job {job_id} finished after leaving Running: {e}");
    }
}

async fn get_job(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<JobRecord>> {
    app.job(&id).map(Json).ok_or_else(|| no_job(&id))
}

async fn stream_progress(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let rx = app.subscribe(&id).ok_or_else(|| no_job(&id))?;
    let stream = futures::stream::unfold(Some((app, id, rx, 0usize)), |state| async move {
        let (app, id, mut rx, sent) = state?;
        loop {
            // mark seen before reading so no update between the two is lost
            rx.borrow_and_update();
            let (records, done) = app.progress_since(&id, sent)?;
            if !records.is_empty() {
                let steps = records
                    .iter()
                    .filter(|r| matches!(r, crate::ProgressRecord::Step(_)))
                    .count();
                let chunk: String = records.iter().map(|r| r.to_line()).collect();
                let next = (!done).then_some((app, id, rx, sent + steps));
                return Some((Ok::<_, Infallible>(chunk), next));
            }
            if rx.changed().await.is_err() {
                return None;
            }
        }
    });
    Ok((
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        Body::from_stream(stream),
    )
        .into_response())
}

async fn cancel_job(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<JobRecord>> {
    match app.update_job(&id, |j| j.cancel().map(|_| j.clone())) {
        None => Err(no_job(&id)),
        Some(Ok(record)) => Ok(Json(record)),
        Some(Err(e)) => Err(ApiError::new(StatusCode::CONFLICT, e)),
    }
}

async fn get_result(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = app.job(&id).ok_or_else(|| no_job(&id))?;
    let (JobState::Done, Some(digest)) = (job.state, &job.result) else {
        return Err(ApiError {
            status: StatusCode::CONFLICT,
            body: json!({
                "error": format!("job {id} is {:?}", job.state),
                "state": job.state,
                "failure": job.failure,
            }),
        });
    };
    let png = app.store().get_blob(digest).map_err(ApiError::internal)?;
    let stop = job
        .outcome
        .as_ref()
        .map(|o| format!("{:?}", o.stop_reason))
        .unwrap_or_default();
    Ok((
        [
            (header::CONTENT_TYPE, "image/png".to_string()),
            (header::HeaderName::from_static("x-stop-reason"), stop),
        ],
        png,
    )
        .into_response())
}
