mod common;

use std::sync::Arc;

use axum::http::{Method, StatusCode};
use common::{gated_factory, reference_factory, Gate, TestApp};
use rotdrag_core::{BinaryMask, Error, Image};
use rotdrag_service::{JobRecord, JobState, ProgressRecord};
use serde_json::json;

fn png(w: usize, h: usize) -> Vec<u8> {
    Image::filled(3, h, w, 0.5).encode_png().unwrap()
}

fn parse_progress(body: &[u8]) -> Vec<ProgressRecord> {
    std::str::from_utf8(body)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn assert_gap_free(records: &[ProgressRecord], job: &JobRecord) {
    let (last, steps) = records.split_last().unwrap();
    assert_eq!(last, &ProgressRecord::end_of(job));
    for (i, r) in steps.iter().enumerate() {
        match r {
            ProgressRecord::Step(s) => assert_eq!(s, &job.trajectory[i]),
            other => panic!("unexpected {other:?}"),
        }
    }
    assert_eq!(steps.len(), job.trajectory.len());
}

#[tokio::test]
async fn uploads_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let app = TestApp::with_limit(dir.path(), reference_factory(), 4096);
    let (s, v) = app.json(Method::POST, "/sessions", png(64, 64)).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(
        (v["width"].as_u64(), v["height"].as_u64()),
        (Some(64), Some(64))
    );
    let id = v["id"].as_str().unwrap();
    let (s, got) = app.json(Method::GET, &format!("/sessions/{id}"), "").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(got, v);

    let (s, _) = app.send(Method::POST, "/sessions", vec![7u8; 10]).await;
    assert_eq!(s, StatusCode::UNSUPPORTED_MEDIA_TYPE);
    let (s, _) = app.send(Method::POST, "/sessions", vec![0u8; 5000]).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    let (s, _) = app.send(Method::GET, "/sessions/nope", "").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn points_and_masks_are_checked_against_the_image() {
    let dir = tempfile::tempdir().unwrap();
    let app = TestApp::new(dir.path(), reference_factory());
    let (_, v) = app.json(Method::POST, "/sessions", png(32, 24)).await;
    let id = v["id"].as_str().unwrap().to_string();
    let uri = format!("/sessions/{id}/points");

    let bad = json!({"points": [{"source": [-1, 5], "target": [3, 3]}]}).to_string();
    assert_eq!(
        app.send(Method::PUT, &uri, bad).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let bad = json!({"points": [{"source": [1, 5], "target": [3, 24]}]}).to_string();
    assert_eq!(
        app.send(Method::PUT, &uri, bad).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let bad = json!({"points": [{"source": [1, 5]}]}).to_string();
    assert_eq!(
        app.send(Method::PUT, &uri, bad).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        app.send(Method::PUT, "/sessions/nope/points", "{\"points\": []}")
            .await
            .0,
        StatusCode::NOT_FOUND
    );

    let good = json!({"points": [{"source": [3, 4], "target": [10.5, 20]}]}).to_string();
    let (s, first) = app.send(Method::PUT, &uri, good.clone()).await;
    assert_eq!(s, StatusCode::OK);
    let echoed: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(
        echoed["points"],
        json!([{"source": [3.0, 4.0], "target": [10.5, 20.0]}])
    );
    assert!(std::str::from_utf8(&first).unwrap().contains("[3.0,4.0]"));
    let (s, second) = app.send(Method::PUT, &uri, good).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(first, second);

    let mask_uri = format!("/sessions/{id}/mask");
    let wrong = BinaryMask::full(32, 32).encode_png().unwrap();
    assert_eq!(
        app.send(Method::PUT, &mask_uri, wrong).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        app.send(Method::PUT, &mask_uri, vec![1u8; 10]).await.0,
        StatusCode::UNSUPPORTED_MEDIA_TYPE
    );
    let right = BinaryMask::from_fn(24, 32, |y, _| y > 3)
        .encode_png()
        .unwrap();
    let (s, a) = app.send(Method::PUT, &mask_uri, right.clone()).await;
    assert_eq!(s, StatusCode::OK);
    let (_, b) = app.send(Method::PUT, &mask_uri, right).await;
    assert_eq!(a, b);
    assert_eq!(
        app.send(Method::PUT, "/sessions/nope/mask", png(2, 2))
            .await
            .0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn incomplete_sessions_cannot_start() {
    let dir = tempfile::tempdir().unwrap();
    let app = TestApp::new(dir.path(), reference_factory());
    let (_, v) = app.json(Method::POST, "/sessions", png(16, 16)).await;
    let id = v["id"].as_str().unwrap().to_string();
    let edit = format!("/sessions/{id}/edit");
    assert_eq!(
        app.send(Method::POST, &edit, "").await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let pts = json!({"points": [{"source": [3, 4], "target": [6, 4]}]}).to_string();
    app.send(Method::PUT, &format!("/sessions/{id}/points"), pts)
        .await;
    let (s, v) = app.json(Method::POST, &edit, "").await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("mask"));
    assert_eq!(
        app.send(Method::POST, "/sessions/nope/edit", "").await.0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn a_session_runs_one_job_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let gate = Arc::new(Gate::default());
    let app = TestApp::new(dir.path(), gated_factory(gate.clone()));
    let id = app.arc_session().await;
    let edit = format!("/sessions/{id}/edit");

    let (s, job) = app.json(Method::POST, &edit, "").await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!(job["state"], "Queued");
    let job_id = job["id"].as_str().unwrap().to_string();
    let (s, _) = app.json(Method::POST, &edit, "").await;
    assert_eq!(s, StatusCode::CONFLICT);

    app.wait_for(&job_id, |s| s == JobState::Running).await;
    assert_eq!(
        app.send(Method::POST, &edit, "").await.0,
        StatusCode::CONFLICT
    );
    let (s, v) = app
        .json(Method::GET, &format!("/jobs/{job_id}/result"), "")
        .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["state"], "Running");

    // a subscriber attached mid-run sees every step exactly once
    let router = app.router.clone();
    let uri = format!("/jobs/{job_id}/progress");
    let reader = tokio::spawn(async move {
        use http_body_util::BodyExt;
        use tower::ServiceExt;
        let req = axum::http::Request::get(uri)
            .body(axum::body::Body::empty())
            .unwrap();
        let resp = router.oneshot(req).await.unwrap();
        resp.into_body().collect().await.unwrap().to_bytes()
    });
    gate.open();
    let done = app.wait_for(&job_id, JobState::is_terminal).await;
    assert_eq!(done.state, JobState::Done);
    assert_gap_free(&parse_progress(&reader.await.unwrap()), &done);

    // the session is free again
    let (s, second) = app.json(Method::POST, &edit, "").await;
    assert_eq!(s, StatusCode::ACCEPTED);
    app.wait_for(second["id"].as_str().unwrap(), JobState::is_terminal)
        .await;
}

#[tokio::test]
async fn finished_jobs_serve_results_and_backlog() {
    let dir = tempfile::tempdir().unwrap();
    let app = TestApp::new(dir.path(), reference_factory());
    let id = app.arc_session().await;
    let body = json!({"prompt": "a swinging limb", "engine": {"max_steps": 120}}).to_string();
    let (s, job) = app
        .json(Method::POST, &format!("/sessions/{id}/edit"), body)
        .await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job_id = job["id"].as_str().unwrap();
    let done = app.wait_for(job_id, JobState::is_terminal).await;
    assert_eq!(done.state, JobState::Done, "{:?}", done.failure);
    let outcome = done.outcome.as_ref().unwrap();
    assert_eq!(outcome.metadata.params.max_steps, 120);
    assert_eq!(outcome.final_distances.len(), 3);

    let (s, bytes) = app
        .send(Method::GET, &format!("/jobs/{job_id}/progress"), "")
        .await;
    assert_eq!(s, StatusCode::OK);
    let records = parse_progress(&bytes);
    assert_gap_free(&records, &done);
    assert!(matches!(
        records.last(),
        Some(ProgressRecord::End {
            state: JobState::Done,
            ..
        })
    ));

    let (s, png) = app
        .send(Method::GET, &format!("/jobs/{job_id}/result"), "")
        .await;
    assert_eq!(s, StatusCode::OK);
    let img = Image::decode(&png).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));

    let (s, v) = app.json(Method::GET, &format!("/jobs/{job_id}"), "").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["state"], "Done");
    assert_eq!(
        app.send(Method::POST, &format!("/jobs/{job_id}/cancel"), "")
            .await
            .0,
        StatusCode::CONFLICT
    );
}

#[tokio::test]
async fn failures_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let factory: rotdrag_service::ComponentsFactory =
        Arc::new(|| Err(Error::BackendUnavailable("no weights here".into())));
    let app = TestApp::new(dir.path(), factory);
    let id = app.arc_session().await;
    let (_, job) = app
        .json(Method::POST, &format!("/sessions/{id}/edit"), "")
        .await;
    let job_id = job["id"].as_str().unwrap();
    let rec = app.wait_for(job_id, JobState::is_terminal).await;
    assert_eq!(rec.state, JobState::Failed);
    let (s, v) = app
        .json(Method::GET, &format!("/jobs/{job_id}/result"), "")
        .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(v["failure"].as_str().unwrap().contains("no weights here"));

    let bad = json!({"engine": {"r1": 0}}).to_string();
    let (s, _) = app
        .json(Method::POST, &format!("/sessions/{id}/edit"), bad)
        .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    for uri in ["/jobs/nope", "/jobs/nope/progress", "/jobs/nope/result"] {
        assert_eq!(
            app.send(Method::GET, uri, "").await.0,
            StatusCode::NOT_FOUND,
            "{uri}"
        );
    }
    assert_eq!(
        app.send(Method::POST, "/jobs/nope/cancel", "").await.0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn cancelling_stops_a_running_job() {
    let dir = tempfile::tempdir().unwrap();
    let gate = Arc::new(Gate::default());
    let app = TestApp::new(dir.path(), gated_factory(gate.clone()));
    let id = app.arc_session().await;
    let (_, job) = app
        .json(Method::POST, &format!("/sessions/{id}/edit"), "")
        .await;
    let job_id = job["id"].as_str().unwrap().to_string();
    app.wait_for(&job_id, |s| s == JobState::Running).await;
    let (s, v) = app
        .json(Method::POST, &format!("/jobs/{job_id}/cancel"), "")
        .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["state"], "Cancelled");
    gate.open();
    // the worker notices on its next step and leaves the job alone
    tokio::time::sleep(std::time::Duration::from_millis(200)).await;
    let rec = app.state.job(&job_id).unwrap();
    assert_eq!(rec.state, JobState::Cancelled);
    let (_, bytes) = app
        .send(Method::GET, &format!("/jobs/{job_id}/progress"), "")
        .await;
    assert!(matches!(
        parse_progress(&bytes).last(),
        Some(ProgressRecord::End {
            state: JobState::Cancelled,
            ..
        })
    ));
}

#[tokio::test]
async fn state_survives_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (session, done_job) = {
        let app = TestApp::new(dir.path(), reference_factory());
        let id = app.arc_session().await;
        let (_, job) = app
            .json(Method::POST, &format!("/sessions/{id}/edit"), "")
            .await;
        let job_id = job["id"].as_str().unwrap().to_string();
        app.wait_for(&job_id, JobState::is_terminal).await;
        (
            app.state.session(&id).unwrap(),
            app.state.job(&job_id).unwrap(),
        )
    };
    // a job persisted mid-run
    let mut stale = JobRecord::new("stale", session.id.clone());
    stale.start().unwrap();
    rotdrag_service::Store::open(dir.path())
        .unwrap()
        .save_record("jobs", "stale", &stale)
        .unwrap();

    let app = TestApp::new(dir.path(), reference_factory());
    assert_eq!(app.state.session(&session.id).unwrap(), session);
    let job = app.state.job(&done_job.id).unwrap();
    assert_eq!(job.state, JobState::Done);
    assert_eq!(job.trajectory, done_job.trajectory);
    assert_eq!(
        app.send(Method::GET, &format!("/jobs/{}/result", job.id), "")
            .await
            .0,
        StatusCode::OK
    );
    assert_eq!(app.state.job("stale").unwrap().state, JobState::Failed);
    // and the session can start again
    let (s, _) = app
        .json(Method::POST, &format!("/sessions/{}/edit", session.id), "")
        .await;
    assert_eq!(s, StatusCode::ACCEPTED);
}
