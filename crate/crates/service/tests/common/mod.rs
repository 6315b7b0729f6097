#![allow(dead_code)]

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use axum::body::{Body, Bytes};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rotdrag_core::synth::arc_drag_config;
use rotdrag_core::{
    Components, Denoiser, LatentCode, Result as CoreResult, Tensor, ZeroNoiseDenoiser,
};
use rotdrag_service::{AppState, ComponentsFactory, JobRecord, JobState, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

/// A zero-noise denoiser that blocks every call until opened.
#[derive(Default)]
pub struct Gate {
    open: Mutex<bool>,
    cv: Condvar,
}

impl Gate {
    pub fn open(&self) {
        *self.open.lock().unwrap() = true;
        self.cv.notify_all();
    }

    fn wait(&self) {
        let mut open = self.open.lock().unwrap();
        while !*open {
            open = self.cv.wait(open).unwrap();
        }
    }
}

pub struct GatedDenoiser(pub Arc<Gate>);

impl Denoiser for GatedDenoiser {
    fn name(&self) -> &str {
        "gated-zero-noise"
    }

    fn predict_noise(&self, latent: &LatentCode, t: usize, prompt: &str) -> CoreResult<Tensor> {
        self.0.wait();
        ZeroNoiseDenoiser.predict_noise(latent, t, prompt)
    }

    fn noise_vjp(
        &self,
        latent: &LatentCode,
        t: usize,
        prompt: &str,
        cotangent: &Tensor,
    ) -> CoreResult<Tensor> {
        ZeroNoiseDenoiser.noise_vjp(latent, t, prompt, cotangent)
    }
}

pub fn reference_factory() -> ComponentsFactory {
    Arc::new(|| Ok(Components::reference()))
}

pub fn gated_factory(gate: Arc<Gate>) -> ComponentsFactory {
    Arc::new(move || {
        Ok(Components {
            denoiser: Arc::new(GatedDenoiser(gate.clone())),
            ..Components::reference()
        })
    })
}

pub struct TestApp {
    pub state: AppState,
    pub router: Router,
}

impl TestApp {
    pub fn new(dir: &std::path::Path, factory: ComponentsFactory) -> Self {
        Self::with_limit(dir, factory, 1 << 20)
    }

    pub fn with_limit(dir: &std::path::Path, factory: ComponentsFactory, limit: usize) -> Self {
        let config = ServiceConfig {
            data_dir: dir.to_path_buf(),
            max_upload_bytes: limit,
        };
        let state = AppState::open(config, factory).unwrap();
        let router = rotdrag_service::router(state.clone());
        Self { state, router }
    }

    pub async fn send(
        &self,
        method: Method,
        uri: &str,
        body: impl Into<Body>,
    ) -> (StatusCode, Bytes) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .body(body.into())
            .unwrap();
        let resp = self.router.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        (status, resp.into_body().collect().await.unwrap().to_bytes())
    }

    pub async fn json(
        &self,
        method: Method,
        uri: &str,
        body: impl Into<Body>,
    ) -> (StatusCode, Value) {
        let (s, b) = self.send(method, uri, body).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    /// Uploads the arc fixture with its points and mask; returns the session id.
    pub async fn arc_session(&self) -> String {
        let cfg = arc_drag_config(30.0);
        let (s, v) = self
            .json(Method::POST, "/sessions", cfg.image.encode_png().unwrap())
            .await;
        assert_eq!(s, StatusCode::CREATED);
        let id = v["id"].as_str().unwrap().to_string();
        let points: Vec<Value> = cfg
            .sources
            .iter()
            .zip(&cfg.targets)
            .map(|(s, t)| json!({"source": [s.x, s.y], "target": [t.x, t.y]}))
            .collect();
        let body = json!({ "points": points }).to_string();
        let (s, _) = self
            .json(Method::PUT, &format!("/sessions/{id}/points"), body)
            .await;
        assert_eq!(s, StatusCode::OK);
        let (s, _) = self
            .json(
                Method::PUT,
                &format!("/sessions/{id}/mask"),
                cfg.mask.encode_png().unwrap(),
            )
            .await;
        assert_eq!(s, StatusCode::OK);
        id
    }

    pub async fn wait_for(&self, job: &str, pred: impl Fn(JobState) -> bool) -> JobRecord {
        let started = Instant::now();
        loop {
            let rec = self.state.job(job).unwrap();
            if pred(rec.state) {
                return rec;
            }
            assert!(
                started.elapsed() < Duration::from_secs(60),
                "job stuck in {:?}",
                rec.state
            );
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
    }
}
