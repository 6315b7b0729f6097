//! HTTP facade over the drag engine: sessions hold an uploaded image, point
//! pairs and a mask; edit jobs run on blocking workers and stream their step
//! reports as newline-delimited JSON.
//!
//! Routes:
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/sessions` | raw PNG or JPEG body |
//! | GET | `/sessions/{id}` | |
//! | PUT | `/sessions/{id}/points` | `{"points": [{"source": [x, y], "target": [x, y]}]}` |
//! | PUT | `/sessions/{id}/mask` | single-channel PNG, nonzero is editable |
//! | POST | `/sessions/{id}/edit` | optional `{"prompt": .., "engine": {..}}` |
//! | GET | `/jobs/{id}` | |
//! | GET | `/jobs/{id}/progress` | NDJSON stream |
//! | POST | `/jobs/{id}/cancel` | |
//! | GET | `/jobs/{id}/result` | PNG |

mod api;
pub mod job;
pub mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use rotdrag_core::case::PointPair;
use rotdrag_core::{Components, Result as CoreResult};
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

pub use crate::api::router;
pub use crate::job::{JobOutcome, JobRecord, JobState, ProgressRecord, TransitionError};
pub use crate::store::Store;

/// Builds a fresh engine stack for each job.
pub type ComponentsFactory = Arc<dyn Fn() -> CoreResult<Components> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Largest accepted upload body, in bytes.
    pub max_upload_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("rotdrag-data"),
            max_upload_bytes: 16 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub id: String,
    /// Blob digest of the uploaded image.
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub points: Vec<PointPair>,
    /// Blob digest of the mask PNG.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
}

struct JobEntry {
    record: JobRecord,
    changed: watch::Sender<()>,
}

struct Inner {
    config: ServiceConfig,
    store: Store,
    factory: ComponentsFactory,
    sessions: Mutex<HashMap<String, SessionRecord>>,
    jobs: Mutex<HashMap<String, JobEntry>>,
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

const RESTART_FAILURE: &str = "service restarted before the job finished";

impl AppState {
    /// Opens the store under `config.data_dir` and reloads persisted
    /// sessions and jobs. Jobs that were still queued or running are marked
    /// failed.
    pub fn open(config: ServiceConfig, factory: ComponentsFactory) -> std::io::Result<Self> {
        let store = Store::open(&config.data_dir)?;
        let sessions = store
            .load_records::<SessionRecord>("sessions")?
            .into_iter()
            .map(|s| (s.id.clone(), s))
            .collect();
        let mut jobs = HashMap::new();
        for mut record in store.load_records::<JobRecord>("jobs")? {
            if !record.state.is_terminal() {
                record
                    .fail(RESTART_FAILURE)
                    .expect("non-terminal jobs can fail");
                store.save_record("jobs", &record.id, &record)?;
            }
            let (changed, _) = watch::channel(());
            jobs.insert(record.id.clone(), JobEntry { record, changed });
        }
        Ok(Self {
            inner: Arc::new(Inner {
                config,
                store,
                factory,
                sessions: Mutex::new(sessions),
                jobs: Mutex::new(jobs),
            }),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn store(&self) -> &Store {
        &self.inner.store
    }

    pub fn session(&self, id: &str) -> Option<SessionRecord> {
        self.inner.sessions.lock().unwrap().get(id).cloned()
    }

    pub fn job(&self, id: &str) -> Option<JobRecord> {
        self.inner
            .jobs
            .lock()
            .unwrap()
            .get(id)
            .map(|e| e.record.clone())
    }

    fn put_session(&self, record: SessionRecord) -> std::io::Result<()> {
        self.inner
            .store
            .save_record("sessions", &record.id, &record)?;
        self.inner
            .sessions
            .lock()
            .unwrap()
            .insert(record.id.clone(), record);
        Ok(())
    }

    /// Applies `f` to a job, persisting and notifying subscribers when the
    /// state changed. Returns `None` for an unknown job.
    fn update_job<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut JobRecord) -> Result<T, TransitionError>,
    ) -> Option<Result<T, TransitionError>> {
        let mut jobs = self.inner.jobs.lock().unwrap();
        let entry = jobs.get_mut(id)?;
        let before = entry.record.state;
        let out = f(&mut entry.record);
        if out.is_ok() {
            if entry.record.state != before {
                if let Err(e) = self.inner.store.save_record("jobs", id, &entry.record) {
                    tracing::error!("persisting job {id}: {e}");
                }
            }
            entry.changed.send_replace(());
        }
        Some(out)
    }

    fn subscribe(&self, id: &str) -> Option<watch::Receiver<()>> {
        self.inner
            .jobs
            .lock()
            .unwrap()
            .get(id)
            .map(|e| e.changed.subscribe())
    }

    /// Steps from `from` onward, plus the end record once the job is terminal.
    fn progress_since(&self, id: &str, from: usize) -> Option<(Vec<ProgressRecord>, bool)> {
        let jobs = self.inner.jobs.lock().unwrap();
        let job = &jobs.get(id)?.record;
        let mut out: Vec<ProgressRecord> = job.trajectory[from.min(job.trajectory.len())..]
            .iter()
            .cloned()
            .map(ProgressRecord::Step)
            .collect();
        let done = job.state.is_terminal();
        if done {
            out.push(ProgressRecord::end_of(job));
        }
        Some((out, done))
    }
}

/// Serves the API on `addr` until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
