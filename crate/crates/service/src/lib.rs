//! HTTP+JSON service over the engine: banks, sessions, pins, asynchronous
//! runs and content-addressed artifacts, all under `/v1`.
//!
//! State lives on disk under the data directory:
//!
//! ```text
//! banks.json           bank id -> directory
//! sessions/            one JSON file per session
//! runs/<run id>/       engine run directories
//! jobs/<run id>.json   terminal run views
//! artifacts/<sha>.png  immutable copies of run images
//! ```

pub mod error;
mod routes;
pub mod views;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::Router;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

use dvp_core::bank::ThemeBank;
use dvp_core::engine::{Backends, Engine, EngineConfig, SessionStore};
use dvp_core::fsutil::write_atomic;
use dvp_core::generation::JobStatus;

pub use error::ApiError;
use views::RunView;

pub const DEFAULT_ADDR: &str = "127.0.0.1:8750";
pub const DEFAULT_MAX_CONCURRENT_RUNS: usize = 2;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Runs executing at once; further runs wait as `pending`.
    pub max_concurrent_runs: usize,
    /// Allowed browser origin; `None` allows any.
    pub cors_origin: Option<String>,
    /// Starting configuration for new sessions.
    pub defaults: EngineConfig,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            max_concurrent_runs: DEFAULT_MAX_CONCURRENT_RUNS,
            cors_origin: None,
            defaults: EngineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BankRecord {
    dir: PathBuf,
    theme: String,
}

/// Shared handler state. Cheap to clone.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

struct Inner {
    config: ServiceConfig,
    engine: Engine,
    store: SessionStore,
    banks: Mutex<BTreeMap<String, BankRecord>>,
    live_runs: Mutex<HashMap<String, RunView>>,
    session_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    pool: Semaphore,
    next_run: AtomicU64,
}

impl AppState {
    /// Opens (or initialises) the data directory. Runs left unfinished by a
    /// previous process are marked failed.
    pub fn open(config: ServiceConfig, backends: Backends) -> Result<Self, ApiError> {
        let root = &config.data_dir;
        std::fs::create_dir_all(root.join("jobs"))?;
        std::fs::create_dir_all(root.join("artifacts"))?;
        let store = SessionStore::open(root.join("sessions"))?;
        let banks = match std::fs::read(root.join("banks.json")) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| ApiError::internal(format!("banks.json: {e}")))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        let mut max_run = 0;
        for entry in std::fs::read_dir(root.join("jobs"))? {
            let path = entry?.path();
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            if let Some(n) = id.strip_prefix("run-").and_then(|n| n.parse::<u64>().ok()) {
                max_run = max_run.max(n);
            }
            if let Ok(mut view) = serde_json::from_slice::<RunView>(&std::fs::read(&path)?) {
                if !view.status.is_terminal() {
                    view.status = JobStatus::Failed;
                    view.error = Some(ApiError::new("Interrupted", "service stopped before the run finished"));
                    write_atomic(&path, &serde_json::to_vec_pretty(&view).unwrap())?;
                }
            }
        }
        let engine = Engine::new(backends, root.join("runs"));
        Ok(Self(Arc::new(Inner {
            pool: Semaphore::new(config.max_concurrent_runs.max(1)),
            config,
            engine,
            store,
            banks: Mutex::new(banks),
            live_runs: Mutex::new(HashMap::new()),
            session_locks: Mutex::new(HashMap::new()),
            next_run: AtomicU64::new(max_run + 1),
        })))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.0.config
    }

    pub fn engine(&self) -> &Engine {
        &self.0.engine
    }

    pub fn store(&self) -> &SessionStore {
        &self.0.store
    }

    fn data_dir(&self) -> &Path {
        &self.0.config.data_dir
    }

    fn register_bank(&self, bank: &ThemeBank) -> Result<String, ApiError> {
        let id = bank_id_for(bank.root());
        let mut banks = self.0.banks.lock().unwrap();
        banks.insert(
            id.clone(),
            BankRecord {
                dir: bank.root().to_path_buf(),
                theme: bank.manifest().theme_name.clone(),
            },
        );
        let bytes = serde_json::to_vec_pretty(&*banks).map_err(|e| ApiError::internal(e.to_string()))?;
        write_atomic(&self.data_dir().join("banks.json"), &bytes)?;
        Ok(id)
    }

    fn open_bank(&self, bank_id: &str) -> Result<ThemeBank, ApiError> {
        let dir = self
            .0
            .banks
            .lock()
            .unwrap()
            .get(bank_id)
            .map(|r| r.dir.clone())
            .ok_or_else(|| ApiError::not_found("UnknownBank", format!("bank {bank_id}")))?;
        Ok(ThemeBank::open(&dir)?)
    }

    fn session_lock(&self, session_id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.0
            .session_locks
            .lock()
            .unwrap()
            .entry(session_id.to_string())
            .or_default()
            .clone()
    }

    fn allocate_run_id(&self) -> String {
        format!("run-{:06}", self.0.next_run.fetch_add(1, Ordering::SeqCst))
    }

    fn job_path(&self, run_id: &str) -> Option<PathBuf> {
        let ok = !run_id.is_empty()
            && run_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        ok.then(|| self.data_dir().join("jobs").join(format!("{run_id}.json")))
    }

    fn set_live(&self, view: RunView) {
        self.0.live_runs.lock().unwrap().insert(view.run_id.clone(), view);
    }

    /// Persists a terminal view and drops it from memory.
    fn finish(&self, view: RunView) -> Result<(), ApiError> {
        let path = self.job_path(&view.run_id).expect("allocated run ids are valid");
        let bytes = serde_json::to_vec_pretty(&view).map_err(|e| ApiError::internal(e.to_string()))?;
        write_atomic(&path, &bytes)?;
        self.0.live_runs.lock().unwrap().remove(&view.run_id);
        Ok(())
    }

    fn run_view(&self, run_id: &str) -> Result<RunView, ApiError> {
        if let Some(v) = self.0.live_runs.lock().unwrap().get(run_id) {
            return Ok(v.clone());
        }
        let unknown = || ApiError::not_found("UnknownJob", format!("run {run_id}"));
        let path = self.job_path(run_id).ok_or_else(unknown)?;
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| ApiError::internal(e.to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(unknown()),
            Err(e) => Err(e.into()),
        }
    }

    /// Copies `path` into the artifact store and returns its URL.
    fn publish_artifact(&self, path: &Path) -> Result<String, ApiError> {
        let bytes = std::fs::read(path)?;
        let sha = hex::encode(Sha256::digest(&bytes));
        let dest = self.artifact_path(&sha).expect("hex digest is a valid name");
        if !dest.exists() {
            write_atomic(&dest, &bytes)?;
        }
        Ok(views::artifact_url(&sha))
    }

    fn artifact_path(&self, sha: &str) -> Option<PathBuf> {
        let ok = sha.len() == 64 && sha.chars().all(|c| c.is_ascii_digit() || ('a'..='f').contains(&c));
        ok.then(|| self.data_dir().join("artifacts").join(format!("{sha}.png")))
    }
}

/// Stable id for a bank directory.
pub fn bank_id_for(dir: &Path) -> String {
    let h = Sha256::digest(dir.to_string_lossy().as_bytes());
    format!("b-{}", &hex::encode(h)[..12])
}

pub fn router(state: AppState) -> Router {
    routes::router(state)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}
