//! HTTP service for the hole-selection benchmark: people pick holes one at a
//! time and see each hole's CTF only after picking it; a trained policy can
//! be run on the same atlas for comparison. All routes live under `/v1`.

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};

use axum::Router;
use cryoplan::atlas::Dataset;
use cryoplan::dqn::Policy;
use tokio::net::TcpListener;
use tower_http::cors::CorsLayer;

pub mod api;
pub mod session;
pub mod store;

pub use api::ApiError;
pub use session::{Event, Mode, Selection, Session};
pub use store::{EventLog, StoreError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Selection budgets a session may use unless `any_budget` is set.
    pub budgets: Vec<u32>,
    pub any_budget: bool,
    /// Hide square and grid context; only patches are listed.
    pub patches_only: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            budgets: vec![50, 100],
            any_budget: false,
            patches_only: false,
        }
    }
}

/// Shared server state. Each session sits behind its own lock so that
/// selections on one session are serialized without blocking the others.
pub struct AppState {
    pub cfg: ServiceConfig,
    pub datasets: BTreeMap<String, Arc<Dataset>>,
    pub policy: Option<Arc<Policy>>,
    pub log: EventLog,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
}

impl AppState {
    /// Restores every session found in `log`.
    pub fn new(
        cfg: ServiceConfig,
        datasets: BTreeMap<String, Arc<Dataset>>,
        policy: Option<Policy>,
        log: EventLog,
    ) -> Result<Self, StoreError> {
        let sessions = log
            .load_all()?
            .into_iter()
            .map(|s| (s.id.clone(), Arc::new(Mutex::new(s))))
            .collect();
        Ok(Self {
            cfg,
            datasets,
            policy: policy.map(Arc::new),
            log,
            sessions: RwLock::new(sessions),
        })
    }

    pub fn session(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        self.sessions.read().expect("session map lock").get(id).cloned()
    }

    pub fn insert(&self, s: Session) -> Arc<Mutex<Session>> {
        let slot = Arc::new(Mutex::new(s));
        let id = slot.lock().expect("fresh lock").id.clone();
        self.sessions.write().expect("session map lock").insert(id, slot.clone());
        slot
    }

    /// Snapshots of all sessions.
    pub fn snapshot(&self) -> Vec<Session> {
        let slots: Vec<_> = self.sessions.read().expect("session map lock").values().cloned().collect();
        slots
            .into_iter()
            .map(|s| s.lock().expect("session lock").clone())
            .collect()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .nest("/v1", api::routes())
        .with_state(state)
        .layer(CorsLayer::permissive())
}

/// Serves until `shutdown` resolves, letting open requests finish.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Binds `addr`; fails when the port is taken.
pub async fn bind(addr: SocketAddr) -> std::io::Result<TcpListener> {
    TcpListener::bind(addr).await
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
