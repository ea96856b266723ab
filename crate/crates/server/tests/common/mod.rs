#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use medbrain_server::config::{BackendConfig, ServiceConfig};
use medbrain_server::http::{self, AppState};
use medbrain_server::sessions::SessionRegistry;

pub const MPOX: &str = "How to test for Mpox?";
pub const OTITIS: &str = "How to treat Otitis?";

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap()
}

/// The Mpox scenario: two database files and the Mpox rules.
pub fn mpox_config(session_dir: &Path) -> ServiceConfig {
    let mut cfg = ServiceConfig {
        listen: "127.0.0.1:0".into(),
        backend: BackendConfig::Scripted {
            rules: vec![fixture("mpox.rules")],
        },
        session_dir: session_dir.to_path_buf(),
        ..Default::default()
    };
    cfg.sources.offline_db_paths = vec![fixture("disease_db.txt"), fixture("monkeypox_db.txt")];
    cfg
}

pub fn state(cfg: &ServiceConfig) -> AppState {
    AppState {
        brain: Arc::new(cfg.build_brain().unwrap()),
        sessions: Arc::new(SessionRegistry::open(&cfg.session_dir).unwrap()),
    }
}

/// Serves `state` on an ephemeral port until the returned sender is
/// dropped or fired.
pub async fn start(state: AppState) -> (SocketAddr, tokio::sync::oneshot::Sender<()>, tokio::task::JoinHandle<()>) {
    let listener = http::bind("127.0.0.1:0".parse().unwrap()).await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let handle = tokio::spawn(async move {
        http::serve_on(listener, state, async {
            let _ = rx.await;
        })
        .await
        .unwrap();
    });
    (addr, tx, handle)
}
