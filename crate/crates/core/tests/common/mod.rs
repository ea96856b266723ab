#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::PathBuf;

use medbrain_core::kb_store::{documents_from_records, parse_disease_db, Document};
use medbrain_core::ScriptedBackend;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn corpus(files: &[&str]) -> Vec<Document> {
    let mut records = Vec::new();
    for f in files {
        records.extend(parse_disease_db(&read_fixture(f)).unwrap());
    }
    documents_from_records(&records).unwrap()
}

pub fn rules(name: &str) -> ScriptedBackend {
    ScriptedBackend::from_file(&fixture(name)).unwrap()
}

/// Serves `router` on an ephemeral localhost port for the life of the test
/// runtime.
pub async fn serve(router: axum::Router) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, router).await.unwrap();
    });
    addr
}

/// An address nothing listens on.
pub fn dead_address() -> String {
    let sock = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = sock.local_addr().unwrap();
    drop(sock);
    format!("http://{addr}")
}
