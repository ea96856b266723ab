//! Chat sessions persisted as append-only JSON Lines logs, one file per
//! session, replayed on startup.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::AsyncWriteExt;
use tokio::sync::{Mutex, RwLock};

use medbrain_core::orchestrator::{PipelineError, Turn};
use medbrain_core::{Brain, Session};

const LOG_EXTENSION: &str = "jsonl";

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session `{0}` not found")]
    NotFound(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("session log {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("session log {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// One line of a session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Created { session_id: String, timestamp: DateTime<Utc> },
    Turn(Turn),
}

struct Entry {
    session: Session,
    path: PathBuf,
}

/// All sessions, keyed by id. Each session sits behind its own lock, so one
/// session answers one message at a time while others proceed.
pub struct SessionRegistry {
    dir: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Mutex<Entry>>>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SessionError + '_ {
    move |source| SessionError::Io { path: path.to_path_buf(), source }
}

impl SessionRegistry {
    /// Creates `dir` if needed and replays every log in it.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, SessionError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut sessions = HashMap::new();
        for item in std::fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = item.map_err(io_err(&dir))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some(LOG_EXTENSION) {
                continue;
            }
            let Some(session) = replay(&path)? else {
                tracing::warn!(path = %path.display(), "skipping session log without events");
                continue;
            };
            sessions.insert(
                session.session_id.clone(),
                Arc::new(Mutex::new(Entry { session, path })),
            );
        }
        Ok(Self {
            dir,
            sessions: RwLock::new(sessions),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub async fn len(&self) -> usize {
        self.sessions.read().await.len()
    }

    pub async fn is_empty(&self) -> bool {
        self.len().await == 0
    }

    pub async fn create(&self) -> Result<String, SessionError> {
        let session = Session::new();
        let id = session.session_id.clone();
        let path = self.dir.join(format!("{id}.{LOG_EXTENSION}"));
        let event = SessionEvent::Created {
            session_id: id.clone(),
            timestamp: Utc::now(),
        };
        append(&path, &event, true).await?;
        self.sessions
            .write()
            .await
            .insert(id.clone(), Arc::new(Mutex::new(Entry { session, path })));
        Ok(id)
    }

    pub async fn get(&self, id: &str) -> Option<Session> {
        let entry = self.sessions.read().await.get(id).cloned()?;
        let guard = entry.lock().await;
        Some(guard.session.clone())
    }

    /// Answers `question` in the session and appends the turn to its log
    /// before returning it. A failed answer leaves the log untouched.
    pub async fn post(
        &self,
        id: &str,
        brain: &Brain,
        question: &str,
        use_brain: bool,
    ) -> Result<Turn, SessionError> {
        let entry = self
            .sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(id.to_string()))?;
        let mut guard = entry.lock().await;
        let answer = brain.ask(question, use_brain).await?;
        let turn = Turn {
            question: question.to_string(),
            answer,
            timestamp: Utc::now(),
        };
        append(&guard.path, &SessionEvent::Turn(turn.clone()), false).await?;
        guard.session.turns.push(turn.clone());
        Ok(turn)
    }
}

async fn append(path: &Path, event: &SessionEvent, create: bool) -> Result<(), SessionError> {
    let mut line = serde_json::to_vec(event).expect("session events serialize");
    line.push(b'\n');
    let mut file = tokio::fs::OpenOptions::new()
        .append(true)
        .create_new(create)
        .open(path)
        .await
        .map_err(io_err(path))?;
    file.write_all(&line).await.map_err(io_err(path))?;
    file.sync_data().await.map_err(io_err(path))?;
    Ok(())
}

/// Rebuilds a session from its log. A final line without a newline is a
/// write cut short by a crash; it is cut off so later appends start on a
/// fresh line.
fn replay(path: &Path) -> Result<Option<Session>, SessionError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let corrupt = |message: String| SessionError::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    let complete = match text.rfind('\n') {
        Some(end) => &text[..=end],
        None => "",
    };
    if complete.len() < text.len() {
        tracing::warn!(path = %path.display(), "dropping truncated final line in session log");
        let file = std::fs::OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        file.set_len(complete.len() as u64).map_err(io_err(path))?;
    }
    let mut session: Option<Session> = None;
    for (idx, line) in complete.lines().enumerate() {
        let event: SessionEvent =
            serde_json::from_str(line).map_err(|e| corrupt(format!("line {}: {e}", idx + 1)))?;
        match (event, session.as_mut()) {
            (SessionEvent::Created { session_id, .. }, None) => session = Some(Session::with_id(session_id)),
            (SessionEvent::Turn(turn), Some(s)) => s.turns.push(turn),
            (SessionEvent::Created { .. }, Some(_)) => {
                return Err(corrupt(format!("line {}: second created event", idx + 1)))
            }
            (SessionEvent::Turn(_), None) => {
                return Err(corrupt("turn before created event".into()))
            }
        }
    }
    Ok(session)
}
