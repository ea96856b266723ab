//! The question answering pipeline: keyword extraction, retrieval,
//! per-section selection and final answer, plus chat sessions.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb_store::{ArticleSource, Document, HttpArticleSource, KbError, KnowledgeSourceConfig};
use crate::llm_gateway::{CompletionBackend, GatewayError, GenerationParams};
use crate::prompt_kit::{self, PromptError};
use crate::retriever::{retrieve_top_n, RetrievalConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    KeywordExtraction,
    KnowledgeSelection,
    FinalAnswer,
    Fallback,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::KeywordExtraction => "keyword extraction",
            Stage::KnowledgeSelection => "knowledge selection",
            Stage::FinalAnswer => "final answer",
            Stage::Fallback => "fallback answer",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{stage} failed: {source}")]
    Gateway {
        stage: Stage,
        #[source]
        source: GatewayError,
    },
    #[error("knowledge source: {0}")]
    Source(#[from] KbError),
    #[error("session `{0}` not found")]
    SessionNotFound(String),
}

impl PipelineError {
    fn at(stage: Stage) -> impl FnOnce(GatewayError) -> Self {
        move |source| PipelineError::Gateway { stage, source }
    }
}

impl From<PromptError> for PipelineError {
    fn from(e: PromptError) -> Self {
        PipelineError::InvalidArgument(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub doc_id: String,
    pub section_index: usize,
    pub score: u64,
    pub selected_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub keywords: Vec<String>,
    pub evidence: Vec<Evidence>,
    /// True iff the answer was produced from retrieved evidence.
    pub used_brain: bool,
}

/// Everything needed to answer questions: the corpus, retrieval settings, the
/// completion backend and an optional external article source.
#[derive(Clone)]
pub struct Brain {
    corpus: Arc<Vec<Document>>,
    retrieval: RetrievalConfig,
    sources: KnowledgeSourceConfig,
    gateway: Arc<dyn CompletionBackend>,
    articles: Option<Arc<dyn ArticleSource>>,
    params: GenerationParams,
}

impl fmt::Debug for Brain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Brain")
            .field("documents", &self.corpus.len())
            .field("retrieval", &self.retrieval)
            .field("sources", &self.sources)
            .field("backend", &self.gateway.backend_id())
            .finish()
    }
}

impl Brain {
    pub fn new(corpus: Vec<Document>, gateway: Arc<dyn CompletionBackend>) -> Self {
        Self {
            corpus: Arc::new(corpus),
            retrieval: RetrievalConfig::default(),
            sources: KnowledgeSourceConfig::default(),
            gateway,
            articles: None,
            params: GenerationParams::default(),
        }
    }

    pub fn with_retrieval(mut self, cfg: RetrievalConfig) -> Self {
        self.retrieval = cfg;
        self
    }

    pub fn with_params(mut self, params: GenerationParams) -> Self {
        self.params = params;
        self
    }

    /// Uses an HTTP article source when `sources.external_enabled`.
    pub fn with_sources(mut self, sources: KnowledgeSourceConfig) -> Result<Self, KbError> {
        sources.validate()?;
        self.articles = if sources.external_enabled {
            Some(Arc::new(HttpArticleSource::from_config(&sources)?))
        } else {
            None
        };
        self.sources = sources;
        Ok(self)
    }

    /// Installs a custom article source. It is consulted only while
    /// `sources.external_enabled` is set.
    pub fn with_article_source(
        mut self,
        sources: KnowledgeSourceConfig,
        articles: Arc<dyn ArticleSource>,
    ) -> Self {
        self.sources = sources;
        self.articles = Some(articles);
        self
    }

    pub fn corpus(&self) -> &[Document] {
        &self.corpus
    }

    pub fn retrieval(&self) -> &RetrievalConfig {
        &self.retrieval
    }

    pub fn gateway(&self) -> &Arc<dyn CompletionBackend> {
        &self.gateway
    }

    pub async fn answer(&self, question: &str) -> Result<Answer, PipelineError> {
        let articles = if self.sources.external_enabled {
            self.articles.as_deref()
        } else {
            None
        };
        run_pipeline(
            question,
            &self.corpus,
            &self.retrieval,
            self.gateway.as_ref(),
            articles,
            &self.params,
        )
        .await
    }

    /// Sends the raw question straight to the model.
    pub async fn answer_without_brain(&self, question: &str) -> Result<Answer, PipelineError> {
        check_question(question)?;
        prior_knowledge_answer(question, Vec::new(), self.gateway.as_ref(), &self.params).await
    }

    pub async fn ask(&self, question: &str, use_brain: bool) -> Result<Answer, PipelineError> {
        if use_brain {
            self.answer(question).await
        } else {
            self.answer_without_brain(question).await
        }
    }
}

/// Runs the full pipeline once with default generation parameters.
pub async fn answer_with_brain(
    question: &str,
    corpus: &[Document],
    cfg: &RetrievalConfig,
    gateway: &dyn CompletionBackend,
    sources: &KnowledgeSourceConfig,
) -> Result<Answer, PipelineError> {
    sources.validate()?;
    let http = if sources.external_enabled {
        Some(HttpArticleSource::from_config(sources)?)
    } else {
        None
    };
    run_pipeline(
        question,
        corpus,
        cfg,
        gateway,
        http.as_ref().map(|s| s as &dyn ArticleSource),
        &GenerationParams::default(),
    )
    .await
}

fn check_question(question: &str) -> Result<(), PipelineError> {
    if question.trim().is_empty() {
        Err(PipelineError::InvalidArgument("question is empty".into()))
    } else {
        Ok(())
    }
}

async fn prior_knowledge_answer(
    question: &str,
    keywords: Vec<String>,
    gateway: &dyn CompletionBackend,
    params: &GenerationParams,
) -> Result<Answer, PipelineError> {
    let out = gateway
        .complete(question, params)
        .await
        .map_err(PipelineError::at(Stage::Fallback))?;
    Ok(Answer {
        text: out.text.trim().to_string(),
        keywords,
        evidence: Vec::new(),
        used_brain: false,
    })
}

pub async fn run_pipeline(
    question: &str,
    corpus: &[Document],
    cfg: &RetrievalConfig,
    gateway: &dyn CompletionBackend,
    articles: Option<&dyn ArticleSource>,
    params: &GenerationParams,
) -> Result<Answer, PipelineError> {
    check_question(question)?;
    cfg.validate().map_err(PipelineError::InvalidArgument)?;

    let keyword_prompt = prompt_kit::render_keyword_prompt(question)?;
    let raw_keywords = gateway
        .complete(&keyword_prompt.text, params)
        .await
        .map_err(PipelineError::at(Stage::KeywordExtraction))?;
    let keywords = match prompt_kit::parse_keywords(&raw_keywords.text) {
        Ok(k) => k,
        Err(_) => {
            tracing::debug!("keyword extraction produced nothing, answering from prior knowledge");
            return prior_knowledge_answer(question, Vec::new(), gateway, params).await;
        }
    };

    let mut extended;
    let mut working: &[Document] = corpus;
    if let Some(source) = articles {
        match source.fetch(&keywords[0]).await {
            Ok(article) => {
                extended = corpus.to_vec();
                if !extended.iter().any(|d| d.doc_id == article.doc_id) {
                    extended.push(article);
                }
                working = &extended;
            }
            Err(KbError::NotFound(_)) => {}
            Err(e) => tracing::warn!(error = %e, "external article lookup failed, using offline corpus"),
        }
    }

    let results = retrieve_top_n(working, &keywords, cfg);
    let mut evidence = Vec::new();
    for result in &results {
        let prompt = prompt_kit::render_selection_prompt(&result.chunk.raw_text, question)?;
        let out = gateway
            .complete(&prompt.text, params)
            .await
            .map_err(PipelineError::at(Stage::KnowledgeSelection))?;
        let selected = out.text.trim();
        if !selected.is_empty() {
            evidence.push(Evidence {
                doc_id: result.chunk.doc_id.clone(),
                section_index: result.chunk.section_index,
                score: result.score,
                selected_text: selected.to_string(),
            });
        }
    }
    if evidence.is_empty() {
        return prior_knowledge_answer(question, keywords, gateway, params).await;
    }

    let knowledge = evidence
        .iter()
        .map(|e| e.selected_text.as_str())
        .collect::<Vec<_>>()
        .join("\n\n");
    let final_prompt = prompt_kit::render_final_prompt(question, &knowledge)?;
    let out = gateway
        .complete(&final_prompt.text, params)
        .await
        .map_err(PipelineError::at(Stage::FinalAnswer))?;
    Ok(Answer {
        text: out.text.trim().to_string(),
        keywords,
        evidence,
        used_brain: true,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub answer: Answer,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub turns: Vec<Turn>,
}

impl Session {
    pub fn new() -> Self {
        Self::with_id(uuid::Uuid::new_v4().to_string())
    }

    pub fn with_id(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            turns: Vec::new(),
        }
    }

    /// Answers the latest question on its own; earlier turns are not fed
    /// back into retrieval.
    pub async fn post_message(
        &mut self,
        brain: &Brain,
        question: &str,
        use_brain: bool,
    ) -> Result<&Turn, PipelineError> {
        let answer = brain.ask(question, use_brain).await?;
        self.turns.push(Turn {
            question: question.to_string(),
            answer,
            timestamp: Utc::now(),
        });
        Ok(self.turns.last().expect("turn just pushed"))
    }
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

/// In-memory session registry.
#[derive(Debug, Default)]
pub struct SessionStore {
    sessions: HashMap<String, Session>,
}

impl SessionStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn new_session(&mut self) -> &Session {
        let session = Session::new();
        let id = session.session_id.clone();
        self.sessions.entry(id).or_insert(session)
    }

    pub fn get(&self, session_id: &str) -> Option<&Session> {
        self.sessions.get(session_id)
    }

    pub async fn post_message(
        &mut self,
        session_id: &str,
        brain: &Brain,
        question: &str,
    ) -> Result<Answer, PipelineError> {
        let session = self
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| PipelineError::SessionNotFound(session_id.to_string()))?;
        Ok(session.post_message(brain, question, true).await?.answer.clone())
    }
}
