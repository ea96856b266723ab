//! Offline disease database and pluggable external article sources.
//!
//! The on-disk database is plain UTF-8 text: one record per block, blocks
//! separated by blank lines, each field introduced by a label at line start:
//!
//! ```text
//! Disease: Appendicitis
//! Symptoms: Pain in the abdomen, ...
//! Further test: Abdominal and pelvic CT ...
//! Treatment: Appendectomy, ...
//! ```
//!
//! A field's value runs until the next known label or the end of the block.
//! Lines starting with an unknown label are continuation text.

use std::collections::HashSet;
use std::fmt;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LABEL_DISEASE: &str = "Disease:";
pub const LABEL_SYMPTOMS: &str = "Symptoms:";
pub const LABEL_FURTHER_TEST: &str = "Further test:";
pub const LABEL_TREATMENT: &str = "Treatment:";

#[derive(Debug, Error)]
pub enum KbError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("duplicate document id `{0}`")]
    DuplicateDocId(String),
    #[error("article not found for query `{0}`")]
    NotFound(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("external source is disabled")]
    Disabled,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One entry of the offline disease database.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseRecord {
    pub name: String,
    pub symptoms: String,
    pub further_tests: String,
    pub treatments: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    OfflineDb,
    ExternalArticle,
}

/// Uniform retrieval unit: a disease record or an external article.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub source_kind: SourceKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeSourceConfig {
    #[serde(default)]
    pub offline_db_paths: Vec<std::path::PathBuf>,
    #[serde(default)]
    pub external_endpoint: Option<String>,
    #[serde(default)]
    pub external_enabled: bool,
}

impl KnowledgeSourceConfig {
    pub fn validate(&self) -> Result<(), KbError> {
        if self.external_enabled && self.external_endpoint.as_deref().map_or(true, str::is_empty) {
            return Err(KbError::InvalidArgument(
                "external source enabled without an endpoint".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Field {
    Name,
    Symptoms,
    FurtherTests,
    Treatments,
}

impl Field {
    const ALL: [(Field, &'static str); 4] = [
        (Field::Name, LABEL_DISEASE),
        (Field::Symptoms, LABEL_SYMPTOMS),
        (Field::FurtherTests, LABEL_FURTHER_TEST),
        (Field::Treatments, LABEL_TREATMENT),
    ];

    fn detect(line: &str) -> Option<(Field, &str)> {
        Self::ALL.iter().find_map(|(field, label)| {
            line.strip_prefix(label).map(|rest| {
                // Label plus exactly one following space.
                (*field, rest.strip_prefix(' ').unwrap_or(rest))
            })
        })
    }

    fn label(self) -> &'static str {
        match self {
            Field::Name => LABEL_DISEASE,
            Field::Symptoms => LABEL_SYMPTOMS,
            Field::FurtherTests => LABEL_FURTHER_TEST,
            Field::Treatments => LABEL_TREATMENT,
        }
    }
}

#[derive(Default)]
struct BlockBuilder {
    start_line: usize,
    fields: [Option<String>; 4],
    current: Option<Field>,
}

impl BlockBuilder {
    fn slot(&mut self, field: Field) -> &mut Option<String> {
        &mut self.fields[field as usize]
    }

    fn push_line(&mut self, line: &str, line_no: usize) -> Result<(), KbError> {
        if let Some((field, value)) = Field::detect(line) {
            let slot = self.slot(field);
            if slot.is_some() {
                return Err(KbError::Parse {
                    line: line_no,
                    message: format!("field `{}` appears twice in one record", field.label()),
                });
            }
            *slot = Some(value.to_string());
            self.current = Some(field);
            return Ok(());
        }
        match self.current {
            Some(field) => {
                let text = self.slot(field).get_or_insert_with(String::new);
                text.push('\n');
                text.push_str(line);
                Ok(())
            }
            None => Err(KbError::Parse {
                line: line_no,
                message: format!("record does not start with `{LABEL_DISEASE}`"),
            }),
        }
    }

    fn finish(self) -> Result<DiseaseRecord, KbError> {
        let [name, symptoms, further_tests, treatments] = self.fields;
        let name = name.ok_or_else(|| KbError::Parse {
            line: self.start_line,
            message: format!("record is missing the `{LABEL_DISEASE}` label"),
        })?;
        if name.trim().is_empty() {
            return Err(KbError::Parse {
                line: self.start_line,
                message: "disease name is empty".into(),
            });
        }
        Ok(DiseaseRecord {
            name,
            symptoms: symptoms.unwrap_or_default(),
            further_tests: further_tests.unwrap_or_default(),
            treatments: treatments.unwrap_or_default(),
        })
    }
}

/// Parses a disease database file into records, in file order.
pub fn parse_disease_db(text: &str) -> Result<Vec<DiseaseRecord>, KbError> {
    let mut records = Vec::new();
    let mut block: Option<BlockBuilder> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            if let Some(done) = block.take() {
                records.push(done.finish()?);
            }
            continue;
        }
        let builder = block.get_or_insert_with(|| BlockBuilder {
            start_line: line_no,
            ..BlockBuilder::default()
        });
        builder.push_line(line, line_no)?;
    }
    if let Some(done) = block.take() {
        records.push(done.finish()?);
    }
    Ok(records)
}

impl fmt::Display for DiseaseRecord {
    /// Normalized record text without a trailing separator. Empty fields are
    /// written as a bare label.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fields = [
            (LABEL_DISEASE, &self.name),
            (LABEL_SYMPTOMS, &self.symptoms),
            (LABEL_FURTHER_TEST, &self.further_tests),
            (LABEL_TREATMENT, &self.treatments),
        ];
        for (i, (label, value)) in fields.iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            if value.is_empty() {
                f.write_str(label)?;
            } else {
                write!(f, "{label} {value}")?;
            }
        }
        Ok(())
    }
}

/// Serializes records into the normalized database format: each record's
/// labeled lines, records separated by a single blank line, trailing newline.
pub fn serialize_disease_db(records: &[DiseaseRecord]) -> String {
    let mut out = String::new();
    for (i, record) in records.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&record.to_string());
        out.push('\n');
    }
    out
}

/// Stable document id: lowercase, whitespace runs replaced by hyphens.
pub fn slugify(name: &str) -> String {
    name.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("-")
}

pub fn record_to_document(record: &DiseaseRecord) -> Document {
    Document {
        doc_id: slugify(&record.name),
        title: record.name.clone(),
        body: format!(
            "{LABEL_DISEASE} {}\n{LABEL_SYMPTOMS} {}\n{LABEL_FURTHER_TEST} {}\n{LABEL_TREATMENT} {}",
            record.name, record.symptoms, record.further_tests, record.treatments
        ),
        source_kind: SourceKind::OfflineDb,
    }
}

/// Builds a corpus from records, rejecting duplicate document ids.
pub fn documents_from_records(records: &[DiseaseRecord]) -> Result<Vec<Document>, KbError> {
    let docs: Vec<Document> = records.iter().map(record_to_document).collect();
    check_unique_ids(&docs)?;
    Ok(docs)
}

pub fn check_unique_ids(docs: &[Document]) -> Result<(), KbError> {
    let mut seen = HashSet::new();
    for doc in docs {
        if !seen.insert(doc.doc_id.as_str()) {
            return Err(KbError::DuplicateDocId(doc.doc_id.clone()));
        }
    }
    Ok(())
}

/// Reads and parses every configured offline database file into one corpus,
/// in path order.
pub fn load_offline_corpus(cfg: &KnowledgeSourceConfig) -> Result<Vec<Document>, KbError> {
    let mut records = Vec::new();
    for path in &cfg.offline_db_paths {
        let text = std::fs::read_to_string(path)?;
        records.extend(parse_disease_db(&text)?);
    }
    documents_from_records(&records)
}

/// A source of external articles looked up by free-text query.
#[async_trait]
pub trait ArticleSource: Send + Sync {
    async fn fetch(&self, query: &str) -> Result<Document, KbError>;
}

/// Client for the `GET {base}/article?q=...` plain-text article endpoint.
#[derive(Debug, Clone)]
pub struct HttpArticleSource {
    base: String,
    client: reqwest::Client,
}

impl HttpArticleSource {
    pub fn new(base: impl Into<String>) -> Result<Self, KbError> {
        Self::with_timeout(base, Duration::from_secs(30))
    }

    pub fn with_timeout(base: impl Into<String>, timeout: Duration) -> Result<Self, KbError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| KbError::Transport(e.to_string()))?;
        Ok(Self {
            base: base.into().trim_end_matches('/').to_string(),
            client,
        })
    }

    pub fn from_config(cfg: &KnowledgeSourceConfig) -> Result<Self, KbError> {
        cfg.validate()?;
        if !cfg.external_enabled {
            return Err(KbError::Disabled);
        }
        Self::new(cfg.external_endpoint.clone().unwrap_or_default())
    }
}

#[async_trait]
impl ArticleSource for HttpArticleSource {
    async fn fetch(&self, query: &str) -> Result<Document, KbError> {
        if query.trim().is_empty() {
            return Err(KbError::InvalidArgument("article query is empty".into()));
        }
        let url = format!("{}/article", self.base);
        let resp = self
            .client
            .get(&url)
            .query(&[("q", query)])
            .send()
            .await
            .map_err(|e| KbError::Transport(e.to_string()))?;
        let status = resp.status();
        if status == reqwest::StatusCode::NOT_FOUND {
            return Err(KbError::NotFound(query.to_string()));
        }
        if !status.is_success() {
            return Err(KbError::Transport(format!("article endpoint returned {status}")));
        }
        let body = resp
            .text()
            .await
            .map_err(|e| KbError::Transport(e.to_string()))?;
        if body.trim().is_empty() {
            return Err(KbError::NotFound(query.to_string()));
        }
        Ok(Document {
            doc_id: format!("external-{}", slugify(query)),
            title: query.to_string(),
            body,
            source_kind: SourceKind::ExternalArticle,
        })
    }
}

/// One-shot lookup against the configured external endpoint.
pub async fn fetch_external_article(
    query: &str,
    cfg: &KnowledgeSourceConfig,
) -> Result<Document, KbError> {
    if query.trim().is_empty() {
        return Err(KbError::InvalidArgument("article query is empty".into()));
    }
    HttpArticleSource::from_config(cfg)?.fetch(query).await
}
