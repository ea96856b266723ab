//! Knowledge-grounded medical question answering.
//!
//! The engine answers a patient question in stages: the model mines
//! keywords from the question, a term-matching retriever ranks equal-sized
//! sections of a disease database (optionally extended with external
//! articles), the model selects the useful information from each top
//! section, and a final prompt turns the selected knowledge into an answer.
//!
//! Alongside the pipeline the crate carries the dataset preparation steps
//! used to build instruction-tuning data and an evaluation harness that
//! compares two systems with greedy embedding-match scores and paired
//! t-tests.

pub mod dataset;
pub mod evaluator;
pub mod kb_store;
pub mod llm_gateway;
pub mod orchestrator;
pub mod prompt_kit;
pub mod retriever;

pub use kb_store::{Document, DiseaseRecord, KnowledgeSourceConfig, SourceKind};
pub use llm_gateway::{CompletionBackend, GenerationParams, ScriptedBackend};
pub use orchestrator::{Answer, Brain, Evidence, Session};
pub use retriever::{RetrievalConfig, RetrievalResult};
