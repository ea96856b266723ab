//! The three pipeline prompts and the keyword-response parser.
//!
//! Template text is fixed byte-for-byte; golden copies live under
//! `fixtures/golden/` at the repository root.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const KEYWORD_PREFIX: &str = "A question is provided below. Given the question, extract keywords from the text. Focus on extracting the keywords that can be used to best look up answers to the question.\n\n";
pub const KEYWORD_SUFFIX: &str = "\n\nProvide keywords in the following comma-separated format.\nKeywords:";

pub const SELECTION_PREFIX: &str = "Some information is below.\n\n";
pub const SELECTION_MIDDLE: &str =
    "\n\nSelect the information that will help to answer the question: ";
pub const SELECTION_SUFFIX: &str = "\nResponse:";

pub const FINAL_PREFIX: &str = "The original question is as follows: ";
pub const FINAL_MIDDLE: &str = "\nBased on the information we provided:\n\n";
pub const FINAL_SUFFIX: &str = "\n\nAnswer:";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("no keywords found in model output")]
    EmptyKeywords,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    KeywordExtraction,
    KnowledgeSelection,
    FinalAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub kind: PromptKind,
    pub text: String,
}

fn require(value: &str, what: &'static str) -> Result<(), PromptError> {
    if value.trim().is_empty() {
        Err(PromptError::InvalidArgument(what))
    } else {
        Ok(())
    }
}

pub fn render_keyword_prompt(question: &str) -> Result<RenderedPrompt, PromptError> {
    require(question, "question is empty")?;
    Ok(RenderedPrompt {
        kind: PromptKind::KeywordExtraction,
        text: [KEYWORD_PREFIX, question, KEYWORD_SUFFIX].concat(),
    })
}

pub fn render_selection_prompt(
    section_text: &str,
    question: &str,
) -> Result<RenderedPrompt, PromptError> {
    require(section_text, "section text is empty")?;
    require(question, "question is empty")?;
    Ok(RenderedPrompt {
        kind: PromptKind::KnowledgeSelection,
        text: [SELECTION_PREFIX, section_text, SELECTION_MIDDLE, question, SELECTION_SUFFIX]
            .concat(),
    })
}

/// `knowledge` is embedded unmodified; the caller decides whether an empty
/// knowledge block makes sense.
pub fn render_final_prompt(question: &str, knowledge: &str) -> Result<RenderedPrompt, PromptError> {
    require(question, "question is empty")?;
    Ok(RenderedPrompt {
        kind: PromptKind::FinalAnswer,
        text: [FINAL_PREFIX, question, FINAL_MIDDLE, knowledge, FINAL_SUFFIX].concat(),
    })
}

/// Splits a comma-separated keyword response. A leading `Keywords:` label is
/// removed (any case); items keep their original casing.
pub fn parse_keywords(llm_output: &str) -> Result<Vec<String>, PromptError> {
    let trimmed = llm_output.trim();
    const LABEL: &str = "keywords:";
    let body = match trimmed.get(..LABEL.len()) {
        Some(head) if head.eq_ignore_ascii_case(LABEL) => &trimmed[LABEL.len()..],
        _ => trimmed,
    };
    let keywords: Vec<String> = body
        .split(',')
        .map(str::trim)
        .filter(|k| !k.is_empty())
        .map(str::to_string)
        .collect();
    if keywords.is_empty() {
        Err(PromptError::EmptyKeywords)
    } else {
        Ok(keywords)
    }
}
