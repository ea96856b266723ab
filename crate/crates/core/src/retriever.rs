//! Term-matching retrieval over equal-sized token sections.
//!
//! Documents are tokenized (lowercase, split on non-alphanumerics, no
//! stemming or stop words), cut into sections of `section_size` tokens and
//! ranked by the number of keyword occurrences they contain.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::kb_store::Document;

/// A lowercase alphanumeric token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(String);

impl Token {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Token {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Alphanumeric characters that have a lowercase form. Uppercase letters
/// without a lowercase mapping (e.g. mathematical alphanumerics) separate
/// tokens like punctuation does.
fn is_token_char(c: char) -> bool {
    c.is_alphanumeric() && c.to_lowercase().all(|l| !l.is_uppercase())
}

/// Lowercased alphanumeric runs, with each run's byte span in the source.
pub fn tokenize_with_spans(text: &str) -> Vec<(Token, Range<usize>)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (idx, ch) in text.char_indices() {
        match (is_token_char(ch), start) {
            (true, None) => start = Some(idx),
            (false, Some(s)) => {
                out.push(make_token(text, s..idx));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(make_token(text, s..text.len()));
    }
    out
}

fn make_token(text: &str, span: Range<usize>) -> (Token, Range<usize>) {
    let lowered: String = text[span.clone()]
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric())
        .collect();
    (Token(lowered), span)
}

pub fn tokenize(text: &str) -> Vec<Token> {
    tokenize_with_spans(text).into_iter().map(|(t, _)| t).collect()
}

/// One section of a document, the unit that gets scored and ranked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentChunk {
    pub doc_id: String,
    pub section_index: usize,
    pub tokens: Vec<Token>,
    /// Source text from the first token's start to the last token's end.
    pub raw_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub section_size: usize,
    pub top_n: usize,
    pub drop_zero_scores: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            section_size: 256,
            top_n: 5,
            drop_zero_scores: true,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.section_size == 0 {
            return Err("section_size must be at least 1".into());
        }
        if self.top_n == 0 {
            return Err("top_n must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub chunk: DocumentChunk,
    pub score: u64,
    pub rank: usize,
}

/// Splits a document body into consecutive sections of `section_size` tokens;
/// the last section may be shorter.
///
/// # Panics
/// If `section_size` is zero.
pub fn chunk_document(doc: &Document, section_size: usize) -> Vec<DocumentChunk> {
    assert!(section_size >= 1, "section_size must be at least 1");
    let spans = tokenize_with_spans(&doc.body);
    spans
        .chunks(section_size)
        .enumerate()
        .map(|(section_index, window)| {
            let start = window[0].1.start;
            let end = window[window.len() - 1].1.end;
            DocumentChunk {
                doc_id: doc.doc_id.clone(),
                section_index,
                tokens: window.iter().map(|(t, _)| t.clone()).collect(),
                raw_text: doc.body[start..end].to_string(),
            }
        })
        .collect()
}

/// Tokenized keyword phrases; phrases that tokenize to nothing are dropped.
fn keyword_patterns(keywords: &[impl AsRef<str>]) -> Vec<Vec<Token>> {
    keywords
        .iter()
        .map(|k| tokenize(k.as_ref()))
        .filter(|p| !p.is_empty())
        .collect()
}

fn count_occurrences(haystack: &[Token], pattern: &[Token]) -> u64 {
    if pattern.len() > haystack.len() {
        return 0;
    }
    haystack
        .windows(pattern.len())
        .filter(|w| *w == pattern)
        .count() as u64
}

fn score_tokens(tokens: &[Token], patterns: &[Vec<Token>]) -> u64 {
    patterns.iter().map(|p| count_occurrences(tokens, p)).sum()
}

/// Total number of keyword occurrences in the chunk. Multi-word keywords
/// match as contiguous token sequences; overlapping occurrences all count.
pub fn score_chunk(chunk: &DocumentChunk, keywords: &[impl AsRef<str>]) -> u64 {
    score_tokens(&chunk.tokens, &keyword_patterns(keywords))
}

/// Ranks every section of the corpus by keyword hits and returns the best
/// `cfg.top_n`. Ties are broken by corpus order, then section index.
pub fn retrieve_top_n(
    corpus: &[Document],
    keywords: &[impl AsRef<str>],
    cfg: &RetrievalConfig,
) -> Vec<RetrievalResult> {
    let patterns = keyword_patterns(keywords);
    let mut scored: Vec<(u64, DocumentChunk)> = corpus
        .iter()
        .flat_map(|doc| chunk_document(doc, cfg.section_size))
        .map(|chunk| (score_tokens(&chunk.tokens, &patterns), chunk))
        .filter(|(score, _)| !cfg.drop_zero_scores || *score > 0)
        .collect();
    // Chunks are generated in (corpus order, section index) order, so a
    // stable sort on score alone yields the full tie-break.
    scored.sort_by(|a, b| b.0.cmp(&a.0));
    scored
        .into_iter()
        .take(cfg.top_n)
        .enumerate()
        .map(|(i, (score, chunk))| RetrievalResult {
            chunk,
            score,
            rank: i + 1,
        })
        .collect()
}
