//! Greedy embedding-match precision/recall/F1, aggregation and paired
//! t-tests between two systems scored against the same references.

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::io::BufRead;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::retriever::tokenize;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("embedding provider: {0}")]
    Provider(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Maps tokens to unit-norm vectors of a fixed dimension.
pub trait EmbeddingProvider {
    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, EvalError>;
}

/// Exact test provider: every distinct token gets its own basis vector, so
/// cosine similarity is 1 for equal tokens and 0 otherwise.
#[derive(Debug)]
pub struct OneHotTestProvider {
    dimension: usize,
    vocab: Mutex<HashMap<String, usize>>,
}

impl OneHotTestProvider {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            vocab: Mutex::new(HashMap::new()),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }
}

impl Default for OneHotTestProvider {
    fn default() -> Self {
        Self::new(4096)
    }
}

impl EmbeddingProvider for OneHotTestProvider {
    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, EvalError> {
        let mut vocab = self.vocab.lock().expect("vocabulary poisoned");
        tokens
            .iter()
            .map(|t| {
                let next = vocab.len();
                let idx = *vocab.entry(t.clone()).or_insert(next);
                if idx >= self.dimension {
                    vocab.remove(t);
                    return Err(EvalError::Provider(format!(
                        "one-hot vocabulary exhausted ({} dimensions)",
                        self.dimension
                    )));
                }
                let mut v = vec![0.0; self.dimension];
                v[idx] = 1.0;
                Ok(v)
            })
            .collect()
    }
}

/// Client for `POST {base}/v1/embeddings` with body `{"input": [tokens]}`.
/// Accepts either `{"data": [{"embedding": [..], "index": i}]}` or
/// `{"embeddings": [[..]]}`; vectors are L2-normalized on receipt.
#[derive(Debug, Clone)]
pub struct RemoteEmbeddingProvider {
    base: String,
    model: Option<String>,
    client: reqwest::blocking::Client,
}

impl RemoteEmbeddingProvider {
    pub fn new(base: impl Into<String>, model: Option<String>) -> Result<Self, EvalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| EvalError::Provider(e.to_string()))?;
        Ok(Self {
            base: base.into().trim_end_matches('/').to_string(),
            model,
            client,
        })
    }
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EmbeddingResponse {
    Data { data: Vec<EmbeddingItem> },
    Plain { embeddings: Vec<Vec<f64>> },
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>, EvalError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(EvalError::Provider("zero or non-finite embedding vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

impl EmbeddingProvider for RemoteEmbeddingProvider {
    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, EvalError> {
        let mut body = serde_json::json!({ "input": tokens });
        if let Some(model) = &self.model {
            body["model"] = serde_json::Value::String(model.clone());
        }
        let resp = self
            .client
            .post(format!("{}/v1/embeddings", self.base))
            .json(&body)
            .send()
            .map_err(|e| EvalError::Provider(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(EvalError::Provider(format!("embedding endpoint returned {}", resp.status())));
        }
        let parsed: EmbeddingResponse = resp.json().map_err(|e| EvalError::Provider(e.to_string()))?;
        let vectors = match parsed {
            EmbeddingResponse::Plain { embeddings } => embeddings,
            EmbeddingResponse::Data { mut data } => {
                if data.iter().all(|d| d.index.is_some()) {
                    data.sort_by_key(|d| d.index);
                }
                data.into_iter().map(|d| d.embedding).collect()
            }
        };
        if vectors.len() != tokens.len() {
            return Err(EvalError::Provider(format!(
                "expected {} vectors, got {}",
                tokens.len(),
                vectors.len()
            )));
        }
        let dim = vectors.first().map_or(0, Vec::len);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(EvalError::Provider("embedding dimensions differ".into()));
        }
        vectors.into_iter().map(normalize).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ScoreTriple {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Greedy matching: each candidate token takes its best cosine against the
/// reference (precision), each reference token its best against the
/// candidate (recall). No idf weighting, no baseline rescaling.
pub fn greedy_match_scores(
    candidate: &[String],
    reference: &[String],
    provider: &dyn EmbeddingProvider,
) -> Result<ScoreTriple, EvalError> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(EvalError::InvalidArgument("token lists must be non-empty".into()));
    }
    let cand = provider.embed(candidate)?;
    let refs = provider.embed(reference)?;
    if cand.len() != candidate.len() || refs.len() != reference.len() {
        return Err(EvalError::Provider("provider returned wrong number of vectors".into()));
    }
    let mut best_for_ref = vec![f64::NEG_INFINITY; refs.len()];
    let mut precision_sum = 0.0;
    for c in &cand {
        let mut best = f64::NEG_INFINITY;
        for (j, r) in refs.iter().enumerate() {
            let sim = dot(c, r);
            best = best.max(sim);
            best_for_ref[j] = best_for_ref[j].max(sim);
        }
        precision_sum += best;
    }
    let precision = precision_sum / cand.len() as f64;
    let recall = best_for_ref.iter().sum::<f64>() / refs.len() as f64;
    Ok(ScoreTriple::new(precision, recall))
}

/// Tokenizes both texts with the retrieval tokenizer and scores them.
pub fn score_texts(
    candidate: &str,
    reference: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<ScoreTriple, EvalError> {
    let c: Vec<String> = tokenize(candidate).iter().map(|t| t.to_string()).collect();
    let r: Vec<String> = tokenize(reference).iter().map(|t| t.to_string()).collect();
    greedy_match_scores(&c, &r, provider)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self, EvalError> {
        if values.is_empty() {
            return Err(EvalError::InvalidArgument("no values to aggregate".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(Self { mean, std })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub n: usize,
}

pub fn aggregate(triples: &[ScoreTriple]) -> Result<Aggregate, EvalError> {
    let column = |f: fn(&ScoreTriple) -> f64| triples.iter().map(f).collect::<Vec<_>>();
    Ok(Aggregate {
        precision: MeanStd::of(&column(|t| t.precision))?,
        recall: MeanStd::of(&column(|t| t.recall))?,
        f1: MeanStd::of(&column(|t| t.f1))?,
        n: triples.len(),
    })
}

/// Student's t cumulative distribution with `df` degrees of freedom.
pub fn t_cdf(x: f64, df: f64) -> f64 {
    if x.is_nan() || !(df > 0.0) {
        return f64::NAN;
    }
    if x == 0.0 {
        return 0.5;
    }
    // P(|T| > |x|) = I_{df/(df+x²)}(df/2, 1/2)
    let tail = 0.5 * two_tailed_p(x, df);
    if x > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// P(|T| ≥ |t|) for Student's t with `df` degrees of freedom.
pub fn two_tailed_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    beta_reg(df / 2.0, 0.5, x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p_two_tailed: f64,
    /// Set when the differences have zero variance and `t` is undefined.
    pub degenerate: bool,
}

/// Paired t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::InvalidArgument(format!(
            "series lengths differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(EvalError::InvalidArgument("paired t-test needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let stats = MeanStd::of(&diffs)?;
    let n = diffs.len();
    let df = n - 1;
    if stats.std == 0.0 {
        let (t, p) = if stats.mean == 0.0 {
            (0.0, 1.0)
        } else {
            (stats.mean.signum() * f64::INFINITY, 0.0)
        };
        return Ok(TTest {
            t,
            df,
            p_two_tailed: p,
            degenerate: true,
        });
    }
    let t = stats.mean / (stats.std / (n as f64).sqrt());
    Ok(TTest {
        t,
        df,
        p_two_tailed: two_tailed_p(t, df as f64),
        degenerate: false,
    })
}

/// One line of the pair input file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub id: String,
    pub candidate: String,
    pub reference: String,
}

pub fn read_pairs_jsonl(reader: impl BufRead) -> Result<Vec<ScoredPair>, EvalError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub system_a: MeanStd,
    pub system_b: MeanStd,
    pub test: Option<TTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label_a: String,
    pub label_b: String,
    pub pair_count: usize,
    pub rows: Vec<MetricRow>,
    pub per_pair_a: Vec<ScoreTriple>,
    pub per_pair_b: Vec<ScoreTriple>,
}

/// Scores two systems against identical references (same ids, same order)
/// and compares them metric by metric. The t-test is omitted for a single
/// pair.
pub fn evaluate_run(
    pairs_a: &[ScoredPair],
    pairs_b: &[ScoredPair],
    provider: &dyn EmbeddingProvider,
    label_a: &str,
    label_b: &str,
) -> Result<EvalReport, EvalError> {
    if pairs_a.len() != pairs_b.len() {
        return Err(EvalError::InvalidArgument(format!(
            "systems have different pair counts ({} vs {})",
            pairs_a.len(),
            pairs_b.len()
        )));
    }
    if pairs_a.is_empty() {
        return Err(EvalError::InvalidArgument("no pairs to evaluate".into()));
    }
    for (i, (a, b)) in pairs_a.iter().zip(pairs_b).enumerate() {
        if a.id != b.id || a.reference != b.reference {
            return Err(EvalError::InvalidArgument(format!(
                "reference mismatch at pair {} (ids `{}` / `{}`)",
                i + 1,
                a.id,
                b.id
            )));
        }
    }
    let score_all = |pairs: &[ScoredPair]| -> Result<Vec<ScoreTriple>, EvalError> {
        pairs
            .iter()
            .map(|p| score_texts(&p.candidate, &p.reference, provider))
            .collect()
    };
    let per_a = score_all(pairs_a)?;
    let per_b = score_all(pairs_b)?;
    let agg_a = aggregate(&per_a)?;
    let agg_b = aggregate(&per_b)?;

    let metrics: [(&str, fn(&ScoreTriple) -> f64, MeanStd, MeanStd); 3] = [
        ("Precision", |t| t.precision, agg_a.precision, agg_b.precision),
        ("Recall", |t| t.recall, agg_a.recall, agg_b.recall),
        ("F1 Score", |t| t.f1, agg_a.f1, agg_b.f1),
    ];
    let rows = metrics
        .into_iter()
        .map(|(name, get, ma, mb)| {
            let test = if per_a.len() >= 2 {
                let sa: Vec<f64> = per_a.iter().map(get).collect();
                let sb: Vec<f64> = per_b.iter().map(get).collect();
                Some(paired_t_test(&sa, &sb)?)
            } else {
                None
            };
            Ok(MetricRow {
                metric: name.to_string(),
                system_a: ma,
                system_b: mb,
                test,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;

    Ok(EvalReport {
        label_a: label_a.to_string(),
        label_b: label_b.to_string(),
        pair_count: per_a.len(),
        rows,
        per_pair_a: per_a,
        per_pair_b: per_b,
    })
}

fn fmt_p(p: f64) -> String {
    if p == 0.0 {
        "0".into()
    } else if p < 1e-3 {
        format!("{p:.2e}")
    } else {
        format!("{p:.4}")
    }
}

impl EvalReport {
    /// Tab-separated table: metrics down, systems and p-value across.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "\t{}\t{}\tP-value", self.label_a, self.label_b);
        for row in &self.rows {
            let p = row.test.map_or_else(|| "n/a".to_string(), |t| fmt_p(t.p_two_tailed));
            let _ = writeln!(out, "{}\t{}\t{}\t{}", row.metric, row.system_a, row.system_b, p);
        }
        out
    }
}
