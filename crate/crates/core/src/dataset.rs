//! Dialogue cleaning, instruction-format conversion, stratified test splits
//! and the fine-tuning configuration file.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default instruction attached to every converted dialogue. Local
/// convention; the original training instruction was never published.
pub const DEFAULT_INSTRUCTION: &str =
    "If you are a doctor, please answer the medical questions based on the patient's description.";

pub const DEFAULT_MIN_DOCTOR_CHARS: usize = 100;

pub const UNKNOWN_STRATUM: &str = "unknown";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub patient_text: String,
    pub doctor_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specialty: Option<String>,
}

impl Dialogue {
    pub fn stratum(&self) -> &str {
        self.specialty.as_deref().unwrap_or(UNKNOWN_STRATUM)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

pub fn read_dialogues_jsonl(reader: impl BufRead) -> Result<Vec<Dialogue>, DatasetError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let dialogue: Dialogue = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if !ids.insert(dialogue.id.clone()) {
            return Err(DatasetError::Parse {
                line: idx + 1,
                message: format!("duplicate dialogue id `{}`", dialogue.id),
            });
        }
        out.push(dialogue);
    }
    Ok(out)
}

pub fn write_dialogues_jsonl(
    mut writer: impl Write,
    dialogues: &[Dialogue],
) -> Result<(), DatasetError> {
    for d in dialogues {
        serde_json::to_writer(&mut writer, d)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Splits dialogues by trimmed doctor-reply length (in characters), keeping
/// input order in both halves.
pub fn filter_short(dialogues: Vec<Dialogue>, min_doctor_chars: usize) -> (Vec<Dialogue>, Vec<Dialogue>) {
    dialogues
        .into_iter()
        .partition(|d| d.doctor_text.trim().chars().count() >= min_doctor_chars)
}

/// Ids listed one per line; blank lines and `#` comments are ignored.
pub fn read_exclusion_list(path: &Path) -> Result<HashSet<String>, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

pub fn apply_exclusions(dialogues: Vec<Dialogue>, excluded: &HashSet<String>) -> Vec<Dialogue> {
    dialogues
        .into_iter()
        .filter(|d| !excluded.contains(&d.id))
        .collect()
}

// No leading word boundary on names: masking a neighbouring match must not
// change whether a name matches, or a second pass would differ.
static PII: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(concat!(
        r"(?P<email>[A-Za-z0-9._%+\-]+@[A-Za-z0-9\-]+(?:\.[A-Za-z0-9\-]+)*\.[A-Za-z]{2,})",
        r#"|(?P<url>(?:https?://|www\.)[^\s<>"]*[^\s<>".,;:!?)\]'])"#,
        r"|(?P<phone>\+?\d(?:[ .\-()]*\d){6,})",
        r"|(?P<name>(?:Dr\.?|Doctor)[ \t]+[A-Z][a-z]+(?:[ \t]+[A-Z][a-z]+)*)",
    ))
    .expect("valid PII pattern")
});

/// Masks emails, URLs, phone numbers and doctor names in a single pass.
pub fn anonymize(text: &str) -> String {
    PII.replace_all(text, |caps: &Captures<'_>| {
        if caps.name("email").is_some() {
            "[EMAIL]"
        } else if caps.name("url").is_some() {
            "[URL]"
        } else if caps.name("phone").is_some() {
            "[PHONE]"
        } else {
            "Dr. [NAME]"
        }
    })
    .into_owned()
}

/// Text pass applied after anonymization. The default does nothing; a
/// grammar checker can be plugged in here.
pub trait TextPass {
    fn apply(&self, text: &str) -> String;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoopPass;

impl TextPass for NoopPass {
    fn apply(&self, text: &str) -> String {
        text.to_string()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CleanReport {
    pub input: usize,
    pub excluded: usize,
    pub too_short: usize,
    pub kept: usize,
}

/// Exclusion list, then length filter, then anonymization and the text pass
/// on both sides of every kept dialogue.
pub fn clean_dialogues(
    dialogues: Vec<Dialogue>,
    min_doctor_chars: usize,
    excluded: &HashSet<String>,
    pass: &dyn TextPass,
) -> (Vec<Dialogue>, CleanReport) {
    let input = dialogues.len();
    let retained = apply_exclusions(dialogues, excluded);
    let excluded_count = input - retained.len();
    let (kept, dropped) = filter_short(retained, min_doctor_chars);
    let cleaned: Vec<Dialogue> = kept
        .into_iter()
        .map(|d| Dialogue {
            patient_text: pass.apply(&anonymize(&d.patient_text)),
            doctor_text: pass.apply(&anonymize(&d.doctor_text)),
            ..d
        })
        .collect();
    let report = CleanReport {
        input,
        excluded: excluded_count,
        too_short: dropped.len(),
        kept: cleaned.len(),
    };
    (cleaned, report)
}

pub fn to_instruction_format(
    dialogue: &Dialogue,
    instruction_text: &str,
) -> Result<InstructionRecord, DatasetError> {
    if dialogue.patient_text.trim().is_empty() {
        return Err(DatasetError::InvalidArgument(format!(
            "dialogue `{}` has empty patient text",
            dialogue.id
        )));
    }
    if dialogue.doctor_text.trim().is_empty() {
        return Err(DatasetError::InvalidArgument(format!(
            "dialogue `{}` has empty doctor text",
            dialogue.id
        )));
    }
    Ok(InstructionRecord {
        instruction: instruction_text.to_string(),
        input: dialogue.patient_text.clone(),
        output: dialogue.doctor_text.clone(),
    })
}

/// Writes the records as one pretty-printed JSON array.
pub fn write_instruction_file(
    writer: impl Write,
    records: &[InstructionRecord],
) -> Result<(), DatasetError> {
    serde_json::to_writer_pretty(writer, records)?;
    Ok(())
}

pub fn read_instruction_file(reader: impl std::io::Read) -> Result<Vec<InstructionRecord>, DatasetError> {
    Ok(serde_json::from_reader(reader)?)
}

/// Number of test items drawn from a stratum of `size`: round half up.
pub fn stratum_test_count(size: usize, test_fraction: f64) -> usize {
    let raw = test_fraction * size as f64;
    ((raw + 0.5).floor() as usize).min(size)
}

/// Per-stratum seeded split. Strata are visited in sorted key order; inside
/// each stratum the member positions are shuffled with ChaCha8 seeded from
/// `seed` and the first `round(test_fraction × size)` go to test. Both
/// outputs preserve input order.
pub fn stratified_split<T: Clone>(
    records: &[T],
    stratum_of: impl Fn(&T) -> &str,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), DatasetError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::InvalidArgument(format!(
            "test fraction must lie strictly between 0 and 1, got {test_fraction}"
        )));
    }
    let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata.entry(stratum_of(r)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_test = vec![false; records.len()];
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let take = stratum_test_count(members.len(), test_fraction);
        for &i in &members[..take] {
            in_test[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (r, is_test) in records.iter().zip(in_test) {
        if is_test {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, test))
}

pub fn split_dialogues(
    dialogues: &[Dialogue],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<Dialogue>, Vec<Dialogue>), DatasetError> {
    stratified_split(dialogues, Dialogue::stratum, test_fraction, seed)
}

/// Fine-tuning hyperparameters. Nothing here trains; the file is an artifact
/// for an external trainer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_batch_size: u32,
    pub learning_rate: f64,
    pub epochs: u32,
    pub max_sequence_length: u32,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_batch_size: 192,
            learning_rate: 2e-5,
            epochs: 3,
            max_sequence_length: 512,
            warmup_ratio: 0.03,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainConfigOverrides {
    pub total_batch_size: Option<i64>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<i64>,
    pub max_sequence_length: Option<i64>,
    pub warmup_ratio: Option<f64>,
    pub weight_decay: Option<f64>,
}

fn positive_u32(name: &str, value: i64) -> Result<u32, DatasetError> {
    u32::try_from(value)
        .ok()
        .filter(|v| *v > 0)
        .ok_or_else(|| DatasetError::InvalidArgument(format!("{name} must be a positive integer, got {value}")))
}

impl TrainConfig {
    pub fn with_overrides(o: &TrainConfigOverrides) -> Result<Self, DatasetError> {
        let mut cfg = Self::default();
        if let Some(v) = o.total_batch_size {
            cfg.total_batch_size = positive_u32("total_batch_size", v)?;
        }
        if let Some(v) = o.epochs {
            cfg.epochs = positive_u32("epochs", v)?;
        }
        if let Some(v) = o.max_sequence_length {
            cfg.max_sequence_length = positive_u32("max_sequence_length", v)?;
        }
        if let Some(v) = o.learning_rate {
            if !(v.is_finite() && v > 0.0) {
                return Err(DatasetError::InvalidArgument(format!("learning_rate must be positive, got {v}")));
            }
            cfg.learning_rate = v;
        }
        if let Some(v) = o.warmup_ratio {
            if !(0.0..1.0).contains(&v) {
                return Err(DatasetError::InvalidArgument(format!("warmup_ratio must lie in [0, 1), got {v}")));
            }
            cfg.warmup_ratio = v;
        }
        if let Some(v) = o.weight_decay {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DatasetError::InvalidArgument(format!("weight_decay must be non-negative, got {v}")));
            }
            cfg.weight_decay = v;
        }
        Ok(cfg)
    }

    /// Flat `key = value` text, one field per line, in declaration order.
    /// The output is valid TOML.
    pub fn to_file_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "total_batch_size = {}", self.total_batch_size);
        let _ = writeln!(out, "learning_rate = {}", fmt_float(self.learning_rate));
        let _ = writeln!(out, "epochs = {}", self.epochs);
        let _ = writeln!(out, "max_sequence_length = {}", self.max_sequence_length);
        let _ = writeln!(out, "warmup_ratio = {}", fmt_float(self.warmup_ratio));
        let _ = writeln!(out, "weight_decay = {}", fmt_float(self.weight_decay));
        out
    }

    pub fn from_file_text(text: &str) -> Result<Self, DatasetError> {
        toml::from_str(text).map_err(|e| DatasetError::Parse {
            line: 0,
            message: e.to_string(),
        })
    }
}

/// Shortest round-trip form; small magnitudes use exponent notation and
/// integral values keep a `.0` so the value stays a float.
fn fmt_float(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:e}")
    } else if v.fract() == 0.0 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}
