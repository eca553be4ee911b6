//! Dataset types, DA score normalization, and JSONL serialization.
//!
//! A dataset is a list of (source, translation) samples, each optionally
//! carrying a sentence score in [0,1], per-word OK/BAD tags, and
//! character-level error spans. Word segmentation is whitespace splitting of
//! the translation text, so tags align one-to-one with `mt.split_whitespace()`.
//! All character indices count Unicode scalar values, not bytes.
//!
//! The loader rejects invalid records rather than repairing them; errors name
//! the line and field.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Word-level label space for quality prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WordTag {
    #[serde(rename = "OK")]
    Ok,
    #[serde(rename = "BAD")]
    Bad,
}

/// Per-token label space for error span detection.
/// Index convention everywhere in the crate: OK = 0, MINOR = 1, MAJOR = 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Ok,
    Minor,
    Major,
}

impl Severity {
    pub fn index(self) -> usize {
        match self {
            Severity::Ok => 0,
            Severity::Minor => 1,
            Severity::Major => 2,
        }
    }
}

/// Severity of an error span; spans are never labelled OK.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanSeverity {
    Minor,
    Major,
}

impl From<SpanSeverity> for Severity {
    fn from(s: SpanSeverity) -> Severity {
        match s {
            SpanSeverity::Minor => Severity::Minor,
            SpanSeverity::Major => Severity::Major,
        }
    }
}

impl fmt::Display for SpanSeverity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpanSeverity::Minor => write!(f, "minor"),
            SpanSeverity::Major => write!(f, "major"),
        }
    }
}

/// Character interval `[start, end)` in the translation, with a severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorSpan {
    pub start: usize,
    pub end: usize,
    pub severity: SpanSeverity,
}

/// One (source, translation) pair with optional supervision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QESample {
    pub id: String,
    /// Language-pair code, e.g. "en-de".
    pub lp: String,
    pub src: String,
    pub mt: String,
    /// Sentence-level quality in [0,1]; 1 is a perfect translation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// One tag per whitespace word of `mt`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<WordTag>>,
    /// Disjoint, sorted character spans into `mt`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spans: Option<Vec<ErrorSpan>>,
}

impl QESample {
    /// Number of target words under whitespace segmentation.
    pub fn word_count(&self) -> usize {
        self.mt.split_whitespace().count()
    }

    /// Length of the translation in Unicode scalar values.
    pub fn mt_char_len(&self) -> usize {
        self.mt.chars().count()
    }

    /// Check every type invariant; `context` prefixes error messages.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("field `id`: must be nonempty".into());
        }
        if let Some(score) = self.score {
            if !(0.0..=1.0).contains(&score) || !score.is_finite() {
                return Err(format!("field `score`: {score} is outside [0, 1]"));
            }
        }
        if let Some(tags) = &self.tags {
            let words = self.word_count();
            if tags.len() != words {
                return Err(format!(
                    "field `tags`: {} tags for {} target words",
                    tags.len(),
                    words
                ));
            }
        }
        if let Some(spans) = &self.spans {
            let len = self.mt_char_len();
            let mut prev_end = 0usize;
            for (i, span) in spans.iter().enumerate() {
                if span.start >= span.end {
                    return Err(format!(
                        "field `spans[{i}]`: start {} must be < end {}",
                        span.start, span.end
                    ));
                }
                if span.end > len {
                    return Err(format!(
                        "field `spans[{i}]`: end {} exceeds translation length {len}",
                        span.end
                    ));
                }
                if i > 0 && span.start < prev_end {
                    return Err(format!(
                        "field `spans[{i}]`: overlaps or is out of order with the previous span"
                    ));
                }
                prev_end = span.end;
            }
        }
        Ok(())
    }
}

/// Dataset split, carried alongside the samples (not stored in the file).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Ordered list of samples with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<QESample>,
    pub split: Split,
}

impl Dataset {
    pub fn new(samples: Vec<QESample>, split: Split) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &samples {
            s.validate()
                .map_err(|m| Error::InvalidArgument(format!("sample `{}`: {m}", s.id)))?;
            if !seen.insert(s.id.clone()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate sample id `{}`",
                    s.id
                )));
            }
        }
        Ok(Self { samples, split })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Language pairs present, sorted and deduplicated.
    pub fn language_pairs(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.samples.iter().map(|s| s.lp.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }
}

/// Map a raw direct-assessment score in [0, 100] to [0, 1].
/// 1 represents a perfect translation and 0 a random one.
pub fn normalize_da(raw: f64) -> Result<f64> {
    if !raw.is_finite() || !(0.0..=100.0).contains(&raw) {
        return Err(Error::InvalidArgument(format!(
            "DA score {raw} is outside [0, 100]"
        )));
    }
    Ok(raw / 100.0)
}

/// Mean of [`normalize_da`] over several annotations of one sentence pair.
pub fn aggregate_scores(raws: &[f64]) -> Result<f64> {
    if raws.is_empty() {
        return Err(Error::InvalidArgument(
            "aggregate_scores needs at least one annotation".into(),
        ));
    }
    let mut sum = 0.0;
    for &raw in raws {
        sum += normalize_da(raw)?;
    }
    Ok(sum / raws.len() as f64)
}

/// Load a JSONL dataset. Each line must be one valid sample record; the
/// loader rejects malformed lines (naming line number and field) and
/// duplicate ids.
pub fn load_jsonl(path: &Path, split: Split) -> Result<Dataset> {
    let display = path.display().to_string();
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sample: QESample = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: display.clone(),
            line: lineno,
            message: e.to_string(),
        })?;
        sample.validate().map_err(|m| Error::Format {
            path: display.clone(),
            line: lineno,
            message: m,
        })?;
        if !seen.insert(sample.id.clone()) {
            return Err(Error::Format {
                path: display.clone(),
                line: lineno,
                message: format!("field `id`: duplicate id `{}`", sample.id),
            });
        }
        samples.push(sample);
    }
    Ok(Dataset { samples, split })
}

/// Write a dataset as JSONL, one sample per line.
pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for sample in &dataset.samples {
        let line = serde_json::to_string(sample).map_err(|e| Error::Format {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}
