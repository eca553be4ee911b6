//! Character-level error spans from word tags, and the pseudo-reference
//! channel weighting that blends severity predictions from source-only,
//! reference-based, and unified inputs.
//!
//! Spans are maximal runs of consecutive BAD tokens, stretched from the first
//! token's first character to the last token's last character — whitespace
//! between consecutive BAD tokens is absorbed. All indices count Unicode
//! scalar values.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ErrorSpan, Severity, SpanSeverity, WordTag};
use crate::encoder::{TextSide, TokenRange};
use crate::error::{Error, Result};
use crate::numerics::SimplexVector;

/// Severity assigned to every produced span. Blanket-major gives the better
/// downstream span F1, so it is the default; blanket-minor stays available
/// for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeverityMode {
    AllMinor,
    #[default]
    AllMajor,
}

impl SeverityMode {
    pub fn severity(self) -> SpanSeverity {
        match self {
            SeverityMode::AllMinor => SpanSeverity::Minor,
            SeverityMode::AllMajor => SpanSeverity::Major,
        }
    }
}

/// Quality-gated channel mix. For reference scores below 0.5 the pseudo-reference is
/// distrusted entirely and only the source channel is used (`qe_only`);
/// otherwise the three weights are a convex combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelWeights {
    pub qe_only: bool,
    pub src_weight: f64,
    pub ref_weight: f64,
    pub uni_weight: f64,
}

/// Extract the target-side token ranges, in order.
fn target_ranges(ranges: &[TokenRange]) -> Vec<&TokenRange> {
    ranges
        .iter()
        .filter(|r| r.text_side == TextSide::Target)
        .collect()
}

/// Convert word tags into character spans: each maximal run of BAD tokens
/// becomes one span from the run's first character to its last, severity per
/// `mode`.
pub fn tags_to_spans(
    tags: &[WordTag],
    ranges: &[TokenRange],
    mode: SeverityMode,
) -> Result<Vec<ErrorSpan>> {
    let targets = target_ranges(ranges);
    if tags.len() != targets.len() {
        return Err(Error::DimMismatch(format!(
            "{} tags for {} target tokens",
            tags.len(),
            targets.len()
        )));
    }
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        if tags[i] == WordTag::Bad {
            let run_start = i;
            while i < tags.len() && tags[i] == WordTag::Bad {
                i += 1;
            }
            let first = targets[run_start];
            let last = targets[i - 1];
            let (Some(start), Some(end)) = (first.char_start, last.char_end) else {
                return Err(Error::InvalidArgument(format!(
                    "target token {} lacks character alignment",
                    first.token_index
                )));
            };
            spans.push(ErrorSpan { start, end, severity: mode.severity() });
        } else {
            i += 1;
        }
    }
    Ok(spans)
}

/// Convert per-token severities into character spans: each maximal run of
/// non-OK tokens becomes one span labelled with the worst severity in the
/// run (major dominates minor).
pub fn severities_to_spans(
    severities: &[Severity],
    ranges: &[TokenRange],
) -> Result<Vec<ErrorSpan>> {
    let targets = target_ranges(ranges);
    if severities.len() != targets.len() {
        return Err(Error::DimMismatch(format!(
            "{} severities for {} target tokens",
            severities.len(),
            targets.len()
        )));
    }
    let mut spans = Vec::new();
    let mut i = 0;
    while i < severities.len() {
        if severities[i] == Severity::Ok {
            i += 1;
            continue;
        }
        let run_start = i;
        let mut worst = SpanSeverity::Minor;
        while i < severities.len() && severities[i] != Severity::Ok {
            if severities[i] == Severity::Major {
                worst = SpanSeverity::Major;
            }
            i += 1;
        }
        let first = targets[run_start];
        let last = targets[i - 1];
        let (Some(start), Some(end)) = (first.char_start, last.char_end) else {
            return Err(Error::InvalidArgument(format!(
                "target token {} lacks character alignment",
                first.token_index
            )));
        };
        spans.push(ErrorSpan { start, end, severity: worst });
    }
    Ok(spans)
}

/// Reconstruct word tags from spans: a token is BAD iff its character range
/// intersects any span. Inverse direction of [`tags_to_spans`] for round-trip
/// checks and for deriving supervision from span annotations.
pub fn spans_to_tags(spans: &[ErrorSpan], ranges: &[TokenRange]) -> Result<Vec<WordTag>> {
    let targets = target_ranges(ranges);
    let mut tags = Vec::with_capacity(targets.len());
    for t in &targets {
        let (Some(start), Some(end)) = (t.char_start, t.char_end) else {
            return Err(Error::InvalidArgument(format!(
                "target token {} lacks character alignment",
                t.token_index
            )));
        };
        let hit = spans.iter().any(|s| s.start < end && start < s.end);
        tags.push(if hit { WordTag::Bad } else { WordTag::Ok });
    }
    Ok(tags)
}

/// Channel weighting: diff = 1 − reference_score; src = 2·diff;
/// ref = (1 − src)·0.4; uni = (1 − src)·0.6. Scores below 0.5 switch to
/// QE-only input. The unified weight is computed as 1 − src − ref so the
/// three weights sum to exactly 1.
pub fn channel_weights(reference_score: f64) -> Result<ChannelWeights> {
    if !reference_score.is_finite() || !(0.0..=1.0).contains(&reference_score) {
        return Err(Error::InvalidArgument(format!(
            "reference score {reference_score} is outside [0, 1]"
        )));
    }
    if reference_score < 0.5 {
        return Ok(ChannelWeights {
            qe_only: true,
            src_weight: 1.0,
            ref_weight: 0.0,
            uni_weight: 0.0,
        });
    }
    let diff = 1.0 - reference_score;
    let src_weight = 2.0 * diff;
    let ref_weight = (1.0 - src_weight) * 0.4;
    let uni_weight = 1.0 - src_weight - ref_weight;
    Ok(ChannelWeights { qe_only: false, src_weight, ref_weight, uni_weight })
}

/// Per-token severity distributions from up to three input channels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChannelDists {
    pub src: Option<Vec<SimplexVector>>,
    pub reference: Option<Vec<SimplexVector>>,
    pub unified: Option<Vec<SimplexVector>>,
}

fn require_channel<'a>(
    channel: &'a Option<Vec<SimplexVector>>,
    name: &str,
) -> Result<&'a Vec<SimplexVector>> {
    channel
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("channel `{name}` is required but missing")))
}

/// Blend channel severity distributions token by token with the quality-gated
/// weights (soft mixture before any argmax). QE-only passes the source
/// channel through unchanged.
pub fn combine_channels(
    channels: &ChannelDists,
    weights: &ChannelWeights,
) -> Result<Vec<SimplexVector>> {
    if weights.qe_only {
        return Ok(require_channel(&channels.src, "src")?.clone());
    }
    let mut used: Vec<(f64, &Vec<SimplexVector>)> = Vec::new();
    for (weight, channel, name) in [
        (weights.src_weight, &channels.src, "src"),
        (weights.ref_weight, &channels.reference, "ref"),
        (weights.uni_weight, &channels.unified, "uni"),
    ] {
        if weight > 0.0 {
            used.push((weight, require_channel(channel, name)?));
        }
    }
    if used.is_empty() {
        return Err(Error::InvalidArgument("all channel weights are zero".into()));
    }
    let n_tokens = used[0].1.len();
    for (_, dists) in &used {
        if dists.len() != n_tokens {
            return Err(Error::DimMismatch(format!(
                "channels disagree on token count: {} vs {n_tokens}",
                dists.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(n_tokens);
    for t in 0..n_tokens {
        let n_classes = used[0].1[t].len();
        let mut mixed = vec![0.0; n_classes];
        for (weight, dists) in &used {
            let dist = dists[t].entries();
            if dist.len() != n_classes {
                return Err(Error::DimMismatch(format!(
                    "token {t}: channels disagree on class count"
                )));
            }
            for (m, &p) in mixed.iter_mut().zip(dist) {
                *m += weight * p;
            }
        }
        // Convex combination of simplex points; renormalize away the last
        // ulps of accumulation error.
        let sum: f64 = mixed.iter().sum();
        for m in &mut mixed {
            *m /= sum;
        }
        out.push(SimplexVector::new(mixed)?);
    }
    Ok(out)
}

/// Index of the most probable class; ties go to the lower index.
pub fn argmax_class(dist: &SimplexVector) -> usize {
    let mut best = 0;
    for (i, &p) in dist.entries().iter().enumerate().skip(1) {
        if p > dist.entries()[best] {
            best = i;
        }
    }
    best
}

/// One line of a span output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub id: String,
    pub spans: Vec<ErrorSpan>,
}

/// Write span records as JSONL.
pub fn write_spans(records: &[SpanRecord], path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| Error::Format {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Read span records written by [`write_spans`].
pub fn read_spans(path: &Path) -> Result<Vec<SpanRecord>> {
    let display = path.display().to_string();
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SpanRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: display.clone(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}
