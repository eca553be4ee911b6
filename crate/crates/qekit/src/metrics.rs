//! Evaluation metrics: rank correlations for sentence scores, MCC and
//! per-class F1 for word tags, and severity-downweighted character-level F1
//! for error spans.
//!
//! Correlation inputs must be non-constant — the coefficients are undefined
//! otherwise and the functions return [`Error::Degenerate`]. MCC instead
//! follows the common convention of returning 0 when its denominator has a
//! zero factor. Word-level metrics operate on flat tag slices; callers pool
//! samples (e.g. per language pair) by concatenation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{ErrorSpan, SpanSeverity, WordTag};
use crate::error::{Error, Result};

/// Binary confusion counts with BAD as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Character-level span agreement with per-character half credit on severity
/// mismatches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanScore {
    /// Sum over characters marked erroneous on both sides: 1 per character if
    /// the severities match, 0.5 otherwise.
    pub weighted_tp: f64,
    pub pred_chars: usize,
    pub gold_chars: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn validate_paired(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimMismatch(format!(
            "correlation inputs have lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument(
            "correlation needs at least 2 points".into(),
        ));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "correlation inputs must be finite".into(),
        ));
    }
    Ok(())
}

fn is_constant(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    validate_paired(x, y)?;
    if is_constant(x) || is_constant(y) {
        return Err(Error::Degenerate(
            "correlation is undefined for a constant input".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Ranks 1..n with ties averaged ("fractional" ranking).
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite values"));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the average of ranks i+1..=j+1
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    validate_paired(x, y)?;
    if is_constant(x) || is_constant(y) {
        return Err(Error::Degenerate(
            "correlation is undefined for a constant input".into(),
        ));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Kendall rank correlation with the τ-b tie correction, by O(n²) pair
/// counting.
pub fn kendall(x: &[f64], y: &[f64]) -> Result<f64> {
    validate_paired(x, y)?;
    if is_constant(x) || is_constant(y) {
        return Err(Error::Degenerate(
            "correlation is undefined for a constant input".into(),
        ));
    }
    let n = x.len();
    let (mut concordant, mut discordant) = (0u64, 0u64);
    let (mut ties_x, mut ties_y) = (0u64, 0u64);
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 && dy == 0.0 {
                ties_x += 1;
                ties_y += 1;
            } else if dx == 0.0 {
                ties_x += 1;
            } else if dy == 0.0 {
                ties_y += 1;
            } else if (dx > 0.0) == (dy > 0.0) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as f64;
    let denom = ((n0 - ties_x as f64) * (n0 - ties_y as f64)).sqrt();
    Ok((concordant as f64 - discordant as f64) / denom)
}

/// Confusion counts over aligned tag slices, BAD positive.
pub fn confusion(pred: &[WordTag], gold: &[WordTag]) -> Result<ConfusionCounts> {
    if pred.len() != gold.len() {
        return Err(Error::DimMismatch(format!(
            "{} predicted tags vs {} gold tags",
            pred.len(),
            gold.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gold) {
        match (p, g) {
            (WordTag::Bad, WordTag::Bad) => c.tp += 1,
            (WordTag::Ok, WordTag::Ok) => c.tn += 1,
            (WordTag::Bad, WordTag::Ok) => c.fp += 1,
            (WordTag::Ok, WordTag::Bad) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Matthews correlation coefficient; 0 whenever a denominator factor is 0.
pub fn mcc(pred: &[WordTag], gold: &[WordTag]) -> Result<f64> {
    let c = confusion(pred, gold)?;
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0.0) {
        return Ok(0.0);
    }
    let denom = factors.iter().product::<f64>().sqrt();
    Ok((tp * tn - fp * fn_) / denom)
}

/// F1 for one class treated as positive; 0 when precision + recall = 0.
pub fn f1_class(pred: &[WordTag], gold: &[WordTag], positive: WordTag) -> Result<f64> {
    let c = confusion(pred, gold)?;
    let (tp, fp, fn_) = match positive {
        WordTag::Bad => (c.tp as f64, c.fp as f64, c.fn_ as f64),
        WordTag::Ok => (c.tn as f64, c.fn_ as f64, c.fp as f64),
    };
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Per-character severity map of one span list; `None` = no error.
fn char_severities(
    spans: &[ErrorSpan],
    mt_length: usize,
) -> Result<Vec<Option<SpanSeverity>>> {
    let mut map = vec![None; mt_length];
    let mut prev_end = 0usize;
    for (i, span) in spans.iter().enumerate() {
        if span.start >= span.end || span.end > mt_length {
            return Err(Error::InvalidArgument(format!(
                "span {i} [{}, {}) is invalid for a translation of {mt_length} characters",
                span.start, span.end
            )));
        }
        if i > 0 && span.start < prev_end {
            return Err(Error::InvalidArgument(format!(
                "span {i} overlaps or is out of order with the previous span"
            )));
        }
        prev_end = span.end;
        for slot in &mut map[span.start..span.end] {
            *slot = Some(span.severity);
        }
    }
    Ok(map)
}

/// Character-level span F1. Each character erroneous on both sides scores 1
/// when the severities match and 0.5 otherwise; precision and recall divide by
/// the number of predicted / gold erroneous characters (0 when the denominator
/// is 0).
pub fn span_f1(pred: &[ErrorSpan], gold: &[ErrorSpan], mt_length: usize) -> Result<SpanScore> {
    let p = char_severities(pred, mt_length)?;
    let g = char_severities(gold, mt_length)?;
    let mut weighted_tp = 0.0;
    let mut pred_chars = 0usize;
    let mut gold_chars = 0usize;
    for (ps, gs) in p.iter().zip(&g) {
        if ps.is_some() {
            pred_chars += 1;
        }
        if gs.is_some() {
            gold_chars += 1;
        }
        if let (Some(ps), Some(gs)) = (ps, gs) {
            weighted_tp += if ps == gs { 1.0 } else { 0.5 };
        }
    }
    let precision = if pred_chars > 0 {
        weighted_tp / pred_chars as f64
    } else {
        0.0
    };
    let recall = if gold_chars > 0 {
        weighted_tp / gold_chars as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(SpanScore {
        weighted_tp,
        pred_chars,
        gold_chars,
        precision,
        recall,
        f1,
    })
}

/// Score report: language pair → metric name → value. BTreeMap keeps file
/// output deterministic.
pub type Report = BTreeMap<String, BTreeMap<String, f64>>;

/// Render a report as pretty JSON.
pub fn report_json(report: &Report) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)
        .map_err(|e| Error::InvalidArgument(format!("report not serializable: {e}")))?;
    s.push('\n');
    Ok(s)
}

/// Render a report as a flat three-column TSV for spreadsheet import.
pub fn report_tsv(report: &Report) -> String {
    let mut out = String::from("lp\tmetric\tvalue\n");
    for (lp, metrics) in report {
        for (metric, value) in metrics {
            out.push_str(&format!("{lp}\t{metric}\t{value}\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const B: WordTag = WordTag::Bad;
    const O: WordTag = WordTag::Ok;

    /// Counting-based ranks: rank_i = 1 + #{j: x_j < x_i} + (#{j≠i: x_j = x_i})/2.
    /// Deliberately different from the sort-based implementation.
    fn ranks_by_counting(x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|&xi| {
                let below = x.iter().filter(|&&xj| xj < xi).count() as f64;
                let equal = x.iter().filter(|&&xj| xj == xi).count() as f64;
                1.0 + below + (equal - 1.0) / 2.0
            })
            .collect()
    }

    /// Single-pass moment-based Pearson, unlike the centered implementation.
    fn pearson_by_moments(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    /// Kendall τ-b from sign products rather than branch counting.
    fn kendall_by_signs(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len();
        let mut num = 0.0;
        let (mut pairs_x, mut pairs_y) = (0.0, 0.0);
        for i in 0..n {
            for j in (i + 1)..n {
                let sx = (x[i] - x[j]).signum();
                let sy = (y[i] - y[j]).signum();
                let sx = if x[i] == x[j] { 0.0 } else { sx };
                let sy = if y[i] == y[j] { 0.0 } else { sy };
                num += sx * sy;
                pairs_x += sx.abs();
                pairs_y += sy.abs();
            }
        }
        num / (pairs_x * pairs_y).sqrt()
    }

    #[test]
    fn spearman_monotone_cases() {
        let x = [0.3, 1.0, 2.5, 7.0];
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &rev).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn spearman_one_swap() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.0, 2.0, 4.0, 3.0];
        assert!((spearman(&x, &y).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn spearman_averages_tied_ranks() {
        let x = [1.0, 2.0, 2.0, 3.0];
        assert_eq!(average_ranks(&x), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(average_ranks(&x), ranks_by_counting(&x));
    }

    #[test]
    fn pearson_linear_map() {
        let x = [0.1, 0.4, 0.9, 1.6, 2.5];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kendall_small_cases() {
        let x = [1.0, 2.0, 3.0];
        assert!((kendall(&x, &[1.0, 3.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((kendall(&x, &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_input_is_an_error() {
        let c = [2.0, 2.0, 2.0];
        let x = [1.0, 2.0, 3.0];
        for f in [spearman, pearson, kendall] {
            assert!(matches!(f(&c, &x), Err(Error::Degenerate(_))));
            assert!(matches!(f(&x, &c), Err(Error::Degenerate(_))));
        }
    }

    #[test]
    fn correlations_match_brute_force_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let n = rng.random_range(2..=50);
            // Quantized values so ties actually occur.
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 2.0).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 2.0).collect();
            if is_constant(&x) || is_constant(&y) {
                continue;
            }
            let rx = ranks_by_counting(&x);
            let ry = ranks_by_counting(&y);
            assert!((spearman(&x, &y).unwrap() - pearson_by_moments(&rx, &ry)).abs() < 1e-12);
            assert!((pearson(&x, &y).unwrap() - pearson_by_moments(&x, &y)).abs() < 1e-12);
            assert!((kendall(&x, &y).unwrap() - kendall_by_signs(&x, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn spearman_invariant_under_positive_affine_maps() {
        let x = [0.25, 1.5, 0.75, 3.0, 1.5];
        let y = [1.0, 0.0, 2.0, 4.0, 3.0];
        let scaled: Vec<f64> = x.iter().map(|v| 7.0 * v + 3.0).collect();
        assert_eq!(spearman(&x, &y).unwrap(), spearman(&scaled, &y).unwrap());
    }

    #[test]
    fn mcc_reference_points() {
        assert!((mcc(&[B, O, B, O], &[B, O, B, O]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(mcc(&[B, O, B, O], &[B, O, O, B]).unwrap(), 0.0);
        assert!((mcc(&[B, O, B, O], &[O, B, O, B]).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn mcc_degenerate_denominator_is_zero() {
        assert_eq!(mcc(&[B, B, B, B], &[B, B, O, O]).unwrap(), 0.0);
        assert_eq!(mcc(&[B, O], &[B, B]).unwrap(), 0.0);
    }

    #[test]
    fn mcc_is_symmetric_and_relabel_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let flip = |t: WordTag| if t == B { O } else { B };
        for _ in 0..100 {
            let n = rng.random_range(2..=30);
            let p: Vec<WordTag> = (0..n).map(|_| if rng.random::<bool>() { B } else { O }).collect();
            let g: Vec<WordTag> = (0..n).map(|_| if rng.random::<bool>() { B } else { O }).collect();
            let m = mcc(&p, &g).unwrap();
            assert!((m - mcc(&g, &p).unwrap()).abs() < 1e-15);
            let pf: Vec<WordTag> = p.iter().map(|&t| flip(t)).collect();
            let gf: Vec<WordTag> = g.iter().map(|&t| flip(t)).collect();
            assert!((m - mcc(&pf, &gf).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn mcc_equals_pearson_of_indicators() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let n = rng.random_range(2..=50);
            let p: Vec<WordTag> = (0..n).map(|_| if rng.random::<bool>() { B } else { O }).collect();
            let g: Vec<WordTag> = (0..n).map(|_| if rng.random::<bool>() { B } else { O }).collect();
            let pi: Vec<f64> = p.iter().map(|&t| f64::from(t == B)).collect();
            let gi: Vec<f64> = g.iter().map(|&t| f64::from(t == B)).collect();
            match pearson(&pi, &gi) {
                Ok(r) => assert!((mcc(&p, &g).unwrap() - r).abs() < 1e-12),
                Err(_) => assert_eq!(mcc(&p, &g).unwrap(), 0.0),
            }
        }
    }

    #[test]
    fn f1_reference_points() {
        let gold = [B, B, O, O];
        let all_bad = [B, B, B, B];
        assert!((f1_class(&gold, &gold, B).unwrap() - 1.0).abs() < 1e-15);
        assert!((f1_class(&gold, &gold, O).unwrap() - 1.0).abs() < 1e-15);
        assert!((f1_class(&all_bad, &gold, B).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_class(&all_bad, &gold, O).unwrap(), 0.0);
    }

    #[test]
    fn tag_metrics_reject_length_mismatch() {
        assert!(mcc(&[B], &[B, O]).is_err());
        assert!(f1_class(&[B], &[B, O], B).is_err());
    }

    fn span(start: usize, end: usize, severity: SpanSeverity) -> ErrorSpan {
        ErrorSpan { start, end, severity }
    }

    #[test]
    fn span_f1_exact_match() {
        let s = [span(2, 7, SpanSeverity::Major)];
        let score = span_f1(&s, &s, 10).unwrap();
        assert_eq!(score.weighted_tp, 5.0);
        assert_eq!((score.precision, score.recall, score.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn span_f1_half_credit_on_severity_mismatch() {
        let p = [span(2, 7, SpanSeverity::Minor)];
        let g = [span(2, 7, SpanSeverity::Major)];
        let score = span_f1(&p, &g, 10).unwrap();
        assert_eq!(score.weighted_tp, 2.5);
        assert_eq!((score.precision, score.recall, score.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn span_f1_empty_sides() {
        let g = [span(0, 4, SpanSeverity::Major)];
        let score = span_f1(&[], &g, 8).unwrap();
        assert_eq!((score.precision, score.recall, score.f1), (0.0, 0.0, 0.0));
        let score = span_f1(&[], &[], 8).unwrap();
        assert_eq!(score.f1, 0.0);
    }

    #[test]
    fn span_f1_partial_overlap() {
        // pred [0,4), gold [2,6), both MAJOR: 2 shared chars, 4 each side.
        let p = [span(0, 4, SpanSeverity::Major)];
        let g = [span(2, 6, SpanSeverity::Major)];
        let score = span_f1(&p, &g, 10).unwrap();
        assert_eq!(score.weighted_tp, 2.0);
        assert_eq!(score.precision, 0.5);
        assert_eq!(score.recall, 0.5);
        assert_eq!(score.f1, 0.5);
    }

    #[test]
    fn span_f1_rejects_invalid_spans() {
        let bad = [span(3, 2, SpanSeverity::Major)];
        assert!(span_f1(&bad, &[], 10).is_err());
        let overlapping = [span(0, 4, SpanSeverity::Major), span(2, 6, SpanSeverity::Minor)];
        assert!(span_f1(&overlapping, &[], 10).is_err());
        let out_of_range = [span(0, 11, SpanSeverity::Major)];
        assert!(span_f1(&[], &out_of_range, 10).is_err());
    }

    #[test]
    fn span_f1_matches_f1_bad_on_single_char_tokens() {
        // Tokens of one character each, severities all MAJOR: span F1 must
        // equal tag-level F1-BAD.
        let pred_tags = [B, O, B, B, O];
        let gold_tags = [B, B, O, B, O];
        let to_spans = |tags: &[WordTag]| -> Vec<ErrorSpan> {
            let mut spans = Vec::new();
            let mut i = 0;
            while i < tags.len() {
                if tags[i] == B {
                    let start = i;
                    while i < tags.len() && tags[i] == B {
                        i += 1;
                    }
                    spans.push(span(start, i, SpanSeverity::Major));
                } else {
                    i += 1;
                }
            }
            spans
        };
        let s = span_f1(&to_spans(&pred_tags), &to_spans(&gold_tags), 5).unwrap();
        let f = f1_class(&pred_tags, &gold_tags, B).unwrap();
        assert!((s.f1 - f).abs() < 1e-15);
    }

    #[test]
    fn report_rendering_is_deterministic() {
        let mut report = Report::new();
        report
            .entry("en-de".into())
            .or_default()
            .insert("spearman".into(), 0.5);
        report
            .entry("en-de".into())
            .or_default()
            .insert("pearson".into(), 0.25);
        report
            .entry("zh-en".into())
            .or_default()
            .insert("spearman".into(), -0.125);
        let tsv = report_tsv(&report);
        assert_eq!(
            tsv,
            "lp\tmetric\tvalue\nen-de\tpearson\t0.25\nen-de\tspearman\t0.5\nzh-en\tspearman\t-0.125\n"
        );
        let json = report_json(&report).unwrap();
        assert!(json.contains("\"en-de\""));
        assert_eq!(report_json(&report).unwrap(), json);
    }
}
