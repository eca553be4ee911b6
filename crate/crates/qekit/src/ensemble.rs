//! Per-language-pair ensembling: weighted averaging of sentence scores,
//! the combined-tag rule s = α·Σ_i w_i·c_i for word tags, and a deterministic
//! weight search.
//!
//! The search seeds its candidate pool with every one-hot weight vector
//! (α = 1), adds `budget` random draws (weights from a symmetric Dirichlet,
//! α log-uniform on [0.25, 4]), and refines the best candidate by coordinate
//! descent with a shrinking step. One-hot seeding makes the result provably
//! no worse than the best single model on the same dev set. Candidates are
//! compared by (objective, candidate index), so results are bit-for-bit
//! reproducible for a given seed under any parallelism.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WordTag;
use crate::error::{Error, Result};
use crate::metrics;
use crate::par;

/// Search box for the BAD-tag weight α.
pub const ALPHA_MIN: f64 = 0.25;
pub const ALPHA_MAX: f64 = 4.0;

/// Default decision threshold for the combined tag score.
pub const DEFAULT_TAG_THRESHOLD: f64 = 0.5;

/// Normalized model weights and the BAD-tag weight α for one language pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    /// Model ids, aligned with `w`.
    pub models: Vec<String>,
    pub w: Vec<f64>,
    pub alpha: f64,
}

impl EnsembleWeights {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.models.len() != self.w.len() {
            return Err(Error::InvalidArgument(format!(
                "{} model ids for {} weights",
                self.models.len(),
                self.w.len()
            )));
        }
        if self.w.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "model weights must be nonnegative and finite".into(),
            ));
        }
        let sum: f64 = self.w.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "model weights sum to {sum}, not 1"
            )));
        }
        if !(ALPHA_MIN..=ALPHA_MAX).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha {} outside [{ALPHA_MIN}, {ALPHA_MAX}]",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Per-model sentence scores over a shared sample list.
#[derive(Debug, Clone, PartialEq)]
pub struct SentencePreds {
    pub sample_ids: Vec<String>,
    pub models: BTreeMap<String, Vec<f64>>,
}

impl SentencePreds {
    pub fn new(sample_ids: Vec<String>, models: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidArgument("no models in prediction set".into()));
        }
        for (id, scores) in &models {
            if scores.len() != sample_ids.len() {
                return Err(Error::DimMismatch(format!(
                    "model `{id}` covers {} samples, expected {}",
                    scores.len(),
                    sample_ids.len()
                )));
            }
        }
        Ok(Self { sample_ids, models })
    }
}

/// Per-model word tags over a shared sample list; tag lengths must agree
/// across models sample by sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TagPreds {
    pub sample_ids: Vec<String>,
    pub models: BTreeMap<String, Vec<Vec<WordTag>>>,
}

impl TagPreds {
    pub fn new(
        sample_ids: Vec<String>,
        models: BTreeMap<String, Vec<Vec<WordTag>>>,
    ) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidArgument("no models in prediction set".into()));
        }
        let mut reference: Option<(&String, Vec<usize>)> = None;
        for (id, tags) in &models {
            if tags.len() != sample_ids.len() {
                return Err(Error::DimMismatch(format!(
                    "model `{id}` covers {} samples, expected {}",
                    tags.len(),
                    sample_ids.len()
                )));
            }
            let lens: Vec<usize> = tags.iter().map(Vec::len).collect();
            match &reference {
                None => reference = Some((id, lens)),
                Some((ref_id, ref_lens)) => {
                    if *ref_lens != lens {
                        return Err(Error::DimMismatch(format!(
                            "models `{ref_id}` and `{id}` disagree on tag lengths"
                        )));
                    }
                }
            }
        }
        Ok(Self { sample_ids, models })
    }
}

fn aligned_model_scores<'a, T>(
    models: &'a BTreeMap<String, Vec<T>>,
    weights: &EnsembleWeights,
) -> Result<Vec<&'a Vec<T>>> {
    if weights.models.len() != models.len() {
        return Err(Error::DimMismatch(format!(
            "weights name {} models but predictions carry {}",
            weights.models.len(),
            models.len()
        )));
    }
    weights
        .models
        .iter()
        .map(|id| {
            models.get(id).ok_or_else(|| {
                Error::InvalidArgument(format!("weights name model `{id}` with no predictions"))
            })
        })
        .collect()
}

/// Weighted average of per-model sentence scores: Σ_i w_i·ŷ^{(i)}.
pub fn combine_sentence(preds: &SentencePreds, weights: &EnsembleWeights) -> Result<Vec<f64>> {
    weights.validate()?;
    let per_model = aligned_model_scores(&preds.models, weights)?;
    let n = preds.sample_ids.len();
    let mut out = vec![0.0; n];
    for (w, scores) in weights.w.iter().zip(&per_model) {
        for (o, s) in out.iter_mut().zip(scores.iter()) {
            *o += w * s;
        }
    }
    Ok(out)
}

/// The combined-tag score s = α·Σ_i w_i·c_i, with c_i = 1 for a BAD vote.
/// Depends on (α, w) only through the products α·w_i.
pub fn combined_tag_score(w: &[f64], alpha: f64, bad_votes: &[bool]) -> f64 {
    alpha
        * w.iter()
            .zip(bad_votes)
            .map(|(wi, &c)| wi * f64::from(c))
            .sum::<f64>()
}

/// Combined tags: per token, s = α·Σ_i w_i·c_i with c_i = 1 for BAD;
/// emit BAD iff s ≥ threshold.
pub fn combine_tags(
    preds: &TagPreds,
    weights: &EnsembleWeights,
    threshold: f64,
) -> Result<Vec<Vec<WordTag>>> {
    weights.validate()?;
    if !threshold.is_finite() {
        return Err(Error::InvalidArgument("threshold must be finite".into()));
    }
    let per_model = aligned_model_scores(&preds.models, weights)?;
    let n = preds.sample_ids.len();
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let len = per_model[0][s].len();
        let mut sample_tags = Vec::with_capacity(len);
        for t in 0..len {
            let votes: Vec<bool> = per_model.iter().map(|m| m[s][t] == WordTag::Bad).collect();
            let score = combined_tag_score(&weights.w, weights.alpha, &votes);
            sample_tags.push(if score >= threshold { WordTag::Bad } else { WordTag::Ok });
        }
        out.push(sample_tags);
    }
    Ok(out)
}

/// What a weight search optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchObjective {
    Spearman,
    Mcc,
}

impl SearchObjective {
    pub fn name(self) -> &'static str {
        match self {
            SearchObjective::Spearman => "spearman",
            SearchObjective::Mcc => "mcc",
        }
    }
}

/// Outcome of a weight search: the weights and the dev objective they achieve.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub weights: EnsembleWeights,
    pub objective: f64,
}

struct Candidate {
    w: Vec<f64>,
    alpha: f64,
}

fn normalized(mut w: Vec<f64>) -> Option<Vec<f64>> {
    let sum: f64 = w.iter().sum();
    if sum <= 0.0 {
        return None;
    }
    for v in &mut w {
        *v /= sum;
    }
    Some(w)
}

/// Core search: one-hot seeding, random draws, then coordinate descent.
/// `eval` scores a (weights, α) pair; candidates whose evaluation fails
/// (e.g. a constant single model under Spearman) are skipped.
fn search_generic(
    n_models: usize,
    budget: usize,
    seed: u64,
    tune_alpha: bool,
    eval: impl Fn(&[f64], f64) -> Result<f64> + Sync,
) -> Result<(Vec<f64>, f64, f64)> {
    if budget < n_models {
        return Err(Error::InvalidArgument(format!(
            "search budget {budget} is below the model count {n_models}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<Candidate> = (0..n_models)
        .map(|i| {
            let mut w = vec![0.0; n_models];
            w[i] = 1.0;
            Candidate { w, alpha: 1.0 }
        })
        .collect();
    for _ in 0..budget {
        // Symmetric Dirichlet via normalized unit exponentials.
        let raw: Vec<f64> = (0..n_models)
            .map(|_| -(1.0 - rng.random::<f64>()).ln())
            .collect();
        let w = normalized(raw).expect("exponential draws are positive");
        let alpha = if tune_alpha {
            rng.random_range(ALPHA_MIN.ln()..ALPHA_MAX.ln())
                .exp()
                .clamp(ALPHA_MIN, ALPHA_MAX)
        } else {
            1.0
        };
        pool.push(Candidate { w, alpha });
    }

    let scores = par::map(&pool, |c| eval(&c.w, c.alpha).ok());
    let mut best: Option<(f64, usize)> = None;
    for (i, score) in scores.iter().enumerate() {
        if let Some(s) = score {
            if best.is_none_or(|(b, _)| *s > b) {
                best = Some((*s, i));
            }
        }
    }
    let (mut best_score, best_idx) =
        best.ok_or_else(|| Error::Degenerate("no searchable candidate evaluates".into()))?;
    let mut w = pool[best_idx].w.clone();
    let mut alpha = pool[best_idx].alpha;

    for sweep in 0..20 {
        let step = 0.25 * 0.8f64.powi(sweep);
        for i in 0..n_models {
            for dir in [1.0, -1.0] {
                let mut cand = w.clone();
                cand[i] = (cand[i] + dir * step).max(0.0);
                let Some(cand) = normalized(cand) else { continue };
                if let Ok(s) = eval(&cand, alpha) {
                    if s > best_score {
                        best_score = s;
                        w = cand;
                    }
                }
            }
        }
        if tune_alpha {
            for dir in [1.0, -1.0] {
                let cand = (alpha * (1.0 + dir * step)).clamp(ALPHA_MIN, ALPHA_MAX);
                if let Ok(s) = eval(&w, cand) {
                    if s > best_score {
                        best_score = s;
                        alpha = cand;
                    }
                }
            }
        }
    }
    Ok((w, alpha, best_score))
}

/// Find sentence-ensemble weights maximizing Spearman against `gold`.
/// α is irrelevant for score averaging and fixed at 1.
pub fn search_weights_sentence(
    preds: &SentencePreds,
    gold: &[f64],
    budget: usize,
    seed: u64,
) -> Result<SearchResult> {
    if gold.len() != preds.sample_ids.len() {
        return Err(Error::DimMismatch(format!(
            "{} gold scores for {} samples",
            gold.len(),
            preds.sample_ids.len()
        )));
    }
    if gold.windows(2).all(|p| p[0] == p[1]) {
        return Err(Error::Degenerate(
            "gold scores are constant; spearman is undefined".into(),
        ));
    }
    let models: Vec<String> = preds.models.keys().cloned().collect();
    let per_model: Vec<&Vec<f64>> = preds.models.values().collect();
    let eval = |w: &[f64], _alpha: f64| -> Result<f64> {
        let mut combined = vec![0.0; gold.len()];
        for (wi, scores) in w.iter().zip(&per_model) {
            for (o, s) in combined.iter_mut().zip(scores.iter()) {
                *o += wi * s;
            }
        }
        metrics::spearman(&combined, gold)
    };
    let (w, _, objective) = search_generic(models.len(), budget, seed, false, eval)?;
    Ok(SearchResult {
        weights: EnsembleWeights { models, w, alpha: 1.0 },
        objective,
    })
}

/// Find tag-ensemble weights and α maximizing MCC against `gold`.
pub fn search_weights_tags(
    preds: &TagPreds,
    gold: &[Vec<WordTag>],
    budget: usize,
    seed: u64,
    threshold: f64,
) -> Result<SearchResult> {
    if gold.len() != preds.sample_ids.len() {
        return Err(Error::DimMismatch(format!(
            "{} gold tag lists for {} samples",
            gold.len(),
            preds.sample_ids.len()
        )));
    }
    let flat_gold: Vec<WordTag> = gold.iter().flatten().copied().collect();
    let has_both = flat_gold.contains(&WordTag::Ok) && flat_gold.contains(&WordTag::Bad);
    if !has_both {
        return Err(Error::Degenerate(
            "gold tags are single-class; mcc is undefined".into(),
        ));
    }
    let models: Vec<String> = preds.models.keys().cloned().collect();
    let per_model: Vec<&Vec<Vec<WordTag>>> = preds.models.values().collect();
    let eval = |w: &[f64], alpha: f64| -> Result<f64> {
        let mut flat_pred = Vec::with_capacity(flat_gold.len());
        for s in 0..gold.len() {
            let len = per_model[0][s].len();
            if len != gold[s].len() {
                return Err(Error::DimMismatch(format!(
                    "sample {s}: {len} predicted tags vs {} gold",
                    gold[s].len()
                )));
            }
            for t in 0..len {
                let votes: Vec<bool> =
                    per_model.iter().map(|m| m[s][t] == WordTag::Bad).collect();
                let score = combined_tag_score(w, alpha, &votes);
                flat_pred.push(if score >= threshold { WordTag::Bad } else { WordTag::Ok });
            }
        }
        metrics::mcc(&flat_pred, &flat_gold)
    };
    let (w, alpha, objective) = search_generic(models.len(), budget, seed, true, eval)?;
    Ok(SearchResult {
        weights: EnsembleWeights { models, w, alpha },
        objective,
    })
}

/// One language pair's entry in the weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsEntry {
    pub models: Vec<String>,
    pub w: Vec<f64>,
    pub alpha: f64,
    /// Achieved dev objective.
    pub objective: f64,
    /// Which metric `objective` reports.
    pub metric: String,
    pub budget: usize,
    pub seed: u64,
}

impl WeightsEntry {
    pub fn ensemble_weights(&self) -> EnsembleWeights {
        EnsembleWeights {
            models: self.models.clone(),
            w: self.w.clone(),
            alpha: self.alpha,
        }
    }
}

/// Weights file contents: language pair → searched weights.
pub type WeightsFile = BTreeMap<String, WeightsEntry>;

pub fn write_weights(weights: &WeightsFile, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, weights).map_err(|e| Error::Format {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<WeightsFile> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let weights: WeightsFile = serde_json::from_reader(reader).map_err(|e| Error::Format {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    for (lp, entry) in &weights {
        entry.ensemble_weights().validate().map_err(|e| Error::Format {
            path: path.display().to_string(),
            line: 0,
            message: format!("entry `{lp}`: {e}"),
        })?;
    }
    Ok(weights)
}
