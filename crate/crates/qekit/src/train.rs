//! Multi-task loss, analytic gradients, and the deterministic training loop.
//!
//! The loss is L = λ_SL·½(y − ŷ)² + λ_WL·(−1/n Σ_i w_{y_i} log p(y_i)),
//! averaged over the batch. Gradients are hand-derived backpropagation
//! through the heads, the scalar-mix pooling, and sparsemax (whose Jacobian is
//! symmetric, so the vector-Jacobian product reuses `sparsemax_jvp`). If φ
//! sits on a sparsemax nondifferentiability, the gradient is evaluated at a
//! deterministically perturbed φ (three retries, then an error).
//!
//! The optimizer is adaptive moment estimation (0.9/0.999, ε=1e-8). Batch
//! order is a seeded shuffle per epoch, and per-sample gradients are reduced
//! in sample order regardless of worker count, so training is bit-for-bit
//! reproducible for a given seed.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WordTag;
use crate::encoder::HiddenStates;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{mix_row, pooling_beta, ModelDims, ModelParams};
use crate::numerics::{softmax, sparsemax_jvp, SimplexVector};
use crate::par;

/// Task mixing weights and the word-level class weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_sl: f64,
    pub lambda_wl: f64,
    /// One positive weight per word-head class.
    pub class_weights: Vec<f64>,
}

impl LossConfig {
    /// λ_SL = 1, λ_WL = 0: a fully sentence-level model.
    pub fn sentence_only() -> Self {
        Self { lambda_sl: 1.0, lambda_wl: 0.0, class_weights: vec![1.0, 1.0] }
    }

    /// λ_SL = 0, λ_WL = 1: a word-level model.
    pub fn word_only(n_classes: usize) -> Self {
        Self { lambda_sl: 0.0, lambda_wl: 1.0, class_weights: vec![1.0; n_classes] }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_sl >= 0.0 && self.lambda_wl >= 0.0)
            || !self.lambda_sl.is_finite()
            || !self.lambda_wl.is_finite()
        {
            return Err(Error::Config(
                "loss weights lambda_sl and lambda_wl must be finite and ≥ 0".into(),
            ));
        }
        if self.lambda_sl + self.lambda_wl <= 0.0 {
            return Err(Error::Config(
                "at least one of lambda_sl, lambda_wl must be positive".into(),
            ));
        }
        if self.class_weights.is_empty()
            || self.class_weights.iter().any(|&w| w <= 0.0 || !w.is_finite())
        {
            return Err(Error::Config("class_weights must all be positive".into()));
        }
        Ok(())
    }
}

/// Optimization hyperparameters. `max_epochs = 0` is allowed and returns the
/// initial parameters untouched; `patience` is only constrained when training
/// actually runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many consecutive epochs without dev improvement.
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            seed,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::Config("moment coefficients must lie in (0, 1)".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.max_epochs > 0 && (self.patience == 0 || self.patience > self.max_epochs) {
            return Err(Error::Config(
                "patience must satisfy 1 ≤ patience ≤ max_epochs".into(),
            ));
        }
        Ok(())
    }
}

/// One sample ready for training: hidden states plus whatever supervision it
/// carries (class indices into the word head's label space).
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: String,
    pub hidden: HiddenStates,
    pub score: Option<f64>,
    pub tags: Option<Vec<usize>>,
}

/// OK/BAD tags as word-head class indices (OK = 0, BAD = 1).
pub fn tag_classes(tags: &[WordTag]) -> Vec<usize> {
    tags.iter()
        .map(|t| usize::from(*t == WordTag::Bad))
        .collect()
}

/// Sentence regression loss: ½(y − ŷ)².
pub fn loss_sentence(y: f64, y_hat: f64) -> f64 {
    0.5 * (y - y_hat) * (y - y_hat)
}

/// Class-weighted word cross-entropy: −(1/n) Σ_i w_{y_i} log p(y_i).
pub fn loss_word(tags: &[usize], probs: &[SimplexVector], w: &[f64]) -> Result<f64> {
    if tags.len() != probs.len() || tags.is_empty() {
        return Err(Error::DimMismatch(format!(
            "{} tags vs {} distributions (need equal and nonempty)",
            tags.len(),
            probs.len()
        )));
    }
    let mut sum = 0.0;
    for (&gold, p) in tags.iter().zip(probs) {
        let Some(&w_gold) = w.get(gold) else {
            return Err(Error::InvalidArgument(format!(
                "gold class {gold} has no class weight (|w| = {})",
                w.len()
            )));
        };
        let p_gold = *p.entries().get(gold).ok_or_else(|| {
            Error::DimMismatch(format!(
                "gold class {gold} outside a {}-class distribution",
                p.len()
            ))
        })?;
        if p_gold <= 0.0 {
            return Err(Error::Degenerate(format!(
                "zero probability at gold class {gold}"
            )));
        }
        sum += w_gold * p_gold.ln();
    }
    Ok(-sum / tags.len() as f64)
}

/// Multi-task combination: λ_SL·L_SL + λ_WL·L_WL.
pub fn loss_combined(ls: f64, lw: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda_sl * ls + cfg.lambda_wl * lw
}

/// Verify that every example carries the supervision the loss needs.
pub fn ensure_supervision(examples: &[TrainExample], cfg: &LossConfig) -> Result<()> {
    for ex in examples {
        if cfg.lambda_sl > 0.0 && ex.score.is_none() {
            return Err(Error::Config(format!(
                "sample `{}` has no `score` but lambda_sl > 0",
                ex.id
            )));
        }
        if cfg.lambda_wl > 0.0 && ex.tags.is_none() {
            return Err(Error::Config(format!(
                "sample `{}` has no `tags` but lambda_wl > 0",
                ex.id
            )));
        }
    }
    Ok(())
}

/// Flat-parameter offsets, mirroring [`ModelParams::to_flat`] order.
struct Offsets {
    phi: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w: usize,
    b: usize,
    total: usize,
}

impl Offsets {
    fn of(dims: ModelDims) -> Self {
        let phi = 1;
        let w1 = phi + dims.n_layers;
        let b1 = w1 + dims.d * dims.h;
        let w2 = b1 + dims.h;
        let b2 = w2 + dims.h;
        let w = b2 + 1;
        let b = w + dims.d * dims.n_classes;
        Self { phi, w1, b1, w2, b2, w, b, total: b + dims.n_classes }
    }
}

/// Loss and flat gradient of one example at fixed β = sparsemax(φ).
fn sample_loss_grad(
    params: &ModelParams,
    beta: &[f64],
    ex: &TrainExample,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    params.check_against(&ex.hidden)?;
    let dims = params.dims();
    let off = Offsets::of(dims);
    let mut g = vec![0.0; off.total];
    let lambda = params.pooling.lambda;
    let h = &ex.hidden;

    // dL/dx for every token we touch, to be pushed through pooling afterwards.
    let mut dx_tokens: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new(); // (token, u_t, dx_t)

    let mut ls = 0.0;
    if cfg.lambda_sl > 0.0 {
        let y = ex.score.ok_or_else(|| {
            Error::Config(format!("sample `{}` has no `score` but lambda_sl > 0", ex.id))
        })?;
        let u = mix_row(h, beta, h.cls_index());
        let x: Vec<f64> = u.iter().map(|v| lambda * v).collect();
        let mut act = vec![0.0; dims.h];
        let mut y_hat = params.sent.b2;
        for (k, a) in act.iter_mut().enumerate() {
            let mut pre = params.sent.b1[k];
            for (j, &xj) in x.iter().enumerate() {
                pre += params.sent.w1.values()[j * dims.h + k] * xj;
            }
            *a = pre.tanh();
            y_hat += params.sent.w2[k] * *a;
        }
        ls = loss_sentence(y, y_hat);

        let dy = cfg.lambda_sl * (y_hat - y);
        g[off.b2] += dy;
        let mut dx = vec![0.0; dims.d];
        for k in 0..dims.h {
            g[off.w2 + k] += dy * act[k];
            let dpre = dy * params.sent.w2[k] * (1.0 - act[k] * act[k]);
            g[off.b1 + k] += dpre;
            for (j, &xj) in x.iter().enumerate() {
                g[off.w1 + j * dims.h + k] += dpre * xj;
                dx[j] += dpre * params.sent.w1.values()[j * dims.h + k];
            }
        }
        dx_tokens.push((h.cls_index(), u, dx));
    }

    let mut lw = 0.0;
    if cfg.lambda_wl > 0.0 {
        let tags = ex.tags.as_ref().ok_or_else(|| {
            Error::Config(format!("sample `{}` has no `tags` but lambda_wl > 0", ex.id))
        })?;
        let targets = h.target_indices();
        if tags.len() != targets.len() {
            return Err(Error::DimMismatch(format!(
                "sample `{}`: {} tags for {} target tokens",
                ex.id,
                tags.len(),
                targets.len()
            )));
        }
        if cfg.class_weights.len() != dims.n_classes {
            return Err(Error::Config(format!(
                "{} class weights for a {}-class word head",
                cfg.class_weights.len(),
                dims.n_classes
            )));
        }
        let n = targets.len() as f64;
        let mut sum = 0.0;
        for (&gold, &ti) in tags.iter().zip(&targets) {
            if gold >= dims.n_classes {
                return Err(Error::InvalidArgument(format!(
                    "sample `{}`: gold class {gold} outside {} classes",
                    ex.id, dims.n_classes
                )));
            }
            let u = mix_row(h, beta, ti);
            let x: Vec<f64> = u.iter().map(|v| lambda * v).collect();
            let mut logits = params.word.b.clone();
            for (j, &xj) in x.iter().enumerate() {
                for (c, logit) in logits.iter_mut().enumerate() {
                    *logit += params.word.w.values()[j * dims.n_classes + c] * xj;
                }
            }
            let p = softmax(&logits)?;
            let p_gold = p.entries()[gold];
            if p_gold <= 0.0 {
                return Err(Error::Degenerate(format!(
                    "zero probability at gold class {gold}"
                )));
            }
            let w_gold = cfg.class_weights[gold];
            sum += w_gold * p_gold.ln();

            // d(λ_WL·L_WL)/dlogit_c = (λ_WL/n)·w_gold·(p_c − [c = gold])
            let scale = cfg.lambda_wl * w_gold / n;
            let mut dx = vec![0.0; dims.d];
            for c in 0..dims.n_classes {
                let dlogit = scale * (p.entries()[c] - f64::from(c == gold));
                g[off.b + c] += dlogit;
                for (j, &xj) in x.iter().enumerate() {
                    g[off.w + j * dims.n_classes + c] += dlogit * xj;
                    dx[j] += dlogit * params.word.w.values()[j * dims.n_classes + c];
                }
            }
            dx_tokens.push((ti, u, dx));
        }
        lw = -sum / n;
    }

    // Pooling backward: x_t = λ·u_t, u_t = Σ_ℓ β_ℓ H_ℓ[t].
    let mut dbeta = vec![0.0; dims.n_layers];
    for (ti, u, dx) in &dx_tokens {
        for (j, &dxj) in dx.iter().enumerate() {
            g[0] += dxj * u[j]; // dλ
        }
        for (l, db) in dbeta.iter_mut().enumerate() {
            let row = h.row(l, *ti);
            let mut dot = 0.0;
            for (j, &dxj) in dx.iter().enumerate() {
                dot += dxj * row[j];
            }
            *db += lambda * dot;
        }
    }
    // dφ = Jᵀ·dβ; the sparsemax Jacobian is symmetric.
    let dphi = sparsemax_jvp(&params.pooling.phi, &dbeta)?;
    for (l, dp) in dphi.iter().enumerate() {
        g[off.phi + l] += dp;
    }

    Ok((loss_combined(ls, lw, cfg), g))
}

/// Mean loss of a batch (forward only).
pub fn batch_loss(params: &ModelParams, batch: &[&TrainExample], cfg: &LossConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("batch must be nonempty".into()));
    }
    cfg.validate()?;
    let results = par::map(batch, |ex| -> Result<f64> {
        params.check_against(&ex.hidden)?;
        let mut ls = 0.0;
        if cfg.lambda_sl > 0.0 {
            let y = ex.score.ok_or_else(|| {
                Error::Config(format!("sample `{}` has no `score` but lambda_sl > 0", ex.id))
            })?;
            let y_hat = crate::model::sentence_forward(params, &ex.hidden)?;
            ls = loss_sentence(y, y_hat);
        }
        let mut lw = 0.0;
        if cfg.lambda_wl > 0.0 {
            let tags = ex.tags.as_ref().ok_or_else(|| {
                Error::Config(format!("sample `{}` has no `tags` but lambda_wl > 0", ex.id))
            })?;
            let probs = crate::model::word_forward(params, &ex.hidden)?;
            lw = loss_word(tags, &probs, &cfg.class_weights)?;
        }
        Ok(loss_combined(ls, lw, cfg))
    });
    let mut total = 0.0;
    for r in results {
        total += r?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean batch loss and its analytic gradient, shaped like the parameters.
///
/// If φ lies on a sparsemax nondifferentiability, φ is perturbed by a
/// deterministic multiple of 1e-7 (up to three retries); the returned
/// gradient is then the gradient at the perturbed point.
pub fn grad(
    params: &ModelParams,
    batch: &[&TrainExample],
    cfg: &LossConfig,
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("batch must be nonempty".into()));
    }
    cfg.validate()?;
    params.validate()?;
    let dims = params.dims();

    // The boundary flag depends only on φ, not on the cotangent; probe once,
    // perturbing deterministically until clear.
    let mut work = params.clone();
    let probe = vec![1.0; dims.n_layers];
    let mut cleared = false;
    for attempt in 0..=3u32 {
        if attempt > 0 {
            for (i, p) in work.pooling.phi.iter_mut().enumerate() {
                *p = params.pooling.phi[i] + 1e-7 * f64::from(attempt) * (i + 1) as f64;
            }
        }
        match sparsemax_jvp(&work.pooling.phi, &probe) {
            Ok(_) => {
                cleared = true;
                break;
            }
            Err(Error::Boundary(_)) if attempt < 3 => continue,
            Err(e) => return Err(e),
        }
    }
    if !cleared {
        return Err(Error::Boundary(0));
    }

    let beta = pooling_beta(&work.pooling)?;
    let results = par::map(batch, |ex| sample_loss_grad(&work, beta.entries(), ex, cfg));
    let n = batch.len() as f64;
    let mut total_loss = 0.0;
    let mut acc = vec![0.0; dims.n_params()];
    for r in results {
        let (loss, g) = r?;
        total_loss += loss;
        for (a, gi) in acc.iter_mut().zip(&g) {
            *a += gi;
        }
    }
    for a in &mut acc {
        *a /= n;
    }
    Ok((total_loss / n, ModelParams::from_flat(dims, &acc)?))
}

/// Adaptive moment estimation over the flat parameter vector.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, cfg: &TrainConfig, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// One line of the training history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_objective: f64,
    /// Whether this epoch's parameters became the best checkpoint so far.
    pub selected: bool,
}

/// Dev-set model-selection objective: Spearman of sentence scores when the
/// loss is sentence-only, MCC of word tags when word-only, and the unweighted
/// mean of both otherwise. Word predictions are argmax classes, binarized as
/// BAD = any non-OK class.
pub fn dev_objective(
    params: &ModelParams,
    dev: &[TrainExample],
    cfg: &LossConfig,
) -> Result<f64> {
    if dev.is_empty() {
        return Err(Error::InvalidArgument("dev set must be nonempty".into()));
    }
    let mut parts = Vec::new();
    if cfg.lambda_sl > 0.0 {
        let pairs = par::map(dev, |ex| -> Result<(f64, f64)> {
            let y = ex.score.ok_or_else(|| {
                Error::Config(format!("dev sample `{}` has no `score`", ex.id))
            })?;
            Ok((crate::model::sentence_forward(params, &ex.hidden)?, y))
        });
        let mut pred = Vec::with_capacity(dev.len());
        let mut gold = Vec::with_capacity(dev.len());
        for r in pairs {
            let (p, g) = r?;
            pred.push(p);
            gold.push(g);
        }
        parts.push(metrics::spearman(&pred, &gold)?);
    }
    if cfg.lambda_wl > 0.0 {
        let tag_pairs = par::map(dev, |ex| -> Result<(Vec<WordTag>, Vec<WordTag>)> {
            let gold = ex.tags.as_ref().ok_or_else(|| {
                Error::Config(format!("dev sample `{}` has no `tags`", ex.id))
            })?;
            let probs = crate::model::word_forward(params, &ex.hidden)?;
            let pred = probs
                .iter()
                .map(|p| {
                    if crate::span::argmax_class(p) == 0 {
                        WordTag::Ok
                    } else {
                        WordTag::Bad
                    }
                })
                .collect();
            let gold = gold
                .iter()
                .map(|&c| if c == 0 { WordTag::Ok } else { WordTag::Bad })
                .collect();
            Ok((pred, gold))
        });
        let mut pred = Vec::new();
        let mut gold = Vec::new();
        for r in tag_pairs {
            let (p, g) = r?;
            pred.extend(p);
            gold.extend(g);
        }
        parts.push(metrics::mcc(&pred, &gold)?);
    }
    Ok(parts.iter().sum::<f64>() / parts.len() as f64)
}

/// Train the head stack. Deterministic in `train_cfg.seed`; returns the
/// parameters with the best dev objective and the per-epoch history.
pub fn train(
    train_set: &[TrainExample],
    dev_set: &[TrainExample],
    init: ModelParams,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    loss_cfg.validate()?;
    train_cfg.validate()?;
    init.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    ensure_supervision(train_set, loss_cfg)?;
    ensure_supervision(dev_set, loss_cfg)?;
    if train_cfg.max_epochs == 0 {
        return Ok((init, Vec::new()));
    }
    if dev_set.is_empty() {
        return Err(Error::Config("dev set is empty".into()));
    }

    let dims = init.dims();
    let mut flat = init.to_flat();
    let mut adam = Adam::new(flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut history = Vec::new();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut epochs_since_best = 0usize;

    for epoch in 1..=train_cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(train_cfg.batch_size) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let params = ModelParams::from_flat(dims, &flat)?;
            let (loss, g) = grad(&params, &batch, loss_cfg)?;
            loss_sum += loss * batch.len() as f64;
            adam.step(train_cfg, &mut flat, &g.to_flat());
        }
        let train_loss = loss_sum / train_set.len() as f64;

        let params = ModelParams::from_flat(dims, &flat)?;
        let objective = dev_objective(&params, dev_set, loss_cfg)?;
        let selected = best.as_ref().is_none_or(|(b, _)| objective > *b);
        if selected {
            best = Some((objective, params));
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
        }
        history.push(EpochRecord { epoch, train_loss, dev_objective: objective, selected });
        if epochs_since_best >= train_cfg.patience {
            break;
        }
    }

    let (_, best_params) = best.expect("at least one epoch ran");
    Ok((best_params, history))
}

/// Write the training history as JSONL, one epoch per line.
pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for record in history {
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

/// Read a history file written by [`write_history`].
pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let display = path.display().to_string();
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EpochRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: display.clone(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::QESample;
    use crate::encoder::{encode_toy, EncoderConfig};
    use crate::model::init_params;
    use crate::numerics::finite_diff_grad;
    use rand::Rng;

    fn cfg() -> EncoderConfig {
        EncoderConfig { d: 6, l: 2, seed: 3 }
    }

    fn probs(entries: Vec<f64>) -> SimplexVector {
        SimplexVector::new(entries).unwrap()
    }

    fn example(rng: &mut ChaCha8Rng, id: usize, n_classes: usize) -> TrainExample {
        let words = ["haus", "baum", "apfel", "zug", "berg", "fluss", "stern", "meer"];
        let n_mt = rng.random_range(2..=5);
        let n_src = rng.random_range(2..=5);
        let pick = |rng: &mut ChaCha8Rng, n: usize| -> String {
            (0..n)
                .map(|_| words[rng.random_range(0..words.len())])
                .collect::<Vec<_>>()
                .join(" ")
        };
        let sample = QESample {
            id: format!("ex{id}"),
            lp: "en-de".into(),
            src: pick(rng, n_src),
            mt: pick(rng, n_mt),
            score: None,
            tags: None,
            spans: None,
        };
        let hidden = encode_toy(&sample, &cfg()).unwrap();
        TrainExample {
            id: sample.id,
            hidden,
            score: Some(rng.random_range(0.0..1.0)),
            tags: Some((0..n_mt).map(|_| rng.random_range(0..n_classes)).collect()),
        }
    }

    #[test]
    fn loss_sentence_reference_points() {
        assert_eq!(loss_sentence(1.0, 1.0), 0.0);
        assert_eq!(loss_sentence(1.0, 0.0), 0.5);
        assert!((loss_sentence(0.3, 0.7) - 0.08).abs() < 1e-15);
    }

    #[test]
    fn loss_word_perfect_and_uniform() {
        // One-hot at the gold class → log 1 = 0; the zero sits off-gold.
        let perfect = vec![probs(vec![0.0, 1.0]), probs(vec![1.0, 0.0])];
        assert_eq!(loss_word(&[1, 0], &perfect, &[1.0, 1.0]).unwrap(), 0.0);
        let uniform = vec![probs(vec![0.5, 0.5])];
        let l = loss_word(&[1], &uniform, &[1.0, 1.0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let two = vec![probs(vec![0.5, 0.5]), probs(vec![0.5, 0.5])];
        let l = loss_word(&[1, 1], &two, &[1.0, 2.0]).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_word_zero_probability_at_gold_is_an_error() {
        let p = vec![probs(vec![1.0, 0.0])];
        assert!(matches!(
            loss_word(&[1], &p, &[1.0, 1.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn loss_combined_is_linear() {
        let cfg = LossConfig { lambda_sl: 0.5, lambda_wl: 0.5, class_weights: vec![1.0, 1.0] };
        assert!((loss_combined(0.2, 0.4, &cfg) - 0.3).abs() < 1e-15);
        let sl = LossConfig::sentence_only();
        assert_eq!(loss_combined(0.2, 9.9, &sl), 0.2);
        let wl = LossConfig::word_only(2);
        assert_eq!(loss_combined(9.9, 0.4, &wl), 0.4);
        // exact linearity in (λ_SL, λ_WL)
        for (a, b) in [(0.25, 1.5), (2.0, 0.125)] {
            let c = LossConfig { lambda_sl: a, lambda_wl: b, class_weights: vec![1.0, 1.0] };
            assert_eq!(loss_combined(0.75, 0.375, &c), a * 0.75 + b * 0.375);
        }
    }

    #[test]
    fn doubling_a_class_weight_doubles_its_contribution() {
        let dists = vec![
            probs(vec![0.7, 0.3]),
            probs(vec![0.2, 0.8]),
            probs(vec![0.4, 0.6]),
        ];
        let tags = [0usize, 1, 1];
        let base = loss_word(&tags, &dists, &[1.0, 1.0]).unwrap();
        let doubled = loss_word(&tags, &dists, &[1.0, 2.0]).unwrap();
        let bad_part: f64 = -(0.8f64.ln() + 0.6f64.ln()) / 3.0;
        assert!((doubled - base - bad_part).abs() < 1e-15);
    }

    #[test]
    fn unused_heads_get_exactly_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let exs: Vec<TrainExample> = (0..3).map(|i| example(&mut rng, i, 2)).collect();
        let batch: Vec<&TrainExample> = exs.iter().collect();
        let params = init_params(&cfg(), 2, 3, 8).unwrap();

        let (_, g) = grad(&params, &batch, &LossConfig::sentence_only()).unwrap();
        assert!(g.word.w.values().iter().all(|&v| v == 0.0));
        assert!(g.word.b.iter().all(|&v| v == 0.0));

        let (_, g) = grad(&params, &batch, &LossConfig::word_only(2)).unwrap();
        assert!(g.sent.w1.values().iter().all(|&v| v == 0.0));
        assert!(g.sent.w2.iter().all(|&v| v == 0.0));
        assert_eq!(g.sent.b2, 0.0);
    }

    /// Screen out φ draws that sit on a sparsemax kink so the finite-diff
    /// comparison is evaluated where the loss is differentiable.
    fn boundary_free(phi: &[f64]) -> bool {
        sparsemax_jvp(phi, &vec![1.0; phi.len()]).is_ok()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        while checked < 30 {
            let n_classes = if rng.random::<bool>() { 2 } else { 3 };
            let exs: Vec<TrainExample> =
                (0..4).map(|i| example(&mut rng, i, n_classes)).collect();
            let batch: Vec<&TrainExample> = exs.iter().collect();
            let mut params = init_params(&cfg(), n_classes, 3, rng.random()).unwrap();
            params.pooling.lambda = rng.random_range(-1.0..2.0);
            for p in &mut params.pooling.phi {
                *p = rng.random_range(-1.0..1.0);
            }
            params.sent.b1.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
            params.sent.b2 = rng.random_range(-0.5..0.5);
            params.word.b.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
            if !boundary_free(&params.pooling.phi) {
                continue;
            }
            let loss_cfg = LossConfig {
                lambda_sl: rng.random_range(0.0..2.0),
                lambda_wl: rng.random_range(0.1..2.0),
                class_weights: (0..n_classes).map(|_| rng.random_range(0.5..2.0)).collect(),
            };
            let (_, analytic) = grad(&params, &batch, &loss_cfg).unwrap();
            let analytic = analytic.to_flat();
            let dims = params.dims();
            let flat = params.to_flat();
            let f = |x: &[f64]| -> crate::error::Result<f64> {
                let p = ModelParams::from_flat(dims, x)?;
                batch_loss(&p, &batch, &loss_cfg)
            };
            let numeric = finite_diff_grad(f, &flat, 1e-5).unwrap();
            for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
                assert!(rel < 1e-6, "param {i}: analytic {a:.3e} vs numeric {n:.3e}");
            }
            checked += 1;
        }
    }

    #[test]
    fn small_gradient_step_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..100 {
            let exs: Vec<TrainExample> = (0..3).map(|i| example(&mut rng, i, 2)).collect();
            let batch: Vec<&TrainExample> = exs.iter().collect();
            let mut params = init_params(&cfg(), 2, 3, rng.random()).unwrap();
            params.sent.b2 = rng.random_range(-0.5..0.5);
            let loss_cfg = LossConfig {
                lambda_sl: 1.0,
                lambda_wl: 1.0,
                class_weights: vec![1.0, 1.0],
            };
            let (loss_before, g) = grad(&params, &batch, &loss_cfg).unwrap();
            let flat: Vec<f64> = params
                .to_flat()
                .iter()
                .zip(&g.to_flat())
                .map(|(p, gi)| p - 1e-6 * gi)
                .collect();
            let stepped = ModelParams::from_flat(params.dims(), &flat).unwrap();
            let loss_after = batch_loss(&stepped, &batch, &loss_cfg).unwrap();
            assert!(
                loss_after <= loss_before + 1e-15,
                "trial {trial}: {loss_before} -> {loss_after}"
            );
        }
    }

    #[test]
    fn grad_perturbs_phi_off_sparsemax_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let exs: Vec<TrainExample> = (0..2).map(|i| example(&mut rng, i, 2)).collect();
        let batch: Vec<&TrainExample> = exs.iter().collect();
        let mut params = init_params(&cfg(), 2, 3, 4).unwrap();
        // Support is {0} with τ = 0, so the second entry's gap is −5e-10 —
        // strictly inside the boundary window; an unperturbed jvp flags it.
        params.pooling.phi = vec![1.0, -5e-10, -3.0];
        assert!(!boundary_free(&params.pooling.phi));
        let (loss, g) = grad(&params, &batch, &LossConfig::sentence_only()).unwrap();
        assert!(loss.is_finite());
        assert!(g.to_flat().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn train_runs_deterministically() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let train_set: Vec<TrainExample> = (0..12).map(|i| example(&mut rng, i, 2)).collect();
        let dev_set: Vec<TrainExample> = (100..108).map(|i| example(&mut rng, i, 2)).collect();
        let loss_cfg = LossConfig {
            lambda_sl: 0.5,
            lambda_wl: 0.5,
            class_weights: vec![1.0, 1.0],
        };
        let mut tc = TrainConfig::new(7);
        tc.max_epochs = 3;
        tc.patience = 3;
        tc.batch_size = 4;
        let init = init_params(&cfg(), 2, 3, 7).unwrap();
        let (p1, h1) = train(&train_set, &dev_set, init.clone(), &loss_cfg, &tc).unwrap();
        let (p2, h2) = train(&train_set, &dev_set, init, &loss_cfg, &tc).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 3);
        assert!(h1[0].selected);
    }

    #[test]
    fn train_zero_epochs_returns_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let train_set: Vec<TrainExample> = (0..4).map(|i| example(&mut rng, i, 2)).collect();
        let init = init_params(&cfg(), 2, 3, 7).unwrap();
        let mut tc = TrainConfig::new(7);
        tc.max_epochs = 0;
        let (p, h) = train(&train_set, &[], init.clone(), &LossConfig::sentence_only(), &tc)
            .unwrap();
        assert_eq!(p, init);
        assert!(h.is_empty());
    }

    #[test]
    fn train_rejects_missing_supervision_before_compute() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mut ex = example(&mut rng, 0, 2);
        ex.score = None;
        let init = init_params(&cfg(), 2, 3, 7).unwrap();
        let tc = TrainConfig::new(7);
        match train(&[ex], &[], init, &LossConfig::sentence_only(), &tc) {
            Err(Error::Config(m)) => assert!(m.contains("score"), "{m}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn history_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.jsonl");
        let records = vec![
            EpochRecord { epoch: 1, train_loss: 0.5, dev_objective: 0.25, selected: true },
            EpochRecord { epoch: 2, train_loss: 0.375, dev_objective: 0.5, selected: true },
        ];
        write_history(&records, &path).unwrap();
        assert_eq!(read_history(&path).unwrap(), records);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { lambda_sl: 0.0, lambda_wl: 0.0, class_weights: vec![1.0] }
            .validate()
            .is_err());
        assert!(LossConfig { lambda_sl: 1.0, lambda_wl: 0.0, class_weights: vec![1.0, 0.0] }
            .validate()
            .is_err());
        let mut tc = TrainConfig::new(1);
        tc.patience = 0;
        assert!(tc.validate().is_err());
        let mut tc = TrainConfig::new(1);
        tc.patience = tc.max_epochs + 1;
        assert!(tc.validate().is_err());
        let mut tc = TrainConfig::new(1);
        tc.max_epochs = 0;
        tc.patience = 0;
        assert!(tc.validate().is_ok(), "patience unconstrained when nothing runs");
    }
}
