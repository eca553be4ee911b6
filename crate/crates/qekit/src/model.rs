//! The QE head stack: sparsemax-weighted layer pooling, a CLS-based sentence
//! regression head, and a per-token linear classification head.
//!
//! Pooling computes H_mix = λ · Σ_ℓ β_ℓ H_ℓ with β = sparsemax(φ), so the
//! model can learn to ignore layers entirely (β entries may be exactly zero).
//! Both heads read H_mix: the sentence head applies a two-layer tanh
//! feed-forward to the CLS row, and the word head a linear projection plus
//! softmax to each target-token row. Scores are regressed unbounded; clipping
//! to [0, 1] happens only at reporting time.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, HiddenStates};
use crate::error::{Error, Result};
use crate::numerics::{softmax, sparsemax, SimplexVector, Tensor};

/// Scalar-mix parameters: H_mix = λ Σ_ℓ sparsemax(φ)_ℓ H_ℓ. φ has L+1 entries —
/// the embedding layer participates in the mix.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingParams {
    pub lambda: f64,
    pub phi: Vec<f64>,
}

/// Two-layer feed-forward regression head on the CLS vector:
/// ŷ = w2ᵀ·tanh(W1ᵀx + b1) + b2.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceHead {
    /// d×h, row-major.
    pub w1: Tensor,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

/// Linear projection to per-token class logits; n_classes is 2 for OK/BAD
/// quality tags or 3 for OK/MINOR/MAJOR severities.
#[derive(Debug, Clone, PartialEq)]
pub struct WordHead {
    /// d×n_classes, row-major.
    pub w: Tensor,
    pub b: Vec<f64>,
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub pooling: PoolingParams,
    pub sent: SentenceHead,
    pub word: WordHead,
}

/// Shape card for a parameter set; stored in checkpoint headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Number of pooled layers, L+1.
    pub n_layers: usize,
    pub d: usize,
    pub h: usize,
    pub n_classes: usize,
}

impl ModelDims {
    pub fn n_params(&self) -> usize {
        // lambda + phi + W1 + b1 + w2 + b2 + W + b
        1 + self.n_layers
            + self.d * self.h
            + self.h
            + self.h
            + 1
            + self.d * self.n_classes
            + self.n_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 || self.d < 1 || self.h < 1 {
            return Err(Error::InvalidArgument(format!(
                "model dims need n_layers ≥ 2, d ≥ 1, h ≥ 1, got {self:?}"
            )));
        }
        if !(self.n_classes == 2 || self.n_classes == 3) {
            return Err(Error::InvalidArgument(format!(
                "word head supports 2 or 3 classes, got {}",
                self.n_classes
            )));
        }
        Ok(())
    }
}

impl ModelParams {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            n_layers: self.pooling.phi.len(),
            d: self.sent.w1.dims()[0],
            h: self.sent.w1.dims()[1],
            n_classes: self.word.w.dims()[1],
        }
    }

    /// Verify internal consistency and finiteness.
    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        dims.validate()?;
        if self.sent.b1.len() != dims.h || self.sent.w2.len() != dims.h {
            return Err(Error::DimMismatch(
                "sentence-head bias/output sizes disagree with W1".into(),
            ));
        }
        if self.word.w.dims()[0] != dims.d || self.word.b.len() != dims.n_classes {
            return Err(Error::DimMismatch(
                "word-head shapes disagree with the model dims".into(),
            ));
        }
        let finite = self.pooling.lambda.is_finite()
            && self.pooling.phi.iter().all(|v| v.is_finite())
            && self.sent.b2.is_finite();
        if !finite {
            return Err(Error::InvalidArgument(
                "model parameters must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Check compatibility with one sample's hidden states.
    pub fn check_against(&self, h: &HiddenStates) -> Result<()> {
        let dims = self.dims();
        if h.n_layers() != dims.n_layers {
            return Err(Error::DimMismatch(format!(
                "pooling has {} layer weights but hidden states carry {} layers",
                dims.n_layers,
                h.n_layers()
            )));
        }
        if h.d() != dims.d {
            return Err(Error::DimMismatch(format!(
                "model hidden size {} vs encoder hidden size {}",
                dims.d,
                h.d()
            )));
        }
        Ok(())
    }

    /// All parameters as one vector, in checkpoint order:
    /// λ, φ, W1 (row-major), b1, w2, b2, W (row-major), b.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.dims().n_params());
        flat.push(self.pooling.lambda);
        flat.extend(&self.pooling.phi);
        flat.extend(self.sent.w1.values());
        flat.extend(&self.sent.b1);
        flat.extend(&self.sent.w2);
        flat.push(self.sent.b2);
        flat.extend(self.word.w.values());
        flat.extend(&self.word.b);
        flat
    }

    /// Rebuild parameters from [`ModelParams::to_flat`] output.
    pub fn from_flat(dims: ModelDims, flat: &[f64]) -> Result<Self> {
        dims.validate()?;
        if flat.len() != dims.n_params() {
            return Err(Error::DimMismatch(format!(
                "expected {} parameters for {dims:?}, got {}",
                dims.n_params(),
                flat.len()
            )));
        }
        let mut at = 0usize;
        let mut take = |n: usize| {
            let slice = &flat[at..at + n];
            at += n;
            slice.to_vec()
        };
        let lambda = take(1)[0];
        let phi = take(dims.n_layers);
        let w1 = Tensor::new(vec![dims.d, dims.h], take(dims.d * dims.h))?;
        let b1 = take(dims.h);
        let w2 = take(dims.h);
        let b2 = take(1)[0];
        let w = Tensor::new(vec![dims.d, dims.n_classes], take(dims.d * dims.n_classes))?;
        let b = take(dims.n_classes);
        Ok(ModelParams {
            pooling: PoolingParams { lambda, phi },
            sent: SentenceHead { w1, b1, w2, b2 },
            word: WordHead { w, b },
        })
    }
}

/// Layer-mix weights β = sparsemax(φ).
pub fn pooling_beta(p: &PoolingParams) -> Result<SimplexVector> {
    sparsemax(&p.phi)
}

/// Unscaled mix Σ_ℓ β_ℓ H_ℓ[token]; multiply by λ for the pooled row.
pub fn mix_row(h: &HiddenStates, beta: &[f64], token: usize) -> Vec<f64> {
    let d = h.d();
    let mut out = vec![0.0; d];
    for (l, &b) in beta.iter().enumerate() {
        if b == 0.0 {
            continue;
        }
        let row = h.row(l, token);
        for j in 0..d {
            out[j] += b * row[j];
        }
    }
    out
}

/// Scalar mix over the whole sequence: a [T, d] tensor with rows λ·Σ_ℓ β_ℓ H_ℓ[t].
pub fn layer_pool(h: &HiddenStates, p: &PoolingParams) -> Result<Tensor> {
    if p.phi.len() != h.n_layers() {
        return Err(Error::DimMismatch(format!(
            "phi has {} entries but hidden states carry {} layers",
            p.phi.len(),
            h.n_layers()
        )));
    }
    let beta = pooling_beta(p)?;
    let (t, d) = (h.seq_len(), h.d());
    let mut out = Tensor::zeros(vec![t, d])?;
    for ti in 0..t {
        let mixed = mix_row(h, beta.entries(), ti);
        let base = out.row_offset(&[ti]);
        for (slot, &m) in out.values_mut()[base..base + d].iter_mut().zip(&mixed) {
            *slot = p.lambda * m;
        }
    }
    Ok(out)
}

/// Sentence score ŷ from the pooled CLS vector.
pub fn sentence_forward(params: &ModelParams, h: &HiddenStates) -> Result<f64> {
    params.check_against(h)?;
    let beta = pooling_beta(&params.pooling)?;
    let x: Vec<f64> = mix_row(h, beta.entries(), h.cls_index())
        .into_iter()
        .map(|v| params.pooling.lambda * v)
        .collect();
    let dims = params.dims();
    let mut y = params.sent.b2;
    for k in 0..dims.h {
        let mut pre = params.sent.b1[k];
        for (j, &xj) in x.iter().enumerate() {
            pre += params.sent.w1.values()[j * dims.h + k] * xj;
        }
        y += params.sent.w2[k] * pre.tanh();
    }
    Ok(y)
}

/// Class distributions for every target token, in order. Source and special
/// tokens are excluded.
pub fn word_forward(params: &ModelParams, h: &HiddenStates) -> Result<Vec<SimplexVector>> {
    params.check_against(h)?;
    let beta = pooling_beta(&params.pooling)?;
    let dims = params.dims();
    let mut out = Vec::new();
    for ti in h.target_indices() {
        let x: Vec<f64> = mix_row(h, beta.entries(), ti)
            .into_iter()
            .map(|v| params.pooling.lambda * v)
            .collect();
        let mut logits = params.word.b.clone();
        for (j, &xj) in x.iter().enumerate() {
            for (c, logit) in logits.iter_mut().enumerate() {
                *logit += params.word.w.values()[j * dims.n_classes + c] * xj;
            }
        }
        out.push(softmax(&logits)?);
    }
    Ok(out)
}

/// Fresh parameters: λ = 1, φ = 0 (uniform β), biases zero, weight matrices
/// from a seeded symmetric uniform distribution scaled by 1/√fan_in.
pub fn init_params(
    cfg: &EncoderConfig,
    n_classes: usize,
    h_hidden: usize,
    seed: u64,
) -> Result<ModelParams> {
    cfg.validate()?;
    let dims = ModelDims {
        n_layers: cfg.l + 1,
        d: cfg.d,
        h: h_hidden,
        n_classes,
    };
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
    };
    let w1 = Tensor::new(vec![dims.d, dims.h], uniform(dims.d * dims.h, dims.d))?;
    let w2 = uniform(dims.h, dims.h);
    let w = Tensor::new(
        vec![dims.d, dims.n_classes],
        uniform(dims.d * dims.n_classes, dims.d),
    )?;
    Ok(ModelParams {
        pooling: PoolingParams {
            lambda: 1.0,
            phi: vec![0.0; dims.n_layers],
        },
        sent: SentenceHead {
            w1,
            b1: vec![0.0; dims.h],
            w2,
            b2: 0.0,
        },
        word: WordHead {
            w,
            b: vec![0.0; dims.n_classes],
        },
    })
}

/// A parameter snapshot plus the seed that produced its training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    dims: ModelDims,
    seed: u64,
}

const CHECKPOINT_FORMAT: &str = "qekit-checkpoint";

/// Write a checkpoint: one JSON header line, then every parameter as
/// little-endian f64 in [`ModelParams::to_flat`] order. Lossless.
pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.params.validate()?;
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        dims: ckpt.params.dims(),
        seed: ckpt.seed,
    };
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Format {
        path: path.display().to_string(),
        line: 1,
        message: e.to_string(),
    })?;
    w.write_all(b"\n")?;
    for v in ckpt.params.to_flat() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let display = path.display().to_string();
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: CheckpointHeader =
        serde_json::from_str(header_line.trim_end()).map_err(|e| Error::Format {
            path: display.clone(),
            line: 1,
            message: format!("field `header`: {e}"),
        })?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Format {
            path: display,
            line: 1,
            message: format!(
                "field `format`: expected \"{CHECKPOINT_FORMAT}\", got \"{}\"",
                header.format
            ),
        });
    }
    if header.version != 1 {
        return Err(Error::Format {
            path: display,
            line: 1,
            message: format!("field `version`: unsupported version {}", header.version),
        });
    }
    let expected = header.dims.n_params();
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    if body.len() != expected * 8 {
        return Err(Error::Format {
            path: display,
            line: 1,
            message: format!(
                "field `dims`: header promises {expected} f64 values ({} bytes), body has {} bytes",
                expected * 8,
                body.len()
            ),
        });
    }
    let flat: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let params = ModelParams::from_flat(header.dims, &flat)?;
    Ok(Checkpoint {
        params,
        seed: header.seed,
    })
}
