//! Deterministic toy encoder and hidden-state file I/O.
//!
//! The encoder consumes the concatenated input `[cls] target [sep] source
//! [eos]` and produces one hidden-state matrix per layer, H_0..H_L, together
//! with token-to-character alignment for the target side. It is untrained and
//! fixed: layer 0 is a seeded hash embedding of each whitespace token plus a
//! sinusoidal position signal, and every deeper layer applies a fixed seeded
//! linear mixing across the sequence followed by tanh. Only the head stack on
//! top of these states is ever trained.
//!
//! Hidden states can be written to disk (JSON header + packed little-endian
//! f32 body) so that states exported from a real encoder can be swapped in.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::QESample;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Hard cap on sequence length (tokens including specials). Longer inputs are
/// rejected rather than truncated.
pub const MAX_LEN: usize = 512;

/// Which text a token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextSide {
    Target,
    Source,
    Special,
}

/// One token's position in the sequence and, for content tokens, its
/// character interval `[char_start, char_end)` in the originating text.
/// Indices count Unicode scalar values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRange {
    pub token_index: usize,
    pub text_side: TextSide,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub char_start: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub char_end: Option<usize>,
}

/// Per-layer encoder outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    /// Dims `[L+1, T, d]`: layers H_0..H_L over T tokens.
    pub layers: Tensor,
    pub ranges: Vec<TokenRange>,
}

impl HiddenStates {
    pub fn new(layers: Tensor, ranges: Vec<TokenRange>) -> Result<Self> {
        if layers.dims().len() != 3 {
            return Err(Error::DimMismatch(format!(
                "hidden states need dims [L+1, T, d], got {:?}",
                layers.dims()
            )));
        }
        if layers.dims()[1] != ranges.len() {
            return Err(Error::DimMismatch(format!(
                "{} tokens in tensor but {} token ranges",
                layers.dims()[1],
                ranges.len()
            )));
        }
        if ranges.first().map(|r| r.text_side) != Some(TextSide::Special) {
            return Err(Error::InvalidArgument(
                "first token must be the CLS special token".into(),
            ));
        }
        Ok(Self { layers, ranges })
    }

    /// Number of stored layers, L+1.
    pub fn n_layers(&self) -> usize {
        self.layers.dims()[0]
    }

    /// Sequence length T (content tokens plus specials).
    pub fn seq_len(&self) -> usize {
        self.layers.dims()[1]
    }

    /// Hidden size d.
    pub fn d(&self) -> usize {
        self.layers.dims()[2]
    }

    /// Position of the CLS token; always the first.
    pub fn cls_index(&self) -> usize {
        0
    }

    /// Row H_ℓ[t], a d-vector.
    pub fn row(&self, layer: usize, token: usize) -> &[f64] {
        self.layers.row(&[layer, token])
    }

    /// Sequence positions of target-side tokens, in order.
    pub fn target_indices(&self) -> Vec<usize> {
        self.ranges
            .iter()
            .filter(|r| r.text_side == TextSide::Target)
            .map(|r| r.token_index)
            .collect()
    }

    /// Largest absolute elementwise difference against another state of the
    /// same shape.
    pub fn max_abs_diff(&self, other: &HiddenStates) -> f64 {
        self.layers
            .values()
            .iter()
            .zip(other.layers.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Shape and seeding of the toy encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Hidden size d ≥ 1.
    pub d: usize,
    /// Number of transform layers L ≥ 1 (L+1 hidden-state matrices).
    pub l: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 || self.l < 1 {
            return Err(Error::InvalidArgument(format!(
                "encoder needs d ≥ 1 and L ≥ 1, got d={}, L={}",
                self.d, self.l
            )));
        }
        Ok(())
    }
}

/// FNV-1a hash of (seed, token, dim), mapped to [-1, 1]. Platform-stable: the
/// same inputs give bit-identical output everywhere.
fn unit_hash(seed: u64, token: &str, dim: usize) -> f64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for byte in seed
        .to_le_bytes()
        .iter()
        .chain(token.as_bytes())
        .chain(&(dim as u64).to_le_bytes())
    {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(PRIME);
    }
    // Top 53 bits → [0, 1) exactly representable, then stretch to [-1, 1).
    let unit = (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    2.0 * unit - 1.0
}

/// Standard sinusoidal position signal, dimension `j` at position `pos`.
fn position_signal(pos: usize, j: usize, d: usize) -> f64 {
    let pair = (j / 2) as f64;
    let rate = (10_000f64).powf(-2.0 * pair / d as f64);
    let angle = pos as f64 * rate;
    if j.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Per-layer mixing coefficients, drawn once from the config seed.
struct LayerMix {
    self_w: f64,
    left_w: f64,
    right_w: f64,
    mean_w: f64,
    rotate_w: f64,
    bias: Vec<f64>,
}

fn layer_mixes(cfg: &EncoderConfig) -> Vec<LayerMix> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.l)
        .map(|_| LayerMix {
            self_w: rng.random_range(-0.6..0.6),
            left_w: rng.random_range(-0.6..0.6),
            right_w: rng.random_range(-0.6..0.6),
            mean_w: rng.random_range(-0.4..0.4),
            rotate_w: rng.random_range(-0.6..0.6),
            bias: (0..cfg.d).map(|_| rng.random_range(-0.3..0.3)).collect(),
        })
        .collect()
}

/// Maximal runs of non-whitespace characters with `[start, end)` char indices.
/// Matches `str::split_whitespace` word-for-word.
fn char_words(text: &str) -> Vec<(String, usize, usize)> {
    let mut words = Vec::new();
    let mut current = String::new();
    let mut start = 0usize;
    for (pos, ch) in text.chars().enumerate() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                words.push((std::mem::take(&mut current), start, pos));
            }
        } else {
            if current.is_empty() {
                start = pos;
            }
            current.push(ch);
        }
    }
    if !current.is_empty() {
        let end = text.chars().count();
        words.push((current, start, end));
    }
    words
}

/// Target-side token ranges for a translation string, without encoding it.
/// Token indices follow the `[cls] target …` layout, so the ranges align
/// with those produced by [`encode_toy`] on the same text.
pub fn target_word_ranges(mt: &str) -> Vec<TokenRange> {
    char_words(mt)
        .into_iter()
        .enumerate()
        .map(|(i, (_, start, end))| TokenRange {
            token_index: i + 1,
            text_side: TextSide::Target,
            char_start: Some(start),
            char_end: Some(end),
        })
        .collect()
}

/// Encode one sample deterministically. Layout: `[cls] target [sep] source
/// [eos]`. Target token ranges tile the non-whitespace characters of the
/// translation exactly.
pub fn encode_toy(sample: &QESample, cfg: &EncoderConfig) -> Result<HiddenStates> {
    cfg.validate()?;
    let target_words = char_words(&sample.mt);
    let source_words = char_words(&sample.src);
    if target_words.is_empty() || source_words.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "sample `{}`: source and translation must each contain a word",
            sample.id
        )));
    }

    let mut tokens: Vec<(String, TokenRange)> = Vec::new();
    let push = |tokens: &mut Vec<(String, TokenRange)>,
                    text: String,
                    side: TextSide,
                    range: Option<(usize, usize)>| {
        let token_index = tokens.len();
        tokens.push((
            text,
            TokenRange {
                token_index,
                text_side: side,
                char_start: range.map(|r| r.0),
                char_end: range.map(|r| r.1),
            },
        ));
    };
    push(&mut tokens, "[cls]".into(), TextSide::Special, None);
    for (word, start, end) in target_words {
        push(&mut tokens, word, TextSide::Target, Some((start, end)));
    }
    push(&mut tokens, "[sep]".into(), TextSide::Special, None);
    for (word, start, end) in source_words {
        push(&mut tokens, word, TextSide::Source, Some((start, end)));
    }
    push(&mut tokens, "[eos]".into(), TextSide::Special, None);

    let t = tokens.len();
    if t > MAX_LEN {
        return Err(Error::InvalidArgument(format!(
            "sample `{}`: {t} tokens exceed the maximum length {MAX_LEN}",
            sample.id
        )));
    }

    let (l, d) = (cfg.l, cfg.d);
    let mut layers = Tensor::zeros(vec![l + 1, t, d])?;

    // Layer 0: context-free token embedding + position signal.
    for (ti, (word, _)) in tokens.iter().enumerate() {
        let base = layers.row_offset(&[0, ti]);
        for j in 0..d {
            layers.values_mut()[base + j] =
                unit_hash(cfg.seed, word, j) + position_signal(ti, j, d);
        }
    }

    // Layers 1..=L: linear mix of self, neighbours, feature rotation, and the
    // sequence mean, then tanh.
    for (li, mix) in layer_mixes(cfg).iter().enumerate() {
        let prev_layer = li; // reading H_li, writing H_{li+1}
        let mut mean = vec![0.0; d];
        for ti in 0..t {
            let row = layers.row(&[prev_layer, ti]);
            for j in 0..d {
                mean[j] += row[j];
            }
        }
        for m in &mut mean {
            *m /= t as f64;
        }
        for ti in 0..t {
            let mut out = vec![0.0; d];
            {
                let own = layers.row(&[prev_layer, ti]);
                for j in 0..d {
                    out[j] = mix.self_w * own[j]
                        + mix.rotate_w * own[(j + 1) % d]
                        + mix.mean_w * mean[j]
                        + mix.bias[j];
                }
            }
            if ti > 0 {
                let left = layers.row(&[prev_layer, ti - 1]);
                for j in 0..d {
                    out[j] += mix.left_w * left[j];
                }
            }
            if ti + 1 < t {
                let right = layers.row(&[prev_layer, ti + 1]);
                for j in 0..d {
                    out[j] += mix.right_w * right[j];
                }
            }
            let base = layers.row_offset(&[prev_layer + 1, ti]);
            for (slot, &o) in layers.values_mut()[base..base + d].iter_mut().zip(&out) {
                *slot = o.tanh();
            }
        }
    }

    HiddenStates::new(layers, tokens.into_iter().map(|(_, r)| r).collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct HiddenHeader {
    dtype: String,
    layout: String,
    dims: Vec<usize>,
    ranges: Vec<TokenRange>,
}

/// Write hidden states: one JSON header line, then exactly (L+1)·T·d
/// little-endian f32 values.
pub fn write_hidden(h: &HiddenStates, path: &Path) -> Result<()> {
    let header = HiddenHeader {
        dtype: "f32".into(),
        layout: "row-major".into(),
        dims: h.layers.dims().to_vec(),
        ranges: h.ranges.clone(),
    };
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Format {
        path: path.display().to_string(),
        line: 1,
        message: e.to_string(),
    })?;
    w.write_all(b"\n")?;
    for &v in h.layers.values() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read hidden states written by [`write_hidden`]. The body must contain
/// exactly the number of floats the header promises.
pub fn read_hidden(path: &Path) -> Result<HiddenStates> {
    let display = path.display().to_string();
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: HiddenHeader =
        serde_json::from_str(header_line.trim_end()).map_err(|e| Error::Format {
            path: display.clone(),
            line: 1,
            message: format!("field `header`: {e}"),
        })?;
    if header.dtype != "f32" {
        return Err(Error::Format {
            path: display,
            line: 1,
            message: format!("field `dtype`: expected \"f32\", got \"{}\"", header.dtype),
        });
    }
    if header.layout != "row-major" {
        return Err(Error::Format {
            path: display,
            line: 1,
            message: format!(
                "field `layout`: expected \"row-major\", got \"{}\"",
                header.layout
            ),
        });
    }
    if header.dims.len() != 3 {
        return Err(Error::Format {
            path: display,
            line: 1,
            message: format!("field `dims`: expected 3 dims, got {:?}", header.dims),
        });
    }
    let expected: usize = header.dims.iter().product();
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    if body.len() != expected * 4 {
        return Err(Error::Format {
            path: display,
            line: 1,
            message: format!(
                "field `dims`: header promises {expected} f32 values ({} bytes), body has {} bytes",
                expected * 4,
                body.len()
            ),
        });
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let tensor = Tensor::new(header.dims.clone(), values)?;
    HiddenStates::new(tensor, header.ranges)
}

/// One manifest row: sample id → hidden-state file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
}

/// Load a JSONL manifest mapping sample ids to hidden-state files. Relative
/// paths are resolved against the manifest's own directory. Order preserved;
/// duplicate ids rejected.
pub fn load_manifest(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let display = path.display().to_string();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut entries = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: display.clone(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Format {
                path: display.clone(),
                line: lineno + 1,
                message: format!("field `id`: duplicate id `{}`", entry.id),
            });
        }
        let resolved = if Path::new(&entry.path).is_absolute() {
            PathBuf::from(&entry.path)
        } else {
            base.join(&entry.path)
        };
        entries.push((entry.id, resolved));
    }
    Ok(entries)
}

/// Write a JSONL manifest; paths are stored as given.
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for entry in entries {
        let line = serde_json::to_string(entry).map_err(|e| Error::Format {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}
