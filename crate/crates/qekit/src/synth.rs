//! Synthetic datasets with known ground truth.
//!
//! Every generated sample's supervision is an exact function of its own
//! hidden states under a secret pooling mix: the gold sentence score is
//! σ(s·(a·h*_cls) + b) with σ(x) = ½·tanh(x/2) + ½, and gold word tags
//! threshold u·h*_i + c per token. Both functions are representable exactly
//! by the QE head family (the tanh sentence head and the linear word head),
//! so a trained model can in principle fit the data perfectly — which makes
//! learnability thresholds meaningful tests of the training loop rather than
//! of the data.
//!
//! The scale/bias constants are standardized against the generated corpus so
//! scores spread over (0, 1) and the token-level OK rate lands near
//! [`OK_RATE`] regardless of dimensions or seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, QESample, Split, WordTag};
use crate::encoder::{encode_toy, EncoderConfig, HiddenStates};
use crate::error::{Error, Result};
use crate::model::{mix_row, ModelDims, ModelParams, PoolingParams, SentenceHead, WordHead};
use crate::numerics::Tensor;
use crate::span::{tags_to_spans, SeverityMode};

/// Language pairs cycled through the generated samples.
pub const SYNTH_LPS: [&str; 4] = ["en-de", "en-mr", "he-en", "zh-en"];

/// Target token-level OK fraction.
pub const OK_RATE: f64 = 0.7;

/// Standard deviation of the pre-sigmoid sentence signal.
const SENT_SIGNAL_STD: f64 = 2.5;

/// Shape and seeding of a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub n_samples: usize,
    /// Distinct words per side.
    pub vocab_size: usize,
    /// Maximum words per side (source and translation independently).
    pub max_len: usize,
    /// Encoder hidden size.
    pub d: usize,
    /// Encoder transform layers.
    pub l: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig { d: self.d, l: self.l, seed: self.seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.max_len == 0 {
            return Err(Error::InvalidArgument(
                "vocab_size and max_len must be positive".into(),
            ));
        }
        self.encoder().validate()?;
        if 2 * self.max_len + 3 > crate::encoder::MAX_LEN {
            return Err(Error::InvalidArgument(format!(
                "max_len {} would exceed the encoder's {}-token cap",
                self.max_len,
                crate::encoder::MAX_LEN
            )));
        }
        Ok(())
    }
}

/// The ground-truth parameters behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSecret {
    /// Secret layer mix β* (a simplex point, mildly tilted to deep layers).
    pub beta: Vec<f64>,
    /// Sentence direction (unit norm) and the affine map onto it.
    pub a: Vec<f64>,
    pub sent_scale: f64,
    pub sent_bias: f64,
    /// Word direction (unit norm) and decision bias: BAD iff u·h* + c > 0.
    pub u: Vec<f64>,
    pub tag_bias: f64,
}

impl SynthSecret {
    /// The exact parameters that reproduce the gold supervision: pooled with
    /// β*, the sentence head emits σ(s·(a·x) + b) and the word head's
    /// logit difference is u·x + c. Useful as a representability oracle.
    pub fn ideal_params(&self, h_hidden: usize) -> Result<ModelParams> {
        let d = self.a.len();
        let dims = ModelDims { n_layers: self.beta.len(), d, h: h_hidden, n_classes: 2 };
        dims.validate()?;
        // σ(z) = ½·tanh(z/2) + ½ with z = s·(a·x) + b:
        // one hidden unit computes tanh((s/2)·a·x + b/2); w2 = ½, b2 = ½.
        let mut w1 = Tensor::zeros(vec![d, h_hidden])?;
        for j in 0..d {
            w1.values_mut()[j * h_hidden] = 0.5 * self.sent_scale * self.a[j];
        }
        let mut b1 = vec![0.0; h_hidden];
        b1[0] = 0.5 * self.sent_bias;
        let mut w2 = vec![0.0; h_hidden];
        w2[0] = 0.5;
        let mut w = Tensor::zeros(vec![d, 2])?;
        for j in 0..d {
            w.values_mut()[j * 2 + 1] = self.u[j];
        }
        Ok(ModelParams {
            // sparsemax(β*) = β* for any simplex point.
            pooling: PoolingParams { lambda: 1.0, phi: self.beta.clone() },
            sent: SentenceHead { w1, b1, w2, b2: 0.5 },
            word: WordHead { w, b: vec![0.0, self.tag_bias] },
        })
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    } else {
        v[0] = 1.0;
    }
    v
}

/// σ(x) = ½·tanh(x/2) + ½ — the logistic function, written in the exact
/// form the tanh sentence head computes.
fn sigmoid(x: f64) -> f64 {
    0.5 * (0.5 * x).tanh() + 0.5
}

/// Generate a dataset whose supervision is an exact function of its hidden
/// states. Deterministic in `cfg.seed`; the split only labels the result.
pub fn synth_generate(
    cfg: &SynthConfig,
    split: Split,
) -> Result<(Dataset, Vec<HiddenStates>, SynthSecret)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let enc = cfg.encoder();
    let n_layers = cfg.l + 1;

    // Secret mix: fixed mild tilt toward deeper layers, β*_ℓ ∝ 1 + ℓ.
    let tilt_sum: f64 = (0..n_layers).map(|l| (1 + l) as f64).sum();
    let beta: Vec<f64> = (0..n_layers).map(|l| (1 + l) as f64 / tilt_sum).collect();
    let a = unit_vector(&mut rng, cfg.d);
    let u = unit_vector(&mut rng, cfg.d);

    // Draw texts and encode; supervision comes afterwards so the affine
    // constants can be standardized against the whole corpus.
    let mut raw: Vec<(QESample, HiddenStates)> = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let lp = SYNTH_LPS[i % SYNTH_LPS.len()];
        let n_mt = rng.random_range(1..=cfg.max_len).max(1);
        let n_src = rng.random_range(1..=cfg.max_len).max(1);
        let mt = (0..n_mt)
            .map(|_| format!("w{:03}", rng.random_range(0..cfg.vocab_size)))
            .collect::<Vec<_>>()
            .join(" ");
        let src = (0..n_src)
            .map(|_| format!("s{:03}", rng.random_range(0..cfg.vocab_size)))
            .collect::<Vec<_>>()
            .join(" ");
        let sample = QESample {
            id: format!("synth-{i:05}"),
            lp: lp.into(),
            src,
            mt,
            score: None,
            tags: None,
            spans: None,
        };
        let hidden = encode_toy(&sample, &enc)?;
        raw.push((sample, hidden));
    }

    // Sentence signal: standardize a·h*_cls to mean 0, std SENT_SIGNAL_STD.
    let cls_signals: Vec<f64> = raw
        .iter()
        .map(|(_, h)| {
            let mix = mix_row(h, &beta, h.cls_index());
            mix.iter().zip(&a).map(|(x, ai)| x * ai).sum()
        })
        .collect();
    let (sent_scale, sent_bias) = if cls_signals.len() >= 2 {
        let n = cls_signals.len() as f64;
        let mean = cls_signals.iter().sum::<f64>() / n;
        let var = cls_signals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if var > 0.0 {
            let scale = SENT_SIGNAL_STD / var.sqrt();
            (scale, -mean * scale)
        } else {
            (1.0, 0.0)
        }
    } else {
        (1.0, 0.0)
    };

    // Word signal: the OK_RATE quantile of u·h*_i becomes the decision bias.
    let mut token_signals: Vec<f64> = Vec::new();
    for (_, h) in &raw {
        for ti in h.target_indices() {
            let mix = mix_row(h, &beta, ti);
            token_signals.push(mix.iter().zip(&u).map(|(x, ui)| x * ui).sum());
        }
    }
    let tag_bias = if token_signals.is_empty() {
        0.0
    } else {
        let mut sorted = token_signals.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).expect("finite signals"));
        let idx = (((sorted.len() as f64) * OK_RATE) as usize).min(sorted.len() - 1);
        -sorted[idx]
    };

    let secret = SynthSecret { beta, a, u, sent_scale, sent_bias, tag_bias };

    let mut samples = Vec::with_capacity(raw.len());
    let mut hiddens = Vec::with_capacity(raw.len());
    for ((mut sample, hidden), cls_signal) in raw.into_iter().zip(cls_signals) {
        sample.score = Some(sigmoid(secret.sent_scale * cls_signal + secret.sent_bias));
        let tags: Vec<WordTag> = hidden
            .target_indices()
            .iter()
            .map(|&ti| {
                let mix = mix_row(&hidden, &secret.beta, ti);
                let signal: f64 = mix.iter().zip(&secret.u).map(|(x, ui)| x * ui).sum();
                if signal + secret.tag_bias > 0.0 { WordTag::Bad } else { WordTag::Ok }
            })
            .collect();
        let spans = tags_to_spans(&tags, &hidden.ranges, SeverityMode::AllMajor)?;
        sample.tags = Some(tags);
        sample.spans = Some(spans);
        samples.push(sample);
        hiddens.push(hidden);
    }

    let dataset = Dataset::new(samples, split)?;
    Ok((dataset, hiddens, secret))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use crate::model::{sentence_forward, word_forward};
    use crate::span::argmax_class;

    fn small_cfg(seed: u64) -> SynthConfig {
        SynthConfig { n_samples: 100, vocab_size: 60, max_len: 8, d: 12, l: 2, seed }
    }

    #[test]
    fn generation_is_deterministic() {
        let (d1, h1, s1) = synth_generate(&small_cfg(5), Split::Train).unwrap();
        let (d2, h2, s2) = synth_generate(&small_cfg(5), Split::Train).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(s1, s2);
        assert_eq!(h1.len(), h2.len());
        for (a, b) in h1.iter().zip(&h2) {
            assert_eq!(a.layers.values(), b.layers.values());
        }
        let (d3, _, _) = synth_generate(&small_cfg(6), Split::Train).unwrap();
        assert_ne!(d1, d3);
    }

    #[test]
    fn zero_samples_is_an_empty_dataset() {
        let mut cfg = small_cfg(1);
        cfg.n_samples = 0;
        let (ds, hiddens, _) = synth_generate(&cfg, Split::Test).unwrap();
        assert!(ds.is_empty());
        assert!(hiddens.is_empty());
    }

    #[test]
    fn supervision_is_complete_and_consistent() {
        let (ds, hiddens, _) = synth_generate(&small_cfg(2), Split::Train).unwrap();
        for (sample, hidden) in ds.samples.iter().zip(&hiddens) {
            let score = sample.score.expect("every sample is scored");
            assert!(score > 0.0 && score < 1.0);
            let tags = sample.tags.as_ref().expect("every sample is tagged");
            assert_eq!(tags.len(), sample.word_count());
            // Spans must be exactly the BAD runs of the tags.
            let expected =
                tags_to_spans(tags, &hidden.ranges, SeverityMode::AllMajor).unwrap();
            assert_eq!(sample.spans.as_ref().unwrap(), &expected);
            sample.validate().unwrap();
        }
    }

    #[test]
    fn ok_rate_lands_in_band() {
        let cfg = SynthConfig {
            n_samples: 1000, vocab_size: 200, max_len: 12, d: 16, l: 3, seed: 11,
        };
        let (ds, _, _) = synth_generate(&cfg, Split::Train).unwrap();
        let mut ok = 0usize;
        let mut total = 0usize;
        for sample in &ds.samples {
            for tag in sample.tags.as_ref().unwrap() {
                total += 1;
                ok += usize::from(*tag == WordTag::Ok);
            }
        }
        let rate = ok as f64 / total as f64;
        assert!((0.5..=0.9).contains(&rate), "OK rate {rate}");
    }

    #[test]
    fn language_pairs_cycle() {
        let (ds, _, _) = synth_generate(&small_cfg(3), Split::Train).unwrap();
        assert_eq!(ds.language_pairs().len(), SYNTH_LPS.len());
    }

    #[test]
    fn ideal_params_reproduce_the_gold_supervision() {
        let (ds, hiddens, secret) = synth_generate(&small_cfg(7), Split::Dev).unwrap();
        let params = secret.ideal_params(4).unwrap();
        let mut pred = Vec::new();
        let mut gold = Vec::new();
        let mut pred_tags = Vec::new();
        let mut gold_tags = Vec::new();
        for (sample, hidden) in ds.samples.iter().zip(&hiddens) {
            let y = sentence_forward(&params, hidden).unwrap();
            assert!(
                (y - sample.score.unwrap()).abs() < 1e-12,
                "ideal head reproduces the score exactly"
            );
            pred.push(y);
            gold.push(sample.score.unwrap());
            for (p, g) in word_forward(&params, hidden)
                .unwrap()
                .iter()
                .zip(sample.tags.as_ref().unwrap())
            {
                pred_tags.push(if argmax_class(p) == 0 { WordTag::Ok } else { WordTag::Bad });
                gold_tags.push(*g);
            }
        }
        assert!((metrics::spearman(&pred, &gold).unwrap() - 1.0).abs() < 1e-12);
        assert!((metrics::mcc(&pred_tags, &gold_tags).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jsonl_round_trip_of_generated_data_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.jsonl");
        let (ds, _, _) = synth_generate(&small_cfg(9), Split::Train).unwrap();
        crate::data::write_jsonl(&ds, &path).unwrap();
        let loaded = crate::data::load_jsonl(&path, Split::Train).unwrap();
        assert_eq!(ds, loaded);
        // And the bytes themselves are stable across rewrites.
        let again = dir.path().join("synth2.jsonl");
        crate::data::write_jsonl(&loaded, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
}
