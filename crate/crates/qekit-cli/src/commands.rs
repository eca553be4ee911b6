//! The seven subcommands. Each resolves its inputs from flags and the
//! config file (flags win), validates paths up front, runs the library
//! pipeline, and writes its artifacts atomically into the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use qekit::data::{self, Dataset, Severity, Split, WordTag};
use qekit::encoder::{
    target_word_ranges, write_hidden, write_manifest, EncoderConfig, ManifestEntry,
};
use qekit::ensemble::{
    search_weights_sentence, search_weights_tags, write_weights, SentencePreds, TagPreds,
    WeightsEntry, WeightsFile, DEFAULT_TAG_THRESHOLD,
};
use qekit::metrics::{self, Report};
use qekit::model::{
    init_params, read_checkpoint, sentence_forward, word_forward, Checkpoint,
};
use qekit::span::{
    argmax_class, channel_weights, combine_channels, severities_to_spans, tags_to_spans,
    write_spans, ChannelDists, ChannelWeights, SeverityMode, SpanRecord,
};
use qekit::synth::{synth_generate, SynthConfig};
use qekit::train::{train, LossConfig, TrainConfig};
use qekit::{par, Error, Result};
use serde::Serialize;

use crate::artifacts::{
    load_examples, read_preds, write_atomic, write_preds, PredRecord,
};
use crate::config::{check_exists, pick, require, FileConfig};

// ---------------------------------------------------------------------------
// synth

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Samples in the training split.
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Samples in the dev split.
    #[arg(long)]
    pub n_dev: Option<usize>,
    /// Samples in the test split.
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Distinct words per side.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Maximum words per side.
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Encoder hidden size.
    #[arg(long)]
    pub d: Option<usize>,
    /// Encoder transform layers.
    #[arg(long)]
    pub l: Option<usize>,
    /// Seed for the toy encoder (defaults to the global seed).
    #[arg(long)]
    pub encoder_seed: Option<u64>,
}

/// Generate train/dev/test splits sharing one secret ground truth, plus the
/// hidden-state files and their manifest.
pub fn cmd_synth(args: &SynthArgs, cfg: &FileConfig, seed: u64, out: &Path) -> Result<()> {
    let n_train = pick(args.n_train, cfg.n_train, 2000);
    let n_dev = pick(args.n_dev, cfg.n_dev, 500);
    let n_test = pick(args.n_test, cfg.n_test, 500);
    let synth_cfg = SynthConfig {
        n_samples: n_train + n_dev + n_test,
        vocab_size: pick(args.vocab_size, cfg.vocab_size, 500),
        max_len: pick(args.max_len, cfg.max_len, 12),
        d: pick(args.d, cfg.d, 32),
        l: pick(args.l, cfg.l, 4),
        seed: pick(args.encoder_seed, cfg.encoder_seed, seed),
    };
    log::info!(
        "generating {} samples (d={}, l={})",
        synth_cfg.n_samples,
        synth_cfg.d,
        synth_cfg.l
    );
    let (ds, hiddens, _) = synth_generate(&synth_cfg, Split::Train)?;

    let hidden_dir = out.join("hidden");
    fs::create_dir_all(&hidden_dir)?;
    let mut entries = Vec::with_capacity(hiddens.len());
    for (sample, hidden) in ds.samples.iter().zip(&hiddens) {
        let file = format!("{}.qeh", sample.id);
        write_atomic(&hidden_dir.join(&file), |tmp| write_hidden(hidden, tmp))?;
        entries.push(ManifestEntry { id: sample.id.clone(), path: file });
    }
    write_atomic(&hidden_dir.join("manifest.jsonl"), |tmp| {
        write_manifest(&entries, tmp)
    })?;

    let mut samples = ds.samples;
    let test = samples.split_off(n_train + n_dev);
    let dev = samples.split_off(n_train);
    for (samples, split, name) in [
        (samples, Split::Train, "train.jsonl"),
        (dev, Split::Dev, "dev.jsonl"),
        (test, Split::Test, "test.jsonl"),
    ] {
        let ds = Dataset::new(samples, split)?;
        write_atomic(&out.join(name), |tmp| data::write_jsonl(&ds, tmp))?;
        log::info!("wrote {} samples to {name}", ds.samples.len());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset (JSONL).
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    /// Dev dataset for model selection (JSONL).
    #[arg(long)]
    pub dev_data: Option<PathBuf>,
    /// Hidden-state manifest covering both datasets.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Sentence-head hidden units (defaults to d/2).
    #[arg(long)]
    pub hidden_units: Option<usize>,
    /// Word-head classes: 2 (ok/bad) or 3 (ok/minor/major).
    #[arg(long)]
    pub n_classes: Option<usize>,
    /// Sentence-loss weight.
    #[arg(long)]
    pub lambda_sl: Option<f64>,
    /// Word-loss weight.
    #[arg(long)]
    pub lambda_wl: Option<f64>,
    /// Per-class word-loss weights, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub class_weights: Option<Vec<f64>>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Early-stop patience in epochs.
    #[arg(long)]
    pub patience: Option<usize>,
}

/// Train the pooling + head stack; writes `checkpoint.qek` and
/// `history.jsonl`.
pub fn cmd_train(args: &TrainArgs, cfg: &FileConfig, seed: u64, out: &Path) -> Result<()> {
    let train_path = require(args.train_data.clone(), cfg.train_data.clone(), "train_data")?;
    let dev_path = require(args.dev_data.clone(), cfg.dev_data.clone(), "dev_data")?;
    let manifest = require(args.manifest.clone(), cfg.manifest.clone(), "manifest")?;
    check_exists(&train_path, "train_data")?;
    check_exists(&dev_path, "dev_data")?;
    check_exists(&manifest, "manifest")?;

    let train_ds = data::load_jsonl(&train_path, Split::Train)?;
    let dev_ds = data::load_jsonl(&dev_path, Split::Dev)?;
    let train_ex = load_examples(&train_ds, &manifest)?;
    let dev_ex = load_examples(&dev_ds, &manifest)?;
    let first = train_ex.first().ok_or_else(|| {
        Error::Config(format!("`train_data` is empty: {}", train_path.display()))
    })?;
    let (n_layers, d) = (first.hidden.n_layers(), first.hidden.d());

    let n_classes = pick(args.n_classes, cfg.n_classes, 2);
    let loss_cfg = LossConfig {
        lambda_sl: pick(args.lambda_sl, cfg.lambda_sl, 1.0),
        lambda_wl: pick(args.lambda_wl, cfg.lambda_wl, 1.0),
        class_weights: pick(
            args.class_weights.clone(),
            cfg.class_weights.clone(),
            vec![1.0; n_classes],
        ),
    };
    let mut train_cfg = TrainConfig::new(seed);
    train_cfg.learning_rate = pick(args.learning_rate, cfg.learning_rate, train_cfg.learning_rate);
    train_cfg.batch_size = pick(args.batch_size, cfg.batch_size, train_cfg.batch_size);
    train_cfg.max_epochs = pick(args.max_epochs, cfg.max_epochs, train_cfg.max_epochs);
    // The stock patience only makes sense when it fits into the epoch budget.
    let default_patience = train_cfg.patience.min(train_cfg.max_epochs.max(1));
    train_cfg.patience = pick(args.patience, cfg.patience, default_patience);

    let h = pick(args.hidden_units, cfg.hidden_units, (d / 2).max(1));
    let enc = EncoderConfig { d, l: n_layers - 1, seed };
    let init = init_params(&enc, n_classes, h, seed)?;

    log::info!(
        "training on {} samples (dev {}), d={d}, {n_layers} layers, h={h}, {n_classes} classes",
        train_ex.len(),
        dev_ex.len()
    );
    let (params, history) = train(&train_ex, &dev_ex, init, &loss_cfg, &train_cfg)?;
    if let Some(best) = history.iter().rfind(|r| r.selected) {
        log::info!("best dev objective {:.4} at epoch {}", best.dev_objective, best.epoch);
    }

    write_atomic(&out.join("checkpoint.qek"), |tmp| {
        qekit::model::write_checkpoint(&Checkpoint { params: params.clone(), seed }, tmp)
    })?;
    write_atomic(&out.join("history.jsonl"), |tmp| {
        qekit::train::write_history(&history, tmp)
    })?;
    Ok(())
}

// ---------------------------------------------------------------------------
// predict

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Dataset to predict on (JSONL; supervision fields are ignored).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Hidden-state manifest covering the dataset.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Write id-aligned predictions: sentence scores (clipped to [0, 1]) plus
/// word tags for 2-class heads or per-token class distributions for 3-class
/// heads.
pub fn cmd_predict(args: &PredictArgs, cfg: &FileConfig, _seed: u64, out: &Path) -> Result<()> {
    let dataset = require(args.dataset.clone(), cfg.dataset.clone(), "dataset")?;
    let manifest = require(args.manifest.clone(), cfg.manifest.clone(), "manifest")?;
    let checkpoint = require(args.checkpoint.clone(), cfg.checkpoint.clone(), "checkpoint")?;
    check_exists(&dataset, "dataset")?;
    check_exists(&manifest, "manifest")?;
    check_exists(&checkpoint, "checkpoint")?;

    let ds = data::load_jsonl(&dataset, Split::Test)?;
    let examples = load_examples(&ds, &manifest)?;
    let ckpt = read_checkpoint(&checkpoint)?;
    let params = ckpt.params;
    let two_class = params.dims().n_classes == 2;

    let records = par::map(&examples, |ex| -> Result<PredRecord> {
        params.check_against(&ex.hidden).map_err(|e| match e {
            Error::DimMismatch(m) => {
                Error::DimMismatch(format!("sample `{}`: {m}", ex.id))
            }
            other => other,
        })?;
        let score = sentence_forward(&params, &ex.hidden)?.clamp(0.0, 1.0);
        let probs = word_forward(&params, &ex.hidden)?;
        let (tags, dists) = if two_class {
            let tags = probs
                .iter()
                .map(|p| if argmax_class(p) == 0 { WordTag::Ok } else { WordTag::Bad })
                .collect();
            (Some(tags), None)
        } else {
            (None, Some(probs.iter().map(|p| p.entries().to_vec()).collect()))
        };
        Ok(PredRecord { id: ex.id.clone(), score: Some(score), tags, dists })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    log::info!("predicted {} samples", records.len());
    write_atomic(&out.join("predictions.jsonl"), |tmp| write_preds(&records, tmp))
}

// ---------------------------------------------------------------------------
// ensemble-search

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EnsembleTask {
    /// Weight sentence scores for rank correlation.
    Sent,
    /// Weight word tags for Matthews correlation.
    Word,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Which predictions to ensemble.
    #[arg(long, value_enum)]
    pub task: Option<EnsembleTask>,
    /// Gold dataset (JSONL).
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Prediction file, repeatable; `NAME=PATH` to name the model, else the
    /// file stem is used.
    #[arg(long = "pred")]
    pub preds: Option<Vec<String>>,
    /// Random candidates to try before coordinate descent.
    #[arg(long)]
    pub budget: Option<usize>,
    /// BAD-decision threshold for the word task.
    #[arg(long)]
    pub threshold: Option<f64>,
}

fn parse_pred_specs(specs: &[String]) -> Result<Vec<(String, PathBuf)>> {
    let mut out: Vec<(String, PathBuf)> = Vec::with_capacity(specs.len());
    for spec in specs {
        let (name, path) = match spec.split_once('=') {
            Some((name, path)) => (name.to_string(), PathBuf::from(path)),
            None => {
                let path = PathBuf::from(spec);
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .ok_or_else(|| {
                        Error::Config(format!("`pred` has no file name: {spec}"))
                    })?;
                (stem, path)
            }
        };
        if out.iter().any(|(n, _)| *n == name) {
            return Err(Error::Config(format!(
                "two prediction files share the model name `{name}`; \
                 use `--pred NAME=PATH` to disambiguate"
            )));
        }
        check_exists(&path, "pred")?;
        out.push((name, path));
    }
    if out.is_empty() {
        return Err(Error::Config("at least one `pred` file is required".into()));
    }
    Ok(out)
}

fn pred_for<'a>(
    preds: &'a BTreeMap<String, PredRecord>,
    model: &str,
    id: &str,
) -> Result<&'a PredRecord> {
    preds.get(id).ok_or_else(|| {
        Error::Config(format!("prediction file `{model}` is missing sample `{id}`"))
    })
}

/// Search per-language-pair ensemble weights against gold labels and write
/// them to `weights.json`.
pub fn cmd_ensemble_search(
    args: &EnsembleArgs,
    cfg: &FileConfig,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let task = match (args.task, cfg.task.as_deref()) {
        (Some(t), _) => t,
        (None, Some("sent")) => EnsembleTask::Sent,
        (None, Some("word")) => EnsembleTask::Word,
        (None, Some(other)) => {
            return Err(Error::Config(format!(
                "`task` must be `sent` or `word`, got `{other}`"
            )))
        }
        (None, None) => return Err(Error::Config("`task` is required".into())),
    };
    let gold_path = require(args.gold.clone(), cfg.gold.clone(), "gold")?;
    check_exists(&gold_path, "gold")?;
    let specs = parse_pred_specs(&require(
        args.preds.clone(),
        cfg.pred.clone(),
        "pred",
    )?)?;
    let budget = pick(args.budget, cfg.budget, 64).max(specs.len());
    let threshold = pick(args.threshold, cfg.threshold, DEFAULT_TAG_THRESHOLD);

    let gold = data::load_jsonl(&gold_path, Split::Dev)?;
    let models: Vec<(String, BTreeMap<String, PredRecord>)> = specs
        .iter()
        .map(|(name, path)| Ok((name.clone(), read_preds(path)?)))
        .collect::<Result<_>>()?;

    let mut by_lp: BTreeMap<&str, Vec<&data::QESample>> = BTreeMap::new();
    for sample in &gold.samples {
        by_lp.entry(&sample.lp).or_default().push(sample);
    }

    let mut weights_file = WeightsFile::new();
    for (lp, samples) in by_lp {
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let (result, metric) = match task {
            EnsembleTask::Sent => {
                let mut model_scores = BTreeMap::new();
                for (name, preds) in &models {
                    let scores: Vec<f64> = samples
                        .iter()
                        .map(|s| {
                            pred_for(preds, name, &s.id)?.score.ok_or_else(|| {
                                Error::Config(format!(
                                    "prediction `{}` from `{name}` has no `score`",
                                    s.id
                                ))
                            })
                        })
                        .collect::<Result<_>>()?;
                    model_scores.insert(name.clone(), scores);
                }
                let gold_scores: Vec<f64> = samples
                    .iter()
                    .map(|s| {
                        s.score.ok_or_else(|| {
                            Error::Config(format!("gold sample `{}` has no `score`", s.id))
                        })
                    })
                    .collect::<Result<_>>()?;
                let preds = SentencePreds::new(ids, model_scores)?;
                (search_weights_sentence(&preds, &gold_scores, budget, seed)?, "spearman")
            }
            EnsembleTask::Word => {
                let mut model_tags = BTreeMap::new();
                for (name, preds) in &models {
                    let tags: Vec<Vec<WordTag>> = samples
                        .iter()
                        .map(|s| {
                            pred_for(preds, name, &s.id)?.bad_tags().ok_or_else(|| {
                                Error::Config(format!(
                                    "prediction `{}` from `{name}` has no `tags` or `dists`",
                                    s.id
                                ))
                            })
                        })
                        .collect::<Result<_>>()?;
                    model_tags.insert(name.clone(), tags);
                }
                let gold_tags: Vec<Vec<WordTag>> = samples
                    .iter()
                    .map(|s| {
                        s.tags.clone().ok_or_else(|| {
                            Error::Config(format!("gold sample `{}` has no `tags`", s.id))
                        })
                    })
                    .collect::<Result<_>>()?;
                let preds = TagPreds::new(ids, model_tags)?;
                (search_weights_tags(&preds, &gold_tags, budget, seed, threshold)?, "mcc")
            }
        };
        log::info!("{lp}: {metric} {:.4} with w {:?}", result.objective, result.weights.w);
        weights_file.insert(
            lp.to_string(),
            WeightsEntry {
                models: result.weights.models,
                w: result.weights.w,
                alpha: result.weights.alpha,
                objective: result.objective,
                metric: metric.into(),
                budget,
                seed,
            },
        );
    }
    write_atomic(&out.join("weights.json"), |tmp| write_weights(&weights_file, tmp))
}

// ---------------------------------------------------------------------------
// spanify

fn parse_severity_mode(s: &str) -> std::result::Result<SeverityMode, String> {
    match s {
        "all_major" => Ok(SeverityMode::AllMajor),
        "all_minor" => Ok(SeverityMode::AllMinor),
        other => Err(format!("must be `all_major` or `all_minor`, got `{other}`")),
    }
}

#[derive(Debug, Args)]
pub struct SpanifyArgs {
    /// Dataset providing the translation texts (JSONL).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Tag-mode input: predictions with `tags` (or `dists`).
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Severity given to every span in tag mode: all_major or all_minor.
    #[arg(long, value_parser = parse_severity_mode)]
    pub severity_mode: Option<SeverityMode>,
    /// Channel-mode input: source-only 3-class predictions.
    #[arg(long, requires = "ref_pred", requires = "uni_pred", conflicts_with = "pred")]
    pub src_pred: Option<PathBuf>,
    /// Channel-mode input: reference-based 3-class predictions; its `score`
    /// field drives the per-sample channel weighting.
    #[arg(long)]
    pub ref_pred: Option<PathBuf>,
    /// Channel-mode input: unified-input 3-class predictions.
    #[arg(long)]
    pub uni_pred: Option<PathBuf>,
}

fn channel_dists(
    record: &PredRecord,
    path: &Path,
    expected_tokens: usize,
) -> Result<Vec<qekit::numerics::SimplexVector>> {
    let dists = record.simplex_dists(path)?;
    if dists.len() != expected_tokens {
        return Err(Error::DimMismatch(format!(
            "{}: sample `{}` has {} token distributions for {expected_tokens} words",
            path.display(),
            record.id,
            dists.len()
        )));
    }
    for d in &dists {
        if d.len() != 3 {
            return Err(Error::DimMismatch(format!(
                "{}: sample `{}` must carry 3-class distributions",
                path.display(),
                record.id
            )));
        }
    }
    Ok(dists)
}

/// Turn predictions into character-level error spans, either directly from
/// tags or by blending three severity channels weighted by translation
/// quality.
pub fn cmd_spanify(args: &SpanifyArgs, cfg: &FileConfig, _seed: u64, out: &Path) -> Result<()> {
    let dataset = require(args.dataset.clone(), cfg.dataset.clone(), "dataset")?;
    check_exists(&dataset, "dataset")?;
    let ds = data::load_jsonl(&dataset, Split::Test)?;

    let records = if let Some(src_path) = args.src_pred.clone().or(cfg.src_pred.clone()) {
        let ref_path = require(args.ref_pred.clone(), cfg.ref_pred.clone(), "ref_pred")?;
        let uni_path = require(args.uni_pred.clone(), cfg.uni_pred.clone(), "uni_pred")?;
        for (path, field) in
            [(&src_path, "src_pred"), (&ref_path, "ref_pred"), (&uni_path, "uni_pred")]
        {
            check_exists(path, field)?;
        }
        let src = read_preds(&src_path)?;
        let reference = read_preds(&ref_path)?;
        let unified = read_preds(&uni_path)?;
        spanify_channels(&ds, (&src, &src_path), (&reference, &ref_path), (&unified, &uni_path))?
    } else {
        let pred_path = require(args.pred.clone(), cfg.pred.clone().and_then(|p| {
            p.into_iter().next().map(PathBuf::from)
        }), "pred")?;
        check_exists(&pred_path, "pred")?;
        let mode = pick(args.severity_mode, cfg.severity_mode, SeverityMode::default());
        let preds = read_preds(&pred_path)?;
        spanify_tags(&ds, &preds, &pred_path, mode)?
    };

    log::info!("spanified {} samples", records.len());
    write_atomic(&out.join("spans.jsonl"), |tmp| write_spans(&records, tmp))
}

fn spanify_tags(
    ds: &Dataset,
    preds: &BTreeMap<String, PredRecord>,
    path: &Path,
    mode: SeverityMode,
) -> Result<Vec<SpanRecord>> {
    ds.samples
        .iter()
        .map(|sample| {
            let record = pred_for(preds, &path.display().to_string(), &sample.id)?;
            let tags = record.bad_tags().ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                line: 0,
                message: format!("record `{}` has no `tags` or `dists`", sample.id),
            })?;
            if tags.len() != sample.word_count() {
                return Err(Error::DimMismatch(format!(
                    "sample `{}`: {} tags for {} words",
                    sample.id,
                    tags.len(),
                    sample.word_count()
                )));
            }
            let ranges = target_word_ranges(&sample.mt);
            let spans = tags_to_spans(&tags, &ranges, mode)?;
            Ok(SpanRecord { id: sample.id.clone(), spans })
        })
        .collect()
}

fn spanify_channels(
    ds: &Dataset,
    src: (&BTreeMap<String, PredRecord>, &Path),
    reference: (&BTreeMap<String, PredRecord>, &Path),
    unified: (&BTreeMap<String, PredRecord>, &Path),
) -> Result<Vec<SpanRecord>> {
    ds.samples
        .iter()
        .map(|sample| {
            let n = sample.word_count();
            let src_rec = pred_for(src.0, "src_pred", &sample.id)?;
            let ref_rec = pred_for(reference.0, "ref_pred", &sample.id)?;
            let uni_rec = pred_for(unified.0, "uni_pred", &sample.id)?;
            let ref_score = ref_rec.score.ok_or_else(|| Error::Format {
                path: reference.1.display().to_string(),
                line: 0,
                message: format!("record `{}` has no `score`", sample.id),
            })?;
            let weights = channel_weights(ref_score)?;
            let channels = ChannelDists {
                src: Some(channel_dists(src_rec, src.1, n)?),
                reference: Some(channel_dists(ref_rec, reference.1, n)?),
                unified: Some(channel_dists(uni_rec, unified.1, n)?),
            };
            let combined = combine_channels(&channels, &weights)?;
            let severities: Vec<Severity> = combined
                .iter()
                .map(|dist| match argmax_class(dist) {
                    0 => Severity::Ok,
                    1 => Severity::Minor,
                    _ => Severity::Major,
                })
                .collect();
            let ranges = target_word_ranges(&sample.mt);
            let spans = severities_to_spans(&severities, &ranges)?;
            Ok(SpanRecord { id: sample.id.clone(), spans })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// channel-weights

#[derive(Debug, Args)]
pub struct ChannelArgs {
    /// Reference quality scores to convert, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "pred")]
    pub scores: Option<Vec<f64>>,
    /// Prediction file whose per-sample `score` fields are converted.
    #[arg(long)]
    pub pred: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct WeightRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    score: f64,
    #[serde(flatten)]
    weights: ChannelWeights,
}

/// Convert reference quality scores into per-channel mixing weights and
/// write them as a JSON array.
pub fn cmd_channel_weights(
    args: &ChannelArgs,
    cfg: &FileConfig,
    _seed: u64,
    out: &Path,
) -> Result<()> {
    let rows: Vec<WeightRow> = if let Some(scores) =
        args.scores.clone().or(cfg.scores.clone())
    {
        scores
            .into_iter()
            .map(|score| {
                Ok(WeightRow { id: None, score, weights: channel_weights(score)? })
            })
            .collect::<Result<_>>()?
    } else if let Some(pred_path) = args.pred.clone().or_else(|| {
        cfg.pred.clone().and_then(|p| p.into_iter().next().map(PathBuf::from))
    }) {
        check_exists(&pred_path, "pred")?;
        read_preds(&pred_path)?
            .into_values()
            .map(|record| {
                let score = record.score.ok_or_else(|| Error::Format {
                    path: pred_path.display().to_string(),
                    line: 0,
                    message: format!("record `{}` has no `score`", record.id),
                })?;
                Ok(WeightRow {
                    id: Some(record.id),
                    score,
                    weights: channel_weights(score)?,
                })
            })
            .collect::<Result<_>>()?
    } else {
        return Err(Error::Config(
            "`scores` or `pred` is required (pass --scores or --pred)".into(),
        ));
    };

    write_atomic(&out.join("channel_weights.json"), |tmp| {
        let json = serde_json::to_string_pretty(&rows).map_err(|e| Error::Format {
            path: tmp.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        fs::write(tmp, json + "\n")?;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// score

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoreTask {
    /// Sentence scores: Pearson, Spearman, Kendall.
    Sent,
    /// Word tags: MCC and per-class F1.
    Word,
    /// Character spans: precision, recall, F1 with severity half-credit.
    Span,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Which predictions to evaluate.
    #[arg(long, value_enum)]
    pub task: Option<ScoreTask>,
    /// Predictions: a prediction file for sent/word, a span file for span.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Gold dataset (JSONL).
    #[arg(long)]
    pub gold: Option<PathBuf>,
}

/// Evaluate predictions per language pair (plus an unweighted `avg` row)
/// and write `report.json` and `report.tsv`.
pub fn cmd_score(args: &ScoreArgs, cfg: &FileConfig, _seed: u64, out: &Path) -> Result<()> {
    let task = match (args.task, cfg.task.as_deref()) {
        (Some(t), _) => t,
        (None, Some("sent")) => ScoreTask::Sent,
        (None, Some("word")) => ScoreTask::Word,
        (None, Some("span")) => ScoreTask::Span,
        (None, Some(other)) => {
            return Err(Error::Config(format!(
                "`task` must be `sent`, `word`, or `span`, got `{other}`"
            )))
        }
        (None, None) => return Err(Error::Config("`task` is required".into())),
    };
    let pred_path = require(args.pred.clone(), cfg.pred.clone().and_then(|p| {
        p.into_iter().next().map(PathBuf::from)
    }), "pred")?;
    let gold_path = require(args.gold.clone(), cfg.gold.clone(), "gold")?;
    check_exists(&pred_path, "pred")?;
    check_exists(&gold_path, "gold")?;

    let gold = data::load_jsonl(&gold_path, Split::Test)?;
    let mut by_lp: BTreeMap<&str, Vec<&data::QESample>> = BTreeMap::new();
    for sample in &gold.samples {
        by_lp.entry(&sample.lp).or_default().push(sample);
    }

    let mut report = Report::new();
    match task {
        ScoreTask::Sent => {
            let preds = read_preds(&pred_path)?;
            for (lp, samples) in by_lp {
                let mut pred = Vec::with_capacity(samples.len());
                let mut gold = Vec::with_capacity(samples.len());
                for s in samples {
                    let record = pred_for(&preds, "pred", &s.id)?;
                    pred.push(record.score.ok_or_else(|| Error::Format {
                        path: pred_path.display().to_string(),
                        line: 0,
                        message: format!("record `{}` has no `score`", s.id),
                    })?);
                    gold.push(s.score.ok_or_else(|| {
                        Error::Config(format!("gold sample `{}` has no `score`", s.id))
                    })?);
                }
                report.insert(
                    lp.to_string(),
                    BTreeMap::from([
                        ("pearson".to_string(), metrics::pearson(&pred, &gold)?),
                        ("spearman".to_string(), metrics::spearman(&pred, &gold)?),
                        ("kendall".to_string(), metrics::kendall(&pred, &gold)?),
                    ]),
                );
            }
        }
        ScoreTask::Word => {
            let preds = read_preds(&pred_path)?;
            for (lp, samples) in by_lp {
                let mut pred = Vec::new();
                let mut gold = Vec::new();
                for s in samples {
                    let record = pred_for(&preds, "pred", &s.id)?;
                    let tags = record.bad_tags().ok_or_else(|| Error::Format {
                        path: pred_path.display().to_string(),
                        line: 0,
                        message: format!("record `{}` has no `tags` or `dists`", s.id),
                    })?;
                    let gold_tags = s.tags.as_ref().ok_or_else(|| {
                        Error::Config(format!("gold sample `{}` has no `tags`", s.id))
                    })?;
                    if tags.len() != gold_tags.len() {
                        return Err(Error::DimMismatch(format!(
                            "sample `{}`: {} predicted tags for {} gold tags",
                            s.id,
                            tags.len(),
                            gold_tags.len()
                        )));
                    }
                    pred.extend(tags);
                    gold.extend(gold_tags.iter().copied());
                }
                report.insert(
                    lp.to_string(),
                    BTreeMap::from([
                        ("mcc".to_string(), metrics::mcc(&pred, &gold)?),
                        (
                            "f1_bad".to_string(),
                            metrics::f1_class(&pred, &gold, WordTag::Bad)?,
                        ),
                        (
                            "f1_ok".to_string(),
                            metrics::f1_class(&pred, &gold, WordTag::Ok)?,
                        ),
                    ]),
                );
            }
        }
        ScoreTask::Span => {
            let records = qekit::span::read_spans(&pred_path)?;
            let preds: BTreeMap<&str, &SpanRecord> =
                records.iter().map(|r| (r.id.as_str(), r)).collect();
            for (lp, samples) in by_lp {
                let (mut wtp, mut pred_chars, mut gold_chars) = (0.0, 0usize, 0usize);
                for s in samples {
                    let record = preds.get(s.id.as_str()).ok_or_else(|| {
                        Error::Config(format!(
                            "span file is missing sample `{}`",
                            s.id
                        ))
                    })?;
                    let gold_spans = s.spans.as_ref().ok_or_else(|| {
                        Error::Config(format!("gold sample `{}` has no `spans`", s.id))
                    })?;
                    let score =
                        metrics::span_f1(&record.spans, gold_spans, s.mt_char_len())?;
                    wtp += score.weighted_tp;
                    pred_chars += score.pred_chars;
                    gold_chars += score.gold_chars;
                }
                let precision = if pred_chars > 0 { wtp / pred_chars as f64 } else { 0.0 };
                let recall = if gold_chars > 0 { wtp / gold_chars as f64 } else { 0.0 };
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                report.insert(
                    lp.to_string(),
                    BTreeMap::from([
                        ("precision".to_string(), precision),
                        ("recall".to_string(), recall),
                        ("f1".to_string(), f1),
                    ]),
                );
            }
        }
    }

    // Unweighted mean over language pairs, mirroring how multi-pair results
    // are usually headlined.
    let mut avg: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for row in report.values() {
        for (metric, value) in row {
            let slot = avg.entry(metric.clone()).or_insert((0.0, 0));
            slot.0 += value;
            slot.1 += 1;
        }
    }
    report.insert(
        "avg".to_string(),
        avg.into_iter().map(|(m, (sum, n))| (m, sum / n as f64)).collect(),
    );

    for (lp, row) in &report {
        for (metric, value) in row {
            log::info!("{lp} {metric} {value:.4}");
        }
    }
    write_atomic(&out.join("report.json"), |tmp| {
        fs::write(tmp, metrics::report_json(&report)?)?;
        Ok(())
    })?;
    write_atomic(&out.join("report.tsv"), |tmp| {
        fs::write(tmp, metrics::report_tsv(&report))?;
        Ok(())
    })
}
