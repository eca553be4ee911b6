//! JSON run configuration and its merge with command-line flags.
//!
//! Every subcommand flag has a counterpart key of the same (snake_case)
//! name in the config file; a flag given on the command line wins over the
//! file. Unknown keys are rejected so typos surface as exit-code-2 errors
//! naming the offending field.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use qekit::span::SeverityMode;
use qekit::{Error, Result};
use serde::Deserialize;

/// The optional JSON config file. All fields are optional; commands fill in
/// defaults for whatever neither the file nor the flags provide.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    // Global.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,

    // Datasets and artifacts.
    pub dataset: Option<PathBuf>,
    pub train_data: Option<PathBuf>,
    pub dev_data: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub pred: Option<Vec<String>>,

    // Encoder geometry (synth).
    pub d: Option<usize>,
    pub l: Option<usize>,
    pub encoder_seed: Option<u64>,
    pub n_train: Option<usize>,
    pub n_dev: Option<usize>,
    pub n_test: Option<usize>,
    pub vocab_size: Option<usize>,
    pub max_len: Option<usize>,

    // Model and loss.
    pub hidden_units: Option<usize>,
    pub n_classes: Option<usize>,
    pub lambda_sl: Option<f64>,
    pub lambda_wl: Option<f64>,
    pub class_weights: Option<Vec<f64>>,

    // Optimizer.
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,

    // Ensembles, spans, scoring.
    pub budget: Option<usize>,
    pub threshold: Option<f64>,
    pub task: Option<String>,
    pub severity_mode: Option<SeverityMode>,
    pub src_pred: Option<PathBuf>,
    pub ref_pred: Option<PathBuf>,
    pub uni_pred: Option<PathBuf>,
    pub scores: Option<Vec<f64>>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!(
                "`--config` file does not exist: {}",
                path.display()
            )));
        }
        let reader = BufReader::new(File::open(path)?);
        serde_json::from_reader(reader).map_err(|e| Error::Format {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Pick the flag value if given, else the config value, else the default.
pub fn pick<T: Clone>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Like [`pick`] but with no default: the field is mandatory.
pub fn require<T: Clone>(flag: Option<T>, file: Option<T>, field: &str) -> Result<T> {
    flag.or(file).ok_or_else(|| {
        Error::Config(format!(
            "`{field}` is required (pass --{} or set `{field}` in the config file)",
            field.replace('_', "-")
        ))
    })
}

/// Error for an input path that must exist before the command starts.
pub fn check_exists(path: &Path, field: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "`{field}` path does not exist: {}",
            path.display()
        )))
    }
}
