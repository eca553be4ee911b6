//! On-disk artifacts the commands exchange: prediction files, atomic
//! writes, and the dataset + manifest → training-example assembly.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use qekit::data::{Dataset, WordTag};
use qekit::encoder::{load_manifest, read_hidden};
use qekit::numerics::SimplexVector;
use qekit::train::{tag_classes, TrainExample};
use qekit::{par, Error, Result};
use serde::{Deserialize, Serialize};

/// One predicted sample. Two-class models fill `tags`; three-class models
/// fill `dists` (per-token `[ok, minor, major]` probabilities).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredRecord {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<WordTag>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dists: Option<Vec<Vec<f64>>>,
}

impl PredRecord {
    /// The per-token BAD decisions: explicit tags if present, otherwise
    /// argmax over `dists` with any non-OK class counting as BAD.
    pub fn bad_tags(&self) -> Option<Vec<WordTag>> {
        if let Some(tags) = &self.tags {
            return Some(tags.clone());
        }
        self.dists.as_ref().map(|dists| {
            dists
                .iter()
                .map(|d| {
                    let argmax = d
                        .iter()
                        .enumerate()
                        .reduce(|best, c| if c.1 > best.1 { c } else { best })
                        .map_or(0, |(i, _)| i);
                    if argmax == 0 { WordTag::Ok } else { WordTag::Bad }
                })
                .collect()
        })
    }

    /// `dists` as validated simplex vectors.
    pub fn simplex_dists(&self, path: &Path) -> Result<Vec<SimplexVector>> {
        let dists = self.dists.as_ref().ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            line: 0,
            message: format!("record `{}` has no `dists` field", self.id),
        })?;
        dists.iter().map(|d| SimplexVector::new(d.clone())).collect()
    }
}

pub fn write_preds(records: &[PredRecord], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(File::create(path)?);
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

/// Read a prediction file into an id-keyed map, rejecting duplicates.
pub fn read_preds(path: &Path) -> Result<BTreeMap<String, PredRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PredRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if out.insert(record.id.clone(), record).is_some() {
            return Err(Error::Format {
                path: path.display().to_string(),
                line: i + 1,
                message: "duplicate sample id".into(),
            });
        }
    }
    Ok(out)
}

/// Write through a temp file in the same directory, then rename into place,
/// so readers never observe a half-written artifact.
pub fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    match write(&tmp) {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

/// Pair every sample with its hidden states from the manifest. Hidden files
/// are read in parallel; order follows the dataset.
pub fn load_examples(ds: &Dataset, manifest: &Path) -> Result<Vec<TrainExample>> {
    let entries = load_manifest(manifest)?;
    let by_id: BTreeMap<&str, &PathBuf> =
        entries.iter().map(|(id, path)| (id.as_str(), path)).collect();
    par::map(&ds.samples, |sample| -> Result<TrainExample> {
        let path = by_id.get(sample.id.as_str()).ok_or_else(|| {
            Error::Config(format!(
                "sample `{}` has no entry in the hidden-state manifest",
                sample.id
            ))
        })?;
        Ok(TrainExample {
            id: sample.id.clone(),
            hidden: read_hidden(path)?,
            score: sample.score,
            tags: sample.tags.as_ref().map(|t| tag_classes(t)),
        })
    })
    .into_iter()
    .collect()
}
