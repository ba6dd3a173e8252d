//! On-disk formats: the JSON model container and the CSV files used by the CLI.
//!
//! Layouts are documented in `docs/formats.md`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PldaParameters;
use crate::preprocess::{Preprocessor, WhiteningTransform};

pub const MODEL_FORMAT: &str = "blind-plda/model-v1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WhiteningRecord {
    pub d: usize,
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    #[serde(rename = "W")]
    pub matrix: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PreprocessingRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub whitening: Option<WhiteningRecord>,
    pub length_normalize: bool,
}

/// JSON container holding PLDA parameters and, optionally, the preprocessing
/// that must be applied to raw i-vectors before scoring.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelContainer {
    pub format: String,
    pub d: usize,
    pub f: usize,
    pub g: usize,
    pub m: Vec<f64>,
    /// Row-major `d × f`.
    #[serde(rename = "F")]
    pub speaker_loading: Vec<f64>,
    /// Row-major `d × g`.
    #[serde(rename = "G")]
    pub channel_loading: Vec<f64>,
    #[serde(rename = "Sigma")]
    pub noise_variance: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocessing: Option<PreprocessingRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(field: &str, rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::mismatch(format!("{field} length"), rows * cols, data.len()));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

impl ModelContainer {
    pub fn new(params: &PldaParameters, preprocessing: Option<&Preprocessor>, seed: Option<u64>) -> Self {
        Self {
            format: MODEL_FORMAT.to_string(),
            d: params.dim(),
            f: params.speaker_dim(),
            g: params.channel_dim(),
            m: params.mean().as_slice().to_vec(),
            speaker_loading: row_major(params.speaker_loading()),
            channel_loading: row_major(params.channel_loading()),
            noise_variance: params.noise_variance().as_slice().to_vec(),
            preprocessing: preprocessing.map(|p| PreprocessingRecord {
                whitening: p.whitening().map(|w| WhiteningRecord {
                    d: w.dim(),
                    mean: w.mean().as_slice().to_vec(),
                    matrix: row_major(w.matrix()),
                }),
                length_normalize: p.length_normalizes(),
            }),
            seed,
        }
    }

    pub fn parameters(&self) -> Result<PldaParameters> {
        if self.m.len() != self.d {
            return Err(Error::mismatch("m length", self.d, self.m.len()));
        }
        if self.noise_variance.len() != self.d {
            return Err(Error::mismatch("Sigma length", self.d, self.noise_variance.len()));
        }
        PldaParameters::new(
            DVector::from_vec(self.m.clone()),
            from_row_major("F", self.d, self.f, &self.speaker_loading)?,
            from_row_major("G", self.d, self.g, &self.channel_loading)?,
            DVector::from_vec(self.noise_variance.clone()),
        )
    }

    pub fn preprocessor(&self) -> Result<Preprocessor> {
        let Some(record) = &self.preprocessing else {
            return Ok(Preprocessor::identity());
        };
        let whitening = match &record.whitening {
            Some(w) => {
                if w.mean.len() != w.d {
                    return Err(Error::mismatch("whitening mean length", w.d, w.mean.len()));
                }
                Some(WhiteningTransform::new(
                    DVector::from_vec(w.mean.clone()),
                    from_row_major("W", w.d, w.d, &w.matrix)?,
                )?)
            }
            None => None,
        };
        Ok(Preprocessor::new(whitening, record.length_normalize))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let container: Self = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::format(path, e.to_string()))?;
        if container.format != MODEL_FORMAT {
            return Err(Error::format(
                path,
                format!("unsupported container format {:?}", container.format),
            ));
        }
        Ok(container)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row of an i-vector CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct IvectorRecord {
    pub id: String,
    pub speaker: Option<String>,
    pub vector: DVector<f64>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// Reads `id,speaker,dim_0..dim_{d-1}` (the `speaker` column is optional).
pub fn read_ivectors(path: &Path) -> Result<Vec<IvectorRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.get(0) != Some("id") {
        return Err(Error::format(path, "first column must be `id`"));
    }
    let has_speaker = headers.get(1) == Some("speaker");
    let first_dim = if has_speaker { 2 } else { 1 };
    let dim = headers.len() - first_dim;
    for (k, name) in headers.iter().skip(first_dim).enumerate() {
        if name != format!("dim_{k}") {
            return Err(Error::format(path, format!("expected column dim_{k}, found {name:?}")));
        }
    }
    if dim == 0 {
        return Err(Error::format(path, "no dim_* columns"));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let id = record[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        let speaker = has_speaker.then(|| record[1].to_string());
        let values = record
            .iter()
            .skip(first_dim)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, format!("row {}: {e}", row + 1)))?;
        if !crate::linalg::all_finite(&values) {
            return Err(Error::format(path, format!("row {}: non-finite value", row + 1)));
        }
        out.push(IvectorRecord {
            id,
            speaker,
            vector: DVector::from_vec(values),
        });
    }
    Ok(out)
}

pub fn write_ivectors(path: &Path, records: &[IvectorRecord]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.vector.len());
    let labeled = records.iter().any(|r| r.speaker.is_some());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["id".to_string()];
    if labeled {
        header.push("speaker".to_string());
    }
    header.extend((0..dim).map(|k| format!("dim_{k}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in records {
        if r.vector.len() != dim {
            return Err(Error::mismatch(format!("vector {}", r.id), dim, r.vector.len()));
        }
        let mut row = vec![r.id.clone()];
        if labeled {
            row.push(r.speaker.clone().unwrap_or_default());
        }
        row.extend(r.vector.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialKey {
    Target,
    Nontarget,
}

impl TrialKey {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialKey::Target => "target",
            TrialKey::Nontarget => "nontarget",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "target" => Some(TrialKey::Target),
            "nontarget" => Some(TrialKey::Nontarget),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub model_id: String,
    pub test_id: String,
    pub key: Option<TrialKey>,
}

/// Reads `model_id,test_id[,key]`.
pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.get(0) != Some("model_id") || headers.get(1) != Some("test_id") {
        return Err(Error::format(path, "header must start with model_id,test_id"));
    }
    let keyed = headers.get(2) == Some("key");
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let key = if keyed {
            let raw = record.get(2).unwrap_or("");
            Some(TrialKey::parse(raw).ok_or_else(|| {
                Error::format(path, format!("row {}: key must be target or nontarget, got {raw:?}", row + 1))
            })?)
        } else {
            None
        };
        out.push(Trial {
            model_id: record[0].to_string(),
            test_id: record[1].to_string(),
            key,
        });
    }
    Ok(out)
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    let keyed = trials.iter().any(|t| t.key.is_some());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    if keyed {
        w.write_record(["model_id", "test_id", "key"])
    } else {
        w.write_record(["model_id", "test_id"])
    }
    .map_err(|e| csv_err(path, e))?;
    for t in trials {
        let mut row = vec![t.model_id.as_str(), t.test_id.as_str()];
        if keyed {
            row.push(t.key.map_or("", TrialKey::as_str));
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub model_id: String,
    pub test_id: String,
    pub score: f64,
    pub normalized: Option<f64>,
}

/// Writes `model_id,test_id,score[,score_norm]`.
pub fn write_scores(path: &Path, rows: &[ScoreRecord]) -> Result<()> {
    let normalized = rows.iter().any(|r| r.normalized.is_some());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    if normalized {
        w.write_record(["model_id", "test_id", "score", "score_norm"])
    } else {
        w.write_record(["model_id", "test_id", "score"])
    }
    .map_err(|e| csv_err(path, e))?;
    for r in rows {
        let mut row = vec![r.model_id.clone(), r.test_id.clone(), r.score.to_string()];
        if normalized {
            row.push(r.normalized.map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.get(0) != Some("model_id") || headers.get(1) != Some("test_id") || headers.get(2) != Some("score") {
        return Err(Error::format(path, "header must start with model_id,test_id,score"));
    }
    let has_norm = headers.get(3) == Some("score_norm");
    let parse = |row: usize, s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|e| Error::format(path, format!("row {}: {e}", row + 1)))
    };
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        out.push(ScoreRecord {
            model_id: record[0].to_string(),
            test_id: record[1].to_string(),
            score: parse(row, &record[2])?,
            normalized: if has_norm { Some(parse(row, &record[3])?) } else { None },
        });
    }
    Ok(out)
}
