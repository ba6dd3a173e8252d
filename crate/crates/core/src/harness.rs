//! End-to-end experiment: preprocess, train, calibrate, score and evaluate,
//! comparing plain PLDA scores with blind-normalized ones per enrollment condition.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    analytic_dcf, empirical_min_dcf, equal_error_rate, normalize_score, CalibratedSpeaker, DcfConfig, MinDcf,
};
use crate::error::{Error, Result, StageExt};
use crate::io::{self, ScoreRecord};
use crate::model::DerivedOperators;
use crate::preprocess::{Preprocessor, WhiteningOptions};
use crate::scoring::{BatchScorer, Enrollment};
use crate::stats::speaker_stats;
use crate::synth::{
    build_conditions, sample_dataset, Condition, EnrollmentConditionSpec, SynthConfig, TestSplit, TruthModelSpec,
    VectorCount,
};
use crate::training::{em_fit, EmConfig, LabeledDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSource {
    pub truth: TruthModelSpec,
    pub train_speakers: usize,
    pub train_vectors: VectorCount,
    pub model_speakers: usize,
    pub model_vectors: VectorCount,
}

/// Defaults keep about 5.6 training speakers per speaker-factor dimension and
/// a difficulty where `L = 5` lands near minDCF 0.1.
impl Default for SyntheticSource {
    fn default() -> Self {
        Self {
            truth: TruthModelSpec::default(),
            train_speakers: 445,
            train_vectors: VectorCount::Uniform { min: 3, max: 10 },
            model_speakers: 683,
            model_vectors: VectorCount::Uniform { min: 11, max: 15 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSource),
    /// Labeled i-vector CSV files.
    Files { train: PathBuf, models: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub whiten: bool,
    pub length_normalize: bool,
    #[serde(default)]
    pub ridge: Option<f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            whiten: true,
            length_normalize: true,
            ridge: None,
        }
    }
}

impl PreprocessConfig {
    pub fn fit(&self, train: &LabeledDataset) -> Result<Preprocessor> {
        let whitening = if self.whiten {
            let data: Vec<DVector<f64>> = train.vectors().cloned().collect();
            Some(crate::preprocess::fit_whitening(&data, WhiteningOptions { ridge: self.ridge })?)
        } else {
            None
        };
        Ok(Preprocessor::new(whitening, self.length_normalize))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub source: DataSource,
    pub speaker_dim: usize,
    pub channel_dim: usize,
    pub em_iterations: usize,
    pub em_tolerance: f64,
    pub beta: f64,
    pub conditions: Vec<EnrollmentConditionSpec>,
    /// Leading vectors per model speaker reserved for enrollment; the rest are tests.
    pub enrollment_pool: usize,
    pub preprocessing: PreprocessConfig,
    pub output_dir: Option<PathBuf>,
    /// Also write every trial score to `scores_<condition>.csv`.
    pub write_scores: bool,
    pub histogram_bin_width: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            source: DataSource::Synthetic(SyntheticSource::default()),
            speaker_dim: 80,
            channel_dim: 10,
            em_iterations: 50,
            em_tolerance: 1e-6,
            beta: 100.0,
            conditions: EnrollmentConditionSpec::standard_set(),
            enrollment_pool: 5,
            preprocessing: PreprocessConfig::default(),
            output_dir: None,
            write_scores: false,
            histogram_bin_width: 0.5,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        DcfConfig::new(self.beta)?;
        if self.speaker_dim == 0 {
            return Err(Error::InvalidConfig("speaker_dim must be at least 1".into()));
        }
        if self.conditions.is_empty() {
            return Err(Error::InvalidConfig("no enrollment conditions".into()));
        }
        if !(self.histogram_bin_width > 0.0) {
            return Err(Error::InvalidConfig("histogram_bin_width must be positive".into()));
        }
        let mut names: Vec<&str> = self.conditions.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("condition names must be unique".into()));
        }
        Ok(())
    }
}

/// Independent seed for one pipeline stage.
pub fn stage_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

pub const TRUTH_STREAM: u64 = 1;
pub const TRAIN_STREAM: u64 = 2;
pub const MODELS_STREAM: u64 = 3;
pub const EM_STREAM: u64 = 4;
pub const BUCKET_STREAM: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub dim: usize,
    pub speaker_dim: usize,
    pub channel_dim: usize,
    pub beta: f64,
    pub train_speakers: usize,
    pub train_vectors: usize,
    pub model_speakers: usize,
    pub model_vectors: usize,
    pub em_iterations: usize,
    pub final_log_likelihood: f64,
    pub preprocessing: PreprocessConfig,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerThreshold {
    pub speaker_id: String,
    pub enroll: usize,
    pub mu1: f64,
    pub var1: f64,
    pub mu2: f64,
    pub var2: f64,
    pub threshold: f64,
    pub scale: f64,
    pub fallback: bool,
    /// Analytic cost at `threshold`.
    pub analytic_dcf: f64,
    /// `FR + β FA` on this speaker's own trials at `threshold`.
    pub empirical_dcf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub name: String,
    pub speakers: usize,
    pub tests: usize,
    pub target_trials: usize,
    pub nontarget_trials: usize,
    pub raw: MinDcf,
    pub normalized: MinDcf,
    pub raw_eer: f64,
    pub normalized_eer: f64,
    pub fallbacks: usize,
    pub thresholds: Vec<SpeakerThreshold>,
}

impl ConditionReport {
    /// `(raw − normalized) / raw`; positive when normalization helps.
    pub fn relative_improvement(&self) -> f64 {
        (self.raw.value - self.normalized.value) / self.raw.value
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub metadata: RunMetadata,
    pub conditions: Vec<ConditionReport>,
}

impl ExperimentReport {
    pub fn condition(&self, name: &str) -> Result<&ConditionReport> {
        self.conditions
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownId(format!("condition {name}")))
    }
}

/// Ground truth plus the training and model sets drawn from it.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub truth: crate::model::PldaParameters,
    pub train: LabeledDataset,
    pub models: LabeledDataset,
}

impl SyntheticSource {
    pub fn generate(&self, seed: u64) -> Result<SyntheticData> {
        let truth = self.truth.sample(stage_seed(seed, TRUTH_STREAM))?;
        let train = sample_dataset(&SynthConfig {
            truth: truth.clone(),
            n_speakers: self.train_speakers,
            vectors_per_speaker: self.train_vectors,
            seed: stage_seed(seed, TRAIN_STREAM),
            id_prefix: "trn".into(),
        })?;
        let models = sample_dataset(&SynthConfig {
            truth: truth.clone(),
            n_speakers: self.model_speakers,
            vectors_per_speaker: self.model_vectors,
            seed: stage_seed(seed, MODELS_STREAM),
            id_prefix: "spk".into(),
        })?;
        Ok(SyntheticData { truth, train, models })
    }
}

fn load_data(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    match &cfg.source {
        DataSource::Synthetic(s) => {
            let data = s.generate(cfg.seed)?;
            Ok((data.train, data.models))
        }
        DataSource::Files { train, models } => Ok((
            LabeledDataset::from_records(io::read_ivectors(train)?)?,
            LabeledDataset::from_records(io::read_ivectors(models)?)?,
        )),
    }
}

/// Per-trial scores of one condition, model-major.
struct ConditionScores {
    report: ConditionReport,
    rows: Vec<ScoreRecord>,
}

fn evaluate_condition(
    ops: &DerivedOperators,
    condition: &Condition,
    dcf: &DcfConfig,
    keep_rows: bool,
) -> Result<ConditionScores> {
    let params = ops.params();
    let enrollments = condition
        .enrollments
        .iter()
        .map(|e| {
            let centered = e.vectors.iter().map(|v| params.center(v)).collect::<Result<Vec<_>>>()?;
            Enrollment::from_vectors(e.speaker_id.clone(), &centered)
        })
        .collect::<Result<Vec<_>>>()?;
    let calibrated = enrollments
        .par_iter()
        .map(|e| CalibratedSpeaker::with_fallback(speaker_stats(ops, e)?, dcf))
        .collect::<Result<Vec<_>>>()
        .stage("calibrate")?;

    let tests = condition
        .tests
        .iter()
        .map(|t| params.center(&t.vector))
        .collect::<Result<Vec<_>>>()?;
    let scorer = BatchScorer::new(ops, &enrollments, &tests).stage("score")?;

    struct ModelScores {
        raw_tar: Vec<f64>,
        raw_non: Vec<f64>,
        norm_tar: Vec<f64>,
        norm_non: Vec<f64>,
        rows: Vec<ScoreRecord>,
    }
    let per_model: Vec<ModelScores> = (0..scorer.n_models())
        .into_par_iter()
        .map(|m| {
            let cal = &calibrated[m];
            let speaker = &condition.enrollments[m].speaker_id;
            let mut out = ModelScores {
                raw_tar: Vec::new(),
                raw_non: Vec::with_capacity(tests.len()),
                norm_tar: Vec::new(),
                norm_non: Vec::with_capacity(tests.len()),
                rows: Vec::new(),
            };
            for (t, test) in condition.tests.iter().enumerate() {
                let s = scorer.score(m, t);
                let n = normalize_score(s, cal);
                if &test.speaker_id == speaker {
                    out.raw_tar.push(s);
                    out.norm_tar.push(n);
                } else {
                    out.raw_non.push(s);
                    out.norm_non.push(n);
                }
                if keep_rows {
                    out.rows.push(ScoreRecord {
                        model_id: speaker.clone(),
                        test_id: test.id.clone(),
                        score: s,
                        normalized: Some(n),
                    });
                }
            }
            out
        })
        .collect();

    let mut thresholds = Vec::with_capacity(calibrated.len());
    let (mut raw_tar, mut raw_non, mut norm_tar, mut norm_non, mut rows) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (cal, scores) in calibrated.iter().zip(per_model) {
        let fr = fraction(&scores.raw_tar, |s| s < cal.threshold);
        let fa = fraction(&scores.raw_non, |s| s >= cal.threshold);
        let m = &cal.stats.moments;
        thresholds.push(SpeakerThreshold {
            speaker_id: cal.stats.speaker_id.clone(),
            enroll: cal.stats.count,
            mu1: m.mu1,
            var1: m.var1,
            mu2: m.mu2,
            var2: m.var2,
            threshold: cal.threshold,
            scale: cal.scale,
            fallback: cal.fallback,
            analytic_dcf: analytic_dcf(cal.threshold, m, dcf),
            empirical_dcf: fr + dcf.beta() * fa,
        });
        raw_tar.extend(scores.raw_tar);
        raw_non.extend(scores.raw_non);
        norm_tar.extend(scores.norm_tar);
        norm_non.extend(scores.norm_non);
        rows.extend(scores.rows);
    }

    let evaluate = |tar: &[f64], non: &[f64]| -> Result<(MinDcf, f64)> {
        Ok((empirical_min_dcf(tar, non, dcf)?, equal_error_rate(tar, non)?))
    };
    let (raw, raw_eer) = evaluate(&raw_tar, &raw_non).stage("evaluate")?;
    let (normalized, normalized_eer) = evaluate(&norm_tar, &norm_non).stage("evaluate")?;
    Ok(ConditionScores {
        report: ConditionReport {
            name: condition.name.clone(),
            speakers: enrollments.len(),
            tests: tests.len(),
            target_trials: raw_tar.len(),
            nontarget_trials: raw_non.len(),
            raw,
            normalized,
            raw_eer,
            normalized_eer,
            fallbacks: thresholds.iter().filter(|t| t.fallback).count(),
            thresholds,
        },
        rows,
    })
}

/// `NaN` for an empty slice.
fn fraction(scores: &[f64], pred: impl Fn(f64) -> bool) -> f64 {
    scores.iter().filter(|&&s| pred(s)).count() as f64 / scores.len() as f64
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let dcf = DcfConfig::new(cfg.beta)?;
    let (raw_train, raw_models) = load_data(cfg).stage("data")?;

    let preprocessor = cfg.preprocessing.fit(&raw_train).stage("preprocess")?;
    let train = raw_train.preprocess(&preprocessor).stage("preprocess")?;
    let models = raw_models.preprocess(&preprocessor).stage("preprocess")?;

    let em = EmConfig {
        speaker_dim: cfg.speaker_dim,
        channel_dim: cfg.channel_dim,
        iterations: cfg.em_iterations,
        seed: stage_seed(cfg.seed, EM_STREAM),
        tolerance: cfg.em_tolerance,
    };
    let fit = em_fit(&train, &em).stage("train")?;
    log::info!(
        "trained PLDA in {} iterations, log-likelihood {:.3}",
        fit.log_likelihoods.len() - 1,
        fit.log_likelihoods.last().copied().unwrap_or(f64::NAN)
    );
    let ops = DerivedOperators::new(fit.params.clone()).stage("train")?;

    let conditions = build_conditions(
        &models,
        &cfg.conditions,
        TestSplit::FixedPool(cfg.enrollment_pool),
        stage_seed(cfg.seed, BUCKET_STREAM),
    )
    .stage("conditions")?;

    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).stage("report")?;
    }
    let mut reports = Vec::with_capacity(conditions.len());
    for condition in &conditions {
        let scored = evaluate_condition(&ops, condition, &dcf, cfg.write_scores && cfg.output_dir.is_some())?;
        log::info!(
            "{}: raw minDCF {:.4}, normalized {:.4}, {} fallbacks",
            condition.name,
            scored.report.raw.value,
            scored.report.normalized.value,
            scored.report.fallbacks
        );
        if let Some(dir) = &cfg.output_dir {
            if cfg.write_scores {
                io::write_scores(&dir.join(format!("scores_{}.csv", condition.name)), &scored.rows).stage("report")?;
            }
        }
        reports.push(scored.report);
    }

    let report = ExperimentReport {
        metadata: RunMetadata {
            seed: cfg.seed,
            dim: ops.dim(),
            speaker_dim: cfg.speaker_dim,
            channel_dim: cfg.channel_dim,
            beta: cfg.beta,
            train_speakers: train.speakers().len(),
            train_vectors: train.n_vectors(),
            model_speakers: models.speakers().len(),
            model_vectors: models.n_vectors(),
            em_iterations: fit.log_likelihoods.len() - 1,
            final_log_likelihood: *fit.log_likelihoods.last().expect("initial log-likelihood"),
            preprocessing: cfg.preprocessing,
            version: env!("CARGO_PKG_VERSION").into(),
        },
        conditions: reports,
    };
    if let Some(dir) = &cfg.output_dir {
        write_report(&report, dir, cfg.histogram_bin_width).stage("report")?;
    }
    Ok(report)
}

/// Writes `report.json`, `table.csv`, `table.txt`, and per condition
/// `thresholds_<condition>.csv` and `histogram_<condition>.csv`.
pub fn write_report(report: &ExperimentReport, dir: &Path, bin_width: f64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_json(&dir.join("report.json"), report)?;
    let table = compare_table(report);
    write_text(&dir.join("table.csv"), &table.to_csv())?;
    write_text(&dir.join("table.txt"), &table.to_text())?;
    for c in &report.conditions {
        write_thresholds(&dir.join(format!("thresholds_{}.csv", c.name)), c)?;
        let hist = threshold_histogram(report, &c.name, bin_width)?;
        write_text(&dir.join(format!("histogram_{}.csv", c.name)), &hist.to_csv())?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_thresholds(path: &Path, c: &ConditionReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record([
        "speaker_id",
        "enroll",
        "mu1",
        "var1",
        "mu2",
        "var2",
        "threshold",
        "scale",
        "fallback",
    ])
    .map_err(|e| Error::format(path, e.to_string()))?;
    for t in &c.thresholds {
        w.write_record([
            t.speaker_id.clone(),
            t.enroll.to_string(),
            t.mu1.to_string(),
            t.var1.to_string(),
            t.mu2.to_string(),
            t.var2.to_string(),
            t.threshold.to_string(),
            t.scale.to_string(),
            t.fallback.to_string(),
        ])
        .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub condition: String,
    pub bin_width: f64,
    pub bins: Vec<HistogramBin>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lower,upper,count\n");
        for b in &self.bins {
            let _ = writeln!(out, "{},{},{}", b.lower, b.upper, b.count);
        }
        out
    }
}

/// Counts of per-speaker thresholds in bins `[lo + k w, lo + (k+1) w)`, with `lo`
/// a multiple of `w`. The maximum always lands in the last bin.
pub fn threshold_histogram(report: &ExperimentReport, condition: &str, bin_width: f64) -> Result<Histogram> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::InvalidConfig("bin width must be positive".into()));
    }
    let c = report.condition(condition)?;
    let values: Vec<f64> = c.thresholds.iter().map(|t| t.threshold).collect();
    Ok(Histogram {
        condition: condition.to_string(),
        bin_width,
        bins: histogram(&values, bin_width),
    })
}

fn histogram(values: &[f64], width: f64) -> Vec<HistogramBin> {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if values.is_empty() {
        return Vec::new();
    }
    let lo = (min / width).floor() * width;
    let n = (((max - lo) / width).floor() as usize + 1).max(1);
    let mut counts = vec![0usize; n];
    for &v in values {
        let k = (((v - lo) / width).floor() as usize).min(n - 1);
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            lower: lo + k as f64 * width,
            upper: lo + (k + 1) as f64 * width,
            count,
        })
        .collect()
}

/// minDCF matrix: one row per scoring method, one column per condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub conditions: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

pub const RAW_METHOD: &str = "plda";
pub const NORMALIZED_METHOD: &str = "plda+blind-norm";

pub fn compare_table(report: &ExperimentReport) -> ComparisonTable {
    let conditions: Vec<String> = report.conditions.iter().map(|c| c.name.clone()).collect();
    let rows = if conditions.is_empty() {
        Vec::new()
    } else {
        vec![
            (RAW_METHOD.to_string(), report.conditions.iter().map(|c| c.raw.value).collect()),
            (
                NORMALIZED_METHOD.to_string(),
                report.conditions.iter().map(|c| c.normalized.value).collect(),
            ),
        ]
    };
    ComparisonTable { conditions, rows }
}

impl ComparisonTable {
    /// Values use the shortest representation that parses back to the same `f64`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for c in &self.conditions {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (method, values) in &self.rows {
            out.push_str(method);
            for v in values {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let first = self
            .rows
            .iter()
            .map(|(m, _)| m.len())
            .chain(["method".len()])
            .max()
            .unwrap_or(0);
        let widths: Vec<usize> = self.conditions.iter().map(|c| c.len().max(6)).collect();
        let mut out = format!("{:<first$}", "method");
        for (c, w) in self.conditions.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        for (method, values) in &self.rows {
            let _ = write!(out, "{method:<first$}");
            for (v, w) in values.iter().zip(&widths) {
                let _ = write!(out, "  {v:>w$.4}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::format("table.csv", m);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let mut cols = header.split(',');
        if cols.next() != Some("method") {
            return Err(bad("header must start with method".into()));
        }
        let conditions: Vec<String> = cols.map(str::to_string).collect();
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let mut cells = line.split(',');
            let method = cells.next().unwrap_or_default().to_string();
            let values = cells
                .map(|c| c.parse::<f64>().map_err(|e| bad(format!("{method}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != conditions.len() {
                return Err(bad(format!("row {method} has {} values", values.len())));
            }
            rows.push((method, values));
        }
        Ok(Self { conditions, rows })
    }

    pub fn value(&self, method: &str, condition: &str) -> Option<f64> {
        let col = self.conditions.iter().position(|c| c == condition)?;
        self.rows.iter().find(|(m, _)| m == method).map(|(_, v)| v[col])
    }
}

/// Mean threshold per enrollment size, for the Fig.-1-style summary.
pub fn mean_threshold_by_enroll(c: &ConditionReport) -> Vec<(usize, f64)> {
    let mut acc: HashMap<usize, (f64, usize)> = HashMap::new();
    for t in &c.thresholds {
        let e = acc.entry(t.enroll).or_default();
        e.0 += t.threshold;
        e.1 += 1;
    }
    let mut out: Vec<(usize, f64)> = acc.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect();
    out.sort_by_key(|&(l, _)| l);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            seed,
            source: DataSource::Synthetic(SyntheticSource {
                truth: TruthModelSpec {
                    dim: 12,
                    speaker_dim: 6,
                    channel_dim: 2,
                    ..TruthModelSpec::default()
                },
                train_speakers: 150,
                train_vectors: VectorCount::Uniform { min: 3, max: 6 },
                model_speakers: 40,
                model_vectors: VectorCount::Uniform { min: 6, max: 8 },
            }),
            speaker_dim: 6,
            channel_dim: 2,
            em_iterations: 10,
            ..ExperimentConfig::default()
        }
    }

    fn dummy_report(thresholds: &[f64]) -> ExperimentReport {
        let mk = |t: f64| SpeakerThreshold {
            speaker_id: "s".into(),
            enroll: 1,
            mu1: 1.0,
            var1: 1.0,
            mu2: 0.0,
            var2: 1.0,
            threshold: t,
            scale: 1.0,
            fallback: false,
            analytic_dcf: 0.0,
            empirical_dcf: 0.0,
        };
        let min = MinDcf {
            value: 0.25,
            threshold: 0.0,
        };
        ExperimentReport {
            metadata: RunMetadata {
                seed: 0,
                dim: 1,
                speaker_dim: 1,
                channel_dim: 0,
                beta: 1.0,
                train_speakers: 0,
                train_vectors: 0,
                model_speakers: 0,
                model_vectors: 0,
                em_iterations: 0,
                final_log_likelihood: 0.0,
                preprocessing: PreprocessConfig::default(),
                version: String::new(),
            },
            conditions: vec![ConditionReport {
                name: "c".into(),
                speakers: thresholds.len(),
                tests: 0,
                target_trials: 0,
                nontarget_trials: 0,
                raw: min,
                normalized: MinDcf { value: 0.125, ..min },
                raw_eer: 0.0,
                normalized_eer: 0.0,
                fallbacks: 0,
                thresholds: thresholds.iter().copied().map(mk).collect(),
            }],
        }
    }

    #[test]
    fn identical_thresholds_fill_one_bin() {
        let r = dummy_report(&[1.3, 1.3, 1.3]);
        let h = threshold_histogram(&r, "c", 0.5).unwrap();
        assert_eq!(h.bins.len(), 1);
        assert_eq!(h.bins[0].count, 3);
        assert!(h.bins[0].lower <= 1.3 && 1.3 < h.bins[0].upper);
    }

    #[test]
    fn histogram_conserves_counts() {
        let values = [-2.0, -1.99, 0.0, 0.49, 0.5, 3.0, 7.25];
        let r = dummy_report(&values);
        let h = threshold_histogram(&r, "c", 0.5).unwrap();
        assert_eq!(h.total(), values.len());
        assert_eq!(h.bins.first().unwrap().lower, -2.0);
        assert!(h.bins.last().unwrap().upper > 7.25);
        for v in values {
            let bin = h.bins.iter().filter(|b| b.lower <= v && v < b.upper).count();
            assert_eq!(bin, 1, "{v}");
        }
        assert!(threshold_histogram(&r, "nope", 0.5).is_err());
        assert!(threshold_histogram(&r, "c", 0.0).is_err());
    }

    #[test]
    fn table_formats_and_parses_back() {
        let r = dummy_report(&[0.0]);
        let t = compare_table(&r);
        let csv = t.to_csv();
        assert_eq!(csv, "method,c\nplda,0.25\nplda+blind-norm,0.125\n");
        assert_eq!(ComparisonTable::parse_csv(&csv).unwrap(), t);
        assert_eq!(t.value(NORMALIZED_METHOD, "c"), Some(0.125));
        let text = t.to_text();
        assert!(text.lines().all(|l| l.len() == text.lines().next().unwrap().len()));

        let empty = ExperimentReport {
            conditions: Vec::new(),
            ..r
        };
        assert_eq!(compare_table(&empty).to_csv(), "method\n");
    }

    #[test]
    fn odd_values_roundtrip_through_csv() {
        let t = ComparisonTable {
            conditions: vec!["a".into(), "b".into()],
            rows: vec![("m".into(), vec![0.1 + 0.2, 1.0 / 3.0])],
        };
        assert_eq!(ComparisonTable::parse_csv(&t.to_csv()).unwrap(), t);
        assert!(ComparisonTable::parse_csv("x,a\n").is_err());
        assert!(ComparisonTable::parse_csv("method,a\nm,1,2\n").is_err());
    }

    #[test]
    fn small_run_is_consistent_and_deterministic() {
        let cfg = small_config(3);
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.conditions.len(), 6);
        let l1 = report.condition("L1").unwrap();
        for c in &report.conditions {
            // every model is scored against the same test set
            assert_eq!(c.tests, l1.tests);
            assert_eq!(c.target_trials + c.nontarget_trials, c.speakers * c.tests);
            assert!(c.raw.value <= 1.0 + 1e-12 && c.normalized.value <= 1.0 + 1e-12);
        }
        let mixed = report.condition("mixed").unwrap();
        assert_eq!(mixed.speakers, 40);
        let again = run_experiment(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }

    #[test]
    fn writes_report_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(4);
        cfg.conditions = vec![EnrollmentConditionSpec::uniform(2), EnrollmentConditionSpec::mixed()];
        cfg.output_dir = Some(dir.path().to_path_buf());
        cfg.write_scores = true;
        let report = run_experiment(&cfg).unwrap();
        for f in ["report.json", "table.csv", "thresholds_L2.csv", "scores_mixed.csv", "histogram_mixed.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let table = ComparisonTable::parse_csv(&fs::read_to_string(dir.path().join("table.csv")).unwrap()).unwrap();
        assert_eq!(table, compare_table(&report));
        let scores = io::read_scores(&dir.path().join("scores_L2.csv")).unwrap();
        let c = report.condition("L2").unwrap();
        assert_eq!(scores.len(), c.target_trials + c.nontarget_trials);
        let back: ExperimentReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn stage_name_in_errors() {
        let mut cfg = small_config(5);
        cfg.speaker_dim = 50;
        let err = run_experiment(&cfg).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "train", .. }), "{err}");
        cfg.beta = -1.0;
        assert!(run_experiment(&cfg).is_err());
    }
}
