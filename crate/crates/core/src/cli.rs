//! Command-line front end. Every subcommand is a thin wrapper over library calls.

use std::collections::{HashMap, HashSet};
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::calibration::{empirical_min_dcf, equal_error_rate, normalize_score, CalibratedSpeaker, DcfConfig};
use crate::harness::{self, ExperimentConfig, PreprocessConfig, SyntheticSource};
use crate::io::{self, IvectorRecord, ModelContainer, ScoreRecord, Trial, TrialKey};
use crate::model::DerivedOperators;
use crate::preprocess::Preprocessor;
use crate::scoring::{batch_score, Enrollment};
use crate::stats::speaker_stats;
use crate::synth::{build_condition, EnrollmentConditionSpec, TestSplit};
use crate::training::{em_fit, EmConfig, LabeledDataset};

#[derive(Debug, Parser)]
#[command(name = "blind-plda", version, about = "PLDA scoring with blind per-speaker score normalization")]
pub struct Cli {
    /// Seed for every random choice; recorded in the outputs.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log progress to stderr; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic train/enroll/test set from a random PLDA model.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit preprocessing and PLDA parameters on labeled i-vectors.
    Train(TrainArgs),
    /// Score trials, optionally with blind normalization.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        enroll: PathBuf,
        #[arg(long)]
        tests: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long, value_enum, default_value_t = Normalize::None)]
        normalize: Normalize,
        #[arg(long, default_value_t = 100.0)]
        beta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-speaker score moments, optimal threshold and scale.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        enroll: PathBuf,
        #[arg(long, default_value_t = 100.0)]
        beta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pooled minDCF of a score file against keyed trials.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long, default_value_t = 100.0)]
        beta: f64,
    },
    /// Full raw-versus-normalized comparison over enrollment conditions.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub f: usize,
    #[arg(long, default_value_t = 0)]
    pub g: usize,
    #[arg(long, default_value_t = 50)]
    pub iterations: usize,
    /// Relative log-likelihood gain below which EM stops; 0 runs every iteration.
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    #[arg(long)]
    pub no_whiten: bool,
    #[arg(long)]
    pub no_length_norm: bool,
    /// Ridge added to the whitening covariance, relative to its mean variance.
    #[arg(long)]
    pub ridge: Option<f64>,
    /// File of i-vector ids (one per line) to drop before training.
    #[arg(long)]
    pub exclude: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Normalize {
    None,
    Blind,
}

/// Input of `synth`: the data source plus how to split the model set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthCommandConfig {
    #[serde(flatten)]
    pub source: SyntheticSource,
    pub condition: EnrollmentConditionSpec,
    pub enrollment_pool: usize,
}

impl Default for SynthCommandConfig {
    fn default() -> Self {
        Self {
            source: SyntheticSource::default(),
            condition: EnrollmentConditionSpec::uniform(5),
            enrollment_pool: 5,
        }
    }
}

#[derive(Debug, Serialize)]
struct SynthManifest<'a> {
    seed: u64,
    config: &'a SynthCommandConfig,
    files: [&'static str; 5],
}

/// Runs the CLI on `args` (including the program name) and returns the exit code:
/// 0 on success, 1 on data errors, 2 on usage errors.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn execute(cli: &Cli, out: &mut (dyn Write + Send)) -> anyhow::Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("starting worker threads")?;
    pool.install(|| dispatch(cli, out))
}

fn dispatch(cli: &Cli, out: &mut (dyn Write + Send)) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Synth { config, out: dir } => synth(config.as_deref(), dir, seed).context("synth"),
        Command::Train(args) => train(args, seed).context("train"),
        Command::Score {
            model,
            enroll,
            tests,
            trials,
            normalize,
            beta,
            out: path,
        } => score(model, enroll, tests, trials, *normalize, *beta, path).context("score"),
        Command::Calibrate {
            model,
            enroll,
            beta,
            out: path,
        } => calibrate(model, enroll, *beta, path).context("calibrate"),
        Command::Eval { scores, trials, beta } => eval(scores, trials, *beta, out).context("eval"),
        Command::Experiment { config, out: dir } => {
            experiment(config.as_deref(), dir.as_deref(), cli.seed, out).context("experiment")
        }
    }
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn synth(config: Option<&Path>, dir: &Path, seed: u64) -> anyhow::Result<()> {
    let cfg: SynthCommandConfig = read_config(config)?;
    let data = cfg.source.generate(seed)?;
    let condition = build_condition(
        &data.models,
        &cfg.condition,
        TestSplit::FixedPool(cfg.enrollment_pool),
        harness::stage_seed(seed, harness::BUCKET_STREAM),
    )?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

    ModelContainer::new(&data.truth, None, Some(seed)).write(&dir.join("truth.json"))?;
    io::write_ivectors(&dir.join("train.csv"), &data.train.to_records())?;
    let enroll: Vec<IvectorRecord> = condition
        .enrollments
        .iter()
        .flat_map(|e| {
            e.ids.iter().zip(&e.vectors).map(|(id, v)| IvectorRecord {
                id: id.clone(),
                speaker: Some(e.speaker_id.clone()),
                vector: v.clone(),
            })
        })
        .collect();
    io::write_ivectors(&dir.join("enroll.csv"), &enroll)?;
    let tests: Vec<IvectorRecord> = condition
        .tests
        .iter()
        .map(|t| IvectorRecord {
            id: t.id.clone(),
            speaker: None,
            vector: t.vector.clone(),
        })
        .collect();
    io::write_ivectors(&dir.join("tests.csv"), &tests)?;
    let trials: Vec<Trial> = condition
        .enrollments
        .iter()
        .flat_map(|e| {
            condition.tests.iter().map(|t| Trial {
                model_id: e.speaker_id.clone(),
                test_id: t.id.clone(),
                key: Some(if t.speaker_id == e.speaker_id {
                    TrialKey::Target
                } else {
                    TrialKey::Nontarget
                }),
            })
        })
        .collect();
    io::write_trials(&dir.join("trials.csv"), &trials)?;
    io::write_json(
        &dir.join("manifest.json"),
        &SynthManifest {
            seed,
            config: &cfg,
            files: ["truth.json", "train.csv", "enroll.csv", "tests.csv", "trials.csv"],
        },
    )?;
    Ok(())
}

fn train(args: &TrainArgs, seed: u64) -> anyhow::Result<()> {
    let mut records = io::read_ivectors(&args.data)?;
    if let Some(path) = &args.exclude {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let drop: HashSet<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        records.retain(|r| !drop.contains(r.id.as_str()));
    }
    let raw = LabeledDataset::from_records(records)?;
    let preprocessing = PreprocessConfig {
        whiten: !args.no_whiten,
        length_normalize: !args.no_length_norm,
        ridge: args.ridge,
    };
    let preprocessor = preprocessing.fit(&raw).context("preprocess")?;
    let data = raw.preprocess(&preprocessor).context("preprocess")?;
    let fit = em_fit(
        &data,
        &EmConfig {
            speaker_dim: args.f,
            channel_dim: args.g,
            iterations: args.iterations,
            seed: harness::stage_seed(seed, harness::EM_STREAM),
            tolerance: args.tolerance,
        },
    )?;
    log::info!(
        "EM ran {} iterations, log-likelihood {:.4}",
        fit.log_likelihoods.len() - 1,
        fit.log_likelihoods.last().copied().unwrap_or(f64::NAN)
    );
    ModelContainer::new(&fit.params, Some(&preprocessor), Some(seed)).write(&args.out)?;
    Ok(())
}

struct LoadedModel {
    ops: DerivedOperators,
    preprocessor: Preprocessor,
}

fn load_model(path: &Path) -> anyhow::Result<LoadedModel> {
    let container = ModelContainer::read(path)?;
    Ok(LoadedModel {
        ops: DerivedOperators::new(container.parameters()?)?,
        preprocessor: container.preprocessor()?,
    })
}

impl LoadedModel {
    /// Preprocessed and mean-subtracted.
    fn prepare(&self, v: &nalgebra::DVector<f64>) -> anyhow::Result<nalgebra::DVector<f64>> {
        Ok(self.ops.params().center(&self.preprocessor.apply(v)?)?)
    }

    fn enrollments(&self, path: &Path) -> anyhow::Result<Vec<Enrollment>> {
        let groups = LabeledDataset::from_records(io::read_ivectors(path)?)?;
        groups
            .speakers()
            .iter()
            .map(|s| {
                let vectors = s.vectors.iter().map(|v| self.prepare(v)).collect::<anyhow::Result<Vec<_>>>()?;
                Ok(Enrollment::from_vectors(s.speaker_id.clone(), &vectors)?)
            })
            .collect()
    }
}

fn calibrations(model: &LoadedModel, enrollments: &[Enrollment], beta: f64) -> anyhow::Result<Vec<CalibratedSpeaker>> {
    let dcf = DcfConfig::new(beta)?;
    use rayon::prelude::*;
    Ok(enrollments
        .par_iter()
        .map(|e| CalibratedSpeaker::with_fallback(speaker_stats(&model.ops, e)?, &dcf))
        .collect::<crate::Result<Vec<_>>>()?)
}

fn score(
    model: &Path,
    enroll: &Path,
    tests: &Path,
    trials: &Path,
    normalize: Normalize,
    beta: f64,
    out: &Path,
) -> anyhow::Result<()> {
    let model = load_model(model)?;
    let enrollments = model.enrollments(enroll)?;
    let tests = io::read_ivectors(tests)?
        .into_iter()
        .map(|r| Ok((r.id, model.prepare(&r.vector)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let trials = io::read_trials(trials)?;
    let scores = batch_score(&model.ops, &enrollments, &tests, &trials)?;
    let normalized: Option<HashMap<&str, CalibratedSpeaker>> = match normalize {
        Normalize::None => None,
        Normalize::Blind => Some(
            enrollments
                .iter()
                .map(|e| e.speaker_id.as_str())
                .zip(calibrations(&model, &enrollments, beta)?)
                .collect(),
        ),
    };
    let rows: Vec<ScoreRecord> = trials
        .iter()
        .zip(&scores)
        .map(|(t, &s)| ScoreRecord {
            model_id: t.model_id.clone(),
            test_id: t.test_id.clone(),
            score: s,
            normalized: normalized
                .as_ref()
                .map(|cal| normalize_score(s, &cal[t.model_id.as_str()])),
        })
        .collect();
    io::write_scores(out, &rows)?;
    Ok(())
}

fn calibrate(model: &Path, enroll: &Path, beta: f64, out: &Path) -> anyhow::Result<()> {
    let model = load_model(model)?;
    let enrollments = model.enrollments(enroll)?;
    let cals = calibrations(&model, &enrollments, beta)?;
    let mut w = csv::Writer::from_path(out).with_context(|| format!("creating {}", out.display()))?;
    w.write_record([
        "speaker_id",
        "count",
        "mu1",
        "var1",
        "mu2",
        "var2",
        "threshold",
        "scale",
        "fallback",
    ])?;
    for c in &cals {
        let m = &c.stats.moments;
        w.write_record([
            c.stats.speaker_id.clone(),
            c.stats.count.to_string(),
            m.mu1.to_string(),
            m.var1.to_string(),
            m.mu2.to_string(),
            m.var2.to_string(),
            c.threshold.to_string(),
            c.scale.to_string(),
            c.fallback.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Splits scores into target and non-target lists using the trial keys.
fn keyed_scores(
    scores: &[ScoreRecord],
    trials: &[Trial],
    pick: impl Fn(&ScoreRecord) -> f64,
) -> anyhow::Result<(Vec<f64>, Vec<f64>)> {
    let keys: HashMap<(&str, &str), TrialKey> = trials
        .iter()
        .map(|t| match t.key {
            Some(k) => Ok(((t.model_id.as_str(), t.test_id.as_str()), k)),
            None => bail!("trial {} / {} has no key", t.model_id, t.test_id),
        })
        .collect::<anyhow::Result<_>>()?;
    let (mut tar, mut non) = (Vec::new(), Vec::new());
    for s in scores {
        match keys.get(&(s.model_id.as_str(), s.test_id.as_str())) {
            Some(TrialKey::Target) => tar.push(pick(s)),
            Some(TrialKey::Nontarget) => non.push(pick(s)),
            None => bail!("score for {} / {} has no trial", s.model_id, s.test_id),
        }
    }
    Ok((tar, non))
}

fn eval(scores: &Path, trials: &Path, beta: f64, out: &mut (dyn Write + Send)) -> anyhow::Result<()> {
    let dcf = DcfConfig::new(beta)?;
    let scores = io::read_scores(scores)?;
    let trials = io::read_trials(trials)?;
    let mut report = |label: &str, pick: &dyn Fn(&ScoreRecord) -> f64| -> anyhow::Result<()> {
        let (tar, non) = keyed_scores(&scores, &trials, pick)?;
        let min = empirical_min_dcf(&tar, &non, &dcf)?;
        let eer = equal_error_rate(&tar, &non)?;
        writeln!(
            out,
            "{label:<10} minDCF {:.6}  threshold {}  EER {:.4}  targets {}  non-targets {}",
            min.value,
            min.threshold,
            eer,
            tar.len(),
            non.len()
        )?;
        Ok(())
    };
    report("raw", &|s| s.score)?;
    if scores.iter().all(|s| s.normalized.is_some()) && !scores.is_empty() {
        report("normalized", &|s| s.normalized.unwrap_or(f64::NAN))?;
    }
    Ok(())
}

fn experiment(config: Option<&Path>, dir: Option<&Path>, seed: Option<u64>, out: &mut (dyn Write + Send)) -> anyhow::Result<()> {
    let mut cfg: ExperimentConfig = read_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(dir) = dir {
        cfg.output_dir = Some(dir.to_path_buf());
    }
    let report = harness::run_experiment(&cfg)?;
    write!(out, "{}", harness::compare_table(&report).to_text())?;
    for c in &report.conditions {
        writeln!(
            out,
            "{}: {} speakers, {} fallbacks, relative improvement {:+.1}%",
            c.name,
            c.speakers,
            c.fallbacks,
            100.0 * c.relative_improvement()
        )?;
    }
    Ok(())
}
