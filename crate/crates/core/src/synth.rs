//! Synthetic i-vectors drawn from a ground-truth PLDA model, and the
//! enrollment conditions built from a labeled model set.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PldaParameters;
use crate::training::{LabeledDataset, SpeakerGroup};

/// Bucket sizes `(L, speakers)` of the reference mixed enrollment condition.
pub const MIXED_BUCKETS: [(usize, usize); 5] = [(1, 94), (2, 93), (3, 194), (4, 189), (5, 113)];

/// Shape of a random ground-truth model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruthModelSpec {
    pub dim: usize,
    pub speaker_dim: usize,
    pub channel_dim: usize,
    /// Per-dimension standard deviation contributed by `Fx`, on average.
    pub speaker_scale: f64,
    /// Per-dimension standard deviation contributed by `Gy`, on average.
    pub channel_scale: f64,
    /// `Σ` entries are drawn uniformly from this range.
    pub noise_range: (f64, f64),
}

impl Default for TruthModelSpec {
    fn default() -> Self {
        Self {
            dim: 100,
            speaker_dim: 80,
            channel_dim: 10,
            speaker_scale: 0.7,
            channel_scale: 0.5,
            noise_range: (0.5, 1.5),
        }
    }
}

impl TruthModelSpec {
    pub fn sample(&self, seed: u64) -> Result<PldaParameters> {
        let (lo, hi) = self.noise_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidConfig(format!("noise range ({lo}, {hi}) must be positive")));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let d = self.dim;
        let mut gaussian = |rows: usize, cols: usize, scale: f64| {
            DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let f_scale = self.speaker_scale / (self.speaker_dim.max(1) as f64).sqrt();
        let g_scale = self.channel_scale / (self.channel_dim.max(1) as f64).sqrt();
        let mean = gaussian(d, 1, 1.0).column(0).into_owned();
        let f = gaussian(d, self.speaker_dim, f_scale);
        let g = gaussian(d, self.channel_dim, g_scale);
        let noise = DVector::from_fn(d, |_, _| if hi > lo { rng.random_range(lo..hi) } else { lo });
        PldaParameters::new(mean, f, g, noise)
    }
}

/// Number of i-vectors drawn per speaker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorCount {
    Fixed(usize),
    /// Uniform over the inclusive range.
    Uniform { min: usize, max: usize },
}

impl VectorCount {
    fn validate(&self) -> Result<()> {
        match *self {
            VectorCount::Fixed(n) if n >= 1 => Ok(()),
            VectorCount::Uniform { min, max } if min >= 1 && max >= min => Ok(()),
            other => Err(Error::InvalidConfig(format!("invalid vector count {other:?}"))),
        }
    }

    fn draw(&self, rng: &mut impl Rng) -> usize {
        match *self {
            VectorCount::Fixed(n) => n,
            VectorCount::Uniform { min, max } => rng.random_range(min..=max),
        }
    }

    pub fn min(&self) -> usize {
        match *self {
            VectorCount::Fixed(n) => n,
            VectorCount::Uniform { min, .. } => min,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub truth: PldaParameters,
    pub n_speakers: usize,
    pub vectors_per_speaker: VectorCount,
    pub seed: u64,
    /// Prepended to generated speaker ids.
    pub id_prefix: String,
}

/// Draws one speaker factor per speaker and fresh channel factor and noise per vector.
///
/// Speaker `k` uses its own ChaCha stream `k` under `seed`, so output does not
/// depend on the thread count.
pub fn sample_dataset(cfg: &SynthConfig) -> Result<LabeledDataset> {
    if cfg.n_speakers == 0 {
        return Err(Error::InvalidConfig("at least one speaker is required".into()));
    }
    cfg.vectors_per_speaker.validate()?;
    let p = &cfg.truth;
    let noise_sd = p.noise_variance().map(f64::sqrt);
    let speakers = (0..cfg.n_speakers)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
            rng.set_stream(k as u64);
            let n = cfg.vectors_per_speaker.draw(&mut rng);
            let x = standard_normal(&mut rng, p.speaker_dim());
            let centre = p.mean() + p.speaker_loading() * x;
            let speaker_id = format!("{}{k:05}", cfg.id_prefix);
            let vectors: Vec<DVector<f64>> = (0..n)
                .map(|_| {
                    let y = standard_normal(&mut rng, p.channel_dim());
                    let e = standard_normal(&mut rng, p.dim()).component_mul(&noise_sd);
                    &centre + p.channel_loading() * y + e
                })
                .collect();
            SpeakerGroup {
                ids: (0..n).map(|j| format!("{speaker_id}_{j:02}")).collect(),
                speaker_id,
                vectors,
            }
        })
        .collect();
    LabeledDataset::new(speakers)
}

fn standard_normal(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// One `(L, speakers)` bucket; `speakers: None` takes every available speaker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub enroll: usize,
    pub speakers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrollmentConditionSpec {
    pub name: String,
    pub buckets: Vec<Bucket>,
}

impl EnrollmentConditionSpec {
    /// Every speaker enrolled with its first `l` vectors.
    pub fn uniform(l: usize) -> Self {
        Self {
            name: format!("L{l}"),
            buckets: vec![Bucket {
                enroll: l,
                speakers: None,
            }],
        }
    }

    /// The reference mixed condition; scaled down when fewer speakers are available.
    pub fn mixed() -> Self {
        Self {
            name: "mixed".into(),
            buckets: MIXED_BUCKETS
                .iter()
                .map(|&(enroll, n)| Bucket {
                    enroll,
                    speakers: Some(n),
                })
                .collect(),
        }
    }

    /// Five uniform conditions `L = 1..5` followed by the mixed one.
    pub fn standard_set() -> Vec<Self> {
        (1..=5).map(Self::uniform).chain([Self::mixed()]).collect()
    }

    pub fn max_enroll(&self) -> usize {
        self.buckets.iter().map(|b| b.enroll).max().unwrap_or(0)
    }

    fn validate(&self) -> Result<()> {
        if self.buckets.is_empty() {
            return Err(Error::InvalidConfig(format!("condition {} has no buckets", self.name)));
        }
        if self.buckets.iter().any(|b| b.enroll == 0) {
            return Err(Error::InvalidConfig(format!("condition {} has a bucket with L = 0", self.name)));
        }
        if self.buckets.len() > 1 && self.buckets.iter().any(|b| b.speakers.is_none()) {
            return Err(Error::InvalidConfig(format!(
                "condition {}: an all-speaker bucket must be the only bucket",
                self.name
            )));
        }
        Ok(())
    }

    /// Speaker count per bucket given `available` speakers.
    ///
    /// Counts are used as given when they fit; otherwise they are scaled to
    /// `available` with largest-remainder rounding.
    pub fn resolve_counts(&self, available: usize) -> Result<Vec<usize>> {
        self.validate()?;
        if let [Bucket { speakers: None, .. }] = self.buckets.as_slice() {
            return Ok(vec![available]);
        }
        let wanted: Vec<usize> = self.buckets.iter().map(|b| b.speakers.unwrap_or(0)).collect();
        let total: usize = wanted.iter().sum();
        if total <= available {
            return Ok(wanted);
        }
        Ok(largest_remainder(&wanted, available))
    }
}

/// Apportions `target` seats proportionally to `weights`; ties go to the earlier bucket.
pub fn largest_remainder(weights: &[usize], target: usize) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    if total == 0 {
        return vec![0; weights.len()];
    }
    let mut counts: Vec<usize> = weights.iter().map(|&w| w * target / total).collect();
    let mut remainders: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(k, &w)| (w * target % total, k))
        .collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = target - counts.iter().sum::<usize>();
    for &(_, k) in remainders.iter().take(missing) {
        counts[k] += 1;
    }
    counts
}

/// How a labeled model set is split into enrollment and test vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestSplit {
    /// Vectors from this position on are tests in every condition; enrollment
    /// sizes may not exceed it. The test set is then shared by all conditions.
    FixedPool(usize),
    /// Whatever follows a speaker's enrollment vectors is a test.
    AfterEnrollment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEnrollment {
    pub speaker_id: String,
    pub ids: Vec<String>,
    pub vectors: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestVector {
    pub id: String,
    pub speaker_id: String,
    pub vector: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub name: String,
    pub enrollments: Vec<ConditionEnrollment>,
    pub tests: Vec<TestVector>,
}

/// Builds a condition's enrollments from the first `L` vectors of each chosen
/// speaker. Speakers are assigned to buckets by a shuffle seeded with `seed`.
pub fn build_condition(
    models: &LabeledDataset,
    spec: &EnrollmentConditionSpec,
    split: TestSplit,
    seed: u64,
) -> Result<Condition> {
    let speakers = models.speakers();
    let counts = spec.resolve_counts(speakers.len())?;
    if let TestSplit::FixedPool(pool) = split {
        if spec.max_enroll() > pool {
            return Err(Error::InvalidConfig(format!(
                "condition {} enrolls {} vectors but the pool holds {pool}",
                spec.name,
                spec.max_enroll()
            )));
        }
    }
    let mut order: Vec<usize> = (0..speakers.len()).collect();
    if spec.buckets.len() > 1 {
        order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    }
    let mut assignment: Vec<Option<usize>> = vec![None; speakers.len()];
    let mut next = order.into_iter();
    for (bucket, &n) in spec.buckets.iter().zip(&counts) {
        for k in next.by_ref().take(n) {
            assignment[k] = Some(bucket.enroll);
        }
    }

    let mut enrollments = Vec::new();
    let mut tests = Vec::new();
    for (s, l) in speakers.iter().zip(&assignment) {
        let needed = match (split, l) {
            (TestSplit::FixedPool(pool), _) => pool + 1,
            (TestSplit::AfterEnrollment, Some(l)) => l + 1,
            (TestSplit::AfterEnrollment, None) => 1,
        };
        if s.vectors.len() < needed {
            return Err(Error::InsufficientVectors {
                speaker: s.speaker_id.clone(),
                available: s.vectors.len(),
                required: needed,
            });
        }
        let l = l.unwrap_or(0);
        if l > 0 {
            enrollments.push(ConditionEnrollment {
                speaker_id: s.speaker_id.clone(),
                ids: s.ids[..l].to_vec(),
                vectors: s.vectors[..l].to_vec(),
            });
        }
        // speakers outside every bucket still contribute impostor tests
        let start = match split {
            TestSplit::FixedPool(pool) => pool,
            TestSplit::AfterEnrollment => l,
        };
        for (id, v) in s.ids[start..].iter().zip(&s.vectors[start..]) {
            tests.push(TestVector {
                id: id.clone(),
                speaker_id: s.speaker_id.clone(),
                vector: v.clone(),
            });
        }
    }
    Ok(Condition {
        name: spec.name.clone(),
        enrollments,
        tests,
    })
}

pub fn build_conditions(
    models: &LabeledDataset,
    specs: &[EnrollmentConditionSpec],
    split: TestSplit,
    seed: u64,
) -> Result<Vec<Condition>> {
    specs.iter().map(|spec| build_condition(models, spec, split, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::sample_moments;
    use crate::testutil::random_params;
    use std::collections::HashSet;

    fn config(truth: PldaParameters, n: usize, per: VectorCount, seed: u64) -> SynthConfig {
        SynthConfig {
            truth,
            n_speakers: n,
            vectors_per_speaker: per,
            seed,
            id_prefix: "s".into(),
        }
    }

    #[test]
    fn pure_noise_has_identity_covariance() {
        let truth = PldaParameters::new(
            DVector::zeros(3),
            DMatrix::zeros(3, 1),
            DMatrix::zeros(3, 0),
            DVector::from_element(3, 1.0),
        )
        .unwrap();
        let data = sample_dataset(&config(truth, 2000, VectorCount::Fixed(10), 3)).unwrap();
        let all: Vec<_> = data.vectors().cloned().collect();
        let (mean, cov) = sample_moments(&all).unwrap();
        assert!(mean.amax() < 0.03);
        assert!((cov - DMatrix::identity(3, 3)).amax() < 0.03);
    }

    #[test]
    fn pooled_covariance_matches_model() {
        let mut rng = ChaCha20Rng::seed_from_u64(61);
        let truth = random_params(&mut rng, 4, 2, 1);
        // one vector per speaker keeps samples independent
        let data = sample_dataset(&config(truth.clone(), 100_000, VectorCount::Fixed(1), 4)).unwrap();
        let all: Vec<_> = data.vectors().cloned().collect();
        let (_, cov) = sample_moments(&all).unwrap();
        let want = truth.within_covariance() + truth.between_covariance();
        // standard error of a covariance entry is about √((C_ii C_jj + C_ij²)/n)
        for i in 0..4 {
            for j in 0..4 {
                let se = ((want[(i, i)] * want[(j, j)] + want[(i, j)].powi(2)) / 100_000.0).sqrt();
                assert!((cov[(i, j)] - want[(i, j)]).abs() < 5.0 * se, "({i},{j})");
            }
        }
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let truth = TruthModelSpec {
            dim: 6,
            speaker_dim: 3,
            channel_dim: 2,
            ..TruthModelSpec::default()
        }
        .sample(5)
        .unwrap();
        let cfg = config(truth, 50, VectorCount::Uniform { min: 2, max: 6 }, 11);
        let a = sample_dataset(&cfg).unwrap();
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = single.install(|| sample_dataset(&cfg).unwrap());
        assert_eq!(a, b);
        let counts: HashSet<usize> = a.speakers().iter().map(|s| s.vectors.len()).collect();
        assert!(counts.len() > 1 && counts.iter().all(|&n| (2..=6).contains(&n)));
        let other = sample_dataset(&SynthConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn truth_spec_scales() {
        let spec = TruthModelSpec::default();
        let p = spec.sample(1).unwrap();
        assert_eq!((p.dim(), p.speaker_dim(), p.channel_dim()), (100, 80, 10));
        let between = p.between_covariance().trace() / 100.0;
        assert!((between - 0.49).abs() < 0.05, "{between}");
        assert!(p.noise_variance().iter().all(|&s| (0.5..1.5).contains(&s)));
    }

    #[test]
    fn reference_counts_at_683() {
        let counts = EnrollmentConditionSpec::mixed().resolve_counts(683).unwrap();
        assert_eq!(counts, vec![94, 93, 194, 189, 113]);
        let counts = EnrollmentConditionSpec::mixed().resolve_counts(717).unwrap();
        assert_eq!(counts, vec![94, 93, 194, 189, 113]);
    }

    #[test]
    fn scaled_counts_at_100() {
        let counts = EnrollmentConditionSpec::mixed().resolve_counts(100).unwrap();
        assert_eq!(counts.iter().sum::<usize>(), 100);
        // quotas 13.76, 13.62, 28.40, 27.67, 16.54: the three largest remainders round up
        assert_eq!(counts, vec![14, 14, 28, 28, 16]);
        for (c, &(_, w)) in counts.iter().zip(&MIXED_BUCKETS) {
            let quota = w as f64 * 100.0 / 683.0;
            assert!((*c as f64 - quota).abs() < 1.0);
        }
    }

    #[test]
    fn largest_remainder_edge_cases() {
        assert_eq!(largest_remainder(&[1, 1, 1], 2), vec![1, 1, 0]);
        assert_eq!(largest_remainder(&[0, 0], 5), vec![0, 0]);
        assert_eq!(largest_remainder(&[3, 1], 4), vec![3, 1]);
    }

    fn model_set(n: usize, per: usize) -> LabeledDataset {
        let truth = TruthModelSpec {
            dim: 4,
            speaker_dim: 2,
            channel_dim: 1,
            ..TruthModelSpec::default()
        }
        .sample(2)
        .unwrap();
        sample_dataset(&config(truth, n, VectorCount::Fixed(per), 8)).unwrap()
    }

    #[test]
    fn uniform_condition_uses_first_vectors() {
        let models = model_set(10, 8);
        let c = build_condition(&models, &EnrollmentConditionSpec::uniform(3), TestSplit::FixedPool(5), 0).unwrap();
        assert_eq!(c.enrollments.len(), 10);
        assert!(c.enrollments.iter().all(|e| e.vectors.len() == 3));
        assert_eq!(c.enrollments[0].ids, models.speakers()[0].ids[..3].to_vec());
        assert_eq!(c.tests.len(), 30);
        let one = build_condition(&models, &EnrollmentConditionSpec::uniform(1), TestSplit::FixedPool(5), 0).unwrap();
        assert_eq!(one.tests, c.tests);
        let after = build_condition(&models, &EnrollmentConditionSpec::uniform(1), TestSplit::AfterEnrollment, 0).unwrap();
        assert_eq!(after.tests.len(), 70);
    }

    #[test]
    fn mixed_condition_is_disjoint_and_deterministic() {
        let models = model_set(100, 7);
        let spec = EnrollmentConditionSpec::mixed();
        let c = build_condition(&models, &spec, TestSplit::FixedPool(5), 42).unwrap();
        let again = build_condition(&models, &spec, TestSplit::FixedPool(5), 42).unwrap();
        assert_eq!(c, again);
        let mut per_l = [0usize; 6];
        for e in &c.enrollments {
            per_l[e.vectors.len()] += 1;
        }
        assert_eq!(&per_l[1..], &[14, 14, 28, 28, 16]);
        let enrolled: HashSet<&str> = c.enrollments.iter().flat_map(|e| e.ids.iter().map(String::as_str)).collect();
        assert!(c.tests.iter().all(|t| !enrolled.contains(t.id.as_str())));
        let other = build_condition(&models, &spec, TestSplit::FixedPool(5), 43).unwrap();
        assert_ne!(c.enrollments, other.enrollments);
    }

    #[test]
    fn insufficient_vectors_names_speaker() {
        let models = model_set(3, 5);
        let err = build_condition(&models, &EnrollmentConditionSpec::uniform(2), TestSplit::FixedPool(5), 0).unwrap_err();
        assert!(matches!(err, Error::InsufficientVectors { ref speaker, .. } if speaker == "s00000"));
        assert!(build_condition(&models, &EnrollmentConditionSpec::uniform(6), TestSplit::FixedPool(5), 0).is_err());
        assert!(build_condition(&models, &EnrollmentConditionSpec::uniform(4), TestSplit::AfterEnrollment, 0).is_ok());
    }
}
