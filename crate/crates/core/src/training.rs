//! Maximum-likelihood estimation of PLDA parameters by expectation-maximization.
//!
//! The mean is fixed to the sample mean. Each E-step computes the exact joint
//! posterior of a speaker's latent variables `(x, y_1, …, y_n)`; the M-step
//! updates `[F G]` jointly and then the diagonal `Σ`.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::IvectorRecord;
use crate::linalg;
use crate::model::{DerivedOperators, PldaParameters};
use crate::preprocess::Preprocessor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerGroup {
    pub speaker_id: String,
    pub ids: Vec<String>,
    pub vectors: Vec<DVector<f64>>,
}

/// Labeled i-vectors grouped by speaker, in first-appearance order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    speakers: Vec<SpeakerGroup>,
}

impl LabeledDataset {
    pub fn new(speakers: Vec<SpeakerGroup>) -> Result<Self> {
        let mut dim = None;
        for s in &speakers {
            if s.vectors.is_empty() {
                return Err(Error::InsufficientVectors {
                    speaker: s.speaker_id.clone(),
                    available: 0,
                    required: 1,
                });
            }
            if s.ids.len() != s.vectors.len() {
                return Err(Error::mismatch(format!("ids of {}", s.speaker_id), s.vectors.len(), s.ids.len()));
            }
            for v in &s.vectors {
                let d = *dim.get_or_insert(v.len());
                linalg::check_len("i-vector", v, d)?;
            }
        }
        Ok(Self { speakers })
    }

    /// Groups `(id, speaker, vector)` records; every record must carry a speaker.
    pub fn from_records(records: Vec<IvectorRecord>) -> Result<Self> {
        let mut order: Vec<SpeakerGroup> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        for r in records {
            let speaker = r
                .speaker
                .ok_or_else(|| Error::InvalidConfig(format!("i-vector {} has no speaker label", r.id)))?;
            let k = *index.entry(speaker.clone()).or_insert_with(|| {
                order.push(SpeakerGroup {
                    speaker_id: speaker,
                    ids: Vec::new(),
                    vectors: Vec::new(),
                });
                order.len() - 1
            });
            order[k].ids.push(r.id);
            order[k].vectors.push(r.vector);
        }
        Self::new(order)
    }

    pub fn to_records(&self) -> Vec<IvectorRecord> {
        self.speakers
            .iter()
            .flat_map(|s| {
                s.ids.iter().zip(&s.vectors).map(|(id, v)| IvectorRecord {
                    id: id.clone(),
                    speaker: Some(s.speaker_id.clone()),
                    vector: v.clone(),
                })
            })
            .collect()
    }

    pub fn speakers(&self) -> &[SpeakerGroup] {
        &self.speakers
    }

    pub fn dim(&self) -> Option<usize> {
        self.speakers.first().map(|s| s.vectors[0].len())
    }

    pub fn n_vectors(&self) -> usize {
        self.speakers.iter().map(|s| s.vectors.len()).sum()
    }

    pub fn vectors(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.speakers.iter().flat_map(|s| s.vectors.iter())
    }

    pub fn map_vectors(&self, f: impl Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync) -> Result<Self> {
        let speakers = self
            .speakers
            .par_iter()
            .map(|s| {
                Ok(SpeakerGroup {
                    speaker_id: s.speaker_id.clone(),
                    ids: s.ids.clone(),
                    vectors: s.vectors.iter().map(&f).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(speakers)
    }

    pub fn preprocess(&self, p: &Preprocessor) -> Result<Self> {
        self.map_vectors(|v| p.apply(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub speaker_dim: usize,
    pub channel_dim: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Stop early once the relative log-likelihood gain falls below this; 0 disables.
    pub tolerance: f64,
}

impl EmConfig {
    pub fn new(speaker_dim: usize, channel_dim: usize) -> Self {
        Self {
            speaker_dim,
            channel_dim,
            iterations: 50,
            seed: 0,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub params: PldaParameters,
    /// Log-likelihood of the initial model followed by one entry per iteration.
    pub log_likelihoods: Vec<f64>,
}

/// Total log-density of every speaker's vectors, marginalizing the latent factors.
///
/// For a group of `n` mean-subtracted vectors with sum `S`:
/// `−½ [n d log 2π + n log|U| + Σ vᵀŪv + log|M_n| − Sᵀ K_n S]`.
pub fn log_likelihood(params: &PldaParameters, data: &LabeledDataset) -> Result<f64> {
    if let Some(d) = data.dim() {
        if d != params.dim() {
            return Err(Error::mismatch("dataset dimension", params.dim(), d));
        }
    }
    let ops = DerivedOperators::new(params.clone())?;
    let log_det_u = linalg::log_det(&linalg::cholesky(ops.within(), "U")?);
    let d = params.dim() as f64;
    let per_speaker = data
        .speakers
        .par_iter()
        .map(|s| {
            let n = s.vectors.len();
            let level = ops.level(n)?;
            let mut sum = DVector::zeros(params.dim());
            let mut quad = 0.0;
            for v in &s.vectors {
                let c = v - params.mean();
                quad += c.dot(&(ops.within_inv() * &c));
                sum += c;
            }
            let explained = sum.dot(&(&level.k * &sum));
            Ok(-0.5 * (n as f64 * (d * LN_2PI + log_det_u) + quad + level.log_det_m - explained))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_speaker.iter().sum())
}

/// Posterior quantities shared by every group of a given size.
struct GroupPosterior {
    /// `Cov(x)`
    cov_x: DMatrix<f64>,
}

/// Per-iteration constants of the E-step.
struct EStep {
    f: usize,
    g: usize,
    /// `Fᵀ Σ⁻¹` and `Gᵀ Σ⁻¹`
    ft_sinv: DMatrix<f64>,
    gt_sinv: DMatrix<f64>,
    /// `(I + Gᵀ Σ⁻¹ G)⁻¹`
    jyy_inv: DMatrix<f64>,
    /// `Fᵀ Σ⁻¹ G (I + Gᵀ Σ⁻¹ G)⁻¹`
    coupling: DMatrix<f64>,
    groups: BTreeMap<usize, GroupPosterior>,
}

impl EStep {
    fn new(loading: &DMatrix<f64>, f: usize, noise: &DVector<f64>, sizes: &[usize]) -> Result<Self> {
        let g = loading.ncols() - f;
        let sinv = noise.map(|s| 1.0 / s);
        let mut phit_sinv = loading.transpose();
        for (j, mut col) in phit_sinv.column_iter_mut().enumerate() {
            col *= sinv[j];
        }
        let ft_sinv = phit_sinv.rows(0, f).into_owned();
        let gt_sinv = phit_sinv.rows(f, g).into_owned();
        let fmat = loading.columns(0, f);
        let gmat = loading.columns(f, g);
        let jxx = linalg::symmetrize(&(&ft_sinv * fmat));
        let (jyy_inv, coupling, reduced_precision) = if g > 0 {
            let jyy = linalg::symmetrize(&(&gt_sinv * gmat)) + DMatrix::identity(g, g);
            let jyy_inv = linalg::spd_inverse(&jyy, "channel posterior precision")?;
            let jxy = &ft_sinv * gmat;
            let coupling = &jxy * &jyy_inv;
            let reduced = linalg::symmetrize(&(&jxx - &coupling * jxy.transpose()));
            (jyy_inv, coupling, reduced)
        } else {
            (DMatrix::zeros(0, 0), DMatrix::zeros(f, 0), jxx)
        };
        let mut groups = BTreeMap::new();
        for &n in sizes {
            let precision = &reduced_precision * n as f64 + DMatrix::identity(f, f);
            let cov_x = linalg::spd_inverse(&precision, "speaker posterior precision")?;
            groups.insert(n, GroupPosterior { cov_x });
        }
        Ok(Self {
            f,
            g,
            ft_sinv,
            gt_sinv,
            jyy_inv,
            coupling,
            groups,
        })
    }

    /// Adds one speaker's contribution to `Σ v E[w]ᵀ` and `Σ E[w wᵀ]`, `w = [x; y]`.
    fn accumulate(&self, centered: &[DVector<f64>], acc: &mut Accumulator) {
        let (f, g) = (self.f, self.g);
        let n = centered.len();
        let cov_x = &self.groups[&n].cov_x;
        let mut sum = DVector::zeros(centered[0].len());
        for v in centered {
            sum += v;
        }
        let h_x = &self.ft_sinv * &sum;
        let h_y: Vec<DVector<f64>> = centered.iter().map(|v| &self.gt_sinv * v).collect();
        let h_y_sum = h_y.iter().fold(DVector::zeros(g), |a, b| a + b);
        let ex = cov_x * (&h_x - &self.coupling * &h_y_sum);

        // posterior covariance of w_k, identical for every vector of the group
        let k = f + g;
        let mut cov_w = DMatrix::zeros(k, k);
        cov_w.view_mut((0, 0), (f, f)).copy_from(cov_x);
        if g > 0 {
            let cov_xy = -(cov_x * &self.coupling);
            let cov_yy = &self.jyy_inv + self.coupling.transpose() * cov_x * &self.coupling;
            cov_w.view_mut((0, f), (f, g)).copy_from(&cov_xy);
            cov_w.view_mut((f, 0), (g, f)).copy_from(&cov_xy.transpose());
            cov_w.view_mut((f, f), (g, g)).copy_from(&cov_yy);
        }
        acc.second += cov_w * n as f64;

        let ct_ex = self.coupling.transpose() * &ex;
        let mut ew = DVector::zeros(k);
        ew.rows_mut(0, f).copy_from(&ex);
        for (v, hy) in centered.iter().zip(&h_y) {
            if g > 0 {
                let ey = &self.jyy_inv * hy - &ct_ex;
                ew.rows_mut(f, g).copy_from(&ey);
            }
            acc.second.syger(1.0, &ew, &ew, 1.0);
            acc.cross.ger(1.0, v, &ew, 1.0);
            for (j, x) in v.iter().enumerate() {
                acc.squares[j] += x * x;
            }
        }
    }
}

struct Accumulator {
    /// `Σ v E[w]ᵀ`, `d × k`
    cross: DMatrix<f64>,
    /// `Σ E[w wᵀ]`, lower triangle only until finalized.
    second: DMatrix<f64>,
    /// `Σ v_j²`
    squares: DVector<f64>,
}

impl Accumulator {
    fn zeros(d: usize, k: usize) -> Self {
        Self {
            cross: DMatrix::zeros(d, k),
            second: DMatrix::zeros(k, k),
            squares: DVector::zeros(d),
        }
    }

    fn merge(&mut self, other: &Accumulator) {
        self.cross += &other.cross;
        self.second += &other.second;
        self.squares += &other.squares;
    }
}

const CHUNK: usize = 32;

fn initial_parameters(
    mean: &DVector<f64>,
    centered: &[Vec<DVector<f64>>],
    cfg: &EmConfig,
) -> Result<PldaParameters> {
    let d = mean.len();
    let n: usize = centered.iter().map(Vec::len).sum();
    let mut var = DVector::zeros(d);
    for v in centered.iter().flatten() {
        for (j, x) in v.iter().enumerate() {
            var[j] += x * x;
        }
    }
    var /= n as f64;
    let avg = var.sum() / d as f64;
    let floor = 1e-6 * avg.max(f64::MIN_POSITIVE);
    let noise = var.map(|v| v.max(floor));
    let k = cfg.speaker_dim + cfg.channel_dim;
    let scale = (0.5 * avg / k as f64).sqrt();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut draw = |rows, cols| DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    let f = draw(d, cfg.speaker_dim);
    let g = draw(d, cfg.channel_dim);
    PldaParameters::new(mean.clone(), f, g, noise)
}

pub fn em_fit(data: &LabeledDataset, cfg: &EmConfig) -> Result<EmFit> {
    let d = data.dim().ok_or(Error::Empty("training data"))?;
    if cfg.speaker_dim == 0 {
        return Err(Error::InvalidConfig("speaker dimension must be at least 1".into()));
    }
    if cfg.speaker_dim > d || cfg.channel_dim > d {
        return Err(Error::InvalidConfig(format!(
            "factor dimensions f={} g={} exceed data dimension {d}",
            cfg.speaker_dim, cfg.channel_dim
        )));
    }
    if cfg.iterations == 0 {
        return Err(Error::InvalidConfig("at least one EM iteration is required".into()));
    }
    if data.speakers().len() < 2 {
        return Err(Error::InvalidConfig("EM needs at least two speakers".into()));
    }

    let n_total = data.n_vectors();
    let mut mean = DVector::zeros(d);
    for v in data.vectors() {
        mean += v;
    }
    mean /= n_total as f64;
    let centered: Vec<Vec<DVector<f64>>> = data
        .speakers()
        .iter()
        .map(|s| s.vectors.iter().map(|v| v - &mean).collect())
        .collect();
    let mut sizes: Vec<usize> = centered.iter().map(Vec::len).collect();
    sizes.sort_unstable();
    sizes.dedup();

    let f = cfg.speaker_dim;
    let k = f + cfg.channel_dim;
    let mut params = initial_parameters(&mean, &centered, cfg)?;
    let mut log_likelihoods = vec![log_likelihood(&params, data)?];

    for iteration in 0..cfg.iterations {
        let mut loading = DMatrix::zeros(d, k);
        loading.columns_mut(0, f).copy_from(params.speaker_loading());
        loading.columns_mut(f, cfg.channel_dim).copy_from(params.channel_loading());
        let estep = EStep::new(&loading, f, params.noise_variance(), &sizes)?;

        // fixed-size chunks summed in order keep the result independent of the thread count
        let partials: Vec<Accumulator> = centered
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = Accumulator::zeros(d, k);
                for group in chunk {
                    estep.accumulate(group, &mut acc);
                }
                acc
            })
            .collect();
        let mut acc = Accumulator::zeros(d, k);
        for p in &partials {
            acc.merge(p);
        }
        acc.second.fill_upper_triangle_with_lower_triangle();

        let chol = linalg::cholesky(&acc.second, "latent second moment")?;
        let new_loading = chol.solve(&acc.cross.transpose()).transpose();
        let avg = acc.squares.sum() / (n_total * d) as f64;
        let floor = 1e-10 * avg.max(f64::MIN_POSITIVE);
        let noise = DVector::from_fn(d, |j, _| {
            let explained = new_loading.row(j).dot(&acc.cross.row(j));
            ((acc.squares[j] - explained) / n_total as f64).max(floor)
        });
        params = PldaParameters::new(
            mean.clone(),
            new_loading.columns(0, f).into_owned(),
            new_loading.columns(f, cfg.channel_dim).into_owned(),
            noise,
        )?;
        let ll = log_likelihood(&params, data)?;
        let prev = *log_likelihoods.last().expect("initial log-likelihood");
        log_likelihoods.push(ll);
        log::debug!("em iteration {}: log-likelihood {ll:.6}", iteration + 1);
        if cfg.tolerance > 0.0 && (ll - prev).abs() <= cfg.tolerance * prev.abs() {
            break;
        }
    }
    Ok(EmFit { params, log_likelihoods })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_params, random_vector, same_speaker_covariance};
    use nalgebra::dvector;

    fn sample(params: &PldaParameters, speakers: usize, per: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let groups = (0..speakers)
            .map(|s| {
                let x = random_vector(&mut rng, params.speaker_dim());
                let vectors: Vec<_> = (0..per)
                    .map(|_| {
                        let y = random_vector(&mut rng, params.channel_dim());
                        let e = random_vector(&mut rng, params.dim()).component_mul(&params.noise_variance().map(f64::sqrt));
                        params.mean() + params.speaker_loading() * &x + params.channel_loading() * y + e
                    })
                    .collect();
                SpeakerGroup {
                    speaker_id: format!("s{s}"),
                    ids: (0..per).map(|k| format!("s{s}_{k}")).collect(),
                    vectors,
                }
            })
            .collect();
        LabeledDataset::new(groups).unwrap()
    }

    #[test]
    fn standard_normal_density() {
        let p = PldaParameters::new(
            DVector::zeros(3),
            DMatrix::zeros(3, 1),
            DMatrix::zeros(3, 0),
            DVector::from_element(3, 1.0),
        )
        .unwrap();
        let data = LabeledDataset::new(vec![SpeakerGroup {
            speaker_id: "a".into(),
            ids: vec!["a0".into()],
            vectors: vec![DVector::zeros(3)],
        }])
        .unwrap();
        let ll = log_likelihood(&p, &data).unwrap();
        assert!((ll + 1.5 * LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_matches_block_gaussian() {
        let mut rng = ChaCha20Rng::seed_from_u64(51);
        for trial in 0..10 {
            let d = 3 + trial % 5;
            let p = random_params(&mut rng, d, 2, 1);
            let ops = DerivedOperators::new(p.clone()).unwrap();
            let groups: Vec<SpeakerGroup> = (1..=4)
                .map(|n| SpeakerGroup {
                    speaker_id: format!("s{n}"),
                    ids: (0..n).map(|k| format!("s{n}_{k}")).collect(),
                    vectors: (0..n).map(|_| random_vector(&mut rng, d)).collect(),
                })
                .collect();
            let data = LabeledDataset::new(groups.clone()).unwrap();
            let mut want = 0.0;
            for g in &groups {
                let n = g.vectors.len();
                let cov = same_speaker_covariance(ops.within(), ops.between(), n);
                let mut stacked = DVector::zeros(n * d);
                for (k, v) in g.vectors.iter().enumerate() {
                    stacked.rows_mut(k * d, d).copy_from(&(v - p.mean()));
                }
                let chol = cov.cholesky().unwrap();
                let log_det = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
                want += -0.5 * ((n * d) as f64 * LN_2PI + log_det + stacked.dot(&chol.solve(&stacked)));
            }
            let got = log_likelihood(&p, &data).unwrap();
            assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn em_is_monotone_and_deterministic() {
        let mut rng = ChaCha20Rng::seed_from_u64(52);
        let truth = random_params(&mut rng, 6, 2, 1);
        let data = sample(&truth, 60, 4, 1);
        let mut cfg = EmConfig::new(2, 1);
        cfg.iterations = 30;
        cfg.tolerance = 0.0;
        cfg.seed = 9;
        let fit = em_fit(&data, &cfg).unwrap();
        assert_eq!(fit.log_likelihoods.len(), 31);
        for w in fit.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{} -> {}", w[0], w[1]);
        }
        let again = em_fit(&data, &cfg).unwrap();
        assert_eq!(fit.params, again.params);
    }

    #[test]
    fn no_channel_factor() {
        let mut rng = ChaCha20Rng::seed_from_u64(53);
        let truth = random_params(&mut rng, 5, 2, 0);
        let data = sample(&truth, 80, 3, 2);
        let mut cfg = EmConfig::new(2, 0);
        cfg.iterations = 20;
        let fit = em_fit(&data, &cfg).unwrap();
        assert_eq!(fit.params.channel_dim(), 0);
        for w in fit.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-8);
        }
    }

    #[test]
    fn invalid_configs() {
        let data = LabeledDataset::new(vec![SpeakerGroup {
            speaker_id: "a".into(),
            ids: vec!["a0".into(), "a1".into()],
            vectors: vec![dvector![1.0, 2.0], dvector![0.0, 1.0]],
        }])
        .unwrap();
        assert!(em_fit(&data, &EmConfig::new(1, 0)).is_err());
        let mut rng = ChaCha20Rng::seed_from_u64(54);
        let two = sample(&random_params(&mut rng, 2, 1, 1), 3, 2, 3);
        assert!(em_fit(&two, &EmConfig::new(3, 0)).is_err());
        assert!(em_fit(&two, &EmConfig::new(1, 3)).is_err());
        assert!(em_fit(&two, &EmConfig::new(0, 1)).is_err());
    }

    #[test]
    fn grouping_preserves_order() {
        let recs = vec![
            IvectorRecord {
                id: "1".into(),
                speaker: Some("b".into()),
                vector: dvector![1.0],
            },
            IvectorRecord {
                id: "2".into(),
                speaker: Some("a".into()),
                vector: dvector![2.0],
            },
            IvectorRecord {
                id: "3".into(),
                speaker: Some("b".into()),
                vector: dvector![3.0],
            },
        ];
        let ds = LabeledDataset::from_records(recs.clone()).unwrap();
        assert_eq!(ds.speakers()[0].speaker_id, "b");
        assert_eq!(ds.speakers()[0].vectors.len(), 2);
        assert_eq!(ds.n_vectors(), 3);
        let back = ds.to_records();
        assert_eq!(back.len(), 3);
        let unlabeled = vec![IvectorRecord {
            speaker: None,
            ..recs[0].clone()
        }];
        assert!(LabeledDataset::from_records(unlabeled).is_err());
    }
}
