//! The two-factor PLDA generative model and the operators derived from it.
//!
//! An i-vector `v` of speaker `x` is modelled as `v = m + F x + G y + e` with
//! `x ~ N(0, I_f)`, `y ~ N(0, I_g)` and `e ~ N(0, Σ)` for diagonal `Σ`.
//! Everything downstream works on mean-subtracted vectors and only needs the
//! within-speaker covariance `U = G Gᵀ + Σ`, its inverse, the between-speaker
//! covariance `V = F Fᵀ` and, per enrollment size `L`,
//!
//! ```text
//! M_L = L · Fᵀ U⁻¹ F + I_f
//! K_L = U⁻¹ F M_L⁻¹ Fᵀ U⁻¹
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::io::ModelContainer;
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct PldaParameters {
    mean: DVector<f64>,
    speaker_loading: DMatrix<f64>,
    channel_loading: DMatrix<f64>,
    noise_variance: DVector<f64>,
}

impl PldaParameters {
    /// Validates shapes and the noise variances. `channel_loading` may have zero columns.
    pub fn new(
        mean: DVector<f64>,
        speaker_loading: DMatrix<f64>,
        channel_loading: DMatrix<f64>,
        noise_variance: DVector<f64>,
    ) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidConfig("model dimension must be positive".into()));
        }
        if speaker_loading.nrows() != d {
            return Err(Error::mismatch("F rows", d, speaker_loading.nrows()));
        }
        if channel_loading.nrows() != d {
            return Err(Error::mismatch("G rows", d, channel_loading.nrows()));
        }
        if speaker_loading.ncols() > d {
            return Err(Error::InvalidConfig(format!(
                "speaker dimension {} exceeds model dimension {d}",
                speaker_loading.ncols()
            )));
        }
        if channel_loading.ncols() > d {
            return Err(Error::InvalidConfig(format!(
                "channel dimension {} exceeds model dimension {d}",
                channel_loading.ncols()
            )));
        }
        linalg::check_len("Sigma", &noise_variance, d)?;
        for (name, values) in [
            ("m", mean.as_slice()),
            ("F", speaker_loading.as_slice()),
            ("G", channel_loading.as_slice()),
            ("Sigma", noise_variance.as_slice()),
        ] {
            if !linalg::all_finite(values) {
                return Err(Error::NonFinite(name.into()));
            }
        }
        if let Some((index, &value)) = noise_variance.iter().enumerate().find(|(_, v)| **v <= 0.0) {
            return Err(Error::NonPositiveNoiseVariance { index, value });
        }
        Ok(Self {
            mean,
            speaker_loading,
            channel_loading,
            noise_variance,
        })
    }

    /// Model with zero mean and no channel factor.
    pub fn without_channel(speaker_loading: DMatrix<f64>, noise_variance: DVector<f64>) -> Result<Self> {
        let d = speaker_loading.nrows();
        Self::new(
            DVector::zeros(d),
            speaker_loading,
            DMatrix::zeros(d, 0),
            noise_variance,
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn speaker_dim(&self) -> usize {
        self.speaker_loading.ncols()
    }

    pub fn channel_dim(&self) -> usize {
        self.channel_loading.ncols()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn speaker_loading(&self) -> &DMatrix<f64> {
        &self.speaker_loading
    }

    pub fn channel_loading(&self) -> &DMatrix<f64> {
        &self.channel_loading
    }

    pub fn noise_variance(&self) -> &DVector<f64> {
        &self.noise_variance
    }

    /// `v - m`
    pub fn center(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        linalg::check_len("i-vector", v, self.dim())?;
        Ok(v - &self.mean)
    }

    /// `G Gᵀ + Σ`
    pub fn within_covariance(&self) -> DMatrix<f64> {
        let g = &self.channel_loading;
        let mut u = g * g.transpose();
        for (i, s) in self.noise_variance.iter().enumerate() {
            u[(i, i)] += s;
        }
        u
    }

    /// `F Fᵀ`
    pub fn between_covariance(&self) -> DMatrix<f64> {
        &self.speaker_loading * self.speaker_loading.transpose()
    }
}

/// Reads a parameter container (see `docs/formats.md`).
pub fn load_parameters(path: impl AsRef<Path>) -> Result<PldaParameters> {
    ModelContainer::read(path.as_ref())?.parameters()
}

/// Insert-once cache keyed by enrollment size.
///
/// Values are computed outside the lock; when two threads race on the same key
/// the first stored value wins and both callers get it.
#[derive(Debug)]
pub(crate) struct LevelCache<T> {
    entries: RwLock<BTreeMap<usize, Arc<T>>>,
}

impl<T> Default for LevelCache<T> {
    fn default() -> Self {
        Self {
            entries: RwLock::new(BTreeMap::new()),
        }
    }
}

impl<T> LevelCache<T> {
    pub(crate) fn get_or_try_insert(&self, key: usize, compute: impl FnOnce() -> Result<T>) -> Result<Arc<T>> {
        if let Some(hit) = self.entries.read().expect("level cache poisoned").get(&key) {
            return Ok(Arc::clone(hit));
        }
        let value = Arc::new(compute()?);
        let mut entries = self.entries.write().expect("level cache poisoned");
        Ok(Arc::clone(entries.entry(key).or_insert(value)))
    }

    pub(crate) fn len(&self) -> usize {
        self.entries.read().expect("level cache poisoned").len()
    }
}

/// Operators for one enrollment size `L`.
#[derive(Debug, Clone)]
pub struct LevelOperators {
    pub count: usize,
    /// `M_L = L · Fᵀ U⁻¹ F + I_f`
    pub m: DMatrix<f64>,
    pub m_inv: DMatrix<f64>,
    /// `K_L = U⁻¹ F M_L⁻¹ Fᵀ U⁻¹`
    pub k: DMatrix<f64>,
    pub log_det_m: f64,
}

/// Derived operators of a PLDA model, with lazily populated per-`L` caches.
#[derive(Debug)]
pub struct DerivedOperators {
    params: PldaParameters,
    within: DMatrix<f64>,
    within_inv: DMatrix<f64>,
    between: DMatrix<f64>,
    /// `U⁻¹ F`; every `K_L` is `P M_L⁻¹ Pᵀ` with this `P`.
    projection: DMatrix<f64>,
    /// `Fᵀ U⁻¹ F`
    speaker_precision: DMatrix<f64>,
    levels: LevelCache<LevelOperators>,
    pub(crate) forms: LevelCache<crate::scoring::FormOperators>,
    pub(crate) conditionals: LevelCache<crate::stats::ConditionalOperators>,
    total: DMatrix<f64>,
    /// `Pᵀ (U + V) P`, used for the non-target trace terms.
    pub(crate) projected_total: DMatrix<f64>,
}

impl DerivedOperators {
    pub fn new(params: PldaParameters) -> Result<Self> {
        let within = params.within_covariance();
        let within_inv = linalg::spd_inverse(&within, "within-speaker covariance U")?;
        let between = params.between_covariance();
        let projection = &within_inv * params.speaker_loading();
        let speaker_precision =
            linalg::symmetrize(&(params.speaker_loading().transpose() * &projection));
        let total = &within + &between;
        let projected_total = linalg::symmetrize(&(projection.transpose() * &total * &projection));
        Ok(Self {
            params,
            within,
            within_inv,
            between,
            projection,
            speaker_precision,
            levels: LevelCache::default(),
            forms: LevelCache::default(),
            conditionals: LevelCache::default(),
            projected_total,
            total,
        })
    }

    pub fn params(&self) -> &PldaParameters {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    /// `U = G Gᵀ + Σ`
    pub fn within(&self) -> &DMatrix<f64> {
        &self.within
    }

    /// `Ū = U⁻¹`
    pub fn within_inv(&self) -> &DMatrix<f64> {
        &self.within_inv
    }

    /// `V = F Fᵀ`
    pub fn between(&self) -> &DMatrix<f64> {
        &self.between
    }

    /// `R = U + V`, the marginal covariance of a single i-vector.
    pub fn total(&self) -> &DMatrix<f64> {
        &self.total
    }

    /// `Ū F`
    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    pub fn level(&self, count: usize) -> Result<Arc<LevelOperators>> {
        if count == 0 {
            return Err(Error::InvalidConfig("enrollment size must be at least 1".into()));
        }
        self.levels.get_or_try_insert(count, || self.compute_level(count))
    }

    /// Score offset `α(L) = ½ (log|M_L| + log|M_1| − log|M_{L+1}|)`.
    pub fn alpha(&self, count: usize) -> Result<f64> {
        let next = self.level(count + 1)?;
        let this = self.level(count)?;
        let one = self.level(1)?;
        Ok(0.5 * (this.log_det_m + one.log_det_m - next.log_det_m))
    }

    /// `(M_L, K_L, α(L))`
    pub fn operators_for(&self, count: usize) -> Result<(Arc<LevelOperators>, f64)> {
        let alpha = self.alpha(count)?;
        Ok((self.level(count)?, alpha))
    }

    pub fn cached_levels(&self) -> usize {
        self.levels.len()
    }

    fn compute_level(&self, count: usize) -> Result<LevelOperators> {
        let f = self.params.speaker_dim();
        let m = &self.speaker_precision * count as f64 + DMatrix::identity(f, f);
        let chol = linalg::cholesky(&m, "M_L")?;
        let log_det_m = linalg::log_det(&chol);
        let m_inv = linalg::symmetrize(&chol.inverse());
        let k = linalg::symmetrize(&(&self.projection * &m_inv * self.projection.transpose()));
        Ok(LevelOperators {
            count,
            m,
            m_inv,
            k,
            log_det_m,
        })
    }
}
