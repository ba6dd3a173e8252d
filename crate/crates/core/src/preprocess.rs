//! Whitening and unit-sphere length normalization of i-vectors.
//!
//! Order is fixed: subtract the whitening mean, whiten, then length-normalize.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative eigenvalue floor below which the sample covariance counts as rank deficient.
const RANK_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    mean: DVector<f64>,
    matrix: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WhiteningOptions {
    /// When set, `ridge · (tr(C)/d) · I` is added to the covariance `C` before inversion.
    pub ridge: Option<f64>,
}

impl WhiteningOptions {
    pub const DEFAULT_RIDGE: f64 = 1e-6;

    pub fn with_default_ridge() -> Self {
        Self {
            ridge: Some(Self::DEFAULT_RIDGE),
        }
    }
}

/// Unbiased sample mean and covariance.
pub fn sample_moments(data: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let first = data.first().ok_or(Error::Empty("data"))?;
    let d = first.len();
    let n = data.len();
    let mut mean = DVector::zeros(d);
    for v in data {
        linalg::check_len("i-vector", v, d)?;
        mean += v;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for v in data {
        let c = v - &mean;
        cov.syger(1.0, &c, &c, 1.0);
    }
    cov.fill_upper_triangle_with_lower_triangle();
    cov /= (n.max(2) - 1) as f64;
    Ok((mean, cov))
}

pub fn fit_whitening(data: &[DVector<f64>], options: WhiteningOptions) -> Result<WhiteningTransform> {
    let d = data.first().ok_or(Error::Empty("data"))?.len();
    if data.len() < d + 1 {
        return Err(Error::InvalidConfig(format!(
            "whitening a {d}-dimensional space needs at least {} vectors, got {}",
            d + 1,
            data.len()
        )));
    }
    let (mean, mut cov) = sample_moments(data)?;
    if let Some(ridge) = options.ridge {
        let eps = ridge * cov.trace() / d as f64;
        for k in 0..d {
            cov[(k, k)] += eps;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > RANK_RTOL * max) {
        return Err(Error::RankDeficient { min_eigenvalue: min });
    }
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    let q = &eig.eigenvectors;
    let matrix = linalg::symmetrize(&(q * DMatrix::from_diagonal(&inv_sqrt) * q.transpose()));
    Ok(WhiteningTransform { mean, matrix })
}

impl WhiteningTransform {
    pub fn new(mean: DVector<f64>, matrix: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if matrix.shape() != (d, d) {
            return Err(Error::mismatch("whitening matrix", d, matrix.nrows()));
        }
        if !linalg::all_finite(matrix.iter().chain(mean.iter())) {
            return Err(Error::NonFinite("whitening transform".into()));
        }
        Ok(Self { mean, matrix })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `W (v − mean)`
    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        linalg::check_len("i-vector", v, self.dim())?;
        Ok(&self.matrix * (v - &self.mean))
    }
}

pub fn length_normalize(v: &DVector<f64>) -> Result<DVector<f64>> {
    let norm = v.norm();
    if !(norm > 0.0) {
        return Err(Error::ZeroVector);
    }
    Ok(v / norm)
}

/// The preprocessing chain applied to every i-vector before PLDA.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    whitening: Option<WhiteningTransform>,
    length_normalize: bool,
}

impl Preprocessor {
    pub fn new(whitening: Option<WhiteningTransform>, length_normalize: bool) -> Self {
        Self {
            whitening,
            length_normalize,
        }
    }

    pub fn identity() -> Self {
        Self::new(None, false)
    }

    /// Whitening fitted on `data`, followed by length normalization.
    pub fn fit(data: &[DVector<f64>], options: WhiteningOptions) -> Result<Self> {
        Ok(Self::new(Some(fit_whitening(data, options)?), true))
    }

    pub fn whitening(&self) -> Option<&WhiteningTransform> {
        self.whitening.as_ref()
    }

    pub fn length_normalizes(&self) -> bool {
        self.length_normalize
    }

    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let w = match &self.whitening {
            Some(t) => t.apply(v)?,
            None => v.clone(),
        };
        if self.length_normalize {
            length_normalize(&w)
        } else {
            Ok(w)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_matrix, random_vector};
    use nalgebra::dvector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_variance_four() {
        // mean 0, Σx² = 16, n − 1 = 4
        let data: Vec<_> = [-2.0, 2.0, -2.0, 2.0, 0.0].iter().map(|&x| dvector![x]).collect();
        let (_, cov) = sample_moments(&data).unwrap();
        assert_eq!(cov[(0, 0)], 4.0);
        let w = fit_whitening(&data, WhiteningOptions::default()).unwrap();
        assert!((w.matrix()[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identity_data_gives_near_identity_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let data: Vec<_> = (0..20_000).map(|_| random_vector(&mut rng, 3)).collect();
        let w = fit_whitening(&data, WhiteningOptions::default()).unwrap();
        assert!(w.mean().amax() < 0.05);
        assert!((w.matrix() - DMatrix::identity(3, 3)).amax() < 0.05);
    }

    #[test]
    fn whitened_fit_set_has_identity_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mix = random_matrix(&mut rng, 5, 5, 1.0) + DMatrix::identity(5, 5) * 2.0;
        let data: Vec<_> = (0..10_000).map(|_| &mix * random_vector(&mut rng, 5) + dvector![1.0, 2.0, 3.0, 4.0, 5.0]).collect();
        let w = fit_whitening(&data, WhiteningOptions::default()).unwrap();
        let out: Vec<_> = data.iter().map(|v| w.apply(v).unwrap()).collect();
        let (mean, cov) = sample_moments(&out).unwrap();
        assert!(mean.amax() < 1e-10);
        assert!((cov - DMatrix::identity(5, 5)).amax() < 1e-8);
    }

    #[test]
    fn apply_edge_cases() {
        let w = WhiteningTransform::new(dvector![1.0, 2.0], DMatrix::identity(2, 2) * 3.0).unwrap();
        assert_eq!(w.apply(&dvector![1.0, 2.0]).unwrap(), dvector![0.0, 0.0]);
        let id = WhiteningTransform::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert_eq!(id.apply(&dvector![0.3, -4.0]).unwrap(), dvector![0.3, -4.0]);
        assert!(w.apply(&dvector![1.0]).is_err());
    }

    #[test]
    fn rank_deficient_needs_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let data: Vec<_> = (0..50)
            .map(|_| {
                let v = random_vector(&mut rng, 2);
                dvector![v[0], v[1], v[0] + v[1]]
            })
            .collect();
        assert!(matches!(
            fit_whitening(&data, WhiteningOptions::default()),
            Err(Error::RankDeficient { .. })
        ));
        assert!(fit_whitening(&data, WhiteningOptions::with_default_ridge()).is_ok());
        assert!(fit_whitening(&data[..3], WhiteningOptions::default()).is_err());
    }

    #[test]
    fn length_normalization() {
        let v = length_normalize(&dvector![3.0, 4.0]).unwrap();
        assert!((v - dvector![0.6, 0.8]).amax() < 1e-15);
        let u = dvector![0.0, 1.0, 0.0];
        assert_eq!(length_normalize(&u).unwrap(), u);
        assert!(matches!(length_normalize(&DVector::zeros(3)), Err(Error::ZeroVector)));
    }

    proptest::proptest! {
        #[test]
        fn length_normalize_unit_and_idempotent(v in proptest::collection::vec(-1e3f64..1e3, 1..12)) {
            let v = DVector::from_vec(v);
            proptest::prop_assume!(v.norm() > 1e-6);
            let once = length_normalize(&v).unwrap();
            proptest::prop_assert!((once.norm() - 1.0).abs() <= 1e-12);
            let twice = length_normalize(&once).unwrap();
            proptest::prop_assert!((&twice - &once).amax() <= 1e-15);
        }
    }
}
