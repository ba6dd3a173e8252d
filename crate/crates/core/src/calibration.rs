//! Detection-cost evaluation and per-speaker minDCF-optimal thresholds.
//!
//! The cost of a threshold `t` is `FR(t) + β·FA(t)`. A score equal to the
//! threshold is accepted: `FR` counts target scores `< t`, `FA` counts
//! non-target scores `≥ t`.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::stats::{ScoreMoments, SpeakerScoreStats};

/// Relative tolerance under which `σ₁` and `σ₂` are treated as equal.
pub const EQUAL_SIGMA_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcfConfig {
    beta: f64,
}

impl DcfConfig {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta must be positive, got {beta}")));
        }
        Ok(Self { beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl Default for DcfConfig {
    fn default() -> Self {
        Self { beta: 100.0 }
    }
}

/// `P(S < t)` for `S ~ N(mu, var)`; a step at `mu` when `var == 0`.
fn below(t: f64, mu: f64, var: f64) -> f64 {
    if var > 0.0 {
        0.5 * erfc(-(t - mu) / (2.0 * var).sqrt())
    } else if mu < t {
        1.0
    } else {
        0.0
    }
}

/// `P(S ≥ t)` for `S ~ N(mu, var)`.
fn at_or_above(t: f64, mu: f64, var: f64) -> f64 {
    if var > 0.0 {
        0.5 * erfc((t - mu) / (2.0 * var).sqrt())
    } else if mu >= t {
        1.0
    } else {
        0.0
    }
}

/// `Φ(t | H₁) + β (1 − Φ(t | H₂))` under the Gaussian score model.
pub fn analytic_dcf(t: f64, m: &ScoreMoments, cfg: &DcfConfig) -> f64 {
    below(t, m.mu1, m.var1) + cfg.beta * at_or_above(t, m.mu2, m.var2)
}

/// Closed-form minimizer of [`analytic_dcf`].
///
/// Solves `N(t; μ₁, σ₁²) = β N(t; μ₂, σ₂²)`. With `Δ = 2 log(β σ₁/σ₂)` the
/// roots are
///
/// ```text
/// t = (σ₁²μ₂ − σ₂²μ₁ ± σ₁σ₂ √((μ₁−μ₂)² + Δ(σ₁²−σ₂²))) / (σ₁² − σ₂²)
/// ```
///
/// and the minimum is the right root when `σ₁ > σ₂`, the left one otherwise.
/// For equal variances, `t = (μ₁+μ₂)/2 + σ²Δ / (2(μ₁−μ₂))`.
pub fn optimal_threshold(m: &ScoreMoments, cfg: &DcfConfig) -> Result<f64> {
    let ScoreMoments { mu1, var1, mu2, var2 } = *m;
    if ![mu1, var1, mu2, var2].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("score moments".into()));
    }
    if !(var1 > 0.0 && var2 > 0.0) {
        return Err(Error::NoInteriorMinimum("zero score variance".into()));
    }
    let (s1, s2) = (var1.sqrt(), var2.sqrt());
    let delta = 2.0 * (cfg.beta * s1 / s2).ln();

    let t = if (s1 - s2).abs() <= EQUAL_SIGMA_RTOL * s1.max(s2) {
        if mu1 == mu2 {
            return Err(Error::IndistinguishableHypotheses);
        }
        if mu1 < mu2 {
            return Err(Error::NoInteriorMinimum(
                "equal variances with target mean below non-target mean".into(),
            ));
        }
        let var = 0.5 * (var1 + var2);
        0.5 * (mu1 + mu2) + var * delta / (2.0 * (mu1 - mu2))
    } else {
        let disc = (mu1 - mu2).powi(2) + delta * (var1 - var2);
        if disc <= 0.0 {
            return Err(Error::NoInteriorMinimum(format!("negative discriminant {disc:e}")));
        }
        // a t² − 2 b t + c = 0, roots (b ± √(b² − ac)) / a with b² − ac = σ₁²σ₂²·disc.
        let a = var2 - var1;
        let b = var2 * mu1 - var1 * mu2;
        let c = var2 * mu1 * mu1 - var1 * mu2 * mu2 + delta * var1 * var2;
        let root = s1 * s2 * disc.sqrt();
        let q = b + root.copysign(b);
        let (r1, r2) = if q == 0.0 { (b / a, b / a) } else { (q / a, c / q) };
        if s1 > s2 {
            r1.max(r2)
        } else {
            r1.min(r2)
        }
    };

    let value = analytic_dcf(t, m, cfg);
    let boundary = cfg.beta.min(1.0);
    if !(value <= boundary) {
        return Err(Error::NoInteriorMinimum(format!(
            "stationary point cost {value} exceeds boundary cost {boundary}"
        )));
    }
    Ok(t)
}

/// Grid minimizer of [`analytic_dcf`] over `[lo, hi]`; returns `(t, cost)`.
pub fn sweep_threshold(m: &ScoreMoments, cfg: &DcfConfig, lo: f64, hi: f64, points: usize) -> (f64, f64) {
    let points = points.max(2);
    let step = (hi - lo) / (points - 1) as f64;
    (0..points)
        .map(|k| {
            let t = lo + step * k as f64;
            (t, analytic_dcf(t, m, cfg))
        })
        .fold((lo, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// A sweep range wide enough to contain both score distributions.
pub fn sweep_range(m: &ScoreMoments) -> (f64, f64) {
    let spread = 10.0 * m.var1.max(m.var2).sqrt().max(1e-12);
    (m.mu1.min(m.mu2) - spread, m.mu1.max(m.mu2) + spread)
}

/// Threshold and scale of the blind normalization `(s − t) / √(σ₁² + σ₂²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedSpeaker {
    pub stats: SpeakerScoreStats,
    pub threshold: f64,
    pub scale: f64,
    /// True when the threshold came from a sweep rather than the closed form.
    pub fallback: bool,
}

impl CalibratedSpeaker {
    pub fn new(stats: SpeakerScoreStats, cfg: &DcfConfig) -> Result<Self> {
        let threshold = optimal_threshold(&stats.moments, cfg)?;
        Self::with_threshold(stats, threshold, false)
    }

    /// Like [`CalibratedSpeaker::new`] but falls back to a sweep of the
    /// analytic cost when no closed-form interior minimum exists.
    pub fn with_fallback(stats: SpeakerScoreStats, cfg: &DcfConfig) -> Result<Self> {
        match optimal_threshold(&stats.moments, cfg) {
            Ok(t) => Self::with_threshold(stats, t, false),
            Err(Error::NoInteriorMinimum(_)) | Err(Error::IndistinguishableHypotheses) => {
                let (lo, hi) = sweep_range(&stats.moments);
                let (t, _) = sweep_threshold(&stats.moments, cfg, lo, hi, 10_001);
                Self::with_threshold(stats, t, true)
            }
            Err(e) => Err(e),
        }
    }

    fn with_threshold(stats: SpeakerScoreStats, threshold: f64, fallback: bool) -> Result<Self> {
        let total = stats.moments.var1 + stats.moments.var2;
        if !(total > 0.0) {
            return Err(Error::ZeroTotalVariance);
        }
        Ok(Self {
            stats,
            threshold,
            scale: 1.0 / total.sqrt(),
            fallback,
        })
    }
}

pub fn normalize_score(s: f64, cal: &CalibratedSpeaker) -> f64 {
    (s - cal.threshold) * cal.scale
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinDcf {
    pub value: f64,
    /// Threshold attaining the minimum; may be `±∞`.
    #[serde(with = "extended_float")]
    pub threshold: f64,
}

/// Writes `±∞` as the strings `"inf"` and `"-inf"`, which JSON numbers cannot hold.
mod extended_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            f64::INFINITY => s.serialize_str("inf"),
            f64::NEG_INFINITY => s.serialize_str("-inf"),
            v => s.serialize_f64(v),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("invalid threshold {other:?}"))),
            },
        }
    }
}

/// Exact minimum of `FR(t) + β FA(t)` over all thresholds.
///
/// Candidates are `−∞`, the midpoints between consecutive distinct scores and
/// `+∞`; the smallest minimizing threshold is returned.
pub fn empirical_min_dcf(targets: &[f64], nontargets: &[f64], cfg: &DcfConfig) -> Result<MinDcf> {
    if targets.is_empty() {
        return Err(Error::Empty("target scores"));
    }
    if nontargets.is_empty() {
        return Err(Error::Empty("non-target scores"));
    }
    if !targets.iter().chain(nontargets).all(|s| s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let mut all: Vec<(f64, bool)> = targets
        .iter()
        .map(|&s| (s, true))
        .chain(nontargets.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let n_tar = targets.len() as f64;
    let n_non = nontargets.len() as f64;
    let mut tar_below = 0usize;
    let mut non_below = 0usize;
    let mut best = MinDcf {
        value: cfg.beta,
        threshold: f64::NEG_INFINITY,
    };
    let mut k = 0;
    while k < all.len() {
        let v = all[k].0;
        while k < all.len() && all[k].0 == v {
            if all[k].1 {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            k += 1;
        }
        let threshold = if k < all.len() {
            0.5 * (v + all[k].0)
        } else {
            f64::INFINITY
        };
        let fr = tar_below as f64 / n_tar;
        let fa = (n_non - non_below as f64) / n_non;
        let cost = fr + cfg.beta * fa;
        if cost < best.value {
            best = MinDcf { value: cost, threshold };
        }
    }
    Ok(best)
}

/// Equal error rate at the candidate threshold where FR and FA are closest; informational only.
pub fn equal_error_rate(targets: &[f64], nontargets: &[f64]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Empty("target scores"));
    }
    if nontargets.is_empty() {
        return Err(Error::Empty("non-target scores"));
    }
    let mut t: Vec<f64> = targets.to_vec();
    let mut n: Vec<f64> = nontargets.to_vec();
    t.sort_by(f64::total_cmp);
    n.sort_by(f64::total_cmp);
    let mut best = (f64::INFINITY, 0.5);
    for &th in t.iter().chain(&n).chain(std::iter::once(&f64::INFINITY)) {
        let fr = t.partition_point(|&s| s < th) as f64 / t.len() as f64;
        let fa = (n.len() - n.partition_point(|&s| s < th)) as f64 / n.len() as f64;
        let gap = (fr - fa).abs();
        if gap < best.0 {
            best = (gap, 0.5 * (fr + fa));
        }
    }
    Ok(best.1)
}
