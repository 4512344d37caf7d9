//! Coordinate distributions on `[-1, 1]`.
//!
//! Inputs are product measures `P^{⊗d}`: every coordinate is drawn i.i.d. from a
//! univariate [`MeasureSpec`]. Discrete measures expose their atoms so moment and
//! covariance computations can be done by exact enumeration; the continuous case
//! is restricted to uniform intervals, whose moments are closed-form.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WEIGHT_TOLERANCE: f64 = 1e-12;

/// A seeded generator for one independent stream.
///
/// Streams with the same seed and different ids never overlap, so trials that run
/// in parallel reproduce the same numbers regardless of scheduling.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeasureKind {
    DiscreteUniform { support: Vec<f64> },
    DiscreteWeighted { support: Vec<f64>, weights: Vec<f64> },
    ContinuousUniform { lo: f64, hi: f64 },
}

/// A validated, non-constant distribution on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureConfig", into = "MeasureConfig")]
pub struct MeasureSpec {
    kind: MeasureKind,
}

/// Number of support points, or `Infinite` for continuous measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportSize {
    Finite(usize),
    Infinite,
}

impl SupportSize {
    pub fn is_finite(self) -> bool {
        matches!(self, SupportSize::Finite(_))
    }
}

/// Moments `c_0, ..., c_K` with `c_n = E[X^n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    values: Vec<f64>,
}

impl Moments {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, n: usize) -> f64 {
        self.values[n]
    }

    pub fn max_order(&self) -> usize {
        self.values.len() - 1
    }
}

impl MeasureSpec {
    pub fn new(kind: MeasureKind) -> Result<Self> {
        match &kind {
            MeasureKind::DiscreteUniform { support } => check_support(support)?,
            MeasureKind::DiscreteWeighted { support, weights } => {
                check_support(support)?;
                if weights.len() != support.len() {
                    return Err(Error::InvalidMeasure(format!(
                        "{} weights for {} support points",
                        weights.len(),
                        support.len()
                    )));
                }
                if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                    return Err(Error::InvalidMeasure("weights must be positive".into()));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > WEIGHT_TOLERANCE {
                    return Err(Error::InvalidMeasure(format!("weights sum to {total}, not 1")));
                }
            }
            MeasureKind::ContinuousUniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && -1.0 <= *lo && lo < hi && *hi <= 1.0) {
                    return Err(Error::InvalidMeasure(format!(
                        "uniform interval [{lo}, {hi}] must satisfy -1 <= lo < hi <= 1"
                    )));
                }
            }
        }
        Ok(Self { kind })
    }

    /// Uniform on `{-1, 1}`.
    pub fn rademacher() -> Self {
        Self::discrete_uniform(vec![-1.0, 1.0]).expect("valid support")
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        Self::new(MeasureKind::ContinuousUniform { lo, hi })
    }

    /// Uniform on `[-1, 1]`.
    pub fn standard_uniform() -> Self {
        Self::uniform(-1.0, 1.0).expect("valid interval")
    }

    pub fn discrete_uniform(support: Vec<f64>) -> Result<Self> {
        Self::new(MeasureKind::DiscreteUniform { support })
    }

    pub fn discrete_weighted(support: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        Self::new(MeasureKind::DiscreteWeighted { support, weights })
    }

    pub fn kind(&self) -> &MeasureKind {
        &self.kind
    }

    pub fn is_discrete(&self) -> bool {
        !matches!(self.kind, MeasureKind::ContinuousUniform { .. })
    }

    /// Support points and their probabilities, for discrete measures.
    pub fn atoms(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match &self.kind {
            MeasureKind::DiscreteUniform { support } => {
                let w = 1.0 / support.len() as f64;
                Some((support.clone(), vec![w; support.len()]))
            }
            MeasureKind::DiscreteWeighted { support, weights } => Some((support.clone(), weights.clone())),
            MeasureKind::ContinuousUniform { .. } => None,
        }
    }

    pub fn support_cardinality(&self) -> SupportSize {
        match &self.kind {
            MeasureKind::DiscreteUniform { support } | MeasureKind::DiscreteWeighted { support, .. } => {
                SupportSize::Finite(support.len())
            }
            MeasureKind::ContinuousUniform { .. } => SupportSize::Infinite,
        }
    }

    /// True when `X` and `-X` have the same law.
    pub fn is_symmetric(&self) -> bool {
        match &self.kind {
            MeasureKind::ContinuousUniform { lo, hi } => lo == &-hi,
            _ => {
                let (support, weights) = self.atoms().expect("discrete");
                let n = support.len();
                (0..n).all(|i| {
                    support[i] == -support[n - 1 - i] && (weights[i] - weights[n - 1 - i]).abs() <= WEIGHT_TOLERANCE
                })
            }
        }
    }

    /// Exact moments `c_0..=c_max_order`.
    pub fn exact_moments(&self, max_order: usize) -> Moments {
        let symmetric = self.is_symmetric();
        let values = (0..=max_order)
            .map(|n| {
                if n == 0 {
                    1.0
                } else if symmetric && n % 2 == 1 {
                    0.0
                } else {
                    self.raw_moment(n)
                }
            })
            .collect();
        Moments { values }
    }

    fn raw_moment(&self, n: usize) -> f64 {
        match &self.kind {
            MeasureKind::ContinuousUniform { lo, hi } => {
                let e = n as i32 + 1;
                (hi.powi(e) - lo.powi(e)) / (e as f64 * (hi - lo))
            }
            _ => {
                let (support, weights) = self.atoms().expect("discrete");
                support.iter().zip(&weights).map(|(x, w)| w * x.powi(n as i32)).sum()
            }
        }
    }

    /// An `n × d` matrix of i.i.d. draws.
    pub fn sample_matrix(&self, n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        self.sample_matrix_stream(n, d, seed, 0)
    }

    pub fn sample_matrix_stream(&self, n: usize, d: usize, seed: u64, stream: u64) -> DMatrix<f64> {
        let mut rng = rng_stream(seed, stream);
        self.sample_with(n, d, &mut rng)
    }

    /// Draws row by row from a caller-owned generator.
    pub fn sample_with<R: rand::Rng + ?Sized>(&self, n: usize, d: usize, rng: &mut R) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n, d);
        match &self.kind {
            MeasureKind::ContinuousUniform { lo, hi } => {
                let dist = Uniform::new_inclusive(*lo, *hi).expect("validated interval");
                for i in 0..n {
                    for j in 0..d {
                        out[(i, j)] = dist.sample(rng);
                    }
                }
            }
            MeasureKind::DiscreteUniform { support } => {
                let dist = Uniform::new(0, support.len()).expect("non-empty support");
                for i in 0..n {
                    for j in 0..d {
                        out[(i, j)] = support[dist.sample(rng)];
                    }
                }
            }
            MeasureKind::DiscreteWeighted { support, weights } => {
                let dist = WeightedIndex::new(weights).expect("validated weights");
                for i in 0..n {
                    for j in 0..d {
                        out[(i, j)] = support[dist.sample(rng)];
                    }
                }
            }
        }
        out
    }

    /// Short label used in reports and CSV rows.
    pub fn label(&self) -> String {
        match &self.kind {
            MeasureKind::ContinuousUniform { lo, hi } => format!("uniform[{lo},{hi}]"),
            MeasureKind::DiscreteUniform { support } => format!("discrete{support:?}"),
            MeasureKind::DiscreteWeighted { support, weights } => {
                format!("discrete{support:?}@{weights:?}")
            }
        }
    }
}

fn check_support(support: &[f64]) -> Result<()> {
    if support.len() < 2 {
        return Err(Error::InvalidMeasure(
            "a non-constant measure needs at least two support points".into(),
        ));
    }
    if support.iter().any(|x| !(x.is_finite() && (-1.0..=1.0).contains(x))) {
        return Err(Error::InvalidMeasure("support must lie in [-1, 1]".into()));
    }
    if support.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidMeasure(
            "support points must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Wire form of a measure in experiment configs.
///
/// `{"kind": "rademacher" | "uniform" | "discrete", "support": [...], "weights": [...]}`;
/// `uniform` optionally takes `lo`/`hi` (default `[-1, 1]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    pub kind: MeasureConfigKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureConfigKind {
    Rademacher,
    Uniform,
    Discrete,
}

impl TryFrom<MeasureConfig> for MeasureSpec {
    type Error = Error;

    fn try_from(cfg: MeasureConfig) -> Result<Self> {
        match cfg.kind {
            MeasureConfigKind::Rademacher => Ok(MeasureSpec::rademacher()),
            MeasureConfigKind::Uniform => MeasureSpec::uniform(cfg.lo.unwrap_or(-1.0), cfg.hi.unwrap_or(1.0)),
            MeasureConfigKind::Discrete => {
                let support = cfg
                    .support
                    .ok_or_else(|| Error::InvalidMeasure("discrete measure needs `support`".into()))?;
                match cfg.weights {
                    Some(weights) => MeasureSpec::discrete_weighted(support, weights),
                    None => MeasureSpec::discrete_uniform(support),
                }
            }
        }
    }
}

impl From<MeasureSpec> for MeasureConfig {
    fn from(spec: MeasureSpec) -> Self {
        let empty = MeasureConfig {
            kind: MeasureConfigKind::Discrete,
            support: None,
            weights: None,
            lo: None,
            hi: None,
        };
        match spec.kind {
            MeasureKind::ContinuousUniform { lo, hi } => MeasureConfig {
                kind: MeasureConfigKind::Uniform,
                lo: Some(lo),
                hi: Some(hi),
                ..empty
            },
            MeasureKind::DiscreteUniform { support } => MeasureConfig {
                support: Some(support),
                ..empty
            },
            MeasureKind::DiscreteWeighted { support, weights } => MeasureConfig {
                support: Some(support),
                weights: Some(weights),
                ..empty
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_measures() {
        assert!(MeasureSpec::discrete_uniform(vec![0.5]).is_err());
        assert!(MeasureSpec::discrete_uniform(vec![0.0, 2.0]).is_err());
        assert!(MeasureSpec::discrete_uniform(vec![1.0, 0.0]).is_err());
        assert!(MeasureSpec::discrete_weighted(vec![-1.0, 1.0], vec![0.5, 0.6]).is_err());
        assert!(MeasureSpec::discrete_weighted(vec![-1.0, 1.0], vec![1.0, 0.0]).is_err());
        assert!(MeasureSpec::uniform(0.5, 0.5).is_err());
        assert!(MeasureSpec::uniform(-2.0, 0.0).is_err());
    }

    #[test]
    fn rademacher_samples_stay_on_support() {
        let x = MeasureSpec::rademacher().sample_matrix(4, 2, 7);
        assert_eq!(x.shape(), (4, 2));
        assert!(x.iter().all(|v| *v == 1.0 || *v == -1.0));
    }

    #[test]
    fn uniform_sample_mean_within_clt_band() {
        // sd of the mean is 1/sqrt(3 * 1000) ≈ 0.018; the band is ~5.5 sd wide.
        let x = MeasureSpec::standard_uniform().sample_matrix(1000, 1, 11);
        let mean = x.iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() <= 0.1, "mean {mean}");
        assert!(x.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn sampling_is_deterministic_per_seed_and_stream() {
        let spec = MeasureSpec::discrete_weighted(vec![-1.0, 0.0, 1.0], vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(spec.sample_matrix(20, 3, 5), spec.sample_matrix(20, 3, 5));
        assert_ne!(
            spec.sample_matrix_stream(20, 3, 5, 0),
            spec.sample_matrix_stream(20, 3, 5, 1)
        );
    }

    #[test]
    fn moments_match_hand_values() {
        assert_eq!(
            MeasureSpec::rademacher().exact_moments(4).values(),
            &[1.0, 0.0, 1.0, 0.0, 1.0]
        );
        let u = MeasureSpec::standard_uniform().exact_moments(2);
        assert_eq!(u.get(0), 1.0);
        assert_eq!(u.get(1), 0.0);
        assert!((u.get(2) - 1.0 / 3.0).abs() < 1e-15);
        let b = MeasureSpec::discrete_uniform(vec![0.0, 1.0]).unwrap().exact_moments(3);
        assert_eq!(b.values(), &[1.0, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn support_cardinalities() {
        let three = MeasureSpec::discrete_uniform(vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(three.support_cardinality(), SupportSize::Finite(3));
        assert_eq!(
            MeasureSpec::standard_uniform().support_cardinality(),
            SupportSize::Infinite
        );
        let w = MeasureSpec::discrete_weighted(vec![-1.0, 1.0], vec![0.3, 0.7]).unwrap();
        assert_eq!(w.support_cardinality(), SupportSize::Finite(2));
        assert!(!w.is_symmetric());
    }

    #[test]
    fn config_round_trip() {
        let json = r#"{"kind":"discrete","support":[-1,1],"weights":[0.3,0.7]}"#;
        let spec: MeasureSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.support_cardinality(), SupportSize::Finite(2));
        let back: MeasureSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        let rad: MeasureSpec = serde_json::from_str(r#"{"kind":"rademacher"}"#).unwrap();
        assert_eq!(rad, MeasureSpec::rademacher());
        let uni: MeasureSpec = serde_json::from_str(r#"{"kind":"uniform"}"#).unwrap();
        assert_eq!(uni, MeasureSpec::standard_uniform());
        assert!(serde_json::from_str::<MeasureSpec>(r#"{"kind":"discrete"}"#).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(12))]

            #[test]
            fn monte_carlo_moments_agree(seed in 0u64..1000, which in 0usize..3) {
                let spec = match which {
                    0 => MeasureSpec::rademacher(),
                    1 => MeasureSpec::discrete_uniform(vec![-1.0, 0.0, 1.0]).unwrap(),
                    _ => MeasureSpec::discrete_weighted(vec![-1.0, 0.25, 1.0], vec![0.2, 0.5, 0.3]).unwrap(),
                };
                let n = 10_000;
                let x = spec.sample_matrix(n, 1, seed);
                let exact = spec.exact_moments(6);
                for order in 0..=6 {
                    let mc = x.iter().map(|v| v.powi(order as i32)).sum::<f64>() / n as f64;
                    prop_assert!((mc - exact.get(order)).abs() <= 4.0 / (n as f64).sqrt());
                }
            }

            #[test]
            fn symmetric_supports_have_zero_odd_moments(a in 0.05f64..1.0, b in 0.05f64..1.0) {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                prop_assume!(hi - lo > 1e-6);
                let spec = MeasureSpec::discrete_uniform(vec![-hi, -lo, lo, hi]).unwrap();
                let m = spec.exact_moments(7);
                for n in [1, 3, 5, 7] {
                    prop_assert_eq!(m.get(n), 0.0);
                }
                prop_assert!(m.values().iter().all(|c| c.abs() <= 1.0));
            }
        }
    }
}
