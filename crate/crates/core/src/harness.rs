//! Reproducible experiment runs: typed configs, per-kind validation, and the
//! drivers behind `polyreg experiment run`.
//!
//! Every run is a pure function of its config and seed. Trials execute on a
//! rayon pool and are collected in trial order, so outputs do not depend on the
//! worker count.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{degree_schedule_with, phi, Activation, ApproxOptions};
use crate::data_io::load_idx_dataset;
use crate::distributions::{rng_stream, MeasureSpec};
use crate::error::{Error, Result};
use crate::imaging::{
    gaussian_noise_stream, patch_noise_with, train_batched, ImageDataset, PatchConfig, StackedClassifier, TrainOptions,
};
use crate::networks::{
    align_coefficients, cancellation_student, embed_student, expand_polynomial, homogeneous_rescale, random_teacher,
    NetworkParams, WeightNorm,
};
use crate::orthopoly::{decompose, eigen_bounds};
use crate::tensorize::{monomial_count, ConvFeatureMap, GradedOrder, MultiplicitiesSet};
use crate::tols::{tols, Predictor};

/// Version string stamped into every run directory.
pub fn version() -> &'static str {
    option_env!("POLYREG_GIT_DESCRIBE").unwrap_or(concat!("v", env!("CARGO_PKG_VERSION")))
}

/// Seed of trial `t` in a run seeded with `base`.
pub fn trial_seed(base: u64, t: usize) -> u64 {
    base.wrapping_add(t as u64)
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

// ---------------------------------------------------------------------------
// configs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub experiment: Experiment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Experiment {
    ExactPoly(ExactPolyConfig),
    GeneralizeAdmissible(GeneralizeConfig),
    TeacherStudent(TeacherStudentConfig),
    SelfRegularization(SelfRegConfig),
    CoveringEvent(CoveringConfig),
    CondNumber(CondNumberConfig),
    MnistConv(MnistConfig),
    NoiseRobustness(NoiseConfig),
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::ExactPoly(_) => "exact_poly",
            Experiment::GeneralizeAdmissible(_) => "generalize_admissible",
            Experiment::TeacherStudent(_) => "teacher_student",
            Experiment::SelfRegularization(_) => "self_regularization",
            Experiment::CoveringEvent(_) => "covering_event",
            Experiment::CondNumber(_) => "cond_number",
            Experiment::MnistConv(_) => "mnist_conv",
            Experiment::NoiseRobustness(_) => "noise_robustness",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Experiment::ExactPoly(c) => c.validate(),
            Experiment::GeneralizeAdmissible(c) => c.validate(),
            Experiment::TeacherStudent(c) => c.validate(),
            Experiment::SelfRegularization(c) => c.validate(),
            Experiment::CoveringEvent(c) => c.validate(),
            Experiment::CondNumber(c) => c.validate(),
            Experiment::MnistConv(c) => c.validate(),
            Experiment::NoiseRobustness(c) => c.validate(),
        }
    }
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        Self {
            name: None,
            seed: 0,
            workers: None,
            out: None,
            experiment,
        }
    }

    /// Parses TOML, or JSON when the extension is `.json`. Relative dataset paths
    /// are resolved against the config file's directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg = if is_json {
            Self::from_json(&text)?
        } else {
            Self::from_toml(&text)?
        };
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == Some(0) {
            return Err(cfg_err("workers must be at least 1"));
        }
        self.experiment.validate()
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        match &mut self.experiment {
            Experiment::MnistConv(c) => c.data.paths_mut().into_iter().for_each(fix),
            Experiment::NoiseRobustness(c) => {
                c.data.paths_mut().into_iter().for_each(fix);
                if let Some(m) = &mut c.model {
                    fix(m);
                }
            }
            _ => {}
        }
    }
}

/// Reads any config section from TOML, or JSON when the extension is `.json`.
pub fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text).map_err(|e| cfg_err(e.to_string()))
    } else {
        toml::from_str(&text).map_err(|e| cfg_err(e.to_string()))
    }
}

fn default_uniform() -> MeasureSpec {
    MeasureSpec::standard_uniform()
}

fn check_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(cfg_err(format!("{name} must be at least 1")));
    }
    Ok(())
}

fn check_epsilon(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(cfg_err(format!("epsilon must lie in (0, 1], got {eps}")));
    }
    Ok(())
}

/// Exact learning of a polynomial-activation teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExactPolyConfig {
    pub d: usize,
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub measure: MeasureSpec,
    pub weight_norm: WeightNorm,
    pub seeds: usize,
    /// Sample size; defaults to the number of monomials of degree `≤ k^L`.
    pub n: Option<usize>,
    pub n_test: usize,
    /// The embedded student has width `student_multiplier · width`.
    pub student_multiplier: usize,
}

impl Default for ExactPolyConfig {
    fn default() -> Self {
        Self {
            d: 3,
            depth: 1,
            width: 4,
            activation: Activation::monomial(2),
            measure: default_uniform(),
            weight_norm: WeightNorm::L1Rows,
            seeds: 20,
            n: None,
            n_test: 1000,
            student_multiplier: 4,
        }
    }
}

impl ExactPolyConfig {
    pub fn validate(&self) -> Result<()> {
        check_positive("d", self.d)?;
        check_positive("depth", self.depth)?;
        check_positive("width", self.width)?;
        check_positive("seeds", self.seeds)?;
        check_positive("n_test", self.n_test)?;
        check_positive("student_multiplier", self.student_multiplier)?;
        let k = self
            .activation
            .polynomial_degree()
            .ok_or_else(|| cfg_err("exact_poly needs a polynomial activation"))?;
        if k == 0 {
            return Err(cfg_err("activation must be non-constant"));
        }
        self.total_degree()?;
        if self.measure.is_discrete() && self.n.is_none() {
            return Err(cfg_err("a discrete measure needs an explicit `n`"));
        }
        if self.n == Some(0) {
            return Err(cfg_err("n must be at least 1"));
        }
        Ok(())
    }

    /// `M = k^L`.
    pub fn total_degree(&self) -> Result<usize> {
        let k = self.activation.polynomial_degree().unwrap_or(0);
        u32::try_from(self.depth)
            .ok()
            .and_then(|l| k.checked_pow(l))
            .ok_or_else(|| cfg_err("k^L overflows"))
    }
}

/// Learning curve of T-OLS against an admissible-activation teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneralizeConfig {
    pub d: usize,
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub measure: MeasureSpec,
    pub weight_norm: WeightNorm,
    pub epsilon: f64,
    /// Per-layer budget divisor: 4, or 16 for the overparametrized variant.
    pub divisor: f64,
    /// Forces the tensor degree `M` instead of the schedule.
    pub degree: Option<usize>,
    /// Sample sizes as multiples of `|𝒞|`; ignored when `n_grid` is set.
    pub n_multipliers: Vec<f64>,
    pub n_grid: Option<Vec<usize>>,
    pub seeds: usize,
    pub n_test: usize,
}

impl Default for GeneralizeConfig {
    fn default() -> Self {
        Self {
            d: 4,
            depth: 1,
            width: 10,
            activation: Activation::Relu,
            measure: default_uniform(),
            weight_norm: WeightNorm::L1Rows,
            epsilon: 0.05,
            divisor: 4.0,
            degree: None,
            n_multipliers: vec![2.0, 8.0, 32.0],
            n_grid: None,
            seeds: 10,
            n_test: 10_000,
        }
    }
}

impl GeneralizeConfig {
    pub fn validate(&self) -> Result<()> {
        check_positive("d", self.d)?;
        check_positive("depth", self.depth)?;
        check_positive("width", self.width)?;
        check_positive("seeds", self.seeds)?;
        check_positive("n_test", self.n_test)?;
        check_epsilon(self.epsilon)?;
        if !(self.divisor > 0.0) {
            return Err(cfg_err("divisor must be positive"));
        }
        match &self.n_grid {
            Some(g) if g.is_empty() || g.contains(&0) => {
                return Err(cfg_err("n_grid must be non-empty with positive entries"))
            }
            None if self.n_multipliers.is_empty() || self.n_multipliers.iter().any(|m| !(*m > 0.0)) => {
                return Err(cfg_err("n_multipliers must be non-empty with positive entries"))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Embedded wider students fitted on their own (identical) labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherStudentConfig {
    pub d: usize,
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub measure: MeasureSpec,
    pub weight_norm: WeightNorm,
    pub epsilon: f64,
    pub divisor: f64,
    pub degree: Option<usize>,
    /// Student widths as multiples of the teacher width.
    pub student_multipliers: Vec<usize>,
    /// Sample size as a multiple of `|𝒞|`.
    pub n_multiplier: f64,
    pub seeds: usize,
    pub n_test: usize,
}

impl Default for TeacherStudentConfig {
    fn default() -> Self {
        Self {
            d: 4,
            depth: 1,
            width: 10,
            activation: Activation::Relu,
            measure: default_uniform(),
            weight_norm: WeightNorm::L1Rows,
            epsilon: 0.05,
            divisor: 16.0,
            degree: None,
            student_multipliers: vec![1, 4, 16],
            n_multiplier: 4.0,
            seeds: 3,
            n_test: 2000,
        }
    }
}

impl TeacherStudentConfig {
    pub fn validate(&self) -> Result<()> {
        check_positive("d", self.d)?;
        check_positive("depth", self.depth)?;
        check_positive("width", self.width)?;
        check_positive("seeds", self.seeds)?;
        check_positive("n_test", self.n_test)?;
        check_epsilon(self.epsilon)?;
        if !(self.divisor > 0.0) || !(self.n_multiplier > 0.0) {
            return Err(cfg_err("divisor and n_multiplier must be positive"));
        }
        if self.student_multipliers.is_empty() || self.student_multipliers.contains(&0) {
            return Err(cfg_err("student_multipliers must be non-empty with positive entries"));
        }
        Ok(())
    }
}

/// Covering-event frequency at `N = ⌈exp(3d ln d)⌉` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoveringConfig {
    pub d: usize,
    pub n: Option<usize>,
    pub trials: usize,
    /// Ball radius; defaults to `1/(4d)`.
    pub radius: Option<f64>,
    pub target_frequency: f64,
}

impl Default for CoveringConfig {
    fn default() -> Self {
        Self {
            d: 2,
            n: None,
            trials: 200,
            radius: None,
            target_frequency: 0.9,
        }
    }
}

impl CoveringConfig {
    pub fn validate(&self) -> Result<()> {
        check_positive("d", self.d)?;
        check_positive("trials", self.trials)?;
        if self.n == Some(0) {
            return Err(cfg_err("n must be at least 1"));
        }
        if let Some(r) = self.radius {
            if !(r > 0.0 && r < std::f64::consts::FRAC_1_SQRT_2) {
                return Err(cfg_err("radius must lie in (0, 1/√2)"));
            }
        }
        if self.d > 8 && self.n.is_none() {
            return Err(cfg_err("default N = exp(3d ln d) is impractical beyond d = 8; set `n`"));
        }
        Ok(())
    }

    pub fn sample_size(&self) -> usize {
        self.n.unwrap_or_else(|| covering_sample_size(self.d))
    }

    pub fn ball_radius(&self) -> f64 {
        self.radius.unwrap_or(1.0 / (4.0 * self.d as f64))
    }
}

/// Covering event plus the `ℓ₁` check on constructed interpolants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfRegConfig {
    pub covering: CoveringConfig,
    pub width: usize,
    pub activation: Activation,
    pub student_multiplier: usize,
    /// Pairs and output magnitude of the signed cancellation student.
    pub cancellation_pairs: usize,
    pub nu: f64,
}

impl Default for SelfRegConfig {
    fn default() -> Self {
        Self {
            covering: CoveringConfig::default(),
            width: 4,
            activation: Activation::Relu,
            student_multiplier: 4,
            cancellation_pairs: 2,
            nu: 10.0,
        }
    }
}

impl SelfRegConfig {
    pub fn validate(&self) -> Result<()> {
        self.covering.validate()?;
        if self.covering.d > 3 {
            return Err(cfg_err("self_regularization is meant for d <= 3"));
        }
        check_positive("width", self.width)?;
        check_positive("student_multiplier", self.student_multiplier)?;
        check_positive("cancellation_pairs", self.cancellation_pairs)?;
        if !(self.nu > 0.0) {
            return Err(cfg_err("nu must be positive"));
        }
        if self.activation.homogeneity_degree().is_none() {
            return Err(cfg_err("self_regularization needs a positively homogeneous activation"));
        }
        Ok(())
    }
}

/// Exact eigenvalues of `Σ` against the bound constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CondNumberConfig {
    pub measures: Vec<MeasureSpec>,
    pub ds: Vec<usize>,
    pub ks: Vec<usize>,
}

impl Default for CondNumberConfig {
    fn default() -> Self {
        Self {
            measures: vec![MeasureSpec::rademacher()],
            ds: vec![1, 2, 3, 4],
            ks: vec![1, 2, 3],
        }
    }
}

impl CondNumberConfig {
    pub fn validate(&self) -> Result<()> {
        if self.measures.is_empty() || self.ds.is_empty() || self.ks.is_empty() {
            return Err(cfg_err("measures, ds and ks must be non-empty"));
        }
        if self.ds.contains(&0) || self.ks.contains(&0) {
            return Err(cfg_err("ds and ks entries must be at least 1"));
        }
        Ok(())
    }
}

/// Image data locations. Training paths are optional for evaluation-only runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ImageData {
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub classes: Option<usize>,
    /// Evaluate on the first `max_test` test images only.
    pub max_test: Option<usize>,
}

impl ImageData {
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        [
            &mut self.train_images,
            &mut self.train_labels,
            &mut self.test_images,
            &mut self.test_labels,
        ]
        .into_iter()
        .flatten()
        .collect()
    }

    pub fn classes(&self) -> usize {
        self.classes.unwrap_or(10)
    }

    fn validate(&self, need_train: bool) -> Result<()> {
        if need_train && (self.train_images.is_none() || self.train_labels.is_none()) {
            return Err(cfg_err("data.train_images and data.train_labels are required"));
        }
        if self.test_images.is_none() || self.test_labels.is_none() {
            return Err(cfg_err("data.test_images and data.test_labels are required"));
        }
        if self.classes == Some(0) || self.max_test == Some(0) {
            return Err(cfg_err("classes and max_test must be at least 1"));
        }
        Ok(())
    }

    pub fn load_train(&self) -> Result<ImageDataset> {
        let (Some(i), Some(l)) = (&self.train_images, &self.train_labels) else {
            return Err(cfg_err("training data paths are not set"));
        };
        load_idx_dataset(i, l, self.classes())
    }

    pub fn load_test(&self) -> Result<ImageDataset> {
        let (Some(i), Some(l)) = (&self.test_images, &self.test_labels) else {
            return Err(cfg_err("test data paths are not set"));
        };
        let ds = load_idx_dataset(i, l, self.classes())?;
        Ok(match self.max_test {
            Some(m) if m < ds.len() => ds.subset(&(0..m).collect::<Vec<_>>()),
            _ => ds,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub n_batches: usize,
    pub batch_size: usize,
    pub radius: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            n_batches: t.n_batches,
            batch_size: t.batch_size,
            radius: t.radius,
        }
    }
}

impl TrainSettings {
    pub fn options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            n_batches: self.n_batches,
            batch_size: self.batch_size,
            radius: self.radius,
            seed,
            with_replacement: true,
        }
    }

    fn validate(&self) -> Result<()> {
        check_positive("train.n_batches", self.n_batches)?;
        check_positive("train.batch_size", self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MnistConfig {
    pub data: ImageData,
    pub train: TrainSettings,
    /// Evaluate the learning curve every this many batches (the last batch always).
    pub curve_every: Option<usize>,
    /// Required final accuracy, if any.
    pub target_accuracy: Option<f64>,
    pub save_model: bool,
}

impl MnistConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate(true)?;
        self.train.validate()?;
        if self.curve_every == Some(0) {
            return Err(cfg_err("curve_every must be at least 1"));
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return Err(cfg_err("target_accuracy must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub data: ImageData,
    pub train: TrainSettings,
    /// A saved classifier; when absent one is trained from `data`.
    pub model: Option<PathBuf>,
    pub sigmas: Vec<f64>,
    /// Patch areas in pixels; 0 means no patch.
    pub areas: Vec<f64>,
    pub patch: PatchConfig,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            data: ImageData::default(),
            train: TrainSettings::default(),
            model: None,
            sigmas: (0..=8).map(|i| i as f64 / 10.0).collect(),
            areas: vec![0.0, 10.0, 25.0, 40.0, 55.0, 70.0, 100.0, 150.0, 200.0],
            patch: PatchConfig::default(),
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate(self.model.is_none())?;
        self.train.validate()?;
        if self.sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(cfg_err("sigmas must be finite and non-negative"));
        }
        if self.areas.iter().any(|a| !(*a == 0.0 || *a >= 1.0) || !a.is_finite()) {
            return Err(cfg_err("areas must be 0 or at least 1"));
        }
        if self.patch.center_lo > self.patch.center_hi
            || !(self.patch.aspect_lo > 0.0 && self.patch.aspect_lo < self.patch.aspect_hi)
        {
            return Err(cfg_err("invalid patch configuration"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// sample-complexity constants, reported in log10

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct SampleComplexity {
    pub log10_n1: Option<f64>,
    pub log10_n1_hat: Option<f64>,
    pub log10_n2: Option<f64>,
    pub log10_n4: Option<f64>,
    pub log10_n5: Option<f64>,
    pub log10_n6: Option<f64>,
}

fn log10_big_c(spec: &MeasureSpec, m: usize, d: usize) -> Option<f64> {
    eigen_bounds(spec, m, d).ok().map(|b| b.big_c.log10())
}

fn schedule_degree(act: &Activation, depth: usize, epsilon: f64, divisor: f64) -> Option<usize> {
    degree_schedule_with(act, depth, epsilon, divisor, &ApproxOptions::default())
        .ok()
        .map(|s| s.total_degree)
}

/// The certification bounds for the given setting. Entries that need an
/// unavailable constant (degree too high, non-homogeneous activation) are `None`.
pub fn sample_complexity(
    spec: &MeasureSpec,
    act: &Activation,
    d: usize,
    depth: usize,
    epsilon: f64,
) -> SampleComplexity {
    let ld = (d as f64).log10();
    let le = epsilon.log10();
    let l2 = 2f64.log10();
    let mut out = SampleComplexity {
        log10_n5: Some(3.0 * d as f64 * (d as f64).ln() / std::f64::consts::LN_10),
        ..Default::default()
    };
    if let Some(k) = act.polynomial_degree() {
        if let Some(m) = u32::try_from(depth).ok().and_then(|l| k.checked_pow(l)) {
            out.log10_n1 = log10_big_c(spec, m, d).map(|c| 24.0 * m as f64 * ld + 4.0 * c);
            out.log10_n1_hat = Some((monomial_count(d, m) as f64).log10());
        }
    }
    let bound = |divisor: f64, lead: f64| {
        let m = schedule_degree(act, depth, epsilon, divisor)?;
        let c = log10_big_c(spec, m, d)?;
        Some(lead * l2 - 6.0 * le + 96.0 * m as f64 * ld + 18.0 * c)
    };
    out.log10_n2 = bound(4.0, 12.0);
    out.log10_n4 = bound(16.0, 24.0);
    if let Some(kappa) = act.homogeneity_degree() {
        let kf = f64::from(kappa);
        let df = d as f64;
        let eps6 = (epsilon * 2f64.powf(-2.0 * kf - 7.0) * df.powf(-2.0 * kf - 2.0)).sqrt();
        out.log10_n6 = phi(act, eps6).ok().and_then(|m| {
            let c = log10_big_c(spec, m, d)?;
            Some((12.0 * kf + 24.0) * l2 - 6.0 * le + (12.0 * kf + 12.0) * ld + 96.0 * m as f64 * ld + 18.0 * c)
        });
    }
    out
}

// ---------------------------------------------------------------------------
// shared helpers

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Number of strict increases along `v`.
pub fn count_inversions(v: &[f64]) -> usize {
    v.windows(2).filter(|w| w[1] > w[0]).count()
}

fn feature_set(spec: &MeasureSpec, d: usize, m: usize) -> Result<MultiplicitiesSet> {
    MultiplicitiesSet::build(d, m, spec.support_cardinality(), GradedOrder::GradedDescending)
}

fn resolve_degree(
    act: &Activation,
    depth: usize,
    epsilon: f64,
    divisor: f64,
    forced: Option<usize>,
) -> Result<(usize, Option<f64>, Option<usize>)> {
    match forced {
        Some(m) => Ok((m, None, None)),
        None => {
            let s = degree_schedule_with(act, depth, epsilon, divisor, &ApproxOptions::default())?;
            Ok((s.total_degree, Some(s.layer_epsilon), Some(s.layer_degree)))
        }
    }
}

fn forward_all(net: &NetworkParams, xs: &DMatrix<f64>) -> Result<Vec<f64>> {
    Ok(net.forward_rows(xs)?.as_slice().to_vec())
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| cfg_err(format!("cannot build worker pool: {e}")))?
            .install(f),
    }
}

// ---------------------------------------------------------------------------
// exact polynomial learning

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactPolyTrial {
    pub trial: usize,
    pub seed: u64,
    pub rank: usize,
    pub condition_number: f64,
    /// `max |ĥ(x) − f(x)|` over fresh points.
    pub max_fresh_error: f64,
    /// Fitted vs symbolically expanded coefficients, relative to the largest oracle coefficient.
    pub coeff_rel_error: f64,
    /// `max |f_student − f_teacher|` over fresh points.
    pub student_max_diff: f64,
    /// `max |ĥ_student − ĥ_teacher|` when refitted on the student's labels.
    pub student_fit_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactPolyReport {
    pub d: usize,
    pub depth: usize,
    pub total_degree: usize,
    pub features: usize,
    pub n: usize,
    pub student_width: usize,
    pub trials: Vec<ExactPolyTrial>,
    pub worst_fresh_error: f64,
    pub worst_coeff_rel_error: f64,
    pub worst_student_diff: f64,
    pub sample_complexity: SampleComplexity,
}

impl ExactPolyReport {
    pub fn passes(&self, fresh_tol: f64, coeff_tol: f64, student_tol: f64) -> bool {
        self.worst_fresh_error <= fresh_tol
            && self.worst_coeff_rel_error <= coeff_tol
            && self.worst_student_diff <= student_tol
    }
}

pub fn run_exact_poly(cfg: &ExactPolyConfig, seed: u64) -> Result<ExactPolyReport> {
    cfg.validate()?;
    let m = cfg.total_degree()?;
    let set = feature_set(&cfg.measure, cfg.d, m)?;
    let n = cfg.n.unwrap_or(set.len());
    let student_width = cfg.width * cfg.student_multiplier;
    let trials: Vec<ExactPolyTrial> = (0..cfg.seeds)
        .into_par_iter()
        .map(|t| {
            let s = trial_seed(seed, t);
            let teacher = random_teacher(
                cfg.d,
                cfg.depth,
                cfg.width,
                cfg.activation.clone(),
                s,
                cfg.weight_norm,
                false,
            )?;
            let xs = cfg.measure.sample_matrix_stream(n, cfg.d, s, 1);
            let ys = forward_all(&teacher, &xs)?;
            let pred = tols(&xs, &ys, &set)?;
            let test = cfg.measure.sample_matrix_stream(cfg.n_test, cfg.d, s, 2);
            let truth = forward_all(&teacher, &test)?;
            let yhat = pred.predict_rows(&test)?;

            let oracle = align_coefficients(&expand_polynomial(&teacher)?, &set, 1e-14)?;
            let scale = oracle.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
            let coeff_rel_error = max_abs_diff(&pred.coeffs, &oracle) / scale;

            let student = embed_student(&teacher, student_width)?;
            let student_max_diff = max_abs_diff(&forward_all(&student, &test)?, &truth);
            let student_pred = tols(&xs, &forward_all(&student, &xs)?, &set)?;
            let student_fit_diff = max_abs_diff(&student_pred.predict_rows(&test)?, &yhat);

            let diag = pred.diagnostics.as_ref().expect("fit records diagnostics");
            Ok(ExactPolyTrial {
                trial: t,
                seed: s,
                rank: diag.rank,
                condition_number: diag.condition_number,
                max_fresh_error: max_abs_diff(&yhat, &truth),
                coeff_rel_error,
                student_max_diff,
                student_fit_diff,
            })
        })
        .collect::<Result<_>>()?;
    let worst = |f: fn(&ExactPolyTrial) -> f64| trials.iter().map(f).fold(0.0, f64::max);
    Ok(ExactPolyReport {
        d: cfg.d,
        depth: cfg.depth,
        total_degree: m,
        features: set.len(),
        n,
        student_width,
        worst_fresh_error: worst(|t| t.max_fresh_error),
        worst_coeff_rel_error: worst(|t| t.coeff_rel_error),
        worst_student_diff: worst(|t| t.student_max_diff.max(t.student_fit_diff)),
        trials,
        sample_complexity: sample_complexity(&cfg.measure, &cfg.activation, cfg.d, cfg.depth, 1.0),
    })
}

// ---------------------------------------------------------------------------
// generalization curve

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneralizeRun {
    pub n: usize,
    pub trial: usize,
    pub seed: u64,
    pub mse: f64,
    /// Population variance of the teacher on the test points.
    pub teacher_variance: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub n: usize,
    pub median_mse: f64,
    pub min_mse: f64,
    pub max_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneralizeReport {
    pub total_degree: usize,
    pub layer_epsilon: Option<f64>,
    pub layer_degree: Option<usize>,
    pub features: usize,
    pub runs: Vec<GeneralizeRun>,
    pub curve: Vec<CurvePoint>,
    pub inversions: usize,
    pub final_median_mse: f64,
    pub sample_complexity: SampleComplexity,
}

/// MSE of `p` against precomputed truth values on `test`.
fn test_mse(p: &Predictor, test: &DMatrix<f64>, truth: &[f64]) -> Result<f64> {
    Ok(mean_sq_diff(&p.predict_rows(test)?, truth))
}

fn population_variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

pub fn run_generalize(cfg: &GeneralizeConfig, seed: u64) -> Result<GeneralizeReport> {
    cfg.validate()?;
    let (m, layer_epsilon, layer_degree) =
        resolve_degree(&cfg.activation, cfg.depth, cfg.epsilon, cfg.divisor, cfg.degree)?;
    let set = feature_set(&cfg.measure, cfg.d, m)?;
    let grid: Vec<usize> = match &cfg.n_grid {
        Some(g) => g.clone(),
        None => cfg
            .n_multipliers
            .iter()
            .map(|k| ((k * set.len() as f64).ceil() as usize).max(1))
            .collect(),
    };
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|i| (0..cfg.seeds).map(move |t| (i, t)))
        .collect();
    let runs: Vec<GeneralizeRun> = jobs
        .into_par_iter()
        .map(|(i, t)| {
            let s = trial_seed(seed, t);
            let n = grid[i];
            let teacher = random_teacher(
                cfg.d,
                cfg.depth,
                cfg.width,
                cfg.activation.clone(),
                s,
                cfg.weight_norm,
                false,
            )?;
            let xs = cfg.measure.sample_matrix_stream(n, cfg.d, s, 1 + i as u64);
            let pred = tols(&xs, &forward_all(&teacher, &xs)?, &set)?;
            let test = cfg.measure.sample_matrix_stream(cfg.n_test, cfg.d, s, 1 << 32);
            let truth = forward_all(&teacher, &test)?;
            Ok(GeneralizeRun {
                n,
                trial: t,
                seed: s,
                mse: test_mse(&pred, &test, &truth)?,
                teacher_variance: population_variance(&truth),
                rank: pred.diagnostics.as_ref().map_or(0, |d| d.rank),
            })
        })
        .collect::<Result<_>>()?;
    let curve: Vec<CurvePoint> = runs
        .chunks(cfg.seeds)
        .map(|c| {
            let v: Vec<f64> = c.iter().map(|r| r.mse).collect();
            CurvePoint {
                n: c[0].n,
                median_mse: median(&v),
                min_mse: v.iter().copied().fold(f64::INFINITY, f64::min),
                max_mse: v.iter().copied().fold(0.0, f64::max),
            }
        })
        .collect();
    let medians: Vec<f64> = curve.iter().map(|c| c.median_mse).collect();
    Ok(GeneralizeReport {
        total_degree: m,
        layer_epsilon,
        layer_degree,
        features: set.len(),
        inversions: count_inversions(&medians),
        final_median_mse: *medians.last().expect("grid is non-empty"),
        runs,
        curve,
        sample_complexity: sample_complexity(&cfg.measure, &cfg.activation, cfg.d, cfg.depth, cfg.epsilon),
    })
}

// ---------------------------------------------------------------------------
// teacher / student

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudentRun {
    pub trial: usize,
    pub seed: u64,
    pub width: usize,
    /// `max |f_student − f_teacher|` over training and test points.
    pub max_pred_diff: f64,
    pub mse: f64,
    /// `|mse − mse at the teacher's width|`.
    pub mse_deviation: f64,
    /// Measured `E(f₁ − f₂)²` and its bound `2(ℒ(ĥ, f₁) + ℒ(ĥ, f₂))`.
    pub teacher_student_gap: f64,
    pub triangle_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TeacherStudentReport {
    pub total_degree: usize,
    pub features: usize,
    pub n: usize,
    pub runs: Vec<StudentRun>,
    pub worst_pred_diff: f64,
    pub worst_mse_deviation: f64,
    pub sample_complexity: SampleComplexity,
}

pub fn run_teacher_student(cfg: &TeacherStudentConfig, seed: u64) -> Result<TeacherStudentReport> {
    cfg.validate()?;
    let (m, _, _) = resolve_degree(&cfg.activation, cfg.depth, cfg.epsilon, cfg.divisor, cfg.degree)?;
    let set = feature_set(&cfg.measure, cfg.d, m)?;
    let n = ((cfg.n_multiplier * set.len() as f64).ceil() as usize).max(1);
    let per_seed: Vec<Vec<StudentRun>> = (0..cfg.seeds)
        .into_par_iter()
        .map(|t| {
            let s = trial_seed(seed, t);
            let teacher = random_teacher(
                cfg.d,
                cfg.depth,
                cfg.width,
                cfg.activation.clone(),
                s,
                cfg.weight_norm,
                false,
            )?;
            let xs = cfg.measure.sample_matrix_stream(n, cfg.d, s, 1);
            let test = cfg.measure.sample_matrix_stream(cfg.n_test, cfg.d, s, 2);
            let f1_train = forward_all(&teacher, &xs)?;
            let f1_test = forward_all(&teacher, &test)?;
            let h1 = tols(&xs, &f1_train, &set)?.predict_rows(&test)?;
            let base_mse = mean_sq_diff(&h1, &f1_test);
            cfg.student_multipliers
                .iter()
                .map(|&k| {
                    let student = embed_student(&teacher, k * cfg.width)?;
                    let f2_train = forward_all(&student, &xs)?;
                    let f2_test = forward_all(&student, &test)?;
                    let h2 = tols(&xs, &f2_train, &set)?.predict_rows(&test)?;
                    let mse = mean_sq_diff(&h2, &f2_test);
                    Ok(StudentRun {
                        trial: t,
                        seed: s,
                        width: k * cfg.width,
                        max_pred_diff: max_abs_diff(&f2_train, &f1_train).max(max_abs_diff(&f2_test, &f1_test)),
                        mse,
                        mse_deviation: (mse - base_mse).abs(),
                        teacher_student_gap: mean_sq_diff(&f1_test, &f2_test),
                        triangle_bound: 2.0 * (base_mse + mean_sq_diff(&h1, &f2_test)),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let runs: Vec<StudentRun> = per_seed.into_iter().flatten().collect();
    Ok(TeacherStudentReport {
        total_degree: m,
        features: set.len(),
        n,
        worst_pred_diff: runs.iter().map(|r| r.max_pred_diff).fold(0.0, f64::max),
        worst_mse_deviation: runs.iter().map(|r| r.mse_deviation).fold(0.0, f64::max),
        runs,
        sample_complexity: sample_complexity(&cfg.measure, &cfg.activation, cfg.d, cfg.depth, cfg.epsilon),
    })
}

// ---------------------------------------------------------------------------
// covering event and self-regularization

/// `⌈exp(3d ln d)⌉ = ⌈d^{3d}⌉`.
pub fn covering_sample_size(d: usize) -> usize {
    let df = d as f64;
    (3.0 * df * df.ln()).exp().ceil().max(1.0) as usize
}

fn unit_ball_volume(d: usize) -> f64 {
    let mut v = [1.0, 2.0];
    for k in 2..=d {
        let next = v[0] * 2.0 * std::f64::consts::PI / k as f64;
        v = [v[1], next];
    }
    if d == 0 {
        1.0
    } else {
        v[1]
    }
}

/// Exact probability that `N` uniform samples on `[−1, 1]^d` hit every half-ball
/// of radius `r` around `±eᵢ`. The half-balls are disjoint for `r < 1/√2`, each
/// with mass `q = V_d r^d / 2^{d+1}`, so inclusion–exclusion is exact.
pub fn covering_probability(d: usize, n: usize, r: f64) -> f64 {
    let q = unit_ball_volume(d) * r.powi(d as i32) / 2f64.powi(d as i32 + 1);
    let m = 2 * d;
    let mut binom = 1.0;
    let mut total = 0.0;
    for j in 0..=m {
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        total += sign * binom * (1.0 - j as f64 * q).max(0.0).powi(n as i32);
        binom = binom * (m - j) as f64 / (j + 1) as f64;
    }
    total.clamp(0.0, 1.0)
}

/// Whether every `±eᵢ` has a row of `xs` within distance `r`.
pub fn covering_event(xs: &DMatrix<f64>, r: f64) -> bool {
    let d = xs.ncols();
    (0..d).all(|i| {
        [1.0, -1.0].iter().all(|&s| {
            xs.row_iter().any(|row| {
                let dist2: f64 = row
                    .iter()
                    .enumerate()
                    .map(|(j, v)| (v - if j == i { s } else { 0.0 }).powi(2))
                    .sum();
                dist2 <= r * r
            })
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoveringReport {
    pub d: usize,
    pub n: usize,
    pub radius: f64,
    pub trials: usize,
    pub hits: usize,
    pub frequency: f64,
    /// Binomial standard error of `frequency`.
    pub std_error: f64,
    pub exact_probability: f64,
    pub target_frequency: f64,
}

impl CoveringReport {
    pub fn passes(&self) -> bool {
        self.frequency >= self.target_frequency
    }
}

pub fn run_covering(cfg: &CoveringConfig, seed: u64) -> Result<CoveringReport> {
    cfg.validate()?;
    let n = cfg.sample_size();
    let r = cfg.ball_radius();
    let spec = MeasureSpec::standard_uniform();
    let hits = (0..cfg.trials)
        .into_par_iter()
        .filter(|&t| covering_event(&spec.sample_matrix_stream(n, cfg.d, seed, t as u64), r))
        .count();
    let freq = hits as f64 / cfg.trials as f64;
    Ok(CoveringReport {
        d: cfg.d,
        n,
        radius: r,
        trials: cfg.trials,
        hits,
        frequency: freq,
        std_error: (freq * (1.0 - freq) / cfg.trials as f64).sqrt(),
        exact_probability: covering_probability(cfg.d, n, r),
        target_frequency: cfg.target_frequency,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterpolantCheck {
    pub name: String,
    pub width: usize,
    pub interpolation_error: f64,
    pub nonnegative_output: bool,
    pub l1_ratio: f64,
    pub bound: f64,
    pub within_bound: bool,
    /// Interpolates with non-negative output weights, so the bound is claimed.
    pub hypothesis_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfRegReport {
    pub covering: CoveringReport,
    pub kappa: u32,
    pub bound: f64,
    pub interpolants: Vec<InterpolantCheck>,
    /// No interpolant satisfying the hypothesis exceeds the bound.
    pub consistent: bool,
    pub sample_complexity: SampleComplexity,
}

/// Duplicates every hidden unit, splitting its output weight as `t·a` and `(1−t)·a`.
fn split_student(teacher: &NetworkParams, seed: u64) -> Result<NetworkParams> {
    let m = teacher.width();
    let w = &teacher.layers()[0];
    let mut rng = rng_stream(seed, 7);
    let mut big = DMatrix::zeros(2 * m, teacher.input_dim());
    let mut a = DVector::zeros(2 * m);
    for j in 0..m {
        big.row_mut(j).copy_from(&w.row(j));
        big.row_mut(m + j).copy_from(&w.row(j));
        let t: f64 = rng.random_range(0.1..0.9);
        a[j] = t * teacher.output()[j];
        a[m + j] = (1.0 - t) * teacher.output()[j];
    }
    NetworkParams::new(vec![big], a, teacher.activation().clone())
}

pub fn run_self_regularization(cfg: &SelfRegConfig, seed: u64) -> Result<SelfRegReport> {
    cfg.validate()?;
    let covering = run_covering(&cfg.covering, seed)?;
    let d = cfg.covering.d;
    let kappa = cfg.activation.homogeneity_degree().expect("validated");
    let bound = (d as f64).powi(kappa as i32 + 1) * 2f64.powi(kappa as i32 + 1);
    let teacher = random_teacher(d, 1, cfg.width, cfg.activation.clone(), seed, WeightNorm::L1Rows, true)?;
    let spec = MeasureSpec::standard_uniform();
    let xs = spec.sample_matrix_stream(covering.n, d, seed, 1 << 32);
    let target = forward_all(&teacher, &xs)?;
    let a_star = teacher.output_l1();

    let mut rng = rng_stream(seed, 9);
    let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let v_l1: f64 = v.iter().map(|x| x.abs()).sum();
    let v: Vec<f64> = v.iter().map(|x| x / v_l1).collect();

    let embedded = embed_student(&teacher, cfg.width * cfg.student_multiplier)?;
    let split = split_student(&teacher, seed)?;
    let candidates = vec![
        ("embedded", embedded.clone()),
        ("rescaled", homogeneous_rescale(&teacher, Some(kappa))?),
        ("embedded_rescaled", homogeneous_rescale(&embedded, Some(kappa))?),
        ("split", split.clone()),
        ("split_rescaled", homogeneous_rescale(&split, Some(kappa))?),
        (
            "cancellation",
            cancellation_student(&teacher, cfg.cancellation_pairs, &v, cfg.nu)?,
        ),
    ];
    let interpolants: Vec<InterpolantCheck> = candidates
        .into_iter()
        .map(|(name, net)| {
            let err = max_abs_diff(&forward_all(&net, &xs)?, &target);
            let nonneg = net.output().iter().all(|a| *a >= 0.0);
            let ratio = net.output_l1() / a_star;
            Ok(InterpolantCheck {
                name: name.to_string(),
                width: net.width(),
                interpolation_error: err,
                nonnegative_output: nonneg,
                l1_ratio: ratio,
                bound,
                within_bound: ratio <= bound,
                hypothesis_holds: nonneg && err <= 1e-10,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SelfRegReport {
        consistent: interpolants.iter().all(|c| !c.hypothesis_holds || c.within_bound),
        covering,
        kappa,
        bound,
        interpolants,
        sample_complexity: sample_complexity(&spec, &cfg.activation, d, 1, 0.05),
    })
}

// ---------------------------------------------------------------------------
// condition numbers

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CondRow {
    pub measure: String,
    pub d: usize,
    pub k: usize,
    pub features: usize,
    pub lambda_min: f64,
    pub lambda_min_lb: f64,
    pub lambda_max: f64,
    pub lambda_max_ub: f64,
    pub kappa: f64,
    pub kappa_ub: f64,
    pub kappa_bound_applies: bool,
    pub sandwich_holds: bool,
    /// `None` when `d < 4`, where the condition-number bound is not claimed.
    pub kappa_holds: Option<bool>,
    pub reconstruction_error: f64,
    pub c: f64,
    pub f: f64,
    pub big_c: f64,
}

impl CondRow {
    pub const CSV_HEADER: [&'static str; 11] = [
        "d",
        "k",
        "lambda_min",
        "lb",
        "lambda_max",
        "ub",
        "kappa",
        "ub",
        "measure",
        "features",
        "kappa_bound_applies",
    ];

    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.d.to_string(),
            self.k.to_string(),
            self.lambda_min.to_string(),
            self.lambda_min_lb.to_string(),
            self.lambda_max.to_string(),
            self.lambda_max_ub.to_string(),
            self.kappa.to_string(),
            self.kappa_ub.to_string(),
            self.measure.clone(),
            self.features.to_string(),
            self.kappa_bound_applies.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CondReport {
    pub rows: Vec<CondRow>,
    pub all_sandwiches_hold: bool,
    pub all_kappa_bounds_hold: bool,
}

/// One table row for `(measure, d, k)`.
pub fn cond_row(spec: &MeasureSpec, d: usize, k: usize) -> Result<CondRow> {
    let set = feature_set(spec, d, k)?;
    let dec = decompose(spec, &set)?;
    let sp = dec.spectrum();
    let b = dec.bounds;
    let sandwich = sp.lambda_min >= b.lambda_min_lb * (1.0 - 1e-12) && sp.lambda_max <= b.lambda_max_ub * (1.0 + 1e-12);
    Ok(CondRow {
        measure: spec.label(),
        d,
        k,
        features: set.len(),
        lambda_min: sp.lambda_min,
        lambda_min_lb: b.lambda_min_lb,
        lambda_max: sp.lambda_max,
        lambda_max_ub: b.lambda_max_ub,
        kappa: sp.kappa,
        kappa_ub: b.kappa_ub,
        kappa_bound_applies: b.kappa_bound_applies,
        sandwich_holds: sandwich,
        kappa_holds: b.kappa_bound_applies.then_some(sp.kappa <= b.kappa_ub * (1.0 + 1e-12)),
        reconstruction_error: dec.reconstruction_error(),
        c: b.c,
        f: b.f,
        big_c: b.big_c,
    })
}

pub fn run_condnumber(cfg: &CondNumberConfig) -> Result<CondReport> {
    cfg.validate()?;
    let jobs: Vec<(&MeasureSpec, usize, usize)> = cfg
        .measures
        .iter()
        .flat_map(|m| cfg.ds.iter().flat_map(move |&d| cfg.ks.iter().map(move |&k| (m, d, k))))
        .collect();
    for &(m, d, k) in &jobs {
        feature_set(m, d, k)?;
    }
    let rows: Vec<CondRow> = jobs
        .into_par_iter()
        .map(|(m, d, k)| cond_row(m, d, k))
        .collect::<Result<_>>()?;
    Ok(CondReport {
        all_sandwiches_hold: rows.iter().all(|r| r.sandwich_holds),
        all_kappa_bounds_hold: rows.iter().all(|r| r.kappa_holds != Some(false)),
        rows,
    })
}

// ---------------------------------------------------------------------------
// image classification

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyPoint {
    pub batches: usize,
    pub single_batch_accuracy: f64,
    pub cumulative_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MnistReport {
    pub features_non_bias: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub curve: Vec<AccuracyPoint>,
    pub final_accuracy: f64,
    pub target_accuracy: Option<f64>,
    pub min_rank: usize,
}

impl MnistReport {
    pub fn passes(&self) -> Option<bool> {
        self.target_accuracy.map(|t| self.final_accuracy >= t)
    }
}

/// Trains on `train`, tracking accuracy on `test` every `curve_every` batches.
pub fn train_and_evaluate(
    train: &ImageDataset,
    test: &ImageDataset,
    settings: &TrainSettings,
    curve_every: usize,
    seed: u64,
) -> Result<(MnistReport, StackedClassifier)> {
    if (train.height(), train.width()) != (test.height(), test.width()) {
        return Err(Error::Precondition("train and test images differ in shape".into()));
    }
    let model = train_batched(train, &settings.options(seed))?;
    let nb = model.n_batches();
    let mut checkpoints: Vec<usize> = (1..=nb).filter(|b| b % curve_every.max(1) == 0).collect();
    if checkpoints.last() != Some(&nb) {
        checkpoints.push(nb);
    }
    let curve = checkpoints
        .iter()
        .map(|&b| {
            Ok(AccuracyPoint {
                batches: b,
                single_batch_accuracy: model.batch(b - 1).accuracy(test)?,
                cumulative_accuracy: model.cumulative(b).accuracy(test)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let classifier = model.averaged();
    Ok((
        MnistReport {
            features_non_bias: model.map.non_bias_len(),
            n_train: train.len(),
            n_test: test.len(),
            final_accuracy: curve.last().expect("at least one checkpoint").cumulative_accuracy,
            curve,
            target_accuracy: None,
            min_rank: model.diagnostics.iter().map(|d| d.rank).min().unwrap_or(0),
        },
        classifier,
    ))
}

pub fn run_mnist(cfg: &MnistConfig, seed: u64) -> Result<(MnistReport, StackedClassifier)> {
    cfg.validate()?;
    let train = cfg.data.load_train()?;
    let test = cfg.data.load_test()?;
    let every = cfg.curve_every.unwrap_or(cfg.train.n_batches.div_ceil(10).max(1));
    let (mut report, classifier) = train_and_evaluate(&train, &test, &cfg.train, every, seed)?;
    report.target_accuracy = cfg.target_accuracy;
    Ok((report, classifier))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoisePoint {
    pub level: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseReport {
    pub n_test: usize,
    pub gaussian: Vec<NoisePoint>,
    pub patch: Vec<NoisePoint>,
    /// Accuracy at the largest σ is below the clean accuracy.
    pub degrades: Option<bool>,
}

/// Accuracy of `model` under Gaussian pixel noise and black patches.
pub fn noise_sweep(
    model: &StackedClassifier,
    test: &ImageDataset,
    sigmas: &[f64],
    areas: &[f64],
    patch: &PatchConfig,
    seed: u64,
) -> Result<NoiseReport> {
    let (h, w) = (test.height(), test.width());
    if areas.iter().any(|a| *a > 0.0) && patch.center_hi >= h.min(w) {
        return Err(Error::Config("patch centre range does not fit the image".into()));
    }
    let gaussian = sigmas
        .iter()
        .map(|&s| {
            if !(s >= 0.0) {
                return Err(Error::Precondition(format!("sigma must be non-negative, got {s}")));
            }
            let noisy = test.map_images(|i, img| gaussian_noise_stream(img, s, seed, i as u64).expect("sigma checked"));
            Ok(NoisePoint {
                level: s,
                accuracy: model.accuracy(&noisy)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let patch_points = areas
        .iter()
        .map(|&a| {
            let noisy = if a == 0.0 {
                test.clone()
            } else {
                test.map_images(|i, img| {
                    patch_noise_with(img, h, w, a, seed, i as u64, patch, None).expect("patch checked")
                })
            };
            Ok(NoisePoint {
                level: a,
                accuracy: model.accuracy(&noisy)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let clean = gaussian.iter().find(|p| p.level == 0.0).map(|p| p.accuracy);
    let noisiest = gaussian.iter().max_by(|a, b| a.level.total_cmp(&b.level));
    Ok(NoiseReport {
        n_test: test.len(),
        degrades: match (clean, noisiest) {
            (Some(c), Some(p)) if p.level > 0.0 => Some(p.accuracy < c),
            _ => None,
        },
        gaussian,
        patch: patch_points,
    })
}

pub fn load_classifier(path: &Path) -> Result<StackedClassifier> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let model: StackedClassifier = serde_json::from_str(&text)?;
    StackedClassifier::new(model.map, model.coeffs)
}

pub fn save_classifier(path: &Path, model: &StackedClassifier) -> Result<()> {
    fs::write(path, serde_json::to_string(model)?).map_err(|e| Error::file(path, e))
}

pub fn run_noise(cfg: &NoiseConfig, seed: u64) -> Result<NoiseReport> {
    cfg.validate()?;
    let test = cfg.data.load_test()?;
    let model = match &cfg.model {
        Some(p) => load_classifier(p)?,
        None => {
            let train = cfg.data.load_train()?;
            train_batched(&train, &cfg.train.options(seed))?.averaged()
        }
    };
    let expected = ConvFeatureMap::new(test.height(), test.width(), model.map.radius());
    if expected.len() != model.map.len() {
        return Err(Error::DimensionMismatch {
            expected: expected.len(),
            got: model.map.len(),
        });
    }
    noise_sweep(&model, &test, &cfg.sigmas, &cfg.areas, &cfg.patch, seed)
}

// ---------------------------------------------------------------------------
// run directories

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub kind: &'static str,
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    /// `None` when the run carries no pass/fail criterion.
    pub passed: Option<bool>,
    pub summary: String,
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    version: &'a str,
    seed: u64,
    config: &'a ExperimentConfig,
}

struct RunDir {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl RunDir {
    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::file(&path, e))?;
        self.files.push(path);
        Ok(())
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::file(&path, e))?;
        self.files.push(path);
        Ok(())
    }

    fn records(&mut self, name: &str, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush().map_err(|e| Error::file(&path, e))?;
        self.files.push(path);
        Ok(())
    }
}

/// Validates, runs and writes a full run directory: `config.resolved.json`,
/// `report.json` and the kind's CSV tables.
pub fn execute(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let mut run = RunDir {
        dir: out_dir.to_path_buf(),
        files: Vec::new(),
    };
    run.json(
        "config.resolved.json",
        &ResolvedConfig {
            version: version(),
            seed: cfg.seed,
            config: cfg,
        },
    )?;
    let seed = cfg.seed;
    let (passed, summary) = with_pool(cfg.workers, || match &cfg.experiment {
        Experiment::ExactPoly(c) => {
            let r = run_exact_poly(c, seed)?;
            run.json("report.json", &r)?;
            run.csv("trials.csv", &r.trials)?;
            let ok = r.passes(1e-6, 1e-6, 1e-10);
            Ok((
                Some(ok),
                format!(
                    "exact_poly: {} trials, N = {}, worst fresh error {:.3e}, worst coefficient error {:.3e}",
                    r.trials.len(),
                    r.n,
                    r.worst_fresh_error,
                    r.worst_coeff_rel_error
                ),
            ))
        }
        Experiment::GeneralizeAdmissible(c) => {
            let r = run_generalize(c, seed)?;
            run.json("report.json", &r)?;
            run.csv("runs.csv", &r.runs)?;
            run.csv("curve.csv", &r.curve)?;
            Ok((
                Some(r.inversions <= 1 && r.final_median_mse <= c.epsilon),
                format!(
                    "generalize: M = {}, |C| = {}, final median mse {:.4e}, {} inversion(s)",
                    r.total_degree, r.features, r.final_median_mse, r.inversions
                ),
            ))
        }
        Experiment::TeacherStudent(c) => {
            let r = run_teacher_student(c, seed)?;
            run.json("report.json", &r)?;
            run.csv("students.csv", &r.runs)?;
            Ok((
                Some(r.worst_pred_diff <= 1e-10 && r.worst_mse_deviation <= 1e-10),
                format!(
                    "teacher_student: worst prediction gap {:.3e}, worst mse deviation {:.3e}",
                    r.worst_pred_diff, r.worst_mse_deviation
                ),
            ))
        }
        Experiment::SelfRegularization(c) => {
            let r = run_self_regularization(c, seed)?;
            run.json("report.json", &r)?;
            run.csv("interpolants.csv", &r.interpolants)?;
            Ok((
                Some(r.consistent && r.covering.passes()),
                format!(
                    "self_regularization: covering frequency {:.3} (exact {:.3}), bound {} respected: {}",
                    r.covering.frequency, r.covering.exact_probability, r.bound, r.consistent
                ),
            ))
        }
        Experiment::CoveringEvent(c) => {
            let r = run_covering(c, seed)?;
            run.json("report.json", &r)?;
            run.csv("covering.csv", std::slice::from_ref(&r))?;
            Ok((
                Some(r.passes()),
                format!(
                    "covering_event: d = {}, N = {}, frequency {:.3} ± {:.3}, exact probability {:.4}",
                    r.d, r.n, r.frequency, r.std_error, r.exact_probability
                ),
            ))
        }
        Experiment::CondNumber(c) => {
            let r = run_condnumber(c)?;
            run.json("report.json", &r)?;
            run.records(
                "condnum.csv",
                &CondRow::CSV_HEADER,
                r.rows.iter().map(CondRow::csv_record),
            )?;
            Ok((
                Some(r.all_sandwiches_hold && r.all_kappa_bounds_hold),
                format!(
                    "cond_number: {} rows, all bounds hold: {}",
                    r.rows.len(),
                    r.all_sandwiches_hold && r.all_kappa_bounds_hold
                ),
            ))
        }
        Experiment::MnistConv(c) => {
            let (r, model) = run_mnist(c, seed)?;
            run.json("report.json", &r)?;
            run.csv("accuracy_curve.csv", &r.curve)?;
            if c.save_model {
                let path = run.dir.join("model.json");
                save_classifier(&path, &model)?;
                run.files.push(path);
            }
            Ok((
                r.passes(),
                format!("mnist_conv: final accuracy {:.4}", r.final_accuracy),
            ))
        }
        Experiment::NoiseRobustness(c) => {
            let r = run_noise(c, seed)?;
            run.json("report.json", &r)?;
            run.csv("noise_gaussian.csv", &r.gaussian)?;
            run.csv("noise_patch.csv", &r.patch)?;
            Ok((
                r.degrades,
                format!("noise_robustness: {} test images, degrades: {:?}", r.n_test, r.degrades),
            ))
        }
    })?;
    Ok(RunOutcome {
        kind: cfg.experiment.kind(),
        out_dir: out_dir.to_path_buf(),
        files: run.files,
        passed,
        summary,
    })
}
