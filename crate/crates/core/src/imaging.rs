//! Image classification with convolutional degree-2 polynomial features:
//! one least-squares regression per class on `{0, 1}` indicator targets,
//! trained on random batches whose coefficients are averaged.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::rng_stream;
use crate::error::{Error, IdxError, Result};
use crate::tensorize::ConvFeatureMap;
use crate::tols::{assemble, lstsq_min_norm, SolverDiagnostics};

/// Grayscale images with class labels; one image per row, pixels row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    images: DMatrix<f64>,
    height: usize,
    width: usize,
    labels: Vec<u8>,
    classes: usize,
}

impl ImageDataset {
    pub fn new(images: DMatrix<f64>, height: usize, width: usize, labels: Vec<u8>, classes: usize) -> Result<Self> {
        if images.nrows() == 0 {
            return Err(Error::Precondition("dataset is empty".into()));
        }
        if images.ncols() != height * width {
            return Err(Error::DimensionMismatch {
                expected: height * width,
                got: images.ncols(),
            });
        }
        if images.nrows() != labels.len() {
            return Err(IdxError::PairingMismatch {
                images: images.nrows(),
                labels: labels.len(),
            }
            .into());
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, l)| **l as usize >= classes) {
            return Err(IdxError::LabelOutOfRange { index, label, classes }.into());
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Precondition("pixels must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            height,
            width,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &DMatrix<f64> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> Vec<f64> {
        self.images.row(i).iter().copied().collect()
    }

    /// The rows listed in `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let images = DMatrix::from_fn(idx.len(), self.images.ncols(), |r, c| self.images[(idx[r], c)]);
        Self {
            images,
            height: self.height,
            width: self.width,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Applies `f(image_index, pixels)` to every image.
    pub fn map_images(&self, f: impl Fn(usize, &[f64]) -> Vec<f64> + Sync) -> Self {
        let rows: Vec<Vec<f64>> = (0..self.len()).into_par_iter().map(|i| f(i, &self.image(i))).collect();
        let images = DMatrix::from_fn(self.len(), self.images.ncols(), |r, c| rows[r][c]);
        Self { images, ..self.clone() }
    }

    /// Number of images per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// One regression per class over a shared conv feature map; column `c` of
/// `coeffs` scores class `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedClassifier {
    pub map: ConvFeatureMap,
    pub coeffs: DMatrix<f64>,
}

impl StackedClassifier {
    pub fn new(map: ConvFeatureMap, coeffs: DMatrix<f64>) -> Result<Self> {
        if coeffs.nrows() != map.len() {
            return Err(Error::DimensionMismatch {
                expected: map.len(),
                got: coeffs.nrows(),
            });
        }
        Ok(Self { map, coeffs })
    }

    pub fn classes(&self) -> usize {
        self.coeffs.ncols()
    }

    pub fn scores(&self, image: &[f64]) -> Result<Vec<f64>> {
        let f = self.map.featurize(image)?;
        let v = nalgebra::DVector::from_vec(f.into_values());
        Ok(self.coeffs.tr_mul(&v).as_slice().to_vec())
    }

    /// Predicted class and the score vector.
    pub fn classify(&self, image: &[f64]) -> Result<(usize, Vec<f64>)> {
        let s = self.scores(image)?;
        Ok((argmax(&s), s))
    }

    /// Fraction of `ds` classified correctly.
    pub fn accuracy(&self, ds: &ImageDataset) -> Result<f64> {
        let preds = self.predict_all(ds)?;
        let hits = preds
            .iter()
            .zip(ds.labels())
            .filter(|(p, l)| **p == **l as usize)
            .count();
        Ok(hits as f64 / ds.len() as f64)
    }

    pub fn predict_all(&self, ds: &ImageDataset) -> Result<Vec<usize>> {
        // score in blocks so the design never holds more than a few thousand rows
        let mut out = Vec::with_capacity(ds.len());
        for start in (0..ds.len()).step_by(2000) {
            let idx: Vec<usize> = (start..(start + 2000).min(ds.len())).collect();
            let xi = assemble(ds.subset(&idx).images(), &self.map)?;
            let scores = xi.data() * &self.coeffs;
            out.extend(scores.row_iter().map(|r| argmax(r.clone_owned().as_slice())));
        }
        Ok(out)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub n_batches: usize,
    pub batch_size: usize,
    pub radius: usize,
    pub seed: u64,
    /// Batches drawn with replacement (the only supported mode).
    pub with_replacement: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            n_batches: 50,
            batch_size: 1000,
            radius: 2,
            seed: 0,
            with_replacement: true,
        }
    }
}

/// Per-batch fits, kept so learning curves can be drawn afterwards.
#[derive(Debug, Clone)]
pub struct BatchedModel {
    pub map: ConvFeatureMap,
    pub batch_coeffs: Vec<DMatrix<f64>>,
    pub diagnostics: Vec<SolverDiagnostics>,
}

impl BatchedModel {
    pub fn n_batches(&self) -> usize {
        self.batch_coeffs.len()
    }

    /// Classifier fitted on batch `i` alone.
    pub fn batch(&self, i: usize) -> StackedClassifier {
        StackedClassifier {
            map: self.map.clone(),
            coeffs: self.batch_coeffs[i].clone(),
        }
    }

    /// Classifier with the coefficients averaged over batches `0..n`.
    pub fn cumulative(&self, n: usize) -> StackedClassifier {
        let mut sum = DMatrix::zeros(self.map.len(), self.batch_coeffs[0].ncols());
        for c in &self.batch_coeffs[..n] {
            sum += c;
        }
        StackedClassifier {
            map: self.map.clone(),
            coeffs: sum / n as f64,
        }
    }

    pub fn averaged(&self) -> StackedClassifier {
        self.cumulative(self.n_batches())
    }
}

/// Batch `i` indices: `B` draws with replacement from stream `i`.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, i: usize) -> Vec<usize> {
    let mut rng = rng_stream(seed, i as u64);
    (0..batch_size).map(|_| rng.random_range(0..n)).collect()
}

/// Fits the one-vs-rest regressions on a single set of images.
pub fn fit_one_vs_rest(ds: &ImageDataset, map: &ConvFeatureMap) -> Result<(DMatrix<f64>, SolverDiagnostics)> {
    let xi = assemble(ds.images(), map)?;
    let targets = DMatrix::from_fn(ds.len(), ds.classes(), |i, c| {
        f64::from(u8::from(ds.labels()[i] as usize == c))
    });
    lstsq_min_norm(xi.data(), &targets)
}

pub fn train_batched(ds: &ImageDataset, opts: &TrainOptions) -> Result<BatchedModel> {
    if ds.is_empty() {
        return Err(Error::Precondition("dataset is empty".into()));
    }
    if opts.n_batches == 0 || opts.batch_size == 0 {
        return Err(Error::Precondition("need at least one non-empty batch".into()));
    }
    if opts.batch_size > ds.len() {
        return Err(Error::Precondition(format!(
            "batch size {} exceeds dataset size {}",
            opts.batch_size,
            ds.len()
        )));
    }
    if !opts.with_replacement {
        return Err(Error::Config("only sampling with replacement is supported".into()));
    }
    let map = ConvFeatureMap::new(ds.height(), ds.width(), opts.radius);
    let fits: Vec<(DMatrix<f64>, SolverDiagnostics)> = (0..opts.n_batches)
        .into_par_iter()
        .map(|i| {
            let idx = batch_indices(ds.len(), opts.batch_size, opts.seed, i);
            fit_one_vs_rest(&ds.subset(&idx), &map)
        })
        .collect::<Result<_>>()?;
    let (batch_coeffs, diagnostics) = fits.into_iter().unzip();
    Ok(BatchedModel {
        map,
        batch_coeffs,
        diagnostics,
    })
}

/// Adds `N(0, σ²)` to every pixel, then clamps to `[0, 1]`.
pub fn gaussian_noise(image: &[f64], sigma: f64, seed: u64) -> Result<Vec<f64>> {
    gaussian_noise_stream(image, sigma, seed, 0)
}

pub fn gaussian_noise_stream(image: &[f64], sigma: f64, seed: u64, stream: u64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Precondition(format!("sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.to_vec());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma checked");
    let mut rng = rng_stream(seed, stream);
    Ok(image
        .iter()
        .map(|p| (p + normal.sample(&mut rng)).clamp(0.0, 1.0))
        .collect())
}

/// Where patches may be centred and how their aspect ratio is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    /// Inclusive 0-based centre range for rows and columns.
    pub center_lo: usize,
    pub center_hi: usize,
    pub aspect_lo: f64,
    pub aspect_hi: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        // centres 6..=22 in 1-based pixel coordinates
        Self {
            center_lo: 5,
            center_hi: 21,
            aspect_lo: 0.5,
            aspect_hi: 2.0,
        }
    }
}

/// Zeroes a rectangle of area about `A`: width `⌊D√A⌋` columns, height `⌊√A/D⌋`
/// rows, `D ~ U(1/2, 2)`, clipped at the border.
pub fn patch_noise(image: &[f64], height: usize, width: usize, area: f64, seed: u64) -> Result<Vec<f64>> {
    patch_noise_with(image, height, width, area, seed, 0, &PatchConfig::default(), None)
}

/// `patch_noise` with an explicit stream, config and optionally a forced aspect `D`.
#[allow(clippy::too_many_arguments)]
pub fn patch_noise_with(
    image: &[f64],
    height: usize,
    width: usize,
    area: f64,
    seed: u64,
    stream: u64,
    cfg: &PatchConfig,
    aspect: Option<f64>,
) -> Result<Vec<f64>> {
    if image.len() != height * width {
        return Err(Error::DimensionMismatch {
            expected: height * width,
            got: image.len(),
        });
    }
    if !(area >= 1.0) {
        return Err(Error::Precondition(format!(
            "patch area must be at least 1, got {area}"
        )));
    }
    if cfg.center_lo > cfg.center_hi || cfg.center_hi >= height.min(width) {
        return Err(Error::Config("patch centre range does not fit the image".into()));
    }
    let mut rng = rng_stream(seed, stream);
    let ci = rng.random_range(cfg.center_lo..=cfg.center_hi);
    let cj = rng.random_range(cfg.center_lo..=cfg.center_hi);
    let d = match aspect {
        Some(d) => d,
        None => rng.random_range(cfg.aspect_lo..cfg.aspect_hi),
    };
    let root = area.sqrt();
    let w = (d * root).floor() as usize;
    let h = (root / d).floor() as usize;
    let mut out = image.to_vec();
    let r0 = ci.saturating_sub(h / 2);
    let c0 = cj.saturating_sub(w / 2);
    for r in r0..(ci + h - h / 2).min(height) {
        for c in c0..(cj + w - w / 2).min(width) {
            out[r * width + c] = 0.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Three classes of 6×6 images: a bright row, a bright column, or a bright diagonal.
    pub(crate) fn toy_dataset(n: usize, seed: u64) -> ImageDataset {
        let (h, w) = (6, 6);
        let mut rng = rng_stream(seed, 99);
        let mut images = DMatrix::zeros(n, h * w);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 3) as u8;
            let k = rng.random_range(0..6);
            for r in 0..h {
                for c in 0..w {
                    let on = match class {
                        0 => r == k,
                        1 => c == k,
                        _ => (r + 6 - c) % 6 == k,
                    };
                    let base = if on { 0.8 } else { 0.1 };
                    images[(i, r * w + c)] = (base + rng.random_range(-0.1..0.1f64)).clamp(0.0, 1.0);
                }
            }
            labels.push(class);
        }
        ImageDataset::new(images, h, w, labels, 3).unwrap()
    }

    #[test]
    fn dataset_validation() {
        let img = DMatrix::from_element(2, 4, 0.5);
        assert!(ImageDataset::new(img.clone(), 2, 2, vec![0, 1], 2).is_ok());
        assert!(matches!(
            ImageDataset::new(img.clone(), 2, 2, vec![0], 2),
            Err(Error::Idx(IdxError::PairingMismatch { .. }))
        ));
        assert!(matches!(
            ImageDataset::new(img.clone(), 2, 2, vec![0, 5], 2),
            Err(Error::Idx(IdxError::LabelOutOfRange { index: 1, .. }))
        ));
        assert!(ImageDataset::new(img.map(|v| v * 3.0), 2, 2, vec![0, 1], 2).is_err());
    }

    #[test]
    fn classify_rules() {
        let map = ConvFeatureMap::new(2, 2, 1);
        let mut coeffs = DMatrix::zeros(map.len(), 10);
        coeffs[(0, 3)] = 1.0;
        let c = StackedClassifier::new(map.clone(), coeffs).unwrap();
        assert_eq!(c.classify(&[0.2, 0.9, 0.0, 1.0]).unwrap().0, 3);
        let flat = StackedClassifier::new(map.clone(), DMatrix::from_element(map.len(), 10, 0.1)).unwrap();
        assert_eq!(flat.classify(&[0.2, 0.9, 0.0, 1.0]).unwrap().0, 0);
        assert!(c.classify(&[0.0; 3]).is_err());
    }

    #[test]
    fn single_batch_equals_its_fit() {
        let ds = toy_dataset(60, 1);
        let opts = TrainOptions {
            n_batches: 1,
            batch_size: 40,
            radius: 1,
            seed: 3,
            with_replacement: true,
        };
        let m = train_batched(&ds, &opts).unwrap();
        assert_eq!(m.averaged().coeffs, m.batch(0).coeffs);
        let idx = batch_indices(60, 40, 3, 0);
        let (direct, _) = fit_one_vs_rest(&ds.subset(&idx), &m.map).unwrap();
        assert_eq!(direct, m.batch(0).coeffs);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let ds = toy_dataset(300, 2);
        let test = toy_dataset(150, 3);
        let opts = TrainOptions {
            n_batches: 4,
            batch_size: 100,
            radius: 1,
            seed: 5,
            with_replacement: true,
        };
        let a = train_batched(&ds, &opts).unwrap();
        let b = train_batched(&ds, &opts).unwrap();
        assert_eq!(a.averaged().coeffs, b.averaged().coeffs);
        let clf = a.averaged();
        assert!(clf.accuracy(&test).unwrap() >= 0.9);
        assert!(clf.accuracy(&ds.subset(&(0..100).collect::<Vec<_>>())).unwrap() >= 0.9);
        // argmax is unchanged by a common positive rescaling of all scores
        let scaled = StackedClassifier::new(clf.map.clone(), &clf.coeffs * 7.5).unwrap();
        assert_eq!(scaled.predict_all(&test).unwrap(), clf.predict_all(&test).unwrap());
        let err = train_batched(
            &ds,
            &TrainOptions {
                batch_size: 301,
                ..opts
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn gaussian_noise_behaviour() {
        let img = vec![0.0, 0.5, 1.0, 0.25];
        assert_eq!(gaussian_noise(&img, 0.0, 1).unwrap(), img);
        let loud = gaussian_noise(&img, 10.0, 1).unwrap();
        assert!(loud.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(loud, img);
        assert_eq!(
            gaussian_noise(&img, 0.3, 9).unwrap(),
            gaussian_noise(&img, 0.3, 9).unwrap()
        );
        assert!(gaussian_noise(&img, -1.0, 1).is_err());
    }

    fn zeros_after_patch(area: f64, aspect: Option<f64>, seed: u64) -> usize {
        let img = vec![1.0; 28 * 28];
        let out = patch_noise_with(&img, 28, 28, area, seed, 0, &PatchConfig::default(), aspect).unwrap();
        out.iter().filter(|v| **v == 0.0).count()
    }

    #[test]
    fn patch_sizes() {
        for seed in 0..20 {
            assert_eq!(zeros_after_patch(16.0, Some(1.0), seed), 16);
            assert_eq!(zeros_after_patch(49.0, Some(1.0), seed), 49);
            // A = 1 zeroes ⌊D⌋·⌊1/D⌋ pixels, which is 0 or 1
            assert!(zeros_after_patch(1.0, None, seed) <= 1);
            assert_eq!(zeros_after_patch(1.0, Some(1.0), seed), 1);
            assert_eq!(zeros_after_patch(36.0, Some(1.5), seed), 9 * 4);
        }
    }

    #[test]
    fn patch_is_clipped_at_border() {
        let cfg = PatchConfig {
            center_lo: 0,
            center_hi: 0,
            ..Default::default()
        };
        let img = vec![1.0; 8 * 8];
        let out = patch_noise_with(&img, 8, 8, 16.0, 1, 0, &cfg, Some(1.0)).unwrap();
        // 4×4 square centred on (0,0) keeps only rows/cols 0..2
        assert_eq!(out.iter().filter(|v| **v == 0.0).count(), 4);
        assert!(patch_noise(&img, 8, 8, 0.5, 1).is_err());
    }
}
