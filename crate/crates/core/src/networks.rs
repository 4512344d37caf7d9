//! Fully connected teacher and student networks
//! `f(x) = aᵀ σ(W_L σ(⋯ σ(W_1 x)))`, with uniform hidden width.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::approx::Activation;
use crate::distributions::rng_stream;
use crate::error::{Error, Result};
use crate::tensorize::MultiplicitiesSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNorm {
    /// Every row has `‖w‖₁ = 1`.
    L1Rows,
    /// Every row has `‖w‖₂ = 1/√fan_in`.
    L2Sphere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkWire", into = "NetworkWire")]
pub struct NetworkParams {
    input_dim: usize,
    width: usize,
    layers: Vec<DMatrix<f64>>,
    output: DVector<f64>,
    activation: Activation,
    l1_normalized: bool,
}

impl NetworkParams {
    pub fn new(layers: Vec<DMatrix<f64>>, output: DVector<f64>, activation: Activation) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Precondition("network needs at least one layer".into()))?;
        let (width, input_dim) = first.shape();
        if width == 0 || input_dim == 0 {
            return Err(Error::Precondition("layer dimensions must be positive".into()));
        }
        for w in &layers[1..] {
            if w.shape() != (width, width) {
                return Err(Error::DimensionMismatch {
                    expected: width,
                    got: if w.nrows() != width { w.nrows() } else { w.ncols() },
                });
            }
        }
        if output.len() != width {
            return Err(Error::DimensionMismatch {
                expected: width,
                got: output.len(),
            });
        }
        let mut net = Self {
            input_dim,
            width,
            layers,
            output,
            activation,
            l1_normalized: false,
        };
        net.l1_normalized = net.satisfies_l1_bounds(1e-12);
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[DMatrix<f64>] {
        &self.layers
    }

    pub fn output(&self) -> &DVector<f64> {
        &self.output
    }

    pub fn activation(&self) -> &Activation {
        &self.activation
    }

    /// Every row has `‖·‖₁ ≤ 1` and `‖a‖₁ ≤ 1`.
    pub fn is_l1_normalized(&self) -> bool {
        self.l1_normalized
    }

    pub fn output_l1(&self) -> f64 {
        self.output.iter().map(|v| v.abs()).sum()
    }

    pub fn max_row_l1(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|w| {
                w.row_iter()
                    .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }

    fn satisfies_l1_bounds(&self, tol: f64) -> bool {
        self.output_l1() <= 1.0 + tol && self.max_row_l1() <= 1.0 + tol
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        let act = &self.activation;
        self.forward_with(x, |z| act.eval(z))
    }

    /// Forward pass with `σ` replaced by `sigma` at every hidden unit.
    pub fn forward_with(&self, x: &[f64], sigma: impl Fn(f64) -> f64) -> Result<f64> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let mut h = DVector::from_column_slice(x);
        for w in &self.layers {
            h = (w * h).map(&sigma);
        }
        Ok(self.output.dot(&h))
    }

    /// Outputs for each row of `x`.
    pub fn forward_rows(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.ncols(),
            });
        }
        let mut h = x.transpose();
        for w in &self.layers {
            h = (w * h).map(|z| self.activation.eval(z));
        }
        Ok(h.tr_mul(&self.output))
    }
}

fn normalize_row(row: &mut [f64], norm: WeightNorm) {
    match norm {
        WeightNorm::L1Rows => {
            let s: f64 = row.iter().map(|v| v.abs()).sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        WeightNorm::L2Sphere => {
            let s = row.iter().map(|v| v * v).sum::<f64>().sqrt() * (row.len() as f64).sqrt();
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
}

/// A teacher with Gaussian rows renormalized to `norm` and `‖a‖₁ = 1`.
pub fn random_teacher(
    d: usize,
    depth: usize,
    width: usize,
    activation: Activation,
    seed: u64,
    norm: WeightNorm,
    nonneg_output: bool,
) -> Result<NetworkParams> {
    if d == 0 || depth == 0 || width == 0 {
        return Err(Error::Precondition("teacher dimensions must be positive".into()));
    }
    let mut rng = rng_stream(seed, 0);
    let mut layers = Vec::with_capacity(depth);
    for p in 0..depth {
        let fan_in = if p == 0 { d } else { width };
        let mut w = DMatrix::zeros(width, fan_in);
        for i in 0..width {
            let mut row: Vec<f64> = (0..fan_in).map(|_| rng.sample(StandardNormal)).collect();
            normalize_row(&mut row, norm);
            for (j, v) in row.into_iter().enumerate() {
                w[(i, j)] = v;
            }
        }
        layers.push(w);
    }
    let mut a: Vec<f64> = (0..width).map(|_| rng.sample(StandardNormal)).collect();
    if nonneg_output {
        a.iter_mut().for_each(|v| *v = v.abs());
    }
    normalize_row(&mut a, WeightNorm::L1Rows);
    NetworkParams::new(layers, DVector::from_vec(a), activation)
}

/// Pads every hidden layer to `new_width` with zero units.
pub fn embed_student(teacher: &NetworkParams, new_width: usize) -> Result<NetworkParams> {
    let m = teacher.width;
    if new_width < m {
        return Err(Error::Precondition(format!(
            "student width {new_width} is smaller than teacher width {m}"
        )));
    }
    let layers = teacher
        .layers
        .iter()
        .enumerate()
        .map(|(p, w)| {
            let cols = if p == 0 { teacher.input_dim } else { new_width };
            let mut out = DMatrix::zeros(new_width, cols);
            out.view_mut((0, 0), w.shape()).copy_from(w);
            out
        })
        .collect();
    let mut a = DVector::zeros(new_width);
    a.rows_mut(0, m).copy_from(&teacher.output);
    NetworkParams::new(layers, a, teacher.activation.clone())
}

/// Appends `z` pairs of units with input weights `v` and output weights `+ν, −ν`.
pub fn cancellation_student(teacher: &NetworkParams, z: usize, v: &[f64], nu: f64) -> Result<NetworkParams> {
    if teacher.depth() != 1 {
        return Err(Error::Precondition(
            "cancellation needs a one-hidden-layer teacher".into(),
        ));
    }
    if z == 0 {
        return Err(Error::Precondition("pair count z must be at least 1".into()));
    }
    if !(nu > 0.0) {
        return Err(Error::Precondition("nu must be positive".into()));
    }
    if v.len() != teacher.input_dim {
        return Err(Error::DimensionMismatch {
            expected: teacher.input_dim,
            got: v.len(),
        });
    }
    let m = teacher.width;
    let new_width = m + 2 * z;
    let mut w = DMatrix::zeros(new_width, teacher.input_dim);
    w.view_mut((0, 0), (m, teacher.input_dim)).copy_from(&teacher.layers[0]);
    let mut a = DVector::zeros(new_width);
    a.rows_mut(0, m).copy_from(&teacher.output);
    for j in m..new_width {
        w.row_mut(j).copy_from_slice(v);
        a[j] = if (j - m) % 2 == 0 { nu } else { -nu };
    }
    NetworkParams::new(vec![w], a, teacher.activation.clone())
}

/// Moves row scales into the output layer: `Ŵ_j = θ_j W_j` with
/// `θ_j = 1/(√d‖W_j‖₂)` and `â_j = a_j θ_j^{−κ}`; zero rows get `â_j = 0`.
///
/// `kappa` defaults to the activation's homogeneity degree and must agree with it.
pub fn homogeneous_rescale(net: &NetworkParams, kappa: Option<u32>) -> Result<NetworkParams> {
    if net.depth() != 1 {
        return Err(Error::Precondition("rescaling needs a one-hidden-layer network".into()));
    }
    let native = net
        .activation
        .homogeneity_degree()
        .ok_or_else(|| Error::Precondition(format!("{} is not positive homogeneous", net.activation.label())))?;
    let kappa = kappa.unwrap_or(native);
    if kappa != native {
        return Err(Error::Precondition(format!(
            "activation is homogeneous of degree {native}, not {kappa}"
        )));
    }
    let sqrt_d = (net.input_dim as f64).sqrt();
    let mut w = net.layers[0].clone();
    let mut a = net.output.clone();
    for j in 0..net.width {
        let norm = w.row(j).norm();
        if norm == 0.0 {
            a[j] = 0.0;
            continue;
        }
        let theta = 1.0 / (sqrt_d * norm);
        w.row_mut(j).scale_mut(theta);
        a[j] *= theta.powi(-(kappa as i32));
    }
    NetworkParams::new(vec![w], a, net.activation.clone())
}

/// Sparse multivariate polynomial keyed by exponent vector.
pub type SparsePoly = BTreeMap<Vec<u32>, f64>;

fn poly_mul(p: &SparsePoly, q: &SparsePoly) -> SparsePoly {
    let mut out = SparsePoly::new();
    for (a, x) in p {
        for (b, y) in q {
            let key: Vec<u32> = a.iter().zip(b).map(|(i, j)| i + j).collect();
            *out.entry(key).or_insert(0.0) += x * y;
        }
    }
    out
}

fn poly_axpy(out: &mut SparsePoly, s: f64, p: &SparsePoly) {
    for (k, v) in p {
        *out.entry(k.clone()).or_insert(0.0) += s * v;
    }
}

/// Symbolic expansion of a polynomial-activation network into monomial coefficients.
pub fn expand_polynomial(net: &NetworkParams) -> Result<SparsePoly> {
    let Activation::Polynomial(c) = &net.activation else {
        return Err(Error::Precondition("expansion needs a polynomial activation".into()));
    };
    let d = net.input_dim;
    let constant = |v: f64| SparsePoly::from([(vec![0; d], v)]);
    let mut h: Vec<SparsePoly> = (0..d)
        .map(|i| {
            let mut e = vec![0; d];
            e[i] = 1;
            SparsePoly::from([(e, 1.0)])
        })
        .collect();
    for w in &net.layers {
        let mut next = Vec::with_capacity(w.nrows());
        for row in w.row_iter() {
            let mut pre = SparsePoly::new();
            for (j, wj) in row.iter().enumerate() {
                if *wj != 0.0 {
                    poly_axpy(&mut pre, *wj, &h[j]);
                }
            }
            let mut acc = constant(c.first().copied().unwrap_or(0.0));
            let mut power = constant(1.0);
            for &ck in c.iter().skip(1) {
                power = poly_mul(&power, &pre);
                if ck != 0.0 {
                    poly_axpy(&mut acc, ck, &power);
                }
            }
            next.push(acc);
        }
        h = next;
    }
    let mut out = SparsePoly::new();
    for (aj, hj) in net.output.iter().zip(&h) {
        poly_axpy(&mut out, *aj, hj);
    }
    Ok(out)
}

/// Coefficients of `poly` aligned with `set`; terms outside the set are an error
/// unless their magnitude is below `tol`.
pub fn align_coefficients(poly: &SparsePoly, set: &MultiplicitiesSet, tol: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; set.len()];
    for (k, v) in poly {
        match set.position(k) {
            Some(i) => out[i] += v,
            None if v.abs() <= tol => {}
            None => {
                return Err(Error::Precondition(format!(
                    "monomial {k:?} with coefficient {v:e} lies outside the set"
                )))
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct NetworkWire {
    input_dim: usize,
    width: usize,
    depth: usize,
    activation: Activation,
    l1_normalized: bool,
    /// Row-major weights per layer.
    layers: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl From<NetworkParams> for NetworkWire {
    fn from(n: NetworkParams) -> Self {
        Self {
            input_dim: n.input_dim,
            width: n.width,
            depth: n.layers.len(),
            activation: n.activation,
            l1_normalized: n.l1_normalized,
            layers: n.layers.iter().map(|w| w.transpose().as_slice().to_vec()).collect(),
            output: n.output.as_slice().to_vec(),
        }
    }
}

impl TryFrom<NetworkWire> for NetworkParams {
    type Error = Error;

    fn try_from(w: NetworkWire) -> Result<Self> {
        if w.layers.len() != w.depth {
            return Err(Error::Config("layer count does not match depth".into()));
        }
        let layers = w
            .layers
            .iter()
            .enumerate()
            .map(|(p, flat)| {
                let cols = if p == 0 { w.input_dim } else { w.width };
                if flat.len() != w.width * cols {
                    return Err(Error::Config(format!("layer {p} has {} weights", flat.len())));
                }
                Ok(DMatrix::from_row_slice(w.width, cols, flat))
            })
            .collect::<Result<Vec<_>>>()?;
        NetworkParams::new(layers, DVector::from_vec(w.output), w.activation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::approximate;
    use crate::distributions::MeasureSpec;

    fn random_inputs(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        MeasureSpec::standard_uniform().sample_matrix(n, d, seed)
    }

    fn rows(x: &DMatrix<f64>) -> impl Iterator<Item = Vec<f64>> + '_ {
        x.row_iter().map(|r| r.iter().copied().collect())
    }

    #[test]
    fn single_unit_pass_through() {
        let w = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let net = NetworkParams::new(vec![w], DVector::from_vec(vec![1.0]), Activation::Relu).unwrap();
        assert_eq!(net.forward(&[0.3, 0.9, -0.2]).unwrap(), 0.3);
        assert!(net.forward(&[0.3]).is_err());
    }

    #[test]
    fn square_activation_hand_value() {
        let w = DMatrix::identity(2, 2);
        let net = NetworkParams::new(vec![w], DVector::from_vec(vec![0.6, 0.4]), Activation::monomial(2)).unwrap();
        assert!((net.forward(&[0.5, -1.0]).unwrap() - 0.55).abs() < 1e-15);
    }

    #[test]
    fn zero_output_is_zero() {
        let mut t = random_teacher(4, 2, 5, Activation::Sigmoid, 1, WeightNorm::L1Rows, false).unwrap();
        t.output.fill(0.0);
        for x in rows(&random_inputs(20, 4, 2)) {
            assert_eq!(t.forward(&x).unwrap(), 0.0);
        }
    }

    #[test]
    fn teacher_norms() {
        let t = random_teacher(6, 3, 7, Activation::Relu, 9, WeightNorm::L1Rows, false).unwrap();
        assert!(t.max_row_l1() <= 1.0 + 1e-12 && t.output_l1() <= 1.0 + 1e-12);
        assert!(t.is_l1_normalized());
        let t = random_teacher(6, 1, 7, Activation::Relu, 9, WeightNorm::L2Sphere, true).unwrap();
        for r in t.layers()[0].row_iter() {
            assert!((r.norm() - 1.0 / 6f64.sqrt()).abs() < 1e-12);
        }
        assert!(t.output().min() >= 0.0);
    }

    #[test]
    fn l1_networks_are_bounded() {
        for act in [Activation::Relu, Activation::Sigmoid] {
            let t = random_teacher(5, 3, 8, act, 3, WeightNorm::L1Rows, false).unwrap();
            let y = t.forward_rows(&random_inputs(10_000, 5, 4)).unwrap();
            assert!(y.amax() <= 1.0);
        }
    }

    #[test]
    fn forward_rows_matches_forward() {
        let t = random_teacher(3, 2, 4, Activation::Sigmoid, 5, WeightNorm::L1Rows, false).unwrap();
        let x = random_inputs(10, 3, 6);
        let y = t.forward_rows(&x).unwrap();
        for (i, r) in rows(&x).enumerate() {
            assert!((y[i] - t.forward(&r).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn embedding_interpolates() {
        let t = random_teacher(4, 2, 3, Activation::Sigmoid, 11, WeightNorm::L1Rows, false).unwrap();
        assert_eq!(embed_student(&t, 3).unwrap(), t);
        let s = embed_student(&t, 8).unwrap();
        assert_eq!(s.output_l1(), t.output_l1());
        for x in rows(&random_inputs(100, 4, 12)) {
            assert!((s.forward(&x).unwrap() - t.forward(&x).unwrap()).abs() <= 1e-12);
        }
        assert!(embed_student(&t, 2).is_err());
    }

    #[test]
    fn cancellation_preserves_outputs() {
        let t = random_teacher(3, 1, 2, Activation::Relu, 13, WeightNorm::L1Rows, false).unwrap();
        let s = cancellation_student(&t, 1, &[1.0, 0.0, 0.0], 10.0).unwrap();
        assert_eq!(s.width(), 4);
        assert!((s.output_l1() - t.output_l1() - 20.0).abs() < 1e-12);
        for x in rows(&random_inputs(100, 3, 14)) {
            assert!((s.forward(&x).unwrap() - t.forward(&x).unwrap()).abs() <= 1e-12);
            // the added units cancel exactly
            let h: Vec<f64> = (2..4)
                .map(|j| {
                    s.layers()[0]
                        .row(j)
                        .transpose()
                        .dot(&DVector::from_column_slice(&x))
                        .max(0.0)
                })
                .collect();
            assert_eq!(s.output()[2] * h[0] + s.output()[3] * h[1], 0.0);
        }
        assert!(cancellation_student(&t, 0, &[1.0, 0.0, 0.0], 1.0).is_err());
        let deep = random_teacher(3, 2, 2, Activation::Relu, 1, WeightNorm::L1Rows, false).unwrap();
        assert!(cancellation_student(&deep, 1, &[1.0, 0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn rescaling_preserves_outputs() {
        let t = random_teacher(5, 1, 6, Activation::Relu, 21, WeightNorm::L1Rows, true).unwrap();
        let r = homogeneous_rescale(&t, None).unwrap();
        for row in r.layers()[0].row_iter() {
            assert!((row.norm() - 1.0 / 5f64.sqrt()).abs() < 1e-12);
        }
        for x in rows(&random_inputs(100, 5, 22)) {
            assert!((r.forward(&x).unwrap() - t.forward(&x).unwrap()).abs() <= 1e-10);
        }
        let again = homogeneous_rescale(&r, None).unwrap();
        assert!((again.output() - r.output()).amax() < 1e-12);
        assert!(homogeneous_rescale(&t, Some(2)).is_err());
        let sig = random_teacher(5, 1, 6, Activation::Sigmoid, 21, WeightNorm::L1Rows, true).unwrap();
        assert!(homogeneous_rescale(&sig, None).is_err());
    }

    #[test]
    fn rescaling_degree_two() {
        let t = random_teacher(3, 1, 4, Activation::monomial(2), 31, WeightNorm::L1Rows, true).unwrap();
        let r = homogeneous_rescale(&t, Some(2)).unwrap();
        for x in rows(&random_inputs(100, 3, 32)) {
            assert!((r.forward(&x).unwrap() - t.forward(&x).unwrap()).abs() <= 1e-10);
        }
    }

    #[test]
    fn rescaling_zero_rows() {
        let mut w = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.0, 0.0]);
        w[(1, 0)] = 0.0;
        let net = NetworkParams::new(vec![w], DVector::from_vec(vec![0.5, 0.5]), Activation::Relu).unwrap();
        let r = homogeneous_rescale(&net, None).unwrap();
        assert_eq!(r.output()[1], 0.0);
    }

    #[test]
    fn self_regularization_inequality() {
        for seed in 0..5 {
            let d = 4;
            let t = random_teacher(d, 1, 3, Activation::Relu, seed, WeightNorm::L1Rows, true).unwrap();
            let s = homogeneous_rescale(&embed_student(&t, 10).unwrap(), None).unwrap();
            let bound = (d as f64).powi(2) * 4.0 * t.output_l1();
            assert!(s.output_l1() <= bound);
        }
    }

    #[test]
    fn layerwise_replacement_error() {
        let eps_layer = 0.1;
        let p = approximate(&Activation::Relu, eps_layer).unwrap();
        for depth in 1..=3 {
            let t = random_teacher(
                4,
                depth,
                5,
                Activation::Relu,
                40 + depth as u64,
                WeightNorm::L1Rows,
                false,
            )
            .unwrap();
            for x in rows(&random_inputs(500, 4, 41)) {
                let exact = t.forward(&x).unwrap();
                let approx = t.forward_with(&x, |z| p.eval(z)).unwrap();
                assert!((exact - approx).abs() <= depth as f64 * eps_layer);
            }
        }
    }

    #[test]
    fn expansion_matches_forward() {
        let t = random_teacher(
            3,
            2,
            3,
            Activation::Polynomial(vec![0.1, 0.5, 0.4]),
            51,
            WeightNorm::L1Rows,
            false,
        )
        .unwrap();
        let poly = expand_polynomial(&t).unwrap();
        assert!(poly.keys().all(|k| k.iter().sum::<u32>() <= 4));
        for x in rows(&random_inputs(50, 3, 52)) {
            let v: f64 = poly
                .iter()
                .map(|(k, c)| c * k.iter().zip(&x).map(|(e, xi)| xi.powi(*e as i32)).product::<f64>())
                .sum();
            assert!((v - t.forward(&x).unwrap()).abs() < 1e-12);
        }
        let relu = random_teacher(3, 1, 3, Activation::Relu, 1, WeightNorm::L1Rows, false).unwrap();
        assert!(expand_polynomial(&relu).is_err());
    }

    #[test]
    fn json_round_trip() {
        let t = random_teacher(3, 2, 4, Activation::Sigmoid, 61, WeightNorm::L1Rows, false).unwrap();
        let back: NetworkParams = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
