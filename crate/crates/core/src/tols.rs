//! Tensorized OLS: featurize every sample, solve the least-squares problem, and
//! evaluate the fitted polynomial.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use num_bigint::BigInt;
use num_traits::{One, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::MeasureSpec;
use crate::error::{Error, Result};
use crate::tensorize::{ConvFeature, ConvFeatureMap, MultiplicitiesSet};

/// Default cap on `N·|𝒞|` (1 GB of `f64`).
pub const DEFAULT_CELL_BUDGET: usize = 125_000_000;

/// Singular values below `RCOND·σ_max` are treated as zero.
pub const RCOND: f64 = 1e-10;

pub const MATRIX_MAGIC: &[u8; 8] = b"TOLSMX01";

/// A feature map that can fill design-matrix columns directly.
/// Fills one design row given its sample index.
pub type ColumnFiller<'a> = Box<dyn Fn(usize, &mut [f64]) + Sync + 'a>;

pub trait FeatureMap: Sync {
    fn input_dim(&self) -> usize;
    fn feature_count(&self) -> usize;
    fn featurize_into(&self, x: &[f64], out: &mut [f64]) -> Result<()>;
    /// Prepares per-sample data shared by all columns.
    fn column_filler<'a>(&'a self, xs: &'a DMatrix<f64>) -> ColumnFiller<'a>;
}

impl FeatureMap for MultiplicitiesSet {
    fn input_dim(&self) -> usize {
        self.dim()
    }

    fn feature_count(&self) -> usize {
        self.len()
    }

    fn featurize_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        MultiplicitiesSet::featurize_into(self, x, out)
    }

    fn column_filler<'a>(&'a self, xs: &'a DMatrix<f64>) -> ColumnFiller<'a> {
        let n = xs.nrows();
        let stride = self.coord_cap() + 1;
        // powers[(j·stride + e)·n + i] = xs[i, j]^e
        let mut powers = vec![1.0; n * self.dim() * stride];
        for j in 0..self.dim() {
            for e in 1..stride {
                for i in 0..n {
                    powers[(j * stride + e) * n + i] = powers[(j * stride + e - 1) * n + i] * xs[(i, j)];
                }
            }
        }
        Box::new(move |col, out| {
            out.fill(1.0);
            for (j, &e) in self.get(col).exponents().iter().enumerate() {
                if e > 0 {
                    let src = &powers[(j * stride + e as usize) * n..][..n];
                    out.iter_mut().zip(src).for_each(|(o, p)| *o *= p);
                }
            }
        })
    }
}

impl FeatureMap for ConvFeatureMap {
    fn input_dim(&self) -> usize {
        self.pixels()
    }

    fn feature_count(&self) -> usize {
        self.len()
    }

    fn featurize_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        ConvFeatureMap::featurize_into(self, x, out)
    }

    fn column_filler<'a>(&'a self, xs: &'a DMatrix<f64>) -> ColumnFiller<'a> {
        Box::new(move |col, out| match self.feature(col) {
            ConvFeature::Bias => out.fill(1.0),
            ConvFeature::Linear(p) => out.copy_from_slice(xs.column(p).as_slice()),
            ConvFeature::Pair(p, q) => {
                let (a, b) = (xs.column(p), xs.column(q));
                out.iter_mut()
                    .zip(a.iter().zip(b.iter()))
                    .for_each(|(o, (u, v))| *o = u * v);
            }
        })
    }
}

/// The `N × |features|` matrix `Ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    data: DMatrix<f64>,
    column_means: Vec<f64>,
}

impl DesignMatrix {
    pub fn from_matrix(data: DMatrix<f64>) -> Self {
        let n = data.nrows().max(1) as f64;
        let column_means = data.column_iter().map(|c| c.sum() / n).collect();
        Self { data, column_means }
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn column_means(&self) -> &[f64] {
        &self.column_means
    }
}

/// `assemble_with_budget` with the default cell budget.
pub fn assemble(xs: &DMatrix<f64>, map: &impl FeatureMap) -> Result<DesignMatrix> {
    assemble_with_budget(xs, map, DEFAULT_CELL_BUDGET)
}

/// Featurizes every row of `xs` (one sample per row), in parallel over columns.
pub fn assemble_with_budget(xs: &DMatrix<f64>, map: &impl FeatureMap, cell_budget: usize) -> Result<DesignMatrix> {
    if xs.nrows() == 0 {
        return Err(Error::Precondition("need at least one sample".into()));
    }
    if xs.ncols() != map.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: map.input_dim(),
            got: xs.ncols(),
        });
    }
    let n = xs.nrows();
    let p = map.feature_count();
    let cells = n as u128 * p as u128;
    if cells > cell_budget as u128 {
        return Err(Error::BudgetExceeded {
            what: "design matrix cells",
            requested: cells,
            cap: cell_budget as u128,
        });
    }
    let fill = map.column_filler(xs);
    let mut data = DMatrix::zeros(n, p);
    data.as_mut_slice()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(col, out)| fill(col, out));
    Ok(DesignMatrix::from_matrix(data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub sigma_max: f64,
    /// Smallest singular value kept by the cutoff.
    pub sigma_min_retained: f64,
    /// `σ_max / σ_min_retained`.
    pub condition_number: f64,
    pub cutoff: f64,
    /// Frobenius norm of `B − A X`.
    pub residual_norm: f64,
    /// How ties among minimizers are resolved.
    pub tie_break: String,
}

/// Minimum-norm least-squares solution of `A X ≈ B` (one column of `B` per right-hand side).
///
/// Tall systems use `A = QR` and the SVD of `R`; wide ones use `Aᵀ = QR`, so
/// `A = RᵀQᵀ` and `X = Q (Rᵀ)⁺ B`.
pub fn lstsq_min_norm(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, SolverDiagnostics)> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    let (n, p) = a.shape();
    let (x, sv, cutoff) = if n >= p {
        let qr = a.clone().qr();
        let c = qr.q().tr_mul(b);
        let svd = qr.r().svd(true, true);
        let (x, cutoff) = apply_pinv(&svd, &c);
        (x, svd.singular_values, cutoff)
    } else {
        let qr = a.transpose().qr();
        let svd = qr.r().transpose().svd(true, true);
        let (y, cutoff) = apply_pinv(&svd, b);
        (qr.q() * y, svd.singular_values, cutoff)
    };
    let sigma_max = sv.max();
    let kept: Vec<f64> = sv.iter().copied().filter(|s| *s > cutoff).collect();
    let sigma_min_retained = kept.iter().copied().fold(f64::INFINITY, f64::min);
    let residual_norm = (b - a * &x).norm();
    let diag = SolverDiagnostics {
        rows: n,
        cols: p,
        rank: kept.len(),
        sigma_max,
        sigma_min_retained: if kept.is_empty() { 0.0 } else { sigma_min_retained },
        condition_number: if kept.is_empty() {
            f64::INFINITY
        } else {
            sigma_max / sigma_min_retained
        },
        cutoff,
        residual_norm,
        tie_break: "minimum_norm".into(),
    };
    Ok((x, diag))
}

fn apply_pinv(svd: &nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>, c: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let cutoff = RCOND * svd.singular_values.max();
    let mut z = u.tr_mul(c);
    for (i, s) in svd.singular_values.iter().enumerate() {
        let inv = if *s > cutoff { 1.0 / s } else { 0.0 };
        z.row_mut(i).scale_mut(inv);
    }
    (v_t.tr_mul(&z), cutoff)
}

/// The fitted polynomial `ĥ(x) = ⟨featurize(x), coeffs⟩`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub set: MultiplicitiesSet,
    pub coeffs: Vec<f64>,
    pub diagnostics: Option<SolverDiagnostics>,
}

impl Predictor {
    pub fn new(set: MultiplicitiesSet, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != set.len() {
            return Err(Error::DimensionMismatch {
                expected: set.len(),
                got: coeffs.len(),
            });
        }
        Ok(Self {
            set,
            coeffs,
            diagnostics: None,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let mut buf = vec![0.0; self.set.len()];
        self.set.featurize_into(x, &mut buf)?;
        Ok(buf.iter().zip(&self.coeffs).map(|(a, b)| a * b).sum())
    }

    /// Predictions for each row of `xs`.
    pub fn predict_rows(&self, xs: &DMatrix<f64>) -> Result<Vec<f64>> {
        if xs.ncols() != self.set.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.set.dim(),
                got: xs.ncols(),
            });
        }
        let rows: Vec<Vec<f64>> = xs.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.par_iter()
            .map_init(
                || vec![0.0; self.set.len()],
                |buf, x| {
                    self.set.featurize_into(x, buf)?;
                    Ok(buf.iter().zip(&self.coeffs).map(|(a, b)| a * b).sum())
                },
            )
            .collect()
    }
}

/// Solves for the minimum-norm least-squares coefficients over `set`.
pub fn fit(set: &MultiplicitiesSet, design: &DesignMatrix, y: &[f64]) -> Result<Predictor> {
    if design.cols() != set.len() {
        return Err(Error::DimensionMismatch {
            expected: set.len(),
            got: design.cols(),
        });
    }
    if y.len() != design.rows() {
        return Err(Error::DimensionMismatch {
            expected: design.rows(),
            got: y.len(),
        });
    }
    let b = DMatrix::from_column_slice(y.len(), 1, y);
    let (x, diag) = lstsq_min_norm(design.data(), &b)?;
    Ok(Predictor {
        set: set.clone(),
        coeffs: x.column(0).iter().copied().collect(),
        diagnostics: Some(diag),
    })
}

/// Assemble and fit in one call.
pub fn tols(xs: &DMatrix<f64>, y: &[f64], set: &MultiplicitiesSet) -> Result<Predictor> {
    let design = assemble(xs, set)?;
    fit(set, &design, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl MseEstimate {
    pub fn from_squared_errors(sq: &[f64]) -> Self {
        let n = sq.len();
        let mean = sq.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            std_error: (var / n as f64).sqrt(),
            n,
        }
    }
}

/// Monte-Carlo estimate of `E[(ĥ(X) − f(X))²]` on fresh samples from `spec^{⊗d}`.
pub fn mse(
    p: &Predictor,
    truth: &(dyn Fn(&[f64]) -> f64 + Sync),
    spec: &MeasureSpec,
    n_test: usize,
    seed: u64,
) -> Result<MseEstimate> {
    if n_test == 0 {
        return Err(Error::Precondition("n_test must be at least 1".into()));
    }
    let xs = spec.sample_matrix(n_test, p.set.dim(), seed);
    let pred = p.predict_rows(&xs)?;
    let sq: Vec<f64> = xs
        .row_iter()
        .zip(&pred)
        .map(|(r, yhat)| {
            let x: Vec<f64> = r.iter().copied().collect();
            (yhat - truth(&x)).powi(2)
        })
        .collect();
    Ok(MseEstimate::from_squared_errors(&sq))
}

/// Binary dump: magic, rows and cols as u64 LE, then column-major f64 LE.
pub fn write_matrix<W: Write>(mut w: W, m: &DMatrix<f64>) -> Result<()> {
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix<R: Read>(mut r: R) -> Result<DMatrix<f64>> {
    let mut head = [0u8; 24];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("matrix dump shorter than its header".into()))?;
    if &head[..8] != MATRIX_MAGIC {
        return Err(Error::Format("bad matrix dump magic".into()));
    }
    let rows = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(head[16..24].try_into().expect("8 bytes"));
    let len = rows
        .checked_mul(cols)
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| Error::Format("matrix dump dimensions overflow".into()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != len * 8 {
        return Err(Error::Format(format!(
            "matrix dump holds {} bytes of data, expected {}",
            bytes.len(),
            len * 8
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(DMatrix::from_vec(rows as usize, cols as usize, data))
}

pub fn save_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::file(path, e))?;
    write_matrix(BufWriter::new(f), m)
}

pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    read_matrix(BufReader::new(f))
}

/// The first `n` primes.
pub fn first_primes(n: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(n);
    let mut c = 2u64;
    while out.len() < n {
        if out.iter().take_while(|p| *p * *p <= c).all(|p| c % p != 0) {
            out.push(c);
        }
        c += 1;
    }
    out
}

/// `z_α = Π p_j^{α_j}` for every index of `set`, with `p_j` the `j`-th prime.
pub fn prime_power_nodes(set: &MultiplicitiesSet) -> Vec<BigInt> {
    let primes = first_primes(set.dim());
    set.indices()
        .iter()
        .map(|a| {
            a.exponents()
                .iter()
                .zip(&primes)
                .fold(BigInt::one(), |acc, (e, p)| acc * BigInt::from(*p).pow(*e))
        })
        .collect()
}

/// Exact design on the samples `X⁽ⁱ⁾ = (p_1^{i−1}, …, p_d^{i−1})`, `i = 1..=|𝒞|`.
///
/// Entry `(i, α)` is `z_α^{i−1}`, so the matrix is Vandermonde in the nodes `z_α`.
pub fn prime_power_design(set: &MultiplicitiesSet) -> Vec<Vec<BigInt>> {
    let z = prime_power_nodes(set);
    let n = z.len();
    let mut rows = vec![vec![BigInt::one(); n]; n];
    for i in 1..n {
        for j in 0..n {
            rows[i][j] = &rows[i - 1][j] * &z[j];
        }
    }
    rows
}

/// Fraction-free Gaussian elimination.
pub fn bareiss_determinant(mut m: Vec<Vec<BigInt>>) -> BigInt {
    let n = m.len();
    if n == 0 {
        return BigInt::one();
    }
    let mut sign = BigInt::one();
    let mut prev = BigInt::one();
    for k in 0..n - 1 {
        if m[k][k].is_zero() {
            match (k + 1..n).find(|&r| !m[r][k].is_zero()) {
                Some(r) => {
                    m.swap(k, r);
                    sign = -sign;
                }
                None => return BigInt::zero(),
            }
        }
        for i in k + 1..n {
            for j in k + 1..n {
                let v = (&m[i][j] * &m[k][k] - &m[i][k] * &m[k][j]) / &prev;
                m[i][j] = v;
            }
        }
        prev = m[k][k].clone();
    }
    sign * &m[n - 1][n - 1]
}

/// `Π_{a<b} (z_b − z_a)`, the determinant of the matrix with entries `z_b^i`.
pub fn vandermonde_product(z: &[BigInt]) -> BigInt {
    let mut out = BigInt::one();
    for b in 0..z.len() {
        for a in 0..b {
            out *= &z[b] - &z[a];
        }
    }
    out
}
