//! Polynomial approximation of activations on `[-1, 1]`.
//!
//! Candidates are truncated Chebyshev series. The projection coefficients are
//! computed once by Gauss–Chebyshev quadrature; the degree is then raised until
//! the sup-error on a dense equispaced grid meets the target. If the candidate
//! leaves `[0, 1]` on the grid it is squeezed affinely back in and re-checked.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GRID: usize = 10_001;
pub const DEFAULT_DEGREE_CAP: usize = 200;
pub const DEFAULT_QUADRATURE_NODES: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "coeffs", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Monomial coefficients, constant term first.
    Polynomial(Vec<f64>),
}

impl Activation {
    pub fn polynomial(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Precondition("polynomial coefficients must be finite".into()));
        }
        Ok(Activation::Polynomial(coeffs))
    }

    /// `z ↦ z^k`.
    pub fn monomial(k: usize) -> Self {
        let mut c = vec![0.0; k + 1];
        c[k] = 1.0;
        Activation::Polynomial(c)
    }

    pub fn eval(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Polynomial(c) => horner(c, z),
        }
    }

    /// Degree of a polynomial activation, ignoring trailing zero coefficients.
    pub fn polynomial_degree(&self) -> Option<usize> {
        match self {
            Activation::Polynomial(c) => Some(c.iter().rposition(|v| *v != 0.0).unwrap_or(0)),
            _ => None,
        }
    }

    /// Degree `κ` of positive homogeneity, `σ(θz) = θ^κ σ(z)` for `θ > 0`.
    pub fn homogeneity_degree(&self) -> Option<u32> {
        match self {
            Activation::Relu => Some(1),
            Activation::Sigmoid => None,
            Activation::Polynomial(c) => {
                let mut nz = c.iter().enumerate().filter(|(_, v)| **v != 0.0);
                match (nz.next(), nz.next()) {
                    (Some((k, _)), None) if k > 0 => Some(k as u32),
                    _ => None,
                }
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Activation::Relu => "relu".into(),
            Activation::Sigmoid => "sigmoid".into(),
            Activation::Polynomial(c) => format!("poly{c:?}"),
        }
    }
}

pub(crate) fn horner(c: &[f64], z: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, v| acc * z + v)
}

/// Evaluates `Σ c_j T_j(x)`.
pub fn clenshaw(c: &[f64], x: f64) -> f64 {
    let (mut b1, mut b2) = (0.0, 0.0);
    for &cj in c.iter().skip(1).rev() {
        let b0 = cj + 2.0 * x * b1 - b2;
        b2 = b1;
        b1 = b0;
    }
    match c.first() {
        Some(&c0) => c0 + x * b1 - b2,
        None => 0.0,
    }
}

/// Chebyshev projection coefficients `c_0..=c_degree` of `f` by `n`-node quadrature.
pub fn chebyshev_coefficients(f: impl Fn(f64) -> f64, degree: usize, n: usize) -> Vec<f64> {
    let theta: Vec<f64> = (0..n)
        .map(|k| std::f64::consts::PI * (k as f64 + 0.5) / n as f64)
        .collect();
    let fx: Vec<f64> = theta.iter().map(|t| f(t.cos())).collect();
    (0..=degree)
        .map(|j| {
            let s: f64 = theta.iter().zip(&fx).map(|(t, v)| v * (j as f64 * t).cos()).sum();
            let c = 2.0 * s / n as f64;
            if j == 0 {
                c / 2.0
            } else {
                c
            }
        })
        .collect()
}

/// Converts a Chebyshev series to monomial coefficients.
///
/// Exact in exact arithmetic; in floating point the monomial form loses accuracy
/// quickly past degree ~40, so evaluation always goes through Clenshaw.
pub fn chebyshev_to_monomial(c: &[f64]) -> Vec<f64> {
    let n = c.len();
    if n == 0 {
        return vec![0.0];
    }
    let mut out = vec![0.0; n];
    let mut prev = vec![0.0; n];
    let mut cur = vec![0.0; n];
    prev[0] = 1.0;
    out[0] += c[0];
    if n > 1 {
        cur[1] = 1.0;
        out[1] += c[1];
    }
    for &cj in c.iter().skip(2) {
        let mut next = vec![0.0; n];
        for i in 0..n - 1 {
            next[i + 1] += 2.0 * cur[i];
        }
        for i in 0..n {
            next[i] -= prev[i];
        }
        for i in 0..n {
            out[i] += cj * next[i];
        }
        prev = std::mem::replace(&mut cur, next);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxOptions {
    pub grid: usize,
    pub degree_cap: usize,
    pub quadrature_nodes: usize,
}

impl Default for ApproxOptions {
    fn default() -> Self {
        Self {
            grid: DEFAULT_GRID,
            degree_cap: DEFAULT_DEGREE_CAP,
            quadrature_nodes: DEFAULT_QUADRATURE_NODES,
        }
    }
}

fn grid_points(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyApprox {
    pub activation: Activation,
    pub degree: usize,
    /// Monomial coefficients, constant term first.
    pub coeffs: Vec<f64>,
    /// Same polynomial in the Chebyshev basis; empty for polynomial activations.
    pub chebyshev: Vec<f64>,
    pub achieved_sup_error: f64,
    pub epsilon_target: f64,
    pub grid_size: usize,
    /// Whether the affine range squeeze was applied.
    pub squeezed: bool,
}

impl PolyApprox {
    pub fn eval(&self, x: f64) -> f64 {
        if self.chebyshev.is_empty() {
            horner(&self.coeffs, x)
        } else {
            clenshaw(&self.chebyshev, x)
        }
    }

    /// The polynomial as an [`Activation`] (monomial form).
    pub fn as_activation(&self) -> Activation {
        Activation::Polynomial(self.coeffs.clone())
    }
}

/// `approximate_with` using the default grid, cap and quadrature.
pub fn approximate(act: &Activation, epsilon: f64) -> Result<PolyApprox> {
    approximate_with(act, epsilon, &ApproxOptions::default())
}

pub fn approximate_with(act: &Activation, epsilon: f64, opts: &ApproxOptions) -> Result<PolyApprox> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Precondition(format!(
            "epsilon must lie in (0, 1], got {epsilon}"
        )));
    }
    if let Activation::Polynomial(c) = act {
        let degree = act.polynomial_degree().unwrap_or(0);
        return Ok(PolyApprox {
            activation: act.clone(),
            degree,
            coeffs: c[..=degree.min(c.len().saturating_sub(1))].to_vec(),
            chebyshev: Vec::new(),
            achieved_sup_error: 0.0,
            epsilon_target: epsilon,
            grid_size: opts.grid,
            squeezed: false,
        });
    }

    let cheb = chebyshev_coefficients(|x| act.eval(x), opts.degree_cap, opts.quadrature_nodes);
    let grid = grid_points(opts.grid);
    let target: Vec<f64> = grid.iter().map(|x| act.eval(*x)).collect();
    // Running partial sums and the Chebyshev recurrence on the grid.
    let mut partial = vec![cheb[0]; grid.len()];
    let mut t_prev = vec![1.0; grid.len()];
    let mut t_cur = grid.clone();
    let mut best = f64::INFINITY;

    for degree in 0..=opts.degree_cap {
        if degree >= 1 {
            if degree >= 2 {
                for i in 0..grid.len() {
                    let next = 2.0 * grid[i] * t_cur[i] - t_prev[i];
                    t_prev[i] = t_cur[i];
                    t_cur[i] = next;
                }
            }
            for (p, t) in partial.iter_mut().zip(&t_cur) {
                *p += cheb[degree] * t;
            }
        }
        let (lo, hi) = partial
            .iter()
            .fold((0.0f64, 1.0f64), |(lo, hi), p| (lo.min(*p), hi.max(*p)));
        let squeezed = lo < 0.0 || hi > 1.0;
        let scale = hi - lo;
        let err = partial
            .iter()
            .zip(&target)
            .map(|(p, t)| ((p - lo) / scale - t).abs())
            .fold(0.0, f64::max);
        best = best.min(err);
        if err <= epsilon {
            let mut chebyshev = cheb[..=degree].to_vec();
            if squeezed {
                chebyshev[0] -= lo;
                chebyshev.iter_mut().for_each(|c| *c /= scale);
            }
            return Ok(PolyApprox {
                activation: act.clone(),
                degree,
                coeffs: chebyshev_to_monomial(&chebyshev),
                chebyshev,
                achieved_sup_error: err,
                epsilon_target: epsilon,
                grid_size: opts.grid,
                squeezed,
            });
        }
    }
    Err(Error::DegreeBudget {
        epsilon,
        cap: opts.degree_cap,
        best_error: best,
    })
}

/// `φ_σ(ε)`, reported as the achieved degree.
pub fn phi(act: &Activation, epsilon: f64) -> Result<usize> {
    Ok(approximate(act, epsilon)?.degree)
}

/// Per-layer budget `ε_layer = √(ε / (divisor·L²))`. The divisor is 4 for the
/// generalization guarantee and 16 for the overparametrized variant.
pub fn layer_epsilon(epsilon: f64, depth: usize, divisor: f64) -> f64 {
    (epsilon / (divisor * (depth * depth) as f64)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeSchedule {
    pub depth: usize,
    pub epsilon: f64,
    pub layer_epsilon: f64,
    pub layer_degree: usize,
    /// Tensor degree `M = r^L`.
    pub total_degree: usize,
    pub approx: PolyApprox,
}

pub fn degree_schedule(act: &Activation, depth: usize, epsilon: f64) -> Result<DegreeSchedule> {
    degree_schedule_with(act, depth, epsilon, 4.0, &ApproxOptions::default())
}

pub fn degree_schedule_with(
    act: &Activation,
    depth: usize,
    epsilon: f64,
    divisor: f64,
    opts: &ApproxOptions,
) -> Result<DegreeSchedule> {
    if depth == 0 {
        return Err(Error::Precondition("depth must be at least 1".into()));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Precondition(format!(
            "epsilon must lie in (0, 1], got {epsilon}"
        )));
    }
    let layer_eps = layer_epsilon(epsilon, depth, divisor);
    let approx = approximate_with(act, layer_eps.min(1.0), opts)?;
    let r = approx.degree;
    let total = u32::try_from(depth)
        .ok()
        .and_then(|l| r.checked_pow(l))
        .ok_or(Error::BudgetExceeded {
            what: "tensor degree",
            requested: u128::MAX,
            cap: usize::MAX as u128,
        })?;
    Ok(DegreeSchedule {
        depth,
        epsilon,
        layer_epsilon: layer_eps,
        layer_degree: r,
        total_degree: total,
        approx,
    })
}
