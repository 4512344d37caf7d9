//! Orthonormal polynomials of a coordinate measure and the structure of the
//! monomial covariance `Σ = E[𝒳𝒳ᵀ]`.
//!
//! For a univariate measure with moments `c_n`, `D_n = det(c_{i+j})_{0≤i,j≤n}`
//! and `T_0, T_1, …` is the orthonormal family obtained from `1, x, x², …`.
//! Products `T_α(x) = Π T_{αᵢ}(xᵢ)` are orthonormal under the product measure,
//! which gives `Σ = V D Vᵀ` with `V_{αβ} = E[X_α T_β] / E[X_β T_β]` and
//! `D = diag(E[X_α T_α]²)`.

use nalgebra::{DMatrix, SymmetricEigen};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::horner;
use crate::distributions::MeasureSpec;
use crate::error::{Error, Result};
use crate::tensorize::{monomial_count, omega, MultiIndex, MultiplicitiesSet};

/// Largest basis order accepted; Hankel matrices are hopeless in f64 beyond this.
pub const MAX_BASIS_ORDER: usize = 12;

/// Default cap on the number of support points enumerated for `Σ`.
pub const DEFAULT_ENUMERATION_BUDGET: usize = 1_000_000;

const CROSS_CHECK_TOL: f64 = 1e-10;
const SINGULAR_RATIO: f64 = 1e-13;

fn hankel_matrix(c: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n + 1, n + 1, |i, j| c[i + j])
}

/// `D_n` from moments `c`; `D_{−1} = 1`.
pub fn hankel_determinant(c: &[f64], n: isize) -> f64 {
    if n < 0 {
        1.0
    } else {
        hankel_matrix(c, n as usize).determinant()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthoBasis {
    measure: MeasureSpec,
    order: usize,
    moments: Vec<f64>,
    /// `D_0, …, D_K`.
    hankel: Vec<f64>,
    /// Monomial coefficients of `T_0, …, T_K`.
    polys: Vec<Vec<f64>>,
}

/// Orthonormal basis up to order `ω(P, k)`.
pub fn build_basis(spec: &MeasureSpec, k: usize) -> Result<OrthoBasis> {
    let order = omega(spec.support_cardinality(), k);
    if order > MAX_BASIS_ORDER {
        return Err(Error::Precondition(format!(
            "basis order {order} exceeds the supported maximum {MAX_BASIS_ORDER}"
        )));
    }
    let moments = spec.exact_moments(2 * order).values().to_vec();
    let inner = |p: &[f64], q: &[f64]| -> f64 {
        let mut s = 0.0;
        for (a, pa) in p.iter().enumerate() {
            for (b, qb) in q.iter().enumerate() {
                s += pa * qb * moments[a + b];
            }
        }
        s
    };

    let mut hankel = Vec::with_capacity(order + 1);
    for n in 0..=order {
        let dn = hankel_determinant(&moments, n as isize);
        let prev = hankel.last().copied().unwrap_or(1.0);
        if !(dn > 0.0) || dn / prev < SINGULAR_RATIO {
            return Err(Error::SingularHankel { order: n, value: dn });
        }
        hankel.push(dn);
    }

    let mut polys: Vec<Vec<f64>> = Vec::with_capacity(order + 1);
    for i in 0..=order {
        let mut v = vec![0.0; i + 1];
        v[i] = 1.0;
        for t in &polys {
            let proj = inner(&v, t);
            for (vj, tj) in v.iter_mut().zip(t) {
                *vj -= proj * tj;
            }
        }
        let norm = inner(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        polys.push(v);
    }

    for (i, t) in polys.iter().enumerate() {
        let det_form = determinant_form(&moments, &hankel, i);
        let scale = t.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let deviation = t.iter().zip(&det_form).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if deviation > CROSS_CHECK_TOL * scale {
            return Err(Error::CrossCheck { degree: i, deviation });
        }
    }

    Ok(OrthoBasis {
        measure: spec.clone(),
        order,
        moments,
        hankel,
        polys,
    })
}

/// Coefficients of `det(P_i(x)) / √(D_i D_{i−1})`, where `P_i(x)` is the Hankel
/// matrix of order `i` with its last row replaced by `(1, x, …, x^i)`.
fn determinant_form(c: &[f64], hankel: &[f64], i: usize) -> Vec<f64> {
    let norm = (hankel[i] * if i == 0 { 1.0 } else { hankel[i - 1] }).sqrt();
    if i == 0 {
        return vec![1.0 / norm];
    }
    (0..=i)
        .map(|j| {
            // cofactor of entry (i, j): delete the last row and column j
            let minor = DMatrix::from_fn(i, i, |r, s| {
                let col = if s < j { s } else { s + 1 };
                c[r + col]
            });
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            sign * minor.determinant() / norm
        })
        .collect()
}

impl OrthoBasis {
    pub fn measure(&self) -> &MeasureSpec {
        &self.measure
    }

    /// `K = ω(P, k)`.
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn moments(&self) -> &[f64] {
        &self.moments
    }

    /// `D_n` for `−1 ≤ n ≤ K`.
    pub fn hankel(&self, n: isize) -> f64 {
        if n < 0 {
            1.0
        } else {
            self.hankel[n as usize]
        }
    }

    pub fn hankel_all(&self) -> &[f64] {
        &self.hankel
    }

    /// `D_i / D_{i−1}` for `i = 0..=K`.
    pub fn hankel_ratios(&self) -> Vec<f64> {
        (0..=self.order as isize)
            .map(|i| self.hankel(i) / self.hankel(i - 1))
            .collect()
    }

    pub fn poly(&self, i: usize) -> &[f64] {
        &self.polys[i]
    }

    pub fn polys(&self) -> &[Vec<f64>] {
        &self.polys
    }

    pub fn eval(&self, i: usize, x: f64) -> f64 {
        horner(&self.polys[i], x)
    }

    /// `E[X^a T_b(X)]` from exact moments.
    pub fn x_power_t(&self, a: usize, b: usize) -> f64 {
        let t = &self.polys[b];
        let need = a + t.len() - 1;
        let extended;
        let c = if need < self.moments.len() {
            &self.moments
        } else {
            extended = self.measure.exact_moments(need).values().to_vec();
            &extended
        };
        t.iter().enumerate().map(|(q, tq)| tq * c[a + q]).sum()
    }

    /// `T_α(x) = Π T_{αᵢ}(xᵢ)`.
    pub fn eval_multi(&self, alpha: &MultiIndex, x: &[f64]) -> Result<f64> {
        if alpha.dim() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: alpha.dim(),
                got: x.len(),
            });
        }
        if let Some(&e) = alpha.exponents().iter().find(|e| **e as usize > self.order) {
            return Err(Error::Precondition(format!(
                "exponent {e} exceeds basis order {}",
                self.order
            )));
        }
        Ok(alpha
            .exponents()
            .iter()
            .zip(x)
            .map(|(e, xi)| self.eval(*e as usize, *xi))
            .product())
    }
}

/// Evaluator for `T_α`.
pub fn multivariate_t<'a>(basis: &'a OrthoBasis, alpha: &'a MultiIndex) -> Result<impl Fn(&[f64]) -> f64 + 'a> {
    if alpha.exponents().iter().any(|e| *e as usize > basis.order) {
        return Err(Error::Precondition(format!(
            "multi-index {:?} exceeds basis order {}",
            alpha.exponents(),
            basis.order
        )));
    }
    Ok(move |x: &[f64]| {
        alpha
            .exponents()
            .iter()
            .zip(x)
            .map(|(e, xi)| basis.eval(*e as usize, *xi))
            .product()
    })
}

/// Points of `support^d` with their product weights, enumerated in chunks.
fn enumerate_points(spec: &MeasureSpec, d: usize, budget: usize) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let (vals, weights) = spec
        .atoms()
        .ok_or_else(|| Error::Precondition("enumeration needs a discrete measure".into()))?;
    let total = (vals.len() as u128).checked_pow(d as u32).unwrap_or(u128::MAX);
    if total > budget as u128 {
        return Err(Error::BudgetExceeded {
            what: "support enumeration",
            requested: total,
            cap: budget as u128,
        });
    }
    Ok((vals, weights, total as usize))
}

fn point(idx: usize, vals: &[f64], weights: &[f64], d: usize, x: &mut [f64]) -> f64 {
    let s = vals.len();
    let mut rem = idx;
    let mut w = 1.0;
    for xi in x.iter_mut().take(d) {
        let k = rem % s;
        rem /= s;
        *xi = vals[k];
        w *= weights[k];
    }
    w
}

/// `E[g(X)]` over `P^{⊗d}` by enumeration, with fixed chunking and pairwise
/// reduction so the result does not depend on the thread count.
fn expect_enumerated<T, G, A>(spec: &MeasureSpec, d: usize, budget: usize, zero: T, g: G, add: A) -> Result<T>
where
    T: Clone + Send + Sync,
    G: Fn(&[f64], f64, &mut T) + Sync,
    A: Fn(T, T) -> T,
{
    let (vals, weights, total) = enumerate_points(spec, d, budget)?;
    let chunks = total.div_ceil(4096).clamp(1, 64);
    let per = total.div_ceil(chunks);
    let mut partial: Vec<T> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = zero.clone();
            let mut x = vec![0.0; d];
            for idx in c * per..((c + 1) * per).min(total) {
                let w = point(idx, &vals, &weights, d, &mut x);
                g(&x, w, &mut acc);
            }
            acc
        })
        .collect();
    while partial.len() > 1 {
        let mut next = Vec::with_capacity(partial.len().div_ceil(2));
        let mut it = partial.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => add(a, b),
                None => a,
            });
        }
        partial = next;
    }
    Ok(partial.pop().unwrap_or(zero))
}

/// `Σ` by enumerating `support^d`.
pub fn sigma_enumerated(spec: &MeasureSpec, set: &MultiplicitiesSet, budget: usize) -> Result<DMatrix<f64>> {
    let p = set.len();
    let d = set.dim();
    expect_enumerated(
        spec,
        d,
        budget,
        DMatrix::<f64>::zeros(p, p),
        |x, w, acc| {
            let f = set.featurize(x).expect("dimension checked").into_values();
            let v = nalgebra::DVector::from_vec(f);
            acc.ger(w, &v, &v, 1.0);
        },
        |a, b| a + b,
    )
}

/// `Σ_{αβ} = Π_i c_{αᵢ+βᵢ}` by independence of the coordinates.
pub fn sigma_from_moments(spec: &MeasureSpec, set: &MultiplicitiesSet) -> DMatrix<f64> {
    let c = spec.exact_moments(2 * set.coord_cap()).values().to_vec();
    let idx = set.indices();
    DMatrix::from_fn(set.len(), set.len(), |i, j| {
        idx[i]
            .exponents()
            .iter()
            .zip(idx[j].exponents())
            .map(|(a, b)| c[(a + b) as usize])
            .product()
    })
}

/// Exact `Σ`: enumeration for discrete measures, moment products otherwise.
pub fn sigma_exact(spec: &MeasureSpec, set: &MultiplicitiesSet) -> Result<DMatrix<f64>> {
    if spec.is_discrete() {
        sigma_enumerated(spec, set, DEFAULT_ENUMERATION_BUDGET)
    } else {
        Ok(sigma_from_moments(spec, set))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenBounds {
    pub k: usize,
    pub d: usize,
    pub omega: usize,
    pub c: f64,
    pub f: f64,
    /// `C = f / c`.
    pub big_c: f64,
    /// `Σ_{i≤k} C(d+i−1, i)`.
    pub monomial_count: f64,
    pub lambda_min_lb: f64,
    pub lambda_max_ub: f64,
    /// `C·d^{3k}`; only claimed for `d ≥ 4`.
    pub kappa_ub: f64,
    pub kappa_bound_applies: bool,
}

/// Bound constants for degree `k` in dimension `d`.
pub fn eigen_bounds(spec: &MeasureSpec, k: usize, d: usize) -> Result<EigenBounds> {
    let basis = build_basis(spec, k)?;
    Ok(bounds_from_basis(&basis, k, d))
}

pub fn bounds_from_basis(basis: &OrthoBasis, k: usize, d: usize) -> EigenBounds {
    let omega = basis.order();
    let ratios = basis.hankel_ratios();
    let kf = k as f64;
    let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let c = min_ratio.powf(kf / 2.0).min(1.0);
    let c2w = basis.moments()[2 * omega];
    let f = c2w.powf(kf).max(1.0) * max_ratio.powf(kf).max(1.0) / min_ratio.powf(kf).min(1.0);
    let big_c = f / c;
    let count = monomial_count(d, k) as f64;
    EigenBounds {
        k,
        d,
        omega,
        c,
        f,
        big_c,
        monomial_count: count,
        lambda_min_lb: c / count,
        lambda_max_ub: f * count,
        kappa_ub: big_c * (d as f64).powf(3.0 * kf),
        kappa_bound_applies: d >= 4,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub kappa: f64,
}

pub fn spectrum(sigma: &DMatrix<f64>) -> Spectrum {
    let eig = SymmetricEigen::new(sigma.clone());
    let lambda_min = eig.eigenvalues.min();
    let lambda_max = eig.eigenvalues.max();
    Spectrum {
        lambda_min,
        lambda_max,
        kappa: lambda_max / lambda_min,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaDecomposition {
    pub set: MultiplicitiesSet,
    pub sigma: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// `E[X_α T_α]²` for each `α`.
    pub ddiag: Vec<f64>,
    pub bounds: EigenBounds,
}

impl SigmaDecomposition {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut vd = self.v.clone();
        for (j, dj) in self.ddiag.iter().enumerate() {
            vd.column_mut(j).scale_mut(*dj);
        }
        vd * self.v.transpose()
    }

    /// `‖Σ − V D Vᵀ‖_max`.
    pub fn reconstruction_error(&self) -> f64 {
        (&self.sigma - self.reconstruct()).amax()
    }

    pub fn det_v(&self) -> f64 {
        self.v.determinant()
    }

    /// Largest magnitude strictly below the diagonal of `V`.
    pub fn lower_triangle_max(&self) -> f64 {
        let n = self.v.nrows();
        let mut m = 0.0f64;
        for j in 0..n {
            for i in j + 1..n {
                m = m.max(self.v[(i, j)].abs());
            }
        }
        m
    }

    pub fn spectrum(&self) -> Spectrum {
        spectrum(&self.sigma)
    }
}

/// `Σ`, `V` and `D` for `set` under `spec^{⊗d}`.
pub fn decompose(spec: &MeasureSpec, set: &MultiplicitiesSet) -> Result<SigmaDecomposition> {
    let basis = build_basis(spec, set.degree_cap())?;
    if basis.order() != set.coord_cap() {
        return Err(Error::Precondition(format!(
            "set exponent cap {} does not match basis order {}",
            set.coord_cap(),
            basis.order()
        )));
    }
    let sigma = sigma_exact(spec, set)?;
    let k = basis.order();
    let e: Vec<Vec<f64>> = (0..=k)
        .map(|a| (0..=k).map(|b| basis.x_power_t(a, b)).collect())
        .collect();
    let idx = set.indices();
    let diag_root: Vec<f64> = idx
        .iter()
        .map(|b| b.exponents().iter().map(|&bi| e[bi as usize][bi as usize]).product())
        .collect();
    let v = DMatrix::from_fn(set.len(), set.len(), |i, j| {
        let num: f64 = idx[i]
            .exponents()
            .iter()
            .zip(idx[j].exponents())
            .map(|(&a, &b)| e[a as usize][b as usize])
            .product();
        num / diag_root[j]
    });
    let ddiag = diag_root.iter().map(|r| r * r).collect();
    Ok(SigmaDecomposition {
        set: set.clone(),
        sigma,
        v,
        ddiag,
        bounds: bounds_from_basis(&basis, set.degree_cap(), set.dim()),
    })
}

/// Rank of the `|support|^d × |𝒞|` matrix of monomials evaluated at every support
/// point, computed in exact rational arithmetic.
pub fn evaluation_rank_exact(spec: &MeasureSpec, set: &MultiplicitiesSet, budget: usize) -> Result<usize> {
    let d = set.dim();
    let (vals, weights, total) = enumerate_points(spec, d, budget)?;
    let q: Vec<BigRational> = vals
        .iter()
        .map(|v| BigRational::from_f64(*v).ok_or_else(|| Error::InvalidMeasure(format!("atom {v} is not finite"))))
        .collect::<Result<_>>()?;
    let s = vals.len();
    let mut rows: Vec<Vec<BigRational>> = Vec::with_capacity(total);
    let mut x = vec![0.0; d];
    for idx in 0..total {
        point(idx, &vals, &weights, d, &mut x);
        let mut digits = Vec::with_capacity(d);
        let mut rem = idx;
        for _ in 0..d {
            digits.push(rem % s);
            rem /= s;
        }
        rows.push(
            set.indices()
                .iter()
                .map(|a| {
                    a.exponents()
                        .iter()
                        .zip(&digits)
                        .fold(BigRational::from_integer(BigInt::from(1)), |acc, (e, k)| {
                            acc * q[*k].pow(*e as i32)
                        })
                })
                .collect(),
        );
    }
    Ok(rational_rank(rows))
}

/// Rank by Gaussian elimination over the rationals.
pub fn rational_rank(mut m: Vec<Vec<BigRational>>) -> usize {
    let rows = m.len();
    let cols = m.first().map_or(0, |r| r.len());
    let mut rank = 0;
    for col in 0..cols {
        let Some(piv) = (rank..rows).find(|&r| !m[r][col].is_zero()) else {
            continue;
        };
        m.swap(rank, piv);
        for r in rank + 1..rows {
            if m[r][col].is_zero() {
                continue;
            }
            let factor = &m[r][col] / &m[rank][col];
            let (top, bottom) = m.split_at_mut(r);
            for (dst, src) in bottom[0][col..cols].iter_mut().zip(&top[rank][col..cols]) {
                *dst -= &factor * src;
            }
        }
        rank += 1;
        if rank == rows {
            break;
        }
    }
    rank
}

/// `E[Π_{m<l} (X_m − X_l)²] / (n+1)!` over `n+1` independent copies; equals `D_n`.
pub fn heine_determinant(spec: &MeasureSpec, n: usize) -> Result<f64> {
    let copies = n + 1;
    let e = expect_enumerated(
        spec,
        copies,
        DEFAULT_ENUMERATION_BUDGET,
        0.0,
        |x, w, acc| {
            let mut prod = 1.0;
            for m in 0..copies {
                for l in m + 1..copies {
                    prod *= (x[m] - x[l]).powi(2);
                }
            }
            *acc += w * prod;
        },
        |a, b| a + b,
    )?;
    let fact: f64 = (1..=copies).map(|i| i as f64).product();
    Ok(e / fact)
}

/// Coefficients `q` with `E[X_α (f(X) − Σ q_β X_β)] = 0` for every `α ∈ 𝒞`,
/// computed exactly by enumeration for a discrete measure.
pub fn orthogonal_projection(
    spec: &MeasureSpec,
    set: &MultiplicitiesSet,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> Result<Vec<f64>> {
    let p = set.len();
    let rhs = expect_enumerated(
        spec,
        set.dim(),
        DEFAULT_ENUMERATION_BUDGET,
        vec![0.0; p],
        |x, w, acc| {
            let fx = f(x);
            let feats = set.featurize(x).expect("dimension checked");
            for (a, v) in acc.iter_mut().zip(feats.values()) {
                *a += w * v * fx;
            }
        },
        |mut a, b| {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            a
        },
    )?;
    let sigma = sigma_exact(spec, set)?;
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::Precondition("covariance is not positive definite".into()))?;
    Ok(chol.solve(&nalgebra::DVector::from_vec(rhs)).as_slice().to_vec())
}

/// `max |x|` over entries, for tolerance scaling in callers.
pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::SupportSize;
    use crate::tensorize::GradedOrder;

    fn tri() -> MeasureSpec {
        MeasureSpec::discrete_uniform(vec![-1.0, 0.0, 1.0]).unwrap()
    }

    fn w2() -> MeasureSpec {
        MeasureSpec::discrete_weighted(vec![-1.0, 1.0], vec![0.3, 0.7]).unwrap()
    }

    fn measures() -> Vec<MeasureSpec> {
        vec![MeasureSpec::rademacher(), tri(), w2()]
    }

    fn set_for(spec: &MeasureSpec, d: usize, k: usize, order: GradedOrder) -> MultiplicitiesSet {
        MultiplicitiesSet::build(d, k, spec.support_cardinality(), order).unwrap()
    }

    /// `E[g(X)]` for a univariate discrete measure, straight from the atoms.
    fn expect1(spec: &MeasureSpec, g: impl Fn(f64) -> f64) -> f64 {
        let (v, w) = spec.atoms().unwrap();
        v.iter().zip(&w).map(|(x, p)| p * g(*x)).sum()
    }

    #[test]
    fn rademacher_basis() {
        let b = build_basis(&MeasureSpec::rademacher(), 3).unwrap();
        assert_eq!(b.order(), 1);
        assert_eq!(b.hankel_all(), &[1.0, 1.0]);
        assert_eq!(b.poly(0), &[1.0]);
        assert_eq!(b.poly(1), &[0.0, 1.0]);
    }

    #[test]
    fn uniform_basis() {
        let b = build_basis(&MeasureSpec::standard_uniform(), 2).unwrap();
        assert!((b.hankel(1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((b.poly(1)[1] - 3f64.sqrt()).abs() < 1e-12);
        assert!((b.x_power_t(1, 1) - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        assert!((b.x_power_t(1, 1) - (b.hankel(1) / b.hankel(0)).sqrt()).abs() < 1e-12);
        // Legendre: T_2 = √5 (3x² − 1)/2
        let want = [-5f64.sqrt() / 2.0, 0.0, 1.5 * 5f64.sqrt()];
        for (a, b) in b.poly(2).iter().zip(want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn univariate_identities_by_enumeration() {
        for spec in measures() {
            let b = build_basis(&spec, 4).unwrap();
            let k = b.order();
            assert_eq!(b.hankel(0), 1.0);
            for i in 0..=k {
                assert!(b.hankel(i as isize) > 0.0);
                for j in 0..=k {
                    let g = expect1(&spec, |x| b.eval(i, x) * b.eval(j, x));
                    assert!((g - f64::from(u8::from(i == j))).abs() < 1e-10);
                    let m = expect1(&spec, |x| x.powi(i as i32) * b.eval(j, x));
                    if i < j {
                        assert!(m.abs() < 1e-10);
                    }
                    if i == j {
                        let want = (b.hankel(i as isize) / b.hankel(i as isize - 1)).sqrt();
                        assert!((m - want).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn hankel_positive_for_uniform() {
        let b = build_basis(&MeasureSpec::standard_uniform(), 6).unwrap();
        assert!(b.hankel_all().iter().all(|d| *d > 0.0));
    }

    #[test]
    fn multivariate_examples() {
        let b = build_basis(&MeasureSpec::rademacher(), 1).unwrap();
        let zero = MultiIndex::zero(2);
        assert_eq!(b.eval_multi(&zero, &[0.3, -0.2]).unwrap(), 1.0);
        let one = MultiIndex::new(vec![1, 1]);
        assert_eq!(multivariate_t(&b, &one).unwrap()(&[-1.0, 1.0]), -1.0);
        assert!(b.eval_multi(&MultiIndex::new(vec![2, 0]), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn multivariate_orthonormal_on_cube() {
        let spec = MeasureSpec::rademacher();
        let b = build_basis(&spec, 2).unwrap();
        let set = set_for(&spec, 2, 2, GradedOrder::GradedAscending);
        let p = set.len();
        let mut g = DMatrix::<f64>::zeros(p, p);
        for x in [[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]] {
            for (i, a) in set.indices().iter().enumerate() {
                for (j, c) in set.indices().iter().enumerate() {
                    g[(i, j)] += 0.25 * b.eval_multi(a, &x).unwrap() * b.eval_multi(c, &x).unwrap();
                }
            }
        }
        assert!((g - DMatrix::identity(p, p)).amax() < 1e-12);
    }

    #[test]
    fn sigma_examples() {
        let spec = MeasureSpec::rademacher();
        let set = set_for(&spec, 2, 1, GradedOrder::GradedAscending);
        let s = sigma_exact(&spec, &set).unwrap();
        assert!((s - DMatrix::identity(3, 3)).amax() < 1e-15);

        let u = MeasureSpec::standard_uniform();
        let set = set_for(&u, 1, 2, GradedOrder::GradedAscending);
        let s = sigma_exact(&u, &set).unwrap();
        let want = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 1.0 / 3.0, 0.0, 1.0 / 3.0, 0.0, 1.0 / 3.0, 0.0, 0.2]);
        assert!((s - want).amax() < 1e-15);
    }

    #[test]
    fn enumeration_matches_moment_products() {
        for spec in measures() {
            let set = set_for(&spec, 3, 3, GradedOrder::GradedDescending);
            let a = sigma_enumerated(&spec, &set, 1000).unwrap();
            let b = sigma_from_moments(&spec, &set);
            assert!((a - b).amax() < 1e-12);
            let z = set.zero_position();
            assert!((sigma_exact(&spec, &set).unwrap()[(z, z)] - 1.0).abs() < 1e-15);
        }
        let set = set_for(&MeasureSpec::rademacher(), 21, 1, GradedOrder::GradedAscending);
        assert!(matches!(
            sigma_exact(&MeasureSpec::rademacher(), &set),
            Err(Error::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn decomposition_examples() {
        let spec = MeasureSpec::rademacher();
        let dec = decompose(&spec, &set_for(&spec, 2, 1, GradedOrder::GradedDescending)).unwrap();
        assert!((&dec.v - DMatrix::identity(3, 3)).amax() < 1e-15);
        assert!(dec.ddiag.iter().all(|d| (d - 1.0).abs() < 1e-15));

        let u = MeasureSpec::standard_uniform();
        let dec = decompose(&u, &set_for(&u, 1, 2, GradedOrder::GradedDescending)).unwrap();
        assert!(dec.reconstruction_error() < 1e-12);
        // order (x², x, 1): V[x², 1] = E[X² T_0] / E[T_0] = 1/3
        assert!((dec.v[(0, 2)] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn decomposition_structure() {
        let mut specs = measures();
        specs.push(MeasureSpec::standard_uniform());
        for spec in &specs {
            for d in 1..=3 {
                for k in 0..=3 {
                    let set = set_for(spec, d, k, GradedOrder::GradedDescending);
                    let dec = decompose(spec, &set).unwrap();
                    assert!(dec.reconstruction_error() <= 1e-9);
                    assert!((dec.det_v() - 1.0).abs() <= 1e-9);
                    assert!(dec.lower_triangle_max() <= 1e-12);
                    let basis = build_basis(spec, k).unwrap();
                    for (a, dd) in set.indices().iter().zip(&dec.ddiag) {
                        let prod: f64 = a
                            .exponents()
                            .iter()
                            .filter(|e| **e > 0)
                            .map(|&e| basis.hankel(e as isize) / basis.hankel(e as isize - 1))
                            .product();
                        assert!((dd - prod).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn mixed_moment_vanishing_and_bounds() {
        for spec in measures() {
            let k = 3;
            let basis = build_basis(&spec, k).unwrap();
            let set = set_for(&spec, 2, k, GradedOrder::GradedDescending);
            let bounds = bounds_from_basis(&basis, k, 2);
            let e = |a: &MultiIndex, b: &MultiIndex| -> f64 {
                a.exponents()
                    .iter()
                    .zip(b.exponents())
                    .map(|(x, y)| basis.x_power_t(*x as usize, *y as usize))
                    .product()
            };
            let c2w = basis.moments()[2 * basis.order()];
            let mut min_diag = f64::INFINITY;
            for a in set.indices() {
                min_diag = min_diag.min(e(a, a));
                for b in set.indices() {
                    let v = e(a, b);
                    if a.exponents().iter().zip(b.exponents()).any(|(x, y)| x < y) {
                        assert!(v.abs() < 1e-12);
                    }
                    assert!(v * v <= c2w.powi(k as i32).max(1.0) + 1e-12);
                }
            }
            assert!(min_diag >= bounds.c - 1e-12);
        }
    }

    #[test]
    fn bound_constants() {
        let b = eigen_bounds(&MeasureSpec::rademacher(), 1, 5).unwrap();
        assert_eq!(b.c, 1.0);
        assert!((b.lambda_min_lb - 1.0 / 6.0).abs() < 1e-15);
        for spec in measures() {
            for k in 0..=4 {
                let b = eigen_bounds(&spec, k, 4).unwrap();
                assert!(b.big_c >= 1.0);
                assert!(b.big_c >= b.f.max(1.0 / b.c) - 1e-12);
            }
        }
    }

    #[test]
    fn sandwich_for_three_point_measure() {
        let spec = tri();
        let dec = decompose(&spec, &set_for(&spec, 3, 2, GradedOrder::GradedDescending)).unwrap();
        let s = dec.spectrum();
        assert!(s.lambda_min >= dec.bounds.lambda_min_lb);
        assert!(s.lambda_max <= dec.bounds.lambda_max_ub);
    }

    #[test]
    fn evaluation_matrix_has_full_column_rank() {
        for spec in measures() {
            for d in 1..=3 {
                let set = MultiplicitiesSet::build(d, 2 * d, spec.support_cardinality(), GradedOrder::GradedAscending)
                    .unwrap();
                assert_eq!(evaluation_rank_exact(&spec, &set, 10_000).unwrap(), set.len());
            }
        }
        // a set that ignores the support cap is rank deficient: x² = 1 on {−1, 1}
        let naive = MultiplicitiesSet::build(1, 2, SupportSize::Infinite, GradedOrder::GradedAscending).unwrap();
        assert_eq!(
            evaluation_rank_exact(&MeasureSpec::rademacher(), &naive, 100).unwrap(),
            2
        );
    }

    #[test]
    fn heine_identity() {
        for spec in measures() {
            let b = build_basis(&spec, 4).unwrap();
            for n in 0..=b.order() {
                let h = heine_determinant(&spec, n).unwrap();
                assert!((h - b.hankel(n as isize)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ordered_pair_product_differs() {
        // squaring over ordered pairs counts each factor twice: E[(X₀−X₁)⁴]/2 ≠ D_1
        let spec = tri();
        let (v, w) = spec.atoms().unwrap();
        let mut e = 0.0;
        for (x, p) in v.iter().zip(&w) {
            for (y, q) in v.iter().zip(&w) {
                e += p * q * (x - y).powi(4);
            }
        }
        let d1 = build_basis(&spec, 2).unwrap().hankel(1);
        assert!((d1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((e / 2.0 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn projection_is_orthogonal_and_optimal() {
        let spec = tri();
        let set = set_for(&spec, 2, 2, GradedOrder::GradedAscending);
        let f = |x: &[f64]| (x[0] - 0.3 * x[1]).max(0.0);
        let q = orthogonal_projection(&spec, &set, &f).unwrap();
        let (vals, w) = spec.atoms().unwrap();
        let pts: Vec<([f64; 2], f64)> = vals
            .iter()
            .zip(&w)
            .flat_map(|(a, p)| vals.iter().zip(&w).map(move |(b, r)| ([*a, *b], p * r)))
            .collect();
        let poly = |x: &[f64], c: &[f64]| -> f64 {
            set.featurize(x)
                .unwrap()
                .values()
                .iter()
                .zip(c)
                .map(|(a, b)| a * b)
                .sum()
        };
        for (j, a) in set.indices().iter().enumerate() {
            let r: f64 = pts.iter().map(|(x, p)| p * a.eval(x) * (f(x) - poly(x, &q))).sum();
            assert!(r.abs() < 1e-12, "index {j}");
        }
        let err = |c: &[f64]| pts.iter().map(|(x, p)| p * (f(x) - poly(x, c)).powi(2)).sum::<f64>();
        let best = err(&q);
        let mut other = q.clone();
        other[1] += 0.05;
        assert!(err(&other) >= best);
    }

    #[test]
    fn constant_measure_is_rejected() {
        assert!(MeasureSpec::discrete_uniform(vec![0.5]).is_err());
    }
}
