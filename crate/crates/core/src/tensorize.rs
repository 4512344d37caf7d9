//! Multiplicities sets and monomial feature maps.
//!
//! A multiplicities set `𝒞` is the list of exponent vectors `α ∈ ℤ₊^d` whose
//! monomials `x^α = Π xᵢ^{αᵢ}` form the regression features. Exponents are capped
//! per coordinate by `ω = min(|support| − 1, M)` (higher powers are linearly
//! redundant on a finite support) and in total degree by `M′ = min(M, d·ω)`.
//!
//! Ordering is canonical because fitted coefficients are serialized against it:
//! indices are grouped by total degree, and within one degree they appear in
//! lexicographically descending exponent order, e.g. for `d = 2`:
//! `(2,0), (1,1), (0,2)`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::distributions::SupportSize;
use crate::error::{Error, Result};

/// Default cap on `|𝒞|`.
pub const DEFAULT_FEATURE_BUDGET: usize = 5_000_000;

/// Per-coordinate exponent cap `min(|S| − 1, t)`.
pub fn omega(support: SupportSize, t: usize) -> usize {
    match support {
        SupportSize::Finite(n) => n.saturating_sub(1).min(t),
        SupportSize::Infinite => t,
    }
}

/// `Σ_{i=0}^{m} C(d+i−1, i)`, the number of monomials of degree at most `m` in `d`
/// variables. Saturates at `u128::MAX`.
pub fn monomial_count(d: usize, m: usize) -> u128 {
    let mut total: u128 = 0;
    let mut term: u128 = 1; // C(d-1, 0)
    for i in 0..=m {
        if i > 0 {
            // C(d+i-1, i) = C(d+i-2, i-1) * (d+i-1) / i
            term = match term.checked_mul((d + i - 1) as u128) {
                Some(v) => v / i as u128,
                None => return u128::MAX,
            };
        }
        total = total.saturating_add(term);
    }
    total
}

/// Number of `α ∈ {0..=cap}^d` with `|α| = t`.
pub fn capped_composition_count(d: usize, cap: usize, t: usize) -> u128 {
    let mut ways = vec![0u128; t + 1];
    ways[0] = 1;
    for _ in 0..d {
        let mut next = vec![0u128; t + 1];
        for (s, &w) in ways.iter().enumerate() {
            if w == 0 {
                continue;
            }
            for e in 0..=cap.min(t - s) {
                next[s + e] = next[s + e].saturating_add(w);
            }
        }
        ways = next;
    }
    ways[t]
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<u32>", into = "Vec<u32>")]
pub struct MultiIndex {
    exponents: Vec<u32>,
    degree: u32,
}

impl MultiIndex {
    pub fn new(exponents: Vec<u32>) -> Self {
        let degree = exponents.iter().sum();
        Self { exponents, degree }
    }

    pub fn zero(d: usize) -> Self {
        Self::new(vec![0; d])
    }

    pub fn exponents(&self) -> &[u32] {
        &self.exponents
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_zero(&self) -> bool {
        self.degree == 0
    }

    /// Componentwise sum `α + β`.
    pub fn add(&self, other: &MultiIndex) -> MultiIndex {
        MultiIndex::new(
            self.exponents
                .iter()
                .zip(&other.exponents)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    /// `Π xᵢ^{αᵢ}` with `0⁰ = 1`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.exponents
            .iter()
            .zip(x)
            .filter(|(e, _)| **e > 0)
            .map(|(e, v)| v.powi(*e as i32))
            .product()
    }
}

impl From<Vec<u32>> for MultiIndex {
    fn from(v: Vec<u32>) -> Self {
        MultiIndex::new(v)
    }
}

impl From<MultiIndex> for Vec<u32> {
    fn from(m: MultiIndex) -> Self {
        m.exponents
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradedOrder {
    /// Highest total degree first, down to the constant.
    GradedDescending,
    /// Constant first, up to the highest degree.
    GradedAscending,
}

/// The `(d, M)`-multiplicities set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MultiplicitiesWire", into = "MultiplicitiesWire")]
pub struct MultiplicitiesSet {
    dim: usize,
    degree_cap: usize,
    coord_cap: usize,
    effective_degree: usize,
    ordering: GradedOrder,
    indices: Vec<MultiIndex>,
    lookup: HashMap<Vec<u32>, usize>,
}

impl PartialEq for MultiplicitiesSet {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.degree_cap == other.degree_cap
            && self.coord_cap == other.coord_cap
            && self.ordering == other.ordering
            && self.indices == other.indices
    }
}

/// Enumerates `{α : |α| = t, 0 ≤ αᵢ ≤ cap}` in lexicographically descending order.
fn push_fixed_degree(d: usize, cap: usize, t: usize, out: &mut Vec<MultiIndex>) {
    fn rec(pos: usize, remaining: usize, cap: usize, cur: &mut Vec<u32>, out: &mut Vec<MultiIndex>) {
        let d = cur.len();
        if pos == d - 1 {
            if remaining <= cap {
                cur[pos] = remaining as u32;
                out.push(MultiIndex::new(cur.clone()));
            }
            return;
        }
        let slots_after = (d - pos - 1) * cap;
        let hi = remaining.min(cap);
        let lo = remaining.saturating_sub(slots_after);
        if lo > hi {
            return;
        }
        for e in (lo..=hi).rev() {
            cur[pos] = e as u32;
            rec(pos + 1, remaining - e, cap, cur, out);
        }
        cur[pos] = 0;
    }
    let mut cur = vec![0u32; d];
    rec(0, t, cap, &mut cur, out);
}

impl MultiplicitiesSet {
    /// Builds the set for dimension `d`, degree `m` and support size, with the
    /// default feature budget.
    pub fn build(d: usize, m: usize, support: SupportSize, ordering: GradedOrder) -> Result<Self> {
        Self::build_with_budget(d, m, support, ordering, DEFAULT_FEATURE_BUDGET)
    }

    pub fn build_with_budget(
        d: usize,
        m: usize,
        support: SupportSize,
        ordering: GradedOrder,
        budget: usize,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::Precondition("dimension must be at least 1".into()));
        }
        let coord_cap = omega(support, m);
        let effective_degree = m.min(d.saturating_mul(coord_cap));
        let mut total: u128 = 0;
        for t in 0..=effective_degree {
            total = total.saturating_add(capped_composition_count(d, coord_cap, t));
        }
        if total > budget as u128 {
            return Err(Error::BudgetExceeded {
                what: "multiplicities set",
                requested: total,
                cap: budget as u128,
            });
        }
        let mut indices = Vec::with_capacity(total as usize);
        let degrees: Vec<usize> = match ordering {
            GradedOrder::GradedAscending => (0..=effective_degree).collect(),
            GradedOrder::GradedDescending => (0..=effective_degree).rev().collect(),
        };
        for t in degrees {
            push_fixed_degree(d, coord_cap, t, &mut indices);
        }
        Ok(Self::assemble(d, m, coord_cap, effective_degree, ordering, indices))
    }

    fn assemble(
        dim: usize,
        degree_cap: usize,
        coord_cap: usize,
        effective_degree: usize,
        ordering: GradedOrder,
        indices: Vec<MultiIndex>,
    ) -> Self {
        let lookup = indices
            .iter()
            .enumerate()
            .map(|(i, a)| (a.exponents.clone(), i))
            .collect();
        Self {
            dim,
            degree_cap,
            coord_cap,
            effective_degree,
            ordering,
            indices,
            lookup,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The requested degree `M`.
    pub fn degree_cap(&self) -> usize {
        self.degree_cap
    }

    /// Per-coordinate cap `ω`.
    pub fn coord_cap(&self) -> usize {
        self.coord_cap
    }

    /// `M′ = min(M, d·ω)`.
    pub fn effective_degree(&self) -> usize {
        self.effective_degree
    }

    pub fn ordering(&self) -> GradedOrder {
        self.ordering
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn get(&self, i: usize) -> &MultiIndex {
        &self.indices[i]
    }

    pub fn position(&self, exponents: &[u32]) -> Option<usize> {
        self.lookup.get(exponents).copied()
    }

    pub fn zero_position(&self) -> usize {
        self.position(&vec![0; self.dim]).expect("zero index is always present")
    }

    /// Same indices, other graded ordering.
    pub fn reordered(&self, ordering: GradedOrder) -> Self {
        if ordering == self.ordering {
            return self.clone();
        }
        let mut by_degree: Vec<Vec<MultiIndex>> = vec![Vec::new(); self.effective_degree + 1];
        for a in &self.indices {
            by_degree[a.degree as usize].push(a.clone());
        }
        let groups: Box<dyn Iterator<Item = Vec<MultiIndex>>> = match ordering {
            GradedOrder::GradedAscending => Box::new(by_degree.into_iter()),
            GradedOrder::GradedDescending => Box::new(by_degree.into_iter().rev()),
        };
        let indices = groups.flatten().collect();
        Self::assemble(
            self.dim,
            self.degree_cap,
            self.coord_cap,
            self.effective_degree,
            ordering,
            indices,
        )
    }

    /// Number of indices of exactly total degree `t`.
    pub fn layer_size(&self, t: usize) -> usize {
        self.indices.iter().filter(|a| a.degree as usize == t).count()
    }

    pub fn featurize(&self, x: &[f64]) -> Result<FeatureVector> {
        let mut values = vec![0.0; self.len()];
        self.featurize_into(x, &mut values)?;
        Ok(FeatureVector { values })
    }

    /// Writes `x^α` for every `α` into `out`, in set order.
    pub fn featurize_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if out.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: out.len(),
            });
        }
        let stride = self.coord_cap + 1;
        let mut powers = vec![1.0; self.dim * stride];
        for (i, xi) in x.iter().enumerate() {
            for p in 1..stride {
                powers[i * stride + p] = powers[i * stride + p - 1] * xi;
            }
        }
        for (slot, alpha) in out.iter_mut().zip(&self.indices) {
            let mut v = 1.0;
            for (i, &e) in alpha.exponents.iter().enumerate() {
                if e > 0 {
                    v *= powers[i * stride + e as usize];
                }
            }
            *slot = v;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct MultiplicitiesWire {
    d: usize,
    degree: usize,
    coord_cap: usize,
    ordering: GradedOrder,
    indices: Vec<MultiIndex>,
}

impl From<MultiplicitiesSet> for MultiplicitiesWire {
    fn from(s: MultiplicitiesSet) -> Self {
        Self {
            d: s.dim,
            degree: s.degree_cap,
            coord_cap: s.coord_cap,
            ordering: s.ordering,
            indices: s.indices,
        }
    }
}

impl TryFrom<MultiplicitiesWire> for MultiplicitiesSet {
    type Error = Error;

    fn try_from(w: MultiplicitiesWire) -> Result<Self> {
        let effective_degree = w.degree.min(w.d.saturating_mul(w.coord_cap));
        let mut zeros = 0;
        for a in &w.indices {
            if a.dim() != w.d {
                return Err(Error::Config(format!("index {a:?} has wrong dimension")));
            }
            if a.exponents.iter().any(|&e| e as usize > w.coord_cap) || a.degree as usize > effective_degree {
                return Err(Error::Config(format!("index {a:?} violates the set caps")));
            }
            zeros += usize::from(a.is_zero());
        }
        if zeros != 1 {
            return Err(Error::Config("set must contain the zero index exactly once".into()));
        }
        let set = Self::assemble(w.d, w.degree, w.coord_cap, effective_degree, w.ordering, w.indices);
        if set.lookup.len() != set.indices.len() {
            return Err(Error::Config("duplicate multi-index".into()));
        }
        Ok(set)
    }
}

/// Feature values aligned with a set's ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One column of the convolutional degree-2 feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvFeature {
    Bias,
    Linear(usize),
    Pair(usize, usize),
}

/// Degree-2 features restricted to nearby pixel pairs.
///
/// Columns are `[1] ++ [x_p for p row-major] ++ [x_p·x_q for p row-major, then
/// offset (Δrow, Δcol) row-major in [-r, r]²]`. Ordered pairs are kept, so
/// `x_p x_q` and `x_q x_p` are separate (identical) columns for `p ≠ q`; with
/// `r = 2` on a 28×28 image this gives 784 + 134² = 18,740 non-bias features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "ConvShape", into = "ConvShape")]
pub struct ConvFeatureMap {
    height: usize,
    width: usize,
    radius: usize,
    pairs: Vec<(u32, u32)>,
}

#[derive(Serialize, Deserialize)]
struct ConvShape {
    height: usize,
    width: usize,
    radius: usize,
}

impl From<ConvShape> for ConvFeatureMap {
    fn from(s: ConvShape) -> Self {
        ConvFeatureMap::new(s.height, s.width, s.radius)
    }
}

impl From<ConvFeatureMap> for ConvShape {
    fn from(m: ConvFeatureMap) -> Self {
        Self {
            height: m.height,
            width: m.width,
            radius: m.radius,
        }
    }
}

impl ConvFeatureMap {
    pub fn new(height: usize, width: usize, radius: usize) -> Self {
        let mut pairs = Vec::new();
        let r = radius as isize;
        for row in 0..height as isize {
            for col in 0..width as isize {
                let p = (row * width as isize + col) as u32;
                for dr in -r..=r {
                    for dc in -r..=r {
                        let (qr, qc) = (row + dr, col + dc);
                        if qr >= 0 && qc >= 0 && qr < height as isize && qc < width as isize {
                            pairs.push((p, (qr * width as isize + qc) as u32));
                        }
                    }
                }
            }
        }
        Self {
            height,
            width,
            radius,
            pairs,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Total columns including the bias.
    pub fn len(&self) -> usize {
        1 + self.pixels() + self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn non_bias_len(&self) -> usize {
        self.len() - 1
    }

    pub fn feature(&self, column: usize) -> ConvFeature {
        let px = self.pixels();
        match column {
            0 => ConvFeature::Bias,
            c if c <= px => ConvFeature::Linear(c - 1),
            c => {
                let (p, q) = self.pairs[c - 1 - px];
                ConvFeature::Pair(p as usize, q as usize)
            }
        }
    }

    pub fn featurize(&self, image: &[f64]) -> Result<FeatureVector> {
        let mut values = vec![0.0; self.len()];
        self.featurize_into(image, &mut values)?;
        Ok(FeatureVector { values })
    }

    pub fn featurize_into(&self, image: &[f64], out: &mut [f64]) -> Result<()> {
        if image.len() != self.pixels() {
            return Err(Error::DimensionMismatch {
                expected: self.pixels(),
                got: image.len(),
            });
        }
        if out.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: out.len(),
            });
        }
        out[0] = 1.0;
        out[1..=image.len()].copy_from_slice(image);
        let base = 1 + image.len();
        for (slot, &(p, q)) in out[base..].iter_mut().zip(&self.pairs) {
            *slot = image[p as usize] * image[q as usize];
        }
        Ok(())
    }
}

/// Features of a single `height × width` image (row-major pixels) plus the index map.
pub fn conv_pair_features(
    image: &[f64],
    height: usize,
    width: usize,
    radius: usize,
) -> Result<(FeatureVector, ConvFeatureMap)> {
    let map = ConvFeatureMap::new(height, width, radius);
    let features = map.featurize(image)?;
    Ok((features, map))
}
