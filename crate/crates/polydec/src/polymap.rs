//! Polynomial vector maps and their decoupled form.
//!
//! A map `f: R^m → R^n` of total degree ≤ d is stored as a sparse set of
//! monomial terms (no constant terms; they are not identifiable in the
//! decoupled model). The module converts between this form, the graded
//! symmetric-tensor form, and the decoupled form `f(u) = W·g(Vᵀu)` with
//! `g_k(t) = c_{k,1}t + … + c_{k,d}t^d`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::{fu, Scalar};
use crate::tensor::DenseTensor;

/// One monomial term of one output polynomial.
#[derive(Debug, Clone, PartialEq)]
pub struct Term<T> {
    /// Output index (0-based).
    pub output: usize,
    /// Exponent of each input variable; length m, total degree ≥ 1.
    pub exponents: Vec<u32>,
    pub coefficient: T,
}

impl<T> Term<T> {
    pub fn new(output: usize, exponents: &[u32], coefficient: T) -> Self {
        Self {
            output,
            exponents: exponents.to_vec(),
            coefficient,
        }
    }
}

/// Sparse multivariate polynomial vector map without constant terms.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyMap<T> {
    m: usize,
    n: usize,
    d: usize,
    terms: BTreeMap<(usize, Vec<u32>), T>,
}

impl<T: Scalar> PolyMap<T> {
    /// The zero map.
    pub fn zero(m: usize, n: usize, d: usize) -> Result<Self> {
        Self::from_terms(m, n, d, std::iter::empty())
    }

    /// Build from a term list. Duplicate monomials are summed; terms that
    /// cancel to zero are dropped. `d` may exceed the realized degree.
    pub fn from_terms(
        m: usize,
        n: usize,
        d: usize,
        terms: impl IntoIterator<Item = Term<T>>,
    ) -> Result<Self> {
        if m == 0 || n == 0 || d == 0 {
            return Err(Error::DimensionMismatch(format!(
                "m, n, d must be positive (got {}, {}, {})",
                m, n, d
            )));
        }
        let mut map: BTreeMap<(usize, Vec<u32>), T> = BTreeMap::new();
        for term in terms {
            if term.output >= n {
                return Err(Error::IndexOutOfRange(format!(
                    "output index {} with n = {}",
                    term.output, n
                )));
            }
            if term.exponents.len() != m {
                return Err(Error::DimensionMismatch(format!(
                    "exponent vector of length {} with m = {}",
                    term.exponents.len(),
                    m
                )));
            }
            let total: u32 = term.exponents.iter().sum();
            if total == 0 {
                return Err(Error::ConstantTerm);
            }
            if total as usize > d {
                return Err(Error::DegreeOverflow {
                    found: total as usize,
                    bound: d,
                });
            }
            if !term.coefficient.is_finite() {
                return Err(Error::NonFiniteCoefficient {
                    output: term.output,
                });
            }
            let entry = map
                .entry((term.output, term.exponents))
                .or_insert_with(T::zero);
            *entry += term.coefficient;
        }
        map.retain(|_, c| *c != T::zero());
        Ok(Self {
            m,
            n,
            d,
            terms: map,
        })
    }

    pub fn num_inputs(&self) -> usize {
        self.m
    }

    pub fn num_outputs(&self) -> usize {
        self.n
    }

    /// Declared degree bound (≥ realized degree).
    pub fn degree_bound(&self) -> usize {
        self.d
    }

    /// Largest total degree with a nonzero coefficient (0 for the zero map).
    pub fn realized_degree(&self) -> usize {
        self.terms
            .keys()
            .map(|(_, a)| a.iter().sum::<u32>() as usize)
            .max()
            .unwrap_or(0)
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// Coefficient of `u^alpha` in output `i` (zero if absent).
    pub fn coefficient(&self, output: usize, alpha: &[u32]) -> T {
        self.terms
            .get(&(output, alpha.to_vec()))
            .copied()
            .unwrap_or_else(T::zero)
    }

    /// Iterate stored terms in a deterministic order.
    pub fn terms(&self) -> impl Iterator<Item = (usize, &[u32], T)> + '_ {
        self.terms.iter().map(|((i, a), &c)| (*i, a.as_slice(), c))
    }

    /// Evaluate all outputs at `u`.
    pub fn eval(&self, u: &DVector<T>) -> Result<DVector<T>> {
        if u.len() != self.m {
            return Err(Error::DimensionMismatch(format!(
                "point of length {} with m = {}",
                u.len(),
                self.m
            )));
        }
        let mut out = DVector::zeros(self.n);
        for ((i, alpha), &c) in &self.terms {
            let mut prod = c;
            for (j, &e) in alpha.iter().enumerate() {
                if e > 0 {
                    prod *= u[j].powi(e as i32);
                }
            }
            out[*i] += prod;
        }
        Ok(out)
    }

    /// Jacobian matrix at `u`, by symbolic differentiation of the term map.
    pub fn jacobian(&self, u: &DVector<T>) -> Result<DMatrix<T>> {
        if u.len() != self.m {
            return Err(Error::DimensionMismatch(format!(
                "point of length {} with m = {}",
                u.len(),
                self.m
            )));
        }
        let mut jac = DMatrix::zeros(self.n, self.m);
        for ((i, alpha), &c) in &self.terms {
            for j in 0..self.m {
                let e = alpha[j];
                if e == 0 {
                    continue;
                }
                let mut prod = c * fu::<T>(e as usize);
                for (l, &el) in alpha.iter().enumerate() {
                    let e_eff = if l == j { el - 1 } else { el };
                    if e_eff > 0 {
                        prod *= u[l].powi(e_eff as i32);
                    }
                }
                jac[(*i, j)] += prod;
            }
        }
        Ok(jac)
    }

    /// Graded symmetric-tensor form: one symmetric order-s tensor per output
    /// and degree, with entry `coeff(α) / multinomial(α)` at every index
    /// tuple whose multiset of indices is `α`.
    pub fn to_graded(&self) -> GradedSymmetric<T> {
        let mut blocks = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let mut per_degree = Vec::with_capacity(self.d);
            for s in 1..=self.d {
                let dims = vec![self.m; s];
                let block = DenseTensor::from_fn(&dims, |idx| {
                    let alpha = exponents_from_indices(self.m, idx);
                    let c = self.coefficient(i, &alpha);
                    if c == T::zero() {
                        T::zero()
                    } else {
                        c / fu::<T>(multinomial(&alpha) as usize)
                    }
                });
                per_degree.push(block);
            }
            blocks.push(per_degree);
        }
        GradedSymmetric {
            m: self.m,
            n: self.n,
            d: self.d,
            blocks,
        }
    }

    /// Rebuild the term map from a graded form. Inverse of [`Self::to_graded`].
    pub fn from_graded(g: &GradedSymmetric<T>) -> Result<Self> {
        let mut terms = Vec::new();
        for i in 0..g.n {
            for s in 1..=g.d {
                let block = g.block(i, s);
                check_symmetric(block, i, s)?;
                let m = g.m;
                let mut idx = vec![0usize; s];
                loop {
                    if idx.windows(2).all(|w| w[0] <= w[1]) {
                        let entry = block.get(&idx);
                        if entry != T::zero() {
                            let alpha = exponents_from_indices(m, &idx);
                            let count = fu::<T>(multinomial(&alpha) as usize);
                            terms.push(Term::new(i, &alpha, entry * count));
                        }
                    }
                    if !next_tuple(&mut idx, m) {
                        break;
                    }
                }
            }
        }
        Self::from_terms(g.m, g.n, g.d, terms)
    }

    /// Relative l2 distance between the coefficient vectors of two maps over
    /// the union of their monomials. Absolute when `self` is the zero map.
    pub fn coefficient_distance(&self, other: &Self) -> T {
        let mut diff = T::zero();
        let mut scale = T::zero();
        let keys: std::collections::BTreeSet<_> =
            self.terms.keys().chain(other.terms.keys()).collect();
        for key in keys {
            let a = self.terms.get(key).copied().unwrap_or_else(T::zero);
            let b = other.terms.get(key).copied().unwrap_or_else(T::zero);
            diff += (a - b) * (a - b);
            scale += a * a;
        }
        let diff = diff.sqrt();
        let scale = scale.sqrt();
        if scale > T::zero() {
            diff / scale
        } else {
            diff
        }
    }
}

/// Per-output, per-degree symmetric coefficient tensors of a polynomial map.
#[derive(Debug, Clone, PartialEq)]
pub struct GradedSymmetric<T> {
    m: usize,
    n: usize,
    d: usize,
    // blocks[i][s-1] has dims [m; s]
    blocks: Vec<Vec<DenseTensor<T>>>,
}

impl<T: Scalar> GradedSymmetric<T> {
    /// Build from explicit blocks; `blocks[i][s-1]` must be an order-s cube
    /// of dimension m and exactly symmetric.
    pub fn from_blocks(
        m: usize,
        n: usize,
        d: usize,
        blocks: Vec<Vec<DenseTensor<T>>>,
    ) -> Result<Self> {
        if blocks.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} outputs of blocks with n = {}",
                blocks.len(),
                n
            )));
        }
        for (i, per_degree) in blocks.iter().enumerate() {
            if per_degree.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "output {} has {} degree blocks with d = {}",
                    i,
                    per_degree.len(),
                    d
                )));
            }
            for (s0, block) in per_degree.iter().enumerate() {
                let expect = vec![m; s0 + 1];
                if block.dims() != expect.as_slice() {
                    return Err(Error::DimensionMismatch(format!(
                        "block (output {}, degree {}) has dims {:?}",
                        i,
                        s0 + 1,
                        block.dims()
                    )));
                }
                check_symmetric(block, i, s0 + 1)?;
            }
        }
        Ok(Self { m, n, d, blocks })
    }

    pub fn num_inputs(&self) -> usize {
        self.m
    }

    pub fn num_outputs(&self) -> usize {
        self.n
    }

    pub fn degree_bound(&self) -> usize {
        self.d
    }

    /// Degree-`s` block of output `i` (1 ≤ s ≤ d).
    pub fn block(&self, output: usize, s: usize) -> &DenseTensor<T> {
        &self.blocks[output][s - 1]
    }
}

/// Exact symmetry check: every entry must equal the entry at the sorted
/// index tuple.
fn check_symmetric<T: Scalar>(block: &DenseTensor<T>, output: usize, degree: usize) -> Result<()> {
    let dims = block.dims();
    if dims.len() < 2 {
        return Ok(());
    }
    let m = dims[0];
    let s = dims.len();
    let mut idx = vec![0usize; s];
    let mut max_dev = T::zero();
    loop {
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        if sorted != idx {
            let dev = (block.get(&idx) - block.get(&sorted)).abs();
            if dev > max_dev {
                max_dev = dev;
            }
        }
        if !next_tuple(&mut idx, m) {
            break;
        }
    }
    if max_dev > T::zero() {
        return Err(Error::AsymmetricBlock {
            output,
            degree,
            deviation: max_dev.to_f64().unwrap_or(f64::INFINITY),
        });
    }
    Ok(())
}

/// Decoupled model `f(u) = W·g(Vᵀu)` with branch polynomials
/// `g_k(t) = c_{k,1}t + … + c_{k,d}t^d` (row k of C).
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledModel<T> {
    w: DMatrix<T>,
    v: DMatrix<T>,
    c: DMatrix<T>,
}

impl<T: Scalar> DecoupledModel<T> {
    pub fn new(w: DMatrix<T>, v: DMatrix<T>, c: DMatrix<T>) -> Result<Self> {
        let r = w.ncols();
        if r == 0 {
            return Err(Error::ZeroRank);
        }
        if v.ncols() != r || c.nrows() != r {
            return Err(Error::DimensionMismatch(format!(
                "W has {} columns, V has {}, C has {} rows",
                r,
                v.ncols(),
                c.nrows()
            )));
        }
        if c.ncols() == 0 {
            return Err(Error::DimensionMismatch(
                "C must have at least one degree column".into(),
            ));
        }
        Ok(Self { w, v, c })
    }

    pub fn mixing(&self) -> &DMatrix<T> {
        &self.w
    }

    pub fn directions(&self) -> &DMatrix<T> {
        &self.v
    }

    pub fn coefficients(&self) -> &DMatrix<T> {
        &self.c
    }

    pub fn num_inputs(&self) -> usize {
        self.v.nrows()
    }

    pub fn num_outputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn num_branches(&self) -> usize {
        self.w.ncols()
    }

    pub fn degree_bound(&self) -> usize {
        self.c.ncols()
    }

    /// Branch polynomial value `g_k(t)`.
    pub fn g_value(&self, k: usize, t: T) -> T {
        // Horner on c_{k,d} … c_{k,1}, then one final multiply by t.
        let d = self.c.ncols();
        let mut acc = T::zero();
        for s in (0..d).rev() {
            acc = acc * t + self.c[(k, s)];
        }
        acc * t
    }

    /// Branch derivative `g'_k(t) = c_{k,1} + 2c_{k,2}t + … + d·c_{k,d}t^{d−1}`.
    pub fn g_derivative(&self, k: usize, t: T) -> T {
        let d = self.c.ncols();
        let mut acc = T::zero();
        for s in (0..d).rev() {
            acc = acc * t + self.c[(k, s)] * fu::<T>(s + 1);
        }
        acc
    }

    /// Evaluate `W·g(Vᵀu)`.
    pub fn eval(&self, u: &DVector<T>) -> Result<DVector<T>> {
        if u.len() != self.num_inputs() {
            return Err(Error::DimensionMismatch(format!(
                "point of length {} with m = {}",
                u.len(),
                self.num_inputs()
            )));
        }
        let x = self.v.transpose() * u;
        let g = DVector::from_fn(self.num_branches(), |k, _| self.g_value(k, x[k]));
        Ok(&self.w * g)
    }

    /// Jacobian `W·diag(g'_k(v_kᵀu))·Vᵀ`.
    pub fn jacobian(&self, u: &DVector<T>) -> Result<DMatrix<T>> {
        if u.len() != self.num_inputs() {
            return Err(Error::DimensionMismatch(format!(
                "point of length {} with m = {}",
                u.len(),
                self.num_inputs()
            )));
        }
        let x = self.v.transpose() * u;
        let mut scaled = self.w.clone();
        for k in 0..self.num_branches() {
            let gp = self.g_derivative(k, x[k]);
            for i in 0..self.num_outputs() {
                scaled[(i, k)] *= gp;
            }
        }
        Ok(scaled * self.v.transpose())
    }

    /// Expand `Σ_k w_k g_k(v_kᵀu)` symbolically into a [`PolyMap`].
    pub fn expand(&self) -> PolyMap<T> {
        let m = self.num_inputs();
        let n = self.num_outputs();
        let d = self.degree_bound();
        let mut coeffs: BTreeMap<(usize, Vec<u32>), T> = BTreeMap::new();
        for k in 0..self.num_branches() {
            for s in 1..=d {
                let c_ks = self.c[(k, s - 1)];
                if c_ks == T::zero() {
                    continue;
                }
                // (v_kᵀu)^s = Σ_{|α|=s} multinomial(α) · Π_j v_{jk}^{α_j} · u^α
                for_each_composition(m, s as u32, |alpha| {
                    let mut base = c_ks * fu::<T>(multinomial(alpha) as usize);
                    for (j, &e) in alpha.iter().enumerate() {
                        if e > 0 {
                            base *= self.v[(j, k)].powi(e as i32);
                        }
                    }
                    if base == T::zero() {
                        return;
                    }
                    for i in 0..n {
                        let add = self.w[(i, k)] * base;
                        if add != T::zero() {
                            *coeffs.entry((i, alpha.to_vec())).or_insert_with(T::zero) += add;
                        }
                    }
                });
            }
        }
        let terms = coeffs
            .into_iter()
            .map(|((i, alpha), c)| Term::new(i, &alpha, c));
        PolyMap::from_terms(m, n, d, terms).expect("expansion yields valid terms")
    }

    /// Rescale every branch so that `‖v_k‖ = 1` with the largest-magnitude
    /// entry positive, compensating in C (`c_{k,s} ← c_{k,s}·β^s`). Branches
    /// with a zero direction are left untouched. Idempotent; leaves the map
    /// unchanged at every point.
    pub fn normalize_directions(&self) -> Self {
        let mut v = self.v.clone();
        let mut c = self.c.clone();
        for k in 0..self.num_branches() {
            let col = v.column(k).into_owned();
            let norm = col.norm();
            if norm == T::zero() {
                continue;
            }
            let lead = dominant_index(&col);
            let sign = if col[lead] < T::zero() {
                -T::one()
            } else {
                T::one()
            };
            let beta = norm * sign;
            for j in 0..v.nrows() {
                v[(j, k)] /= beta;
            }
            let mut pow = beta;
            for s in 0..c.ncols() {
                c[(k, s)] *= pow;
                pow *= beta;
            }
        }
        Self {
            w: self.w.clone(),
            v,
            c,
        }
    }
}

/// Index of the entry with the largest magnitude (first on ties).
pub(crate) fn dominant_index<T: Scalar>(v: &DVector<T>) -> usize {
    let mut best = 0;
    let mut best_abs = T::zero();
    for i in 0..v.len() {
        let a = v[i].abs();
        if a > best_abs {
            best_abs = a;
            best = i;
        }
    }
    best
}

/// Parameter counts of the coupled and decoupled representations:
/// `n·(C(m+d,d) − 1)` coefficients against `r·(m + n + d)`.
pub fn report_compression(m: usize, n: usize, d: usize, r: usize) -> (u64, u64) {
    let coupled = n as u128 * (binomial(m as u128 + d as u128, d as u128) - 1);
    let decoupled = r as u128 * (m + n + d) as u128;
    (coupled as u64, decoupled as u64)
}

pub(crate) fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k.min(n));
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Number of distinct orderings of the index multiset of `alpha`:
/// `|α|! / (α₁!·…·α_m!)`.
pub fn multinomial(alpha: &[u32]) -> u128 {
    let mut total: u128 = 0;
    let mut acc: u128 = 1;
    for &e in alpha {
        total += e as u128;
        acc *= binomial(total, e as u128);
    }
    acc
}

/// Exponent vector from a tensor index tuple (count occurrences of each
/// variable index).
pub(crate) fn exponents_from_indices(m: usize, idx: &[usize]) -> Vec<u32> {
    let mut alpha = vec![0u32; m];
    for &i in idx {
        alpha[i] += 1;
    }
    alpha
}

/// Visit every `alpha` in `N^m` with `Σ alpha = total`.
pub fn for_each_composition(m: usize, total: u32, mut f: impl FnMut(&[u32])) {
    let mut alpha = vec![0u32; m];
    fn rec(alpha: &mut [u32], slot: usize, remaining: u32, f: &mut impl FnMut(&[u32])) {
        if slot + 1 == alpha.len() {
            alpha[slot] = remaining;
            f(alpha);
            return;
        }
        for e in 0..=remaining {
            alpha[slot] = e;
            rec(alpha, slot + 1, remaining - e, f);
        }
    }
    if m == 0 {
        return;
    }
    rec(&mut alpha, 0, total, &mut f);
}

/// Advance a mixed-radix index tuple (every digit in `[0, radix)`).
/// Returns false after the last tuple.
pub(crate) fn next_tuple(idx: &mut [usize], radix: usize) -> bool {
    for digit in idx.iter_mut() {
        *digit += 1;
        if *digit < radix {
            return true;
        }
        *digit = 0;
    }
    false
}
