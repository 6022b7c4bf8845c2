//! Tensorizations of a polynomial map.
//!
//! Two third-order tensors are built from a map `f`: the coefficient tensor
//! `Q` (n×m×δ, slice i is the structured coefficient matrix `Ψ(f_i)`) and the
//! Jacobian tensor `J` (n×m×N, slice k is the Jacobian at sampling point
//! `u^(k)`). A Vandermonde-like matrix `A` links them exactly:
//! `J = Q ×₃ Aᵀ`. The degree-s block of every δ-vector here (tubes of Q,
//! columns of A and of the structured factor Z) is a scaled symmetric
//! Kronecker power, so all of them live in one structure subspace whose
//! dimension is `M = C(m+d−1, d−1)`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::polymap::{binomial, next_tuple, DecoupledModel, PolyMap};
use crate::scalar::{eps, fu, Scalar};
use crate::tensor::DenseTensor;

/// Width of the structured coefficient matrix: `δ = Σ_{k=1..d} m^{k−1}`.
pub fn delta(m: usize, d: usize) -> usize {
    (0..d).map(|k| m.pow(k as u32)).sum()
}

/// Column offset of the degree-`s` block inside a δ-vector.
pub(crate) fn block_offset(m: usize, s: usize) -> usize {
    delta(m, s - 1)
}

/// Rank bound of A: `M = C(m+d−1, d−1)`, which also equals
/// `1 + m + C(m+1,2) + … + C(m+d−2, d−1)` (asserted).
pub fn rank_bound(m: usize, d: usize) -> usize {
    let closed = binomial((m + d - 1) as u128, (d - 1) as u128);
    let summed: u128 = (0..d)
        .map(|s| binomial((m + s).saturating_sub(1) as u128, s as u128))
        .sum();
    assert_eq!(closed, summed, "rank bound formulas disagree");
    closed as usize
}

/// Length-`m^k` vector of all degree-`k` products of the entries of `u`,
/// indexed column-major by the tuple of factors. Entries sharing an index
/// multiset are computed from the sorted tuple, so they are bit-identical.
pub fn symmetric_power_vec<T: Scalar>(u: &DVector<T>, k: usize) -> DVector<T> {
    let m = u.len();
    let mut out = DVector::zeros(m.pow(k as u32));
    if k == 0 {
        out[0] = T::one();
        return out;
    }
    let mut idx = vec![0usize; k];
    for slot in 0..out.len() {
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        let mut prod = T::one();
        for &i in &sorted {
            prod *= u[i];
        }
        out[slot] = prod;
        next_tuple(&mut idx, m);
    }
    out
}

/// Structured coefficient matrix `Ψ(f_i)`: the m×δ horizontal concatenation
/// of the first-mode unfoldings of the graded blocks of output `i`.
pub fn psi_matrix<T: Scalar>(f: &PolyMap<T>, output: usize) -> Result<DMatrix<T>> {
    if output >= f.num_outputs() {
        return Err(Error::IndexOutOfRange(format!(
            "output {} with n = {}",
            output,
            f.num_outputs()
        )));
    }
    let q = build_q(f);
    let m = f.num_inputs();
    let width = delta(m, f.degree_bound());
    Ok(DMatrix::from_fn(m, width, |j, c| q.get(&[output, j, c])))
}

/// Coefficient tensor `Q` (n×m×δ); slice `i` equals `Ψ(f_i)`.
pub fn build_q<T: Scalar>(f: &PolyMap<T>) -> DenseTensor<T> {
    let (m, n, d) = (f.num_inputs(), f.num_outputs(), f.degree_bound());
    let graded = f.to_graded();
    let mut q = DenseTensor::zeros(&[n, m, delta(m, d)]);
    for i in 0..n {
        for s in 1..=d {
            let block = graded.block(i, s);
            let off = block_offset(m, s);
            let width = m.pow((s - 1) as u32);
            // Row j of the unfolding is vec of slice j; column-major layout
            // makes that a strided copy.
            for c in 0..width {
                for j in 0..m {
                    q.set(&[i, j, off + c], block.data()[j + m * c]);
                }
            }
        }
    }
    q
}

/// Sampling points plus the Vandermonde-like matrix they induce.
///
/// Column `j` of `A` is `[1 | 2u^(j)ᵀ | 3(u^(j)⊗u^(j))ᵀ | … ]ᵀ` (δ×N), the
/// evaluation functional that maps a coefficient tube to a Jacobian tube.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan<T> {
    points: Vec<DVector<T>>,
    m: usize,
    degree: usize,
    a: DMatrix<T>,
}

impl<T: Scalar> SamplePlan<T> {
    pub fn points(&self) -> &[DVector<T>] {
        &self.points
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    pub fn num_inputs(&self) -> usize {
        self.m
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// The δ×N matrix A.
    pub fn matrix_a(&self) -> &DMatrix<T> {
        &self.a
    }

    /// Numerical rank of A (relative SVD cutoff `σ₁·max(δ,N)·ε·64`).
    pub fn numerical_rank_a(&self) -> usize {
        numerical_rank(&self.a)
    }

    /// Seeded standard-normal plan with `n_points` points.
    pub fn sample(m: usize, d: usize, n_points: usize, seed: u64) -> Result<Self> {
        build_sample_plan(default_points(m, n_points, seed), m, d)
    }
}

/// Assemble a plan from explicit points.
pub fn build_sample_plan<T: Scalar>(
    points: Vec<DVector<T>>,
    m: usize,
    d: usize,
) -> Result<SamplePlan<T>> {
    if points.is_empty() {
        return Err(Error::DimensionMismatch("at least one point".into()));
    }
    if m == 0 || d == 0 {
        return Err(Error::DimensionMismatch("m and d must be positive".into()));
    }
    for (j, u) in points.iter().enumerate() {
        if u.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "point {} has length {} with m = {}",
                j,
                u.len(),
                m
            )));
        }
    }
    let width = delta(m, d);
    let mut a = DMatrix::zeros(width, points.len());
    for (j, u) in points.iter().enumerate() {
        for s in 1..=d {
            let off = block_offset(m, s);
            let block = symmetric_power_vec(u, s - 1) * fu::<T>(s);
            for (c, &x) in block.iter().enumerate() {
                a[(off + c, j)] = x;
            }
        }
    }
    Ok(SamplePlan {
        points,
        m,
        degree: d,
        a,
    })
}

/// `n_points` i.i.d. standard-normal m-vectors from a seeded generator.
pub fn default_points<T: Scalar>(m: usize, n_points: usize, seed: u64) -> Vec<DVector<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_points)
        .map(|_| DVector::from_fn(m, |_, _| T::standard_normal(&mut rng)))
        .collect()
}

/// Jacobian tensor `J` (n×m×N); slice `k` of the third mode is the Jacobian
/// of `f` at the k-th sampling point.
pub fn build_j<T: Scalar>(f: &PolyMap<T>, plan: &SamplePlan<T>) -> Result<DenseTensor<T>> {
    if plan.num_inputs() != f.num_inputs() {
        return Err(Error::DimensionMismatch(format!(
            "plan has m = {} but map has m = {}",
            plan.num_inputs(),
            f.num_inputs()
        )));
    }
    let (m, n) = (f.num_inputs(), f.num_outputs());
    let mut t = DenseTensor::zeros(&[n, m, plan.num_points()]);
    for (k, u) in plan.points().iter().enumerate() {
        let jac = f.jacobian(u)?;
        for j in 0..m {
            for i in 0..n {
                t.set(&[i, j, k], jac[(i, j)]);
            }
        }
    }
    Ok(t)
}

/// Structured δ-vector `[c₁ | c₂vᵀ | c₃(v⊗v)ᵀ | … ]ᵀ` for one branch.
pub fn structured_z_column<T: Scalar>(v: &DVector<T>, coeffs: &[T]) -> DVector<T> {
    let m = v.len();
    let d = coeffs.len();
    let mut z = DVector::zeros(delta(m, d));
    for s in 1..=d {
        let off = block_offset(m, s);
        let block = symmetric_power_vec(v, s - 1) * coeffs[s - 1];
        for (c, &x) in block.iter().enumerate() {
            z[off + c] = x;
        }
    }
    z
}

/// Structured third factor of the Q decomposition: column `k` is
/// `[c_{k,1} | c_{k,2}v_kᵀ | c_{k,3}(v_k⊗v_k)ᵀ | … ]ᵀ` (δ×r).
pub fn z_factors<T: Scalar>(model: &DecoupledModel<T>) -> DMatrix<T> {
    let m = model.num_inputs();
    let d = model.degree_bound();
    let r = model.num_branches();
    let width = delta(m, d);
    let mut z = DMatrix::zeros(width, r);
    for k in 0..r {
        let v = model.directions().column(k).into_owned();
        let coeffs: Vec<T> = (0..d).map(|s| model.coefficients()[(k, s)]).collect();
        let col = structured_z_column(&v, &coeffs);
        z.set_column(k, &col);
    }
    z
}

/// Third factor of the J decomposition: `H[j,k] = g'_k(v_kᵀu^(j))` (N×r).
pub fn h_factors<T: Scalar>(model: &DecoupledModel<T>, plan: &SamplePlan<T>) -> Result<DMatrix<T>> {
    if plan.num_inputs() != model.num_inputs() {
        return Err(Error::DimensionMismatch(format!(
            "plan has m = {} but model has m = {}",
            plan.num_inputs(),
            model.num_inputs()
        )));
    }
    let r = model.num_branches();
    let mut h = DMatrix::zeros(plan.num_points(), r);
    for (j, u) in plan.points().iter().enumerate() {
        for k in 0..r {
            let t = model.directions().column(k).dot(u);
            h[(j, k)] = model.g_derivative(k, t);
        }
    }
    Ok(h)
}

/// Degree-`s` stack: the order-(s+1) tensor whose first-mode slices are the
/// degree-s symmetric blocks of the outputs (dims n×m×…×m).
pub fn build_ts<T: Scalar>(f: &PolyMap<T>, s: usize) -> Result<DenseTensor<T>> {
    let d = f.degree_bound();
    if s == 0 || s > d {
        return Err(Error::DegreeOverflow { found: s, bound: d });
    }
    let (m, n) = (f.num_inputs(), f.num_outputs());
    let graded = f.to_graded();
    let mut dims = vec![m; s + 1];
    dims[0] = n;
    Ok(DenseTensor::from_fn(&dims, |idx| {
        graded.block(idx[0], s).get(&idx[1..])
    }))
}

/// (1,2)-reshaping of a degree stack: n×m×…×m becomes n×m×m^{s−1} with the
/// (i,j) tube equal to `vec` of the trailing block. Column-major layout makes
/// this a pure reinterpretation of the dimensions.
pub fn reshape_ts_12<T: Scalar>(t: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    let dims = t.dims();
    if dims.len() < 2 {
        return Err(Error::ModeOutOfRange {
            mode: 2,
            order: dims.len(),
        });
    }
    let rest: usize = dims[2..].iter().product();
    t.reshape(&[dims[0], dims[1], rest])
}

/// Stack the reshaped degree tensors `T^1_(1,2), …, T^d_(1,2)` along the
/// third mode; equals [`build_q`] of the same map exactly.
pub fn stack_q_from_ts<T: Scalar>(reshaped: &[DenseTensor<T>]) -> Result<DenseTensor<T>> {
    if reshaped.is_empty() {
        return Err(Error::MissingDegree { degree: 1 });
    }
    let first = &reshaped[0];
    if first.order() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "expected order-3 reshapings, got order {}",
            first.order()
        )));
    }
    let n = first.dims()[0];
    let m = first.dims()[1];
    let mut data = Vec::new();
    for (s0, t) in reshaped.iter().enumerate() {
        let s = s0 + 1;
        let expect = [n, m, m.pow((s - 1) as u32)];
        if t.dims() != expect {
            if t.order() == 3 && t.dims()[0] == n && t.dims()[1] == m {
                return Err(Error::MissingDegree { degree: s });
            }
            return Err(Error::DimensionMismatch(format!(
                "degree {} reshaping has dims {:?}, expected {:?}",
                s,
                t.dims(),
                expect
            )));
        }
        data.extend_from_slice(t.data());
    }
    let d = reshaped.len();
    DenseTensor::from_data(&[n, m, delta(m, d)], data)
}

/// Numerical rank by SVD with relative cutoff `σ₁·max(rows,cols)·ε·64`.
pub fn numerical_rank<T: Scalar>(m: &DMatrix<T>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let svd = m.clone().svd(false, false);
    let sv = &svd.singular_values;
    if sv.is_empty() || sv[0] == T::zero() {
        return 0;
    }
    let dim = fu::<T>(m.nrows().max(m.ncols()));
    let threshold = sv[0] * dim * eps::<T>() * fu::<T>(64);
    sv.iter().filter(|&&s| s > threshold).count()
}

/// Largest absolute deviation of a δ-vector from the structure subspace:
/// within each degree block, entries indexed by the same multiset must agree.
pub fn structure_violation_vec<T: Scalar>(x: &DVector<T>, m: usize, d: usize) -> Result<T> {
    if x.len() != delta(m, d) {
        return Err(Error::DimensionMismatch(format!(
            "vector of length {} with δ = {}",
            x.len(),
            delta(m, d)
        )));
    }
    let mut worst = T::zero();
    for s in 1..=d {
        let off = block_offset(m, s);
        let k = s - 1;
        if k < 2 {
            continue;
        }
        let mut idx = vec![0usize; k];
        for c in 0..m.pow(k as u32) {
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            if sorted != idx {
                let rep = sorted.iter().rev().fold(0usize, |acc, &i| acc * m + i);
                let dev = (x[off + c] - x[off + rep]).abs();
                if dev > worst {
                    worst = dev;
                }
            }
            next_tuple(&mut idx, m);
        }
    }
    Ok(worst)
}

/// Largest structure violation over all tubes `Q[i,j,:]`.
pub fn structure_violation_q<T: Scalar>(q: &DenseTensor<T>, m: usize, d: usize) -> Result<T> {
    let dims = q.dims();
    if dims.len() != 3 || dims[1] != m || dims[2] != delta(m, d) {
        return Err(Error::DimensionMismatch(format!(
            "Q dims {:?} with m = {}, δ = {}",
            dims,
            m,
            delta(m, d)
        )));
    }
    let mut worst = T::zero();
    for i in 0..dims[0] {
        for j in 0..m {
            let tube = DVector::from_fn(dims[2], |c, _| q.get(&[i, j, c]));
            let dev = structure_violation_vec(&tube, m, d)?;
            if dev > worst {
                worst = dev;
            }
        }
    }
    Ok(worst)
}
