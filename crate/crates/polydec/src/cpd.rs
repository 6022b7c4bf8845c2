//! Canonical polyadic machinery.
//!
//! Alternating least squares with seeded restarts, higher-order power
//! iteration for the dominant rank-one term, comparison of factor sets up to
//! the permutation/scaling invariances, and the exact transfer of third
//! factors between the coefficient-tensor and Jacobian-tensor decompositions.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::polymap::dominant_index;
use crate::scalar::{eps, fr, fu, Scalar};
use crate::tensor::DenseTensor;
use crate::tensorize::{numerical_rank, rank_bound, SamplePlan};

/// Factor matrices of a rank-r CP decomposition plus fit diagnostics.
///
/// All factor matrices share the column count r; `weights` scales the
/// rank-one terms (all ones when produced by [`cp_als`], which pushes
/// magnitudes into the last factor). `fit` is the relative reconstruction
/// error `‖T − reconstruct‖_F / ‖T‖_F` of the tensor the factors were fitted
/// to; transfers between tensorizations carry the source fit over.
#[derive(Debug, Clone, PartialEq)]
pub struct CpdFactors<T> {
    pub factors: Vec<DMatrix<T>>,
    pub weights: DVector<T>,
    pub fit: T,
    pub iterations: usize,
    pub converged: bool,
    /// Relative error after every sweep of the winning restart.
    pub fit_history: Vec<T>,
}

impl<T: Scalar> CpdFactors<T> {
    pub fn new(factors: Vec<DMatrix<T>>, weights: DVector<T>) -> Result<Self> {
        let r = weights.len();
        for f in &factors {
            if f.ncols() != r {
                return Err(Error::DimensionMismatch(format!(
                    "factor with {} columns, weights of length {}",
                    f.ncols(),
                    r
                )));
            }
        }
        Ok(Self {
            factors,
            weights,
            fit: T::zero(),
            iterations: 0,
            converged: false,
            fit_history: Vec::new(),
        })
    }

    pub fn rank(&self) -> usize {
        self.weights.len()
    }
}

/// Options for [`cp_als`].
#[derive(Debug, Clone)]
pub struct CpdOptions<T> {
    /// Maximum ALS sweeps per restart.
    pub max_iters: usize,
    /// Stop when the relative fit changes by less than this between sweeps.
    pub tol: f64,
    /// Number of independent restarts; the best fit wins, lowest restart
    /// index breaking ties.
    pub restarts: usize,
    pub seed: u64,
    /// Optional initial factors used by restart 0 instead of a random draw.
    pub init: Option<Vec<DMatrix<T>>>,
}

impl<T> Default for CpdOptions<T> {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            tol: 1e-12,
            restarts: 10,
            seed: 0,
            init: None,
        }
    }
}

impl<T> CpdOptions<T> {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts.max(1);
        self
    }
}

/// Reconstruct `Σ_k weight_k · (outer product of the k-th columns)`.
pub fn cpd_reconstruct<T: Scalar>(
    factors: &CpdFactors<T>,
    dims: &[usize],
) -> Result<DenseTensor<T>> {
    if factors.factors.len() != dims.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} factors for order-{} tensor",
            factors.factors.len(),
            dims.len()
        )));
    }
    for (p, f) in factors.factors.iter().enumerate() {
        if f.nrows() != dims[p] {
            return Err(Error::DimensionMismatch(format!(
                "factor {} has {} rows, dim is {}",
                p,
                f.nrows(),
                dims[p]
            )));
        }
    }
    let mut out = DenseTensor::zeros(dims);
    for k in 0..factors.rank() {
        let cols: Vec<DVector<T>> = factors
            .factors
            .iter()
            .map(|f| f.column(k).into_owned())
            .collect();
        let term = DenseTensor::rank_one(factors.weights[k], &cols);
        for (slot, &x) in out.data_mut().iter_mut().zip(term.data()) {
            *slot += x;
        }
    }
    Ok(out)
}

/// Relative reconstruction error of `factors` against `t`.
pub fn relative_error<T: Scalar>(factors: &CpdFactors<T>, t: &DenseTensor<T>) -> Result<T> {
    let rec = cpd_reconstruct(factors, t.dims())?;
    t.relative_distance(&rec)
}

fn mix_seed(seed: u64, restart: usize, attempt: usize) -> u64 {
    seed.wrapping_add((restart as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((attempt as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Matricized-tensor-times-Khatri-Rao along mode `p`.
fn mttkrp<T: Scalar>(t: &DenseTensor<T>, factors: &[DMatrix<T>], p: usize) -> DMatrix<T> {
    let dims = t.dims();
    let r = factors[0].ncols();
    let mut out = DMatrix::zeros(dims[p], r);
    let mut idx = vec![0usize; dims.len()];
    for &x in t.data() {
        if x != T::zero() {
            for k in 0..r {
                let mut prod = x;
                for (q, f) in factors.iter().enumerate() {
                    if q != p {
                        prod *= f[(idx[q], k)];
                    }
                }
                out[(idx[p], k)] += prod;
            }
        }
        advance(&mut idx, dims);
    }
    out
}

fn advance(idx: &mut [usize], dims: &[usize]) {
    for (i, d) in idx.iter_mut().zip(dims) {
        *i += 1;
        if *i < *d {
            return;
        }
        *i = 0;
    }
}

/// Solve `X · gram = rhs` for X with a symmetric positive semidefinite gram,
/// adding ridge jitter `1e-12·trace` when the Cholesky factorization fails.
pub(crate) fn solve_gram<T: Scalar>(gram: &DMatrix<T>, rhs: &DMatrix<T>) -> Option<DMatrix<T>> {
    if let Some(chol) = gram.clone().cholesky() {
        return Some(chol.solve(&rhs.transpose()).transpose());
    }
    let ridge = gram.trace() * fr::<T>(1e-12) + eps::<T>();
    let jittered = gram + DMatrix::identity(gram.nrows(), gram.ncols()) * ridge;
    jittered.lu().solve(&rhs.transpose()).map(|x| x.transpose())
}

struct SingleRun<T> {
    factors: Vec<DMatrix<T>>,
    fit: T,
    iterations: usize,
    converged: bool,
    fit_history: Vec<T>,
}

fn als_single<T: Scalar>(
    t: &DenseTensor<T>,
    r: usize,
    init: Vec<DMatrix<T>>,
    max_iters: usize,
    tol: T,
) -> Option<SingleRun<T>> {
    let dims = t.dims().to_vec();
    let order = dims.len();
    let norm_t = t.norm();
    let mut factors = init;
    let weights = DVector::from_element(r, T::one());

    let fit_of = |factors: &[DMatrix<T>]| -> Option<T> {
        let cpd = CpdFactors {
            factors: factors.to_vec(),
            weights: weights.clone(),
            fit: T::zero(),
            iterations: 0,
            converged: false,
            fit_history: Vec::new(),
        };
        let rec = cpd_reconstruct(&cpd, &dims).ok()?;
        let diff = t.sub(&rec).ok()?.norm();
        let fit = if norm_t > T::zero() {
            diff / norm_t
        } else {
            diff
        };
        fit.is_finite().then_some(fit)
    };

    let mut fit = fit_of(&factors)?;
    let mut history = vec![fit];
    let mut converged = false;
    let mut iterations = 0;

    for sweep in 0..max_iters {
        for p in 0..order {
            let rhs = mttkrp(t, &factors, p);
            let mut gram = DMatrix::from_element(r, r, T::one());
            for (q, f) in factors.iter().enumerate() {
                if q != p {
                    gram.component_mul_assign(&(f.transpose() * f));
                }
            }
            if let Some(updated) = solve_gram(&gram, &rhs) {
                factors[p] = updated;
            }
        }
        // Push magnitudes into the last factor; fix signs so the dominant
        // entry of every normalized column is positive.
        for k in 0..r {
            let mut scale = T::one();
            for f in factors.iter_mut().take(order - 1) {
                let col = f.column(k).into_owned();
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
                for i in 0..f.nrows() {
                    f[(i, k)] /= beta;
                }
                scale *= beta;
            }
            let last = &mut factors[order - 1];
            for i in 0..last.nrows() {
                last[(i, k)] *= scale;
            }
        }
        for f in &factors {
            if f.iter().any(|x| !x.is_finite()) {
                return None;
            }
        }
        let new_fit = fit_of(&factors)?;
        history.push(new_fit);
        iterations = sweep + 1;
        let change = (fit - new_fit).abs();
        fit = new_fit;
        if change < tol {
            converged = true;
            break;
        }
    }

    Some(SingleRun {
        factors,
        fit,
        iterations,
        converged,
        fit_history: history,
    })
}

/// Best-of-restarts CP decomposition of an order ≥ 3 tensor by alternating
/// least squares. Deterministic given `(options.seed, restart index)`; a
/// restart that runs into non-finite values is retried with a re-mixed seed.
pub fn cp_als<T: Scalar>(
    t: &DenseTensor<T>,
    r: usize,
    options: &CpdOptions<T>,
) -> Result<CpdFactors<T>> {
    let dims = t.dims().to_vec();
    if dims.len() < 3 {
        return Err(Error::MatrixInput);
    }
    if r == 0 {
        return Err(Error::ZeroRank);
    }
    let mut sorted = dims.clone();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    if r > sorted[0] * sorted[1] {
        log::warn!(
            "rank {} exceeds the product {} of the two largest dimensions",
            r,
            sorted[0] * sorted[1]
        );
    }

    if t.norm() == T::zero() {
        let factors = dims.iter().map(|&d| DMatrix::zeros(d, r)).collect();
        let mut out = CpdFactors::new(factors, DVector::from_element(r, T::one()))?;
        out.converged = true;
        return Ok(out);
    }

    let tol = fr::<T>(options.tol);
    let restarts = options.restarts.max(1);
    let mut best: Option<SingleRun<T>> = None;
    for restart in 0..restarts {
        let mut run = None;
        for attempt in 0..3 {
            let init = if restart == 0 && attempt == 0 && options.init.is_some() {
                let init = options.init.clone().unwrap();
                if init.len() != dims.len()
                    || init
                        .iter()
                        .zip(&dims)
                        .any(|(f, &d)| f.nrows() != d || f.ncols() != r)
                {
                    return Err(Error::DimensionMismatch(
                        "initial factors do not match tensor dims and rank".into(),
                    ));
                }
                init
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(options.seed, restart, attempt));
                dims.iter()
                    .map(|&d| DMatrix::from_fn(d, r, |_, _| T::standard_normal(&mut rng)))
                    .collect()
            };
            run = als_single(t, r, init, options.max_iters, tol);
            if run.is_some() {
                break;
            }
        }
        let Some(run) = run else { continue };
        let better = match &best {
            None => true,
            Some(b) => run.fit < b.fit,
        };
        if better {
            best = Some(run);
        }
    }

    let best = best
        .ok_or_else(|| Error::NoConvergence("every restart produced non-finite values".into()))?;
    Ok(CpdFactors {
        factors: best.factors,
        weights: DVector::from_element(r, T::one()),
        fit: best.fit,
        iterations: best.iterations,
        converged: best.converged,
        fit_history: best.fit_history,
    })
}

/// Dominant rank-one approximation by higher-order power iteration, seeded
/// from leading singular vectors of successive first-mode unfoldings.
/// Returns unit vectors per mode, the signed scalar weight, and the relative
/// residual of the rank-one fit; a zero tensor yields zero vectors and
/// residual 0 by convention.
pub fn best_rank_one<T: Scalar>(t: &DenseTensor<T>) -> Result<(Vec<DVector<T>>, T, T)> {
    if t.order() < 2 {
        return Err(Error::DimensionMismatch(
            "rank-one approximation needs order ≥ 2".into(),
        ));
    }
    let dims = t.dims().to_vec();
    if t.norm() == T::zero() {
        let vectors = dims.iter().map(|&d| DVector::zeros(d)).collect();
        return Ok((vectors, T::zero(), T::zero()));
    }

    let mut vectors = svd_seed(t);
    let order = dims.len();
    let mut sigma = T::zero();
    for _ in 0..500 {
        let prev = sigma;
        for p in 0..order {
            let fiber = contract_except(t, &vectors, p);
            let norm = fiber.norm();
            if norm > T::zero() {
                vectors[p] = fiber / norm;
            }
            sigma = norm;
        }
        if (sigma - prev).abs() <= eps::<T>() * fu::<T>(64) * sigma.abs().max(T::one()) {
            break;
        }
    }
    // Sign convention: dominant entries positive; sigma is recomputed as the
    // full contraction afterwards, so it absorbs the flips.
    for v in vectors.iter_mut() {
        let lead = dominant_index(v);
        if v[lead] < T::zero() {
            *v = -v.clone();
        }
    }
    let mut full = t.clone();
    for p in (0..order).rev() {
        full = full.mode_n_vec(&vectors[p], p)?;
    }
    let sigma = full.data()[0];
    let rank_one = DenseTensor::rank_one(sigma, &vectors);
    let residual = t.relative_distance(&rank_one)?;
    Ok((vectors, sigma, residual))
}

fn svd_seed<T: Scalar>(t: &DenseTensor<T>) -> Vec<DVector<T>> {
    let dims = t.dims();
    if dims.len() == 1 {
        let v = DVector::from_fn(dims[0], |i, _| t.data()[i]);
        let norm = v.norm();
        return vec![if norm > T::zero() {
            v / norm
        } else {
            unit_vector(dims[0])
        }];
    }
    let unf = t.unfold_mode1().expect("order ≥ 2");
    let svd = unf.clone().svd(true, true);
    let u = svd.u.expect("svd with u");
    let vt = svd.v_t.expect("svd with v_t");
    let lead = u.column(0).into_owned();
    let lead = if lead.norm() > T::zero() {
        let n = lead.norm();
        lead / n
    } else {
        unit_vector(dims[0])
    };
    let rest_vec = vt.row(0).transpose();
    let rest = DenseTensor::from_data(&dims[1..], rest_vec.as_slice().to_vec())
        .expect("right singular vector reshapes to remaining dims");
    let mut out = vec![lead];
    out.extend(svd_seed(&rest));
    out
}

fn unit_vector<T: Scalar>(len: usize) -> DVector<T> {
    let mut v = DVector::zeros(len);
    v[0] = T::one();
    v
}

fn contract_except<T: Scalar>(t: &DenseTensor<T>, vectors: &[DVector<T>], p: usize) -> DVector<T> {
    // Contract from the highest mode down so lower mode indices stay valid.
    let mut tmp = t.clone();
    for q in (0..vectors.len()).rev() {
        if q != p {
            tmp = tmp
                .mode_n_vec(&vectors[q], q)
                .expect("contraction dims match");
        }
    }
    DVector::from_fn(tmp.len(), |i, _| tmp.data()[i])
}

/// Alignment of two factor-matrix lists up to column permutation and
/// compensating scalings.
#[derive(Debug, Clone)]
pub struct FactorMatch<T> {
    /// Component k of the first list matches column `permutation[k]` of the
    /// second.
    pub permutation: Vec<usize>,
    /// Per-component, per-mode scales mapping the first list onto the
    /// second, adjusted so their product per component has unit magnitude.
    pub scales: Vec<Vec<T>>,
    /// Smallest absolute column cosine over all modes and components.
    pub congruence: T,
    /// Largest relative column difference after alignment.
    pub max_residual: T,
}

/// Match two factor sets: the permutation maximizes the summed absolute
/// column cosines across modes (lexicographically smallest among ties).
pub fn match_factors<T: Scalar>(f1: &[DMatrix<T>], f2: &[DMatrix<T>]) -> Result<FactorMatch<T>> {
    if f1.is_empty() || f1.len() != f2.len() {
        return Err(Error::DimensionMismatch(
            "factor lists must be non-empty and of equal length".into(),
        ));
    }
    let r = f1[0].ncols();
    for (a, b) in f1.iter().zip(f2) {
        if a.nrows() != b.nrows() || a.ncols() != r || b.ncols() != r {
            return Err(Error::DimensionMismatch(
                "factor shapes must agree between the two lists".into(),
            ));
        }
    }
    if r == 0 {
        return Ok(FactorMatch {
            permutation: Vec::new(),
            scales: Vec::new(),
            congruence: T::one(),
            max_residual: T::zero(),
        });
    }
    if r > 10 {
        return Err(Error::DimensionMismatch(
            "exhaustive assignment search supports rank ≤ 10".into(),
        ));
    }

    let modes = f1.len();
    // cosines[p] is the r×r table of |cos| between columns of the two lists.
    let mut cosines = Vec::with_capacity(modes);
    for p in 0..modes {
        let mut table = DMatrix::zeros(r, r);
        for k in 0..r {
            let a = f1[p].column(k);
            let na = a.norm();
            for l in 0..r {
                let b = f2[p].column(l);
                let nb = b.norm();
                table[(k, l)] = if na > T::zero() && nb > T::zero() {
                    (a.dot(&b) / (na * nb)).abs()
                } else {
                    T::zero()
                };
            }
        }
        cosines.push(table);
    }

    let mut best_perm: Option<Vec<usize>> = None;
    let mut best_score = T::zero();
    for_each_permutation(r, |perm| {
        let mut score = T::zero();
        for (k, &l) in perm.iter().enumerate() {
            for table in &cosines {
                score += table[(k, l)];
            }
        }
        if best_perm.is_none() || score > best_score {
            best_score = score;
            best_perm = Some(perm.to_vec());
        }
    });
    let permutation = best_perm.expect("r ≥ 1");

    let mut congruence = T::one();
    let mut max_residual = T::zero();
    let mut scales = Vec::with_capacity(r);
    for (k, &l) in permutation.iter().enumerate() {
        // Raw per-mode scales, then normalize their product to magnitude 1.
        let mut s = Vec::with_capacity(modes);
        let mut gamma = T::one();
        for p in 0..modes {
            let a = f1[p].column(k).into_owned();
            let b = f2[p].column(l).into_owned();
            let na = a.norm();
            let nb = b.norm();
            let scale = if na > T::zero() {
                let dot = a.dot(&b);
                let sign = if dot < T::zero() { -T::one() } else { T::one() };
                sign * nb / na
            } else {
                T::zero()
            };
            gamma *= scale;
            s.push(scale);
            congruence = congruence.min(cosines[p][(k, l)]);
        }
        let t_adj = gamma.abs().powf(T::one() / fu::<T>(modes));
        if t_adj > T::zero() {
            for v in s.iter_mut() {
                *v /= t_adj;
            }
        }
        for p in 0..modes {
            let a = f1[p].column(k).into_owned();
            let b = f2[p].column(l).into_owned();
            let diff = (&b - &a * s[p]).norm();
            let denom = b.norm();
            let resid = if denom > T::zero() {
                diff / denom
            } else {
                diff
            };
            if resid > max_residual {
                max_residual = resid;
            }
        }
        scales.push(s);
    }

    Ok(FactorMatch {
        permutation,
        scales,
        congruence,
        max_residual,
    })
}

/// Visit permutations of `0..r` in lexicographic order.
fn for_each_permutation(r: usize, mut f: impl FnMut(&[usize])) {
    let mut perm: Vec<usize> = (0..r).collect();
    loop {
        f(&perm);
        // next_permutation
        let Some(i) = (0..r.saturating_sub(1))
            .rev()
            .find(|&i| perm[i] < perm[i + 1])
        else {
            return;
        };
        let j = (i + 1..r).rev().find(|&j| perm[j] > perm[i]).unwrap();
        perm.swap(i, j);
        perm[i + 1..].reverse();
    }
}

/// Exact transfer: replace the third factor Z of a Q decomposition
/// by AᵀZ, yielding a decomposition of `J = Q ×₃ Aᵀ`. The first two factors
/// and the weights are untouched; the fit field carries over from the
/// source decomposition.
pub fn transfer_third_factor<T: Scalar>(
    qcpd: &CpdFactors<T>,
    plan: &SamplePlan<T>,
) -> Result<CpdFactors<T>> {
    if qcpd.factors.len() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "transfer expects a third-order decomposition, got {} factors",
            qcpd.factors.len()
        )));
    }
    let delta = plan.matrix_a().nrows();
    if qcpd.factors[2].nrows() != delta {
        return Err(Error::DimensionMismatch(format!(
            "third factor has {} rows, plan has δ = {}",
            qcpd.factors[2].nrows(),
            delta
        )));
    }
    let mut out = qcpd.clone();
    out.factors[2] = plan.matrix_a().transpose() * &qcpd.factors[2];
    Ok(out)
}

/// Inverse transfer through the pseudo-inverse: replace the third factor H
/// of a J decomposition by `(A†)ᵀH`. Requires the plan to be full rank
/// (`rank A = M`), otherwise the structure subspace is under-sampled and the
/// coefficient tensor is not recoverable.
pub fn inverse_transfer<T: Scalar>(
    jcpd: &CpdFactors<T>,
    plan: &SamplePlan<T>,
) -> Result<CpdFactors<T>> {
    if jcpd.factors.len() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "transfer expects a third-order decomposition, got {} factors",
            jcpd.factors.len()
        )));
    }
    let a = plan.matrix_a();
    if jcpd.factors[2].nrows() != a.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "third factor has {} rows, plan has N = {}",
            jcpd.factors[2].nrows(),
            a.ncols()
        )));
    }
    let bound = rank_bound(plan.num_inputs(), plan.degree());
    let rank = numerical_rank(a);
    if rank < bound {
        return Err(Error::UnderSampled { rank, bound });
    }
    let svd = a.clone().svd(true, true);
    let cutoff =
        svd.singular_values[0] * fu::<T>(a.nrows().max(a.ncols())) * eps::<T>() * fu::<T>(64);
    let pinv = svd
        .pseudo_inverse(cutoff)
        .map_err(|e| Error::NoConvergence(e.to_string()))?;
    let mut out = jcpd.clone();
    out.factors[2] = pinv.transpose() * &jcpd.factors[2];
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::tensorize::{build_j, build_q, build_sample_plan, h_factors, z_factors, SamplePlan};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    fn fixture_jw() -> (DenseTensor<f64>, Vec<DMatrix<f64>>) {
        let model = fixtures::example_model();
        let plan = build_sample_plan(fixtures::example_points(), 2, 3).unwrap();
        let j = build_j(&fixtures::example_map(), &plan).unwrap();
        let h = h_factors(&model, &plan).unwrap();
        let factors = vec![model.mixing().clone(), model.directions().clone(), h];
        (j, factors)
    }

    #[test]
    fn reconstruct_recovers_fixture_tensors() {
        let (j, factors) = fixture_jw();
        let cpd = CpdFactors::new(factors, DVector::from_element(3, 1.0)).unwrap();
        let rec = cpd_reconstruct(&cpd, &[2, 2, 3]).unwrap();
        assert_eq!(rec, j);

        let model = fixtures::example_model();
        let q = build_q(&fixtures::example_map());
        let z = z_factors(&model);
        let cpd = CpdFactors::new(
            vec![model.mixing().clone(), model.directions().clone(), z],
            DVector::from_element(3, 1.0),
        )
        .unwrap();
        let rec = cpd_reconstruct(&cpd, &[2, 2, 7]).unwrap();
        assert_eq!(rec, q);
    }

    #[test]
    fn reconstruct_rank_zero_is_zero() {
        let cpd = CpdFactors::<f64>::new(
            vec![
                DMatrix::zeros(2, 0),
                DMatrix::zeros(3, 0),
                DMatrix::zeros(4, 0),
            ],
            DVector::zeros(0),
        )
        .unwrap();
        let rec = cpd_reconstruct(&cpd, &[2, 3, 4]).unwrap();
        assert!(rec.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn als_fits_fixture_jacobian_tensor() {
        let (j, _) = fixture_jw();
        let cpd = cp_als(&j, 3, &CpdOptions::default()).unwrap();
        assert!(cpd.fit <= 1e-8, "fit {}", cpd.fit);
        assert_eq!(relative_error(&cpd, &j).unwrap(), cpd.fit);
    }

    #[test]
    fn als_rejects_bad_inputs() {
        let t = DenseTensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(
            cp_als(&t, 1, &CpdOptions::default()),
            Err(Error::MatrixInput)
        ));
        let t = DenseTensor::<f64>::zeros(&[2, 2, 2]);
        assert!(matches!(
            cp_als(&t, 0, &CpdOptions::default()),
            Err(Error::ZeroRank)
        ));
    }

    #[test]
    fn als_zero_tensor_returns_zero_factors() {
        let t = DenseTensor::<f64>::zeros(&[2, 2, 2]);
        let cpd = cp_als(&t, 1, &CpdOptions::default()).unwrap();
        assert_eq!(cpd.fit, 0.0);
        assert!(cpd.converged);
        assert!(cpd.factors.iter().all(|f| f.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn als_exact_rank_one() {
        let u = dv(&[1.0, -2.0, 0.5]);
        let v = dv(&[3.0, 1.0]);
        let w = dv(&[0.5, -1.0, 2.0, 1.5]);
        let t = DenseTensor::rank_one(2.0, &[u.clone(), v.clone(), w.clone()]);
        let cpd = cp_als(&t, 1, &CpdOptions::default()).unwrap();
        assert!(cpd.fit <= 1e-12, "fit {}", cpd.fit);
        let m = match_factors(
            &cpd.factors,
            &[
                DMatrix::from_fn(3, 1, |i, _| u[i]),
                DMatrix::from_fn(2, 1, |i, _| v[i]),
                DMatrix::from_fn(4, 1, |i, _| 2.0 * w[i]),
            ],
        )
        .unwrap();
        assert!(m.congruence >= 1.0 - 1e-10);
    }

    #[test]
    fn als_recovers_generic_small_model() {
        // m = n = r = 2 is inside the generic uniqueness regime.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let w = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0f64));
        let v = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0f64));
        let h = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0f64));
        let truth = CpdFactors::new(
            vec![w.clone(), v.clone(), h.clone()],
            DVector::from_element(2, 1.0),
        )
        .unwrap();
        let t = cpd_reconstruct(&truth, &[2, 2, 6]).unwrap();
        let cpd = cp_als(&t, 2, &CpdOptions::default()).unwrap();
        assert!(cpd.fit <= 1e-10);
        let m = match_factors(&cpd.factors, &[w, v, h]).unwrap();
        assert!(m.congruence >= 0.999, "congruence {}", m.congruence);
    }

    #[test]
    fn als_fit_history_is_monotone() {
        let (j, _) = fixture_jw();
        let cpd = cp_als(&j, 2, &CpdOptions::default().with_restarts(3)).unwrap();
        for pair in cpd.fit_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "{} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn rank_one_exact_input() {
        let u = dv(&[2.0, -1.0]);
        let v = dv(&[0.5, 1.5, -1.0]);
        let w = dv(&[1.0, 2.0]);
        let t = DenseTensor::rank_one(-3.0, &[u.clone(), v.clone(), w.clone()]);
        let (vecs, sigma, residual) = best_rank_one(&t).unwrap();
        assert!(residual <= 1e-12, "residual {}", residual);
        let rebuilt = DenseTensor::rank_one(sigma, &vecs);
        assert!(t.relative_distance(&rebuilt).unwrap() <= 1e-12);
        // Collinearity per mode.
        for (a, b) in vecs.iter().zip([u, v, w]) {
            let cos = a.dot(&b).abs() / b.norm();
            assert!(cos >= 1.0 - 1e-12);
        }
    }

    #[test]
    fn rank_one_zero_tensor_convention() {
        let t = DenseTensor::<f64>::zeros(&[2, 3, 4]);
        let (vecs, sigma, residual) = best_rank_one(&t).unwrap();
        assert_eq!(sigma, 0.0);
        assert_eq!(residual, 0.0);
        assert!(vecs.iter().all(|v| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn rank_one_single_branch_coefficient_tensor() {
        let w = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let v = DMatrix::from_row_slice(2, 1, &[2.0, 1.0]);
        let c = DMatrix::from_row_slice(1, 3, &[-1.0, -2.0, 1.0]);
        let model = crate::polymap::DecoupledModel::new(w, v, c).unwrap();
        let q = build_q(&model.expand());
        let (_, _, residual) = best_rank_one(&q).unwrap();
        assert!(residual <= 1e-10, "residual {}", residual);
    }

    #[test]
    fn rank_one_rejects_full_rank_fixture() {
        let q = build_q(&fixtures::example_map());
        let (_, _, residual) = best_rank_one(&q).unwrap();
        assert!(residual > 0.05, "residual {}", residual);
    }

    #[test]
    fn matching_identifies_permuted_rescaled_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f1: Vec<DMatrix<f64>> = vec![
            DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)),
            DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0)),
            DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0)),
        ];
        // Permute columns by (2, 0, 1) and rescale with product 1.
        let perm = [2usize, 0, 1];
        let scales = [[2.0, 0.25, 2.0], [-1.0, -4.0, 0.25], [0.5, 1.0, 2.0]];
        let mut f2: Vec<DMatrix<f64>> = f1.iter().map(|f| f.clone_owned()).collect();
        for p in 0..3 {
            for (k, &l) in perm.iter().enumerate() {
                let col = f1[p].column(k) * scales[k][p];
                f2[p].set_column(l, &col);
            }
        }
        let m = match_factors(&f1, &f2).unwrap();
        assert_eq!(m.permutation, perm.to_vec());
        assert!(m.congruence >= 1.0 - 1e-12);
        assert!(m.max_residual <= 1e-12, "residual {}", m.max_residual);
        for (k, s) in m.scales.iter().enumerate() {
            let product: f64 = s.iter().product();
            assert!((product.abs() - 1.0).abs() <= 1e-12);
            for (p, &v) in s.iter().enumerate() {
                assert!((v - scales[k][p]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matching_identifies_rescaled_solver_output() {
        // A structured solve of the fixture comes back with columns that are
        // scaled and permuted versions of the true W and V; the matcher must
        // say so.
        let model = fixtures::example_model();
        let w_tilde = DMatrix::from_row_slice(2, 3, &[1.2767, 1.7112, 0.0, 0.0, -0.8556, -1.9980]);
        let v_tilde =
            DMatrix::from_row_slice(2, 3, &[-0.9218, -1.0534, 1.5879, 0.9218, -2.1067, 0.7940]);
        let m = match_factors(
            &[model.mixing().clone(), model.directions().clone()],
            &[w_tilde, v_tilde],
        )
        .unwrap();
        assert!(m.congruence >= 0.9999, "congruence {}", m.congruence);
        assert_eq!(m.permutation, vec![2, 0, 1]);
    }

    #[test]
    fn matching_scores_independent_factors_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut low = 0;
        let trials = 100;
        for _ in 0..trials {
            let f1: Vec<DMatrix<f64>> = (0..3)
                .map(|_| DMatrix::from_fn(3, 3, |_, _| f64::standard_normal(&mut rng)))
                .collect();
            let f2: Vec<DMatrix<f64>> = (0..3)
                .map(|_| DMatrix::from_fn(3, 3, |_, _| f64::standard_normal(&mut rng)))
                .collect();
            let m = match_factors(&f1, &f2).unwrap();
            if m.congruence < 0.9 {
                low += 1;
            }
        }
        assert!(low >= 95, "only {}/{} trials below 0.9", low, trials);
    }

    #[test]
    fn matching_is_symmetric_up_to_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f1: Vec<DMatrix<f64>> = (0..3)
            .map(|_| DMatrix::from_fn(3, 3, |_, _| f64::standard_normal(&mut rng)))
            .collect();
        let f2: Vec<DMatrix<f64>> = (0..3)
            .map(|_| DMatrix::from_fn(3, 3, |_, _| f64::standard_normal(&mut rng)))
            .collect();
        let a = match_factors(&f1, &f2).unwrap();
        let b = match_factors(&f2, &f1).unwrap();
        let mut inverted = vec![0usize; 3];
        for (k, &l) in a.permutation.iter().enumerate() {
            inverted[l] = k;
        }
        assert_eq!(b.permutation, inverted);
        assert!((a.congruence - b.congruence).abs() <= 1e-12);
        let c = match_factors(&f1, &f1).unwrap();
        assert_eq!(c.permutation, vec![0, 1, 2]);
        assert!(c.congruence >= 1.0 - 1e-12);
    }

    #[test]
    fn transfer_reproduces_fixture_h() {
        let model = fixtures::example_model();
        let plan = build_sample_plan(fixtures::example_points(), 2, 3).unwrap();
        let z = z_factors(&model);
        let qcpd = CpdFactors::new(
            vec![model.mixing().clone(), model.directions().clone(), z],
            DVector::from_element(3, 1.0),
        )
        .unwrap();
        let jcpd = transfer_third_factor(&qcpd, &plan).unwrap();
        let h = h_factors(&model, &plan).unwrap();
        assert_eq!(jcpd.factors[2], h);
        assert_eq!(jcpd.factors[0], *model.mixing());
    }

    #[test]
    fn transfer_reconstruction_matches_jacobian_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = fixtures::random_model(2, 3, 2, 3, &mut rng);
        let f = model.expand();
        let plan = SamplePlan::<f64>::sample(2, 3, 8, 42).unwrap();
        let qcpd = CpdFactors::new(
            vec![
                model.mixing().clone(),
                model.directions().clone(),
                z_factors(&model),
            ],
            DVector::from_element(2, 1.0),
        )
        .unwrap();
        let jcpd = transfer_third_factor(&qcpd, &plan).unwrap();
        let j = build_j(&f, &plan).unwrap();
        let err = relative_error(&jcpd, &j).unwrap();
        assert!(err <= 1e-9, "error {}", err);
    }

    #[test]
    fn inverse_transfer_requires_full_rank() {
        let model = fixtures::example_model();
        let plan = build_sample_plan(fixtures::example_points(), 2, 3).unwrap();
        let h = h_factors(&model, &plan).unwrap();
        let jcpd = CpdFactors::new(
            vec![model.mixing().clone(), model.directions().clone(), h],
            DVector::from_element(3, 1.0),
        )
        .unwrap();
        assert!(matches!(
            inverse_transfer(&jcpd, &plan),
            Err(Error::UnderSampled { rank: 3, bound: 6 })
        ));
    }

    #[test]
    fn inverse_transfer_recovers_structured_factor() {
        // Extend the worked three points with random ones so rank(A) = M.
        let model = fixtures::example_model();
        let mut points = fixtures::example_points();
        points.extend(crate::tensorize::default_points::<f64>(2, 6, 7));
        let plan = build_sample_plan(points, 2, 3).unwrap();
        assert_eq!(plan.numerical_rank_a(), 6);
        let h = h_factors(&model, &plan).unwrap();
        let jcpd = CpdFactors::new(
            vec![model.mixing().clone(), model.directions().clone(), h],
            DVector::from_element(3, 1.0),
        )
        .unwrap();
        let qcpd = inverse_transfer(&jcpd, &plan).unwrap();
        let z = z_factors(&model);
        let diff = (&qcpd.factors[2] - &z).norm() / z.norm();
        assert!(diff <= 1e-8, "diff {}", diff);
    }

    #[test]
    fn transfer_round_trip_is_identity_on_structured_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = fixtures::random_model(2, 2, 3, 3, &mut rng);
        let plan = SamplePlan::<f64>::sample(2, 3, 10, 11).unwrap();
        let z = z_factors(&model);
        let qcpd = CpdFactors::new(
            vec![
                model.mixing().clone(),
                model.directions().clone(),
                z.clone(),
            ],
            DVector::from_element(3, 1.0),
        )
        .unwrap();
        let back = inverse_transfer(&transfer_third_factor(&qcpd, &plan).unwrap(), &plan).unwrap();
        let diff = (&back.factors[2] - &z).norm() / z.norm();
        assert!(diff <= 1e-8, "diff {}", diff);
    }
}
