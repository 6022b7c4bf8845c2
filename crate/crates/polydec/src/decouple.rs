//! End-to-end decoupling pipelines.
//!
//! Three routes recover `(W, V, C)` from a polynomial map: a CP decomposition
//! of the Jacobian tensor, a CP decomposition of the coefficient tensor, and
//! a coupled partially-symmetric decomposition that keeps the structure the
//! plain CPDs ignore. Plain CPDs can converge to perfectly fitting but
//! unstructured decompositions when uniqueness fails; the reports therefore
//! carry both the tensor fit and a structure residual, and the coupled
//! solver is the route that restores recovery in that regime.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cpd::{cp_als, solve_gram, CpdOptions};
use crate::error::{Error, Result};
use crate::polymap::{exponents_from_indices, next_tuple, DecoupledModel, PolyMap};
use crate::scalar::{fr, fu, Scalar};
use crate::tensor::DenseTensor;
use crate::tensorize::{
    block_offset, build_j, build_q, delta, h_factors, numerical_rank, rank_bound,
    structure_violation_q, symmetric_power_vec, z_factors, SamplePlan,
};

/// Which pipeline produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoupleMethod {
    JacobianCpd,
    CoefficientCpd,
    CoupledStructured,
}

impl DecoupleMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecoupleMethod::JacobianCpd => "jacobian-cpd",
            DecoupleMethod::CoefficientCpd => "coefficient-cpd",
            DecoupleMethod::CoupledStructured => "coupled-structured",
        }
    }
}

/// Solver bookkeeping attached to every report.
#[derive(Debug, Clone)]
pub struct Diagnostics<T> {
    pub restarts_used: usize,
    pub iterations: usize,
    pub seed: u64,
    pub converged: bool,
    /// Relative fit after every sweep or outer iteration of the winning
    /// restart.
    pub fit_history: Vec<T>,
}

/// Outcome of a decoupling pipeline.
#[derive(Debug, Clone)]
pub struct DecoupleReport<T> {
    pub model: DecoupledModel<T>,
    pub method: DecoupleMethod,
    /// Relative CPD reconstruction error of the fitted tensor.
    pub tensor_fit: T,
    /// Relative coefficient error between the input map and the expansion of
    /// the recovered model.
    pub map_residual: T,
    /// Distance of the fitted third factor from its structured form (zero by
    /// construction for the coupled solver).
    pub structure_residual: T,
    pub diagnostics: Diagnostics<T>,
}

/// Least-squares recovery of branch coefficients from derivative samples:
/// solves `g'(t_j) ≈ h_j` over the basis `{1, 2t, 3t², …, d·t^{d−1}}` with
/// `t_j = vᵀu^(j)`.
pub fn fit_g_from_h<T: Scalar>(
    v: &DVector<T>,
    h: &DVector<T>,
    plan: &SamplePlan<T>,
    d: usize,
) -> Result<DVector<T>> {
    let n_points = plan.num_points();
    if v.len() != plan.num_inputs() {
        return Err(Error::DimensionMismatch(format!(
            "direction of length {} with m = {}",
            v.len(),
            plan.num_inputs()
        )));
    }
    if h.len() != n_points {
        return Err(Error::DimensionMismatch(format!(
            "{} derivative samples for {} points",
            h.len(),
            n_points
        )));
    }
    if d == 0 || n_points < d {
        return Err(Error::DimensionMismatch(format!(
            "need at least d = {} points, got {}",
            d, n_points
        )));
    }
    let mut basis = DMatrix::zeros(n_points, d);
    for (j, u) in plan.points().iter().enumerate() {
        let t = v.dot(u);
        let mut pow = T::one();
        for s in 0..d {
            basis[(j, s)] = fu::<T>(s + 1) * pow;
            pow *= t;
        }
    }
    if numerical_rank(&basis) < d {
        return Err(Error::DegenerateBranch {
            branch: 0,
            degree: d,
        });
    }
    let svd = basis.svd(true, true);
    svd.solve(h, T::default_epsilon())
        .map_err(|e| Error::NoConvergence(e.to_string()))
}

/// Read branch coefficients off a structured δ-vector: the degree-s block of
/// `z` is projected onto the symmetric power of `v` (zero when that power
/// vanishes).
pub(crate) fn coefficients_from_z<T: Scalar>(
    z: &DVector<T>,
    v: &DVector<T>,
    m: usize,
    d: usize,
) -> DVector<T> {
    let mut coeffs = DVector::zeros(d);
    for s in 1..=d {
        let off = block_offset(m, s);
        let width = m.pow((s - 1) as u32);
        let pow = symmetric_power_vec(v, s - 1);
        let denom = pow.dot(&pow);
        if denom > T::zero() {
            let mut dot = T::zero();
            for c in 0..width {
                dot += z[off + c] * pow[c];
            }
            coeffs[s - 1] = dot / denom;
        }
    }
    coeffs
}

fn relative_matrix_distance<T: Scalar>(reference: &DMatrix<T>, other: &DMatrix<T>) -> T {
    let diff = (reference - other).norm();
    let scale = reference.norm();
    if scale > T::zero() {
        diff / scale
    } else {
        diff
    }
}

/// Decouple through the Jacobian tensor: CP decomposition of `J`, then
/// coefficient recovery per branch from the derivative samples. When a
/// branch sees coincident projected points the plan is resampled once with a
/// re-mixed seed before giving up.
pub fn decouple_via_j<T: Scalar>(
    f: &PolyMap<T>,
    plan: &SamplePlan<T>,
    r: usize,
    options: &CpdOptions<T>,
) -> Result<DecoupleReport<T>> {
    match decouple_via_j_once(f, plan, r, options) {
        Err(Error::DegenerateBranch { .. }) => {
            let fresh = SamplePlan::sample(
                f.num_inputs(),
                f.degree_bound(),
                plan.num_points(),
                options.seed.wrapping_add(0x5EED_0001),
            )?;
            decouple_via_j_once(f, &fresh, r, options)
        }
        other => other,
    }
}

fn decouple_via_j_once<T: Scalar>(
    f: &PolyMap<T>,
    plan: &SamplePlan<T>,
    r: usize,
    options: &CpdOptions<T>,
) -> Result<DecoupleReport<T>> {
    let j = build_j(f, plan)?;
    let cpd = cp_als(&j, r, options)?;
    let d = f.degree_bound();
    // Non-last factors come out of ALS with unit columns and fixed signs, so
    // W and V are already in the gauge; H carries the component magnitudes.
    let w = cpd.factors[0].clone();
    let v = cpd.factors[1].clone();
    let h_fit = &cpd.factors[2];
    let mut c = DMatrix::zeros(r, d);
    for k in 0..r {
        let vk = v.column(k).into_owned();
        let hk = h_fit.column(k).into_owned() * cpd.weights[k];
        let ck = fit_g_from_h(&vk, &hk, plan, d).map_err(|e| match e {
            Error::DegenerateBranch { degree, .. } => Error::DegenerateBranch { branch: k, degree },
            e => e,
        })?;
        for s in 0..d {
            c[(k, s)] = ck[s];
        }
    }
    let model = DecoupledModel::new(w, v, c)?.normalize_directions();
    let h_model = h_factors(&model, plan)?;
    let structure_residual = relative_matrix_distance(h_fit, &h_model);
    let map_residual = f.coefficient_distance(&model.expand());
    Ok(DecoupleReport {
        model,
        method: DecoupleMethod::JacobianCpd,
        tensor_fit: cpd.fit,
        map_residual,
        structure_residual,
        diagnostics: Diagnostics {
            restarts_used: options.restarts.max(1),
            iterations: cpd.iterations,
            seed: options.seed,
            converged: cpd.converged,
            fit_history: cpd.fit_history,
        },
    })
}

/// Decouple through the coefficient tensor: CP decomposition of `Q`, then
/// per-branch read-off of the coefficients from the structured blocks of the
/// third factor.
pub fn decouple_via_q<T: Scalar>(
    f: &PolyMap<T>,
    r: usize,
    options: &CpdOptions<T>,
) -> Result<DecoupleReport<T>> {
    let q = build_q(f);
    let cpd = cp_als(&q, r, options)?;
    let (m, d) = (f.num_inputs(), f.degree_bound());
    let w = cpd.factors[0].clone();
    let v = cpd.factors[1].clone();
    let z_fit = &cpd.factors[2];
    let mut c = DMatrix::zeros(r, d);
    for k in 0..r {
        let vk = v.column(k).into_owned();
        let zk = z_fit.column(k).into_owned() * cpd.weights[k];
        let ck = coefficients_from_z(&zk, &vk, m, d);
        for s in 0..d {
            c[(k, s)] = ck[s];
        }
    }
    let model = DecoupledModel::new(w, v, c)?.normalize_directions();
    let z_model = z_factors(&model);
    let structure_residual = relative_matrix_distance(z_fit, &z_model);
    let map_residual = f.coefficient_distance(&model.expand());
    Ok(DecoupleReport {
        model,
        method: DecoupleMethod::CoefficientCpd,
        tensor_fit: cpd.fit,
        map_residual,
        structure_residual,
        diagnostics: Diagnostics {
            restarts_used: options.restarts.max(1),
            iterations: cpd.iterations,
            seed: options.seed,
            converged: cpd.converged,
            fit_history: cpd.fit_history,
        },
    })
}

/// Reconstruction of the coefficient tensor from a model's structured
/// factors.
fn structured_q<T: Scalar>(model: &DecoupledModel<T>) -> DenseTensor<T> {
    let n = model.num_outputs();
    let m = model.num_inputs();
    let width = delta(m, model.degree_bound());
    let z = z_factors(model);
    let mut out = DenseTensor::zeros(&[n, m, width]);
    for k in 0..model.num_branches() {
        let term = DenseTensor::rank_one(
            T::one(),
            &[
                model.mixing().column(k).into_owned(),
                model.directions().column(k).into_owned(),
                z.column(k).into_owned(),
            ],
        );
        for (slot, &x) in out.data_mut().iter_mut().zip(term.data()) {
            *slot += x;
        }
    }
    out
}

struct CoupledState<T> {
    w: DMatrix<T>,
    v: DMatrix<T>,
    c: DMatrix<T>,
}

/// Derivative of the symmetric power entry `Π_j v_j^{β_j}` with respect to
/// `v_{j0}`, given the exponent counts of the tuple.
fn sym_power_derivative<T: Scalar>(v: &DVector<T>, beta: &[u32], j0: usize) -> T {
    let e = beta[j0];
    if e == 0 {
        return T::zero();
    }
    let mut prod = fu::<T>(e as usize);
    for (j, &ej) in beta.iter().enumerate() {
        let e_eff = if j == j0 { ej - 1 } else { ej };
        if e_eff > 0 {
            prod *= v[j].powi(e_eff as i32);
        }
    }
    prod
}

/// One damped Gauss-Newton step on V (W and C fixed); the step is applied
/// only when it decreases the objective, so the outer loop stays monotone.
fn gauss_newton_v<T: Scalar>(
    q: &DenseTensor<T>,
    state: &mut CoupledState<T>,
    lambda: &mut T,
    m: usize,
    d: usize,
) {
    let n = state.w.nrows();
    let r = state.w.ncols();
    let width = delta(m, d);
    let rows = n * m * width;
    let cols = m * r;

    let model = DecoupledModel::new(state.w.clone(), state.v.clone(), state.c.clone())
        .expect("state dims are consistent");
    let qhat = structured_q(&model);
    let mut residual = DVector::zeros(rows);
    for (i, (&a, &b)) in q.data().iter().zip(qhat.data()).enumerate() {
        residual[i] = a - b;
    }
    let base_obj = residual.norm_squared();

    // Jacobian of vec(Q̂) with respect to vec-by-column of V.
    let mut jac = DMatrix::zeros(rows, cols);
    for k in 0..r {
        let vk = state.v.column(k).into_owned();
        for s in 1..=d {
            let c_ks = state.c[(k, s - 1)];
            if c_ks == T::zero() {
                continue;
            }
            let off = block_offset(m, s);
            let block_width = m.pow((s - 1) as u32);
            let pow = symmetric_power_vec(&vk, s - 1);
            let mut tuple = vec![0usize; s - 1];
            for cidx in 0..block_width {
                let beta = exponents_from_indices(m, &tuple);
                let dpow: Vec<T> = (0..m)
                    .map(|j0| sym_power_derivative(&vk, &beta, j0))
                    .collect();
                for j in 0..m {
                    for i in 0..n {
                        let row = i + n * (j + m * (off + cidx));
                        let w_c = state.w[(i, k)] * c_ks;
                        for j0 in 0..m {
                            let mut val = vk[j] * dpow[j0];
                            if j == j0 {
                                val += pow[cidx];
                            }
                            jac[(row, k * m + j0)] += w_c * val;
                        }
                    }
                }
                next_tuple(&mut tuple, m);
            }
        }
    }

    let jtj = jac.transpose() * &jac;
    let jtr = jac.transpose() * &residual;
    for _ in 0..30 {
        let damped = &jtj + DMatrix::identity(cols, cols) * *lambda;
        let Some(step) = damped.cholesky().map(|ch| ch.solve(&jtr)) else {
            *lambda *= fu::<T>(4);
            continue;
        };
        let mut v_new = state.v.clone();
        for k in 0..r {
            for j in 0..m {
                v_new[(j, k)] += step[k * m + j];
            }
        }
        let candidate = DecoupledModel::new(state.w.clone(), v_new.clone(), state.c.clone())
            .expect("state dims are consistent");
        let obj = q
            .sub(&structured_q(&candidate))
            .map(|t| t.norm_squared())
            .unwrap_or(base_obj + T::one());
        if obj < base_obj {
            state.v = v_new;
            *lambda = (*lambda * fr::<T>(0.5)).max(fr::<T>(1e-12));
            return;
        }
        *lambda *= fu::<T>(4);
        if *lambda > fr::<T>(1e9) {
            *lambda = fr::<T>(1e9);
            break;
        }
    }
}

/// Joint damped Gauss-Newton step over all of (W, V, C). The block updates
/// alone converge only linearly and stall on desk-scale budgets; one joint
/// step per outer iteration restores fast local convergence while keeping
/// the iteration monotone (steps are accepted only on decrease).
fn joint_gauss_newton<T: Scalar>(
    q: &DenseTensor<T>,
    state: &mut CoupledState<T>,
    lambda: &mut T,
    m: usize,
    d: usize,
) {
    let n = state.w.nrows();
    let r = state.w.ncols();
    let width = delta(m, d);
    let rows = n * m * width;
    let w_cols = n * r;
    let v_cols = m * r;
    let c_cols = r * d;
    let cols = w_cols + v_cols + c_cols;

    let model = DecoupledModel::new(state.w.clone(), state.v.clone(), state.c.clone())
        .expect("state dims are consistent");
    let qhat = structured_q(&model);
    let mut residual = DVector::zeros(rows);
    for (i, (&a, &b)) in q.data().iter().zip(qhat.data()).enumerate() {
        residual[i] = a - b;
    }
    let base_obj = residual.norm_squared();

    let mut jac = DMatrix::zeros(rows, cols);
    for k in 0..r {
        let vk = state.v.column(k).into_owned();
        for s in 1..=d {
            let c_ks = state.c[(k, s - 1)];
            let off = block_offset(m, s);
            let block_width = m.pow((s - 1) as u32);
            let pow = symmetric_power_vec(&vk, s - 1);
            let mut tuple = vec![0usize; s - 1];
            for cidx in 0..block_width {
                let beta = exponents_from_indices(m, &tuple);
                let dpow: Vec<T> = (0..m)
                    .map(|j0| sym_power_derivative(&vk, &beta, j0))
                    .collect();
                for j in 0..m {
                    let vp = vk[j] * pow[cidx];
                    for i in 0..n {
                        let row = i + n * (j + m * (off + cidx));
                        // ∂/∂W[i,k]
                        jac[(row, k * n + i)] += c_ks * vp;
                        // ∂/∂C[k,s−1]
                        jac[(row, w_cols + v_cols + (s - 1) * r + k)] += state.w[(i, k)] * vp;
                        // ∂/∂V[j0,k]
                        let w_c = state.w[(i, k)] * c_ks;
                        if w_c != T::zero() {
                            for j0 in 0..m {
                                let mut val = vk[j] * dpow[j0];
                                if j == j0 {
                                    val += pow[cidx];
                                }
                                jac[(row, w_cols + k * m + j0)] += w_c * val;
                            }
                        }
                    }
                }
                next_tuple(&mut tuple, m);
            }
        }
    }

    let jtj = jac.transpose() * &jac;
    let jtr = jac.transpose() * &residual;
    for _ in 0..30 {
        let damped = &jtj + DMatrix::identity(cols, cols) * *lambda;
        let Some(step) = damped.cholesky().map(|ch| ch.solve(&jtr)) else {
            *lambda *= fu::<T>(4);
            continue;
        };
        let mut w_new = state.w.clone();
        let mut v_new = state.v.clone();
        let mut c_new = state.c.clone();
        for k in 0..r {
            for i in 0..n {
                w_new[(i, k)] += step[k * n + i];
            }
            for j in 0..m {
                v_new[(j, k)] += step[w_cols + k * m + j];
            }
            for s in 0..d {
                c_new[(k, s)] += step[w_cols + v_cols + s * r + k];
            }
        }
        let candidate = DecoupledModel::new(w_new.clone(), v_new.clone(), c_new.clone())
            .expect("state dims are consistent");
        let obj = q
            .sub(&structured_q(&candidate))
            .map(|t| t.norm_squared())
            .unwrap_or(base_obj + T::one());
        if obj < base_obj {
            state.w = w_new;
            state.v = v_new;
            state.c = c_new;
            *lambda = (*lambda * fr::<T>(0.5)).max(fr::<T>(1e-12));
            return;
        }
        *lambda *= fu::<T>(4);
        if *lambda > fr::<T>(1e9) {
            *lambda = fr::<T>(1e9);
            break;
        }
    }
}

/// Coupled partially-symmetric decomposition: block-coordinate descent over
/// (W, V, C) on the stacked coefficient objective. W and C updates are exact
/// linear least squares, V takes a damped Gauss-Newton step, and a joint
/// damped Gauss-Newton step over all parameters follows (the block updates
/// alone converge only linearly); every outer iteration then renormalizes
/// the directions, a map-invariant gauge move. All steps are monotone.
/// Restart 0 is seeded from the Jacobian pipeline, the rest are random; the
/// best map residual wins. Budget exhaustion is reported, not raised.
pub fn coupled_psym_cpd<T: Scalar>(
    f: &PolyMap<T>,
    r: usize,
    options: &CpdOptions<T>,
) -> Result<DecoupleReport<T>> {
    if r == 0 {
        return Err(Error::ZeroRank);
    }
    let (m, n, d) = (f.num_inputs(), f.num_outputs(), f.degree_bound());
    let q = build_q(f);
    let q_norm = q.norm();
    let tol = fr::<T>(options.tol);
    let restarts = options.restarts.max(1);

    struct BestRun<T> {
        model: DecoupledModel<T>,
        map_residual: T,
        fit: T,
        iterations: usize,
        converged: bool,
        history: Vec<T>,
    }
    let mut best: Option<BestRun<T>> = None;

    for restart in 0..restarts {
        let mut state = if restart == 0 {
            match seed_from_jacobian(f, r, options) {
                Some(model) => CoupledState {
                    w: model.mixing().clone(),
                    v: model.directions().clone(),
                    c: model.coefficients().clone(),
                },
                None => random_state(m, n, r, d, options.seed, restart),
            }
        } else {
            random_state(m, n, r, d, options.seed, restart)
        };

        let fit_of = |state: &CoupledState<T>| -> T {
            let model = DecoupledModel::new(state.w.clone(), state.v.clone(), state.c.clone())
                .expect("state dims are consistent");
            let diff = q
                .sub(&structured_q(&model))
                .map(|t| t.norm())
                .unwrap_or_else(|_| T::one());
            if q_norm > T::zero() {
                diff / q_norm
            } else {
                diff
            }
        };

        let mut fit = fit_of(&state);
        let mut history = vec![fit];
        let mut lambda = fr::<T>(1e-3);
        let mut lambda_joint = fr::<T>(1e-3);
        let mut converged = false;
        let mut iterations = 0;

        for outer in 0..options.max_iters {
            update_w(&q, &mut state, m, d);
            update_c(&q, &mut state, m, d);
            gauss_newton_v(&q, &mut state, &mut lambda, m, d);
            joint_gauss_newton(&q, &mut state, &mut lambda_joint, m, d);
            // Gauge: unit directions, compensation in C.
            let model = DecoupledModel::new(state.w.clone(), state.v.clone(), state.c.clone())
                .expect("state dims are consistent")
                .normalize_directions();
            state.v = model.directions().clone();
            state.c = model.coefficients().clone();

            let new_fit = fit_of(&state);
            history.push(new_fit);
            iterations = outer + 1;
            let change = (fit - new_fit).abs();
            fit = new_fit;
            if change < tol {
                converged = true;
                break;
            }
        }

        let model = DecoupledModel::new(state.w, state.v, state.c)
            .expect("state dims are consistent")
            .normalize_directions();
        let map_residual = f.coefficient_distance(&model.expand());
        let better = match &best {
            None => true,
            Some(b) => map_residual < b.map_residual,
        };
        if better {
            best = Some(BestRun {
                model,
                map_residual,
                fit,
                iterations,
                converged,
                history,
            });
        }
    }

    let best = best.expect("at least one restart runs");
    Ok(DecoupleReport {
        model: best.model,
        method: DecoupleMethod::CoupledStructured,
        tensor_fit: best.fit,
        map_residual: best.map_residual,
        structure_residual: T::zero(),
        diagnostics: Diagnostics {
            restarts_used: restarts,
            iterations: best.iterations,
            seed: options.seed,
            converged: best.converged,
            fit_history: best.history,
        },
    })
}

fn seed_from_jacobian<T: Scalar>(
    f: &PolyMap<T>,
    r: usize,
    options: &CpdOptions<T>,
) -> Option<DecoupledModel<T>> {
    let m = f.num_inputs();
    let d = f.degree_bound();
    let n_points = rank_bound(m, d).max(d);
    let plan = SamplePlan::sample(m, d, n_points, options.seed).ok()?;
    let mut opts = options.clone();
    opts.init = None;
    opts.restarts = options.restarts.clamp(1, 5);
    decouple_via_j(f, &plan, r, &opts).ok().map(|rep| rep.model)
}

fn random_state<T: Scalar>(
    m: usize,
    n: usize,
    r: usize,
    d: usize,
    seed: u64,
    restart: usize,
) -> CoupledState<T> {
    let mixed = seed
        .wrapping_add(0xC0FF_EE00)
        .wrapping_add((restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    CoupledState {
        w: DMatrix::from_fn(n, r, |_, _| T::standard_normal(&mut rng)),
        v: DMatrix::from_fn(m, r, |_, _| T::standard_normal(&mut rng)),
        c: DMatrix::from_fn(r, d, |_, _| T::standard_normal(&mut rng)),
    }
}

/// Exact least-squares update of W: `Q₍₁₎ ≈ W·Gᵀ` with `G` the Khatri-Rao
/// product of the structured factor and V.
fn update_w<T: Scalar>(q: &DenseTensor<T>, state: &mut CoupledState<T>, m: usize, d: usize) {
    let model = DecoupledModel::new(state.w.clone(), state.v.clone(), state.c.clone())
        .expect("state dims are consistent");
    let z = z_factors(&model);
    let r = state.w.ncols();
    let gram = (z.transpose() * &z).component_mul(&(state.v.transpose() * &state.v));
    // rhs[i,k] = Σ_{j,c} Q[i,j,c]·V[j,k]·Z[c,k]
    let n = state.w.nrows();
    let width = delta(m, d);
    let mut rhs = DMatrix::zeros(n, r);
    for k in 0..r {
        for c in 0..width {
            let zc = z[(c, k)];
            if zc == T::zero() {
                continue;
            }
            for j in 0..m {
                let vz = state.v[(j, k)] * zc;
                for i in 0..n {
                    rhs[(i, k)] += q.get(&[i, j, c]) * vz;
                }
            }
        }
    }
    if let Some(w) = solve_gram(&gram, &rhs) {
        if w.iter().all(|x| x.is_finite()) {
            state.w = w;
        }
    }
}

/// Exact least-squares update of C: degree by degree, the slab of Q is
/// projected onto the rank-one basis `w_k ∘ v_k ∘ v_k^{⊗(s−1)}`.
fn update_c<T: Scalar>(q: &DenseTensor<T>, state: &mut CoupledState<T>, m: usize, d: usize) {
    let r = state.w.ncols();
    let n = state.w.nrows();
    for s in 1..=d {
        let off = block_offset(m, s);
        let pows: Vec<DVector<T>> = (0..r)
            .map(|k| symmetric_power_vec(&state.v.column(k).into_owned(), s - 1))
            .collect();
        let mut gram = DMatrix::zeros(r, r);
        for a in 0..r {
            for b in 0..r {
                let ww = state.w.column(a).dot(&state.w.column(b));
                let vv = state.v.column(a).dot(&state.v.column(b));
                gram[(a, b)] = ww * vv * pows[a].dot(&pows[b]);
            }
        }
        let mut rhs = DVector::zeros(r);
        for k in 0..r {
            let mut acc = T::zero();
            for (c, &pc) in pows[k].iter().enumerate() {
                if pc == T::zero() {
                    continue;
                }
                for j in 0..m {
                    let vp = state.v[(j, k)] * pc;
                    for i in 0..n {
                        acc += q.get(&[i, j, off + c]) * state.w[(i, k)] * vp;
                    }
                }
            }
            rhs[k] = acc;
        }
        let rhs_m = DMatrix::from_fn(1, r, |_, k| rhs[k]);
        if let Some(sol) = solve_gram(&gram, &rhs_m) {
            if sol.iter().all(|x| x.is_finite()) {
                for k in 0..r {
                    state.c[(k, s - 1)] = sol[(0, k)];
                }
            }
        }
    }
}

/// Outcome of [`rank_one_extract`]: refusal is a value, not an error.
#[derive(Debug, Clone)]
pub enum RankOneOutcome<T> {
    /// The map is (numerically) a single branch `w·g(vᵀu)`; the model has
    /// r = 1 and `residual` is the verified map residual.
    RankOne {
        model: DecoupledModel<T>,
        residual: T,
    },
    /// The coefficient tensor is not rank-one; `residual` is the best
    /// rank-one fit achieved.
    NotRankOne { residual: T },
}

/// Detect the single-branch case: the coefficient tensor has rank at most
/// one exactly when the map is `w·g(vᵀu)`. Acceptance threshold 1e-8 on both
/// the rank-one fit and the verified map residual.
pub fn rank_one_extract<T: Scalar>(f: &PolyMap<T>) -> Result<RankOneOutcome<T>> {
    let threshold = fr::<T>(1e-8);
    let (m, n, d) = (f.num_inputs(), f.num_outputs(), f.degree_bound());
    let q = build_q(f);
    if q.norm() == T::zero() {
        let model = DecoupledModel::new(
            DMatrix::zeros(n, 1),
            DMatrix::zeros(m, 1),
            DMatrix::zeros(1, d),
        )?;
        return Ok(RankOneOutcome::RankOne {
            model,
            residual: T::zero(),
        });
    }
    let (vectors, sigma, residual) = crate::cpd::best_rank_one(&q)?;
    if residual > threshold {
        return Ok(RankOneOutcome::NotRankOne { residual });
    }
    let w = DMatrix::from_fn(n, 1, |i, _| vectors[0][i]);
    let v = vectors[1].clone();
    let z = vectors[2].clone() * sigma;
    let coeffs = coefficients_from_z(&z, &v, m, d);
    let c = DMatrix::from_fn(1, d, |_, s| coeffs[s]);
    let model = DecoupledModel::new(w, DMatrix::from_fn(m, 1, |j, _| v[j]), c)?;
    let map_residual = f.coefficient_distance(&model.expand());
    if map_residual > threshold {
        return Ok(RankOneOutcome::NotRankOne {
            residual: map_residual,
        });
    }
    Ok(RankOneOutcome::RankOne {
        model,
        residual: map_residual,
    })
}

/// Record of the exact relations between the two tensorizations.
#[derive(Debug, Clone)]
pub struct VerifyRecord<T> {
    /// `‖J − Q×₃Aᵀ‖ / ‖J‖`.
    pub identity_residual: T,
    /// Largest deviation of a Q tube from the structure subspace.
    pub structure_violation: T,
    /// Numerical rank of A and the bound M it is compared against.
    pub rank_a: usize,
    pub rank_bound: usize,
    /// `‖H − AᵀZ‖ / ‖H‖`: the derivative samples against the lifted
    /// structured factor (model given).
    pub factor_link_residual: Option<T>,
    /// `‖Q − ⟦W,V,Z⟧‖ / ‖Q‖`: the coefficient tensor against the model's
    /// structured decomposition (model given).
    pub coefficient_residual: Option<T>,
    /// `‖J − ⟦W,V,H⟧‖ / ‖J‖` (model given).
    pub jacobian_residual: Option<T>,
}

impl<T: Scalar> VerifyRecord<T> {
    /// Largest of all recorded residuals.
    pub fn max_residual(&self) -> T {
        let mut worst = self.identity_residual.max(self.structure_violation);
        for r in [
            self.factor_link_residual,
            self.coefficient_residual,
            self.jacobian_residual,
        ]
        .into_iter()
        .flatten()
        {
            worst = worst.max(r);
        }
        worst
    }
}

/// Check the cross-tensorization identities on a map, a plan, and optionally
/// a candidate model.
pub fn verify_relations<T: Scalar>(
    f: &PolyMap<T>,
    plan: &SamplePlan<T>,
    model: Option<&DecoupledModel<T>>,
) -> Result<VerifyRecord<T>> {
    let (m, d) = (f.num_inputs(), f.degree_bound());
    if plan.num_inputs() != m || plan.degree() != d {
        return Err(Error::DimensionMismatch(format!(
            "plan (m = {}, d = {}) does not match map (m = {}, d = {})",
            plan.num_inputs(),
            plan.degree(),
            m,
            d
        )));
    }
    let q = build_q(f);
    let j = build_j(f, plan)?;
    let qa = q.mode_n_product(&plan.matrix_a().transpose(), 2)?;
    let identity_residual = j.relative_distance(&qa)?;
    let structure_violation = structure_violation_q(&q, m, d)?;
    let rank_a = plan.numerical_rank_a();
    let bound = rank_bound(m, d);

    let (mut factor_link, mut coefficient, mut jac) = (None, None, None);
    if let Some(model) = model {
        if model.num_inputs() != m || model.num_outputs() != f.num_outputs() {
            return Err(Error::DimensionMismatch(format!(
                "model is {}→{} but map is {}→{}",
                model.num_inputs(),
                model.num_outputs(),
                m,
                f.num_outputs()
            )));
        }
        if model.degree_bound() != d {
            return Err(Error::DimensionMismatch(format!(
                "model degree {} but map degree {}",
                model.degree_bound(),
                d
            )));
        }
        let z = z_factors(model);
        let h = h_factors(model, plan)?;
        factor_link = Some(relative_matrix_distance(
            &h,
            &(plan.matrix_a().transpose() * &z),
        ));
        coefficient = Some(q.relative_distance(&structured_q(model))?);
        let mut jhat = DenseTensor::zeros(j.dims());
        for k in 0..model.num_branches() {
            let term = DenseTensor::rank_one(
                T::one(),
                &[
                    model.mixing().column(k).into_owned(),
                    model.directions().column(k).into_owned(),
                    h.column(k).into_owned(),
                ],
            );
            for (slot, &x) in jhat.data_mut().iter_mut().zip(term.data()) {
                *slot += x;
            }
        }
        jac = Some(j.relative_distance(&jhat)?);
    }

    Ok(VerifyRecord {
        identity_residual,
        structure_violation,
        rank_a,
        rank_bound: bound,
        factor_link_residual: factor_link,
        coefficient_residual: coefficient,
        jacobian_residual: jac,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpd::match_factors;
    use crate::fixtures;
    use crate::tensorize::build_sample_plan;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn branch_coefficients_from_worked_samples() {
        let plan = build_sample_plan(fixtures::example_points(), 2, 3).unwrap();
        let c = fit_g_from_h(&dv(&[2.0, 1.0]), &dv(&[-1.0, 3.0, -2.0]), &plan, 3).unwrap();
        assert_relative_eq!(c[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(c[1], -2.0, epsilon = 1e-12);
        assert_relative_eq!(c[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_samples_give_zero_coefficients() {
        let plan = build_sample_plan(fixtures::example_points(), 2, 3).unwrap();
        let c = fit_g_from_h(&dv(&[1.0, -1.0]), &dv(&[0.0, 0.0, 0.0]), &plan, 3).unwrap();
        assert!(c.iter().all(|&x| x.abs() <= 1e-14));
    }

    #[test]
    fn coefficient_synthesis_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..10 {
            let model = fixtures::random_model(3, 1, 1, 4, &mut rng);
            let plan = SamplePlan::<f64>::sample(3, 4, 9, rng.random()).unwrap();
            let h = h_factors(&model, &plan).unwrap();
            let v = model.directions().column(0).into_owned();
            let c = fit_g_from_h(&v, &h.column(0).into_owned(), &plan, 4).unwrap();
            for s in 0..4 {
                assert_relative_eq!(
                    c[s],
                    model.coefficients()[(0, s)],
                    max_relative = 1e-9,
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn degenerate_sampling_is_reported() {
        // All points project to the same t along (1, 0).
        let points = vec![dv(&[1.0, -3.0]), dv(&[1.0, 0.5]), dv(&[1.0, 2.0])];
        let plan = build_sample_plan(points, 2, 3).unwrap();
        let err = fit_g_from_h(&dv(&[1.0, 0.0]), &dv(&[1.0, 1.0, 1.0]), &plan, 3);
        assert!(matches!(err, Err(Error::DegenerateBranch { .. })));
    }

    #[test]
    fn jacobian_pipeline_recovers_single_branch() {
        let w = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let v = DMatrix::from_row_slice(2, 1, &[2.0, 1.0]);
        let c = DMatrix::from_row_slice(1, 3, &[-1.0, -2.0, 1.0]);
        let truth = DecoupledModel::new(w, v, c).unwrap();
        let f = truth.expand();
        let plan = SamplePlan::<f64>::sample(2, 3, 8, 3).unwrap();
        let report = decouple_via_j(&f, &plan, 1, &CpdOptions::default()).unwrap();
        assert!(
            report.map_residual <= 1e-8,
            "residual {}",
            report.map_residual
        );
        assert!(report.structure_residual <= 1e-6);
    }

    #[test]
    fn jacobian_pipeline_generic_two_branch_recovery() {
        // m = n = r = 2 is generically unique, so the plain CPD recovers the
        // model.
        let truth = fixtures::example_model_two_branch();
        let f = truth.expand();
        let plan = SamplePlan::<f64>::sample(2, 3, 10, 17).unwrap();
        let report = decouple_via_j(&f, &plan, 2, &CpdOptions::default()).unwrap();
        assert!(
            report.map_residual <= 1e-6,
            "residual {}",
            report.map_residual
        );
        let m = match_factors(
            &[
                truth.mixing().clone(),
                truth.directions().clone(),
                z_factors(&truth),
            ],
            &[
                report.model.mixing().clone(),
                report.model.directions().clone(),
                z_factors(&report.model),
            ],
        )
        .unwrap();
        assert!(m.congruence >= 0.999, "congruence {}", m.congruence);
    }

    #[test]
    fn jacobian_pipeline_flags_unstructured_minimizers() {
        // At r = 3 the fixture's Jacobian tensor has non-unique CPDs; every
        // converged run must either be structured (and then reproduce the
        // map) or carry a visible structure residual.
        let f = fixtures::example_map();
        let mut points = fixtures::example_points();
        points.extend(crate::tensorize::default_points::<f64>(2, 7, 5));
        let plan = build_sample_plan(points, 2, 3).unwrap();
        let mut exact_fits = 0;
        for seed in 0..6 {
            let opts = CpdOptions::default().with_seed(seed).with_restarts(1);
            let report = decouple_via_j(&f, &plan, 3, &opts).unwrap();
            if report.tensor_fit > 1e-8 {
                continue;
            }
            exact_fits += 1;
            // Certificate direction: a structured third factor implies the
            // map is reproduced. Unstructured minimizers are allowed and are
            // exactly what the structure residual flags.
            if report.structure_residual <= 1e-10 {
                assert!(
                    report.map_residual <= 1e-6,
                    "structured solution must reproduce the map (seed {seed})"
                );
            }
        }
        assert!(exact_fits > 0, "no run reached an exact tensor fit");
    }

    #[test]
    fn coefficient_pipeline_with_true_init_reproduces_coefficients() {
        let truth = fixtures::example_model();
        let f = fixtures::example_map();
        let init = vec![
            truth.mixing().clone(),
            truth.directions().clone(),
            z_factors(&truth),
        ];
        let opts = CpdOptions {
            init: Some(init),
            restarts: 1,
            ..CpdOptions::default()
        };
        let report = decouple_via_q(&f, 3, &opts).unwrap();
        assert!(report.tensor_fit <= 1e-12);
        assert!(report.map_residual <= 1e-10);
        // The fitted branch is (v/β, w/γ, c·γβ^s) for the signed column norms
        // β and γ; unwind both gauges and compare against the true C.
        let perm = match_factors(
            &[truth.directions().clone()],
            &[report.model.directions().clone()],
        )
        .unwrap()
        .permutation;
        for (k, &pk) in perm.iter().enumerate() {
            let v_true = truth.directions().column(k).into_owned();
            let w_true = truth.mixing().column(k).into_owned();
            let v_fit = report.model.directions().column(pk).into_owned();
            let w_fit = report.model.mixing().column(pk).into_owned();
            // v_fit is unit, so v_trueᵀv_fit is the signed norm β.
            let beta = v_true.dot(&v_fit);
            let gamma = w_true.dot(&w_fit) / w_fit.norm_squared();
            let mut pow = beta;
            for s in 0..3 {
                let unwound = report.model.coefficients()[(pk, s)] / (gamma * pow);
                assert_relative_eq!(
                    unwound,
                    truth.coefficients()[(k, s)],
                    max_relative = 1e-8,
                    epsilon = 1e-8
                );
                pow *= beta;
            }
        }
    }

    #[test]
    fn coefficient_pipeline_zero_map() {
        let f = PolyMap::<f64>::zero(2, 2, 2).unwrap();
        let report = decouple_via_q(&f, 1, &CpdOptions::default()).unwrap();
        assert_eq!(report.map_residual, 0.0);
        assert_eq!(report.structure_residual, 0.0);
        assert!(report.model.expand().num_terms() == 0);
    }

    #[test]
    fn coefficient_pipeline_generic_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = fixtures::random_model(2, 2, 2, 3, &mut rng).normalize_directions();
        let f = truth.expand();
        let report = decouple_via_q(&f, 2, &CpdOptions::default()).unwrap();
        assert!(
            report.map_residual <= 1e-6,
            "residual {}",
            report.map_residual
        );
        let m = match_factors(
            &[truth.directions().clone()],
            &[report.model.directions().clone()],
        )
        .unwrap();
        assert!(m.congruence >= 0.999);
    }

    #[test]
    fn coupled_solver_recovers_fixture() {
        let f = fixtures::example_map();
        let truth = fixtures::example_model();
        let opts = CpdOptions::default().with_seed(1);
        let report = coupled_psym_cpd(&f, 3, &opts).unwrap();
        assert!(
            report.map_residual <= 1e-6,
            "residual {}",
            report.map_residual
        );
        let m = match_factors(
            &[truth.mixing().clone(), truth.directions().clone()],
            &[
                report.model.mixing().clone(),
                report.model.directions().clone(),
            ],
        )
        .unwrap();
        assert!(m.congruence >= 0.999, "congruence {}", m.congruence);
    }

    #[test]
    fn coupled_solver_waring_quadratic() {
        use crate::polymap::Term;
        let f = PolyMap::from_terms(
            2,
            1,
            2,
            vec![
                Term::new(0, &[2, 0], -8.0),
                Term::new(0, &[1, 1], -8.0),
                Term::new(0, &[0, 2], -20.0),
            ],
        )
        .unwrap();
        let report = coupled_psym_cpd(&f, 2, &CpdOptions::default()).unwrap();
        assert!(
            report.map_residual <= 1e-8,
            "residual {}",
            report.map_residual
        );
        // Homogeneous input: the linear coefficients must vanish.
        for k in 0..2 {
            let c1: f64 = report.model.coefficients()[(k, 0)];
            assert!(c1.abs() <= 1e-8, "linear leak {}", c1);
        }
    }

    #[test]
    fn coupled_objective_is_monotone() {
        let f = fixtures::example_map();
        let opts = CpdOptions::default().with_seed(3).with_restarts(2);
        let report = coupled_psym_cpd(&f, 3, &opts).unwrap();
        for pair in report.diagnostics.fit_history.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-12,
                "objective rose: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn rank_one_extract_round_trip() {
        let w = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let v = DMatrix::from_row_slice(2, 1, &[2.0, 1.0]);
        let c = DMatrix::from_row_slice(1, 3, &[-1.0, -2.0, 1.0]);
        let truth = DecoupledModel::new(w, v, c).unwrap();
        let f = truth.expand();
        match rank_one_extract(&f).unwrap() {
            RankOneOutcome::RankOne { model, residual } => {
                assert!(residual <= 1e-8);
                // Same map, one branch.
                assert_eq!(model.num_branches(), 1);
                assert!(f.coefficient_distance(&model.expand()) <= 1e-8);
            }
            RankOneOutcome::NotRankOne { residual } => {
                panic!("rank-one input refused with residual {residual}");
            }
        }
    }

    #[test]
    fn rank_one_extract_refuses_full_rank_fixture() {
        let f = fixtures::example_map();
        match rank_one_extract(&f).unwrap() {
            RankOneOutcome::NotRankOne { residual } => assert!(residual > 1e-8),
            RankOneOutcome::RankOne { .. } => panic!("fixture is not rank-one"),
        }
    }

    #[test]
    fn rank_one_extract_zero_map() {
        let f = PolyMap::<f64>::zero(3, 2, 2).unwrap();
        match rank_one_extract(&f).unwrap() {
            RankOneOutcome::RankOne { model, residual } => {
                assert_eq!(residual, 0.0);
                assert!(model.mixing().iter().all(|&x| x == 0.0));
            }
            _ => panic!("zero map has rank ≤ 1"),
        }
    }

    #[test]
    fn rank_one_extract_agrees_with_q_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let truth = fixtures::random_model(3, 2, 1, 3, &mut rng);
        let f = truth.expand();
        let extract = match rank_one_extract(&f).unwrap() {
            RankOneOutcome::RankOne { model, .. } => model,
            _ => panic!("single-branch input"),
        };
        let report = decouple_via_q(&f, 1, &CpdOptions::default()).unwrap();
        let m = match_factors(
            &[extract.directions().clone(), extract.mixing().clone()],
            &[
                report.model.directions().clone(),
                report.model.mixing().clone(),
            ],
        )
        .unwrap();
        assert!(m.congruence >= 0.999);
        assert!(report.map_residual <= 1e-8);
    }

    #[test]
    fn verification_record_on_fixture() {
        let f = fixtures::example_map();
        let model = fixtures::example_model();
        let plan = build_sample_plan(fixtures::example_points(), 2, 3).unwrap();
        let record = verify_relations(&f, &plan, Some(&model)).unwrap();
        assert!(record.identity_residual <= 1e-12);
        assert_eq!(record.structure_violation, 0.0);
        assert_eq!(record.rank_a, 3);
        assert_eq!(record.rank_bound, 6);
        assert!(record.factor_link_residual.unwrap() <= 1e-12);
        assert!(record.coefficient_residual.unwrap() <= 1e-12);
        assert!(record.jacobian_residual.unwrap() <= 1e-12);
        assert!(record.max_residual() <= 1e-12);
    }

    #[test]
    fn verification_detects_perturbed_model() {
        let f = fixtures::example_map();
        let model = fixtures::example_model();
        let mut w = model.mixing().clone();
        w[(0, 0)] += 1.0;
        let bad = DecoupledModel::new(w, model.directions().clone(), model.coefficients().clone())
            .unwrap();
        let plan = build_sample_plan(fixtures::example_points(), 2, 3).unwrap();
        let record = verify_relations(&f, &plan, Some(&bad)).unwrap();
        assert!(record.coefficient_residual.unwrap() > 1e-3);
    }

    #[test]
    fn verification_random_plan_full_rank() {
        let f = fixtures::example_map();
        let plan = SamplePlan::<f64>::sample(2, 3, 6, 123).unwrap();
        let record = verify_relations(&f, &plan, None).unwrap();
        assert!(record.identity_residual <= 1e-9);
        assert_eq!(record.rank_a, 6);
    }

    #[test]
    fn report_map_residual_is_recomputable() {
        let f = fixtures::example_map();
        let report = coupled_psym_cpd(&f, 3, &CpdOptions::default().with_seed(2)).unwrap();
        let recomputed = f.coefficient_distance(&report.model.expand());
        assert!((recomputed - report.map_residual).abs() <= 1e-12);
    }
}
