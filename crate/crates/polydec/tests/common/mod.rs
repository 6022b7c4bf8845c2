//! Shared fixtures for the integration suites: the running two-output cubic
//! example with its known decoupled form, and random-map generators.
// Each integration test compiles this module separately and uses a subset.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use polydec::polymap::{for_each_composition, multinomial};
use polydec::{DecoupledModel, PolyMap, Term};
use rand::Rng;

pub fn example_map() -> PolyMap<f64> {
    let terms = vec![
        Term::new(0, &[3, 0], -3.0),
        Term::new(0, &[2, 1], -9.0),
        Term::new(0, &[1, 2], -27.0),
        Term::new(0, &[0, 3], -15.0),
        Term::new(0, &[2, 0], -8.0),
        Term::new(0, &[1, 1], -8.0),
        Term::new(0, &[0, 2], -20.0),
        Term::new(0, &[1, 0], 3.0),
        Term::new(0, &[0, 1], 9.0),
        Term::new(1, &[3, 0], -7.0),
        Term::new(1, &[2, 1], -6.0),
        Term::new(1, &[1, 2], 6.0),
        Term::new(1, &[0, 3], 7.0),
        Term::new(1, &[2, 0], 10.0),
        Term::new(1, &[1, 1], 16.0),
        Term::new(1, &[0, 2], 10.0),
        Term::new(1, &[0, 1], -3.0),
    ];
    PolyMap::from_terms(2, 2, 3, terms).unwrap()
}

pub fn example_model() -> DecoupledModel<f64> {
    let v = DMatrix::from_row_slice(2, 3, &[2.0, -1.0, 1.0, 1.0, 1.0, 2.0]);
    let w = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, -2.0, -1.0, 0.0, 1.0]);
    let c = DMatrix::from_row_slice(3, 3, &[-1.0, -2.0, 1.0, 1.0, -4.0, 1.0, -2.0, 2.0, 1.0]);
    DecoupledModel::new(w, v, c).unwrap()
}

/// Third columns of W and V dropped, g₃ removed: the generically
/// identifiable two-branch variant.
pub fn example_model_two_branch() -> DecoupledModel<f64> {
    let v = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, 1.0, 1.0]);
    let w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    let c = DMatrix::from_row_slice(2, 3, &[-1.0, -2.0, 1.0, 1.0, -4.0, 1.0]);
    DecoupledModel::new(w, v, c).unwrap()
}

pub fn example_points() -> Vec<DVector<f64>> {
    vec![
        DVector::from_row_slice(&[0.0, 0.0]),
        DVector::from_row_slice(&[1.0, 0.0]),
        DVector::from_row_slice(&[0.0, 1.0]),
    ]
}

/// Random map whose coefficients are integer multiples of their monomial's
/// multinomial count, keeping graded conversions IEEE-exact.
pub fn random_exact_map<R: Rng>(m: usize, n: usize, d: usize, rng: &mut R) -> PolyMap<f64> {
    let mut terms = Vec::new();
    for i in 0..n {
        for s in 1..=d as u32 {
            for_each_composition(m, s, |alpha| {
                let j: i64 = rng.random_range(-5..=5);
                if j != 0 {
                    terms.push(Term::new(i, alpha, j as f64 * multinomial(alpha) as f64));
                }
            });
        }
    }
    PolyMap::from_terms(m, n, d, terms).unwrap()
}

/// Dense random map with standard-normal coefficients.
pub fn random_dense_map<R: Rng>(m: usize, n: usize, d: usize, rng: &mut R) -> PolyMap<f64> {
    let mut terms = Vec::new();
    for i in 0..n {
        for s in 1..=d as u32 {
            for_each_composition(m, s, |alpha| {
                let c: f64 = rng.sample(rand_distr::StandardNormal);
                terms.push(Term::new(i, alpha, c));
            });
        }
    }
    PolyMap::from_terms(m, n, d, terms).unwrap()
}

pub fn random_model<R: Rng>(
    m: usize,
    n: usize,
    r: usize,
    d: usize,
    rng: &mut R,
) -> DecoupledModel<f64> {
    let normal = |rng: &mut R| -> f64 { rng.sample(rand_distr::StandardNormal) };
    let w = DMatrix::from_fn(n, r, |_, _| normal(rng));
    let v = DMatrix::from_fn(m, r, |_, _| normal(rng));
    let c = DMatrix::from_fn(r, d, |_, _| normal(rng));
    DecoupledModel::new(w, v, c).unwrap()
}
