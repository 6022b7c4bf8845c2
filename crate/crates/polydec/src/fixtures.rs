//! Shared unit-test fixtures: the running two-output cubic example and
//! random generators whose graded conversions are IEEE-exact.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::polymap::{multinomial, DecoupledModel, PolyMap, Term};

/// The running example map:
/// f₁ = −3u₁³ −9u₁²u₂ −27u₁u₂² −15u₂³ −8u₁² −8u₁u₂ −20u₂² +3u₁ +9u₂,
/// f₂ = −7u₁³ −6u₁²u₂ +6u₁u₂² +7u₂³ +10u₁² +16u₁u₂ +10u₂² −3u₂.
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

/// The known decoupled form of [`example_map`]: r = 3 with
/// g₁(t) = t³−2t²−t, g₂(t) = t³−4t²+t, g₃(t) = t³+2t²−2t.
pub fn example_model() -> DecoupledModel<f64> {
    let v = DMatrix::from_row_slice(2, 3, &[2.0, -1.0, 1.0, 1.0, 1.0, 2.0]);
    let w = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, -2.0, -1.0, 0.0, 1.0]);
    let c = DMatrix::from_row_slice(3, 3, &[-1.0, -2.0, 1.0, 1.0, -4.0, 1.0, -2.0, 2.0, 1.0]);
    DecoupledModel::new(w, v, c).unwrap()
}

/// The two-branch truncation of [`example_model`] (third columns of W and V
/// dropped, g₃ removed); its expansion is generically identifiable at r = 2.
pub fn example_model_two_branch() -> DecoupledModel<f64> {
    let v = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, 1.0, 1.0]);
    let w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    let c = DMatrix::from_row_slice(2, 3, &[-1.0, -2.0, 1.0, 1.0, -4.0, 1.0]);
    DecoupledModel::new(w, v, c).unwrap()
}

/// Sampling points (0,0), (1,0), (0,1).
pub fn example_points() -> Vec<DVector<f64>> {
    vec![
        DVector::from_row_slice(&[0.0, 0.0]),
        DVector::from_row_slice(&[1.0, 0.0]),
        DVector::from_row_slice(&[0.0, 1.0]),
    ]
}

/// Random map whose coefficients are small integer multiples of the
/// multinomial count of their monomial, so graded round trips are exact.
pub fn random_exact_map<R: Rng>(m: usize, n: usize, d: usize, rng: &mut R) -> PolyMap<f64> {
    let mut terms = Vec::new();
    for i in 0..n {
        for s in 1..=d as u32 {
            crate::polymap::for_each_composition(m, s, |alpha| {
                let j: i64 = rng.random_range(-5..=5);
                if j != 0 {
                    let c = j as f64 * multinomial(alpha) as f64;
                    terms.push(Term::new(i, alpha, c));
                }
            });
        }
    }
    PolyMap::from_terms(m, n, d, terms).unwrap()
}

/// Random dense decoupled model with standard-normal entries.
pub fn random_model<R: Rng>(
    m: usize,
    n: usize,
    r: usize,
    d: usize,
    rng: &mut R,
) -> DecoupledModel<f64> {
    use crate::scalar::Scalar;
    let w = DMatrix::from_fn(n, r, |_, _| f64::standard_normal(rng));
    let v = DMatrix::from_fn(m, r, |_, _| f64::standard_normal(rng));
    let c = DMatrix::from_fn(r, d, |_, _| f64::standard_normal(rng));
    DecoupledModel::new(w, v, c).unwrap()
}
