//! Decoupling of multivariate polynomial vector maps.
//!
//! The library rewrites a polynomial map `f: R^m → R^n` of degree ≤ d in the
//! decoupled form `f(u) = W·g(Vᵀu)`, where each branch `g_k` is a univariate
//! polynomial acting on one linear form `v_kᵀu`. Two tensorizations drive the
//! computation: the coefficient tensor `Q` (n×m×δ, slices are structured
//! coefficient matrices) and the Jacobian tensor `J` (n×m×N, slices are
//! Jacobian evaluations at sampling points). The two are linked exactly by a
//! Vandermonde-like matrix `A` through `J = Q ×₃ Aᵀ`, so CP decompositions of
//! either reveal the same `(W, V)`; a coupled partially-symmetric solver
//! recovers decompositions that plain CPD misses when uniqueness fails.
//!
//! Everything is generic over the working scalar (`f32` or `f64`) through the
//! [`Scalar`] trait; the `*64` aliases at the crate root pick `f64`.
//!
//! ```
//! use polydec::decouple::coupled_psym_cpd;
//! use polydec::{CpdOptions, PolyMap64, Term};
//!
//! // −8u₁² − 8u₁u₂ − 20u₂² as a single-output map of degree 2.
//! let f = PolyMap64::from_terms(
//!     2,
//!     1,
//!     2,
//!     vec![
//!         Term::new(0, &[2, 0], -8.0),
//!         Term::new(0, &[1, 1], -8.0),
//!         Term::new(0, &[0, 2], -20.0),
//!     ],
//! )?;
//! let report = coupled_psym_cpd(&f, 2, &CpdOptions::default())?;
//! assert!(report.map_residual < 1e-8);
//! let model = &report.model; // W, V, C with unit-norm directions
//! assert_eq!(model.num_branches(), 2);
//! # Ok::<(), polydec::Error>(())
//! ```

pub mod cpd;
pub mod decouple;
mod error;
pub mod polymap;
mod scalar;
pub mod tensor;
pub mod tensorize;

#[cfg(test)]
pub(crate) mod fixtures;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use cpd::{CpdFactors, CpdOptions};
pub use decouple::{DecoupleMethod, DecoupleReport, RankOneOutcome, VerifyRecord};
pub use polymap::{report_compression, DecoupledModel, GradedSymmetric, PolyMap, Term};
pub use tensor::DenseTensor;
pub use tensorize::SamplePlan;

/// Double-precision aliases for the main types.
pub type PolyMap64 = PolyMap<f64>;
pub type GradedSymmetric64 = GradedSymmetric<f64>;
pub type DecoupledModel64 = DecoupledModel<f64>;
pub type DenseTensor64 = DenseTensor<f64>;
pub type SamplePlan64 = SamplePlan<f64>;
pub type CpdFactors64 = CpdFactors<f64>;
pub type DecoupleReport64 = DecoupleReport<f64>;

/// Single-precision aliases.
pub type PolyMap32 = PolyMap<f32>;
pub type GradedSymmetric32 = GradedSymmetric<f32>;
pub type DecoupledModel32 = DecoupledModel<f32>;
pub type DenseTensor32 = DenseTensor<f32>;
pub type SamplePlan32 = SamplePlan<f32>;
pub type CpdFactors32 = CpdFactors<f32>;
