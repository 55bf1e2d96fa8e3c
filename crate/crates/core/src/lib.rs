//! Operator pencils of nonlocal elliptic boundary-value problems near conical points.
//!
//! The crate assembles the angular pencil `T(λ)` of a (possibly nonlocal) elliptic
//! problem in a union of plane angles, locates its eigenvalues with contour
//! integrals, extracts Jordan chains, turns them into singular functions
//! `r^{iλ} Σ (i ln r)^n / n! ψ^{k-n}(φ)`, and renders Fredholm verdicts on weight
//! lines `Im λ = a + 1 - l - 2m`. A finite-difference solver on truncated sectors
//! cross-checks the predicted singular exponents.
//!
//! Module map:
//!
//! - [`pencil`]: problem data model, collocation discretization, assembly of `T(λ)`
//!   and its exact λ-derivatives.
//! - [`nep`]: eigenvalue counting, contour-integral extraction, Newton refinement,
//!   line scans.
//! - [`multiplicity`]: nullspaces and canonical systems of Jordan chains.
//! - [`report`]: verdicts, strip scans, adjoint checks, singular functions.
//! - [`sector`]: finite-difference solver on truncated sectors.
//! - [`cli`]: problem files, command dispatch and report serialization.

pub mod cli;
pub mod linalg;
pub mod multiplicity;
pub mod nep;
pub mod pencil;
pub mod quadrature;
pub mod report;
pub mod sector;

pub use num_complex::Complex64 as C64;

/// Imaginary unit.
pub const I: C64 = C64::new(0.0, 1.0);

pub(crate) fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}
