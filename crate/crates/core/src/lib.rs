//! Numerical toolkit for the generalized ergodic problem `H(x, u, Du) = c` of contact
//! Hamilton-Jacobi equations on the flat torus `T^1` / `T^2`.
//!
//! The crate evolves discrete backward and forward solution semigroups of the Cauchy problem
//! `w_t + H(x, w, Dw) = c`, classifies their long-time behaviour to decide whether a level `c`
//! admits viscosity solutions, brackets the admissible interval `[c_l, c_r]`, and cross-checks
//! discrete minimizers against the contact characteristic system
//!
//! ```text
//! x' = H_p,   p' = -H_x - H_u p,   u' = p . H_p - (H - c).
//! ```
//!
//! Modules:
//! - [`hamiltonian`]: catalog of contact Hamiltonians, their Lagrangians, numeric Legendre transform.
//! - [`grid`]: periodic grids, grid functions, interpolation and differences.
//! - [`action_dp`]: implicit action functions by dynamic programming, minimizer backtracking.
//! - [`semigroup`]: one-step operators, long-run driver and property checks.
//! - [`characteristics`]: RK4 integration of the characteristic system and its invariants.
//! - [`ergodic`]: membership classification, interval bisection, min-max / max-min estimates.

pub mod action_dp;
pub mod characteristics;
pub mod ergodic;
pub mod grid;
pub mod hamiltonian;
pub mod semigroup;

pub use grid::{GridFunction, Point, TorusGrid};
pub use hamiltonian::{build_model, HamiltonianModel, ModelSpec};

/// Fixed float formatting for CSV artifacts: 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
