//! Numerical laboratory for the Lane–Emden system
//! `-Δu = v^p`, `-Δv = u^{q_ε}` near the critical hyperbola.
//!
//! The crate computes the radial ground state of the limit problem on ℝ^N,
//! Green's and Robin functions (including the iterated Green's function for
//! small `p`), solutions on balls and boxes along decreasing ε, and numerical
//! checks of the blow-up laws that connect them.

pub mod asymptotics;
pub mod boxgreen;
pub mod bundle;
pub mod bvp;
pub mod error;
pub mod green;
pub mod ground_state;
pub mod hyperbola;
pub mod identities;
pub mod iterated;
pub mod linalg;
pub mod ode;
pub mod poisson;
pub mod quadrature;
pub mod special;

pub use error::{LabError, Result};
pub use hyperbola::{classify_regime, critical_q, qeps_from_eps, Regime, SystemParams};
