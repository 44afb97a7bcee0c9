//! Monte Carlo solver for Robin and Dirichlet boundary-value problems of
//! divergence-form elliptic operators.
//!
//! The library simulates diffusions associated with `L = Σ ∂_i(a_ij ∂_j)` on a
//! bounded domain: the *reflected* process (pushed back along the conormal
//! direction `a·n` at the boundary, accumulating boundary local time) and the
//! *killed* process (stopped at first exit). Feynman–Kac path functionals of
//! these processes estimate
//!
//! * the Robin solution of `-Lu + λu = f`, `-(a∇u)·n + nu = ng`,
//! * the Dirichlet solution of `-Lu + λu = f`, `u = g` on the boundary,
//! * the resolvent `R_λ f` and the boundary potential `R_λ(g·σ)`.
//!
//! A deterministic finite-difference solver on boxes ([`fd_oracle`]) provides
//! ground truth for validation and for calibrating the discrete local-time
//! increment. The [`experiments`] module orchestrates the headline study:
//! pointwise convergence of Robin solutions to the Dirichlet solution as the
//! boundary penalty grows.

pub mod coefficients;
pub mod config;
pub mod error;
pub mod experiments;
pub mod fd_oracle;
pub mod feynman_kac;
pub mod geometry;
pub mod sde;

pub use coefficients::{CoefficientField, EllipticityReport};
pub use error::Error;
pub use feynman_kac::{Estimate, ProblemSpec};
pub use geometry::{Domain, Region};
pub use sde::{PathRecord, SimParams};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
