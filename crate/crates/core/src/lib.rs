//! Finite-rank spectral simulator for the three-dimensional Hartree equation
//! of a density operator with Coulomb interaction,
//!
//! ```text
//! i ∂t γ = [-Δ + w ⋆ ρ_γ, γ],   w(x) = ±|x|⁻¹,   ρ_γ(x) = γ(x, x),
//! ```
//!
//! instrumented to measure dispersive decay rates and the logarithmic phase
//! correction that makes the long-time profile converge.
//!
//! The density operator is carried in rank form `γ = Σ λ_j |u_j⟩⟨u_j|`; every
//! operator norm is evaluated from orbital Gram matrices.

pub mod error;
pub mod config;
pub mod coulomb;
pub mod crosscheck;
pub mod ensemble;
pub mod grid;
pub mod oracle;
pub mod propagator;
pub mod runner;
pub mod scattering;
pub mod snapshot;

pub use error::{Error, Result};
