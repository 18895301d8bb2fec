//! Kinetic Monte Carlo for the Boltzmann jump SDE.
//!
//! The velocity `Z_t` of a tagged particle jumps at the atoms of a Poisson
//! random measure thinned by `sigma(|Z - v|) f(t, X | v)`, while its position
//! follows free transport. The crate provides the collision geometry, kernel
//! families, density models, the truncated event-driven simulator, the
//! frozen-noise Picard scheme, a mean-field particle system and diagnostics
//! that check the weak-form identities numerically.

pub mod densities;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod kernels;
pub mod particles;
pub mod picard;
pub mod quadrature;
pub mod sde_engine;
pub mod stats;
pub mod truncation;

pub use error::{Error, Result};
pub use geometry::{AnglePair, Frame, Vec3};
pub use kernels::{Angular, KernelSpec};
