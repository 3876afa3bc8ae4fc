//! Magnetized two-dimensional Lorentz gas: a unit-speed particle moving
//! through Poisson-distributed circular obstacles under a perpendicular
//! magnetic field.
//!
//! The crate has three layers:
//! - exact microscopic dynamics ([`dynamics`], [`potential`], [`medium`]):
//!   cyclotron arcs between obstacles, event-based traversal of soft
//!   obstacles, and reproducible lazily-generated obstacle configurations;
//! - single-obstacle scattering ([`scattering`]): deflection angles,
//!   traversal times, cross-section tables with monotone-branch
//!   decomposition, and angle samplers;
//! - the backward flow and its Monte Carlo estimators ([`microsim`]):
//!   event logs, pathology detectors, and quenched-medium averages;
//! - angular-space kinetic solvers ([`kinetic`]): spectral collision
//!   kernels, memory-kernel stepping, and direct simulation sampling;
//! - shared numerics ([`vec2`], [`quad`], [`ode`], [`stats`]).

pub mod dynamics;
pub mod kinetic;
pub mod medium;
pub mod microsim;
pub mod ode;
pub mod potential;
pub mod quad;
pub mod scattering;
pub mod stats;
pub mod vec2;
