//! Dataset parsing and synthetic data generation.
//!
//! Trees arrive as s-expressions ([`sexpr`]), molecules as JSON lines
//! ([`molecules`]); both load into the host-value maps the models consume.
//! [`synthetic`] generates random tree shapes, labeled sentiment trees,
//! and token trees for benchmarks.

pub mod molecules;
pub mod sexpr;
pub mod synthetic;
