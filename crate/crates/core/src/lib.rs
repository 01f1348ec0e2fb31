//! Penalised and multivalued backward stochastic differential equations.
//!
//! Exact Moreau-Yosida primitives ([`convex`]), drivers and their mollified
//! approximations ([`generator`]), Brownian ensembles with an increasing
//! clock ([`sim`]), the backward Euler solver ([`engine`]), brute-force
//! references ([`oracle`]), the verification checks ([`verify`]), property
//! suites ([`suites`]) and run configuration and artifacts ([`config`], [`io`]).

// NaN must fail the domain checks, hence !(x > 0)
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod convex;
pub mod engine;
pub mod error;
pub mod exec;
pub mod generator;
pub mod io;
pub mod oracle;
pub mod quadrature;
pub mod regression;
pub mod sim;
pub mod suites;
pub mod verify;

pub use error::{Error, Result};
pub use exec::Exec;
