//! Multicontinuum homogenization for second-order elliptic problems with
//! high-contrast coefficients.
//!
//! The crate is organised bottom-up:
//!
//! * [`mesh`] builds the fine grid and the shifted partitions at the
//!   subcell scale `H_ε` and the coarse scale `H`.
//! * [`field`] generates coefficient fields and their two-continuum split.
//! * [`fem`] assembles bilinear finite element operators and solves SPD and
//!   equality-constrained systems.
//! * [`cells`] solves the constrained cell problems.
//! * [`downscale`] holds the averaging projections and the reconstruction
//!   operators.
//! * [`macroscale`] assembles effective tensors and the coupled macroscopic
//!   system.
//! * [`pipeline`] drives complete runs from a [`config::RunConfig`] and
//!   writes [`report`] rows.
//! * [`cli`] backs the `mchom` binary.

pub mod binfmt;
pub mod cache;
pub mod cells;
pub mod cli;
pub mod config;
pub mod downscale;
pub mod error;
pub mod fem;
pub mod field;
pub mod macroscale;
pub mod mesh;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
