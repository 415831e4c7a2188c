//! Dynamic-watermarking attack detection for multi-area automatic generation
//! control (AGC).
//!
//! The crate builds linearized load-frequency-control models of interconnected
//! grids, simulates them under decentralized AGC with a private watermark
//! superimposed on the generator setpoints, tampers with the reported sensor
//! data through several attack templates, and detects the tampering with two
//! Kalman-residual tests. A regression-based detector is included as the
//! comparison baseline.
//!
//! Module map:
//!
//! * [`lti`] – state-space containers, discretization, interconnection,
//!   minimal realization and the discrete Riccati equation.
//! * [`grid`] – parametric multi-area model builder and presets.
//! * [`agc`] – the per-area AGC chain and the watermark source.
//! * [`sim`] – seeded closed-loop simulation and trace export.
//! * [`attacks`] – sensor-side attack templates.
//! * [`detector`] – the watermark detector and its threshold calibration.
//! * [`baseline`] – the lagged-regression detector.
//! * [`eval`] – robustness indicator, detection delay, NRG sweeps.
//! * [`config`] – the scenario file format used by the CLI.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agc;
pub mod attacks;
pub mod baseline;
pub mod cli;
pub mod config;
pub mod detector;
mod error;
pub mod eval;
pub mod grid;
pub mod lti;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
