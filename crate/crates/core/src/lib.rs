//! Visual-contrast attention (VCA) with its reference baselines, a toy
//! Vision Transformer and a complexity harness.
//!
//! Everything is built on a small define-by-run autodiff tape in
//! [`tensor`]. [`attention`] holds the two baselines (multi-head
//! self-attention and differential attention), [`vca`] the two-stage
//! contrast attention, [`vit`] the backbone and trainer, and [`bench`] the
//! analytic and instrumented cost model.

pub mod attention;
pub mod bench;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod tensor;
pub mod vca;
pub mod vit;

pub use error::{Result, VcaError};
