//! Reverse-mode automatic differentiation on dense f64 matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles; one
//! backward sweep per tape fills gradients for all reachable nodes. The
//! operator set is deliberately small: dense and sparse-dense products, the
//! edge-masked adjacency product that lets generator gradients flow through
//! a sampled view, elementwise maps, row reductions, and a straight-through
//! gate. [`ParamStore`] owns named trainable tensors together with their
//! Adam state, and [`grad_check`] verifies any tape-built scalar against
//! central finite differences.
//!
//! Everything is serial and deterministic: identical inputs and seeds
//! produce bit-identical values and gradients.

mod params;
mod tape;

pub use params::{grad_check, AdamConfig, GradCheckReport, ParamId, ParamStore, ParamVars};
pub use tape::{AutodiffError, Tape, Var};
