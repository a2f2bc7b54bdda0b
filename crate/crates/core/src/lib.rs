//! Graph contrastive learning with an adversarially trained view generator.
//!
//! The library is organised around a small reverse-mode tape: the view
//! generator scores and stochastically drops edges, the target encoder embeds
//! both views, and the contrastive / KL objectives close the loop so that
//! generator gradients flow through the masked adjacency. Everything runs on
//! dense f64 tensors plus one sparse-dense product, sized for desk-scale
//! graphs rather than GPU batches.
//!
//! Modules:
//! - [`sparse`], [`graph`], [`dataset`]: CSR adjacency, synthetic graphs,
//!   splits, augmentations, and the on-disk dataset format.
//! - [`autodiff`]: tape, operator set, parameter store, Adam, and the
//!   finite-difference gradient checker.
//! - [`encoder`], [`generator`], [`losses`]: the two players and their
//!   objectives.
//! - [`trainer`]: the alternating min-max loop and its train log.
//! - [`eval`]: linear probe, mean classifier, link prediction metrics, and
//!   the generalization-gap series.
//! - [`theory`]: exact finite-population checks for the identities the
//!   framework relies on.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod encoder;
pub mod eval;
pub mod generator;
pub mod graph;
pub mod losses;
pub mod sparse;
pub mod theory;
pub mod trainer;

pub use graph::Graph;
pub use sparse::CsrMatrix;
