//! Graph Memory Transformer.
//!
//! A decoder-only language model whose feed-forward sublayer is replaced by
//! a graph-routed memory cell: tokens are softly assigned to a bank of
//! unit-norm centroids, diffused one hop over a learned directed transition
//! matrix, re-scored against the centroids by a query/key projection, and
//! the gated, normalized displacement between the resulting target and source
//! memory states is added to the residual stream.
//!
//! The crate also carries the auxiliary objectives, per-forward centroid
//! write-back, periodic maintenance (dead reset and similarity merge), a
//! training harness with a dense-FFN baseline, multiple-choice scoring and
//! routing diagnostics.

pub mod config;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod maintenance;
pub mod memory_cell;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod training;

pub use error::{GmtError, Result};
pub use numerics::{Matrix, Tape, Var};
