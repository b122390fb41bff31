//! Speech depression detection toolkit: block-wise probing of frozen
//! foundation-model representations, class-balanced sub-dialogue
//! augmentation, a small Transformer detection head, multi-seed F1
//! evaluation, feature fusion and voting ensembles.
//!
//! ```text
//! manifest -> corpus -> backend (extract, pool, cache as FMAT)
//!                    -> augment (sub-dialogue plan)
//!                    -> detector (train per seed) -> evalharness (F1 stats, sweeps, votes, reports)
//! ```

pub mod augment;
pub mod backend;
pub mod corpus;
pub mod detector;
pub mod error;
pub mod evalharness;
mod fsutil;

pub use error::{Error, Result};
