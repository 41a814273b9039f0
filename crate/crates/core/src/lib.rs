//! Backward-compatible embedding training with basis-transformation blocks.
//!
//! The crate trains toy embedding models whose upgrades stay compatible with
//! an older model's gallery: orthonormal blocks parameterized as `e^A` for
//! skew-symmetric `A` rearrange the new representation so its first entries
//! match the old one, with a handful of extra dimensions absorbing whatever
//! cannot be made compatible. Alongside the model live the competing
//! baselines (influence loss, zero-padded heads, contrastive regularization,
//! plain concatenation), a truncation-aware retrieval evaluator, and
//! numerical verifiers for the orthonormality, information-preservation, and
//! trade-off-bound claims the design rests on.
//!
//! Data-parallel inner loops (per-query ranking, rejection-sampling trials,
//! seed sweeps) run on rayon under the default `parallel` feature and fall
//! back to sequential execution without it; results are identical either way.

pub mod analysis;
pub mod data;
pub mod format;
pub mod grad;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod par;
pub mod retrieval;
pub mod train;
