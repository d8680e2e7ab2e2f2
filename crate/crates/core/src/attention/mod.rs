//! Spike-driven attention and the membrane rectifier that feeds it.

pub mod mprf;
pub mod qsdsa;

pub use mprf::{fuse_mprf, mprf_apply, MprfParams};
pub use qsdsa::{spike_product, AttentionKind, AttentionTriple, Qsdsa, QsdsaOutput};
