//! tailforge: a long-tailed classification toolkit.
//!
//! Builds long-tail class distributions (Pareto rank-frequency profiles and
//! consumption-frequency matching), then rebalances training in two phases:
//! Phase-I vanilla cross-entropy on everything; Phase-II on a balanced set
//! built by herding undersampling of head classes (with knowledge
//! distillation from the frozen Phase-I teacher) and visual-aware
//! multi-image CutMix oversampling of tail classes. A built-in two-layer
//! classifier with gradient-checked manual backprop makes the whole
//! pipeline runnable at desk scale, and a benchmark runner sweeps the
//! ablation arms into plot-ready CSV/JSON reports.

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod herding;
pub mod ltt1;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
