//! Referee core for accuracy-versus-latency semantic segmentation contests.
//!
//! - [`labelmap`]: PNG label maps and the 14-class vocabulary.
//! - [`metrics`]: class union, Dice, mDSC, mean inference time and score.
//! - [`runner`] and [`worker`]: archive intake, sandboxed execution, output
//!   collection and the worker wire protocol ([`wire`]).
//! - [`referee`]: submission queue, qualification and the record store.
//! - [`leaderboard`]: award-track rankings and the daily progress series.
//! - [`fixtures`]: deterministic synthetic test sets.
//!
//! Per-image scoring and fixture rendering run on rayon when the default
//! `parallel` feature is enabled and fall back to a sequential loop otherwise.

pub mod fixtures;
pub mod labelmap;
pub mod leaderboard;
pub mod metrics;
pub mod referee;
pub mod runner;
pub mod sandbox;
pub mod wire;
pub mod worker;

pub use labelmap::{ClassId, LabelMap, LabelMapError};
pub use metrics::{DatasetScore, ImageScore, ScoringReport};
pub use runner::{RunLimits, RunResult, SolutionManifest};
