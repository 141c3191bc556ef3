//! Regression trees whose splits minimize proper scoring rules.
//!
//! Each leaf of a [`PredictiveTree`] keeps the empirical distribution of the
//! training responses that reached it, so a prediction is a full [`Ecdf`]
//! rather than a point. Splits are chosen by minimizing the total in-sample
//! score of the two child ECDFs under one of the rules in [`ScoringRule`].
//!
//! The crate is organised as:
//!
//! - [`score`]: ECDFs and the SSE / CRPS / DSS / IS1 / IS2 kernels.
//! - [`tree`]: split search, relative-improvement pre-pruning, prediction.
//! - [`data`]: datasets, CSV ingestion and model persistence.
//! - [`synth`]: seeded generators for the piecewise lognormal benchmarks.
//! - [`bench`]: the replicated build/evaluate experiment and its statistics.

pub mod bench;
pub mod data;
mod error;
pub mod score;
pub mod synth;
pub mod tree;

pub use error::{Error, Result};
pub use score::{Ecdf, ScoreSummary, ScoringRule};
pub use tree::{PredictiveTree, SplitRule, TreeConfig};
pub use data::Dataset;
