//! Overload probability estimation for electricity-distribution assets.
//!
//! Asset demand is modelled bottom-up: every small customer draws a random
//! smart-meter profile from its consumption bin, larger customers contribute
//! fixed telemetry or average-category traces. The probability that demand
//! exceeds the asset rating (positive overload) or falls below its negative
//! (negative overload, net export) is estimated with
//!
//! - a full-year reference method ([`estimators::run_reference`]),
//! - hierarchical Monte Carlo over sampled time steps ([`estimators::run_mc`]),
//! - importance sampling over spiky/smooth profile categories whose biasing
//!   probabilities come from a sequential cross-entropy optimizer
//!   ([`ce::ce_estimate`]) or from a generalized bin-level table
//!   ([`generalize`]).
//!
//! The [`bench`] module runs replicated campaigns and builds speed-up tables.

// `!(x > 0.0)` style checks are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod ce;
pub mod corpus;
pub mod demand;
mod error;
pub mod estimators;
pub mod generalize;
pub mod sampling;

pub use ce::{ce_estimate, CeConfig, CeIteration, CeOutcome, CeResult};
pub use corpus::{Bin, Corpus, CorpusSpec, Partition, Profile};
pub use demand::{Asset, AssetFile, Customer, PreparedAsset, ProfileSelection, TimeSample};
pub use error::{Error, Result};
pub use estimators::{EstimatorConfig, Method, RiskEstimate, StreamStats};
pub use generalize::GeneralizedBinProbs;
pub use sampling::{CategoryAssignment, ISParams, RngStream};

use serde::{Deserialize, Serialize};

/// Length of one time step in hours (quarter-hourly averages).
pub const STEP_HOURS: f64 = 0.25;

/// Overload direction.
///
/// `Pos` is demand above `+d_cap`, `Neg` is demand below `-d_cap`. Internally
/// both are handled as "severity above `d_cap`" with severity `sign() * D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "pos")]
    Pos,
    #[serde(rename = "neg")]
    Neg,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Pos, Direction::Neg];

    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Direction::Pos => 1.0,
            Direction::Neg => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Pos => "pos",
            Direction::Neg => "neg",
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pos" | "+" | "plus" => Ok(Direction::Pos),
            "neg" | "-" | "minus" => Ok(Direction::Neg),
            other => Err(Error::Config(format!("unknown direction `{other}`"))),
        }
    }
}
