//! Click Sequence Model toolkit.
//!
//! Learns a distribution over click sequences on a result page from query logs,
//! extracts the most probable sequences by beam search and evaluates them.

pub mod beam;
pub mod clicklog;
pub mod csm;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nncore;
pub mod patterns;

pub use clicklog::{ClickSequence, QuerySession, SessionStats, SERP_SIZE};
pub use error::{Error, Result};
