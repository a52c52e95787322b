//! Query-session click logs: the session representation, the tab-separated
//! log format, session statistics by click count and order, train/eval splitting, and a
//! seeded user simulator that produces logs with a known click distribution.

mod parse;
mod sim;

use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use parse::{parse_log, parse_log_str, write_log, write_log_string, ParseMode, ParseOutcome, SkippedRecord};
pub use sim::{simulate_log, ModelKind, Simulator, SimulatorConfig};

/// Number of results on a SERP.
pub const SERP_SIZE: usize = 10;

/// A single click on a SERP: when it happened and which position (1-based) was clicked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Click {
    pub time_passed: u64,
    pub position: u8,
}

/// One logged SERP impression.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySession {
    pub session_id: u64,
    /// Time of the query record within its session.
    pub query_time: u64,
    pub query_id: u64,
    pub region_id: u64,
    pub results: Vec<u64>,
    pub clicks: Vec<Click>,
}

impl QuerySession {
    /// Checks the structural invariants of a session: `SERP_SIZE` distinct results,
    /// click positions in range and click times non-decreasing.
    pub fn validate(&self) -> Result<()> {
        if self.results.len() != SERP_SIZE {
            return Err(Error::Invalid(format!(
                "session {} has {} results, expected {SERP_SIZE}",
                self.session_id,
                self.results.len()
            )));
        }
        for (i, r) in self.results.iter().enumerate() {
            if self.results[..i].contains(r) {
                return Err(Error::Invalid(format!(
                    "session {} lists document {r} twice",
                    self.session_id
                )));
            }
        }
        let mut last = self.query_time;
        for c in &self.clicks {
            if c.position == 0 || c.position as usize > SERP_SIZE {
                return Err(Error::Invalid(format!(
                    "session {} has click position {}",
                    self.session_id, c.position
                )));
            }
            if c.time_passed < last {
                return Err(Error::Invalid(format!(
                    "session {} has clicks out of time order",
                    self.session_id
                )));
            }
            last = c.time_passed;
        }
        Ok(())
    }

    pub fn click_sequence(&self) -> ClickSequence {
        click_sequence_of(self)
    }
}

/// Time-ordered clicked positions (1-based). The terminating EOS is implicit.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClickSequence(Vec<u8>);

impl ClickSequence {
    pub fn new(positions: Vec<u8>) -> Self {
        ClickSequence(positions)
    }

    pub fn empty() -> Self {
        ClickSequence(Vec::new())
    }

    pub fn positions(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Strictly increasing positions. Repeated positions are not ordered.
    pub fn is_ordered(&self) -> bool {
        is_ordered(&self.0)
    }

    pub fn contains(&self, position: u8) -> bool {
        self.0.contains(&position)
    }

    /// Truncates to at most `max_len` clicks; returns whether anything was cut.
    pub fn truncate(&mut self, max_len: usize) -> bool {
        let cut = self.0.len() > max_len;
        self.0.truncate(max_len);
        cut
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.0
    }
}

impl From<Vec<u8>> for ClickSequence {
    fn from(v: Vec<u8>) -> Self {
        ClickSequence(v)
    }
}

impl From<&[u8]> for ClickSequence {
    fn from(v: &[u8]) -> Self {
        ClickSequence(v.to_vec())
    }
}

impl fmt::Display for ClickSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("EOS");
        }
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

pub fn click_sequence_of(session: &QuerySession) -> ClickSequence {
    ClickSequence(session.clicks.iter().map(|c| c.position).collect())
}

pub fn is_ordered(positions: &[u8]) -> bool {
    positions.windows(2).all(|w| w[0] < w[1])
}

/// Row label of the last (open-ended) click-count bucket.
pub const STATS_MAX_CLICKS: usize = 10;

/// Session counts split by number of clicks (0..=9, 10+) and ordered/unordered.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStats {
    /// `counts[clicks][0]` ordered, `counts[clicks][1]` unordered.
    pub counts: [[u64; 2]; STATS_MAX_CLICKS + 1],
}

impl SessionStats {
    pub fn add(&mut self, seq: &ClickSequence) {
        let row = seq.len().min(STATS_MAX_CLICKS);
        let col = usize::from(!seq.is_ordered());
        self.counts[row][col] += 1;
    }

    pub fn ordered(&self, clicks: usize) -> u64 {
        self.counts[clicks.min(STATS_MAX_CLICKS)][0]
    }

    pub fn unordered(&self, clicks: usize) -> u64 {
        self.counts[clicks.min(STATS_MAX_CLICKS)][1]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn total_unordered(&self) -> u64 {
        self.counts.iter().map(|r| r[1]).sum()
    }

    /// Plain-text table with one row per click count.
    pub fn to_table(&self) -> String {
        let mut out = String::from("clicks\tordered\tunordered\n");
        for (i, row) in self.counts.iter().enumerate() {
            let label = if i == STATS_MAX_CLICKS {
                format!("{STATS_MAX_CLICKS}+")
            } else {
                i.to_string()
            };
            out.push_str(&format!("{label}\t{}\t{}\n", row[0], row[1]));
        }
        out.push_str(&format!("total\t{}\n", self.total()));
        out
    }
}

pub fn session_stats<'a>(sessions: impl IntoIterator<Item = &'a QuerySession>) -> SessionStats {
    let mut stats = SessionStats::default();
    for s in sessions {
        stats.add(&s.click_sequence());
    }
    stats
}

/// Splits time-ordered sessions: the first `⌊fraction·n⌋` for training, and a
/// seeded uniform sample (without replacement, kept in log order) of the rest for evaluation.
pub fn split_sessions(
    sessions: &[QuerySession],
    train_fraction: f64,
    eval_sample_size: usize,
    seed: u64,
) -> Result<(Vec<QuerySession>, Vec<QuerySession>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n_train = (train_fraction * sessions.len() as f64).floor() as usize;
    let rest = &sessions[n_train..];
    if eval_sample_size > rest.len() {
        return Err(Error::Config(format!(
            "eval sample of {eval_sample_size} requested from {} remaining sessions",
            rest.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, rest.len(), eval_sample_size).into_vec();
    picked.sort_unstable();
    let eval = picked.into_iter().map(|i| rest[i].clone()).collect();
    Ok((sessions[..n_train].to_vec(), eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(id: u64, positions: &[u8]) -> QuerySession {
        QuerySession {
            session_id: id,
            query_time: 0,
            query_id: 1,
            region_id: 0,
            results: (11..21).collect(),
            clicks: positions
                .iter()
                .enumerate()
                .map(|(i, &p)| Click {
                    time_passed: i as u64 + 1,
                    position: p,
                })
                .collect(),
        }
    }

    #[test]
    fn sequence_projection_keeps_repeats() {
        let mut s = session(1, &[]);
        s.clicks = vec![
            Click {
                time_passed: 3,
                position: 2,
            },
            Click {
                time_passed: 9,
                position: 1,
            },
            Click {
                time_passed: 12,
                position: 2,
            },
        ];
        assert_eq!(click_sequence_of(&s).positions(), &[2, 1, 2]);
        assert!(click_sequence_of(&session(2, &[])).is_empty());
        assert_eq!(click_sequence_of(&session(3, &[1, 4])).positions(), &[1, 4]);
    }

    #[test]
    fn ordered_means_strictly_increasing() {
        assert!(is_ordered(&[1, 3, 7]));
        assert!(!is_ordered(&[2, 1]));
        assert!(!is_ordered(&[2, 2]));
        assert!(is_ordered(&[]));
        assert!(is_ordered(&[5]));
    }

    #[test]
    fn stats_table_cells() {
        let sessions = [session(1, &[]), session(2, &[1]), session(3, &[2, 1])];
        let stats = session_stats(&sessions);
        assert_eq!(stats.ordered(0), 1);
        assert_eq!(stats.ordered(1), 1);
        assert_eq!(stats.unordered(2), 1);
        assert_eq!(stats.total(), 3);
        assert_eq!(session_stats(&[]), SessionStats::default());

        let long = session(4, &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 10, 10]);
        let stats = session_stats([&long]);
        assert_eq!(stats.unordered(10), 1);
    }

    #[test]
    fn split_takes_prefix_and_samples_remainder() {
        let sessions: Vec<_> = (1..=10).map(|i| session(i, &[])).collect();
        let (train, eval) = split_sessions(&sessions, 0.5, 2, 7).unwrap();
        assert_eq!(
            train.iter().map(|s| s.session_id).collect::<Vec<_>>(),
            vec![1, 2, 3, 4, 5]
        );
        assert_eq!(eval.len(), 2);
        assert!(eval.iter().all(|s| (6..=10).contains(&s.session_id)));
        let (_, again) = split_sessions(&sessions, 0.5, 2, 7).unwrap();
        assert_eq!(eval, again);
        assert!(split_sessions(&sessions, 0.5, 6, 7).is_err());
        assert!(split_sessions(&sessions, 1.0, 1, 7).is_err());
    }

    #[test]
    fn split_of_a_146m_session_log_is_arithmetic() {
        // 146278823 sessions halve into 73139411 / 73139412.
        let n: usize = 146_278_823;
        let n_train = (0.5 * n as f64).floor() as usize;
        assert_eq!(n_train, 73_139_411);
        assert_eq!(n - n_train, 73_139_412);
    }

    #[test]
    fn display_uses_eos_for_empty() {
        assert_eq!(ClickSequence::empty().to_string(), "EOS");
        assert_eq!(ClickSequence::new(vec![2, 1, 2]).to_string(), "2 1 2");
    }
}
