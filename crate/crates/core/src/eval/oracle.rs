//! Exact click-sequence distribution of the simulator's user model, derived
//! from its transition structure rather than by sampling.

use std::collections::BTreeMap;

use crate::clicklog::{ClickSequence, ModelKind, SimulatorConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct OracleDistribution {
    /// Sequences of length ≤ `max_len` with their exact probabilities,
    /// in descending probability.
    pub sequences: Vec<(ClickSequence, f64)>,
    /// Probability of sequences longer than `max_len`.
    pub tail_mass: f64,
}

impl OracleDistribution {
    pub fn probability(&self, seq: &[u8]) -> f64 {
        self.sequences
            .iter()
            .find(|(s, _)| s.positions() == seq)
            .map_or(0.0, |(_, p)| *p)
    }
}

#[derive(Clone, Copy)]
enum State {
    /// About to examine `cursor`.
    Scan { cursor: usize },
    /// A click was just recorded while the scan cursor is at `cursor`.
    Clicked { cursor: usize },
    /// Done with `cursor`, deciding whether to move on.
    Leave { cursor: usize },
}

struct Walker<'a> {
    cfg: &'a SimulatorConfig,
    probs: &'a [f64],
    max_len: usize,
    budget: u64,
    visited: u64,
    out: BTreeMap<Vec<u8>, f64>,
    tail: f64,
}

impl Walker<'_> {
    fn finish(&mut self, seq: &[u8], p: f64) {
        *self.out.entry(seq.to_vec()).or_default() += p;
    }

    fn click(&mut self, seq: &mut Vec<u8>, pos: usize, cursor: usize, p: f64) -> Result<()> {
        if seq.len() == self.max_len {
            self.tail += p;
            return Ok(());
        }
        seq.push(pos as u8);
        self.walk(State::Clicked { cursor }, seq, p)?;
        seq.pop();
        Ok(())
    }

    fn walk(&mut self, state: State, seq: &mut Vec<u8>, p: f64) -> Result<()> {
        if p == 0.0 {
            return Ok(());
        }
        self.visited += 1;
        if self.visited > self.budget {
            return Err(Error::Budget {
                needed: self.visited as u128,
                budget: self.budget as u128,
            });
        }
        let n = self.probs.len();
        let c = self.cfg.continuation;
        match state {
            State::Scan { cursor } => {
                let q = self.probs[cursor - 1];
                self.click(seq, cursor, cursor, p * q)?;
                self.walk(State::Leave { cursor }, seq, p * (1.0 - q))
            }
            State::Clicked { cursor } => {
                if seq.len() >= self.cfg.max_clicks {
                    self.finish(seq, p);
                    return Ok(());
                }
                let mut p = p;
                if self.cfg.kind == ModelKind::Cascade {
                    self.finish(seq, p * (1.0 - c));
                    p *= c;
                }
                if cursor > 1 {
                    let r = self.cfg.revisit;
                    let each = p * r / (cursor - 1) as f64;
                    for pos in 1..cursor {
                        self.click(seq, pos, cursor, each)?;
                    }
                    p *= 1.0 - r;
                }
                self.walk(State::Leave { cursor }, seq, p)
            }
            State::Leave { cursor } => {
                let mut p = p;
                if self.cfg.kind == ModelKind::PositionDecay {
                    self.finish(seq, p * (1.0 - c));
                    p *= c;
                }
                if cursor == n {
                    self.finish(seq, p);
                    Ok(())
                } else {
                    self.walk(State::Scan { cursor: cursor + 1 }, seq, p)
                }
            }
        }
    }
}

/// Enumerates every path of the user model on a page whose positions are
/// clicked with `click_probs`. Fails if more than `budget` states are visited.
pub fn simulator_oracle_distribution(
    config: &SimulatorConfig,
    click_probs: &[f64],
    max_len: usize,
    budget: u64,
) -> Result<OracleDistribution> {
    let mut w = Walker {
        cfg: config,
        probs: click_probs,
        max_len,
        budget,
        visited: 0,
        out: BTreeMap::new(),
        tail: 0.0,
    };
    let mut seq = Vec::new();
    if config.max_clicks == 0 || click_probs.is_empty() {
        w.finish(&seq, 1.0);
    } else {
        w.walk(State::Scan { cursor: 1 }, &mut seq, 1.0)?;
    }
    let mut sequences: Vec<(ClickSequence, f64)> = w.out.into_iter().map(|(s, p)| (ClickSequence::new(s), p)).collect();
    sequences.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(a.0.len().cmp(&b.0.len()))
            .then_with(|| a.0.positions().cmp(b.0.positions()))
    });
    Ok(OracleDistribution {
        sequences,
        tail_mass: w.tail,
    })
}

/// Exact probability that each position is clicked at least once.
///
/// For a target position the user model is run forward over states
/// (scan cursor, clicks so far) with a click on the target made absorbing,
/// so no enumeration of sequences is needed.
pub fn oracle_click_marginals(config: &SimulatorConfig, click_probs: &[f64]) -> Vec<f64> {
    let n = click_probs.len();
    let m = config.max_clicks;
    let c = config.continuation;
    let cascade = config.kind == ModelKind::Cascade;
    (1..=n)
        .map(|target| {
            if m == 0 {
                return 0.0;
            }
            let mut hit = 0.0;
            // scan[k]: mass at Scan(cursor) with k clicks, target not clicked yet.
            let mut scan = vec![0.0; m + 1];
            scan[0] = 1.0;
            for cursor in 1..=n {
                let q = click_probs[cursor - 1];
                let mut leave = vec![0.0; m + 1];
                let mut clicked = vec![0.0; m + 1];
                for k in 0..m {
                    leave[k] += scan[k] * (1.0 - q);
                    if cursor == target {
                        hit += scan[k] * q;
                    } else {
                        clicked[k + 1] += scan[k] * q;
                    }
                }
                leave[m] += scan[m];
                // Process clicks in increasing count: a revisit moves mass from k to k + 1.
                for k in 1..=m {
                    let mut p = clicked[k];
                    if p == 0.0 || k >= m {
                        continue;
                    }
                    if cascade {
                        p *= c;
                    }
                    if cursor > 1 {
                        let each = p * config.revisit / (cursor - 1) as f64;
                        for pos in 1..cursor {
                            if pos == target {
                                hit += each;
                            } else {
                                clicked[k + 1] += each;
                            }
                        }
                        p *= 1.0 - config.revisit;
                    }
                    leave[k] += p;
                }
                scan = leave;
                if !cascade {
                    for v in &mut scan {
                        *v *= c;
                    }
                }
            }
            hit
        })
        .collect()
}

/// Exact distribution of the number of clicks and probability of a
/// non-consecutive sequence under the user model.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleTaskProbs {
    /// `clicks[k]` = probability of exactly `k` clicks, `k` in `0..=max_clicks`.
    pub clicks: Vec<f64>,
    pub nonconsecutive: f64,
}

impl OracleTaskProbs {
    pub fn clicks_le(&self, l: usize) -> f64 {
        self.clicks.iter().take(l + 1).sum()
    }
}

/// Forward pass over (scan cursor, clicks so far, order broken?) states.
/// Scan clicks always land below every earlier click, so a sequence is
/// non-consecutive exactly when it contains a revisit.
pub fn oracle_task_probs(config: &SimulatorConfig, click_probs: &[f64]) -> OracleTaskProbs {
    let n = click_probs.len();
    let m = config.max_clicks;
    let c = config.continuation;
    let cascade = config.kind == ModelKind::Cascade;
    let mut done = vec![[0.0f64; 2]; m + 1];
    if m == 0 || n == 0 {
        done[0][0] = 1.0;
    } else {
        let mut scan = vec![[0.0f64; 2]; m + 1];
        scan[0][0] = 1.0;
        for cursor in 1..=n {
            let q = click_probs[cursor - 1];
            let mut leave = vec![[0.0f64; 2]; m + 1];
            let mut clicked = vec![[0.0f64; 2]; m + 1];
            for k in 0..m {
                for f in 0..2 {
                    leave[k][f] += scan[k][f] * (1.0 - q);
                    clicked[k + 1][f] += scan[k][f] * q;
                }
            }
            for k in 1..=m {
                for f in 0..2 {
                    let mut p = clicked[k][f];
                    if p == 0.0 {
                        continue;
                    }
                    if k == m {
                        done[k][f] += p;
                        continue;
                    }
                    if cascade {
                        done[k][f] += p * (1.0 - c);
                        p *= c;
                    }
                    if cursor > 1 {
                        clicked[k + 1][1] += p * config.revisit;
                        p *= 1.0 - config.revisit;
                    }
                    leave[k][f] += p;
                }
            }
            if !cascade {
                for (d, l) in done.iter_mut().zip(&mut leave) {
                    for f in 0..2 {
                        d[f] += l[f] * (1.0 - c);
                        l[f] *= c;
                    }
                }
            }
            if cursor == n {
                for (d, l) in done.iter_mut().zip(&leave) {
                    d[0] += l[0];
                    d[1] += l[1];
                }
            }
            scan = leave;
        }
    }
    OracleTaskProbs {
        clicks: done.iter().map(|d| d[0] + d[1]).collect(),
        nonconsecutive: done.iter().map(|d| d[1]).sum(),
    }
}
