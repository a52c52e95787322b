//! Top-K click sequences by beam search, and an exhaustive enumerator used
//! as its oracle on small instances.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::clicklog::ClickSequence;
use crate::csm::{CsmModel, DecoderState};
use crate::error::{Error, Result};
use crate::nncore::{log_softmax, Forward, Val};
use crate::patterns::{PatternStats, SerpFeatures};

pub const DEFAULT_MAX_LEN: usize = 20;
pub const DEFAULT_ENUMERATION_BUDGET: u128 = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSequence {
    pub sequence: ClickSequence,
    pub log_prob: f64,
}

impl ScoredSequence {
    pub fn probability(&self) -> f64 {
        self.log_prob.exp()
    }
}

/// Descending log-probability, then shorter, then lexicographic positions.
pub fn rank_order(a_lp: f64, a: &[u8], b_lp: f64, b: &[u8]) -> Ordering {
    b_lp.total_cmp(&a_lp).then(a.len().cmp(&b.len())).then_with(|| a.cmp(b))
}

fn cmp_scored(a: &ScoredSequence, b: &ScoredSequence) -> Ordering {
    rank_order(a.log_prob, a.sequence.positions(), b.log_prob, b.sequence.positions())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub k: usize,
    pub beam_size: usize,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig::new(128)
    }
}

impl BeamConfig {
    /// Beam size equal to `k` and the default length cap.
    pub fn new(k: usize) -> Self {
        BeamConfig {
            k,
            beam_size: k,
            max_len: DEFAULT_MAX_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.beam_size == 0 || self.max_len == 0 {
            return Err(Error::Config("k, beam_size and max_len must all be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    /// At most `k` sequences, best first.
    pub sequences: Vec<ScoredSequence>,
    /// Fewer than `k` sequences could be completed within `max_len`.
    pub truncated: bool,
}

struct Entry {
    prefix: Vec<u8>,
    log_prob: f64,
    state: DecoderState<Val>,
}

pub fn beam_search(
    model: &CsmModel,
    stats: &PatternStats,
    query_id: u64,
    results: &[u64],
    config: &BeamConfig,
) -> Result<BeamResult> {
    config.validate()?;
    let features = model.featurize(stats, query_id, results)?;
    Ok(beam_search_features(model, &features, config))
}

/// Beam search over a featurized page. Every open prefix in the beam is
/// expanded by all `N + 1` outcomes; the `beam_size` best open children are
/// kept and completed sequences are pooled. The search stops once `k`
/// completed sequences all score at least as high as the best open prefix
/// (no extension can overtake them) or no open prefix is left.
pub fn beam_search_features(model: &CsmModel, features: &SerpFeatures, config: &BeamConfig) -> BeamResult {
    let n = model.n_positions();
    let eos = model.config.eos();
    let mut ops = Forward::new(&model.params);
    let enc = model.encode(&mut ops, features);
    let mut beam = vec![Entry {
        prefix: Vec::new(),
        log_prob: 0.0,
        state: model.decoder_init(&mut ops, &enc),
    }];
    let mut done: Vec<ScoredSequence> = Vec::new();

    while !beam.is_empty() {
        let mut children: Vec<(usize, u8, f64)> = Vec::new();
        let mut steps = Vec::with_capacity(beam.len());
        for (i, entry) in beam.iter().enumerate() {
            let step = model.decoder_step(&mut ops, &entry.state, &enc);
            let lp = log_softmax(&step.logits);
            done.push(ScoredSequence {
                sequence: ClickSequence::new(entry.prefix.clone()),
                log_prob: entry.log_prob + lp[eos],
            });
            if entry.prefix.len() < config.max_len {
                for p in 1..=n {
                    children.push((i, p as u8, entry.log_prob + lp[p - 1]));
                }
            }
            steps.push(step);
        }
        done.sort_by(cmp_scored);
        done.truncate(config.k);
        let kth = (done.len() == config.k).then(|| done[config.k - 1].log_prob);

        let key = |c: &(usize, u8, f64)| {
            let mut v = beam[c.0].prefix.clone();
            v.push(c.1);
            v
        };
        children.sort_by(|a, b| rank_order(a.2, &key(a), b.2, &key(b)));
        // Prefixes scoring below the k-th completed sequence can never enter the top k.
        if let Some(kth) = kth {
            children.retain(|c| c.2 >= kth);
        }
        children.truncate(config.beam_size);
        if let (Some(kth), Some(best)) = (kth, children.first()) {
            if kth >= best.2 {
                break;
            }
        }
        beam = children
            .iter()
            .map(|&(i, p, log_prob)| Entry {
                prefix: key(&(i, p, log_prob)),
                log_prob,
                state: steps[i].advance(p),
            })
            .collect();
    }
    let truncated = done.len() < config.k;
    BeamResult {
        sequences: done,
        truncated,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Enumeration {
    /// Every sequence of length ≤ `max_len`, best first.
    pub sequences: Vec<ScoredSequence>,
    /// Probability of clicking more than `max_len` times.
    pub open_mass: f64,
}

/// Scores every sequence of length ≤ `max_len` independently with
/// [`CsmModel::step_log_probs`]. Fails if `(N + 1)^max_len` exceeds `budget`.
pub fn exhaustive_enumerate(
    model: &CsmModel,
    stats: &PatternStats,
    query_id: u64,
    results: &[u64],
    max_len: usize,
    budget: u128,
) -> Result<Enumeration> {
    let n = model.n_positions();
    let needed = (n as u128 + 1).checked_pow(max_len as u32).unwrap_or(u128::MAX);
    if needed > budget {
        return Err(Error::Budget { needed, budget });
    }
    let features = model.featurize(stats, query_id, results)?;
    let mut sequences = Vec::new();
    let mut open_mass = 0.0;
    let mut layer: Vec<Vec<u8>> = vec![Vec::new()];
    for len in 0..=max_len {
        let mut next = Vec::new();
        for seq in &layer {
            let steps = model.step_log_probs(&features, seq);
            let log_prob: f64 = steps.iter().sum();
            if len == max_len {
                let prefix_lp = log_prob - steps[len];
                open_mass += prefix_lp.exp() * (1.0 - steps[len].exp());
            }
            sequences.push(ScoredSequence {
                sequence: ClickSequence::new(seq.clone()),
                log_prob,
            });
            if len < max_len {
                for p in 1..=n as u8 {
                    let mut s = seq.clone();
                    s.push(p);
                    next.push(s);
                }
            }
        }
        layer = next;
    }
    sequences.sort_by(cmp_scored);
    Ok(Enumeration { sequences, open_mass })
}

/// Formats a probability with six significant digits, `%g` style.
pub fn format_probability(p: f64) -> String {
    if p == 0.0 || !p.is_finite() {
        return format!("{p}");
    }
    let exp = p.abs().log10().floor() as i32;
    // Rounding may carry into the next decade (0.9999995 → 1.00000).
    let exp = if format!("{:.5e}", p).ends_with(&format!("e{}", exp + 1)) {
        exp + 1
    } else {
        exp
    };
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{p:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{p:.5e}");
        let (mantissa, e) = s.split_once('e').expect("scientific notation");
        let mantissa = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        let e: i32 = e.parse().expect("exponent");
        format!("{mantissa}e{}{:02}", if e < 0 { '-' } else { '+' }, e.abs())
    }
}

/// One `probability<TAB>positions` line per sequence, `EOS` for no clicks.
pub fn format_listing(sequences: &[ScoredSequence]) -> String {
    let mut out = String::new();
    for s in sequences {
        let _ = writeln!(out, "{}\t{}", format_probability(s.probability()), s.sequence);
    }
    out
}
