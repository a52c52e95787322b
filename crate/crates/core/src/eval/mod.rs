//! Metrics over the model's top-K lists: sequence recall, top-K mass, the
//! click-count, click-order and per-position click estimates derived from
//! the top-K sequences, binary perplexity, AUC and constant baselines.

mod oracle;

use std::collections::BTreeMap;

use crate::beam::{rank_order, ScoredSequence};
use crate::clicklog::{is_ordered, ClickSequence, QuerySession};
use crate::error::{Error, Result};

pub use oracle::{
    oracle_click_marginals, oracle_task_probs, simulator_oracle_distribution, OracleDistribution, OracleTaskProbs,
};

/// Probabilities are clamped to `[EPS, 1 − EPS]` before any logarithm.
pub const EPS: f64 = 1e-10;

/// Click counts `0..=MAX_L` are evaluated for the `≤ L clicks` task.
pub const MAX_L: usize = 5;

/// One evaluated session: what was observed and the model's top-K list for its page.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub session_id: u64,
    pub observed: ClickSequence,
    pub top_k: Vec<ScoredSequence>,
}

impl EvalRecord {
    /// 1-based rank of the observed sequence in the top-K list.
    pub fn rank(&self) -> Option<usize> {
        self.top_k
            .iter()
            .position(|s| s.sequence == self.observed)
            .map(|i| i + 1)
    }
}

pub fn recall_at_k(records: &[EvalRecord], k: usize) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records
        .iter()
        .filter(|r| r.rank().is_some_and(|rank| rank <= k))
        .count();
    hits as f64 / records.len() as f64
}

/// Recall at `k = 1..=max_k`, computed from one pass over the ranks.
pub fn recall_curve(records: &[EvalRecord], max_k: usize) -> Vec<f64> {
    let mut hits = vec![0usize; max_k + 1];
    for r in records {
        if let Some(rank) = r.rank().filter(|&rank| rank <= max_k) {
            hits[rank] += 1;
        }
    }
    let n = records.len().max(1) as f64;
    let mut acc = 0;
    (1..=max_k)
        .map(|k| {
            acc += hits[k];
            acc as f64 / n
        })
        .collect()
}

pub fn topk_mass(top_k: &[ScoredSequence], k: usize) -> f64 {
    top_k.iter().take(k).map(ScoredSequence::probability).sum()
}

/// Probability of at most `l` clicks, summed over the top-K list.
pub fn prob_clicks_le(top_k: &[ScoredSequence], l: usize) -> f64 {
    top_k
        .iter()
        .filter(|s| s.sequence.len() <= l)
        .map(ScoredSequence::probability)
        .sum()
}

/// Probability of a non-consecutive (not strictly top-down) click sequence.
pub fn prob_nonconsecutive(top_k: &[ScoredSequence]) -> f64 {
    top_k
        .iter()
        .filter(|s| !is_ordered(s.sequence.positions()))
        .map(ScoredSequence::probability)
        .sum()
}

/// Click probability of each of the `n` positions: the mass of the top-K
/// sequences containing it (each sequence counted once).
pub fn click_prob_positions(top_k: &[ScoredSequence], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for s in top_k {
        let p = s.probability();
        let mut seen = vec![false; n];
        for &pos in s.sequence.positions() {
            let i = pos as usize - 1;
            if i < n && !seen[i] {
                seen[i] = true;
                out[i] += p;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryPrediction {
    pub p: f64,
    pub y: bool,
}

impl BinaryPrediction {
    pub fn new(p: f64, y: bool) -> Self {
        BinaryPrediction { p, y }
    }
}

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// `2^(−mean log₂ likelihood)` of binary outcomes.
pub fn binary_perplexity(predictions: &[BinaryPrediction]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Invalid("perplexity of an empty prediction set".into()));
    }
    let bits: f64 = predictions
        .iter()
        .map(|b| {
            let p = clamp_probability(b.p);
            if b.y {
                p.log2()
            } else {
                (1.0 - p).log2()
            }
        })
        .sum();
    Ok((-bits / predictions.len() as f64).exp2())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClickPerplexity {
    pub per_position: Vec<f64>,
    pub mean: f64,
}

/// Perplexity per position (`per_position[i]` holds every session's
/// prediction for position `i + 1`), averaged over positions.
pub fn click_perplexity(per_position: &[Vec<BinaryPrediction>]) -> Result<ClickPerplexity> {
    if per_position.is_empty() {
        return Err(Error::Invalid("no positions".into()));
    }
    let per_position = per_position
        .iter()
        .map(|p| binary_perplexity(p))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_position.iter().sum::<f64>() / per_position.len() as f64;
    Ok(ClickPerplexity { per_position, mean })
}

/// Area under the ROC curve as the Mann–Whitney statistic, ties counted half.
pub fn auc(predictions: &[BinaryPrediction]) -> Result<f64> {
    let n_pos = predictions.iter().filter(|b| b.y).count();
    let n_neg = predictions.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid("AUC needs both positive and negative labels".into()));
    }
    let mut idx: Vec<usize> = (0..predictions.len()).collect();
    idx.sort_by(|&a, &b| predictions[a].p.total_cmp(&predictions[b].p));
    // Sum of (average) ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && predictions[idx[j + 1]].p == predictions[idx[i]].p {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * idx[i..=j].iter().filter(|&&k| predictions[k].y).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Constant predictions estimated on the training sessions.
#[derive(Clone, Debug, PartialEq)]
pub struct NaiveBaselines {
    /// `p_clicks_le[l]` = fraction of sessions with at most `l` clicks, `l = 0..=MAX_L`.
    pub p_clicks_le: Vec<f64>,
    pub p_nonconsecutive: f64,
    /// Per-position fraction of sessions with a click on that position.
    pub click_rate: Vec<f64>,
}

pub fn naive_baselines(train: &[QuerySession], n_positions: usize) -> Result<NaiveBaselines> {
    if train.is_empty() {
        return Err(Error::Invalid("baselines need a non-empty training set".into()));
    }
    let n = train.len() as f64;
    let mut le = [0usize; MAX_L + 1];
    let mut nonconsecutive = 0usize;
    let mut clicked = vec![0usize; n_positions];
    for s in train {
        let seq = s.click_sequence();
        for (l, c) in le.iter_mut().enumerate() {
            if seq.len() <= l {
                *c += 1;
            }
        }
        if !seq.is_ordered() {
            nonconsecutive += 1;
        }
        for (i, c) in clicked.iter_mut().enumerate() {
            if seq.contains(i as u8 + 1) {
                *c += 1;
            }
        }
    }
    Ok(NaiveBaselines {
        p_clicks_le: le.iter().map(|&c| c as f64 / n).collect(),
        p_nonconsecutive: nonconsecutive as f64 / n,
        click_rate: clicked.iter().map(|&c| c as f64 / n).collect(),
    })
}

/// Training-set click sequences by descending frequency (ties: shorter, then
/// lexicographic). Predicting this list for every page is the best constant
/// top-K list.
pub fn constant_sequence_ranking(train: &[QuerySession]) -> Vec<(ClickSequence, u64)> {
    let mut counts: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
    for s in train {
        *counts.entry(s.click_sequence().into_inner()).or_default() += 1;
    }
    let mut ranked: Vec<(Vec<u8>, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then(a.0.len().cmp(&b.0.len()))
            .then_with(|| a.0.cmp(&b.0))
    });
    ranked.into_iter().map(|(s, c)| (ClickSequence::new(s), c)).collect()
}

/// Recall at `k = 1..=max_k` of the constant ranking.
pub fn constant_recall_curve(ranking: &[(ClickSequence, u64)], eval: &[QuerySession], max_k: usize) -> Vec<f64> {
    let index: BTreeMap<&[u8], usize> = ranking
        .iter()
        .take(max_k)
        .enumerate()
        .map(|(i, (s, _))| (s.positions(), i + 1))
        .collect();
    let mut hits = vec![0usize; max_k + 1];
    for s in eval {
        if let Some(&rank) = index.get(s.click_sequence().positions()) {
            hits[rank] += 1;
        }
    }
    let n = eval.len().max(1) as f64;
    let mut acc = 0;
    (1..=max_k)
        .map(|k| {
            acc += hits[k];
            acc as f64 / n
        })
        .collect()
}

/// Sorts scored sequences into the canonical order used by beam search.
pub fn sort_scored(list: &mut [ScoredSequence]) {
    list.sort_by(|a, b| rank_order(a.log_prob, a.sequence.positions(), b.log_prob, b.sequence.positions()));
}
