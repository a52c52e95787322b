use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::CsmModel;
use crate::clicklog::QuerySession;
use crate::error::{Error, Result};
use crate::nncore::{clip_global_norm, AdamConfig, AdamState, Grads, Tape};
use crate::patterns::{click_pattern, Pattern, PatternStats, SerpFeatures};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip: f64,
    /// Longer click sequences are truncated to this many clicks.
    pub max_seq_len: usize,
    /// Number of contiguous slices a minibatch is split into for parallel
    /// gradient computation. Fixed independently of the thread count so the
    /// summation order, and hence the result, never changes.
    pub grad_chunks: usize,
    /// Featurize each training session without its own contribution to the
    /// pattern counts, so training inputs look like those of unseen sessions.
    pub leave_one_out: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 5,
            lr: AdamConfig::default().lr,
            seed: 0,
            clip: 1.0,
            max_seq_len: 20,
            grad_chunks: 4,
            leave_one_out: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_chunks == 0 || self.max_seq_len == 0 {
            return Err(Error::Config(
                "batch_size, grad_chunks and max_seq_len must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || self.clip.is_nan() || self.clip <= 0.0 {
            return Err(Error::Config("lr and clip must be positive".into()));
        }
        Ok(())
    }
}

/// A result page and the click sequence observed on it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub query_id: u64,
    pub results: Vec<u64>,
    pub positions: Vec<u8>,
    /// Pattern this session added to the statistics, removed again when featurizing.
    pub counted_pattern: Option<Pattern>,
}

impl TrainingExample {
    pub fn from_session(session: &QuerySession) -> Self {
        TrainingExample {
            query_id: session.query_id,
            results: session.results.clone(),
            positions: session.click_sequence().into_inner(),
            counted_pattern: None,
        }
    }

    /// Marks the example as counted in the statistics it will be featurized with.
    pub fn counted(mut self) -> Self {
        self.counted_pattern = Some(click_pattern(&self.positions));
        self
    }

    pub fn features(&self, stats: &PatternStats) -> SerpFeatures {
        match self.counted_pattern {
            Some(p) => stats.featurize_serp_without(self.query_id, &self.results, p),
            None => stats.featurize_serp(self.query_id, &self.results),
        }
    }

    /// Builds examples, truncating sequences longer than `max_len`. With
    /// `leave_one_out` the sessions are taken to be counted in the statistics.
    /// Returns the examples and the number of truncated sequences.
    pub fn from_sessions(sessions: &[QuerySession], max_len: usize, leave_one_out: bool) -> (Vec<Self>, usize) {
        let mut truncated = 0;
        let examples = sessions
            .iter()
            .map(|s| {
                let mut ex = TrainingExample::from_session(s);
                if leave_one_out {
                    ex = ex.counted();
                }
                if ex.positions.len() > max_len {
                    ex.positions.truncate(max_len);
                    truncated += 1;
                }
                ex
            })
            .collect();
        (examples, truncated)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochInfo {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub train_loss: f64,
    pub held_out_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub curve: Vec<EpochInfo>,
    pub truncated: usize,
    pub steps: u64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,held_out_loss\n");
        for e in &self.curve {
            let held = e.held_out_loss.map(|v| format!("{v:.10}")).unwrap_or_default();
            s.push_str(&format!("{},{:.10},{}\n", e.epoch, e.train_loss, held));
        }
        s
    }
}

/// Minimizes the mean negative log-likelihood of the examples' click
/// sequences with Adam and global-norm clipping.
///
/// `curve[0]` holds the losses before training; every later entry holds the
/// mean minibatch loss seen during that epoch. On a non-finite loss or
/// gradient the function returns an error and leaves the parameters as they
/// were after the last good step.
pub fn train(
    model: &mut CsmModel,
    stats: &PatternStats,
    sessions: &[QuerySession],
    held_out: Option<&[QuerySession]>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if sessions.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    if stats.n_positions() != model.config.n_positions {
        return Err(Error::Shape("pattern stats and model disagree on N".into()));
    }
    let (mut examples, truncated) = TrainingExample::from_sessions(sessions, config.max_seq_len, config.leave_one_out);
    let held_out = held_out.map(|h| TrainingExample::from_sessions(h, config.max_seq_len, false).0);
    let held_loss = |m: &CsmModel| {
        held_out
            .as_ref()
            .filter(|h| !h.is_empty())
            .map(|h| m.mean_nll(stats, h))
    };

    let initial = model.mean_nll(stats, &examples);
    if !initial.is_finite() {
        return Err(Error::NonFinite("initial training loss".into()));
    }
    let mut curve = vec![EpochInfo {
        epoch: 0,
        train_loss: initial,
        held_out_loss: held_loss(model),
    }];

    let mut adam = AdamState::new(
        &model.params,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut chunk_grads: Vec<Grads> = (0..config.grad_chunks)
        .map(|_| Grads::zeros_like(&model.params))
        .collect();
    let mut total = Grads::zeros_like(&model.params);

    for epoch in 1..=config.epochs {
        examples.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in examples.chunks(config.batch_size) {
            let chunk_len = batch.len().div_ceil(config.grad_chunks);
            let params = &model.params;
            let losses: Vec<f64> = chunk_grads
                .par_iter_mut()
                .enumerate()
                .map(|(c, grads)| {
                    grads.clear();
                    let lo = (c * chunk_len).min(batch.len());
                    let hi = ((c + 1) * chunk_len).min(batch.len());
                    let mut sum = 0.0;
                    for ex in &batch[lo..hi] {
                        let features = ex.features(stats);
                        let mut tape = Tape::new(params);
                        let loss = model.sequence_loss(&mut tape, &features, &ex.positions);
                        sum += tape_value(&tape, loss);
                        tape.backward(loss, grads);
                    }
                    sum
                })
                .collect();
            let batch_loss: f64 = losses.iter().sum();
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss in epoch {epoch} (step {})",
                    adam.t + 1
                )));
            }
            total.clear();
            for g in &chunk_grads {
                total.add_assign(g);
            }
            total.scale(1.0 / batch.len() as f64);
            if !total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient in epoch {epoch} (step {})",
                    adam.t + 1
                )));
            }
            clip_global_norm(&mut total, config.clip);
            adam.step(&mut model.params, &total)?;
            loss_sum += batch_loss;
        }
        curve.push(EpochInfo {
            epoch,
            train_loss: loss_sum / examples.len() as f64,
            held_out_loss: held_loss(model),
        });
    }
    if !model.params.is_finite() {
        return Err(Error::NonFinite("parameters after training".into()));
    }
    Ok(TrainReport {
        curve,
        truncated,
        steps: adam.t,
    })
}

fn tape_value(tape: &Tape<'_>, v: crate::nncore::Var) -> f64 {
    use crate::nncore::Ops;
    tape.value(&v)[0]
}
