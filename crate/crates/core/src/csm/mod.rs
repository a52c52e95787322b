//! The click sequence model.
//!
//! Encoder: the query and the `N` results are embedded from their click-pattern
//! features and read by a forward and a backward GRU; entry `i` of the memory
//! is the concatenation of both directions' states at `i`.
//!
//! Decoder: its state starts from a linear map of the two final encoder states.
//! At each step it attends over the memory with its current state, advances a
//! GRU on the previous attention context and the embedded previously clicked
//! position, and predicts a distribution over the `N` positions plus EOS from
//! the concatenation of the new state and the fresh attention context.

mod checkpoint;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{log_softmax, Attention, Forward, GruCell, Init, Ops, ParamId, ParamStore};
use crate::patterns::{PatternStats, SerpFeatures};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use train::{train, EpochInfo, TrainConfig, TrainReport, TrainingExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsmConfig {
    /// Number of results `N` on a page.
    pub n_positions: usize,
    /// Embedding and recurrent state width `d`.
    pub hidden: usize,
    /// Width of the embedded previous click position.
    pub pos_width: usize,
    /// Feed the attention context of the current step (instead of the
    /// previous step's) into the decoder GRU.
    #[serde(default)]
    pub feed_current_attention: bool,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for CsmConfig {
    fn default() -> Self {
        CsmConfig {
            n_positions: crate::clicklog::SERP_SIZE,
            hidden: 32,
            pos_width: 32,
            feed_current_attention: false,
            init_scale: 0.08,
            seed: 0,
        }
    }
}

impl CsmConfig {
    pub fn query_dim(&self) -> usize {
        1 << self.n_positions
    }

    pub fn result_dim(&self) -> usize {
        2 * self.n_positions * self.query_dim()
    }

    /// Softmax index of EOS.
    pub fn eos(&self) -> usize {
        self.n_positions
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CsmIds {
    pub query_embed: ParamId,
    pub result_embed: ParamId,
    pub enc_fwd: GruCell,
    pub enc_bwd: GruCell,
    pub w_init: ParamId,
    pub dec: GruCell,
    pub att: Attention,
    pub w_pos: ParamId,
    pub w_out: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsmModel {
    pub config: CsmConfig,
    pub params: ParamStore,
    pub ids: CsmIds,
}

/// Encoder output: `N + 1` memory entries of width `2d`, their attention
/// projections, and the concatenated final states of both directions.
pub struct Encoded<V> {
    pub memory: Vec<V>,
    pub projected: Vec<V>,
    pub final_state: V,
}

#[derive(Clone, Debug)]
pub struct DecoderState<V> {
    pub s: V,
    /// Attention context of the previous step (zero before the first step).
    pub a: V,
    /// Previously clicked position, 1-based.
    pub p: Option<u8>,
    pub t: usize,
}

/// One decoder step: logits over `N + 1` outcomes and the pieces needed to
/// continue after observing a click.
#[derive(Clone, Debug)]
pub struct Step<V> {
    pub logits: V,
    pub s_next: V,
    pub a_next: V,
    pub t: usize,
}

impl<V: Clone> Step<V> {
    pub fn advance(&self, position: u8) -> DecoderState<V> {
        DecoderState {
            s: self.s_next.clone(),
            a: self.a_next.clone(),
            p: Some(position),
            t: self.t + 1,
        }
    }
}

impl CsmModel {
    pub fn new(config: CsmConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init {
            rng: &mut rng,
            scale: config.init_scale,
        };
        let d = config.hidden;
        let n = config.n_positions;
        let mut p = ParamStore::new();
        let query_embed = p.add_row_sparse("embed.query", init.matrix(config.query_dim(), d));
        let result_embed = p.add_row_sparse("embed.result", init.matrix(config.result_dim(), d));
        let enc_fwd = GruCell::register(&mut p, "enc.fwd", d, d, &mut init);
        let enc_bwd = GruCell::register(&mut p, "enc.bwd", d, d, &mut init);
        let w_init = p.add("dec.w_init", init.matrix(d, 2 * d));
        let dec = GruCell::register(&mut p, "dec.gru", 2 * d + config.pos_width, d, &mut init);
        let att = Attention::register(&mut p, "dec.att", d, 2 * d, d, &mut init);
        let w_pos = p.add("dec.w_pos", init.matrix(config.pos_width, n));
        let w_out = p.add("dec.w_out", init.matrix(n + 1, 3 * d));
        CsmModel {
            config,
            params: p,
            ids: CsmIds {
                query_embed,
                result_embed,
                enc_fwd,
                enc_bwd,
                w_init,
                dec,
                att,
                w_pos,
                w_out,
            },
        }
    }

    /// Rebinds a parameter store (e.g. from a checkpoint), checking every shape.
    pub fn from_params(config: CsmConfig, params: ParamStore) -> Result<Self> {
        let reference = CsmModel::new(CsmConfig {
            init_scale: 0.0,
            ..config.clone()
        });
        if params.len() != reference.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for id in reference.params.ids() {
            let name = reference.params.name(id);
            match params.find(name) {
                Some(other) if other == id && params.get(other).shape() == reference.params.get(id).shape() => {}
                _ => return Err(Error::Shape(format!("parameter {name} missing or mis-shaped"))),
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(CsmModel {
            config,
            params,
            ids: reference.ids,
        })
    }

    pub fn n_positions(&self) -> usize {
        self.config.n_positions
    }

    pub fn featurize(&self, stats: &PatternStats, query_id: u64, results: &[u64]) -> Result<SerpFeatures> {
        if stats.n_positions() != self.config.n_positions || results.len() != self.config.n_positions {
            return Err(Error::Shape(format!(
                "model expects {} results (stats built for {}, page has {})",
                self.config.n_positions,
                stats.n_positions(),
                results.len()
            )));
        }
        Ok(stats.featurize_serp(query_id, results))
    }

    pub fn encode<O: Ops>(&self, ops: &mut O, features: &SerpFeatures) -> Encoded<O::V> {
        let d = self.config.hidden;
        let ids = &self.ids;
        let mut inputs = Vec::with_capacity(features.results.len() + 1);
        inputs.push(ops.embed(ids.query_embed, &features.query));
        for f in &features.results {
            inputs.push(ops.embed(ids.result_embed, f));
        }
        let zero = ops.constant(vec![0.0; d]);

        let mut fwd = Vec::with_capacity(inputs.len());
        let mut h = zero.clone();
        for x in &inputs {
            h = crate::nncore::gru_step(ops, &ids.enc_fwd, &h, x);
            fwd.push(h.clone());
        }
        let mut bwd = vec![zero.clone(); inputs.len()];
        let mut h = zero;
        for (i, x) in inputs.iter().enumerate().rev() {
            h = crate::nncore::gru_step(ops, &ids.enc_bwd, &h, x);
            bwd[i] = h.clone();
        }
        let memory: Vec<O::V> = fwd
            .iter()
            .zip(&bwd)
            .map(|(f, b)| ops.concat(&[f.clone(), b.clone()]))
            .collect();
        let final_state = ops.concat(&[fwd[fwd.len() - 1].clone(), bwd[0].clone()]);
        let projected = ids.att.project(ops, &memory);
        Encoded {
            memory,
            projected,
            final_state,
        }
    }

    pub fn decoder_init<O: Ops>(&self, ops: &mut O, enc: &Encoded<O::V>) -> DecoderState<O::V> {
        DecoderState {
            s: ops.matvec(self.ids.w_init, &enc.final_state),
            a: ops.constant(vec![0.0; 2 * self.config.hidden]),
            p: None,
            t: 0,
        }
    }

    pub fn decoder_step<O: Ops>(&self, ops: &mut O, state: &DecoderState<O::V>, enc: &Encoded<O::V>) -> Step<O::V> {
        let ids = &self.ids;
        let (a_next, _) = ids.att.attend(ops, &state.s, &enc.memory, &enc.projected);
        let mut onehot = vec![0.0; self.config.n_positions];
        if let Some(p) = state.p {
            onehot[p as usize - 1] = 1.0;
        }
        let onehot = ops.constant(onehot);
        let pos = ops.matvec(ids.w_pos, &onehot);
        let att_in = if self.config.feed_current_attention {
            a_next.clone()
        } else {
            state.a.clone()
        };
        let input = ops.concat(&[att_in, pos]);
        let s_next = crate::nncore::gru_step(ops, &ids.dec, &state.s, &input);
        let deep = ops.concat(&[s_next.clone(), a_next.clone()]);
        let logits = ops.matvec(ids.w_out, &deep);
        Step {
            logits,
            s_next,
            a_next,
            t: state.t,
        }
    }

    /// Summed cross-entropy of `positions` followed by EOS.
    pub fn sequence_loss<O: Ops>(&self, ops: &mut O, features: &SerpFeatures, positions: &[u8]) -> O::V {
        let enc = self.encode(ops, features);
        let mut state = self.decoder_init(ops, &enc);
        let mut terms = Vec::with_capacity(positions.len() + 1);
        for &p in positions {
            let step = self.decoder_step(ops, &state, &enc);
            terms.push(ops.xent(&step.logits, p as usize - 1));
            state = step.advance(p);
        }
        let step = self.decoder_step(ops, &state, &enc);
        terms.push(ops.xent(&step.logits, self.config.eos()));
        ops.sum(&terms)
    }

    fn check_positions(&self, positions: &[u8]) -> Result<()> {
        match positions
            .iter()
            .find(|&&p| p == 0 || p as usize > self.config.n_positions)
        {
            Some(p) => Err(Error::Invalid(format!(
                "click position {p} outside 1..={}",
                self.config.n_positions
            ))),
            None => Ok(()),
        }
    }

    /// Log-probability of the click sequence (with its EOS) on a result page.
    pub fn sequence_log_prob(
        &self,
        stats: &PatternStats,
        query_id: u64,
        results: &[u64],
        positions: &[u8],
    ) -> Result<f64> {
        self.check_positions(positions)?;
        let features = self.featurize(stats, query_id, results)?;
        Ok(self.step_log_probs(&features, positions).iter().sum())
    }

    /// Per-step log-probabilities of `positions` and the final EOS, replaying the decoder incrementally.
    pub fn step_log_probs(&self, features: &SerpFeatures, positions: &[u8]) -> Vec<f64> {
        let mut ops = Forward::new(&self.params);
        let enc = self.encode(&mut ops, features);
        let mut state = self.decoder_init(&mut ops, &enc);
        let mut out = Vec::with_capacity(positions.len() + 1);
        for &p in positions {
            let step = self.decoder_step(&mut ops, &state, &enc);
            out.push(log_softmax(&step.logits)[p as usize - 1]);
            state = step.advance(p);
        }
        let step = self.decoder_step(&mut ops, &state, &enc);
        out.push(log_softmax(&step.logits)[self.config.eos()]);
        out
    }

    /// Mean negative log-likelihood over examples.
    pub fn mean_nll(&self, stats: &PatternStats, examples: &[TrainingExample]) -> f64 {
        use rayon::prelude::*;
        if examples.is_empty() {
            return 0.0;
        }
        let losses: Vec<f64> = examples
            .par_iter()
            .map(|ex| {
                let mut ops = Forward::new(&self.params);
                let f = ex.features(stats);
                self.sequence_loss(&mut ops, &f, &ex.positions)[0]
            })
            .collect();
        losses.iter().sum::<f64>() / examples.len() as f64
    }
}

#[cfg(test)]
mod tests;
