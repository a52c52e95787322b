use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Click, QuerySession, SERP_SIZE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Top-down scan; after every examined position the user goes on with
    /// probability `continuation`.
    PositionDecay,
    /// Top-down scan; the user may only abandon right after a click
    /// (continues with probability `continuation`).
    Cascade,
}

/// Generative user model. Read from a flat TOML key/value file; missing keys
/// take their default values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    pub kind: ModelKind,
    /// Per-position click probability of a fully relevant document.
    pub attractiveness: Vec<f64>,
    pub continuation: f64,
    /// After a click, probability of clicking a position above the scan cursor
    /// (chosen uniformly) before moving on.
    pub revisit: f64,
    pub max_clicks: usize,
    /// Document relevance is drawn uniformly from `[relevance_min, 1]`.
    pub relevance_min: f64,
    /// Probability that a session shows its query's results in a random order.
    pub shuffle_prob: f64,
    /// Queries differ in intent: each query's continuation is
    /// `continuation · (1 + continuation_spread · u)` with `u` uniform in
    /// [-1, 1], clamped to [0, 1].
    pub continuation_spread: f64,
    /// Relative per-query spread of `revisit`, drawn the same way.
    pub revisit_spread: f64,
    pub seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            kind: ModelKind::Cascade,
            attractiveness: vec![0.85, 0.7, 0.6, 0.5, 0.42, 0.36, 0.31, 0.27, 0.24, 0.22],
            continuation: 0.55,
            revisit: 0.15,
            max_clicks: 10,
            relevance_min: 0.05,
            shuffle_prob: 0.2,
            continuation_spread: 0.55,
            revisit_spread: 1.0,
            seed: 17,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attractiveness.len() != SERP_SIZE {
            return Err(Error::Config(format!(
                "attractiveness needs {SERP_SIZE} values, got {}",
                self.attractiveness.len()
            )));
        }
        let probs = self.attractiveness.iter().copied().chain([
            self.continuation,
            self.revisit,
            self.relevance_min,
            self.shuffle_prob,
            self.continuation_spread,
            self.revisit_spread,
        ]);
        for p in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SimulatorConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("simulator config serializes")
    }

    /// Samples one click sequence given the per-position click probabilities of a SERP.
    pub fn sample_sequence<R: Rng>(&self, click_probs: &[f64], rng: &mut R) -> Vec<u8> {
        let n = click_probs.len();
        let mut seq = Vec::new();
        if self.max_clicks == 0 {
            return seq;
        }
        let mut cursor = 1;
        'scan: while cursor <= n {
            if rng.gen::<f64>() < click_probs[cursor - 1] {
                let mut pos = cursor;
                loop {
                    seq.push(pos as u8);
                    if seq.len() >= self.max_clicks {
                        break 'scan;
                    }
                    if self.kind == ModelKind::Cascade && rng.gen::<f64>() >= self.continuation {
                        break 'scan;
                    }
                    if cursor > 1 && rng.gen::<f64>() < self.revisit {
                        pos = rng.gen_range(1..cursor);
                        continue;
                    }
                    break;
                }
            }
            if self.kind == ModelKind::PositionDecay && rng.gen::<f64>() >= self.continuation {
                break;
            }
            cursor += 1;
        }
        seq
    }
}

/// A seeded query/document catalog plus the user model that clicks on it.
#[derive(Clone, Debug)]
pub struct Simulator {
    config: SimulatorConfig,
    serps: Vec<Vec<u64>>,
}

// SplitMix64 finalizer, used to derive per-(query, doc) relevance without storing it.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl Simulator {
    pub fn new(config: SimulatorConfig, n_queries: usize, n_docs: usize) -> Result<Self> {
        config.validate()?;
        if n_docs < SERP_SIZE {
            return Err(Error::Config(format!(
                "need at least {SERP_SIZE} documents, got {n_docs}"
            )));
        }
        if n_queries == 0 {
            return Err(Error::Config("need at least one query".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed ^ 0x5e7f));
        let serps = (0..n_queries)
            .map(|_| {
                rand::seq::index::sample(&mut rng, n_docs, SERP_SIZE)
                    .into_iter()
                    .map(|d| d as u64)
                    .collect()
            })
            .collect();
        Ok(Simulator { config, serps })
    }

    pub fn config(&self) -> &SimulatorConfig {
        &self.config
    }

    pub fn n_queries(&self) -> usize {
        self.serps.len()
    }

    /// Default result list of a query.
    pub fn serp(&self, query_id: u64) -> &[u64] {
        &self.serps[query_id as usize]
    }

    pub fn relevance(&self, query_id: u64, doc_id: u64) -> f64 {
        let h = mix(mix(self.config.seed) ^ mix(query_id.wrapping_mul(0x1000_0000_01b3) ^ doc_id));
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        self.config.relevance_min + (1.0 - self.config.relevance_min) * u
    }

    fn unit(&self, query_id: u64, salt: u64) -> f64 {
        let h = mix(mix(self.config.seed ^ salt) ^ mix(query_id));
        (h >> 11) as f64 / (1u64 << 53) as f64
    }

    /// The user model for sessions of `query_id`, with its per-query
    /// continuation and revisit probabilities filled in.
    pub fn query_config(&self, query_id: u64) -> SimulatorConfig {
        let c = &self.config;
        let draw = |base: f64, spread: f64, salt: u64| {
            if spread == 0.0 {
                base
            } else {
                (base * (1.0 + spread * (2.0 * self.unit(query_id, salt) - 1.0))).clamp(0.0, 1.0)
            }
        };
        SimulatorConfig {
            continuation: draw(c.continuation, c.continuation_spread, 0xc0),
            revisit: draw(c.revisit, c.revisit_spread, 0x5e),
            continuation_spread: 0.0,
            revisit_spread: 0.0,
            ..c.clone()
        }
    }

    /// Per-position click probability of a result list under `query_id`.
    pub fn click_probs(&self, query_id: u64, results: &[u64]) -> Vec<f64> {
        results
            .iter()
            .zip(&self.config.attractiveness)
            .map(|(&d, &a)| a * self.relevance(query_id, d))
            .collect()
    }

    pub fn simulate(&self, n_sessions: usize) -> Vec<QuerySession> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut sessions = Vec::with_capacity(n_sessions);
        for i in 0..n_sessions {
            let query_id = rng.gen_range(0..self.serps.len()) as u64;
            let mut results = self.serps[query_id as usize].clone();
            if rng.gen::<f64>() < self.config.shuffle_prob {
                results.shuffle(&mut rng);
            }
            let probs = self.click_probs(query_id, &results);
            let seq = self.query_config(query_id).sample_sequence(&probs, &mut rng);
            let mut t = 0;
            let clicks = seq
                .into_iter()
                .map(|position| {
                    t += rng.gen_range(1..=60);
                    Click {
                        time_passed: t,
                        position,
                    }
                })
                .collect();
            sessions.push(QuerySession {
                session_id: i as u64 + 1,
                query_time: 0,
                query_id,
                region_id: query_id % 3,
                results,
                clicks,
            });
        }
        sessions
    }
}

pub fn simulate_log(
    config: &SimulatorConfig,
    n_sessions: usize,
    n_queries: usize,
    n_docs: usize,
) -> Result<Vec<QuerySession>> {
    Ok(Simulator::new(config.clone(), n_queries, n_docs)?.simulate(n_sessions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clicklog::{is_ordered, session_stats, write_log_string};

    #[test]
    fn no_revisits_means_ordered() {
        let cfg = SimulatorConfig {
            revisit: 0.0,
            continuation: 0.9,
            ..SimulatorConfig::default()
        };
        let log = simulate_log(&cfg, 3000, 20, 100).unwrap();
        assert!(log.iter().all(|s| is_ordered(s.click_sequence().positions())));
        assert_eq!(session_stats(&log).total_unordered(), 0);
    }

    #[test]
    fn degenerate_config_clicks_first_result_only() {
        for kind in [ModelKind::Cascade, ModelKind::PositionDecay] {
            let mut attractiveness = vec![0.5; SERP_SIZE];
            attractiveness[0] = 1.0;
            let cfg = SimulatorConfig {
                kind,
                attractiveness,
                continuation: 0.0,
                revisit: 0.3,
                relevance_min: 1.0,
                ..SimulatorConfig::default()
            };
            let log = simulate_log(&cfg, 200, 5, 50).unwrap();
            assert!(log.iter().all(|s| s.click_sequence().positions() == [1]));
        }
    }

    #[test]
    fn fixed_seed_reproduces_log() {
        let cfg = SimulatorConfig::default();
        let a = write_log_string(&simulate_log(&cfg, 500, 10, 60).unwrap());
        let b = write_log_string(&simulate_log(&cfg, 500, 10, 60).unwrap());
        assert_eq!(a, b);
        let other = SimulatorConfig { seed: 18, ..cfg };
        assert_ne!(a, write_log_string(&simulate_log(&other, 500, 10, 60).unwrap()));
    }

    #[test]
    fn generated_sessions_are_valid() {
        let log = simulate_log(&SimulatorConfig::default(), 500, 10, 60).unwrap();
        for s in &log {
            s.validate().unwrap();
            assert!(s.clicks.len() <= 10);
        }
    }

    #[test]
    fn max_clicks_caps_length() {
        let cfg = SimulatorConfig {
            attractiveness: vec![1.0; SERP_SIZE],
            continuation: 1.0,
            continuation_spread: 0.0,
            revisit: 0.5,
            max_clicks: 4,
            relevance_min: 1.0,
            ..SimulatorConfig::default()
        };
        let log = simulate_log(&cfg, 100, 3, 30).unwrap();
        assert!(log.iter().all(|s| s.clicks.len() == 4));
    }

    #[test]
    fn config_file_round_trip_and_validation() {
        let cfg = SimulatorConfig::default();
        let back = SimulatorConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        let text =
            "kind = \"cascade\"\nattractiveness = [0.5, 0.5]\ncontinuation = 0.5\nrevisit = 0.0\nmax_clicks = 3\n";
        assert!(SimulatorConfig::from_toml_str(text).is_err());
        let bad = SimulatorConfig {
            continuation: 1.5,
            ..SimulatorConfig::default()
        };
        assert!(SimulatorConfig::from_toml_str(&bad.to_toml_string()).is_err());
    }
}
