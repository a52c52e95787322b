//! End-to-end runs: configuration, presets, training and the evaluation
//! report with its CSV and text renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::beam::{beam_search_features, BeamConfig};
use crate::clicklog::{simulate_log, split_sessions, QuerySession, Simulator, SimulatorConfig, SERP_SIZE};
use crate::csm::{train, CsmConfig, CsmModel, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::eval::{
    auc, binary_perplexity, click_perplexity, click_prob_positions, constant_recall_curve, constant_sequence_ranking,
    naive_baselines, oracle_click_marginals, oracle_task_probs, prob_clicks_le, prob_nonconsecutive, recall_curve,
    topk_mass, BinaryPrediction, EvalRecord, OracleTaskProbs, MAX_L,
};
use crate::patterns::{count_patterns, PatternStats};

/// Version of the CSV report layout.
pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub output_dir: PathBuf,
    /// Relative paths below are resolved against `output_dir`.
    pub log: PathBuf,
    pub stats: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            output_dir: PathBuf::from("csm-out"),
            log: PathBuf::from("sessions.log"),
            stats: PathBuf::from("patterns.bin"),
            checkpoint: PathBuf::from("model.ckpt"),
        }
    }
}

impl PathsConfig {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.output_dir.join(p)
        }
    }

    pub fn log_path(&self) -> PathBuf {
        self.resolve(&self.log)
    }

    pub fn stats_path(&self) -> PathBuf {
        self.resolve(&self.stats)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.resolve(&self.checkpoint)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Sessions generated by `synth`.
    pub n_sessions: usize,
    pub n_queries: usize,
    pub n_docs: usize,
    /// Leading fraction of the log used for training.
    pub train_fraction: f64,
    /// Sessions sampled from the remainder for evaluation.
    pub eval_sessions: usize,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_sessions: 100_000,
            n_queries: 500,
            n_docs: 3000,
            train_fraction: 0.5,
            eval_sessions: 2500,
            split_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub pos_width: usize,
    pub feed_current_attention: bool,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let c = CsmConfig::default();
        ModelConfig {
            hidden: c.hidden,
            pos_width: c.pos_width,
            feed_current_attention: c.feed_current_attention,
            init_scale: c.init_scale,
            seed: c.seed,
        }
    }
}

impl ModelConfig {
    pub fn to_csm(&self) -> CsmConfig {
        CsmConfig {
            n_positions: SERP_SIZE,
            hidden: self.hidden,
            pos_width: self.pos_width,
            feed_current_attention: self.feed_current_attention,
            init_scale: self.init_scale,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Cut-offs reported individually in `metrics.csv`.
    pub k_list: Vec<usize>,
    /// Click counts for the `≤ L clicks` task.
    pub l_list: Vec<usize>,
    /// Score per-position predictions of the simulator's exact user model too.
    /// Only meaningful when the log was produced by `synth` with the same
    /// simulator settings.
    pub simulator_oracle: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_list: vec![1, 2, 4, 8, 16, 32, 64, 128],
            l_list: (0..=MAX_L).collect(),
            simulator_oracle: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub simulator: SimulatorConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: BeamConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Desk)
    }
}

impl RunConfig {
    /// Desk scale: d = 32, K = 128, 50k training sessions. Paper scale:
    /// d = 256, K = 1024 (the data section still has to point at a real log).
    pub fn preset(preset: Preset) -> Self {
        let desk = RunConfig {
            paths: PathsConfig::default(),
            simulator: SimulatorConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 6,
                ..TrainConfig::default()
            },
            beam: BeamConfig::new(128),
            eval: EvalConfig::default(),
        };
        match preset {
            Preset::Desk => desk,
            Preset::Paper => RunConfig {
                model: ModelConfig {
                    hidden: 256,
                    pos_width: 256,
                    ..desk.model
                },
                beam: BeamConfig::new(1024),
                eval: EvalConfig {
                    k_list: vec![1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024],
                    simulator_oracle: false,
                    ..desk.eval
                },
                ..desk
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.simulator.validate()?;
        self.train.validate()?;
        self.beam.validate()?;
        let m = &self.model;
        if m.hidden == 0 || m.pos_width == 0 || m.init_scale.is_nan() || m.init_scale < 0.0 {
            return Err(Error::Config(
                "model widths must be positive and init_scale non-negative".into(),
            ));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::Config("data.train_fraction must lie in (0, 1)".into()));
        }
        if self.eval.k_list.iter().any(|&k| k == 0 || k > self.beam.k) {
            return Err(Error::Config(format!(
                "eval.k_list entries must lie in 1..={} (beam.k)",
                self.beam.k
            )));
        }
        if self.eval.l_list.iter().any(|&l| l > MAX_L) {
            return Err(Error::Config(format!("eval.l_list entries must be at most {MAX_L}")));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Overlays a possibly partial TOML document: keys it sets win, every
    /// other value is kept.
    pub fn merged_with_toml(&self, text: &str) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        merge_toml(&mut base, toml::Value::Table(overlay));
        base.try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Applies a dotted `key=value` override such as `train.epochs=5`. The
    /// value is read as a TOML literal, falling back to a plain string.
    pub fn apply_override(&self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {part} is not a section")))?;
            if i + 1 == parts.len() {
                if !table.contains_key(*part) {
                    return Err(Error::Config(format!("unknown setting {key}")));
                }
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown section in {key}")))?;
        }
        root.try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))
    }

    /// Seeds every random component from one value.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.simulator.seed = seed;
        c.data.split_seed = seed;
        c.model.seed = seed;
        c.train.seed = seed;
        c
    }

    /// Hex SHA-256 of everything except the paths, so the same experiment
    /// written to different directories shares a fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        let json = serde_json::to_vec(&c).expect("run config serializes");
        hex::encode(Sha256::digest(json))[..16].to_string()
    }
}

fn merge_toml(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn synthesize(cfg: &RunConfig) -> Result<Vec<QuerySession>> {
    simulate_log(&cfg.simulator, cfg.data.n_sessions, cfg.data.n_queries, cfg.data.n_docs)
}

pub fn split(cfg: &RunConfig, sessions: &[QuerySession]) -> Result<(Vec<QuerySession>, Vec<QuerySession>)> {
    split_sessions(
        sessions,
        cfg.data.train_fraction,
        cfg.data.eval_sessions,
        cfg.data.split_seed,
    )
}

pub struct Trained {
    pub model: CsmModel,
    pub stats: PatternStats,
    pub report: TrainReport,
}

/// Counts patterns on the training split and trains a fresh model, reporting
/// held-out loss on `held_out` after every epoch.
pub fn train_model(cfg: &RunConfig, train_sessions: &[QuerySession], held_out: &[QuerySession]) -> Result<Trained> {
    let stats = count_patterns(train_sessions);
    let mut model = CsmModel::new(cfg.model.to_csm());
    let report = train(&mut model, &stats, train_sessions, Some(held_out), &cfg.train)?;
    Ok(Trained { model, stats, report })
}

/// Perplexity and AUC of one binary task for the model and its constant baseline.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskScores {
    pub perplexity: f64,
    pub auc: Option<f64>,
    pub baseline_perplexity: f64,
    pub baseline_auc: Option<f64>,
    /// Scores of the simulator's exact probabilities, when known.
    pub oracle_perplexity: Option<f64>,
    pub oracle_auc: Option<f64>,
    pub positive_rate: f64,
}

fn score_task(
    model: &[BinaryPrediction],
    baseline: &[BinaryPrediction],
    oracle: &[BinaryPrediction],
) -> Result<TaskScores> {
    let positives = model.iter().filter(|b| b.y).count();
    let has_oracle = !oracle.is_empty();
    Ok(TaskScores {
        perplexity: binary_perplexity(model)?,
        auc: auc(model).ok(),
        baseline_perplexity: binary_perplexity(baseline)?,
        baseline_auc: auc(baseline).ok(),
        oracle_perplexity: if has_oracle {
            Some(binary_perplexity(oracle)?)
        } else {
            None
        },
        oracle_auc: if has_oracle { auc(oracle).ok() } else { None },
        positive_rate: positives as f64 / model.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub fingerprint: String,
    pub n_sessions: usize,
    pub k: usize,
    /// `recall[k - 1]` = recall@k.
    pub recall: Vec<f64>,
    /// Recall of the best constant top-K list (training-set frequencies).
    pub constant_recall: Vec<f64>,
    /// `mass[k - 1]` = mean total probability of the k most probable sequences.
    pub mass: Vec<f64>,
    /// Recall curves of sessions grouped by observed click count and by order.
    pub group_recall: BTreeMap<String, (usize, Vec<f64>)>,
    /// `≤ L clicks` task, keyed by L.
    pub clicks_le: BTreeMap<usize, TaskScores>,
    pub nonconsecutive: TaskScores,
    pub click_perplexity: Vec<f64>,
    pub click_perplexity_mean: f64,
    pub baseline_click_perplexity: Vec<f64>,
    pub baseline_click_perplexity_mean: f64,
    pub oracle_click_perplexity: Option<(Vec<f64>, f64)>,
    pub truncated_searches: usize,
    #[serde(skip)]
    pub records: Vec<EvalRecord>,
}

type RecordFilter = Box<dyn Fn(&EvalRecord) -> bool>;

/// Runs beam search on every evaluation session and scores all tasks.
/// `simulator` enables the exact per-position lower bound.
pub fn evaluate(
    cfg: &RunConfig,
    model: &CsmModel,
    stats: &PatternStats,
    train_sessions: &[QuerySession],
    eval_sessions: &[QuerySession],
    simulator: Option<&Simulator>,
) -> Result<EvalReport> {
    cfg.validate()?;
    if eval_sessions.is_empty() {
        return Err(Error::Invalid("no evaluation sessions".into()));
    }
    let n = model.n_positions();
    let mut searched: Vec<(EvalRecord, bool)> = eval_sessions
        .par_iter()
        .map(|s| -> Result<(EvalRecord, bool)> {
            let features = model.featurize(stats, s.query_id, &s.results)?;
            let r = beam_search_features(model, &features, &cfg.beam);
            Ok((
                EvalRecord {
                    session_id: s.session_id,
                    observed: s.click_sequence(),
                    top_k: r.sequences,
                },
                r.truncated,
            ))
        })
        .collect::<Result<_>>()?;
    searched.sort_by_key(|(r, _)| r.session_id);
    let truncated_searches = searched.iter().filter(|(_, t)| *t).count();
    let records: Vec<EvalRecord> = searched.into_iter().map(|(r, _)| r).collect();
    let by_id: BTreeMap<u64, &QuerySession> = eval_sessions.iter().map(|s| (s.session_id, s)).collect();

    let k = cfg.beam.k;
    let recall = recall_curve(&records, k);
    let constant_recall = constant_recall_curve(&constant_sequence_ranking(train_sessions), eval_sessions, k);
    let mass = (1..=k)
        .map(|kk| records.iter().map(|r| topk_mass(&r.top_k, kk)).sum::<f64>() / records.len() as f64)
        .collect();

    let mut group_recall = BTreeMap::new();
    let mut groups: Vec<(String, RecordFilter)> = (0..=MAX_L)
        .map(|l| {
            (
                format!("clicks={l}"),
                Box::new(move |r: &EvalRecord| r.observed.len() == l) as RecordFilter,
            )
        })
        .collect();
    groups.push(("ordered".into(), Box::new(|r: &EvalRecord| r.observed.is_ordered())));
    groups.push(("unordered".into(), Box::new(|r: &EvalRecord| !r.observed.is_ordered())));
    for (name, f) in groups {
        let members: Vec<EvalRecord> = records.iter().filter(|r| f(r)).cloned().collect();
        if !members.is_empty() {
            group_recall.insert(name, (members.len(), recall_curve(&members, k)));
        }
    }

    let baselines = naive_baselines(train_sessions, n)?;
    // Exact click marginals and task probabilities of the generating model.
    let oracles: Vec<(Vec<f64>, OracleTaskProbs)> = match simulator {
        Some(sim) => records
            .par_iter()
            .map(|r| {
                let s = by_id[&r.session_id];
                let cfg = sim.query_config(s.query_id);
                let probs = sim.click_probs(s.query_id, &s.results);
                (oracle_click_marginals(&cfg, &probs), oracle_task_probs(&cfg, &probs))
            })
            .collect(),
        None => Vec::new(),
    };
    let mut clicks_le = BTreeMap::new();
    for &l in &cfg.eval.l_list {
        let model_preds: Vec<_> = records
            .iter()
            .map(|r| BinaryPrediction::new(prob_clicks_le(&r.top_k, l), r.observed.len() <= l))
            .collect();
        let base: Vec<_> = model_preds
            .iter()
            .map(|b| BinaryPrediction::new(baselines.p_clicks_le[l], b.y))
            .collect();
        let oracle: Vec<_> = oracles
            .iter()
            .zip(&model_preds)
            .map(|((_, t), b)| BinaryPrediction::new(t.clicks_le(l), b.y))
            .collect();
        clicks_le.insert(l, score_task(&model_preds, &base, &oracle)?);
    }
    let model_preds: Vec<_> = records
        .iter()
        .map(|r| BinaryPrediction::new(prob_nonconsecutive(&r.top_k), !r.observed.is_ordered()))
        .collect();
    let base: Vec<_> = model_preds
        .iter()
        .map(|b| BinaryPrediction::new(baselines.p_nonconsecutive, b.y))
        .collect();
    let oracle: Vec<_> = oracles
        .iter()
        .zip(&model_preds)
        .map(|((_, t), b)| BinaryPrediction::new(t.nonconsecutive, b.y))
        .collect();
    let nonconsecutive = score_task(&model_preds, &base, &oracle)?;

    let mut model_pos = vec![Vec::with_capacity(records.len()); n];
    let mut base_pos = vec![Vec::with_capacity(records.len()); n];
    let mut oracle_pos = vec![Vec::with_capacity(records.len()); n];
    for (j, r) in records.iter().enumerate() {
        let probs = click_prob_positions(&r.top_k, n);
        let oracle = oracles.get(j).map(|o| &o.0);
        for i in 0..n {
            let y = r.observed.contains(i as u8 + 1);
            model_pos[i].push(BinaryPrediction::new(probs[i], y));
            base_pos[i].push(BinaryPrediction::new(baselines.click_rate[i], y));
            if let Some(o) = oracle {
                oracle_pos[i].push(BinaryPrediction::new(o[i], y));
            }
        }
    }
    let cp = click_perplexity(&model_pos)?;
    let bp = click_perplexity(&base_pos)?;
    let oracle_click_perplexity = match simulator {
        Some(_) => {
            let op = click_perplexity(&oracle_pos)?;
            Some((op.per_position, op.mean))
        }
        None => None,
    };

    Ok(EvalReport {
        fingerprint: cfg.fingerprint(),
        n_sessions: records.len(),
        k,
        recall,
        constant_recall,
        mass,
        group_recall,
        clicks_le,
        nonconsecutive,
        click_perplexity: cp.per_position,
        click_perplexity_mean: cp.mean,
        baseline_click_perplexity: bp.per_position,
        baseline_click_perplexity_mean: bp.mean,
        oracle_click_perplexity,
        truncated_searches,
        records,
    })
}

fn header(fingerprint: &str) -> String {
    format!("# csm-report v{REPORT_VERSION} config={fingerprint}\n")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

impl EvalReport {
    /// `metric,parameter,value` rows.
    pub fn metrics_csv(&self, k_list: &[usize]) -> String {
        let mut s = header(&self.fingerprint);
        s.push_str("metric,parameter,value\n");
        let mut row = |m: &str, p: &dyn std::fmt::Display, v: String| {
            let _ = writeln!(s, "{m},{p},{v}");
        };
        row("eval_sessions", &"", self.n_sessions.to_string());
        row("truncated_searches", &"", self.truncated_searches.to_string());
        for &k in k_list.iter().filter(|&&k| k <= self.k) {
            row("recall", &k, self.recall[k - 1].to_string());
            row("constant_recall", &k, self.constant_recall[k - 1].to_string());
            row("topk_mass", &k, self.mass[k - 1].to_string());
        }
        for (l, t) in &self.clicks_le {
            row("clicks_le_perplexity", l, t.perplexity.to_string());
            row("clicks_le_auc", l, opt(t.auc));
            row("clicks_le_baseline_perplexity", l, t.baseline_perplexity.to_string());
            row("clicks_le_baseline_auc", l, opt(t.baseline_auc));
            if let Some(p) = t.oracle_perplexity {
                row("clicks_le_oracle_perplexity", l, p.to_string());
                row("clicks_le_oracle_auc", l, opt(t.oracle_auc));
            }
        }
        let t = &self.nonconsecutive;
        row("nonconsecutive_perplexity", &"", t.perplexity.to_string());
        row("nonconsecutive_auc", &"", opt(t.auc));
        row(
            "nonconsecutive_baseline_perplexity",
            &"",
            t.baseline_perplexity.to_string(),
        );
        row("nonconsecutive_baseline_auc", &"", opt(t.baseline_auc));
        if let Some(p) = t.oracle_perplexity {
            row("nonconsecutive_oracle_perplexity", &"", p.to_string());
            row("nonconsecutive_oracle_auc", &"", opt(t.oracle_auc));
        }
        for (i, v) in self.click_perplexity.iter().enumerate() {
            row("click_perplexity", &(i + 1), v.to_string());
        }
        row("click_perplexity", &"mean", self.click_perplexity_mean.to_string());
        for (i, v) in self.baseline_click_perplexity.iter().enumerate() {
            row("baseline_click_perplexity", &(i + 1), v.to_string());
        }
        row(
            "baseline_click_perplexity",
            &"mean",
            self.baseline_click_perplexity_mean.to_string(),
        );
        if let Some((per, mean)) = &self.oracle_click_perplexity {
            for (i, v) in per.iter().enumerate() {
                row("oracle_click_perplexity", &(i + 1), v.to_string());
            }
            row("oracle_click_perplexity", &"mean", mean.to_string());
        }
        s
    }

    pub fn recall_csv(&self) -> String {
        let mut s = header(&self.fingerprint);
        s.push_str("rank,recall\n");
        for (i, r) in self.recall.iter().enumerate() {
            let _ = writeln!(s, "{},{r}", i + 1);
        }
        s
    }

    pub fn mass_csv(&self) -> String {
        let mut s = header(&self.fingerprint);
        s.push_str("k,total_probability\n");
        for (i, m) in self.mass.iter().enumerate() {
            let _ = writeln!(s, "{},{m}", i + 1);
        }
        s
    }

    pub fn group_recall_csv(&self) -> String {
        let mut s = header(&self.fingerprint);
        s.push_str("group,sessions,rank,recall\n");
        for (name, (count, curve)) in &self.group_recall {
            for (i, r) in curve.iter().enumerate() {
                let _ = writeln!(s, "{name},{count},{},{r}", i + 1);
            }
        }
        s
    }

    /// Plain-text tables of every task, model against baseline.
    pub fn summary(&self, k_list: &[usize]) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "config {}  sessions {}  K {}",
            self.fingerprint, self.n_sessions, self.k
        );
        let _ = writeln!(s, "\nSequence recall");
        let _ = writeln!(s, "{:>8} {:>10} {:>10} {:>10}", "K", "recall", "constant", "mass");
        for &k in k_list.iter().filter(|&&k| k <= self.k) {
            let _ = writeln!(
                s,
                "{k:>8} {:>10.4} {:>10.4} {:>10.4}",
                self.recall[k - 1],
                self.constant_recall[k - 1],
                self.mass[k - 1]
            );
        }
        let cols: Vec<String> = self
            .clicks_le
            .keys()
            .map(|l| if *l == 0 { "L=0".to_string() } else { format!("L<={l}") })
            .collect();
        let line = |s: &mut String, name: &str, vals: Vec<String>| {
            let _ = write!(s, "{name:<10}");
            for v in vals {
                let _ = write!(s, " {v:>8}");
            }
            s.push('\n');
        };
        let _ = writeln!(s, "\nNumber of clicks: perplexity");
        line(&mut s, "", cols.clone());
        line(
            &mut s,
            "baseline",
            self.clicks_le
                .values()
                .map(|t| format!("{:.4}", t.baseline_perplexity))
                .collect(),
        );
        line(
            &mut s,
            "model",
            self.clicks_le
                .values()
                .map(|t| format!("{:.4}", t.perplexity))
                .collect(),
        );
        let has_oracle = self.nonconsecutive.oracle_perplexity.is_some();
        if has_oracle {
            line(
                &mut s,
                "oracle",
                self.clicks_le
                    .values()
                    .map(|t| format!("{:.4}", t.oracle_perplexity.unwrap_or(f64::NAN)))
                    .collect(),
            );
        }
        let _ = writeln!(s, "\nNumber of clicks: AUC");
        line(&mut s, "", cols);
        let fmt_auc = |a: Option<f64>| a.map(|v| format!("{v:.4}")).unwrap_or_else(|| "NA".into());
        line(
            &mut s,
            "baseline",
            self.clicks_le.values().map(|t| fmt_auc(t.baseline_auc)).collect(),
        );
        line(
            &mut s,
            "model",
            self.clicks_le.values().map(|t| fmt_auc(t.auc)).collect(),
        );
        if has_oracle {
            line(
                &mut s,
                "oracle",
                self.clicks_le.values().map(|t| fmt_auc(t.oracle_auc)).collect(),
            );
        }
        let t = &self.nonconsecutive;
        let _ = writeln!(s, "\nNon-consecutive clicks (rate {:.4})", t.positive_rate);
        line(&mut s, "", vec!["perplex".into(), "AUC".into()]);
        line(
            &mut s,
            "baseline",
            vec![format!("{:.4}", t.baseline_perplexity), fmt_auc(t.baseline_auc)],
        );
        line(&mut s, "model", vec![format!("{:.4}", t.perplexity), fmt_auc(t.auc)]);
        if let Some(p) = t.oracle_perplexity {
            line(&mut s, "oracle", vec![format!("{p:.4}"), fmt_auc(t.oracle_auc)]);
        }
        let _ = writeln!(s, "\nClick prediction: perplexity by position");
        let mut cols: Vec<String> = (1..=self.click_perplexity.len()).map(|i| i.to_string()).collect();
        cols.push("mean".into());
        line(&mut s, "", cols);
        let row = |per: &[f64], mean: f64| {
            let mut v: Vec<String> = per.iter().map(|x| format!("{x:.4}")).collect();
            v.push(format!("{mean:.4}"));
            v
        };
        line(
            &mut s,
            "baseline",
            row(&self.baseline_click_perplexity, self.baseline_click_perplexity_mean),
        );
        line(&mut s, "model", row(&self.click_perplexity, self.click_perplexity_mean));
        if let Some((per, mean)) = &self.oracle_click_perplexity {
            line(&mut s, "oracle", row(per, *mean));
        }
        if self.truncated_searches > 0 {
            let _ = writeln!(
                s,
                "\n{} searches ended with fewer than K sequences",
                self.truncated_searches
            );
        }
        s
    }

    /// Writes the CSV files and the summary into `dir`; returns the paths written.
    pub fn write(&self, dir: &Path, k_list: &[usize]) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let files = [
            ("metrics.csv", self.metrics_csv(k_list)),
            ("recall.csv", self.recall_csv()),
            ("mass.csv", self.mass_csv()),
            ("group_recall.csv", self.group_recall_csv()),
            ("summary.txt", header(&self.fingerprint) + &self.summary(k_list)),
        ];
        let mut written = Vec::new();
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body)?;
            written.push(p);
        }
        Ok(written)
    }
}

/// Loss curve CSV with the fingerprint header.
pub fn loss_csv(report: &TrainReport, fingerprint: &str) -> String {
    header(fingerprint) + &report.to_csv()
}
