use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use csm_core::beam::{beam_search, format_listing};
use csm_core::clicklog::{parse_log, session_stats, write_log, ParseMode, QuerySession, Simulator};
use csm_core::csm::{load_checkpoint, save_checkpoint};
use csm_core::experiment::{evaluate, loss_csv, split, synthesize, train_model, Preset, RunConfig};
use csm_core::patterns::PatternStats;
use csm_core::Error;

/// Environment variable overriding `paths.output_dir`.
const OUTPUT_DIR_ENV: &str = "CSM_OUTPUT_DIR";

#[derive(Parser)]
#[command(
    name = "csm",
    version,
    about = "Click sequence model: synthesize logs, train, predict and evaluate"
)]
struct Cli {
    /// TOML run configuration, laid over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: PresetArg,
    /// Override one setting, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for the simulator, the split, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Stop at the first malformed log record instead of skipping it.
    #[arg(long, global = true)]
    fail_fast: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Eval,
    Train,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic click log from the configured user model.
    Synth,
    /// Print session counts by number of clicks and click order.
    Stats {
        /// Log to summarize (defaults to the configured log).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Count click patterns on the training split and train the model.
    Train,
    /// Print the K most probable click sequences for one result page.
    Predict {
        #[arg(long)]
        query: u64,
        /// Comma-separated document ids, top to bottom.
        #[arg(long, value_delimiter = ',', required = true)]
        docs: Vec<u64>,
        /// Number of sequences (defaults to beam.k).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Evaluate a trained model and write the report files.
    Eval {
        /// Sessions to evaluate on.
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
    },
    /// Print the effective configuration as TOML.
    Config,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let preset = match cli.preset {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    };
    let mut cfg = RunConfig::preset(preset);
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg = cfg
            .merged_with_toml(&text)
            .with_context(|| format!("in {}", path.display()))?;
    }
    for o in &cli.overrides {
        cfg = cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        cfg.paths.output_dir = PathBuf::from(dir);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Records every written file with its hash and the config fingerprint in
/// `manifest.json`, the provenance record for formats without room for a header.
fn record_outputs(cfg: &RunConfig, command: &str, files: &[PathBuf]) -> Result<()> {
    let dir = &cfg.paths.output_dir;
    let manifest_path = dir.join("manifest.json");
    let mut manifest: BTreeMap<String, serde_json::Value> = match std::fs::read(&manifest_path) {
        Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_default(),
        Err(_) => BTreeMap::new(),
    };
    for f in files {
        let name = f.strip_prefix(dir).unwrap_or(f).display().to_string();
        manifest.insert(
            name,
            serde_json::json!({
                "command": command,
                "config_fingerprint": cfg.fingerprint(),
                "sha256": sha256_file(f)?,
            }),
        );
    }
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn read_log(path: &Path, fail_fast: bool) -> Result<Vec<QuerySession>> {
    let file = File::open(path).with_context(|| format!("opening log {}", path.display()))?;
    let mode = if fail_fast {
        ParseMode::FailFast
    } else {
        ParseMode::Skip
    };
    let out = parse_log(BufReader::new(file), mode).with_context(|| format!("parsing {}", path.display()))?;
    if !out.skipped.is_empty() {
        eprintln!(
            "skipped {} malformed records (first at line {})",
            out.skipped.len(),
            out.skipped[0].line
        );
    }
    if out.dropped_clicks > 0 {
        eprintln!(
            "dropped {} clicks on documents not in their result list",
            out.dropped_clicks
        );
    }
    Ok(out.sessions)
}

fn ensure_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.paths.output_dir)
        .with_context(|| format!("creating {}", cfg.paths.output_dir.display()))
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    ensure_dir(cfg)?;
    let sessions = synthesize(cfg)?;
    let path = cfg.paths.log_path();
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    write_log(&mut w, &sessions)?;
    w.flush()?;
    record_outputs(cfg, "synth", std::slice::from_ref(&path))?;
    eprintln!("wrote {} sessions to {}", sessions.len(), path.display());
    print!("{}", session_stats(&sessions).to_table());
    Ok(())
}

fn cmd_stats(cfg: &RunConfig, log: Option<&Path>, fail_fast: bool) -> Result<()> {
    let path = log.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.log_path());
    let sessions = read_log(&path, fail_fast)?;
    print!("{}", session_stats(&sessions).to_table());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, fail_fast: bool) -> Result<()> {
    ensure_dir(cfg)?;
    let sessions = read_log(&cfg.paths.log_path(), fail_fast)?;
    let (train, eval) = split(cfg, &sessions)?;
    eprintln!("training on {} sessions, held-out loss on {}", train.len(), eval.len());
    let fingerprint = cfg.fingerprint();
    let extra = serde_json::json!({ "config_fingerprint": fingerprint });
    let trained = match train_model(cfg, &train, &eval) {
        Ok(t) => t,
        Err(Error::NonFinite(what)) => {
            bail!("training diverged: non-finite {what}");
        }
        Err(e) => return Err(e.into()),
    };
    let stats_path = cfg.paths.stats_path();
    trained.stats.save(&stats_path)?;
    let ckpt = cfg.paths.checkpoint_path();
    save_checkpoint(&ckpt, &trained.model, &trained.stats.fingerprint(), &extra)?;
    let loss_path = cfg.paths.output_dir.join("loss.csv");
    std::fs::write(&loss_path, loss_csv(&trained.report, &fingerprint))?;
    record_outputs(cfg, "train", &[stats_path, ckpt.clone(), loss_path])?;
    if trained.report.truncated > 0 {
        eprintln!(
            "truncated {} training sequences to {} clicks",
            trained.report.truncated, cfg.train.max_seq_len
        );
    }
    for e in &trained.report.curve {
        match e.held_out_loss {
            Some(h) => eprintln!("epoch {:>3}  train {:.5}  held-out {:.5}", e.epoch, e.train_loss, h),
            None => eprintln!("epoch {:>3}  train {:.5}", e.epoch, e.train_loss),
        }
    }
    eprintln!("wrote {}", ckpt.display());
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<(csm_core::csm::CsmModel, PatternStats)> {
    let stats_path = cfg.paths.stats_path();
    let stats = PatternStats::load(&stats_path).with_context(|| format!("loading {}", stats_path.display()))?;
    let ckpt_path = cfg.paths.checkpoint_path();
    let ckpt = load_checkpoint(&ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    if let Some(w) = ckpt.fingerprint_warning(&stats.fingerprint()) {
        eprintln!("warning: {w}");
    }
    Ok((ckpt.model, stats))
}

fn cmd_predict(cfg: &RunConfig, query: u64, docs: &[u64], k: Option<usize>) -> Result<()> {
    let (model, stats) = load_model(cfg)?;
    let mut beam = cfg.beam;
    if let Some(k) = k {
        beam.k = k;
        beam.beam_size = beam.beam_size.max(k);
    }
    let result = beam_search(&model, &stats, query, docs, &beam)?;
    if result.truncated {
        eprintln!(
            "only {} sequences complete within {} clicks",
            result.sequences.len(),
            beam.max_len
        );
    }
    print!("{}", format_listing(&result.sequences));
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, on: SplitArg, fail_fast: bool) -> Result<()> {
    ensure_dir(cfg)?;
    let (model, stats) = load_model(cfg)?;
    let sessions = read_log(&cfg.paths.log_path(), fail_fast)?;
    let (train, eval) = split(cfg, &sessions)?;
    let targets = match on {
        SplitArg::Eval => &eval,
        SplitArg::Train => &train,
    };
    let simulator = if cfg.eval.simulator_oracle {
        Some(Simulator::new(
            cfg.simulator.clone(),
            cfg.data.n_queries,
            cfg.data.n_docs,
        )?)
    } else {
        None
    };
    let report = evaluate(cfg, &model, &stats, &train, targets, simulator.as_ref())?;
    let files = report.write(&cfg.paths.output_dir, &cfg.eval.k_list)?;
    record_outputs(cfg, "eval", &files)?;
    print!("{}", report.summary(&cfg.eval.k_list));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Stats { log } => cmd_stats(&cfg, log.as_deref(), cli.fail_fast),
        Command::Train => cmd_train(&cfg, cli.fail_fast),
        Command::Predict { query, docs, k } => cmd_predict(&cfg, *query, docs, *k),
        Command::Eval { split } => cmd_eval(&cfg, *split, cli.fail_fast),
        Command::Config => {
            print!("{}", cfg.to_toml_string());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
