use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn csm(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_csm"))
        .args(args)
        .env("CSM_OUTPUT_DIR", dir)
        .output()
        .expect("binary runs");
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = csm(dir, args);
    assert!(
        out.status.success(),
        "csm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &[&str] = &[
    "--set",
    "data.n_sessions=400",
    "--set",
    "data.n_queries=20",
    "--set",
    "data.n_docs=100",
    "--set",
    "data.eval_sessions=50",
    "--set",
    "model.hidden=4",
    "--set",
    "model.pos_width=4",
    "--set",
    "train.batch_size=32",
    "--set",
    "beam.k=16",
    "--set",
    "beam.beam_size=16",
    "--set",
    "eval.k_list=[1,2,4,8,16]",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn data_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn synth_is_deterministic_for_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &with_small(&["synth", "--seed", "5"]));
    ok(b.path(), &with_small(&["synth", "--seed", "5"]));
    let ha = Sha256::digest(std::fs::read(a.path().join("sessions.log")).unwrap());
    let hb = Sha256::digest(std::fs::read(b.path().join("sessions.log")).unwrap());
    assert_eq!(ha, hb);

    let c = tempfile::tempdir().unwrap();
    ok(c.path(), &with_small(&["synth", "--seed", "6"]));
    let hc = Sha256::digest(std::fs::read(c.path().join("sessions.log")).unwrap());
    assert_ne!(ha, hc);

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["sessions.log"]["sha256"], hex::encode(ha));
}

#[test]
fn zero_sessions_gives_an_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let table = ok(dir.path(), &["synth", "--set", "data.n_sessions=0"]);
    assert!(std::fs::read(dir.path().join("sessions.log")).unwrap().is_empty());
    assert!(!table.is_empty());
    let again = ok(dir.path(), &["stats"]);
    assert_eq!(table, again);
}

#[test]
fn no_revisits_means_no_unordered_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let table = ok(dir.path(), &with_small(&["synth", "--set", "simulator.revisit=0"]));
    let rows: Vec<Vec<&str>> = table
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with("total"))
        .map(|l| l.split('\t').collect())
        .collect();
    assert!(rows.iter().any(|r| r[1] != "0"), "{table}");
    assert!(rows.iter().all(|r| r[2] == "0"), "{table}");
}

#[test]
fn zero_epochs_writes_one_loss_row() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &with_small(&["synth"]));
    ok(dir.path(), &with_small(&["train", "--set", "train.epochs=0"]));
    let loss = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let rows = data_rows(&loss);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "0");
    assert!(dir.path().join("model.ckpt").exists());
    assert!(dir.path().join("patterns.bin").exists());
}

#[test]
fn train_then_eval_writes_monotone_recall() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &with_small(&["synth"]));
    ok(dir.path(), &with_small(&["train", "--set", "train.epochs=1"]));
    let summary = ok(dir.path(), &with_small(&["eval"]));
    assert!(!summary.is_empty());
    let recall = std::fs::read_to_string(dir.path().join("recall.csv")).unwrap();
    assert!(recall.starts_with("# csm-report v1 config="));
    let values: Vec<f64> = data_rows(&recall).iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(values.len(), 16);
    assert!(values.windows(2).all(|w| w[0] <= w[1]));
    assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
    for f in ["metrics.csv", "mass.csv", "group_recall.csv", "summary.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    // Unseen query and documents still get a listing.
    let listing = ok(
        dir.path(),
        &with_small(&[
            "predict",
            "--query",
            "999999",
            "--docs",
            "900,901,902,903,904,905,906,907,908,909",
            "--k",
            "3",
        ]),
    );
    assert_eq!(listing.lines().count(), 3);
}

fn overfit_log() -> String {
    let mut s = String::new();
    for id in 0..128u64 {
        s.push_str(&format!("{id}\t0\tQ\t42\t0\t1 2 3 4 5 6 7 8 9 10\n{id}\t5\tC\t1\n"));
    }
    s
}

const OVERFIT: &[&str] = &[
    "--set",
    "data.eval_sessions=8",
    "--set",
    "model.hidden=8",
    "--set",
    "model.pos_width=8",
    "--set",
    "train.epochs=60",
    "--set",
    "train.batch_size=16",
    "--set",
    "train.lr=0.01",
    "--set",
    "beam.k=4",
    "--set",
    "beam.beam_size=4",
    "--set",
    "eval.k_list=[1,2,4]",
    "--set",
    "eval.simulator_oracle=false",
];

#[test]
fn overfit_model_predicts_the_only_pattern() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sessions.log"), overfit_log()).unwrap();
    let mut args = vec!["train"];
    args.extend_from_slice(OVERFIT);
    ok(dir.path(), &args);

    let mut args = vec!["predict", "--query", "42", "--docs", "1,2,3,4,5,6,7,8,9,10", "--k", "1"];
    args.extend_from_slice(OVERFIT);
    let listing = ok(dir.path(), &args);
    let line = listing.lines().next().unwrap();
    let (prob, seq) = line.split_once('\t').unwrap();
    assert_eq!(seq, "1");
    assert!(prob.parse::<f64>().unwrap() > 0.9, "{line}");

    let mut args = vec!["eval", "--split", "train"];
    args.extend_from_slice(OVERFIT);
    ok(dir.path(), &args);
    let recall = std::fs::read_to_string(dir.path().join("recall.csv")).unwrap();
    let first = &data_rows(&recall)[0];
    assert_eq!(first[0], "1");
    assert_eq!(first[1].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = csm(dir.path(), &["--set", "train.nope=1", "config"]);
    assert!(!out.status.success());
    let out = csm(dir.path(), &["stats"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sessions.log"));

    std::fs::write(dir.path().join("sessions.log"), "garbage line\n").unwrap();
    assert!(csm(dir.path(), &["stats"]).status.success());
    assert!(!csm(dir.path(), &["--fail-fast", "stats"]).status.success());
}

#[test]
fn retraining_with_the_same_seed_gives_the_same_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &with_small(&["synth"]));
    let hash = || {
        ok(
            dir.path(),
            &with_small(&["train", "--set", "train.epochs=1", "--seed", "3"]),
        );
        Sha256::digest(std::fs::read(dir.path().join("model.ckpt")).unwrap())
    };
    assert_eq!(hash(), hash());
}

#[test]
fn divergent_training_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &with_small(&["synth"]));
    let out = csm(
        dir.path(),
        &with_small(&[
            "train",
            "--set",
            "train.epochs=3",
            "--set",
            "train.lr=1e308",
            "--set",
            "train.clip=1e308",
        ]),
    );
    assert!(!out.status.success());
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("non-finite"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
