use super::*;
use crate::clicklog::{simulate_log, Click, QuerySession, SimulatorConfig};
use crate::nncore::{grad_check, softmax, GradCheckConfig, Grads, Tape, Val};
use sha2::{Digest, Sha256};

const LN11: f64 = 2.3978952727983707;

fn tiny_config(seed: u64, scale: f64) -> CsmConfig {
    CsmConfig {
        n_positions: 3,
        hidden: 4,
        pos_width: 4,
        feed_current_attention: false,
        init_scale: scale,
        seed,
    }
}

fn tiny_stats() -> PatternStats {
    let mut s = PatternStats::new(3);
    s.add(7, &[11, 12, 13], &[1]);
    s.add(7, &[11, 12, 13], &[]);
    s.add(7, &[12, 11, 13], &[2, 1]);
    s.add(8, &[13, 11, 12], &[3]);
    s
}

fn step_probs(model: &CsmModel, features: &SerpFeatures, prefix: &[u8]) -> Vec<f64> {
    let mut ops = Forward::new(&model.params);
    let enc = model.encode(&mut ops, features);
    let mut state = model.decoder_init(&mut ops, &enc);
    for &p in prefix {
        state = model.decoder_step(&mut ops, &state, &enc).advance(p);
    }
    softmax(&model.decoder_step(&mut ops, &state, &enc).logits)
}

fn all_prefixes(n: u8, len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                (1..=n).map(move |q| {
                    let mut v = p.clone();
                    v.push(q);
                    v
                })
            })
            .collect();
    }
    out
}

#[test]
fn zero_model_is_uniform() {
    let model = CsmModel::new(CsmConfig {
        init_scale: 0.0,
        ..CsmConfig::default()
    });
    let mut stats = PatternStats::new(10);
    let results: Vec<u64> = (1..=10).collect();
    stats.add(1, &results, &[1, 3]);
    for seq in [vec![], vec![1], vec![4, 2, 4]] {
        let lp = model.sequence_log_prob(&stats, 1, &results, &seq).unwrap();
        assert!((lp + (seq.len() + 1) as f64 * LN11).abs() < 1e-12, "{seq:?}: {lp}");
    }
    let f = stats.featurize_serp(1, &results);
    let probs = step_probs(&model, &f, &[2]);
    assert_eq!(probs.len(), 11);
    assert!(probs.iter().all(|&p| (p - 1.0 / 11.0).abs() < 1e-15));
}

#[test]
fn zero_embeddings_give_zero_input_trace() {
    let mut model = CsmModel::new(tiny_config(3, 0.5));
    let stats = tiny_stats();
    for id in [model.ids.query_embed, model.ids.result_embed] {
        model.params.get_mut(id).data_mut().fill(0.0);
    }
    let f = stats.featurize_serp(7, &[11, 12, 13]);
    let mut ops = Forward::new(&model.params);
    let enc = model.encode(&mut ops, &f);
    let zero: Val = vec![0.0; 4].into();
    let mut h = zero.clone();
    for i in 0..4 {
        h = crate::nncore::gru_step(&mut ops, &model.ids.enc_fwd, &h, &zero);
        assert_eq!(&enc.memory[i][..4], &h[..]);
    }
}

#[test]
fn per_step_distributions_are_normalized() {
    for seed in 0..5 {
        let model = CsmModel::new(tiny_config(seed, 1.0));
        let f = tiny_stats().featurize_serp(7, &[11, 12, 13]);
        for prefix in all_prefixes(3, 2) {
            let p = step_probs(&model, &f, &prefix);
            assert_eq!(p.len(), 4);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }
}

#[test]
fn enumeration_mass_telescopes() {
    let stats = tiny_stats();
    for seed in 0..4 {
        let model = CsmModel::new(tiny_config(seed, 1.0));
        let results = [11, 12, 13];
        let f = stats.featurize_serp(7, &results);
        let max_len = 2;
        let mut total = 0.0;
        for len in 0..=max_len {
            for seq in all_prefixes(3, len) {
                total += model.sequence_log_prob(&stats, 7, &results, &seq).unwrap().exp();
            }
        }
        // Open prefixes of length max_len + 1: product of the per-step click probabilities.
        let mut open = 0.0;
        for prefix in all_prefixes(3, max_len + 1) {
            let mut p = 1.0;
            for t in 0..prefix.len() {
                p *= step_probs(&model, &f, &prefix[..t])[prefix[t] as usize - 1];
            }
            open += p;
        }
        assert!((total + open - 1.0).abs() < 1e-6, "seed {seed}: {}", total + open);
    }
}

#[test]
fn batch_scoring_matches_replay() {
    let stats = tiny_stats();
    let model = CsmModel::new(tiny_config(9, 0.7));
    let f = stats.featurize_serp(7, &[11, 12, 13]);
    for seq in [vec![], vec![2], vec![3, 1, 3, 2]] {
        let steps = model.step_log_probs(&f, &seq);
        let mut tape = Tape::new(&model.params);
        let loss = model.sequence_loss(&mut tape, &f, &seq);
        let taped = -tape.value(&loss)[0];
        let mut manual = 0.0;
        for t in 0..=seq.len() {
            let p = step_probs(&model, &f, &seq[..t]);
            manual += if t < seq.len() { p[seq[t] as usize - 1] } else { p[3] }.ln();
        }
        let sum: f64 = steps.iter().sum();
        assert!((sum - taped).abs() < 1e-9);
        assert!((sum - manual).abs() < 1e-9);
    }
}

#[test]
fn decoder_is_order_sensitive() {
    let model = CsmModel::new(tiny_config(4, 0.8));
    let f = tiny_stats().featurize_serp(7, &[11, 12, 13]);
    assert_ne!(step_probs(&model, &f, &[1, 3]), step_probs(&model, &f, &[3, 1]));
}

#[test]
fn encoding_depends_on_result_order() {
    let model = CsmModel::new(tiny_config(5, 0.8));
    let stats = tiny_stats();
    let mut ops = Forward::new(&model.params);
    let a = model.encode(&mut ops, &stats.featurize_serp(7, &[11, 12, 13]));
    let b = model.encode(&mut ops, &stats.featurize_serp(7, &[12, 11, 13]));
    assert_ne!(a.memory[0], b.memory[0]);
    assert_ne!(a.memory[3], b.memory[3]);
    let c = model.encode(&mut ops, &stats.featurize_serp(7, &[11, 12, 13]));
    assert_eq!(a.memory, c.memory);
    assert_eq!(a.final_state, c.final_state);
}

#[test]
fn decoder_init_is_linear_in_final_state() {
    let mut model = CsmModel::new(tiny_config(6, 0.5));
    let f = tiny_stats().featurize_serp(7, &[11, 12, 13]);
    let w = model.ids.w_init;
    model.params.get_mut(w).data_mut().fill(0.0);
    {
        let mut ops = Forward::new(&model.params);
        let enc = model.encode(&mut ops, &f);
        assert!(model.decoder_init(&mut ops, &enc).s.iter().all(|&v| v == 0.0));
    }
    // Left identity block selects the forward final state.
    for i in 0..4 {
        model.params.get_mut(w).data_mut()[i * 8 + i] = 1.0;
    }
    let mut ops = Forward::new(&model.params);
    let enc = model.encode(&mut ops, &f);
    let s0 = model.decoder_init(&mut ops, &enc).s;
    assert_eq!(&s0[..], &enc.memory[3][..4]);
    assert_eq!(&s0[..], &enc.final_state[..4]);
}

#[test]
fn position_embedding_selects_a_column() {
    let model = CsmModel::new(tiny_config(2, 0.5));
    let wp = model.params.get(model.ids.w_pos);
    let mut ops = Forward::new(&model.params);
    for p in 1..=3usize {
        let mut onehot = vec![0.0; 3];
        onehot[p - 1] = 1.0;
        let x = ops.constant(onehot);
        let y = ops.matvec(model.ids.w_pos, &x);
        let column: Vec<f64> = (0..4).map(|r| wp.data()[r * 3 + p - 1]).collect();
        assert_eq!(&y[..], &column[..]);
    }
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let stats = tiny_stats();
    for feed_current in [false, true] {
        let model = CsmModel::new(CsmConfig {
            feed_current_attention: feed_current,
            ..tiny_config(1, 0.5)
        });
        let batch: Vec<(u64, [u64; 3], Vec<u8>)> = vec![
            (7, [11, 12, 13], vec![1, 3]),
            (8, [13, 11, 12], vec![]),
            (7, [12, 11, 13], vec![2, 2, 1]),
        ];
        let loss_of = |m: &CsmModel| -> (f64, Grads) {
            let mut grads = Grads::zeros_like(&m.params);
            let mut total = 0.0;
            for (q, r, s) in &batch {
                let f = stats.featurize_serp(*q, r);
                let mut tape = Tape::new(&m.params);
                let l = m.sequence_loss(&mut tape, &f, s);
                total += tape.value(&l)[0];
                tape.backward(l, &mut grads);
            }
            (total, grads)
        };
        let (_, grads) = loss_of(&model);
        let forward_loss = |p: &ParamStore| {
            let m = CsmModel {
                params: p.clone(),
                ..model.clone()
            };
            batch
                .iter()
                .map(|(q, r, s)| -m.sequence_log_prob(&stats, *q, r, s).unwrap())
                .sum::<f64>()
        };
        let report = grad_check(forward_loss, &model.params, &grads, GradCheckConfig::default());
        assert!(report.passed(), "{:?}", report.worst(3));
        assert_eq!(report.params_covered().len(), model.params.len());
    }
}

fn repeated_session(n: usize, seq: &[u8]) -> Vec<QuerySession> {
    (0..n)
        .map(|i| QuerySession {
            session_id: i as u64 + 1,
            query_time: 0,
            query_id: 42,
            region_id: 0,
            results: (100..110).collect(),
            clicks: seq
                .iter()
                .enumerate()
                .map(|(k, &p)| Click {
                    time_passed: k as u64 + 1,
                    position: p,
                })
                .collect(),
        })
        .collect()
}

#[test]
fn overfits_a_single_sequence() {
    let sessions = repeated_session(64, &[1]);
    let stats = crate::patterns::count_patterns(&sessions);
    let mut model = CsmModel::new(CsmConfig {
        hidden: 8,
        pos_width: 8,
        ..CsmConfig::default()
    });
    let cfg = TrainConfig {
        epochs: 60,
        batch_size: 16,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &stats, &sessions, None, &cfg).unwrap();
    let p = model
        .sequence_log_prob(&stats, 42, &sessions[0].results, &[1])
        .unwrap()
        .exp();
    assert!(p > 0.9, "P((1)) = {p}, curve {:?}", report.curve.last());
}

fn synthetic(n: usize) -> Vec<QuerySession> {
    simulate_log(&SimulatorConfig::default(), n, 5, 50).unwrap()
}

#[test]
fn epoch_loss_decreases() {
    let sessions = synthetic(100);
    let stats = crate::patterns::count_patterns(&sessions);
    let mut model = CsmModel::new(CsmConfig {
        hidden: 8,
        pos_width: 8,
        ..CsmConfig::default()
    });
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 8,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &stats, &sessions, None, &cfg).unwrap();
    let losses: Vec<f64> = report.curve.iter().map(|e| e.train_loss).collect();
    let violations = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(violations <= 1, "{losses:?}");
    assert!(losses.last().unwrap() < &losses[0]);
}

fn checkpoint_bytes(model: &CsmModel, fp: &str) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, fp, &serde_json::Value::Null).unwrap();
    buf
}

#[test]
fn training_is_deterministic() {
    let sessions = synthetic(150);
    let stats = crate::patterns::count_patterns(&sessions);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        seed: 3,
        ..TrainConfig::default()
    };
    let run = |chunks: usize| {
        let mut model = CsmModel::new(CsmConfig {
            hidden: 6,
            pos_width: 6,
            ..CsmConfig::default()
        });
        let cfg = TrainConfig {
            grad_chunks: chunks,
            ..cfg.clone()
        };
        let report = train(&mut model, &stats, &sessions, None, &cfg).unwrap();
        (Sha256::digest(checkpoint_bytes(&model, &stats.fingerprint())), report)
    };
    let (a, ra) = run(4);
    let (b, rb) = run(4);
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (c, _) = pool.install(|| run(4));
    assert_eq!(a, c);
}

#[test]
fn zero_epochs_keep_initial_params() {
    let sessions = synthetic(20);
    let stats = crate::patterns::count_patterns(&sessions);
    let mut model = CsmModel::new(CsmConfig::default());
    let before = model.clone();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &stats, &sessions, Some(&sessions), &cfg).unwrap();
    assert_eq!(model, before);
    assert_eq!(report.curve.len(), 1);
    // Training sessions are featurized without their own counts, held-out ones with them.
    let held = report.curve[0].held_out_loss.unwrap();
    assert_ne!(held, report.curve[0].train_loss);
    let literal = TrainConfig {
        leave_one_out: false,
        ..cfg
    };
    let report = train(&mut model, &stats, &sessions, Some(&sessions), &literal).unwrap();
    assert_eq!(report.curve[0].held_out_loss, Some(report.curve[0].train_loss));
    assert_eq!(report.curve[0].train_loss, held);
}

#[test]
fn non_finite_loss_aborts_without_update() {
    let sessions = synthetic(20);
    let stats = crate::patterns::count_patterns(&sessions);
    let mut model = CsmModel::new(CsmConfig::default());
    let w = model.ids.w_out;
    model.params.get_mut(w).data_mut()[0] = f64::NAN;
    let before = checkpoint_bytes(&model, "");
    assert!(matches!(
        train(&mut model, &stats, &sessions, None, &TrainConfig::default()),
        Err(Error::NonFinite(_))
    ));
    assert_eq!(checkpoint_bytes(&model, ""), before);
}

#[test]
fn checkpoint_round_trip() {
    let model = CsmModel::new(tiny_config(8, 0.3));
    let bytes = checkpoint_bytes(&model, "abc");
    let ck = read_checkpoint(bytes.as_slice()).unwrap();
    assert_eq!(ck.model, model);
    assert_eq!(ck.stats_fingerprint, "abc");
    assert!(ck.fingerprint_warning("abc").is_none());
    assert!(ck.fingerprint_warning("abd").is_some());
    assert_eq!(checkpoint_bytes(&ck.model, "abc"), bytes);
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let model = CsmModel::new(tiny_config(8, 0.3));
    let mut other = tiny_config(8, 0.3);
    other.hidden = 5;
    assert!(CsmModel::from_params(other, model.params.clone()).is_err());
}
