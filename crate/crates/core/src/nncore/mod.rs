//! Minimal neural-network machinery: tensors and parameter stores,
//! reverse-mode differentiation, GRU and additive-attention layers, softmax
//! cross-entropy, Adam, global-norm clipping and finite-difference checks.

pub mod checkpoint;
mod gradcheck;
mod layers;
mod ops;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, CoordCheck, GradCheckConfig, GradCheckReport, REL_ERROR_FLOOR};
pub use layers::{attention, gru_step, Attention, GruCell, Init};
pub use ops::{Forward, Ops, Val};
pub use optim::{clip_global_norm, AdamConfig, AdamState};
pub use tape::{Tape, Var};
pub use tensor::{Grads, ParamId, ParamStore, Tensor};

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// `(−ln softmax(logits)[target], softmax(logits))`.
pub fn softmax_xent(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    assert!(target < logits.len(), "target {target} out of range");
    let loss = -log_softmax(logits)[target];
    (loss, softmax(logits))
}
