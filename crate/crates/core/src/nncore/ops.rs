//! The operation set the model is written against.
//!
//! Model code is generic over [`Ops`], so the same definition runs on the
//! plain evaluator ([`Forward`], used for scoring and decoding) and on the
//! recording [`Tape`](super::Tape) used for training.

use std::rc::Rc;

use super::{ParamId, ParamStore};
use crate::patterns::SparseFeature;

pub trait Ops {
    type V: Clone;

    fn params(&self) -> &ParamStore;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a [f64];

    fn constant(&mut self, values: Vec<f64>) -> Self::V;
    /// A parameter used as a vector (biases).
    fn param(&mut self, id: ParamId) -> Self::V;
    /// `W · x` for a `[rows, cols]` parameter.
    fn matvec(&mut self, w: ParamId, x: &Self::V) -> Self::V;
    /// `Σ count · table[index]` over a sparse feature.
    fn embed(&mut self, table: ParamId, feature: &SparseFeature) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sigmoid(&mut self, a: &Self::V) -> Self::V;
    fn tanh(&mut self, a: &Self::V) -> Self::V;
    fn concat(&mut self, parts: &[Self::V]) -> Self::V;
    /// Scalar `v · x` for a vector parameter `v`.
    fn dot(&mut self, v: ParamId, x: &Self::V) -> Self::V;
    fn softmax(&mut self, x: &Self::V) -> Self::V;
    /// `Σ weights[i] · items[i]`.
    fn weighted_sum(&mut self, weights: &Self::V, items: &[Self::V]) -> Self::V;
    /// Softmax cross-entropy `-ln softmax(logits)[target]` as a scalar.
    fn xent(&mut self, logits: &Self::V, target: usize) -> Self::V;
    /// Sum of scalars.
    fn sum(&mut self, xs: &[Self::V]) -> Self::V;
}

pub(crate) mod kernels {
    use super::*;

    pub fn matvec(params: &ParamStore, w: ParamId, x: &[f64]) -> Vec<f64> {
        let t = params.get(w);
        let (rows, cols) = t.dims2();
        assert_eq!(
            cols,
            x.len(),
            "matvec: {} has {cols} columns, input has {}",
            params.name(w),
            x.len()
        );
        let data = t.data();
        (0..rows)
            .map(|r| data[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn embed(params: &ParamStore, table: ParamId, f: &SparseFeature) -> Vec<f64> {
        crate::patterns::embed(params.get(table), f).unwrap_or_else(|e| panic!("{}: {e}", params.name(table)))
    }

    pub fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        assert_eq!(a.len(), b.len(), "elementwise op on mismatched lengths");
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    pub fn concat<'a>(parts: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn dot(params: &ParamStore, v: ParamId, x: &[f64]) -> f64 {
        let d = params.get(v).data();
        assert_eq!(d.len(), x.len());
        d.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn weighted_sum<'a>(weights: &[f64], items: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for (w, item) in weights.iter().zip(items) {
            if out.is_empty() {
                out = vec![0.0; item.len()];
            }
            for (o, v) in out.iter_mut().zip(item) {
                *o += w * v;
            }
        }
        out
    }
}

/// Non-recording evaluator. Values are reference counted so decoder states
/// can be cloned cheaply during search.
pub struct Forward<'p> {
    params: &'p ParamStore,
}

impl<'p> Forward<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Forward { params }
    }
}

pub type Val = Rc<[f64]>;

impl Ops for Forward<'_> {
    type V = Val;

    fn params(&self) -> &ParamStore {
        self.params
    }

    fn value<'a>(&'a self, v: &'a Val) -> &'a [f64] {
        v
    }

    fn constant(&mut self, values: Vec<f64>) -> Val {
        values.into()
    }

    fn param(&mut self, id: ParamId) -> Val {
        self.params.get(id).data().into()
    }

    fn matvec(&mut self, w: ParamId, x: &Val) -> Val {
        kernels::matvec(self.params, w, x).into()
    }

    fn embed(&mut self, table: ParamId, feature: &SparseFeature) -> Val {
        kernels::embed(self.params, table, feature).into()
    }

    fn add(&mut self, a: &Val, b: &Val) -> Val {
        kernels::zip(a, b, |x, y| x + y).into()
    }

    fn sub(&mut self, a: &Val, b: &Val) -> Val {
        kernels::zip(a, b, |x, y| x - y).into()
    }

    fn mul(&mut self, a: &Val, b: &Val) -> Val {
        kernels::zip(a, b, |x, y| x * y).into()
    }

    fn sigmoid(&mut self, a: &Val) -> Val {
        a.iter().map(|&x| kernels::sigmoid(x)).collect()
    }

    fn tanh(&mut self, a: &Val) -> Val {
        a.iter().map(|x| x.tanh()).collect()
    }

    fn concat(&mut self, parts: &[Val]) -> Val {
        kernels::concat(parts.iter().map(|p| &p[..])).into()
    }

    fn dot(&mut self, v: ParamId, x: &Val) -> Val {
        Rc::from([kernels::dot(self.params, v, x)])
    }

    fn softmax(&mut self, x: &Val) -> Val {
        super::softmax(x).into()
    }

    fn weighted_sum(&mut self, weights: &Val, items: &[Val]) -> Val {
        kernels::weighted_sum(weights, items.iter().map(|i| &i[..])).into()
    }

    fn xent(&mut self, logits: &Val, target: usize) -> Val {
        Rc::from([super::softmax_xent(logits, target).0])
    }

    fn sum(&mut self, xs: &[Val]) -> Val {
        Rc::from([xs.iter().map(|x| x[0]).sum::<f64>()])
    }
}
