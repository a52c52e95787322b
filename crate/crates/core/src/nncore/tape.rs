//! Reverse-mode differentiation over a linear tape of [`Ops`] calls.

use super::ops::kernels;
use super::{Grads, Ops, ParamId, ParamStore};
use crate::patterns::SparseFeature;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(u32);

enum Op {
    Const,
    Param(ParamId),
    MatVec(ParamId, Var),
    Embed(ParamId, Vec<(u32, f64)>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Dot(ParamId, Var),
    Softmax(Var),
    WeightedSum(Var, Vec<Var>),
    Xent {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Sum(Vec<Var>),
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var((self.nodes.len() - 1) as u32)
    }

    fn val(&self, v: Var) -> &[f64] {
        &self.nodes[v.0 as usize].value
    }

    /// Accumulates `d root / d param` into `grads`. `root` must be a scalar.
    pub fn backward(&self, root: Var, grads: &mut Grads) {
        assert_eq!(self.val(root).len(), 1, "backward from a non-scalar");
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0 as usize] = Some(vec![1.0]);

        fn acc(adj: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
            let slot = &mut adj[v.0 as usize];
            let buf = slot.get_or_insert_with(|| vec![0.0; nodes[v.0 as usize].value.len()]);
            f(buf);
        }

        for i in (0..=root.0 as usize).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let nodes = &self.nodes;
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    for (d, gi) in grads.get_mut(*id).iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
                Op::MatVec(w, x) => {
                    let xv = self.val(*x);
                    let wt = self.params.get(*w);
                    let (rows, cols) = wt.dims2();
                    let gw = grads.get_mut(*w);
                    for r in 0..rows {
                        let gr = g[r];
                        if gr != 0.0 {
                            for (d, xc) in gw[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                                *d += gr * xc;
                            }
                        }
                    }
                    let wd = wt.data();
                    acc(&mut adj, nodes, *x, |dx| {
                        for r in 0..rows {
                            let gr = g[r];
                            if gr != 0.0 {
                                for (d, wv) in dx.iter_mut().zip(&wd[r * cols..(r + 1) * cols]) {
                                    *d += gr * wv;
                                }
                            }
                        }
                    });
                }
                Op::Embed(table, entries) => {
                    for &(idx, c) in entries {
                        for (d, gi) in grads.row_mut(*table, idx as usize).iter_mut().zip(&g) {
                            *d += c * gi;
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut adj, nodes, *a, |d| {
                        d.iter_mut().zip(&g).for_each(|(d, gi)| *d += gi)
                    });
                    acc(&mut adj, nodes, *b, |d| {
                        d.iter_mut().zip(&g).for_each(|(d, gi)| *d += gi)
                    });
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, nodes, *a, |d| {
                        d.iter_mut().zip(&g).for_each(|(d, gi)| *d += gi)
                    });
                    acc(&mut adj, nodes, *b, |d| {
                        d.iter_mut().zip(&g).for_each(|(d, gi)| *d -= gi)
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.val(*a), self.val(*b));
                    acc(&mut adj, nodes, *a, |d| {
                        for ((d, gi), y) in d.iter_mut().zip(&g).zip(bv) {
                            *d += gi * y;
                        }
                    });
                    acc(&mut adj, nodes, *b, |d| {
                        for ((d, gi), x) in d.iter_mut().zip(&g).zip(av) {
                            *d += gi * x;
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(&mut adj, nodes, *a, |d| {
                        for ((d, gi), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += gi * y * (1.0 - y);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(&mut adj, nodes, *a, |d| {
                        for ((d, gi), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += gi * (1.0 - y * y);
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.val(*p).len();
                        let gs = &g[off..off + n];
                        acc(&mut adj, nodes, *p, |d| {
                            d.iter_mut().zip(gs).for_each(|(d, gi)| *d += gi)
                        });
                        off += n;
                    }
                }
                Op::Dot(v, x) => {
                    let g0 = g[0];
                    let xv = self.val(*x);
                    for (d, xi) in grads.get_mut(*v).iter_mut().zip(xv) {
                        *d += g0 * xi;
                    }
                    let vv = self.params.get(*v).data();
                    acc(&mut adj, nodes, *x, |d| {
                        d.iter_mut().zip(vv).for_each(|(d, vi)| *d += g0 * vi)
                    });
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    acc(&mut adj, nodes, *a, |d| {
                        for ((d, gi), yi) in d.iter_mut().zip(&g).zip(y) {
                            *d += yi * (gi - gy);
                        }
                    });
                }
                Op::WeightedSum(w, items) => {
                    let wv = self.val(*w);
                    let dw: Vec<f64> = items
                        .iter()
                        .map(|it| self.val(*it).iter().zip(&g).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(&mut adj, nodes, *w, |d| {
                        d.iter_mut().zip(&dw).for_each(|(d, x)| *d += x)
                    });
                    for (it, &wi) in items.iter().zip(wv) {
                        acc(&mut adj, nodes, *it, |d| {
                            d.iter_mut().zip(&g).for_each(|(d, gi)| *d += wi * gi)
                        });
                    }
                }
                Op::Xent { logits, target, probs } => {
                    let g0 = g[0];
                    acc(&mut adj, nodes, *logits, |d| {
                        for (k, (d, p)) in d.iter_mut().zip(probs).enumerate() {
                            let onehot = if k == *target { 1.0 } else { 0.0 };
                            *d += g0 * (p - onehot);
                        }
                    });
                }
                Op::Sum(xs) => {
                    for x in xs {
                        acc(&mut adj, nodes, *x, |d| d[0] += g[0]);
                    }
                }
            }
        }
    }
}

impl Ops for Tape<'_> {
    type V = Var;

    fn params(&self) -> &ParamStore {
        self.params
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a [f64] {
        self.val(*v)
    }

    fn constant(&mut self, values: Vec<f64>) -> Var {
        self.push(values, Op::Const)
    }

    fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).data().to_vec();
        self.push(value, Op::Param(id))
    }

    fn matvec(&mut self, w: ParamId, x: &Var) -> Var {
        let value = kernels::matvec(self.params, w, self.val(*x));
        self.push(value, Op::MatVec(w, *x))
    }

    fn embed(&mut self, table: ParamId, feature: &SparseFeature) -> Var {
        let value = kernels::embed(self.params, table, feature);
        self.push(value, Op::Embed(table, feature.entries.clone()))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let value = kernels::zip(self.val(*a), self.val(*b), |x, y| x + y);
        self.push(value, Op::Add(*a, *b))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let value = kernels::zip(self.val(*a), self.val(*b), |x, y| x - y);
        self.push(value, Op::Sub(*a, *b))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let value = kernels::zip(self.val(*a), self.val(*b), |x, y| x * y);
        self.push(value, Op::Mul(*a, *b))
    }

    fn sigmoid(&mut self, a: &Var) -> Var {
        let value = self.val(*a).iter().map(|&x| kernels::sigmoid(x)).collect();
        self.push(value, Op::Sigmoid(*a))
    }

    fn tanh(&mut self, a: &Var) -> Var {
        let value = self.val(*a).iter().map(|x| x.tanh()).collect();
        self.push(value, Op::Tanh(*a))
    }

    fn concat(&mut self, parts: &[Var]) -> Var {
        let value = kernels::concat(parts.iter().map(|p| self.val(*p)));
        self.push(value, Op::Concat(parts.to_vec()))
    }

    fn dot(&mut self, v: ParamId, x: &Var) -> Var {
        let value = vec![kernels::dot(self.params, v, self.val(*x))];
        self.push(value, Op::Dot(v, *x))
    }

    fn softmax(&mut self, x: &Var) -> Var {
        let value = super::softmax(self.val(*x));
        self.push(value, Op::Softmax(*x))
    }

    fn weighted_sum(&mut self, weights: &Var, items: &[Var]) -> Var {
        let value = kernels::weighted_sum(self.val(*weights), items.iter().map(|i| self.val(*i)));
        self.push(value, Op::WeightedSum(*weights, items.to_vec()))
    }

    fn xent(&mut self, logits: &Var, target: usize) -> Var {
        let (loss, probs) = super::softmax_xent(self.val(*logits), target);
        self.push(
            vec![loss],
            Op::Xent {
                logits: *logits,
                target,
                probs,
            },
        )
    }

    fn sum(&mut self, xs: &[Var]) -> Var {
        let value = vec![xs.iter().map(|x| self.val(*x)[0]).sum()];
        self.push(value, Op::Sum(xs.to_vec()))
    }
}
