use rand::Rng;

use super::{Ops, ParamId, ParamStore, Tensor};

/// Uniform `(-scale, scale)` matrices and zero biases.
pub struct Init<'r, R: Rng> {
    pub rng: &'r mut R,
    pub scale: f64,
}

impl<R: Rng> Init<'_, R> {
    pub fn matrix(&mut self, rows: usize, cols: usize) -> Tensor {
        let s = self.scale;
        let rng = &mut *self.rng;
        Tensor::from_fn(&[rows, cols], |_| if s > 0.0 { rng.gen_range(-s..s) } else { 0.0 })
    }

    pub fn vector(&mut self, n: usize) -> Tensor {
        let s = self.scale;
        let rng = &mut *self.rng;
        Tensor::from_fn(&[n], |_| if s > 0.0 { rng.gen_range(-s..s) } else { 0.0 })
    }

    pub fn zeros(&mut self, n: usize) -> Tensor {
        Tensor::zeros(&[n])
    }
}

/// Gated recurrent unit:
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// ĥ  = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ ĥ
/// ```
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

impl GruCell {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        init: &mut Init<R>,
    ) -> Self {
        let mut gate = |g: &str| {
            (
                store.add(format!("{prefix}.w_{g}"), init.matrix(hidden, input)),
                store.add(format!("{prefix}.u_{g}"), init.matrix(hidden, hidden)),
                store.add(format!("{prefix}.b_{g}"), init.zeros(hidden)),
            )
        };
        let (w_z, u_z, b_z) = gate("z");
        let (w_r, u_r, b_r) = gate("r");
        let (w_h, u_h, b_h) = gate("h");
        GruCell {
            input,
            hidden,
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
        }
    }

    /// Looks the cell's tensors up by name, checking their shapes.
    pub fn bind(store: &ParamStore, prefix: &str) -> Option<Self> {
        let id = |n: &str| store.find(&format!("{prefix}.{n}"));
        let w_z = id("w_z")?;
        let (hidden, input) = store.get(w_z).dims2();
        let cell = GruCell {
            input,
            hidden,
            w_z,
            u_z: id("u_z")?,
            b_z: id("b_z")?,
            w_r: id("w_r")?,
            u_r: id("u_r")?,
            b_r: id("b_r")?,
            w_h: id("w_h")?,
            u_h: id("u_h")?,
            b_h: id("b_h")?,
        };
        let ok = [cell.w_r, cell.w_h]
            .iter()
            .all(|&w| store.get(w).shape() == [hidden, input])
            && [cell.u_z, cell.u_r, cell.u_h]
                .iter()
                .all(|&u| store.get(u).shape() == [hidden, hidden])
            && [cell.b_z, cell.b_r, cell.b_h]
                .iter()
                .all(|&b| store.get(b).shape() == [hidden]);
        ok.then_some(cell)
    }
}

pub fn gru_step<O: Ops>(ops: &mut O, cell: &GruCell, h: &O::V, x: &O::V) -> O::V {
    let gate = |ops: &mut O, w: ParamId, u: ParamId, b: ParamId, h: &O::V| {
        let wx = ops.matvec(w, x);
        let uh = ops.matvec(u, h);
        let s = ops.add(&wx, &uh);
        let bias = ops.param(b);
        ops.add(&s, &bias)
    };
    let z_pre = gate(ops, cell.w_z, cell.u_z, cell.b_z, h);
    let z = ops.sigmoid(&z_pre);
    let r_pre = gate(ops, cell.w_r, cell.u_r, cell.b_r, h);
    let r = ops.sigmoid(&r_pre);
    let rh = ops.mul(&r, h);
    let cand_pre = gate(ops, cell.w_h, cell.u_h, cell.b_h, &rh);
    let cand = ops.tanh(&cand_pre);
    let delta = ops.sub(&cand, h);
    let step = ops.mul(&z, &delta);
    ops.add(h, &step)
}

/// Additive attention: `score_i = vᵀ tanh(W_s s + W_m m_i)`, weights are the
/// softmax of the scores and the context is the weighted sum of the memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attention {
    pub w_s: ParamId,
    pub w_m: ParamId,
    pub v: ParamId,
}

impl Attention {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        state: usize,
        memory: usize,
        hidden: usize,
        init: &mut Init<R>,
    ) -> Self {
        Attention {
            w_s: store.add(format!("{prefix}.w_s"), init.matrix(hidden, state)),
            w_m: store.add(format!("{prefix}.w_m"), init.matrix(hidden, memory)),
            v: store.add(format!("{prefix}.v"), init.vector(hidden)),
        }
    }

    pub fn bind(store: &ParamStore, prefix: &str) -> Option<Self> {
        let id = |n: &str| store.find(&format!("{prefix}.{n}"));
        let att = Attention {
            w_s: id("w_s")?,
            w_m: id("w_m")?,
            v: id("v")?,
        };
        let hidden = store.get(att.v).len();
        let ok = store.get(att.v).shape().len() == 1
            && store.get(att.w_s).dims2().0 == hidden
            && store.get(att.w_m).dims2().0 == hidden;
        ok.then_some(att)
    }

    /// `W_m m_i` for every memory entry; independent of the query state, so
    /// it is computed once per memory.
    pub fn project<O: Ops>(&self, ops: &mut O, memory: &[O::V]) -> Vec<O::V> {
        memory.iter().map(|m| ops.matvec(self.w_m, m)).collect()
    }

    /// Returns `(context, weights)`.
    pub fn attend<O: Ops>(&self, ops: &mut O, s: &O::V, memory: &[O::V], projected: &[O::V]) -> (O::V, O::V) {
        assert!(!memory.is_empty(), "attention over an empty memory");
        let q = ops.matvec(self.w_s, s);
        let scores: Vec<O::V> = projected
            .iter()
            .map(|p| {
                let pre = ops.add(&q, p);
                let act = ops.tanh(&pre);
                ops.dot(self.v, &act)
            })
            .collect();
        let scores = ops.concat(&scores);
        let weights = ops.softmax(&scores);
        let context = ops.weighted_sum(&weights, memory);
        (context, weights)
    }
}

pub fn attention<O: Ops>(ops: &mut O, att: &Attention, s: &O::V, memory: &[O::V]) -> (O::V, O::V) {
    let projected = att.project(ops, memory);
    att.attend(ops, s, memory, &projected)
}
