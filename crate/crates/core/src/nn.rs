//! Layers built on the autograd tape. Layers only hold [`ParamId`]s; the
//! values live in a [`ParamStore`] so online and target copies can share
//! one module description.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionMask, Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let w = ps.add_uniform(format!("{name}.w"), (in_dim, out_dim), in_dim, rng);
        let b = ps.add_uniform(format!("{name}.b"), (1, out_dim), in_dim, rng);
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = g.matmul(x, w);
        g.add(y, b)
    }
}

/// Fully connected stack with ReLU between layers and a linear output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, ps, h);
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }
}

/// Multi-head attention: per-head projections packed column-wise into
/// `W^Q, W^K, W^V`, concatenated heads projected by `W^O`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Output of [`MultiHeadAttention::forward`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    /// The node holding the attention weights (see [`Graph::attention_weights`]).
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(heads > 0 && width.is_multiple_of(heads), "width {width} not divisible by {heads} heads");
        Self {
            q: Linear::new(ps, &format!("{name}.q"), q_dim, width, rng),
            k: Linear::new(ps, &format!("{name}.k"), kv_dim, width, rng),
            v: Linear::new(ps, &format!("{name}.v"), kv_dim, width, rng),
            o: Linear::new(ps, &format!("{name}.o"), width, width, rng),
            heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        query: Var,
        key_value: Var,
        mask: AttentionMask,
    ) -> AttentionOutput {
        let q = self.q.forward(g, ps, query);
        let k = self.k.forward(g, ps, key_value);
        let v = self.v.forward(g, ps, key_value);
        let att = g.attention(q, k, v, self.heads, mask);
        let out = self.o.forward(g, ps, att);
        AttentionOutput { out, weights: att }
    }
}

/// Single-layer LSTM over a batch of sequences.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Lstm {
    pub input: Linear,
    pub recurrent: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let input = Linear::new(ps, &format!("{name}.x"), in_dim, 4 * hidden, rng);
        let recurrent = ps.add_uniform(format!("{name}.h"), (hidden, 4 * hidden), hidden, rng);
        Self {
            input,
            recurrent,
            hidden,
        }
    }

    /// Runs over `steps` (each `[batch, in_dim]`) and returns the final hidden
    /// state. Rows whose `valid[t][row]` is false carry the previous state.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, steps: &[Var], valid: &[Vec<bool>]) -> Var {
        let batch = g.shape(steps[0]).0;
        let hd = self.hidden;
        let mut h = g.constant(ndarray::Array2::zeros((batch, hd)));
        let mut c = g.constant(ndarray::Array2::zeros((batch, hd)));
        let wh = g.param(ps, self.recurrent);
        for (t, &x) in steps.iter().enumerate() {
            let xi = self.input.forward(g, ps, x);
            let hh = g.matmul(h, wh);
            let gates = g.add(xi, hh);
            let i = g.slice_cols(gates, 0, hd);
            let f = g.slice_cols(gates, hd, 2 * hd);
            let cand = g.slice_cols(gates, 2 * hd, 3 * hd);
            let o = g.slice_cols(gates, 3 * hd, 4 * hd);
            let i = g.sigmoid(i);
            let f = g.sigmoid(f);
            let cand = g.tanh(cand);
            let o = g.sigmoid(o);
            let fc = g.mul(f, c);
            let ic = g.mul(i, cand);
            let c_new = g.add(fc, ic);
            let tc = g.tanh(c_new);
            let h_new = g.mul(o, tc);
            let keep: Vec<bool> = valid[t].iter().map(|v| !v).collect();
            let h_upd = g.mask_rows(h_new, &valid[t]);
            let h_old = g.mask_rows(h, &keep);
            h = g.add(h_upd, h_old);
            let c_upd = g.mask_rows(c_new, &valid[t]);
            let c_old = g.mask_rows(c, &keep);
            c = g.add(c_upd, c_old);
        }
        h
    }
}
