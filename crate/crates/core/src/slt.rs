//! Sequential latent transformer: causal transition model over latent and
//! action pairs, with a shared projector, a linear predictor and a
//! stop-gradient cosine objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionMask, Graph, Mat, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, MultiHeadAttention};

pub const ACTION_DIM: usize = 2;
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SltConfig {
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Prediction horizon `T_f`.
    pub horizon: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
}

impl Default for SltConfig {
    fn default() -> Self {
        Self {
            width: 128,
            heads: 4,
            mlp_hidden: 256,
            horizon: 3,
            proj_hidden: 128,
            proj_dim: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Slt {
    pub cfg: SltConfig,
    pub action_embed: Linear,
    pub input: Linear,
    pub position: ParamId,
    pub attn: MultiHeadAttention,
    pub ffn: Mlp,
    pub projector: Mlp,
    pub predictor: Linear,
}

impl Slt {
    /// Parameters live under `transition.*`, `projector.*` and `predictor.*`.
    pub fn new(ps: &mut ParamStore, cfg: SltConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.width;
        Self {
            action_embed: Linear::new(ps, "transition.action", ACTION_DIM, d, rng),
            input: Linear::new(ps, "transition.input", 2 * d, d, rng),
            position: ps.add_uniform("transition.position", (cfg.horizon, d), d, rng),
            attn: MultiHeadAttention::new(ps, "transition.attn", d, d, d, cfg.heads, rng),
            ffn: Mlp::new(ps, "transition.ffn", &[d, cfg.mlp_hidden, d], rng),
            projector: Mlp::new(ps, "projector", &[d, cfg.proj_hidden, cfg.proj_dim], rng),
            predictor: Linear::new(ps, "predictor", cfg.proj_dim, cfg.proj_dim, rng),
            cfg,
        }
    }

    pub const GROUPS: [&'static str; 3] = ["transition", "projector", "predictor"];

    /// One-step-ahead latent predictions for `batch` sequences.
    ///
    /// `h_seq` is `[batch * T_f, D]` and `a_seq` `[batch * T_f, 2]`, both
    /// sequence-major; row `k` of a sequence predicts the latent at `k + 1`
    /// from inputs at positions `<= k`.
    pub fn predict_transitions(&self, g: &mut Graph, ps: &ParamStore, h_seq: Var, a_seq: Var, batch: usize) -> Result<Var> {
        let t_f = self.cfg.horizon;
        let (hr, hc) = g.shape(h_seq);
        let (ar, ac) = g.shape(a_seq);
        if hr != batch * t_f || ar != hr || ac != ACTION_DIM || hc != self.cfg.width {
            return Err(Error::Usage(format!(
                "transition inputs must be [{}, {}] and [{}, 2], got [{hr}, {hc}] and [{ar}, {ac}]",
                batch * t_f,
                self.cfg.width,
                batch * t_f
            )));
        }
        let ae = self.action_embed.forward(g, ps, a_seq);
        let x = g.concat_cols(&[h_seq, ae]);
        let x = self.input.forward(g, ps, x);
        let pos = g.param(ps, self.position);
        let rows: Vec<usize> = (0..batch * t_f).map(|r| r % t_f).collect();
        let pos = g.gather_rows(pos, &rows);
        let x = g.add(x, pos);
        let att = self.attn.forward(g, ps, x, x, AttentionMask::causal(batch, t_f));
        let x = g.add(x, att.out);
        let f = self.ffn.forward(g, ps, x);
        Ok(g.add(x, f))
    }

    /// `(z, z_hat)`: stop-gradient projected targets and predicted
    /// projections of the transition outputs.
    pub fn project(&self, g: &mut Graph, ps: &ParamStore, targets: Var, preds: Var) -> (Var, Var) {
        let z = self.projector.forward(g, ps, targets);
        let z = g.detach(z);
        let p = self.projector.forward(g, ps, preds);
        let z_hat = self.predictor.forward(g, ps, p);
        (z, z_hat)
    }

    /// Full objective for sequences of latents `h_{t..t+T_f}`: inputs are
    /// positions `0..T_f`, targets `1..=T_f`.
    pub fn loss(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        h_inputs: Var,
        h_targets: Var,
        actions: &Mat,
        valid: &[bool],
        batch: usize,
    ) -> Result<Var> {
        let a = g.constant(actions.clone());
        let preds = self.predict_transitions(g, ps, h_inputs, a, batch)?;
        let (z, z_hat) = self.project(g, ps, h_targets, preds);
        similarity_loss(g, z, z_hat, valid)
    }
}

/// Mean negative cosine similarity over valid rows. Norms carry `eps`
/// inside the square root, so zero vectors give a similarity of zero.
pub fn similarity_loss(g: &mut Graph, z: Var, z_hat: Var, valid: &[bool]) -> Result<Var> {
    let rows = g.shape(z).0;
    if valid.len() != rows || g.shape(z_hat) != g.shape(z) {
        return Err(Error::Usage("similarity inputs and validity disagree in shape".into()));
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::Usage("similarity loss needs at least one valid slot".into()));
    }
    let prod = g.mul(z, z_hat);
    let dot = g.sum_cols(prod);
    let zz = g.square(z);
    let zz = g.sum_cols(zz);
    let zz = g.add_scalar(zz, COSINE_EPS * COSINE_EPS);
    let nz = g.sqrt(zz);
    let hh = g.square(z_hat);
    let hh = g.sum_cols(hh);
    let hh = g.add_scalar(hh, COSINE_EPS * COSINE_EPS);
    let nh = g.sqrt(hh);
    let denom = g.mul(nz, nh);
    let cos = g.div(dot, denom);
    let cos = g.mask_rows(cos, valid);
    let total = g.sum(cos);
    Ok(g.scale(total, -1.0 / count as f64))
}
