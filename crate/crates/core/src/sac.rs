//! Soft actor-critic heads on scene latents: squashed Gaussian policy,
//! twin critics, entropy temperature and the environment action mapping.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::sim::HybridAction;

pub const ACTION_DIM: usize = 2;
pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct SacConfig {
    pub width: usize,
    pub hidden: usize,
    pub gamma: f64,
    pub polyak: f64,
    pub initial_alpha: f64,
    pub target_entropy: f64,
    pub v_max: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            width: 128,
            hidden: 256,
            gamma: 0.99,
            polyak: 0.005,
            initial_alpha: 1.0,
            target_entropy: -(ACTION_DIM as f64),
            v_max: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Reparameterized policy sample.
#[derive(Clone, Copy, Debug)]
pub struct PolicySample {
    /// `[B, 2]` squashed actions.
    pub action: Var,
    /// `[B, 1]` log-densities of `action`.
    pub log_prob: Var,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sac {
    pub cfg: SacConfig,
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub log_alpha: ParamId,
}

impl Sac {
    pub const ACTOR_GROUPS: [&'static str; 1] = ["actor"];
    pub const CRITIC_GROUPS: [&'static str; 2] = ["critic1", "critic2"];

    pub fn new(ps: &mut ParamStore, cfg: SacConfig, rng: &mut impl Rng) -> Self {
        let (d, hd) = (cfg.width, cfg.hidden);
        Self {
            actor: Mlp::new(ps, "actor", &[d, hd, hd, 2 * ACTION_DIM], rng),
            critic1: Mlp::new(ps, "critic1", &[d + ACTION_DIM, hd, hd, 1], rng),
            critic2: Mlp::new(ps, "critic2", &[d + ACTION_DIM, hd, hd, 1], rng),
            log_alpha: ps.add("alpha.log_alpha", Array2::from_elem((1, 1), cfg.initial_alpha.ln())),
            cfg,
        }
    }

    pub fn alpha(&self, ps: &ParamStore) -> f64 {
        ps.get(self.log_alpha)[[0, 0]].exp()
    }

    /// Mean and clamped log-std, each `[B, 2]`.
    pub fn policy(&self, g: &mut Graph, ps: &ParamStore, h: Var) -> (Var, Var) {
        let out = self.actor.forward(g, ps, h);
        let mu = g.slice_cols(out, 0, ACTION_DIM);
        let ls = g.slice_cols(out, ACTION_DIM, 2 * ACTION_DIM);
        let ls = g.clamp(ls, LOG_STD_MIN, LOG_STD_MAX);
        (mu, ls)
    }

    /// `a = tanh(mu + sigma * xi)` with the change-of-variables log-density.
    pub fn rsample(&self, g: &mut Graph, ps: &ParamStore, h: Var, xi: &Mat) -> PolicySample {
        let (mu, ls) = self.policy(g, ps, h);
        let noise = g.constant(xi.clone());
        let sigma = g.exp(ls);
        let spread = g.mul(sigma, noise);
        let u = g.add(mu, spread);
        let action = g.tanh(u);
        // log N(xi) - log sigma - log(1 - tanh(u)^2), the last in stable form
        let base = xi.mapv(|x| -0.5 * x * x - HALF_LN_2PI);
        let base = g.constant(base);
        let two_u = g.scale(u, -2.0);
        let sp = g.softplus(two_u);
        let corr = g.add(u, sp);
        let corr = g.add_scalar(corr, -std::f64::consts::LN_2);
        let corr = g.scale(corr, 2.0);
        let lp = g.sub(base, ls);
        let lp = g.add(lp, corr);
        let log_prob = g.sum_cols(lp);
        PolicySample { action, log_prob }
    }

    /// Raw actions for a batch of latent rows; log-probs only in train mode.
    pub fn sample_action(
        &self,
        ps: &ParamStore,
        h: &Mat,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> (Vec<[f64; 2]>, Option<Vec<f64>>) {
        let mut g = Graph::no_grad();
        let hv = g.constant(h.clone());
        match mode {
            Mode::Eval => {
                let (mu, _) = self.policy(&mut g, ps, hv);
                let a = g.tanh(mu);
                (rows2(g.value(a)), None)
            }
            Mode::Train => {
                let xi = normal_noise(h.nrows(), rng);
                let s = self.rsample(&mut g, ps, hv, &xi);
                let lp = g.value(s.log_prob).column(0).to_vec();
                (rows2(g.value(s.action)), Some(lp))
            }
        }
    }

    pub fn to_env(&self, raw: [f64; 2]) -> HybridAction {
        HybridAction::from_raw(raw, self.cfg.v_max)
    }

    pub fn q(&self, g: &mut Graph, ps: &ParamStore, critic: &Mlp, h: Var, a: Var) -> Var {
        let x = g.concat_cols(&[h, a]);
        critic.forward(g, ps, x)
    }

    /// Bellman targets `r + gamma (1 - done) (min Qbar(hbar', a') - alpha log pi(a'|h'))`,
    /// evaluated on a private tape so no gradient can reach any parameter.
    /// `h_next` feeds the online policy, `h_next_target` the target critics.
    #[allow(clippy::too_many_arguments)]
    pub fn td_target(
        &self,
        online: &ParamStore,
        target: &ParamStore,
        h_next: &Mat,
        h_next_target: &Mat,
        rewards: &[f64],
        dones: &[bool],
        xi: &Mat,
    ) -> Result<Mat> {
        let b = rewards.len();
        if b == 0 {
            return Err(Error::Usage("empty batch".into()));
        }
        if dones.len() != b || h_next.nrows() != b || h_next_target.nrows() != b || xi.nrows() != b {
            return Err(Error::Usage("td target inputs disagree in batch size".into()));
        }
        let mut g = Graph::no_grad();
        let hn = g.constant(h_next.clone());
        let s = self.rsample(&mut g, online, hn, xi);
        let ht = g.constant(h_next_target.clone());
        let q1 = self.q(&mut g, target, &self.critic1, ht, s.action);
        let q2 = self.q(&mut g, target, &self.critic2, ht, s.action);
        let qmin = g.minimum(q1, q2);
        let alpha = self.alpha(online);
        let (qm, lp) = (g.value(qmin), g.value(s.log_prob));
        Ok(Array2::from_shape_fn((b, 1), |(i, _)| {
            let soft = qm[[i, 0]] - alpha * lp[[i, 0]];
            rewards[i] + if dones[i] { 0.0 } else { self.cfg.gamma * soft }
        }))
    }

    /// Sum over both critics of the mean squared Bellman error.
    pub fn critic_loss(&self, g: &mut Graph, ps: &ParamStore, h: Var, actions: &Mat, y: &Mat) -> Result<Var> {
        if actions.nrows() == 0 {
            return Err(Error::Usage("empty batch".into()));
        }
        let a = g.constant(actions.clone());
        let y = g.constant(y.clone());
        let mut total = None;
        for critic in [&self.critic1, &self.critic2] {
            let q = self.q(g, ps, critic, h, a);
            let e = g.sub(q, y);
            let e = g.square(e);
            let m = g.mean(e);
            total = Some(match total {
                None => m,
                Some(t) => g.add(t, m),
            });
        }
        Ok(total.unwrap())
    }

    /// `mean(alpha log pi - min Q)` on a detached latent. Returns the loss
    /// and the sampled log-probs for the temperature update.
    pub fn actor_loss(&self, g: &mut Graph, ps: &ParamStore, h: Var, xi: &Mat) -> Result<(Var, Var)> {
        if xi.nrows() == 0 {
            return Err(Error::Usage("empty batch".into()));
        }
        let h = g.detach(h);
        let s = self.rsample(g, ps, h, xi);
        let q1 = self.q(g, ps, &self.critic1, h, s.action);
        let q2 = self.q(g, ps, &self.critic2, h, s.action);
        let qmin = g.minimum(q1, q2);
        let alpha = self.alpha(ps);
        let soft = g.scale(s.log_prob, alpha);
        let diff = g.sub(soft, qmin);
        Ok((g.mean(diff), s.log_prob))
    }

    /// `mean(-log_alpha (log pi + target_entropy))` with the log-probs held
    /// constant.
    pub fn alpha_loss(&self, g: &mut Graph, ps: &ParamStore, log_prob: &Mat) -> Var {
        let la = g.param(ps, self.log_alpha);
        let shifted = g.constant(log_prob.mapv(|l| l + self.cfg.target_entropy));
        let prod = g.mul(shifted, la);
        let m = g.mean(prod);
        g.neg(m)
    }
}

pub fn normal_noise(rows: usize, rng: &mut impl Rng) -> Mat {
    Array2::from_shape_fn((rows, ACTION_DIM), |_| rng.sample(StandardNormal))
}

/// `target <- (1 - lambda) target + lambda online` on `ids`.
pub fn polyak_update(online: &ParamStore, target: &mut ParamStore, ids: &[ParamId], lambda: f64) {
    target.polyak_from(online, ids, lambda);
}

fn rows2(m: &Mat) -> Vec<[f64; 2]> {
    m.rows().into_iter().map(|r| [r[0], r[1]]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_relative_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{Continuous, Normal};

    fn tiny() -> SacConfig {
        SacConfig {
            width: 8,
            hidden: 12,
            ..SacConfig::default()
        }
    }

    fn setup(seed: u64) -> (ParamStore, Sac, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let sac = Sac::new(&mut ps, tiny(), &mut rng);
        (ps, sac, rng)
    }

    fn latents(rows: usize, rng: &mut impl Rng) -> Mat {
        Array2::from_shape_fn((rows, 8), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn defaults_and_initial_alpha() {
        let (ps, sac, _) = setup(0);
        assert_eq!(sac.cfg.gamma, 0.99);
        assert_eq!(sac.cfg.polyak, 0.005);
        assert_eq!(sac.cfg.target_entropy, -2.0);
        assert_eq!(sac.alpha(&ps), 1.0);
    }

    #[test]
    fn env_mapping_examples() {
        let (_, sac, _) = setup(0);
        let a = sac.to_env([0.0, 0.0]);
        assert_eq!((a.target_speed, a.lane_command), (5.0, 0));
        let a = sac.to_env([1.0, 0.5]);
        assert_eq!((a.target_speed, a.lane_command), (10.0, 1));
        let a = sac.to_env([-1.0, -0.34]);
        assert_eq!((a.target_speed, a.lane_command), (0.0, -1));
    }

    #[test]
    fn eval_is_deterministic_and_actions_bounded() {
        let (ps, sac, mut rng) = setup(1);
        let h = latents(16, &mut rng);
        let (a1, lp) = sac.sample_action(&ps, &h, Mode::Eval, &mut rng);
        let (a2, _) = sac.sample_action(&ps, &h, Mode::Eval, &mut rng);
        assert!(lp.is_none());
        assert_eq!(a1, a2);
        let (a3, lp) = sac.sample_action(&ps, &h, Mode::Train, &mut rng);
        assert_eq!(lp.unwrap().len(), 16);
        assert!(a3.iter().flatten().all(|x| x.abs() < 1.0));
    }

    #[test]
    fn log_prob_matches_normal_change_of_variables() {
        let (ps, sac, mut rng) = setup(2);
        let h = latents(5, &mut rng);
        let xi = normal_noise(5, &mut rng);
        let mut g = Graph::no_grad();
        let hv = g.constant(h);
        let (mu, ls) = sac.policy(&mut g, &ps, hv);
        let s = sac.rsample(&mut g, &ps, hv, &xi);
        for i in 0..5 {
            let mut expect = 0.0;
            for d in 0..2 {
                let (m, sd) = (g.value(mu)[[i, d]], g.value(ls)[[i, d]].exp());
                let y: f64 = g.value(s.action)[[i, d]];
                let n = Normal::new(m, sd).unwrap();
                expect += (n.pdf(y.atanh()) / (1.0 - y * y)).ln();
            }
            assert!((g.value(s.log_prob)[[i, 0]] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn squashed_density_slice_integrates_to_marginal() {
        // integrating the joint density over dim 0 must give the dim-1 marginal
        let (ps, sac, mut rng) = setup(3);
        let h = latents(1, &mut rng);
        let mut g = Graph::no_grad();
        let hv = g.constant(h.clone());
        let (mu, ls) = sac.policy(&mut g, &ps, hv);
        let (m0, s0) = (g.value(mu)[[0, 0]], g.value(ls)[[0, 0]].exp());
        let (m1, s1) = (g.value(mu)[[0, 1]], g.value(ls)[[0, 1]].exp());
        let xi1 = 0.4;
        let y1 = (m1 + s1 * xi1).tanh();
        let n = 2001;
        let (lo, hi) = (-12.0, 12.0);
        let step = (hi - lo) / (n - 1) as f64;
        let xi = Array2::from_shape_fn((n, 2), |(i, d)| if d == 0 { lo + step * i as f64 } else { xi1 });
        let hb = Array2::from_shape_fn((n, 8), |(_, c)| h[[0, c]]);
        let mut g = Graph::no_grad();
        let hv = g.constant(hb);
        let s = sac.rsample(&mut g, &ps, hv, &xi);
        // integrate p(y0, y1) dy0 with y0 = tanh(m0 + s0 xi0), Simpson's rule in xi0
        let mut integral = 0.0;
        for i in 0..n {
            let u0 = m0 + s0 * xi[[i, 0]];
            let dy = s0 * (1.0 - u0.tanh().powi(2));
            let w = if i == 0 || i == n - 1 { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            integral += w * g.value(s.log_prob)[[i, 0]].exp() * dy;
        }
        integral *= step / 3.0;
        let marginal = Normal::new(m1, s1).unwrap().pdf(y1.atanh()) / (1.0 - y1 * y1);
        assert!((integral - marginal).abs() < 1e-4 * marginal.max(1.0), "{integral} vs {marginal}");
    }

    #[test]
    fn critics_are_independent() {
        let (ps, sac, mut rng) = setup(4);
        let mut g = Graph::no_grad();
        let h = g.constant(latents(1, &mut rng));
        let a = g.constant(Array2::from_elem((1, 2), 0.3));
        let q1 = sac.q(&mut g, &ps, &sac.critic1, h, a);
        let q2 = sac.q(&mut g, &ps, &sac.critic2, h, a);
        assert!((g.scalar(q1) - g.scalar(q2)).abs() > 1e-9);
    }

    #[test]
    fn terminal_target_is_reward() {
        let (ps, sac, mut rng) = setup(5);
        let target = ps.clone();
        let h = latents(2, &mut rng);
        let xi = normal_noise(2, &mut rng);
        let y = sac.td_target(&ps, &target, &h, &h, &[-1.0, 0.0], &[true, false], &xi).unwrap();
        assert_eq!(y[[0, 0]], -1.0);
        assert!(y[[1, 0]] != 0.0);
        assert!(sac.td_target(&ps, &target, &h, &h, &[], &[], &xi).is_err());
    }

    #[test]
    fn td_target_matches_hand_computation() {
        let (mut ps, sac, mut rng) = setup(6);
        ps.get_mut(sac.log_alpha)[[0, 0]] = 0.5f64.ln();
        let mut target = ps.clone();
        // pin both target critics to constant outputs via the last bias
        for (c, v) in [(&sac.critic1, 2.0), (&sac.critic2, 3.0)] {
            let last = c.layers.last().unwrap();
            target.get_mut(last.w).fill(0.0);
            target.get_mut(last.b).fill(v);
        }
        let h = latents(1, &mut rng);
        let xi = normal_noise(1, &mut rng);
        let mut g = Graph::no_grad();
        let hv = g.constant(h.clone());
        let s = sac.rsample(&mut g, &ps, hv, &xi);
        let lp = g.value(s.log_prob)[[0, 0]];
        let y = sac.td_target(&ps, &target, &h, &h, &[1.0], &[false], &xi).unwrap();
        let expect = 1.0 + 0.99 * (2.0 - 0.5 * lp);
        assert!((y[[0, 0]] - expect).abs() < 1e-12);

        let mut g = Graph::new();
        let hv = g.constant(h);
        let a = Array2::from_elem((1, 2), 0.1);
        let loss = sac.critic_loss(&mut g, &target, hv, &a, &y).unwrap();
        let hand = (2.0 - expect).powi(2) + (3.0 - expect).powi(2);
        assert!((g.scalar(loss) - hand).abs() < 1e-9);
    }

    #[test]
    fn actor_loss_does_not_reach_latent_and_reaches_policy() {
        let (ps, sac, mut rng) = setup(7);
        let mut g = Graph::new();
        let h = g.input(latents(4, &mut rng));
        let xi = normal_noise(4, &mut rng);
        let (loss, _) = sac.actor_loss(&mut g, &ps, h, &xi).unwrap();
        let grads = g.backward(loss);
        assert!(grads.wrt(h).is_none_or(|m| m.iter().all(|&x| x == 0.0)));
        let actor = ps.group("actor");
        assert!(ParamStore::grad_norm_sq(&grads, &actor) > 1e-20);
    }

    #[test]
    fn critic_and_actor_gradients_match_finite_differences() {
        let (ps, sac, mut rng) = setup(8);
        let h = latents(3, &mut rng);
        let a = Array2::from_shape_fn((3, 2), |_| rng.random_range(-0.9..0.9));
        let y = Array2::from_shape_fn((3, 1), |_| rng.random_range(-1.0..1.0));
        let xi = normal_noise(3, &mut rng);

        let critic = |p: &ParamStore| {
            let mut g = Graph::new();
            let hv = g.constant(h.clone());
            let l = sac.critic_loss(&mut g, p, hv, &a, &y).unwrap();
            (g, l)
        };
        let (g, l) = critic(&ps);
        let ids: Vec<_> = ps.group("critic1").into_iter().chain(ps.group("critic2")).collect();
        let err = max_relative_error(&ps, &ids, &g.backward(l), |p| {
            let (g, l) = critic(p);
            g.scalar(l)
        });
        assert!(err < 1e-4, "critic rel err {err}");

        let actor = |p: &ParamStore| {
            let mut g = Graph::new();
            let hv = g.constant(h.clone());
            let (l, _) = sac.actor_loss(&mut g, p, hv, &xi).unwrap();
            (g, l)
        };
        let (g, l) = actor(&ps);
        let ids = ps.group("actor");
        let err = max_relative_error(&ps, &ids, &g.backward(l), |p| {
            let (g, l) = actor(p);
            g.scalar(l)
        });
        assert!(err < 1e-4, "actor rel err {err}");
    }

    #[test]
    fn temperature_moves_toward_target_entropy() {
        let (mut ps, sac, _) = setup(9);
        let mut step = |lp: f64| {
            let mut g = Graph::new();
            let l = sac.alpha_loss(&mut g, &ps, &Array2::from_elem((4, 1), lp));
            let grads = g.backward(l);
            let before = sac.alpha(&ps);
            let gl = grads.param(sac.log_alpha).unwrap()[[0, 0]];
            ps.get_mut(sac.log_alpha)[[0, 0]] -= 0.1 * gl;
            (before, sac.alpha(&ps))
        };
        // entropy -log pi = 5 above the target of -2
        let (b, a) = step(-5.0);
        assert!(a < b && a > 0.0);
        // entropy -3, below the target
        let (b, a) = step(3.0);
        assert!(a > b);
    }

    #[test]
    fn polyak_cases() {
        let online = {
            let mut p = ParamStore::new();
            p.add("p", Array2::from_elem((1, 1), 1.0));
            p
        };
        let id = online.find("p").unwrap();
        let mut target = online.clone();
        target.get_mut(id).fill(0.0);
        let mut t = target.clone();
        polyak_update(&online, &mut t, &[id], 0.005);
        assert!((t.get(id)[[0, 0]] - 0.005).abs() < 1e-15);
        let mut t = target.clone();
        polyak_update(&online, &mut t, &[id], 0.0);
        assert_eq!(t.get(id)[[0, 0]], 0.0);
        let mut t = target.clone();
        polyak_update(&online, &mut t, &[id], 1.0);
        assert_eq!(t.get(id)[[0, 0]], 1.0);
    }
}
