//! Multi-stage Transformer scene encoder: dynamic, cross-modality,
//! aggregation and output levels.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionMask, Graph, Mat, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Mlp, MultiHeadAttention};
use crate::scene::{SceneConfig, SceneState, MOTION_FEATURES, ROUTE_FEATURES};

/// Positions and velocities are fed to the network in tens of meters.
pub const INPUT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Model width `D`.
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Width of the ego/neighbor category embedding on route latents.
    pub embedding: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            width: 128,
            heads: 4,
            mlp_hidden: 256,
            embedding: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.mlp_hidden == 0 || self.embedding == 0 {
            return Err(Error::Config("mlp_hidden and embedding must be positive".into()));
        }
        Ok(())
    }
}

/// Which levels of the encoder are active.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub enum MstVariant {
    Full,
    /// `h_t = Ag`: the output level over ego routes is removed.
    NoEgoRoutes,
    /// No route branch at all: `C = D_M` and `h_t = Ag`.
    NoRoutes,
}

/// An attention block used above the dynamic level: MHA followed by a
/// position-wise MLP with a residual around it. Queries that see no key
/// produce an exact zero row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub attn: MultiHeadAttention,
    pub ffn: Mlp,
}

impl AttentionBlock {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.width;
        Self {
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), d, d, d, cfg.heads, rng),
            ffn: Mlp::new(ps, &format!("{name}.ffn"), &[d, cfg.mlp_hidden, d], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, q: Var, kv: Var, mask: AttentionMask) -> (Var, Var) {
        let has_key: Vec<bool> = (0..mask.groups)
            .flat_map(|gi| (0..mask.q_len).map(move |i| (gi, i)))
            .map(|(gi, i)| mask.row_has_key(gi, i))
            .collect();
        let a = self.attn.forward(g, ps, q, kv, mask);
        let f = self.ffn.forward(g, ps, a.out);
        let y = g.add(a.out, f);
        (g.mask_rows(y, &has_key), a.weights)
    }
}

/// Encoder inputs flattened for one batch of scenes.
#[derive(Clone, Debug)]
pub struct SceneBatch {
    pub batch: usize,
    pub scene: SceneConfig,
    /// `[B * A * T_h, 5]`
    pub motion: Mat,
    /// `[B * A * N_k * T_K, 3]`
    pub routes: Mat,
    pub motion_valid: Vec<bool>,
    pub waypoint_valid: Vec<bool>,
    /// `[B * A]`: agent present with at least one valid motion step.
    pub agent_valid: Vec<bool>,
    /// `[B * A * N_k]`
    pub route_valid: Vec<bool>,
}

impl SceneBatch {
    pub fn new(states: &[&SceneState]) -> Self {
        assert!(!states.is_empty(), "empty scene batch");
        let scene = states[0].config();
        let (a, t_h, n_k, t_k) = (scene.agents(), scene.history, scene.routes, scene.route_len);
        let b = states.len();
        let mut motion = Array2::zeros((b * a * t_h, MOTION_FEATURES));
        let mut routes = Array2::zeros((b * a * n_k * t_k, ROUTE_FEATURES));
        let mut motion_valid = Vec::with_capacity(b * a * t_h);
        let mut waypoint_valid = Vec::with_capacity(b * a * n_k * t_k);
        let mut agent_valid = Vec::with_capacity(b * a);
        let mut route_valid = Vec::with_capacity(b * a * n_k);
        let scale = [INPUT_SCALE, INPUT_SCALE, INPUT_SCALE, INPUT_SCALE, 1.0];
        for (bi, s) in states.iter().enumerate() {
            assert_eq!(s.config(), scene, "mixed scene shapes in one batch");
            for i in 0..a {
                let mut any = false;
                for t in 0..t_h {
                    let r = (bi * a + i) * t_h + t;
                    let v = s.agent_mask[i] && s.motion_mask[[i, t]];
                    motion_valid.push(v);
                    any |= v;
                    if v {
                        for k in 0..MOTION_FEATURES {
                            motion[[r, k]] = s.motion[[i, t, k]] * scale[k];
                        }
                    }
                }
                agent_valid.push(any);
                for j in 0..n_k {
                    let mut route_any = false;
                    for w in 0..t_k {
                        let r = ((bi * a + i) * n_k + j) * t_k + w;
                        let v = s.agent_mask[i] && s.route_mask[[i, j, w]];
                        waypoint_valid.push(v);
                        route_any |= v;
                        if v {
                            routes[[r, 0]] = s.routes[[i, j, w, 0]] * INPUT_SCALE;
                            routes[[r, 1]] = s.routes[[i, j, w, 1]] * INPUT_SCALE;
                            routes[[r, 2]] = s.routes[[i, j, w, 2]];
                        }
                    }
                    route_valid.push(route_any);
                }
            }
        }
        Self {
            batch: b,
            scene,
            motion,
            routes,
            motion_valid,
            waypoint_valid,
            agent_valid,
            route_valid,
        }
    }
}

/// Attention weights of one level, `[groups, heads, q_len, k_len]`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LevelTrace {
    pub level: String,
    pub heads: usize,
    pub groups: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub group_labels: Vec<String>,
    pub query_labels: Vec<String>,
    pub key_labels: Vec<String>,
    pub weights: Vec<f64>,
    pub mask: Vec<bool>,
}

impl LevelTrace {
    pub fn weight(&self, g: usize, h: usize, i: usize, j: usize) -> f64 {
        self.weights[((g * self.heads + h) * self.q_len + i) * self.k_len + j]
    }

    /// True when query `i` of group `g` has at least one visible key.
    pub fn row_active(&self, g: usize, i: usize) -> bool {
        let start = (g * self.q_len + i) * self.k_len;
        self.mask[start..start + self.k_len].iter().any(|&m| m)
    }

    /// Head-averaged weights of group `g` as `[q_len][k_len]`.
    pub fn head_mean(&self, g: usize) -> Vec<Vec<f64>> {
        (0..self.q_len)
            .map(|i| {
                (0..self.k_len)
                    .map(|j| (0..self.heads).map(|h| self.weight(g, h, i, j)).sum::<f64>() / self.heads as f64)
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct AttentionTrace {
    pub levels: Vec<LevelTrace>,
}

impl AttentionTrace {
    pub fn level(&self, name: &str) -> Option<&LevelTrace> {
        self.levels.iter().find(|l| l.level == name)
    }
}

/// Graph nodes produced by one encoder pass.
#[derive(Clone, Debug)]
pub struct MstOutput {
    /// `[B, D]`
    pub h: Var,
    /// `[B * A, D]` dynamic motion latents.
    pub d_m: Var,
    /// `[B * A * N_k, D]` route latents (absent without the route branch).
    pub d_k: Option<Var>,
    /// `[B * n, D]` cross-modality outputs of the neighbors.
    pub c: Var,
    /// `[B, D]` aggregation output.
    pub ag: Var,
    weights: Vec<(&'static str, Var)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MstEncoder {
    pub cfg: EncoderConfig,
    pub variant: MstVariant,
    pub motion_attn: MultiHeadAttention,
    pub motion_mlp: Mlp,
    pub route_attn: Option<MultiHeadAttention>,
    pub route_mlp: Option<Mlp>,
    pub category: Option<crate::autograd::ParamId>,
    pub cross: Option<AttentionBlock>,
    pub aggregate: AttentionBlock,
    pub output: Option<AttentionBlock>,
}

impl MstEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: EncoderConfig, variant: MstVariant, rng: &mut impl Rng) -> Self {
        let d = cfg.width;
        let routes = variant != MstVariant::NoRoutes;
        let motion_attn = MultiHeadAttention::new(ps, &format!("{name}.motion_attn"), MOTION_FEATURES, MOTION_FEATURES, d, cfg.heads, rng);
        let motion_mlp = Mlp::new(ps, &format!("{name}.motion_mlp"), &[d, cfg.mlp_hidden, d], rng);
        let (route_attn, route_mlp, category, cross) = if routes {
            (
                Some(MultiHeadAttention::new(ps, &format!("{name}.route_attn"), ROUTE_FEATURES, ROUTE_FEATURES, d, cfg.heads, rng)),
                Some(Mlp::new(ps, &format!("{name}.route_mlp"), &[d + cfg.embedding, cfg.mlp_hidden, d], rng)),
                Some(ps.add_uniform(format!("{name}.category"), (2, cfg.embedding), 1, rng)),
                Some(AttentionBlock::new(ps, &format!("{name}.cross"), &cfg, rng)),
            )
        } else {
            (None, None, None, None)
        };
        let aggregate = AttentionBlock::new(ps, &format!("{name}.aggregate"), &cfg, rng);
        let output = (variant == MstVariant::Full).then(|| AttentionBlock::new(ps, &format!("{name}.output"), &cfg, rng));
        Self {
            cfg,
            variant,
            motion_attn,
            motion_mlp,
            route_attn,
            route_mlp,
            category,
            cross,
            aggregate,
            output,
        }
    }

    pub fn width(&self) -> usize {
        self.cfg.width
    }

    /// Encodes a batch of scenes to `[B, D]`.
    pub fn encode(&self, g: &mut Graph, ps: &ParamStore, states: &[&SceneState]) -> Var {
        let batch = SceneBatch::new(states);
        let m = g.constant(batch.motion.clone());
        let r = g.constant(batch.routes.clone());
        self.forward(g, ps, &batch, m, r).h
    }

    /// Full forward pass on pre-built inputs. `motion` and `routes` are the
    /// scaled input matrices of `batch` (tracked inputs for gradient probes).
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, batch: &SceneBatch, motion: Var, routes: Var) -> MstOutput {
        let b = batch.batch;
        let sc = batch.scene;
        let (a, n, t_h, n_k, t_k) = (sc.agents(), sc.neighbors, sc.history, sc.routes, sc.route_len);
        let mut weights = Vec::new();

        // dynamic level, motion branch
        let mask = AttentionMask::self_attention(b * a, t_h, &batch.motion_valid);
        let att = self.motion_attn.forward(g, ps, motion, motion, mask);
        weights.push(("motion", att.weights));
        let pooled = g.masked_max_pool(att.out, t_h, &batch.motion_valid);
        let d_m = self.motion_mlp.forward(g, ps, pooled);
        let d_m = g.mask_rows(d_m, &batch.agent_valid);

        // dynamic level, route branch
        let d_k = match (&self.route_attn, &self.route_mlp, self.category) {
            (Some(attn), Some(mlp), Some(cat)) => {
                let mask = AttentionMask::self_attention(b * a * n_k, t_k, &batch.waypoint_valid);
                let att = attn.forward(g, ps, routes, routes, mask);
                weights.push(("route", att.weights));
                let pooled = g.masked_max_pool(att.out, t_k, &batch.waypoint_valid);
                let table = g.param(ps, cat);
                let cats: Vec<usize> = (0..b * a * n_k).map(|row| usize::from((row / n_k) % a != 0)).collect();
                let emb = g.gather_rows(table, &cats);
                let x = g.concat_cols(&[pooled, emb]);
                let d_k = mlp.forward(g, ps, x);
                Some(g.mask_rows(d_k, &batch.route_valid))
            }
            _ => None,
        };

        // cross-modality level: each neighbor attends only its own routes
        let neighbor_rows: Vec<usize> = (0..b).flat_map(|bi| (1..a).map(move |i| bi * a + i)).collect();
        let q = g.gather_rows(d_m, &neighbor_rows);
        let c = match (&self.cross, d_k) {
            (Some(block), Some(d_k)) => {
                let key_rows: Vec<usize> = neighbor_rows.iter().flat_map(|&r| (0..n_k).map(move |j| r * n_k + j)).collect();
                let key_valid: Vec<bool> = key_rows.iter().map(|&r| batch.route_valid[r]).collect();
                let kv = g.gather_rows(d_k, &key_rows);
                let (out, w) = block.forward(g, ps, q, kv, AttentionMask::keys(b * n, 1, &key_valid));
                weights.push(("cross", w));
                g.add(out, q)
            }
            _ => q,
        };

        // aggregation level: ego dynamic attends itself and the neighbors
        let ego_rows: Vec<usize> = (0..b).map(|bi| bi * a).collect();
        let ego = g.gather_rows(d_m, &ego_rows);
        let pool = g.concat_rows(&[ego, c]);
        let order: Vec<usize> = (0..b)
            .flat_map(|bi| std::iter::once(bi).chain((0..n).map(move |i| b + bi * n + i)))
            .collect();
        let kv = g.gather_rows(pool, &order);
        let key_valid: Vec<bool> = (0..b)
            .flat_map(|bi| (0..a).map(move |i| (bi, i)))
            .map(|(bi, i)| i == 0 || batch.agent_valid[bi * a + i])
            .collect();
        let (ag, w) = self.aggregate.forward(g, ps, ego, kv, AttentionMask::keys(b, 1, &key_valid));
        weights.push(("aggregate", w));

        // output level over the ego's own routes
        let h = match (&self.output, d_k) {
            (Some(block), Some(d_k)) => {
                let rows: Vec<usize> = (0..b).flat_map(|bi| (0..n_k).map(move |j| bi * a * n_k + j)).collect();
                let key_valid: Vec<bool> = rows.iter().map(|&r| batch.route_valid[r]).collect();
                let kv = g.gather_rows(d_k, &rows);
                let (out, w) = block.forward(g, ps, ag, kv, AttentionMask::keys(b, 1, &key_valid));
                weights.push(("output", w));
                g.add(out, ag)
            }
            _ => ag,
        };
        MstOutput {
            h,
            d_m,
            d_k,
            c,
            ag,
            weights,
        }
    }

    /// Attention weights of every level for the batch, with labels.
    pub fn trace(&self, g: &Graph, batch: &SceneBatch, out: &MstOutput) -> AttentionTrace {
        let sc = batch.scene;
        let (a, t_h, n_k, t_k) = (sc.agents(), sc.history, sc.routes, sc.route_len);
        let b = batch.batch;
        let agent = |i: usize| if i == 0 { "ego".to_string() } else { format!("neighbor{i}") };
        let steps = |len: usize, prefix: &str| (0..len).map(|t| format!("{prefix}{t}")).collect::<Vec<_>>();
        let mut levels = Vec::new();
        for &(name, var) in &out.weights {
            let (w, heads, mask) = g.attention_weights(var).expect("attention node");
            let (groups, queries, keys) = match name {
                "motion" => (
                    (0..b).flat_map(|bi| (0..a).map(move |i| (bi, i))).map(|(bi, i)| format!("b{bi}/{}", agent(i))).collect(),
                    steps(t_h, "t"),
                    steps(t_h, "t"),
                ),
                "route" => (
                    (0..b * a * n_k).map(|r| format!("b{}/{}/route{}", r / (a * n_k), agent((r / n_k) % a), r % n_k)).collect(),
                    steps(t_k, "w"),
                    steps(t_k, "w"),
                ),
                "cross" => (
                    (0..b).flat_map(|bi| (1..a).map(move |i| (bi, i))).map(|(bi, i)| format!("b{bi}/{}", agent(i))).collect(),
                    vec!["dynamic".to_string()],
                    steps(n_k, "route"),
                ),
                "aggregate" => ((0..b).map(|bi| format!("b{bi}")).collect(), vec!["ego".to_string()], (0..a).map(agent).collect()),
                _ => ((0..b).map(|bi| format!("b{bi}")).collect(), vec!["aggregate".to_string()], steps(n_k, "route")),
            };
            levels.push(LevelTrace {
                level: name.to_string(),
                heads,
                groups: mask.groups,
                q_len: mask.q_len,
                k_len: mask.k_len,
                group_labels: groups,
                query_labels: queries,
                key_labels: keys,
                weights: w.to_vec(),
                mask: mask.allowed.clone(),
            });
        }
        AttentionTrace { levels }
    }
}
