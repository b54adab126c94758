//! Scene encoders behind one interface: the multi-stage Transformer and an
//! LSTM baseline over flattened agent and route sequences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::mst::{EncoderConfig, MstEncoder, MstVariant, SceneBatch};
use crate::nn::{Linear, Lstm};
use crate::scene::{SceneConfig, SceneState, MOTION_FEATURES, ROUTE_FEATURES};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LstmEncoder {
    pub motion: Lstm,
    pub routes: Lstm,
    pub proj: Linear,
    pub width: usize,
}

impl LstmEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, scene: &SceneConfig, width: usize, rng: &mut impl Rng) -> Self {
        let a = scene.agents();
        Self {
            motion: Lstm::new(ps, &format!("{name}.motion_lstm"), a * MOTION_FEATURES, width, rng),
            routes: Lstm::new(ps, &format!("{name}.route_lstm"), a * scene.routes * ROUTE_FEATURES, width, rng),
            proj: Linear::new(ps, &format!("{name}.proj"), 2 * width, width, rng),
            width,
        }
    }

    pub fn encode(&self, g: &mut Graph, ps: &ParamStore, states: &[&SceneState]) -> Var {
        let batch = SceneBatch::new(states);
        let sc = batch.scene;
        let (b, a, t_h, n_k, t_k) = (batch.batch, sc.agents(), sc.history, sc.routes, sc.route_len);
        // rows of `batch.motion` are ordered (b, agent, t); regroup per time step
        let motion_steps: Vec<Var> = (0..t_h)
            .map(|t| {
                let m = ndarray::Array2::from_shape_fn((b, a * MOTION_FEATURES), |(bi, c)| {
                    let (i, k) = (c / MOTION_FEATURES, c % MOTION_FEATURES);
                    batch.motion[[(bi * a + i) * t_h + t, k]]
                });
                g.constant(m)
            })
            .collect();
        let route_steps: Vec<Var> = (0..t_k)
            .map(|w| {
                let m = ndarray::Array2::from_shape_fn((b, a * n_k * ROUTE_FEATURES), |(bi, c)| {
                    let (r, k) = (c / ROUTE_FEATURES, c % ROUTE_FEATURES);
                    batch.routes[[(bi * a * n_k + r) * t_k + w, k]]
                });
                g.constant(m)
            })
            .collect();
        let hm = self.motion.forward(g, ps, &motion_steps, &vec![vec![true; b]; t_h]);
        let hr = self.routes.forward(g, ps, &route_steps, &vec![vec![true; b]; t_k]);
        let x = g.concat_cols(&[hm, hr]);
        self.proj.forward(g, ps, x)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Encoder {
    Mst(MstEncoder),
    Lstm(LstmEncoder),
}

impl Encoder {
    pub fn mst(ps: &mut ParamStore, cfg: EncoderConfig, variant: MstVariant, rng: &mut impl Rng) -> Self {
        Encoder::Mst(MstEncoder::new(ps, "encoder", cfg, variant, rng))
    }

    pub fn lstm(ps: &mut ParamStore, scene: &SceneConfig, width: usize, rng: &mut impl Rng) -> Self {
        Encoder::Lstm(LstmEncoder::new(ps, "encoder", scene, width, rng))
    }

    pub fn width(&self) -> usize {
        match self {
            Encoder::Mst(e) => e.width(),
            Encoder::Lstm(e) => e.width,
        }
    }

    /// `[B, D]` latents for a batch of scenes.
    pub fn encode(&self, g: &mut Graph, ps: &ParamStore, states: &[&SceneState]) -> Var {
        match self {
            Encoder::Mst(e) => e.encode(g, ps, states),
            Encoder::Lstm(e) => e.encode(g, ps, states),
        }
    }
}
