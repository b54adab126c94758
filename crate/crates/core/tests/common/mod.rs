#![allow(dead_code)]

use rand::Rng;
use scene_rep::autograd::{Gradients, ParamId, ParamStore};
use scene_rep::mst::EncoderConfig;
use scene_rep::scene::{SceneConfig, SceneState};
use scene_rep::train::{Ablation, TrainConfig};

/// A scene with `neighbors` live neighbors, random partial histories and
/// random route counts. Slot `i` carries id `i`.
pub fn random_state(cfg: &SceneConfig, rng: &mut impl Rng, neighbors: usize) -> SceneState {
    let mut s = SceneState::empty(cfg);
    for i in 0..=neighbors.min(cfg.neighbors) {
        s.agent_mask[i] = true;
        s.ids[i] = i as u64;
        let visible = if i == 0 { cfg.history } else { rng.random_range(1..=cfg.history) };
        for t in cfg.history - visible..cfg.history {
            s.motion_mask[[i, t]] = true;
            for k in 0..4 {
                s.motion[[i, t, k]] = rng.random_range(-30.0..30.0);
            }
            s.motion[[i, t, 4]] = rng.random_range(-3.0..3.0);
        }
        let routes = rng.random_range(if i == 0 { 1 } else { 0 }..=cfg.routes);
        for j in 0..routes {
            for w in 0..cfg.route_len {
                s.route_mask[[i, j, w]] = true;
                s.routes[[i, j, w, 0]] = rng.random_range(-30.0..30.0);
                s.routes[[i, j, w, 1]] = rng.random_range(-30.0..30.0);
                s.routes[[i, j, w, 2]] = rng.random_range(-3.0..3.0);
            }
        }
    }
    s
}

/// Exchanges every tensor slice, mask and id of agent slots `i` and `j`.
pub fn swap_agents(s: &SceneState, i: usize, j: usize) -> SceneState {
    let mut out = s.clone();
    for (a, b) in [(i, j), (j, i)] {
        out.motion.index_axis_mut(ndarray::Axis(0), a).assign(&s.motion.index_axis(ndarray::Axis(0), b));
        out.routes.index_axis_mut(ndarray::Axis(0), a).assign(&s.routes.index_axis(ndarray::Axis(0), b));
        out.motion_mask.index_axis_mut(ndarray::Axis(0), a).assign(&s.motion_mask.index_axis(ndarray::Axis(0), b));
        out.route_mask.index_axis_mut(ndarray::Axis(0), a).assign(&s.route_mask.index_axis(ndarray::Axis(0), b));
        out.agent_mask[a] = s.agent_mask[b];
        out.ids[a] = s.ids[b];
    }
    out
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        width: 8,
        heads: 2,
        mlp_hidden: 12,
        embedding: 3,
    }
}

/// Width-8 networks with a short warm-up, for fast end-to-end runs.
pub fn tiny_config(ablation: Ablation) -> TrainConfig {
    TrainConfig {
        ablation,
        encoder: tiny_encoder(),
        head_hidden: 8,
        projector_hidden: 8,
        projector_dim: 4,
        warmup_steps: 40,
        batch_size: 8,
        buffer_capacity: 500,
        total_steps: 120,
        log_interval: 20,
        ..TrainConfig::default()
    }
}

/// Relative error `|g - n| / max(|g|, |n|)` over the concatenation of all
/// `ids`, between analytic gradients and a five-point central-difference
/// estimate with step `1e-5`.
pub fn fd_relative_error(
    ps: &ParamStore,
    ids: &[ParamId],
    analytic: &Gradients,
    loss: impl Fn(&ParamStore) -> f64,
) -> f64 {
    let h = 1e-5;
    let mut probe = ps.clone();
    let (mut diff2, mut num2, mut ana2) = (0.0, 0.0, 0.0);
    for &id in ids {
        let shape = ps.get(id).dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let x0 = ps.get(id)[[r, c]];
                let mut at = |dx: f64| {
                    probe.get_mut(id)[[r, c]] = x0 + dx;
                    let v = loss(&probe);
                    probe.get_mut(id)[[r, c]] = x0;
                    v
                };
                let n = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
                let a = analytic.param(id).map(|g| g[[r, c]]).unwrap_or(0.0);
                diff2 += (a - n) * (a - n);
                num2 += n * n;
                ana2 += a * a;
            }
        }
    }
    let scale = num2.sqrt().max(ana2.sqrt());
    if scale > 0.0 {
        diff2.sqrt() / scale
    } else {
        0.0
    }
}
