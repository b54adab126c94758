//! Scene state tensors: agent motion histories and candidate routes in the
//! ego frame, with validity masks and rotation augmentation.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::FRAC_PI_2;

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::geometry::wrap_angle;
use crate::sim::{SimObservation, VehicleState};

pub const MOTION_FEATURES: usize = 5;
pub const ROUTE_FEATURES: usize = 3;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SceneConfig {
    /// Maximum neighbors `n`.
    pub neighbors: usize,
    /// History steps `T_h`.
    pub history: usize,
    /// Candidate routes per agent `N_k`.
    pub routes: usize,
    /// Waypoints per route `T_K`.
    pub route_len: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            neighbors: 5,
            history: 10,
            routes: 2,
            route_len: 10,
        }
    }
}

impl SceneConfig {
    pub fn agents(&self) -> usize {
        self.neighbors + 1
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SceneState {
    /// `[n+1, T_h, 5]` of `(x, y, v_x, v_y, psi)`.
    pub motion: Array3<f64>,
    /// `[n+1, N_k, T_K, 3]` of `(w_x, w_y, w_psi)`.
    pub routes: Array4<f64>,
    pub motion_mask: Array2<bool>,
    pub route_mask: Array3<bool>,
    pub agent_mask: Array1<bool>,
    /// Persistent vehicle id per slot (`u64::MAX` for empty slots).
    pub ids: Vec<u64>,
}

impl SceneState {
    pub fn empty(cfg: &SceneConfig) -> Self {
        let a = cfg.agents();
        Self {
            motion: Array3::zeros((a, cfg.history, MOTION_FEATURES)),
            routes: Array4::zeros((a, cfg.routes, cfg.route_len, ROUTE_FEATURES)),
            motion_mask: Array2::from_elem((a, cfg.history), false),
            route_mask: Array3::from_elem((a, cfg.routes, cfg.route_len), false),
            agent_mask: Array1::from_elem(a, false),
            ids: vec![u64::MAX; a],
        }
    }

    pub fn config(&self) -> SceneConfig {
        let (a, t_h, _) = self.motion.dim();
        let (_, n_k, t_k, _) = self.routes.dim();
        SceneConfig {
            neighbors: a - 1,
            history: t_h,
            routes: n_k,
            route_len: t_k,
        }
    }

    /// A route is valid when any of its waypoints is.
    pub fn route_valid(&self, agent: usize, route: usize) -> bool {
        self.route_mask.slice(ndarray::s![agent, route, ..]).iter().any(|&m| m)
    }

    /// Rotates every valid position, velocity, waypoint and heading by
    /// `theta` about the ego origin. Masked entries stay zero.
    pub fn rotated(&self, theta: f64) -> SceneState {
        let mut out = self.clone();
        let (c, s) = (theta.cos(), theta.sin());
        let (a, t_h, _) = self.motion.dim();
        for i in 0..a {
            for t in 0..t_h {
                if !self.motion_mask[[i, t]] {
                    continue;
                }
                let m = self.motion.slice(ndarray::s![i, t, ..]);
                let (x, y, vx, vy, h) = (m[0], m[1], m[2], m[3], m[4]);
                let row = [c * x - s * y, s * x + c * y, c * vx - s * vy, s * vx + c * vy, wrap_angle(h + theta)];
                for (k, v) in row.into_iter().enumerate() {
                    out.motion[[i, t, k]] = v;
                }
            }
        }
        let (_, n_k, t_k, _) = self.routes.dim();
        for i in 0..a {
            for j in 0..n_k {
                for w in 0..t_k {
                    if !self.route_mask[[i, j, w]] {
                        continue;
                    }
                    let (x, y, h) = (self.routes[[i, j, w, 0]], self.routes[[i, j, w, 1]], self.routes[[i, j, w, 2]]);
                    out.routes[[i, j, w, 0]] = c * x - s * y;
                    out.routes[[i, j, w, 1]] = s * x + c * y;
                    out.routes[[i, j, w, 2]] = wrap_angle(h + theta);
                }
            }
        }
        out
    }
}

/// Augmentation angle `theta ~ U[-pi/2, pi/2]`.
pub fn sample_rotation(rng: &mut impl Rng) -> f64 {
    rng.random_range(-FRAC_PI_2..=FRAC_PI_2)
}

/// Random rotation augmentation.
pub fn augment(state: &SceneState, rng: &mut impl Rng) -> SceneState {
    state.rotated(sample_rotation(rng))
}

/// Recent states of every observed vehicle keyed by persistent id.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct HistoryBuffer {
    history: usize,
    step: u64,
    tracks: BTreeMap<u64, VecDeque<(u64, VehicleState)>>,
}

impl HistoryBuffer {
    pub fn new(history: usize) -> Self {
        Self {
            history,
            step: 0,
            tracks: BTreeMap::new(),
        }
    }

    pub fn clear(&mut self) {
        self.step = 0;
        self.tracks.clear();
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.tracks.contains_key(&id)
    }

    /// Records one observation; agents unseen for `T_h` steps are evicted.
    pub fn update(&mut self, obs: &SimObservation) {
        self.step += 1;
        let step = self.step;
        let keep_from = step.saturating_sub(self.history as u64 - 1);
        for agent in std::iter::once(&obs.ego).chain(obs.neighbors.iter()) {
            self.tracks.entry(agent.state.id).or_default().push_back((step, agent.state));
        }
        self.tracks.retain(|_, track| {
            while track.front().is_some_and(|(t, _)| *t < keep_from) {
                track.pop_front();
            }
            !track.is_empty()
        });
    }

    /// History of `id` aligned to the last `T_h` steps, oldest first.
    pub fn track(&self, id: u64) -> Vec<Option<VehicleState>> {
        let mut out = vec![None; self.history];
        if let Some(track) = self.tracks.get(&id) {
            for (t, st) in track {
                let age = self.step - t;
                if (age as usize) < self.history {
                    out[self.history - 1 - age as usize] = Some(*st);
                }
            }
        }
        out
    }
}

struct EgoFrame {
    origin: [f64; 2],
    heading: f64,
    cos: f64,
    sin: f64,
}

impl EgoFrame {
    fn new(ego: &VehicleState) -> Self {
        Self {
            origin: ego.position,
            heading: ego.heading,
            cos: ego.heading.cos(),
            sin: ego.heading.sin(),
        }
    }

    fn point(&self, p: [f64; 2]) -> [f64; 2] {
        let (dx, dy) = (p[0] - self.origin[0], p[1] - self.origin[1]);
        [self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy]
    }

    fn vector(&self, v: [f64; 2]) -> [f64; 2] {
        [self.cos * v[0] + self.sin * v[1], -self.sin * v[0] + self.cos * v[1]]
    }

    fn angle(&self, h: f64) -> f64 {
        wrap_angle(h - self.heading)
    }
}

/// Builds the ego-centered scene state. The `n` nearest neighbors (ties by
/// id) fill slots `1..=n` in order of distance.
pub fn build_state(cfg: &SceneConfig, buffer: &HistoryBuffer, obs: &SimObservation) -> SceneState {
    let mut state = SceneState::empty(cfg);
    let ego = &obs.ego.state;
    let frame = EgoFrame::new(ego);
    let mut ranked: Vec<(f64, u64, usize)> = obs
        .neighbors
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let d = (n.state.position[0] - ego.position[0]).hypot(n.state.position[1] - ego.position[1]);
            (d, n.state.id, i)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let agents = std::iter::once(&obs.ego).chain(ranked.iter().take(cfg.neighbors).map(|&(_, _, i)| &obs.neighbors[i]));
    for (slot, agent) in agents.enumerate() {
        state.agent_mask[slot] = true;
        state.ids[slot] = agent.state.id;
        let mut track = buffer.track(agent.state.id);
        // the current observation is authoritative for the latest step
        if let Some(last) = track.last_mut() {
            *last = Some(agent.state);
        }
        for (t, st) in track.iter().enumerate() {
            if let Some(st) = st {
                let p = frame.point(st.position);
                let v = frame.vector(st.velocity());
                let row = [p[0], p[1], v[0], v[1], frame.angle(st.heading)];
                for (k, x) in row.into_iter().enumerate() {
                    state.motion[[slot, t, k]] = x;
                }
                state.motion_mask[[slot, t]] = true;
            }
        }
        for (j, route) in agent.routes.iter().take(cfg.routes).enumerate() {
            for (w, wp) in route.iter().take(cfg.route_len).enumerate() {
                let p = frame.point([wp[0], wp[1]]);
                state.routes[[slot, j, w, 0]] = p[0];
                state.routes[[slot, j, w, 1]] = p[1];
                state.routes[[slot, j, w, 2]] = frame.angle(wp[2]);
                state.route_mask[[slot, j, w]] = true;
            }
        }
    }
    // the ego's own latest pose is the origin exactly
    let last = cfg.history - 1;
    state.motion[[0, last, 0]] = 0.0;
    state.motion[[0, last, 1]] = 0.0;
    state.motion[[0, last, 4]] = 0.0;
    state
}

/// A future window cut from a recorded episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window<S, A> {
    pub states: Vec<S>,
    pub actions: Vec<A>,
    pub state_valid: Vec<bool>,
    pub action_valid: Vec<bool>,
}

/// States `s_t..=s_{t+T_f}` and actions `a_t..=a_{t+T_f}` of an episode;
/// slots past the end repeat the last entry and are flagged invalid.
pub fn window_states<S: Clone, A: Clone>(states: &[S], actions: &[A], t: usize, horizon: usize) -> Result<Window<S, A>> {
    if t >= states.len() || actions.is_empty() {
        return Err(Error::Usage(format!("window start {t} outside an episode of {} states", states.len())));
    }
    let mut w = Window {
        states: Vec::with_capacity(horizon + 1),
        actions: Vec::with_capacity(horizon + 1),
        state_valid: Vec::with_capacity(horizon + 1),
        action_valid: Vec::with_capacity(horizon + 1),
    };
    for k in t..=t + horizon {
        let sv = k < states.len();
        w.states.push(states[k.min(states.len() - 1)].clone());
        w.state_valid.push(sv);
        let av = k < actions.len();
        w.actions.push(actions[k.min(actions.len() - 1)].clone());
        w.action_valid.push(av);
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{AgentObs, Simulator, ScenarioConfig, HybridAction};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vehicle(id: u64, x: f64, y: f64, heading: f64, speed: f64) -> VehicleState {
        VehicleState {
            id,
            position: [x, y],
            speed,
            heading,
            lane: 0,
            s: 0.0,
            length: 4.5,
            width: 1.8,
            route: None,
        }
    }

    fn agent(id: u64, x: f64, y: f64) -> AgentObs {
        AgentObs {
            state: vehicle(id, x, y, 0.3, 4.0),
            routes: vec![(0..10).map(|k| [x + k as f64, y, 0.0]).collect()],
        }
    }

    fn obs(ego: AgentObs, neighbors: Vec<AgentObs>) -> SimObservation {
        SimObservation {
            ego,
            neighbors,
            episode_step: 0,
        }
    }

    #[test]
    fn empty_neighborhood() {
        let cfg = SceneConfig::default();
        let o = obs(agent(0, 5.0, 5.0), vec![]);
        let mut buf = HistoryBuffer::new(cfg.history);
        buf.update(&o);
        let s = build_state(&cfg, &buf, &o);
        assert_eq!(s.agent_mask.to_vec(), vec![true, false, false, false, false, false]);
        assert!(s.route_mask.slice(ndarray::s![1.., .., ..]).iter().all(|&m| !m));
        assert!(s.route_mask.slice(ndarray::s![0, 0, ..]).iter().all(|&m| m));
        assert_eq!(s.motion.dim(), (6, 10, 5));
        assert_eq!(s.routes.dim(), (6, 2, 10, 3));
    }

    #[test]
    fn ego_centered() {
        let cfg = SceneConfig::default();
        let mut buf = HistoryBuffer::new(cfg.history);
        let mut o = obs(agent(0, 0.0, 0.0), vec![agent(4, 10.0, 3.0)]);
        for k in 0..4 {
            o.ego.state.position = [k as f64, 0.5 * k as f64];
            buf.update(&o);
        }
        let s = build_state(&cfg, &buf, &o);
        assert_eq!(s.motion[[0, 9, 0]], 0.0);
        assert_eq!(s.motion[[0, 9, 1]], 0.0);
        assert_eq!(s.motion[[0, 9, 4]], 0.0);
        // heading 0.3 in the world -> velocity along +x in the ego frame
        assert!((s.motion[[0, 9, 2]] - 4.0).abs() < 1e-12 && s.motion[[0, 9, 3]].abs() < 1e-12);
    }

    #[test]
    fn short_history_is_left_padded() {
        let cfg = SceneConfig::default();
        let mut buf = HistoryBuffer::new(cfg.history);
        for k in 0..10 {
            let n = if k >= 7 { vec![agent(3, 8.0, 1.0)] } else { vec![] };
            buf.update(&obs(agent(0, 0.0, 0.0), n));
        }
        let o = obs(agent(0, 0.0, 0.0), vec![agent(3, 8.0, 1.0)]);
        let s = build_state(&cfg, &buf, &o);
        let row: Vec<bool> = s.motion_mask.row(1).to_vec();
        let mut expected = vec![false; 7];
        expected.extend([true; 3]);
        assert_eq!(row, expected);
        assert!(s.motion.slice(ndarray::s![1, ..7, ..]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stale_tracks_are_evicted() {
        let mut buf = HistoryBuffer::new(10);
        buf.update(&obs(agent(0, 0.0, 0.0), vec![agent(9, 3.0, 0.0)]));
        for _ in 0..9 {
            buf.update(&obs(agent(0, 0.0, 0.0), vec![]));
        }
        assert!(buf.contains(9));
        buf.update(&obs(agent(0, 0.0, 0.0), vec![]));
        assert!(!buf.contains(9));
    }

    #[test]
    fn rotation_cases() {
        let mut s = SceneState::empty(&SceneConfig::default());
        s.motion[[0, 9, 0]] = 1.0;
        s.motion_mask[[0, 9]] = true;
        s.agent_mask[0] = true;
        assert_eq!(s.rotated(0.0), s);
        let r = s.rotated(FRAC_PI_2);
        assert!(r.motion[[0, 9, 0]].abs() < 1e-15);
        assert!((r.motion[[0, 9, 1]] - 1.0).abs() < 1e-15);
        assert!((r.motion[[0, 9, 4]] - FRAC_PI_2).abs() < 1e-15);
        // masked entries untouched
        assert_eq!(r.motion[[0, 0, 4]], 0.0);
    }

    #[test]
    fn window_padding() {
        let states: Vec<u32> = (0..5).collect();
        let actions: Vec<u32> = (0..4).collect();
        let w = window_states(&states, &actions, 3, 3).unwrap();
        assert_eq!(w.state_valid, vec![true, true, false, false]);
        assert_eq!(w.states, vec![3, 4, 4, 4]);
        let w = window_states(&states, &actions, 0, 3).unwrap();
        assert!(w.state_valid.iter().all(|&v| v));
        assert_eq!(w.actions, vec![0, 1, 2, 3]);
        assert!(window_states(&states, &actions, 5, 3).is_err());
    }

    #[test]
    fn build_state_from_simulator_is_pure() {
        let cfg = SceneConfig::default();
        let mut sim = Simulator::new(ScenarioConfig::preset("roundabout_a").unwrap()).unwrap();
        let mut buf = HistoryBuffer::new(cfg.history);
        let mut o = sim.reset(3);
        buf.update(&o);
        for _ in 0..30 {
            o = sim.step(&HybridAction::from_raw([0.0, 0.0], 10.0)).unwrap().0;
            buf.update(&o);
        }
        let a = build_state(&cfg, &buf, &o);
        let b = build_state(&cfg, &buf, &o);
        assert_eq!(a, b);
        assert!(a.agent_mask[0]);
        for i in 0..cfg.agents() {
            if !a.agent_mask[i] {
                assert!(a.motion.slice(ndarray::s![i, .., ..]).iter().all(|&x| x == 0.0));
                assert!(a.routes.slice(ndarray::s![i, .., .., ..]).iter().all(|&x| x == 0.0));
            }
        }
    }

    fn positions(s: &SceneState) -> Vec<[f64; 2]> {
        let mut out = Vec::new();
        for ((i, t), &m) in s.motion_mask.indexed_iter() {
            if m {
                out.push([s.motion[[i, t, 0]], s.motion[[i, t, 1]]]);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn ranking_ignores_observation_order(
            pts in proptest::collection::vec((-40.0f64..40.0, -40.0f64..40.0), 0..9),
            seed in 0u64..1000,
        ) {
            let cfg = SceneConfig::default();
            let mut ns: Vec<AgentObs> = pts.iter().enumerate().map(|(k, &(x, y))| agent(k as u64 + 1, x, y)).collect();
            // force some distance ties
            if ns.len() > 2 {
                ns[1].state.position = [-ns[0].state.position[0], -ns[0].state.position[1]];
            }
            let o1 = obs(agent(0, 0.0, 0.0), ns.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::seq::SliceRandom;
            ns.shuffle(&mut rng);
            let o2 = obs(agent(0, 0.0, 0.0), ns);
            let mut buf = HistoryBuffer::new(cfg.history);
            buf.update(&o1);
            let a = build_state(&cfg, &buf, &o1);
            let b = build_state(&cfg, &buf, &o2);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn augmentation_is_an_isometry(
            pts in proptest::collection::vec((-40.0f64..40.0, -40.0f64..40.0, -3.0f64..3.0, 0.0f64..12.0), 1..6),
            seed in 0u64..1000,
        ) {
            let cfg = SceneConfig::default();
            let ns: Vec<AgentObs> = pts.iter().enumerate().map(|(k, &(x, y, h, v))| AgentObs {
                state: vehicle(k as u64 + 1, x, y, h, v),
                routes: vec![],
            }).collect();
            let o = obs(agent(0, 1.0, 2.0), ns);
            let mut buf = HistoryBuffer::new(cfg.history);
            buf.update(&o);
            let s = build_state(&cfg, &buf, &o);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = augment(&s, &mut rng);
            let (p, q) = (positions(&s), positions(&r));
            for i in 0..p.len() {
                let n0 = p[i][0].hypot(p[i][1]);
                prop_assert!((n0 - q[i][0].hypot(q[i][1])).abs() < 1e-9);
                for j in 0..p.len() {
                    let d0 = (p[i][0] - p[j][0]).hypot(p[i][1] - p[j][1]);
                    let d1 = (q[i][0] - q[j][0]).hypot(q[i][1] - q[j][1]);
                    prop_assert!((d0 - d1).abs() < 1e-9);
                }
            }
            for ((i, t), &m) in s.motion_mask.indexed_iter() {
                if m {
                    let v0 = s.motion[[i, t, 2]].hypot(s.motion[[i, t, 3]]);
                    let v1 = r.motion[[i, t, 2]].hypot(r.motion[[i, t, 3]]);
                    prop_assert!((v0 - v1).abs() < 1e-9);
                }
            }
            prop_assert_eq!(&s.motion_mask, &r.motion_mask);
            prop_assert_eq!(&s.route_mask, &r.route_mask);
        }
    }

    #[test]
    fn rotation_matches_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut s = SceneState::empty(&SceneConfig::default());
        s.agent_mask[0] = true;
        for t in 0..10 {
            s.motion_mask[[0, t]] = true;
            for k in 0..4 {
                s.motion[[0, t, k]] = rng.random_range(-20.0..20.0);
            }
        }
        let theta = 0.7;
        let r = s.rotated(theta);
        let m = nalgebra::Rotation2::new(theta);
        for t in 0..10 {
            let p = m * nalgebra::Vector2::new(s.motion[[0, t, 0]], s.motion[[0, t, 1]]);
            let v = m * nalgebra::Vector2::new(s.motion[[0, t, 2]], s.motion[[0, t, 3]]);
            assert!((p.x - r.motion[[0, t, 0]]).abs() < 1e-9 && (p.y - r.motion[[0, t, 1]]).abs() < 1e-9);
            assert!((v.x - r.motion[[0, t, 2]]).abs() < 1e-9 && (v.y - r.motion[[0, t, 3]]).abs() < 1e-9);
        }
    }
}
