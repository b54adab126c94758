//! The traffic environment: ego execution, neighbor traffic, spawning,
//! reward and termination.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use super::driver::{driver_model_step, DriverParams, IdmConstants, Leader};
use super::geometry::{dist, OrientedRect, Vec2};
use super::network::{LaneId, RoadNetwork, Waypoint};
use super::scenario::ScenarioConfig;
use crate::error::{Error, Result};

pub const VEHICLE_LENGTH: f64 = 4.5;
pub const VEHICLE_WIDTH: f64 = 1.8;
/// Steps of a complete lane change (2 s at 0.1 s).
pub const LANE_CHANGE_STEPS: u32 = 20;
pub const WAYPOINT_SPACING: f64 = 1.0;
pub const EGO_ID: u64 = 0;

const LOOK_AHEAD: f64 = 60.0;
const EGO_GAIN: f64 = 2.0;
const EGO_ACCEL: [f64; 2] = [-6.0, 3.0];
const YIELD_ZONE: f64 = 40.0;
const MERGE_HORIZON: f64 = 50.0;
const SPAWN_CLEARANCE: f64 = 10.0;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct VehicleState {
    pub id: u64,
    pub position: Vec2,
    pub speed: f64,
    pub heading: f64,
    pub lane: LaneId,
    /// Arc length along `lane`.
    pub s: f64,
    pub length: f64,
    pub width: f64,
    /// Traffic route index; `None` for the ego.
    pub route: Option<usize>,
}

impl VehicleState {
    pub fn velocity(&self) -> Vec2 {
        [self.speed * self.heading.cos(), self.speed * self.heading.sin()]
    }

    pub fn footprint(&self) -> OrientedRect {
        OrientedRect {
            center: self.position,
            heading: self.heading,
            length: self.length,
            width: self.width,
        }
    }
}

/// Raw policy output with its environment interpretation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct HybridAction {
    pub raw: [f64; 2],
    /// Target speed `V_t` (m/s).
    pub target_speed: f64,
    /// Lane command `L_t`: -1 left, 0 keep, +1 right.
    pub lane_command: i8,
}

impl HybridAction {
    pub fn from_raw(raw: [f64; 2], v_max: f64) -> Self {
        let r0 = raw[0].clamp(-1.0, 1.0);
        let r1 = raw[1].clamp(-1.0, 1.0);
        let third = 1.0 / 3.0;
        let lane_command = if r1 < -third {
            -1
        } else if r1 > third {
            1
        } else {
            0
        };
        Self {
            raw,
            target_speed: (r0 + 1.0) / 2.0 * v_max,
            lane_command,
        }
    }
}

/// Progress of a lane change. The lateral offset follows a cosine ease
/// while the command is held and unwinds step by step once released.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct LaneChange {
    pub dir: i8,
    pub progress: u32,
}

impl LaneChange {
    /// Advances one step; returns the direction when the change completes.
    pub fn advance(&mut self, command: i8) -> Option<i8> {
        if self.progress == 0 {
            self.dir = command.signum();
        }
        if command != 0 && command.signum() == self.dir {
            self.progress += 1;
            if self.progress >= LANE_CHANGE_STEPS {
                let dir = self.dir;
                *self = Self::default();
                return Some(dir);
            }
        } else if self.progress > 0 {
            self.progress -= 1;
        }
        if self.progress == 0 {
            self.dir = 0;
        }
        None
    }

    /// Lateral offset from the origin lane center (left positive).
    pub fn lateral(&self, width: f64) -> f64 {
        let p = self.progress as f64 / LANE_CHANGE_STEPS as f64;
        -(self.dir as f64) * width * (1.0 - (PI * p).cos()) / 2.0
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub enum Outcome {
    Running,
    Goal,
    Collision,
    OffRoute,
    Timeout,
}

impl Outcome {
    pub fn reward(self) -> f64 {
        match self {
            Outcome::Goal => 1.0,
            Outcome::Collision | Outcome::OffRoute => -1.0,
            Outcome::Running | Outcome::Timeout => 0.0,
        }
    }

    pub fn is_done(self) -> bool {
        self != Outcome::Running
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AgentObs {
    pub state: VehicleState,
    /// Candidate route waypoint sequences, keep-lane first.
    pub routes: Vec<Vec<Waypoint>>,
}

/// What the ego perceives after a reset or a step.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SimObservation {
    pub ego: AgentObs,
    /// Every vehicle within the neighbor radius, nearest first (ties by id).
    pub neighbors: Vec<AgentObs>,
    pub episode_step: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepInfo {
    pub outcome: Outcome,
    pub episode_step: u32,
    /// Poisson arrivals per route since the ego was placed.
    pub arrivals: Vec<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Ego {
    lane: LaneId,
    s: f64,
    speed: f64,
    change: LaneChange,
    lateral: f64,
    heading: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Neighbor {
    id: u64,
    route: usize,
    /// Index of `lane` in the route, while the vehicle follows its plan.
    plan_idx: Option<usize>,
    lane: LaneId,
    s: f64,
    speed: f64,
    lateral: f64,
    lateral_from: f64,
    change_step: u32,
    heading: f64,
    params: DriverParams,
    yields_to_ego: bool,
    committed: bool,
}

#[derive(Clone, Copy, Debug)]
struct Occupant {
    lane: LaneId,
    s: f64,
    speed: f64,
    /// `None` for the ego.
    who: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Simulator {
    config: ScenarioConfig,
    net: RoadNetwork,
    goal_lane: LaneId,
    goal_s: f64,
    viable: Vec<bool>,
    idm: IdmConstants,
    /// Candidate routes per agent (`N_k`).
    pub route_count: usize,
    /// Waypoints per candidate route (`T_K`).
    pub route_len: usize,
    rng: ChaCha8Rng,
    ego: Option<Ego>,
    neighbors: Vec<Neighbor>,
    next_id: u64,
    tick: u64,
    next_arrival: Vec<f64>,
    scheduled: Vec<u32>,
    pending: Vec<u32>,
    arrivals: Vec<u32>,
    episode_step: u32,
    outcome: Outcome,
}

impl Simulator {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let net = config.network()?;
        let goal_lane = *config.ego.route.last().expect("validated");
        let goal_s = net.lane(goal_lane).centerline().project(config.ego.goal).s;
        let viable = net.reaches(goal_lane);
        let routes = config.routes.len();
        Ok(Self {
            net,
            goal_lane,
            goal_s,
            viable,
            idm: IdmConstants::default(),
            route_count: 2,
            route_len: 10,
            rng: ChaCha8Rng::seed_from_u64(0),
            ego: None,
            neighbors: Vec::new(),
            next_id: 1,
            tick: 0,
            next_arrival: vec![f64::INFINITY; routes],
            scheduled: vec![0; routes],
            pending: vec![0; routes],
            arrivals: vec![0; routes],
            episode_step: 0,
            outcome: Outcome::Running,
            config,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn network(&self) -> &RoadNetwork {
        &self.net
    }

    pub fn outcome(&self) -> Outcome {
        self.outcome
    }

    pub fn episode_step(&self) -> u32 {
        self.episode_step
    }

    pub fn goal(&self) -> (LaneId, f64) {
        (self.goal_lane, self.goal_s)
    }

    /// Starts a new episode. Traffic runs through the warm-up period before
    /// the ego is placed uniformly on its start interval.
    pub fn reset(&mut self, seed: u64) -> SimObservation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.ego = None;
        self.neighbors.clear();
        self.next_id = 1;
        self.tick = 0;
        let n = self.config.routes.len();
        self.scheduled = vec![0; n];
        self.pending = vec![0; n];
        self.arrivals = vec![0; n];
        self.next_arrival = (0..n).map(|_| self.draw_interarrival()).collect();
        self.episode_step = 0;
        self.outcome = Outcome::Running;
        let warmup = (self.config.warmup_seconds / self.config.dt).round() as u64;
        for _ in 0..warmup {
            self.advance_traffic(&[]);
        }
        let task = self.config.ego.clone();
        let lane = task.start_lanes[self.rng.random_range(0..task.start_lanes.len())];
        let s = uniform(&mut self.rng, task.start_interval);
        let speed = uniform(&mut self.rng, task.start_speed);
        let heading = self.net.lane(lane).centerline().pose_at(s).1;
        self.ego = Some(Ego {
            lane,
            s,
            speed,
            change: LaneChange::default(),
            lateral: 0.0,
            heading,
        });
        let ego_pos = self.ego_state().position;
        let clear = VEHICLE_LENGTH * 2.5;
        let states: Vec<VehicleState> = self.neighbors.iter().map(|nb| self.neighbor_state(nb)).collect();
        let keep: Vec<bool> = states.iter().map(|st| dist(st.position, ego_pos) > clear).collect();
        let mut k = keep.into_iter();
        self.neighbors.retain(|_| k.next().unwrap());
        self.arrivals = vec![0; n];
        self.observe()
    }

    pub fn step(&mut self, action: &HybridAction) -> Result<(SimObservation, f64, bool, StepInfo)> {
        if self.ego.is_none() {
            return Err(Error::Usage("step called before reset".into()));
        }
        if self.outcome.is_done() {
            return Err(Error::Usage("step called after the episode ended".into()));
        }
        let snapshot = self.occupants();
        let mut off_route = self.move_ego(action);
        self.advance_traffic(&snapshot);
        self.episode_step += 1;
        let ego = self.ego_state();
        let rect = ego.footprint();
        let collided = self
            .neighbors
            .iter()
            .map(|nb| self.neighbor_state(nb))
            .any(|st| dist(st.position, ego.position) < 6.0 && rect.overlaps(&st.footprint()));
        let e = self.ego.as_ref().unwrap();
        if !off_route {
            let lane = self.net.lane(e.lane);
            let half = lane.spec.width / 2.0;
            if e.lateral.abs() > half && lane.side(if e.lateral > 0.0 { -1 } else { 1 }).is_none() {
                off_route = true;
            }
        }
        self.outcome = if collided {
            Outcome::Collision
        } else if off_route {
            Outcome::OffRoute
        } else if e.lane == self.goal_lane && e.s >= self.goal_s {
            Outcome::Goal
        } else if self.episode_step >= self.config.max_timesteps {
            Outcome::Timeout
        } else {
            Outcome::Running
        };
        let info = StepInfo {
            outcome: self.outcome,
            episode_step: self.episode_step,
            arrivals: self.arrivals.clone(),
        };
        Ok((self.observe(), self.outcome.reward(), self.outcome.is_done(), info))
    }

    /// All vehicles currently simulated, ego first.
    pub fn vehicles(&self) -> Vec<VehicleState> {
        let mut out = Vec::with_capacity(self.neighbors.len() + 1);
        if self.ego.is_some() {
            out.push(self.ego_state());
        }
        out.extend(self.neighbors.iter().map(|nb| self.neighbor_state(nb)));
        out
    }

    pub fn arrivals(&self) -> &[u32] {
        &self.arrivals
    }

    fn draw_interarrival(&mut self) -> f64 {
        let rate = self.config.flow_rate / 3600.0;
        if rate <= 0.0 {
            return f64::INFINITY;
        }
        Exp::new(rate).expect("positive rate").sample(&mut self.rng)
    }

    fn ego_next(&self, lane: LaneId) -> Option<LaneId> {
        let succ = &self.net.lane(lane).spec.successors;
        succ.iter()
            .copied()
            .find(|l| self.config.ego.route.contains(l))
            .or_else(|| succ.iter().copied().find(|&l| self.viable[l]))
    }

    fn ego_state(&self) -> VehicleState {
        let e = self.ego.as_ref().expect("ego placed");
        let (position, _) = self.net.lane(e.lane).centerline().offset_pose(e.s, e.lateral);
        VehicleState {
            id: EGO_ID,
            position,
            speed: e.speed,
            heading: e.heading,
            lane: e.lane,
            s: e.s.min(self.net.lane(e.lane).length()),
            length: VEHICLE_LENGTH,
            width: VEHICLE_WIDTH,
            route: None,
        }
    }

    fn neighbor_state(&self, nb: &Neighbor) -> VehicleState {
        let line = self.net.lane(nb.lane).centerline();
        let s = nb.s.clamp(0.0, line.length());
        let (position, _) = line.offset_pose(s, nb.lateral);
        VehicleState {
            id: nb.id,
            position,
            speed: nb.speed,
            heading: nb.heading,
            lane: nb.lane,
            s,
            length: VEHICLE_LENGTH,
            width: VEHICLE_WIDTH,
            route: Some(nb.route),
        }
    }

    /// Applies the hybrid action for one step. Returns true when the ego
    /// leaves the viable network.
    fn move_ego(&mut self, action: &HybridAction) -> bool {
        let dt = self.config.dt;
        let vmax = self.config.max_vehicle_speed;
        let mut e = self.ego.take().unwrap();
        let accel = (EGO_GAIN * (action.target_speed - e.speed)).clamp(EGO_ACCEL[0], EGO_ACCEL[1]);
        let v_new = (e.speed + accel * dt).clamp(0.0, vmax);
        let ds = 0.5 * (e.speed + v_new) * dt;
        e.speed = v_new;
        let old_lateral = e.lateral;
        let width = self.net.lane(e.lane).spec.width;
        let mut off_route = false;
        if let Some(dir) = e.change.advance(action.lane_command) {
            match self.net.lane(e.lane).side(dir) {
                Some(target) => {
                    let pos = self.net.lane(e.lane).centerline().offset_pose(e.s, -(dir as f64) * width).0;
                    let pr = self.net.lane(target).centerline().project(pos);
                    e.lane = target;
                    e.s = pr.s;
                }
                None => off_route = true,
            }
            e.lateral = 0.0;
        } else {
            e.lateral = e.change.lateral(width);
        }
        e.s += ds;
        loop {
            let len = self.net.lane(e.lane).length();
            if e.s <= len {
                break;
            }
            match self.ego_next(e.lane) {
                Some(next) => {
                    e.s -= len;
                    e.lane = next;
                }
                None => {
                    e.s = len;
                    off_route = true;
                    break;
                }
            }
        }
        if !self.viable[e.lane] {
            off_route = true;
        }
        let lane_heading = self.net.lane(e.lane).centerline().pose_at(e.s).1;
        let lat_rate = if e.change.progress == 0 && e.lateral == 0.0 {
            0.0
        } else {
            (e.lateral - old_lateral) / dt
        };
        e.heading = super::geometry::wrap_angle(lane_heading + lat_rate.atan2(e.speed.max(0.1)));
        self.ego = Some(e);
        off_route
    }

    fn occupants(&self) -> Vec<Occupant> {
        let mut out: Vec<Occupant> = self
            .neighbors
            .iter()
            .enumerate()
            .map(|(i, nb)| Occupant {
                lane: nb.lane,
                s: nb.s,
                speed: nb.speed,
                who: Some(i),
            })
            .collect();
        if let Some(e) = &self.ego {
            out.push(Occupant {
                lane: e.lane,
                s: e.s,
                speed: e.speed,
                who: None,
            });
        }
        out
    }

    fn neighbor_next(&self, nb: &Neighbor, lane: LaneId) -> Option<LaneId> {
        let succ = &self.net.lane(lane).spec.successors;
        let route = &self.config.routes[nb.route].lanes;
        if let Some(i) = nb.plan_idx {
            if lane == nb.lane {
                if let Some(&n) = route.get(i + 1) {
                    if succ.contains(&n) {
                        return Some(n);
                    }
                }
            } else if let Some(pos) = route.iter().position(|&l| l == lane) {
                if let Some(&n) = route.get(pos + 1) {
                    if succ.contains(&n) {
                        return Some(n);
                    }
                }
            }
        }
        succ.first().copied()
    }

    /// Lanes ahead of a neighbor with the path distance to their start.
    fn path(&self, nb: &Neighbor) -> Vec<(LaneId, f64)> {
        let mut out = vec![(nb.lane, -nb.s)];
        let mut lane = nb.lane;
        let mut off = self.net.lane(lane).length() - nb.s;
        while off < LOOK_AHEAD {
            match self.neighbor_next(nb, lane) {
                Some(n) if !out.iter().any(|&(l, _)| l == n) => {
                    out.push((n, off));
                    off += self.net.lane(n).length();
                    lane = n;
                }
                _ => break,
            }
        }
        out
    }

    fn leader(&self, i: usize, occ: &[Occupant], ego_state: Option<&VehicleState>) -> Option<Leader> {
        let nb = &self.neighbors[i];
        let path = self.path(nb);
        let mut best: Option<Leader> = None;
        let mut offer = |gap: f64, speed: f64| {
            if best.is_none_or(|b| gap < b.gap) {
                best = Some(Leader { gap, speed });
            }
        };
        for o in occ {
            if o.who == Some(i) {
                continue;
            }
            if let Some(&(_, off)) = path.iter().find(|(l, _)| *l == o.lane) {
                let d = off + o.s;
                if d > 0.0 && d < LOOK_AHEAD {
                    offer(d - VEHICLE_LENGTH, o.speed);
                }
            }
        }
        if let (Some(es), Some(e)) = (ego_state, &self.ego) {
            if !path.iter().any(|&(l, _)| l == e.lane) {
                for &(lane, off) in path.iter().take(2) {
                    let line = self.net.lane(lane).centerline();
                    let pr = line.project(es.position);
                    if pr.s <= 0.0 || pr.s >= line.length() {
                        continue;
                    }
                    let d = off + pr.s;
                    if d <= 0.0 || d >= LOOK_AHEAD {
                        continue;
                    }
                    let normal = [-pr.heading.sin(), pr.heading.cos()];
                    let v = es.velocity();
                    let lat_v = v[0] * normal[0] + v[1] * normal[1];
                    let along = v[0] * pr.heading.cos() + v[1] * pr.heading.sin();
                    let near = pr.lateral.abs() < 2.0;
                    let converging = pr.lateral.abs() < 5.0 && pr.lateral * lat_v < 0.0 && nb.yields_to_ego;
                    if near || converging {
                        offer(d - VEHICLE_LENGTH, along.max(0.0));
                        break;
                    }
                }
            }
        }
        best
    }

    /// Vehicles that would conflict with entering `next` from `from`.
    fn merge_blocked(&self, nb: &Neighbor, next: LaneId, occ: &[Occupant], threshold: f64) -> bool {
        for o in occ {
            if o.lane == next && o.s < VEHICLE_LENGTH + nb.params.min_gap {
                return true;
            }
        }
        // walk upstream along the other predecessors of `next`
        let mut stack: Vec<(LaneId, f64)> = self
            .net
            .lane(next)
            .predecessors
            .iter()
            .filter(|&&p| p != nb.lane)
            .map(|&p| (p, 0.0))
            .collect();
        let mut seen = vec![nb.lane, next];
        while let Some((lane, off)) = stack.pop() {
            if seen.contains(&lane) {
                continue;
            }
            seen.push(lane);
            let len = self.net.lane(lane).length();
            for o in occ.iter().filter(|o| o.lane == lane) {
                let d = off + (len - o.s);
                if d < MERGE_HORIZON && d / o.speed.max(0.1) < threshold {
                    return true;
                }
            }
            if off + len < MERGE_HORIZON {
                for &p in &self.net.lane(lane).predecessors {
                    stack.push((p, off + len));
                }
            }
        }
        false
    }

    fn lane_change_gap_ok(&self, nb: &Neighbor, target: LaneId, s_target: f64, occ: &[Occupant]) -> bool {
        let follower_factor = 1.0 - 0.5 * nb.params.impatience;
        for o in occ.iter().filter(|o| o.lane == target) {
            let d = o.s - s_target;
            if d >= 0.0 {
                if d - VEHICLE_LENGTH < nb.params.min_gap + 0.3 * nb.speed {
                    return false;
                }
            } else if -d - VEHICLE_LENGTH < nb.params.min_gap + o.speed * follower_factor {
                return false;
            }
        }
        true
    }

    /// Advances all neighbors one step using the pre-step `snapshot` for
    /// interactions, then handles spawning and arrivals.
    fn advance_traffic(&mut self, snapshot: &[Occupant]) {
        let dt = self.config.dt;
        let owned;
        let occ: &[Occupant] = if snapshot.is_empty() {
            owned = self.occupants();
            &owned
        } else {
            snapshot
        };
        let ego_state = self.ego.as_ref().map(|_| self.ego_state());
        let count = self.neighbors.len().min(occ.iter().filter(|o| o.who.is_some()).count());
        // decisions from the snapshot
        let mut leaders = Vec::with_capacity(count);
        let mut changes: Vec<Option<(LaneId, f64, f64)>> = vec![None; count];
        let mut commits = vec![false; count];
        for i in 0..count {
            let nb = &self.neighbors[i];
            let mut lead = self.leader(i, occ, ego_state.as_ref());
            let lane = self.net.lane(nb.lane);
            let to_end = lane.length() - nb.s;
            let route = &self.config.routes[nb.route].lanes;
            if let Some(pi) = nb.plan_idx {
                if let Some(&target) = route.get(pi + 1) {
                    if nb.change_step == 0 && (lane.spec.left == Some(target) || lane.spec.right == Some(target)) {
                        let pos = self.neighbor_state(nb).position;
                        let pr = self.net.lane(target).centerline().project(pos);
                        if pr.s > 0.0
                            && self.net.lane(target).length() - pr.s > 5.0
                            && self.lane_change_gap_ok(nb, target, pr.s, occ)
                        {
                            changes[i] = Some((target, pr.s, pr.lateral));
                        }
                    }
                }
            }
            if lane.spec.yield_at_end && !nb.committed && to_end < YIELD_ZONE {
                if let Some(next) = self.neighbor_next(nb, nb.lane) {
                    let threshold = 3.0 * (1.0 - 0.5 * nb.params.impatience);
                    if self.merge_blocked(nb, next, occ, threshold) {
                        let stop = Leader {
                            gap: (to_end - 0.5 * VEHICLE_LENGTH).max(0.01),
                            speed: 0.0,
                        };
                        if lead.is_none_or(|l| stop.gap < l.gap) {
                            lead = Some(stop);
                        }
                    } else if to_end < 10.0 {
                        commits[i] = true;
                    }
                }
            }
            leaders.push(lead);
        }
        let c = self.idm;
        let vmax = self.config.max_vehicle_speed;
        let mut keep = vec![true; self.neighbors.len()];
        for i in 0..self.neighbors.len() {
            let noise: f64 = StandardNormal.sample(&mut self.rng);
            let lead = if i < count { leaders[i] } else { None };
            let nb = self.neighbors[i].clone();
            let (v, ds) = driver_model_step(nb.speed, &nb.params, lead, noise, dt, &c);
            let mut nb = nb;
            let old_lat = nb.lateral;
            nb.speed = v.min(vmax);
            if i < count && commits[i] {
                nb.committed = true;
            }
            if let Some((target, s, lat)) = changes.get(i).copied().flatten() {
                nb.lane = target;
                nb.s = s;
                nb.lateral_from = lat;
                nb.lateral = lat;
                nb.change_step = 1;
                nb.committed = false;
                nb.plan_idx = nb.plan_idx.map(|p| p + 1);
            } else if nb.change_step > 0 {
                nb.change_step += 1;
                let p = (nb.change_step as f64 / LANE_CHANGE_STEPS as f64).min(1.0);
                nb.lateral = nb.lateral_from * (1.0 + (PI * p).cos()) / 2.0;
                if nb.change_step >= LANE_CHANGE_STEPS {
                    nb.change_step = 0;
                    nb.lateral = 0.0;
                }
            }
            nb.s += ds;
            loop {
                let len = self.net.lane(nb.lane).length();
                if nb.s <= len {
                    break;
                }
                match self.neighbor_next(&nb, nb.lane) {
                    Some(next) => {
                        let route = &self.config.routes[nb.route].lanes;
                        nb.plan_idx = match nb.plan_idx {
                            Some(p) if route.get(p + 1) == Some(&next) => Some(p + 1),
                            _ => None,
                        };
                        nb.s -= len;
                        nb.lane = next;
                        nb.committed = false;
                    }
                    None => {
                        keep[i] = false;
                        break;
                    }
                }
            }
            if keep[i] {
                let h = self.net.lane(nb.lane).centerline().pose_at(nb.s).1;
                let lat_rate = (nb.lateral - old_lat) / dt;
                nb.heading = super::geometry::wrap_angle(h + lat_rate.atan2(nb.speed.max(0.1)));
            }
            self.neighbors[i] = nb;
        }
        let mut k = keep.into_iter();
        self.neighbors.retain(|_| k.next().unwrap());
        self.tick += 1;
        self.spawn();
    }

    fn spawn(&mut self) {
        let now = self.tick as f64 * self.config.dt;
        let cap = self.config.route_capacity();
        for r in 0..self.config.routes.len() {
            while self.next_arrival[r] <= now && self.scheduled[r] < cap {
                self.scheduled[r] += 1;
                self.pending[r] += 1;
                self.arrivals[r] += 1;
                let gap = self.draw_interarrival();
                self.next_arrival[r] += gap;
            }
            if self.scheduled[r] >= cap {
                self.next_arrival[r] = f64::INFINITY;
            }
            if self.pending[r] == 0 {
                continue;
            }
            let start = self.config.routes[r].lanes[0];
            let occ = self.occupants();
            let mut ahead: Option<(f64, f64)> = None;
            for o in occ.iter().filter(|o| o.lane == start) {
                if ahead.is_none_or(|(s, _)| o.s < s) {
                    ahead = Some((o.s, o.speed));
                }
            }
            if ahead.is_some_and(|(s, _)| s < SPAWN_CLEARANCE) {
                continue;
            }
            let params = self.config.driver_params.sample(&mut self.rng);
            let yields_to_ego = self.rng.random_bool(params.cooperative.clamp(0.0, 1.0));
            let mut speed = 0.7 * params.desired_speed;
            if let Some((s, v)) = ahead {
                if s < 30.0 {
                    speed = speed.min(v);
                }
            }
            let heading = self.net.lane(start).centerline().pose_at(0.0).1;
            self.neighbors.push(Neighbor {
                id: self.next_id,
                route: r,
                plan_idx: Some(0),
                lane: start,
                s: 0.0,
                speed,
                lateral: 0.0,
                lateral_from: 0.0,
                change_step: 0,
                heading,
                params,
                yields_to_ego,
                committed: false,
            });
            self.next_id += 1;
            self.pending[r] -= 1;
        }
    }

    fn observe(&self) -> SimObservation {
        let ego_state = self.ego_state();
        let e = self.ego.as_ref().unwrap();
        let ego_routes = self.net.candidate_routes(
            e.lane,
            ego_state.position,
            ego_state.s,
            self.route_count,
            self.route_len,
            WAYPOINT_SPACING,
            &|l| self.ego_next(l),
        );
        let mut near: Vec<(f64, u64, usize)> = self
            .neighbors
            .iter()
            .enumerate()
            .filter_map(|(i, nb)| {
                let st = self.neighbor_state(nb);
                let d = dist(st.position, ego_state.position);
                (d <= self.config.neighbor_radius).then_some((d, nb.id, i))
            })
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let neighbors = near
            .into_iter()
            .map(|(_, _, i)| {
                let nb = &self.neighbors[i];
                let state = self.neighbor_state(nb);
                let routes = self.net.candidate_routes(
                    nb.lane,
                    state.position,
                    state.s,
                    self.route_count,
                    self.route_len,
                    WAYPOINT_SPACING,
                    &|l| self.neighbor_next(nb, l),
                );
                AgentObs { state, routes }
            })
            .collect();
        SimObservation {
            ego: AgentObs {
                state: ego_state,
                routes: ego_routes,
            },
            neighbors,
            episode_step: self.episode_step,
        }
    }

    /// Places the ego explicitly (lane, arc length, lateral offset, speed).
    /// Intended for tests and scripted scenes.
    pub fn place_ego(&mut self, lane: LaneId, s: f64, speed: f64) -> Result<SimObservation> {
        if lane >= self.net.len() || !(0.0..=self.net.lane(lane).length()).contains(&s) {
            return Err(Error::Usage(format!("ego placement ({lane}, {s}) is off the network")));
        }
        let heading = self.net.lane(lane).centerline().pose_at(s).1;
        self.ego = Some(Ego {
            lane,
            s,
            speed,
            change: LaneChange::default(),
            lateral: 0.0,
            heading,
        });
        self.outcome = Outcome::Running;
        self.episode_step = 0;
        Ok(self.observe())
    }

    /// Removes all traffic and stops further arrivals.
    pub fn clear_traffic(&mut self) {
        self.neighbors.clear();
        for r in 0..self.next_arrival.len() {
            self.next_arrival[r] = f64::INFINITY;
            self.pending[r] = 0;
        }
    }

    /// Adds a stationary-or-moving traffic vehicle on a lane of `route`.
    pub fn add_vehicle(&mut self, route: usize, lane: LaneId, s: f64, speed: f64, params: DriverParams) -> Result<u64> {
        let lanes = &self.config.routes.get(route).ok_or_else(|| Error::Usage(format!("no route {route}")))?.lanes;
        let plan_idx = lanes.iter().position(|&l| l == lane);
        let heading = self.net.lane(lane).centerline().pose_at(s).1;
        let id = self.next_id;
        self.next_id += 1;
        self.neighbors.push(Neighbor {
            id,
            route,
            plan_idx,
            lane,
            s,
            speed,
            lateral: 0.0,
            lateral_from: 0.0,
            change_step: 0,
            heading,
            params,
            yields_to_ego: false,
            committed: false,
        });
        Ok(id)
    }

    pub fn lane_change(&self) -> LaneChange {
        self.ego.as_ref().map(|e| e.change).unwrap_or_default()
    }

    /// Ego lateral offset from its current lane center (left positive).
    pub fn ego_lateral(&self) -> f64 {
        self.ego.as_ref().map_or(0.0, |e| e.lateral)
    }
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}
