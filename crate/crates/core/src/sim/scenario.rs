use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::driver::DriverParamRanges;
use super::geometry::{arc, bezier, straight, Polyline, Vec2};
use super::network::{LaneId, LaneSpec, RoadNetwork, LANE_WIDTH};
use crate::error::{Error, Result};

pub const SIM_DT: f64 = 0.1;

/// A traffic route: ordered lanes, each either a successor or a parallel
/// neighbor of the previous one.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RouteSpec {
    pub lanes: Vec<LaneId>,
}

/// The controlled vehicle's task.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EgoTask {
    /// Lanes the ego may be spawned on (picked uniformly).
    pub start_lanes: Vec<LaneId>,
    /// Arc-length interval on the start lane.
    pub start_interval: [f64; 2],
    pub start_speed: [f64; 2],
    /// Preferred lane sequence; used to break ties between successors.
    pub route: Vec<LaneId>,
    /// Goal point; must lie on the last lane of `route`.
    pub goal: Vec2,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub lanes: Vec<LaneSpec>,
    pub ego: EgoTask,
    pub routes: Vec<RouteSpec>,
    /// Poisson arrival rate per route, vehicles per hour.
    pub flow_rate: f64,
    pub flows_per_route: u32,
    pub vehicles_per_flow: u32,
    pub max_timesteps: u32,
    pub dt: f64,
    pub driver_params: DriverParamRanges,
    /// Neighbor selection radius `d_n` (m).
    pub neighbor_radius: f64,
    /// Traffic is simulated for this long before the ego is placed.
    pub warmup_seconds: f64,
    pub max_vehicle_speed: f64,
}

impl ScenarioConfig {
    pub const PRESETS: [&'static str; 5] = ["left_turn", "double_merge", "roundabout_a", "roundabout_b", "roundabout_c"];

    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "left_turn" => left_turn(),
            "double_merge" => double_merge(),
            "roundabout_a" => roundabout(1, 400, "roundabout_a"),
            "roundabout_b" => roundabout(2, 600, "roundabout_b"),
            "roundabout_c" => roundabout(3, 800, "roundabout_c"),
            other => return Err(Error::Config(format!("unknown scenario preset {other:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A preset name or a path to a JSON scenario file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if Self::PRESETS.contains(&name_or_path) {
            return Self::preset(name_or_path);
        }
        let path = Path::new(name_or_path);
        if path.exists() {
            return Self::from_json(&std::fs::read_to_string(path)?);
        }
        Err(Error::Config(format!("no preset or file named {name_or_path:?}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn network(&self) -> Result<RoadNetwork> {
        RoadNetwork::new(&self.lanes).map_err(Error::Config)
    }

    /// Total vehicles a route may spawn in one episode.
    pub fn route_capacity(&self) -> u32 {
        self.flows_per_route * self.vehicles_per_flow
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dt != SIM_DT {
            return bad(format!("dt must be exactly {SIM_DT}, got {}", self.dt));
        }
        if self.max_timesteps == 0 {
            return bad("max_timesteps must be positive".into());
        }
        if !(self.flow_rate >= 0.0 && self.flow_rate.is_finite()) {
            return bad("flow_rate must be non-negative".into());
        }
        if !(self.neighbor_radius > 0.0) || !(self.warmup_seconds >= 0.0) || !(self.max_vehicle_speed > 0.0) {
            return bad("radius, warm-up and speed limits must be positive".into());
        }
        self.driver_params.validate().map_err(Error::Config)?;
        let net = self.network()?;
        let n = net.len();
        let check_route = |lanes: &[LaneId], what: &str| -> Result<()> {
            if lanes.is_empty() {
                return bad(format!("{what} is empty"));
            }
            if let Some(l) = lanes.iter().find(|&&l| l >= n) {
                return bad(format!("{what} references missing lane {l}"));
            }
            for w in lanes.windows(2) {
                if !net.connected(w[0], w[1]) {
                    return bad(format!(
                        "{what} is disconnected between {} and {}",
                        net.lane(w[0]).spec.name,
                        net.lane(w[1]).spec.name
                    ));
                }
            }
            Ok(())
        };
        for (i, r) in self.routes.iter().enumerate() {
            check_route(&r.lanes, &format!("route {i}"))?;
        }
        check_route(&self.ego.route, "ego route")?;
        let goal_lane = *self.ego.route.last().unwrap();
        let pr = net.lane(goal_lane).centerline().project(self.ego.goal);
        if pr.distance > 0.5 {
            return bad(format!("ego goal is {:.2} m away from its final lane", pr.distance));
        }
        if self.ego.start_lanes.is_empty() || self.ego.start_lanes.iter().any(|&l| l >= n) {
            return bad("ego start lanes invalid".into());
        }
        let reach = net.reaches(goal_lane);
        for &l in &self.ego.start_lanes {
            if !reach[l] {
                return bad(format!("goal unreachable from start lane {}", net.lane(l).spec.name));
            }
            let [a, b] = self.ego.start_interval;
            if !(0.0 <= a && a <= b && b <= net.lane(l).length()) {
                return bad("ego start interval outside start lane".into());
            }
        }
        let [v0, v1] = self.ego.start_speed;
        if !(0.0 <= v0 && v0 <= v1 && v1 <= self.max_vehicle_speed) {
            return bad("ego start speed range invalid".into());
        }
        Ok(())
    }
}

#[derive(Default)]
struct Builder {
    lanes: Vec<LaneSpec>,
}

impl Builder {
    fn lane(&mut self, name: &str, points: Vec<Vec2>) -> LaneId {
        self.lanes.push(LaneSpec {
            name: name.to_string(),
            points: Polyline::new(dedup(points)).expect("preset polyline"),
            left: None,
            right: None,
            successors: Vec::new(),
            yield_at_end: false,
            width: LANE_WIDTH,
        });
        self.lanes.len() - 1
    }

    fn pair(&mut self, left: LaneId, right: LaneId) {
        self.lanes[left].right = Some(right);
        self.lanes[right].left = Some(left);
    }

    fn link(&mut self, from: LaneId, to: LaneId) {
        self.lanes[from].successors.push(to);
    }

    fn point_at(&self, lane: LaneId, s: f64) -> Vec2 {
        self.lanes[lane].points.pose_at(s).0
    }
}

fn dedup(points: Vec<Vec2>) -> Vec<Vec2> {
    let mut out: Vec<Vec2> = Vec::with_capacity(points.len());
    for p in points {
        if out.last().is_none_or(|q| super::geometry::dist(*q, p) > 1e-6) {
            out.push(p);
        }
    }
    out
}

fn base(name: &str, b: Builder, ego: EgoTask, routes: Vec<Vec<LaneId>>, flow_rate: f64, max_timesteps: u32) -> ScenarioConfig {
    ScenarioConfig {
        name: name.to_string(),
        lanes: b.lanes,
        ego,
        routes: routes.into_iter().map(|lanes| RouteSpec { lanes }).collect(),
        flow_rate,
        flows_per_route: 20,
        vehicles_per_flow: 4,
        max_timesteps,
        dt: SIM_DT,
        driver_params: DriverParamRanges::default(),
        neighbor_radius: 50.0,
        warmup_seconds: 30.0,
        max_vehicle_speed: 15.0,
    }
}

/// Unsignalized T-intersection: the ego leaves a two-lane one-way minor road
/// and turns left across eastbound traffic onto the rightmost westbound lane.
fn left_turn() -> ScenarioConfig {
    let h = LANE_WIDTH / 2.0;
    let mut b = Builder::default();
    let eb_in = b.lane("eb_inner", straight([-100.0, -h], [100.0, -h], 5.0));
    let eb_out = b.lane("eb_outer", straight([-100.0, -3.0 * h], [100.0, -3.0 * h], 5.0));
    b.pair(eb_in, eb_out);
    let wbe_in = b.lane("wb_east_inner", straight([100.0, h], [-12.0, h], 5.0));
    let wbe_out = b.lane("wb_east_outer", straight([100.0, 3.0 * h], [-12.0, 3.0 * h], 5.0));
    b.pair(wbe_in, wbe_out);
    let wbw_in = b.lane("wb_west_inner", straight([-12.0, h], [-100.0, h], 5.0));
    let wbw_out = b.lane("wb_west_outer", straight([-12.0, 3.0 * h], [-100.0, 3.0 * h], 5.0));
    b.pair(wbw_in, wbw_out);
    b.link(wbe_in, wbw_in);
    b.link(wbe_out, wbw_out);
    let minor_l = b.lane("minor_left", straight([-h, -80.0], [-h, -7.5], 5.0));
    let minor_r = b.lane("minor_right", straight([h, -80.0], [h, -7.5], 5.0));
    b.pair(minor_l, minor_r);
    let conn_l = b.lane(
        "turn_left",
        bezier([-h, -7.5], [-h, -1.0], [-6.0, h], [-12.0, h], 16),
    );
    let conn_r = b.lane(
        "turn_right",
        bezier([h, -7.5], [h, 1.5], [-5.0, 3.0 * h], [-12.0, 3.0 * h], 16),
    );
    b.lanes[conn_l].yield_at_end = true;
    b.lanes[conn_r].yield_at_end = true;
    b.link(minor_l, conn_l);
    b.link(minor_r, conn_r);
    b.link(conn_l, wbw_in);
    b.link(conn_r, wbw_out);
    let goal = b.point_at(wbw_out, 38.0);
    let ego = EgoTask {
        start_lanes: vec![minor_l, minor_r],
        start_interval: [10.0, 45.0],
        start_speed: [2.0, 6.0],
        route: vec![minor_r, conn_r, wbw_out],
        goal,
    };
    let routes = vec![vec![eb_in], vec![eb_out], vec![wbe_in, wbw_in], vec![wbe_out, wbw_out]];
    base("left_turn", b, ego, routes, 100.0, 400)
}

/// Two-lane segment fed by entrances A (left lane) and C (right lane) and
/// split into exits D (left) and B (right). The ego merges from A to B.
fn double_merge() -> ScenarioConfig {
    let h = LANE_WIDTH / 2.0;
    let mut b = Builder::default();
    let ent_a = b.lane("entrance_a", bezier([-70.0, 25.0], [-40.0, 25.0], [-30.0, h], [0.0, h], 24));
    let ent_c = b.lane("entrance_c", bezier([-70.0, -25.0], [-40.0, -25.0], [-30.0, -h], [0.0, -h], 24));
    let main_l = b.lane("main_left", straight([0.0, h], [100.0, h], 5.0));
    let main_r = b.lane("main_right", straight([0.0, -h], [100.0, -h], 5.0));
    b.pair(main_l, main_r);
    let exit_d = b.lane("exit_d", bezier([100.0, h], [130.0, h], [140.0, 25.0], [170.0, 25.0], 24));
    let exit_b = b.lane("exit_b", bezier([100.0, -h], [130.0, -h], [140.0, -25.0], [170.0, -25.0], 24));
    b.link(ent_a, main_l);
    b.link(ent_c, main_r);
    b.link(main_l, exit_d);
    b.link(main_r, exit_b);
    let goal = b.point_at(exit_b, 40.0);
    let ego = EgoTask {
        start_lanes: vec![ent_a],
        start_interval: [5.0, 30.0],
        start_speed: [2.0, 6.0],
        route: vec![ent_a, main_l, main_r, exit_b],
        goal,
    };
    let routes = vec![
        vec![ent_a, main_l, exit_d],
        vec![ent_a, main_l, main_r, exit_b],
        vec![ent_c, main_r, exit_b],
        vec![ent_c, main_r, main_l, exit_d],
    ];
    base("double_merge", b, ego, routes, 200.0, 400)
}

/// Polygonal two-lane counter-clockwise roundabout with four arms
/// (A south, B east, C north, D west). The ego enters at A and leaves
/// `exit_offset` arms later.
fn roundabout(exit_offset: usize, max_timesteps: u32, name: &str) -> ScenarioConfig {
    let h = LANE_WIDTH / 2.0;
    let (r_out, r_in) = (24.0, 24.0 - LANE_WIDTH);
    let delta = 0.3;
    let arms: Vec<f64> = (0..4).map(|k| -FRAC_PI_2 + k as f64 * FRAC_PI_2).collect();
    let names = ["a", "b", "c", "d"];
    let mut b = Builder::default();
    let c0 = [0.0, 0.0];
    // ring segments: gate_k spans the arm k mouth, run_k joins arm k to arm k+1
    let mut gate = [[0usize; 2]; 4];
    let mut run = [[0usize; 2]; 4];
    for k in 0..4 {
        let phi = arms[k];
        let next = phi + FRAC_PI_2;
        for (li, r) in [r_in, r_out].into_iter().enumerate() {
            let tag = if li == 0 { "inner" } else { "outer" };
            gate[k][li] = b.lane(&format!("ring_gate_{}_{tag}", names[k]), arc(c0, r, phi - delta, phi + delta, 4));
            run[k][li] = b.lane(&format!("ring_run_{}_{tag}", names[k]), arc(c0, r, phi + delta, next - delta, 10));
        }
        b.pair(gate[k][0], gate[k][1]);
        b.pair(run[k][0], run[k][1]);
    }
    for k in 0..4 {
        for li in 0..2 {
            b.link(gate[k][li], run[k][li]);
            b.link(run[k][li], gate[(k + 1) % 4][li]);
        }
    }
    let mut entry = [0usize; 4];
    let mut exit = [0usize; 4];
    for k in 0..4 {
        let phi = arms[k];
        let u = [phi.cos(), phi.sin()];
        let t = [-phi.sin(), phi.cos()];
        let at = |radius: f64, off: f64| [radius * u[0] + off * t[0], radius * u[1] + off * t[1]];
        // incoming lane keeps right: offset +h along the ring tangent
        let ring_in = [r_out * (phi + delta).cos(), r_out * (phi + delta).sin()];
        let tan_in = [-(phi + delta).sin(), (phi + delta).cos()];
        let mut pts = straight(at(85.0, h), at(r_out + 10.0, h), 5.0);
        pts.extend(bezier(
            at(r_out + 10.0, h),
            at(r_out + 5.0, h),
            [ring_in[0] - 5.0 * tan_in[0], ring_in[1] - 5.0 * tan_in[1]],
            ring_in,
            10,
        ));
        entry[k] = b.lane(&format!("entry_{}", names[k]), pts);
        b.lanes[entry[k]].yield_at_end = true;
        let ring_out = [r_out * (phi - delta).cos(), r_out * (phi - delta).sin()];
        let tan_out = [-(phi - delta).sin(), (phi - delta).cos()];
        let mut pts = bezier(
            ring_out,
            [ring_out[0] + 5.0 * tan_out[0], ring_out[1] + 5.0 * tan_out[1]],
            at(r_out + 5.0, -h),
            at(r_out + 10.0, -h),
            10,
        );
        pts.extend(straight(at(r_out + 10.0, -h), at(75.0, -h), 5.0));
        exit[k] = b.lane(&format!("exit_{}", names[k]), pts);
    }
    for k in 0..4 {
        b.link(entry[k], run[k][1]);
        b.link(run[(k + 3) % 4][1], exit[k]);
    }
    // entry k -> outer ring -> exit j
    let route = |from: usize, to: usize| {
        let mut lanes = vec![entry[from], run[from][1]];
        let mut k = from;
        while (k + 1) % 4 != to {
            k = (k + 1) % 4;
            lanes.push(gate[k][1]);
            lanes.push(run[k][1]);
        }
        lanes.push(exit[to]);
        lanes
    };
    let mut routes = Vec::new();
    for from in 0..4 {
        for off in 1..4 {
            routes.push(route(from, (from + off) % 4));
        }
    }
    let target = exit_offset % 4;
    let ego_route = route(0, target);
    let goal = b.point_at(exit[target], 25.0);
    let ego = EgoTask {
        start_lanes: vec![entry[0]],
        start_interval: [5.0, 30.0],
        start_speed: [2.0, 6.0],
        route: ego_route,
        goal,
    };
    let _ = PI;
    base(name, b, ego, routes, 100.0, max_timesteps)
}
