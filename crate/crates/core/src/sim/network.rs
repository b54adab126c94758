use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::geometry::{Polyline, Vec2};

pub type LaneId = usize;

/// A candidate route waypoint `(x, y, heading)`.
pub type Waypoint = [f64; 3];

pub const LANE_WIDTH: f64 = 3.5;

fn default_width() -> f64 {
    LANE_WIDTH
}

/// Serialized description of one lane.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LaneSpec {
    pub name: String,
    /// Centerline in travel direction.
    pub points: Polyline,
    /// Parallel lane to the left, if any.
    #[serde(default)]
    pub left: Option<LaneId>,
    #[serde(default)]
    pub right: Option<LaneId>,
    #[serde(default)]
    pub successors: Vec<LaneId>,
    /// Traffic on this lane must find a gap before entering its successor.
    #[serde(default)]
    pub yield_at_end: bool,
    #[serde(default = "default_width")]
    pub width: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Lane {
    pub spec: LaneSpec,
    pub predecessors: Vec<LaneId>,
}

impl Lane {
    pub fn length(&self) -> f64 {
        self.spec.points.length()
    }

    pub fn centerline(&self) -> &Polyline {
        &self.spec.points
    }

    /// Neighbor lane for a lane command (-1 = left, +1 = right).
    pub fn side(&self, dir: i8) -> Option<LaneId> {
        match dir {
            d if d < 0 => self.spec.left,
            d if d > 0 => self.spec.right,
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoadNetwork {
    lanes: Vec<Lane>,
}

impl RoadNetwork {
    pub fn new(specs: &[LaneSpec]) -> Result<Self, String> {
        let n = specs.len();
        let check = |id: LaneId, what: &str, from: &str| {
            if id >= n {
                Err(format!("lane {from}: {what} {id} out of range"))
            } else {
                Ok(())
            }
        };
        let mut lanes: Vec<Lane> = specs
            .iter()
            .map(|s| Lane {
                spec: s.clone(),
                predecessors: Vec::new(),
            })
            .collect();
        for (i, s) in specs.iter().enumerate() {
            for &succ in &s.successors {
                check(succ, "successor", &s.name)?;
                lanes[succ].predecessors.push(i);
            }
            if let Some(l) = s.left {
                check(l, "left neighbor", &s.name)?;
                if specs[l].right != Some(i) {
                    return Err(format!("lane {} left neighbor {} is not reciprocal", s.name, specs[l].name));
                }
            }
            if let Some(r) = s.right {
                check(r, "right neighbor", &s.name)?;
                if specs[r].left != Some(i) {
                    return Err(format!("lane {} right neighbor {} is not reciprocal", s.name, specs[r].name));
                }
            }
        }
        Ok(Self { lanes })
    }

    pub fn lane(&self, id: LaneId) -> &Lane {
        &self.lanes[id]
    }

    pub fn len(&self) -> usize {
        self.lanes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }

    pub fn lanes(&self) -> &[Lane] {
        &self.lanes
    }

    /// True when `b` directly follows `a` or is a parallel neighbor of it.
    pub fn connected(&self, a: LaneId, b: LaneId) -> bool {
        let l = &self.lanes[a].spec;
        l.successors.contains(&b) || l.left == Some(b) || l.right == Some(b)
    }

    /// Lanes from which `goal` can be reached by following successors and
    /// changing to parallel lanes.
    pub fn reaches(&self, goal: LaneId) -> Vec<bool> {
        let mut ok = vec![false; self.lanes.len()];
        let mut queue = VecDeque::from([goal]);
        ok[goal] = true;
        while let Some(l) = queue.pop_front() {
            let lane = &self.lanes[l];
            let mut prev: Vec<LaneId> = lane.predecessors.clone();
            prev.extend(lane.spec.left);
            prev.extend(lane.spec.right);
            for p in prev {
                if !ok[p] {
                    ok[p] = true;
                    queue.push_back(p);
                }
            }
        }
        ok
    }

    /// Waypoints every `spacing` meters starting at arc length `s` of `lane`,
    /// continuing onto successors picked by `next`. Stops early at dead ends.
    pub fn walk(
        &self,
        lane: LaneId,
        s: f64,
        count: usize,
        spacing: f64,
        next: &dyn Fn(LaneId) -> Option<LaneId>,
    ) -> Vec<Waypoint> {
        let mut out = Vec::with_capacity(count);
        let mut lane = lane;
        let mut s = s.max(0.0);
        while out.len() < count {
            let len = self.lanes[lane].length();
            if s > len {
                match next(lane) {
                    Some(n) => {
                        s -= len;
                        lane = n;
                        continue;
                    }
                    None => break,
                }
            }
            let (p, h) = self.lanes[lane].centerline().pose_at(s);
            out.push([p[0], p[1], h]);
            s += spacing;
        }
        out
    }

    /// Forward candidate routes for an agent at `(lane, s)`: the current lane
    /// first, then its left and right neighbors, then alternative branches of
    /// the current lane within the horizon. At most `max_routes` are returned.
    pub fn candidate_routes(
        &self,
        lane: LaneId,
        position: Vec2,
        s: f64,
        max_routes: usize,
        count: usize,
        spacing: f64,
        next: &dyn Fn(LaneId) -> Option<LaneId>,
    ) -> Vec<Vec<Waypoint>> {
        let mut routes = Vec::new();
        if max_routes == 0 || lane >= self.lanes.len() {
            return routes;
        }
        routes.push(self.walk(lane, s, count, spacing, next));
        for side in [self.lanes[lane].spec.left, self.lanes[lane].spec.right].into_iter().flatten() {
            if routes.len() >= max_routes {
                break;
            }
            let ss = self.lanes[side].centerline().project(position).s;
            let first = |l: LaneId| self.lanes[l].spec.successors.first().copied();
            let side_next = |l: LaneId| next(l).filter(|n| self.lanes[l].spec.successors.contains(n)).or_else(|| first(l));
            routes.push(self.walk(side, ss, count, spacing, &side_next));
        }
        // branches of the current lane path
        let mut l = lane;
        let mut remaining = count as f64 * spacing - (self.lanes[lane].length() - s);
        while remaining > 0.0 && routes.len() < max_routes {
            let preferred = next(l);
            for &alt in &self.lanes[l].spec.successors {
                if Some(alt) == preferred || routes.len() >= max_routes {
                    continue;
                }
                let head = self.walk(lane, s, count, spacing, &|x| if x == l { Some(alt) } else { next(x) });
                routes.push(head);
            }
            match preferred {
                Some(n) => {
                    remaining -= self.lanes[n].length();
                    l = n;
                }
                None => break,
            }
        }
        routes.retain(|r| !r.is_empty());
        routes
    }
}
