use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub type Vec2 = [f64; 2];

#[inline]
pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn dist(a: Vec2, b: Vec2) -> f64 {
    let d = sub(a, b);
    d[0].hypot(d[1])
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % (2.0 * PI);
    if x <= -PI {
        x += 2.0 * PI;
    } else if x > PI {
        x -= 2.0 * PI;
    }
    x
}

/// Closest point of a polyline to a query point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// Arc length of the closest point.
    pub s: f64,
    /// Signed offset, positive to the left of the travel direction.
    pub lateral: f64,
    pub distance: f64,
    pub heading: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(try_from = "Vec<Vec2>", into = "Vec<Vec2>")]
pub struct Polyline {
    points: Vec<Vec2>,
    cum: Vec<f64>,
}

impl TryFrom<Vec<Vec2>> for Polyline {
    type Error = String;

    fn try_from(points: Vec<Vec2>) -> Result<Self, String> {
        Polyline::new(points)
    }
}

impl From<Polyline> for Vec<Vec2> {
    fn from(p: Polyline) -> Self {
        p.points
    }
}

impl Polyline {
    /// Fails unless there are at least two points and arc length strictly
    /// increases between consecutive points.
    pub fn new(points: Vec<Vec2>) -> Result<Self, String> {
        if points.len() < 2 {
            return Err("polyline needs at least two points".into());
        }
        let mut cum = Vec::with_capacity(points.len());
        cum.push(0.0);
        for w in points.windows(2) {
            let d = dist(w[0], w[1]);
            if !(d > 1e-9) || !d.is_finite() {
                return Err(format!("repeated or invalid polyline point {:?}", w[1]));
            }
            cum.push(cum.last().unwrap() + d);
        }
        Ok(Self { points, cum })
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn segment_at(&self, s: f64) -> usize {
        let n = self.points.len() - 1;
        match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        }
    }

    /// Position and heading at arc length `s`, clamped to the polyline.
    pub fn pose_at(&self, s: f64) -> (Vec2, f64) {
        let s = s.clamp(0.0, self.length());
        let i = self.segment_at(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let seg = self.cum[i + 1] - self.cum[i];
        let t = ((s - self.cum[i]) / seg).clamp(0.0, 1.0);
        let heading = (b[1] - a[1]).atan2(b[0] - a[0]);
        ([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])], heading)
    }

    /// Position offset laterally (left positive) from the centerline.
    pub fn offset_pose(&self, s: f64, lateral: f64) -> (Vec2, f64) {
        let (p, h) = self.pose_at(s);
        ([p[0] - lateral * h.sin(), p[1] + lateral * h.cos()], h)
    }

    pub fn project(&self, p: Vec2) -> Projection {
        let mut best = Projection {
            s: 0.0,
            lateral: 0.0,
            distance: f64::INFINITY,
            heading: 0.0,
        };
        for i in 0..self.points.len() - 1 {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let ab = sub(b, a);
            let ap = sub(p, a);
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t = ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0);
            let c = [a[0] + t * ab[0], a[1] + t * ab[1]];
            let d = dist(p, c);
            if d < best.distance {
                let cross = ab[0] * ap[1] - ab[1] * ap[0];
                let seg = len2.sqrt();
                best = Projection {
                    s: self.cum[i] + t * seg,
                    lateral: cross / seg,
                    distance: d,
                    heading: ab[1].atan2(ab[0]),
                };
            }
        }
        best
    }
}

/// Oriented rectangle footprint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedRect {
    pub center: Vec2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedRect {
    pub fn corners(&self) -> [Vec2; 4] {
        let (c, s) = (self.heading.cos(), self.heading.sin());
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let mut out = [[0.0; 2]; 4];
        for (k, (dl, dw)) in [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].into_iter().enumerate() {
            out[k] = [self.center[0] + dl * c - dw * s, self.center[1] + dl * s + dw * c];
        }
        out
    }

    /// Separating-axis overlap test; touching edges do not count.
    pub fn overlaps(&self, other: &OrientedRect) -> bool {
        if dist(self.center, other.center)
            > 0.5 * (self.length.hypot(self.width) + other.length.hypot(other.width))
        {
            return false;
        }
        let ca = self.corners();
        let cb = other.corners();
        for h in [self.heading, other.heading] {
            for axis in [[h.cos(), h.sin()], [-h.sin(), h.cos()]] {
                let proj = |pts: &[Vec2; 4]| {
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for p in pts {
                        let v = p[0] * axis[0] + p[1] * axis[1];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                    (lo, hi)
                };
                let (a0, a1) = proj(&ca);
                let (b0, b1) = proj(&cb);
                if a1 <= b0 || b1 <= a0 {
                    return false;
                }
            }
        }
        true
    }
}

/// Straight polyline sampled every `step` meters.
pub fn straight(a: Vec2, b: Vec2, step: f64) -> Vec<Vec2> {
    let n = (dist(a, b) / step).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
        })
        .collect()
}

/// Cubic Bezier sampled at `n + 1` points.
pub fn bezier(p0: Vec2, p1: Vec2, p2: Vec2, p3: Vec2, n: usize) -> Vec<Vec2> {
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            let u = 1.0 - t;
            let w = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
            [
                w[0] * p0[0] + w[1] * p1[0] + w[2] * p2[0] + w[3] * p3[0],
                w[0] * p0[1] + w[1] * p1[1] + w[2] * p2[1] + w[3] * p3[1],
            ]
        })
        .collect()
}

/// Counter-clockwise polygonal arc.
pub fn arc(center: Vec2, radius: f64, from: f64, to: f64, n: usize) -> Vec<Vec2> {
    (0..=n)
        .map(|i| {
            let a = from + (to - from) * i as f64 / n as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_repeated_points() {
        assert!(Polyline::new(vec![[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]]).is_err());
        assert!(Polyline::new(vec![[0.0, 0.0]]).is_err());
    }

    #[test]
    fn pose_and_projection_on_straight_line() {
        let p = Polyline::new(straight([0.0, 0.0], [10.0, 0.0], 1.0)).unwrap();
        assert_eq!(p.length(), 10.0);
        let (pt, h) = p.pose_at(3.5);
        assert!((pt[0] - 3.5).abs() < 1e-12 && pt[1].abs() < 1e-12 && h == 0.0);
        let pr = p.project([4.0, 2.0]);
        assert!((pr.s - 4.0).abs() < 1e-12);
        assert!((pr.lateral - 2.0).abs() < 1e-12);
        let (q, _) = p.offset_pose(2.0, -1.5);
        assert!((q[1] + 1.5).abs() < 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rect_overlap_cases() {
        let a = OrientedRect { center: [0.0, 0.0], heading: 0.0, length: 4.5, width: 1.8 };
        let b = OrientedRect { center: [4.0, 0.0], heading: 0.0, length: 4.5, width: 1.8 };
        let c = OrientedRect { center: [5.0, 0.0], heading: 0.0, length: 4.5, width: 1.8 };
        let d = OrientedRect { center: [2.0, 2.0], heading: 1.2, length: 4.5, width: 1.8 };
        assert!(a.overlaps(&b));
        assert!(!a.overlaps(&c));
        assert!(a.overlaps(&d));
    }

    proptest! {
        #[test]
        fn collision_is_symmetric(
            x in -8.0..8.0f64, y in -8.0..8.0f64, h1 in -3.2..3.2f64, h2 in -3.2..3.2f64,
        ) {
            let a = OrientedRect { center: [0.0, 0.0], heading: h1, length: 4.5, width: 1.8 };
            let b = OrientedRect { center: [x, y], heading: h2, length: 4.5, width: 1.8 };
            prop_assert_eq!(a.overlaps(&b), b.overlaps(&a));
        }

        #[test]
        fn projection_recovers_offset_pose(s in 0.0..30.0f64, lat in -1.7..1.7f64) {
            let pts = bezier([0.0, 0.0], [10.0, 0.0], [20.0, 5.0], [30.0, 15.0], 40);
            let p = Polyline::new(pts).unwrap();
            let s = s.min(p.length() - 0.5).max(0.5);
            let (q, _) = p.offset_pose(s, lat);
            let pr = p.project(q);
            prop_assert!((pr.lateral.abs() - lat.abs()).abs() < 0.05);
        }
    }
}
