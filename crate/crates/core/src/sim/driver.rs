//! Neighbor driver model: Intelligent Driver Model car following with
//! stochastic imperfection, impatience and cooperation modifiers.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct DriverParams {
    pub desired_speed: f64,
    pub min_gap: f64,
    pub imperfection: f64,
    pub impatience: f64,
    pub cooperative: f64,
}

/// Sampling ranges for [`DriverParams`]. `imperfection` is drawn as
/// `Normal(U[lo, hi], std)` clipped to `[0, 1]`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DriverParamRanges {
    pub desired_speed: [f64; 2],
    pub min_gap: [f64; 2],
    pub imperfection_mean: [f64; 2],
    pub imperfection_std: f64,
    pub impatience: [f64; 2],
    pub cooperative: [f64; 2],
}

impl Default for DriverParamRanges {
    fn default() -> Self {
        Self {
            desired_speed: [7.0, 11.0],
            min_gap: [1.5, 3.0],
            imperfection_mean: [0.3, 0.7],
            imperfection_std: 0.1,
            impatience: [0.0, 1.0],
            cooperative: [0.0, 1.0],
        }
    }
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

impl DriverParamRanges {
    pub fn validate(&self) -> Result<(), String> {
        let ordered = |r: [f64; 2], name: &str| {
            if r[0] <= r[1] && r[0].is_finite() && r[1].is_finite() {
                Ok(())
            } else {
                Err(format!("driver range {name} is not ordered"))
            }
        };
        ordered(self.desired_speed, "desired_speed")?;
        ordered(self.min_gap, "min_gap")?;
        ordered(self.imperfection_mean, "imperfection_mean")?;
        ordered(self.impatience, "impatience")?;
        ordered(self.cooperative, "cooperative")?;
        if self.desired_speed[0] <= 0.0 || self.min_gap[0] < 0.0 || self.imperfection_std < 0.0 {
            return Err("driver ranges must be positive".into());
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DriverParams {
        let mean = uniform(rng, self.imperfection_mean);
        let imperfection = if self.imperfection_std > 0.0 {
            Normal::new(mean, self.imperfection_std)
                .expect("valid normal")
                .sample(rng)
        } else {
            mean
        };
        DriverParams {
            desired_speed: uniform(rng, self.desired_speed),
            min_gap: uniform(rng, self.min_gap),
            imperfection: imperfection.clamp(0.0, 1.0),
            impatience: uniform(rng, self.impatience).clamp(0.0, 1.0),
            cooperative: uniform(rng, self.cooperative).clamp(0.0, 1.0),
        }
    }
}

/// IDM constants shared by all neighbors.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct IdmConstants {
    pub max_accel: f64,
    pub comfort_decel: f64,
    pub time_headway: f64,
    pub exponent: f64,
    pub max_decel: f64,
    /// Acceleration noise (m/s^2) at imperfection 1.
    pub noise_scale: f64,
}

impl Default for IdmConstants {
    fn default() -> Self {
        Self {
            max_accel: 1.5,
            comfort_decel: 2.0,
            time_headway: 1.2,
            exponent: 4.0,
            max_decel: 9.0,
            noise_scale: 0.6,
        }
    }
}

/// A vehicle ahead on the path: bumper-to-bumper gap and its speed along the path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Leader {
    pub gap: f64,
    pub speed: f64,
}

/// IDM acceleration, clipped to `[-max_decel, max_accel]`.
pub fn idm_acceleration(speed: f64, params: &DriverParams, leader: Option<Leader>, c: &IdmConstants) -> f64 {
    let v0 = params.desired_speed.max(0.1);
    let free = 1.0 - (speed / v0).powf(c.exponent);
    let interaction = match leader {
        Some(l) => {
            let dv = speed - l.speed;
            let s_star = params.min_gap
                + (speed * c.time_headway + speed * dv / (2.0 * (c.max_accel * c.comfort_decel).sqrt())).max(0.0);
            let gap = l.gap.max(0.01);
            (s_star / gap).powi(2)
        }
        None => 0.0,
    };
    (c.max_accel * (free - interaction)).clamp(-c.max_decel, c.max_accel)
}

/// Longitudinal update for one step: returns `(new_speed, distance_travelled)`.
///
/// `noise` is a standard normal draw; it is scaled by the driver's
/// imperfection so an imperfection of zero is noise free. Speeds never go
/// negative; a vehicle braking to a halt mid-step stops where it halts.
/// Travel is capped so the gap to the leader never drops below `min_gap`;
/// a capped vehicle takes the leader's speed.
pub fn driver_model_step(
    speed: f64,
    params: &DriverParams,
    leader: Option<Leader>,
    noise: f64,
    dt: f64,
    c: &IdmConstants,
) -> (f64, f64) {
    let mut a = idm_acceleration(speed, params, leader, c);
    a += params.imperfection * c.noise_scale * noise;
    let v_new = speed + a * dt;
    let (v, ds) = if v_new < 0.0 {
        // stop within the step
        let t_stop = if a < 0.0 { (-speed / a).min(dt) } else { 0.0 };
        (0.0, (speed * t_stop + 0.5 * a * t_stop * t_stop).max(0.0))
    } else {
        (v_new, (speed * dt + 0.5 * a * dt * dt).max(0.0))
    };
    match leader {
        Some(l) if ds > l.gap + l.speed.max(0.0) * dt - params.min_gap => {
            let room = (l.gap + l.speed.max(0.0) * dt - params.min_gap).max(0.0);
            (v.min(l.speed.max(0.0)), room.min(ds))
        }
        _ => (v, ds),
    }
}
