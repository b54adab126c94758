use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mst::{EncoderConfig, MstVariant};
use crate::sac::SacConfig;
use crate::scene::SceneConfig;
use crate::sim::ScenarioConfig;
use crate::slt::SltConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    MstOnly,
    NoEgoRoutes,
    NoRoutes,
    LstmSac,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::MstOnly,
        Ablation::NoEgoRoutes,
        Ablation::NoRoutes,
        Ablation::LstmSac,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::MstOnly => "mst_only",
            Ablation::NoEgoRoutes => "no_ego_routes",
            Ablation::NoRoutes => "no_routes",
            Ablation::LstmSac => "lstm_sac",
        }
    }

    /// Only the full model trains the sequential latent objective; the
    /// route ablations are variants of the plain encoder.
    pub fn uses_slt(self) -> bool {
        self == Ablation::Full
    }

    pub fn variant(self) -> Option<MstVariant> {
        match self {
            Ablation::Full | Ablation::MstOnly => Some(MstVariant::Full),
            Ablation::NoEgoRoutes => Some(MstVariant::NoEgoRoutes),
            Ablation::NoRoutes => Some(MstVariant::NoRoutes),
            Ablation::LstmSac => None,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Preset name or path to a scenario JSON file.
    pub scenario: String,
    pub seed: u64,
    pub ablation: Ablation,
    /// Neighbors `n`.
    pub neighbors: usize,
    pub v_max: f64,
    /// History steps `T_h`.
    pub history: usize,
    /// Route waypoints `T_K`.
    pub route_len: usize,
    /// Future horizon `T_G` (= `T_f`).
    pub horizon: usize,
    /// Candidate routes `N_k`.
    pub routes: usize,
    pub gamma: f64,
    pub polyak: f64,
    pub initial_alpha: f64,
    pub warmup_steps: u64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub learning_rate: f64,
    pub target_entropy: f64,
    pub encoder: EncoderConfig,
    pub head_hidden: usize,
    pub projector_hidden: usize,
    pub projector_dim: usize,
    pub log_interval: u64,
    pub success_window: usize,
    /// Overrides the scenario's per-route flow rate (vehicles/hour).
    pub flow_rate: Option<f64>,
    pub augment: bool,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scenario: "left_turn".into(),
            seed: 0,
            ablation: Ablation::Full,
            neighbors: 5,
            v_max: 10.0,
            history: 10,
            route_len: 10,
            horizon: 3,
            routes: 2,
            gamma: 0.99,
            polyak: 0.005,
            initial_alpha: 1.0,
            warmup_steps: 5000,
            buffer_capacity: 20_000,
            batch_size: 32,
            total_steps: 100_000,
            learning_rate: 1e-4,
            target_entropy: -2.0,
            encoder: EncoderConfig::default(),
            head_hidden: 256,
            projector_hidden: 128,
            projector_dim: 64,
            log_interval: 200,
            success_window: 20,
            flow_rate: None,
            augment: true,
            eval_episodes: 50,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let positive = [
            ("history", self.history),
            ("route_len", self.route_len),
            ("horizon", self.horizon),
            ("routes", self.routes),
            ("buffer_capacity", self.buffer_capacity),
            ("batch_size", self.batch_size),
            ("head_hidden", self.head_hidden),
            ("projector_hidden", self.projector_hidden),
            ("projector_dim", self.projector_dim),
            ("success_window", self.success_window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be positive".into()));
        }
        if self.batch_size > self.buffer_capacity {
            return Err(Error::Config("batch_size exceeds buffer_capacity".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.polyak) {
            return Err(Error::Config("gamma and polyak must lie in [0, 1]".into()));
        }
        if self.initial_alpha <= 0.0 || self.learning_rate <= 0.0 || self.v_max <= 0.0 {
            return Err(Error::Config("initial_alpha, learning_rate and v_max must be positive".into()));
        }
        if let Some(f) = self.flow_rate {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(Error::Config(format!("flow_rate {f} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            neighbors: self.neighbors,
            history: self.history,
            routes: self.routes,
            route_len: self.route_len,
        }
    }

    pub fn sac(&self) -> SacConfig {
        SacConfig {
            width: self.encoder.width,
            hidden: self.head_hidden,
            gamma: self.gamma,
            polyak: self.polyak,
            initial_alpha: self.initial_alpha,
            target_entropy: self.target_entropy,
            v_max: self.v_max,
        }
    }

    pub fn slt(&self) -> SltConfig {
        SltConfig {
            width: self.encoder.width,
            heads: self.encoder.heads,
            mlp_hidden: self.encoder.mlp_hidden,
            horizon: self.horizon,
            proj_hidden: self.projector_hidden,
            proj_dim: self.projector_dim,
        }
    }

    /// The scenario with the flow-rate override applied.
    pub fn scenario_config(&self) -> Result<ScenarioConfig> {
        let mut sc = ScenarioConfig::load(&self.scenario)?;
        if let Some(f) = self.flow_rate {
            sc.flow_rate = f;
        }
        sc.validate()?;
        Ok(sc)
    }
}
