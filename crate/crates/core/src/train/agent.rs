use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, ParamId, ParamStore};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::mst::{AttentionTrace, SceneBatch};
use crate::sac::{Mode, Sac};
use crate::scene::SceneState;
use crate::slt::Slt;

use super::config::TrainConfig;

pub const CHECKPOINT_FORMAT: &str = "scene-rep-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Groups needed to act: everything else is training state.
pub const INFERENCE_GROUPS: [&str; 2] = ["encoder", "actor"];
pub const SLT_GROUPS: [&str; 3] = ["transition", "projector", "predictor"];

/// Network modules over one shared parameter store.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Agent {
    pub encoder: Encoder,
    pub sac: Sac,
    pub slt: Option<Slt>,
}

impl Agent {
    /// Builds every module for `cfg`, initializing parameters from `seed`.
    pub fn build(cfg: &TrainConfig, ps: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = match cfg.ablation.variant() {
            Some(v) => Encoder::mst(ps, cfg.encoder, v, &mut rng),
            None => Encoder::lstm(ps, &cfg.scene(), cfg.encoder.width, &mut rng),
        };
        let sac = Sac::new(ps, cfg.sac(), &mut rng);
        let slt = cfg.ablation.uses_slt().then(|| Slt::new(ps, cfg.slt(), &mut rng));
        Ok(Self { encoder, sac, slt })
    }

    pub fn group_names(&self) -> Vec<&'static str> {
        let mut g = vec!["encoder", "actor", "critic1", "critic2", "alpha"];
        if self.slt.is_some() {
            g.extend(SLT_GROUPS);
        }
        g
    }

    /// Parameters that receive Polyak writes in the target store.
    pub fn target_ids(&self, ps: &ParamStore) -> Vec<ParamId> {
        ["encoder", "critic1", "critic2"].iter().flat_map(|g| ps.group(g)).collect()
    }

    /// `[B, D]` latents without gradient tracking.
    pub fn encode(&self, ps: &ParamStore, states: &[&SceneState]) -> Mat {
        let mut g = Graph::no_grad();
        let h = self.encoder.encode(&mut g, ps, states);
        g.value(h).clone()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    /// Environment steps completed when saved.
    pub step: u64,
    pub groups: BTreeMap<String, BTreeMap<String, Mat>>,
    /// Target encoder and critics.
    pub target_groups: BTreeMap<String, BTreeMap<String, Mat>>,
    pub inference_groups: Vec<String>,
}

impl Checkpoint {
    pub fn capture(cfg: &TrainConfig, agent: &Agent, ps: &ParamStore, target: &ParamStore, step: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            step,
            groups: ps.to_groups(&agent.group_names()),
            target_groups: target.to_groups(&["encoder", "critic1", "critic2"]),
            inference_groups: INFERENCE_GROUPS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Self = serde_json::from_reader(f)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        ck.config.validate()?;
        Ok(ck)
    }

    /// Rebuilds the agent and loads every stored group. Inference groups
    /// must be complete; training-only groups may be absent.
    pub fn restore(&self) -> Result<(Agent, ParamStore, ParamStore)> {
        let mut ps = ParamStore::new();
        let agent = Agent::build(&self.config, &mut ps, self.config.seed)?;
        let flat: BTreeMap<String, Mat> = self.groups.values().flat_map(|m| m.clone()).collect();
        let missing = ps.load_named(&flat).map_err(Error::Checkpoint)?;
        if let Some(m) = missing.iter().find(|n| INFERENCE_GROUPS.contains(&crate::autograd::group_of(n))) {
            return Err(Error::Checkpoint(format!("missing inference parameter {m}")));
        }
        let mut target = ps.clone();
        let flat: BTreeMap<String, Mat> = self.target_groups.values().flat_map(|m| m.clone()).collect();
        target.load_named(&flat).map_err(Error::Checkpoint)?;
        Ok((agent, ps, target))
    }

    pub fn policy(&self) -> Result<Policy> {
        let (agent, ps, _) = self.restore()?;
        Ok(Policy {
            config: self.config.clone(),
            agent,
            ps,
        })
    }
}

/// Deterministic actor for evaluation and analysis.
#[derive(Clone, Debug)]
pub struct Policy {
    pub config: TrainConfig,
    pub agent: Agent,
    pub ps: ParamStore,
}

impl Policy {
    /// Mean action `tanh(mu)`.
    pub fn act(&self, state: &SceneState) -> [f64; 2] {
        let h = self.agent.encode(&self.ps, &[state]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.agent.sac.sample_action(&self.ps, &h, Mode::Eval, &mut rng).0[0]
    }

    /// Mean of the two critics at `(h, a)` rows.
    pub fn q_mean(&self, h: &Mat, a: &Mat) -> Vec<f64> {
        let mut g = Graph::no_grad();
        let hv = g.constant(h.clone());
        let av = g.constant(a.clone());
        let q1 = self.agent.sac.q(&mut g, &self.ps, &self.agent.sac.critic1, hv, av);
        let q2 = self.agent.sac.q(&mut g, &self.ps, &self.agent.sac.critic2, hv, av);
        g.value(q1).iter().zip(g.value(q2).iter()).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    /// Attention weights of every encoder level for one state.
    pub fn attention(&self, state: &SceneState) -> Result<AttentionTrace> {
        let Encoder::Mst(enc) = &self.agent.encoder else {
            return Err(Error::Usage("attention export needs a Transformer encoder".into()));
        };
        let batch = SceneBatch::new(&[state]);
        let mut g = Graph::no_grad();
        let m = g.constant(batch.motion.clone());
        let r = g.constant(batch.routes.clone());
        let out = enc.forward(&mut g, &self.ps, &batch, m, r);
        Ok(enc.trace(&g, &batch, &out))
    }
}
