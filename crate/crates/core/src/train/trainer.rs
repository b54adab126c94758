use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, Gradients, Graph, Mat, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::replay::{FutureQueue, ReplayBuffer, ReplaySnapshot, Step, Transition};
use crate::sac::{normal_noise, polyak_update, Mode};
use crate::scene::{build_state, sample_rotation, HistoryBuffer, SceneConfig, SceneState};
use crate::sim::{Outcome, SimObservation, Simulator};

use super::agent::{Agent, Checkpoint, SLT_GROUPS};
use super::config::{Ablation, TrainConfig};

const SNAPSHOT_VERSION: u32 = 1;

/// Simulator seed of episode `k` under base seed `base`.
pub fn episode_seed(base: u64, k: u64) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(k)
}

/// Seed offset separating evaluation episodes from training ones.
pub const EVAL_SEED_OFFSET: u64 = 1_000_000;

/// One metrics log record.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub updates: u64,
    pub episodes: u64,
    pub seed: u64,
    pub ablation: Ablation,
    /// Mean return over the last `success_window` episodes.
    pub episodic_return: Option<f64>,
    /// Goal rate over the last `success_window` episodes.
    pub train_success_rate: f64,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub alpha_loss: Option<f64>,
    pub slt_loss: Option<f64>,
    pub alpha: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct LossSums {
    count: u64,
    critic: f64,
    actor: f64,
    alpha: f64,
    slt: f64,
}

impl LossSums {
    fn mean(&self, v: f64) -> Option<f64> {
        (self.count > 0).then(|| v / self.count as f64)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Progress {
    step: u64,
    updates: u64,
    episode: u64,
    episode_return: f64,
    /// `(goal reached, return)` of recent finished episodes.
    recent: VecDeque<(bool, f64)>,
    losses: LossSums,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Optimizers {
    critic: Adam,
    actor: Adam,
    alpha: Adam,
    slt: Option<Adam>,
}

/// Losses of one update step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateLosses {
    pub critic: f64,
    pub actor: f64,
    pub alpha: f64,
    pub slt: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TrainerSnapshot {
    version: u32,
    cfg: TrainConfig,
    agent: Agent,
    ps: ParamStore,
    target: ParamStore,
    opts: Optimizers,
    sim: Simulator,
    history: HistoryBuffer,
    rng: ChaCha8Rng,
    replay: ReplaySnapshot,
    current: SceneState,
    progress: Progress,
}

pub struct Trainer {
    cfg: TrainConfig,
    scene: SceneConfig,
    agent: Agent,
    ps: ParamStore,
    target: ParamStore,
    target_ids: Vec<ParamId>,
    opts: Optimizers,
    sim: Simulator,
    history: HistoryBuffer,
    rng: ChaCha8Rng,
    buffer: ReplayBuffer,
    queue: FutureQueue,
    current: Arc<SceneState>,
    progress: Progress,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let agent = Agent::build(&cfg, &mut ps, cfg.seed)?;
        let target = ps.clone();
        let lr = cfg.learning_rate;
        let encoder = ps.group("encoder");
        let critic_ids: Vec<ParamId> = encoder
            .iter()
            .copied()
            .chain(ps.group("critic1"))
            .chain(ps.group("critic2"))
            .collect();
        let opts = Optimizers {
            critic: Adam::new(&ps, critic_ids, lr),
            actor: Adam::new(&ps, ps.group("actor"), lr),
            alpha: Adam::new(&ps, ps.group("alpha"), lr),
            slt: agent.slt.as_ref().map(|_| {
                let ids = SLT_GROUPS.iter().flat_map(|g| ps.group(g)).chain(encoder.iter().copied()).collect();
                Adam::new(&ps, ids, lr)
            }),
        };
        let mut sim = Simulator::new(cfg.scenario_config()?)?;
        sim.route_count = cfg.routes;
        sim.route_len = cfg.route_len;
        let scene = cfg.scene();
        let mut history = HistoryBuffer::new(cfg.history);
        let obs = sim.reset(episode_seed(cfg.seed, 0));
        history.update(&obs);
        let current = Arc::new(build_state(&scene, &history, &obs));
        Ok(Self {
            target_ids: agent.target_ids(&ps),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15)),
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            queue: FutureQueue::new(cfg.horizon),
            progress: Progress {
                step: 0,
                updates: 0,
                episode: 0,
                episode_return: 0.0,
                recent: VecDeque::new(),
                losses: LossSums::default(),
            },
            cfg,
            scene,
            agent,
            ps,
            target,
            opts,
            sim,
            history,
            current,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    pub fn target_params(&self) -> &ParamStore {
        &self.target
    }

    pub fn steps(&self) -> u64 {
        self.progress.step
    }

    pub fn updates(&self) -> u64 {
        self.progress.updates
    }

    pub fn episodes(&self) -> u64 {
        self.progress.episode
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn is_finished(&self) -> bool {
        self.progress.step >= self.cfg.total_steps
    }

    /// Goal rate over the recent episode window.
    pub fn success_rate(&self) -> f64 {
        let r = &self.progress.recent;
        if r.is_empty() {
            0.0
        } else {
            r.iter().filter(|(s, _)| *s).count() as f64 / r.len() as f64
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.cfg, &self.agent, &self.ps, &self.target, self.progress.step)
    }

    /// One environment step, followed by one update once warm-up is over.
    /// Returns a metrics row on logging steps.
    pub fn step(&mut self) -> Result<Option<MetricsRow>> {
        let raw = if self.progress.step < self.cfg.warmup_steps {
            [self.rng.random_range(-1.0..=1.0), self.rng.random_range(-1.0..=1.0)]
        } else {
            let h = self.agent.encode(&self.ps, &[&*self.current]);
            self.agent.sac.sample_action(&self.ps, &h, Mode::Train, &mut self.rng).0[0]
        };
        let action = self.agent.sac.to_env(raw);
        let (obs, reward, done, _) = self.sim.step(&action)?;
        self.history.update(&obs);
        let next = Arc::new(build_state(&self.scene, &self.history, &obs));
        let step = Step {
            state: self.current.clone(),
            action: raw,
            reward,
            next_state: next.clone(),
            done,
        };
        self.buffer.extend(self.queue.push_step(step));
        self.progress.episode_return += reward;
        self.progress.step += 1;
        if done {
            self.end_episode();
        } else {
            self.current = next;
        }
        if self.progress.step > self.cfg.warmup_steps && self.buffer.len() >= self.cfg.batch_size {
            let l = self.update()?;
            let acc = &mut self.progress.losses;
            acc.count += 1;
            acc.critic += l.critic;
            acc.actor += l.actor;
            acc.alpha += l.alpha;
            acc.slt += l.slt.unwrap_or(0.0);
        }
        if self.progress.step.is_multiple_of(self.cfg.log_interval) {
            let row = self.metrics_row();
            self.progress.losses = LossSums::default();
            return Ok(Some(row));
        }
        Ok(None)
    }

    /// Steps until `total_steps`, handing each metrics row to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&MetricsRow) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            if let Some(row) = self.step()? {
                sink(&row)?;
            }
        }
        Ok(())
    }

    fn end_episode(&mut self) {
        self.buffer.extend(self.queue.flush_episode());
        let goal = self.sim.outcome() == Outcome::Goal;
        self.progress.recent.push_back((goal, self.progress.episode_return));
        while self.progress.recent.len() > self.cfg.success_window {
            self.progress.recent.pop_front();
        }
        self.progress.episode += 1;
        self.progress.episode_return = 0.0;
        let obs: SimObservation = self.sim.reset(episode_seed(self.cfg.seed, self.progress.episode));
        self.history.clear();
        self.history.update(&obs);
        self.current = Arc::new(build_state(&self.scene, &self.history, &obs));
    }

    fn metrics_row(&self) -> MetricsRow {
        let l = &self.progress.losses;
        let r = &self.progress.recent;
        MetricsRow {
            step: self.progress.step,
            updates: self.progress.updates,
            episodes: self.progress.episode,
            seed: self.cfg.seed,
            ablation: self.cfg.ablation,
            episodic_return: (!r.is_empty()).then(|| r.iter().map(|x| x.1).sum::<f64>() / r.len() as f64),
            train_success_rate: self.success_rate(),
            critic_loss: l.mean(l.critic),
            actor_loss: l.mean(l.actor),
            alpha_loss: l.mean(l.alpha),
            slt_loss: if self.agent.slt.is_some() { l.mean(l.slt) } else { None },
            alpha: self.agent.sac.alpha(&self.ps),
        }
    }

    /// One gradient step on every objective from a single sampled batch.
    pub fn update(&mut self) -> Result<UpdateLosses> {
        let b = self.cfg.batch_size;
        let tf = self.cfg.horizon;
        let batch: Vec<Transition> = self.buffer.sample(b, &mut self.rng)?.into_iter().cloned().collect();
        let ids: Vec<u64> = batch.iter().map(|t| t.id).collect();
        let with_slt = self.agent.slt.is_some();
        let per = if with_slt { tf + 1 } else { 1 };

        // one rotation per transition, shared by its whole window
        let mut views: Vec<SceneState> = Vec::with_capacity(b * per);
        let mut next_views: Vec<SceneState> = Vec::with_capacity(b);
        for t in &batch {
            let theta = if self.cfg.augment { sample_rotation(&mut self.rng) } else { 0.0 };
            for k in 0..per {
                views.push(t.window.states[k].rotated(theta));
            }
            next_views.push(t.next_state.rotated(theta));
        }
        let xi_next = normal_noise(b, &mut self.rng);
        let xi_pi = normal_noise(b, &mut self.rng);

        let refs: Vec<&SceneState> = views.iter().collect();
        let next_refs: Vec<&SceneState> = next_views.iter().collect();
        let h_next = self.agent.encode(&self.ps, &next_refs);
        let h_next_target = self.agent.encode(&self.target, &next_refs);
        let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        let dones: Vec<bool> = batch.iter().map(|t| t.done).collect();
        let sac = &self.agent.sac;
        let y = sac.td_target(&self.ps, &self.target, &h_next, &h_next_target, &rewards, &dones, &xi_next)?;

        let mut g = Graph::new();
        let h_all = self.agent.encoder.encode(&mut g, &self.ps, &refs);
        let rows = |k: usize| (0..b).map(|i| i * per + k).collect::<Vec<_>>();
        let h_t = if per == 1 { h_all } else { g.gather_rows(h_all, &rows(0)) };
        let actions = Array2::from_shape_fn((b, 2), |(i, c)| batch[i].action[c]);
        let lc = sac.critic_loss(&mut g, &self.ps, h_t, &actions, &y)?;
        let (la, logp) = sac.actor_loss(&mut g, &self.ps, h_t, &xi_pi)?;
        let logp: Mat = g.value(logp).clone();
        let lal = sac.alpha_loss(&mut g, &self.ps, &logp);
        let ls = match &self.agent.slt {
            Some(slt) => {
                let input_rows: Vec<usize> = (0..b).flat_map(|i| (0..tf).map(move |k| i * per + k)).collect();
                let target_rows: Vec<usize> = input_rows.iter().map(|r| r + 1).collect();
                let hi = g.gather_rows(h_all, &input_rows);
                let ht = g.gather_rows(h_all, &target_rows);
                let acts = Array2::from_shape_fn((b * tf, 2), |(r, c)| batch[r / tf].window.actions[r % tf][c]);
                let valid: Vec<bool> = (0..b * tf)
                    .map(|r| {
                        let w = &batch[r / tf].window;
                        w.state_valid[r % tf + 1] && w.action_valid[r % tf]
                    })
                    .collect();
                Some(slt.loss(&mut g, &self.ps, hi, ht, &acts, &valid, b)?)
            }
            None => None,
        };

        let losses = UpdateLosses {
            critic: g.scalar(lc),
            actor: g.scalar(la),
            alpha: g.scalar(lal),
            slt: ls.map(|l| g.scalar(l)),
        };
        let finite = [Some(losses.critic), Some(losses.actor), Some(losses.alpha), losses.slt]
            .into_iter()
            .flatten()
            .all(f64::is_finite);
        if !finite {
            return Err(self.non_finite(&losses, &ids));
        }
        let gc = g.backward(lc);
        let ga = g.backward(la);
        let gal = g.backward(lal);
        let gs = ls.map(|l| g.backward(l));
        let grads_finite = |gr: &Gradients| gr.is_finite();
        if !(grads_finite(&gc) && grads_finite(&ga) && grads_finite(&gal) && gs.as_ref().is_none_or(grads_finite)) {
            return Err(self.non_finite(&losses, &ids));
        }
        drop(g);

        self.opts.critic.step(&mut self.ps, &gc);
        polyak_update(&self.ps, &mut self.target, &self.target_ids, self.cfg.polyak);
        self.opts.actor.step(&mut self.ps, &ga);
        self.opts.alpha.step(&mut self.ps, &gal);
        if let (Some(opt), Some(gs)) = (self.opts.slt.as_mut(), gs.as_ref()) {
            opt.step(&mut self.ps, gs);
        }
        self.progress.updates += 1;
        Ok(losses)
    }

    fn non_finite(&self, l: &UpdateLosses, ids: &[u64]) -> Error {
        Error::NonFinite(format!(
            "update {} at step {}: critic {} actor {} alpha {} slt {:?}; batch transition ids {:?}",
            self.progress.updates, self.progress.step, l.critic, l.actor, l.alpha, l.slt, ids
        ))
    }

    pub fn snapshot_bytes(&self) -> Result<Vec<u8>> {
        let snap = TrainerSnapshot {
            version: SNAPSHOT_VERSION,
            cfg: self.cfg.clone(),
            agent: self.agent.clone(),
            ps: self.ps.clone(),
            target: self.target.clone(),
            opts: self.opts.clone(),
            sim: self.sim.clone(),
            history: self.history.clone(),
            rng: self.rng.clone(),
            replay: ReplaySnapshot::capture(&self.buffer, &self.queue),
            current: (*self.current).clone(),
            progress: self.progress.clone(),
        };
        bincode::serialize(&snap).map_err(|e| Error::Snapshot(e.to_string()))
    }

    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<Self> {
        let snap: TrainerSnapshot = bincode::deserialize(bytes).map_err(|e| Error::Snapshot(e.to_string()))?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!("unsupported snapshot version {}", snap.version)));
        }
        let (buffer, queue) = snap.replay.restore()?;
        Ok(Self {
            scene: snap.cfg.scene(),
            target_ids: snap.agent.target_ids(&snap.ps),
            cfg: snap.cfg,
            agent: snap.agent,
            ps: snap.ps,
            target: snap.target,
            opts: snap.opts,
            sim: snap.sim,
            history: snap.history,
            rng: snap.rng,
            buffer,
            queue,
            current: Arc::new(snap.current),
            progress: snap.progress,
        })
    }

    pub fn save_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.snapshot_bytes()?)?;
        Ok(())
    }

    pub fn load_snapshot(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_snapshot_bytes(&std::fs::read(path)?)
    }
}

/// Appends metrics rows as JSON lines.
pub fn write_metrics<W: Write>(out: &mut W, row: &MetricsRow) -> Result<()> {
    serde_json::to_writer(&mut *out, row)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
