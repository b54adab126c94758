//! Replay buffer and the per-episode future queue that attaches the next
//! `T_f` states and actions to each stored transition.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{window_states, SceneState, Window};

pub type Action = [f64; 2];
pub type FutureWindow = Window<Arc<SceneState>, Action>;

/// One environment step as recorded during rollout. Consecutive steps
/// should share the `Arc` for `next_state` / `state`.
#[derive(Clone, Debug)]
pub struct Step {
    pub state: Arc<SceneState>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Arc<SceneState>,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct Transition {
    /// Sequential id across all emitted transitions.
    pub id: u64,
    pub state: Arc<SceneState>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Arc<SceneState>,
    pub done: bool,
    pub window: FutureWindow,
}

#[derive(Clone, Debug)]
pub struct FutureQueue {
    horizon: usize,
    queue: VecDeque<Step>,
    episode_steps: usize,
    next_id: u64,
}

impl FutureQueue {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            queue: VecDeque::new(),
            episode_steps: 0,
            next_id: 0,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn episode_steps(&self) -> usize {
        self.episode_steps
    }

    /// Queue a step; once more than `T_f` steps wait, the oldest is emitted
    /// with a complete window.
    pub fn push_step(&mut self, step: Step) -> Option<Transition> {
        self.queue.push_back(step);
        self.episode_steps += 1;
        if self.queue.len() > self.horizon {
            Some(self.emit())
        } else {
            None
        }
    }

    /// Emit every queued step with right-padded windows and start a new episode.
    pub fn flush_episode(&mut self) -> Vec<Transition> {
        let mut out = Vec::with_capacity(self.queue.len());
        while !self.queue.is_empty() {
            out.push(self.emit());
        }
        self.episode_steps = 0;
        out
    }

    fn emit(&mut self) -> Transition {
        let mut states: Vec<Arc<SceneState>> = self.queue.iter().take(self.horizon + 1).map(|s| s.state.clone()).collect();
        let actions: Vec<Action> = self.queue.iter().take(self.horizon + 1).map(|s| s.action).collect();
        if states.len() <= self.horizon {
            states.push(self.queue[states.len() - 1].next_state.clone());
        }
        let window = window_states(&states, &actions, 0, self.horizon).expect("queue is non-empty");
        let step = self.queue.pop_front().expect("queue is non-empty");
        let id = self.next_id;
        self.next_id += 1;
        Transition {
            id,
            state: step.state,
            action: step.action,
            reward: step.reward,
            next_state: step.next_state,
            done: step.done,
            window,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn extend(&mut self, ts: impl IntoIterator<Item = Transition>) {
        for t in ts {
            self.push(t);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Uniform sample without replacement.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Result<Vec<&Transition>> {
        if batch > self.items.len() {
            return Err(Error::Usage(format!("cannot sample {batch} from {} transitions", self.items.len())));
        }
        Ok(rand::seq::index::sample(rng, self.items.len(), batch)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StoredStep {
    state: u32,
    action: Action,
    reward: f64,
    next_state: u32,
    done: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StoredTransition {
    id: u64,
    step: StoredStep,
    window: Window<u32, Action>,
}

/// Buffer and queue contents with scene states stored once each.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplaySnapshot {
    capacity: usize,
    horizon: usize,
    episode_steps: usize,
    next_id: u64,
    states: Vec<SceneState>,
    buffer: Vec<StoredTransition>,
    queue: Vec<StoredStep>,
}

#[derive(Default)]
struct Interner {
    index: HashMap<*const SceneState, u32>,
    states: Vec<SceneState>,
}

impl Interner {
    fn id(&mut self, s: &Arc<SceneState>) -> u32 {
        let states = &mut self.states;
        *self.index.entry(Arc::as_ptr(s)).or_insert_with(|| {
            states.push((**s).clone());
            (states.len() - 1) as u32
        })
    }

    fn step(&mut self, state: &Arc<SceneState>, action: Action, reward: f64, next: &Arc<SceneState>, done: bool) -> StoredStep {
        StoredStep {
            state: self.id(state),
            action,
            reward,
            next_state: self.id(next),
            done,
        }
    }
}

impl ReplaySnapshot {
    pub fn capture(buffer: &ReplayBuffer, queue: &FutureQueue) -> Self {
        let mut it = Interner::default();
        let stored = buffer
            .items
            .iter()
            .map(|t| StoredTransition {
                id: t.id,
                step: it.step(&t.state, t.action, t.reward, &t.next_state, t.done),
                window: Window {
                    states: t.window.states.iter().map(|s| it.id(s)).collect(),
                    actions: t.window.actions.clone(),
                    state_valid: t.window.state_valid.clone(),
                    action_valid: t.window.action_valid.clone(),
                },
            })
            .collect();
        let queued = queue
            .queue
            .iter()
            .map(|s| it.step(&s.state, s.action, s.reward, &s.next_state, s.done))
            .collect();
        Self {
            capacity: buffer.capacity,
            horizon: queue.horizon,
            episode_steps: queue.episode_steps,
            next_id: queue.next_id,
            states: it.states,
            buffer: stored,
            queue: queued,
        }
    }

    pub fn restore(self) -> Result<(ReplayBuffer, FutureQueue)> {
        let states: Vec<Arc<SceneState>> = self.states.into_iter().map(Arc::new).collect();
        let get = |i: u32| {
            states
                .get(i as usize)
                .cloned()
                .ok_or_else(|| Error::Snapshot(format!("state index {i} out of range")))
        };
        let step = |s: StoredStep| -> Result<Step> {
            Ok(Step {
                state: get(s.state)?,
                action: s.action,
                reward: s.reward,
                next_state: get(s.next_state)?,
                done: s.done,
            })
        };
        let mut buffer = ReplayBuffer::new(self.capacity);
        for t in self.buffer {
            let s = step(t.step)?;
            let window = Window {
                states: t.window.states.iter().map(|&i| get(i)).collect::<Result<_>>()?,
                actions: t.window.actions,
                state_valid: t.window.state_valid,
                action_valid: t.window.action_valid,
            };
            buffer.push(Transition {
                id: t.id,
                state: s.state,
                action: s.action,
                reward: s.reward,
                next_state: s.next_state,
                done: s.done,
                window,
            });
        }
        let queue = FutureQueue {
            horizon: self.horizon,
            queue: self.queue.into_iter().map(step).collect::<Result<_>>()?,
            episode_steps: self.episode_steps,
            next_id: self.next_id,
        };
        Ok((buffer, queue))
    }
}
