use std::io::{BufRead, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::mst::LevelTrace;
use crate::scene::{build_state, HistoryBuffer, SceneConfig, SceneState};
use crate::sim::{HybridAction, Outcome, ScenarioConfig, Simulator, TraceRecord};

use super::agent::Policy;
use super::trainer::episode_seed;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpisodeResult {
    pub episode: u32,
    pub seed: u64,
    pub outcome: Outcome,
    pub steps: u32,
    pub episode_return: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub scenario: String,
    pub seed: u64,
    pub episodes: usize,
    /// Percentages over the evaluated episodes.
    pub success_rate: f64,
    pub collision_rate: f64,
    pub stagnation_rate: f64,
    /// Episodes that left the route or the road.
    pub off_route_rate: f64,
    /// Seconds, over successful episodes only.
    pub completion_time_mean: Option<f64>,
    pub completion_time_std: Option<f64>,
    pub results: Vec<EpisodeResult>,
}

/// What a rollout hook sees at every step.
pub struct StepView<'a> {
    pub episode: u32,
    pub step: u32,
    pub state: &'a SceneState,
    pub sim: &'a Simulator,
}

/// Runs `episodes` episodes with `policy`, seeding episode `k` from
/// `(seed, k)`. `on_state` sees each state before an action is chosen;
/// `on_record` sees one simulator record per reset and per step.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    scenario: &ScenarioConfig,
    scene: &SceneConfig,
    v_max: f64,
    episodes: usize,
    seed: u64,
    mut policy: impl FnMut(&SceneState) -> [f64; 2],
    mut on_state: impl FnMut(&StepView<'_>, [f64; 2]) -> Result<()>,
    mut on_record: impl FnMut(TraceRecord) -> Result<()>,
) -> Result<EvalReport> {
    let mut sim = Simulator::new(scenario.clone())?;
    sim.route_count = scene.routes;
    sim.route_len = scene.route_len;
    let mut history = HistoryBuffer::new(scene.history);
    let mut results = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let ep_seed = episode_seed(seed, k as u64);
        let mut obs = sim.reset(ep_seed);
        history.clear();
        history.update(&obs);
        on_record(record(k as u32, &sim, None, 0.0, false))?;
        let mut ret = 0.0;
        loop {
            let state = build_state(scene, &history, &obs);
            let raw = policy(&state);
            on_state(
                &StepView {
                    episode: k as u32,
                    step: sim.episode_step(),
                    state: &state,
                    sim: &sim,
                },
                raw,
            )?;
            let action = HybridAction::from_raw(raw, v_max);
            let (next, reward, done, _) = sim.step(&action)?;
            ret += reward;
            on_record(record(k as u32, &sim, Some(action), reward, done))?;
            history.update(&next);
            obs = next;
            if done {
                break;
            }
        }
        results.push(EpisodeResult {
            episode: k as u32,
            seed: ep_seed,
            outcome: sim.outcome(),
            steps: sim.episode_step(),
            episode_return: ret,
        });
    }
    Ok(summarize(&scenario.name, seed, scenario.dt, results))
}

fn record(episode: u32, sim: &Simulator, action: Option<HybridAction>, reward: f64, done: bool) -> TraceRecord {
    TraceRecord {
        episode,
        step: sim.episode_step(),
        vehicles: sim.vehicles(),
        action,
        reward,
        done,
        outcome: sim.outcome(),
    }
}

pub fn summarize(scenario: &str, seed: u64, dt: f64, results: Vec<EpisodeResult>) -> EvalReport {
    let n = results.len();
    let pct = |o: Outcome| {
        if n == 0 {
            0.0
        } else {
            100.0 * results.iter().filter(|r| r.outcome == o).count() as f64 / n as f64
        }
    };
    let times: Vec<f64> = results
        .iter()
        .filter(|r| r.outcome == Outcome::Goal)
        .map(|r| r.steps as f64 * dt)
        .collect();
    let (mean, std) = if times.is_empty() {
        (None, None)
    } else {
        let m = times.iter().sum::<f64>() / times.len() as f64;
        let var = if times.len() > 1 {
            times.iter().map(|t| (t - m).powi(2)).sum::<f64>() / (times.len() - 1) as f64
        } else {
            0.0
        };
        (Some(m), Some(var.sqrt()))
    };
    EvalReport {
        scenario: scenario.to_string(),
        seed,
        episodes: n,
        success_rate: pct(Outcome::Goal),
        collision_rate: pct(Outcome::Collision),
        stagnation_rate: pct(Outcome::Timeout),
        off_route_rate: pct(Outcome::OffRoute),
        completion_time_mean: mean,
        completion_time_std: std,
        results,
    }
}

/// Deterministic evaluation of a policy. `seed` is used as given; callers
/// pass the training seed plus [`super::EVAL_SEED_OFFSET`].
pub fn evaluate(
    policy: &Policy,
    scenario: &ScenarioConfig,
    episodes: usize,
    seed: u64,
    trace: Option<&mut Vec<TraceRecord>>,
) -> Result<EvalReport> {
    let mut sink = trace;
    rollout(
        scenario,
        &policy.config.scene(),
        policy.config.v_max,
        episodes,
        seed,
        |s| policy.act(s),
        |_, _| Ok(()),
        |r| {
            if let Some(t) = sink.as_deref_mut() {
                t.push(r);
            }
            Ok(())
        },
    )
}

/// Attention weights of one rollout step.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AttentionRecord {
    pub episode: u32,
    pub step: u32,
    pub agent_ids: Vec<Option<u64>>,
    pub levels: Vec<LevelTrace>,
}

/// Replays evaluation episodes and writes one attention record per step.
pub fn export_attention<W: Write>(
    policy: &Policy,
    scenario: &ScenarioConfig,
    episodes: usize,
    seed: u64,
    out: &mut W,
) -> Result<EvalReport> {
    rollout(
        scenario,
        &policy.config.scene(),
        policy.config.v_max,
        episodes,
        seed,
        |s| policy.act(s),
        |view, _| {
            let trace = policy.attention(view.state)?;
            let rec = AttentionRecord {
                episode: view.episode,
                step: view.step,
                agent_ids: view
                    .state
                    .agent_mask
                    .iter()
                    .zip(view.state.ids.iter())
                    .map(|(&m, &id)| m.then_some(id))
                    .collect(),
                levels: trace.levels,
            };
            serde_json::to_writer(&mut *out, &rec)?;
            out.write_all(b"\n")?;
            Ok(())
        },
        |_| Ok(()),
    )
}

pub fn read_attention<R: BufRead>(input: R) -> Result<Vec<AttentionRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Pca {
    /// Projection of every row onto the leading components.
    pub points: Vec<Vec<f64>>,
    /// Share of total variance per component.
    pub explained_variance_ratio: Vec<f64>,
}

/// Principal components of the rows of `data` via the covariance eigen
/// decomposition. Zero-variance data projects to the origin.
pub fn pca(data: &Mat, components: usize) -> Result<Pca> {
    let (n, d) = data.dim();
    if n == 0 || components == 0 || components > d {
        return Err(Error::Usage(format!("cannot take {components} components of a {n}x{d} matrix")));
    }
    let mean = data.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = data - &mean;
    let x = DMatrix::from_row_iterator(n, d, centered.iter().copied());
    let cov = (x.transpose() * &x) / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut points = vec![vec![0.0; components]; n];
    let mut ratios = Vec::with_capacity(components);
    for (c, &k) in order.iter().take(components).enumerate() {
        let lambda = eig.eigenvalues[k].max(0.0);
        if total <= f64::EPSILON * d as f64 || lambda <= 0.0 {
            ratios.push(0.0);
            continue;
        }
        ratios.push(lambda / total);
        let v = eig.eigenvectors.column(k);
        for (i, p) in points.iter_mut().enumerate() {
            p[c] = (0..d).map(|j| x[(i, j)] * v[j]).sum();
        }
    }
    Ok(Pca {
        points,
        explained_variance_ratio: ratios,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LatentPca {
    pub pca: Pca,
    /// Mean of the two critics at each point.
    pub q_values: Vec<f64>,
}

/// PCA of the critics' concatenated `(h_t, a_t)` inputs over the states
/// visited by evaluation rollouts.
pub fn pca_latents(policy: &Policy, scenario: &ScenarioConfig, episodes: usize, seed: u64) -> Result<LatentPca> {
    let mut states = Vec::new();
    let mut actions = Vec::new();
    rollout(
        scenario,
        &policy.config.scene(),
        policy.config.v_max,
        episodes,
        seed,
        |s| policy.act(s),
        |view, a| {
            states.push(view.state.clone());
            actions.push(a);
            Ok(())
        },
        |_| Ok(()),
    )?;
    let refs: Vec<&SceneState> = states.iter().collect();
    let h = policy.agent.encode(&policy.ps, &refs);
    let a = Mat::from_shape_fn((actions.len(), 2), |(i, c)| actions[i][c]);
    let q = policy.q_mean(&h, &a);
    let joined = ndarray::concatenate(ndarray::Axis(1), &[h.view(), a.view()]).expect("same rows");
    Ok(LatentPca {
        pca: pca(&joined, 2)?,
        q_values: q,
    })
}
