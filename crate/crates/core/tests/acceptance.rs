//! One PASS/FAIL line per acceptance criterion. Criteria 5 and 6 read the
//! recorded desk-scale runs under `results/trend`; their strict assertion
//! lives in the ignored `trend_criteria_strict` test.

mod common;

use std::collections::HashSet;
use std::io::Write;
use std::path::PathBuf;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scene_rep::autograd::{AttentionMask, Graph, Mat, ParamStore};
use scene_rep::mst::{MstEncoder, MstVariant, SceneBatch};
use scene_rep::nn::MultiHeadAttention;
use scene_rep::replay::{FutureQueue, ReplayBuffer, Step};
use scene_rep::sac::normal_noise;
use scene_rep::scene::{SceneConfig, SceneState};
use scene_rep::sim::{HybridAction, ScenarioConfig, Simulator};
use scene_rep::slt::similarity_loss;
use scene_rep::train::trend::{summarize, TrendPlan, TrendSummary};
use scene_rep::train::{evaluate, Ablation, Agent, Checkpoint, Trainer};

use common::{fd_relative_error, random_state, swap_agents, tiny_config, tiny_encoder};

type Verdict = Result<String, String>;

fn emit(id: u32, title: &str, verdict: &Verdict, secs: f64) {
    let (tag, detail) = match verdict {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    // written past the harness capture so the lines always show
    let line = format!("{tag} criterion {id} ({title}) [{secs:.1}s]: {detail}\n");
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn timed(f: impl FnOnce() -> Verdict) -> (Verdict, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}

fn check(ok: bool, what: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what.into())
    }
}

// ---------------------------------------------------------------- 1

/// Per-head masked attention written as explicit loops over rows and heads.
fn naive_mha(ps: &ParamStore, m: &MultiHeadAttention, xq: &Mat, xkv: &Mat, mask: &AttentionMask) -> (Mat, Vec<f64>) {
    let lin = |x: &Mat, l: &scene_rep::nn::Linear| {
        let (w, b) = (ps.get(l.w), ps.get(l.b));
        Array2::from_shape_fn((x.nrows(), l.out_dim), |(r, c)| {
            b[[0, c]] + (0..l.in_dim).map(|k| x[[r, k]] * w[[k, c]]).sum::<f64>()
        })
    };
    let (q, k, v) = (lin(xq, &m.q), lin(xkv, &m.k), lin(xkv, &m.v));
    let d = q.ncols();
    let dk = d / m.heads;
    let (groups, ql, kl) = (mask.groups, mask.q_len, mask.k_len);
    let mut cat = Array2::zeros((groups * ql, d));
    let mut weights = vec![0.0; groups * m.heads * ql * kl];
    for g in 0..groups {
        for h in 0..m.heads {
            for i in 0..ql {
                let allowed: Vec<usize> = (0..kl).filter(|&j| mask.get(g, i, j)).collect();
                if allowed.is_empty() {
                    continue;
                }
                let logits: Vec<f64> = allowed
                    .iter()
                    .map(|&j| {
                        (0..dk).map(|c| q[[g * ql + i, h * dk + c]] * k[[g * kl + j, h * dk + c]]).sum::<f64>()
                            / (dk as f64).sqrt()
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (&j, ej) in allowed.iter().zip(&e) {
                    let w = ej / z;
                    weights[((g * m.heads + h) * ql + i) * kl + j] = w;
                    for c in 0..dk {
                        cat[[g * ql + i, h * dk + c]] += w * v[[g * kl + j, h * dk + c]];
                    }
                }
            }
        }
    }
    (lin(&cat, &m.o), weights)
}

fn criterion_1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut empty_rows = 0;
    for case in 0..100 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let width = heads * rng.random_range(1..=4);
        let (groups, ql, kl) = (rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=6));
        let (qd, kd) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let allowed: Vec<bool> = (0..groups * ql * kl).map(|_| rng.random_bool(0.7)).collect();
        let mask = AttentionMask::new(groups, ql, kl, allowed);
        empty_rows += (0..groups).flat_map(|g| (0..ql).map(move |i| (g, i))).filter(|&(g, i)| !mask.row_has_key(g, i)).count();
        let mut ps = ParamStore::new();
        let m = MultiHeadAttention::new(&mut ps, "mha", qd, kd, width, heads, &mut rng);
        let xq = Array2::from_shape_fn((groups * ql, qd), |_| rng.random_range(-2.0..2.0));
        let xkv = Array2::from_shape_fn((groups * kl, kd), |_| rng.random_range(-2.0..2.0));
        let mut g = Graph::no_grad();
        let (q, kv) = (g.constant(xq.clone()), g.constant(xkv.clone()));
        let out = m.forward(&mut g, &ps, q, kv, mask.clone());
        let (expect, expect_w) = naive_mha(&ps, &m, &xq, &xkv, &mask);
        let got_w = g.attention_weights(out.weights).ok_or("no attention node")?.0;
        let e_out = g.value(out.out).iter().zip(expect.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let e_w = got_w.iter().zip(&expect_w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(e_out).max(e_w);
        if e_out > 1e-6 || e_w > 1e-6 {
            return Err(format!("case {case}: max |diff| output {e_out:.3e} weights {e_w:.3e} > 1e-6"));
        }
    }
    Ok(format!("100 random shapes/masks ({empty_rows} fully masked rows), max |diff| {worst:.2e} <= 1e-6"))
}

// ---------------------------------------------------------------- 2

fn encoder(seed: u64) -> (ParamStore, MstEncoder) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let enc = MstEncoder::new(&mut ps, "encoder", tiny_encoder(), MstVariant::Full, &mut rng);
    (ps, enc)
}

fn encode(ps: &ParamStore, enc: &MstEncoder, s: &SceneState) -> Mat {
    let mut g = Graph::no_grad();
    let h = enc.encode(&mut g, ps, &[s]);
    g.value(h).clone()
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn attention_rows() -> Result<String, String> {
    let (ps, enc) = encoder(1);
    let cfg = SceneConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut rows = 0;
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let s = random_state(&cfg, &mut rng, k % (cfg.neighbors + 1));
        let batch = SceneBatch::new(&[&s]);
        let mut g = Graph::no_grad();
        let (m, r) = (g.constant(batch.motion.clone()), g.constant(batch.routes.clone()));
        let out = enc.forward(&mut g, &ps, &batch, m, r);
        for level in enc.trace(&g, &batch, &out).levels {
            for gi in 0..level.groups {
                for h in 0..level.heads {
                    for i in 0..level.q_len {
                        if !level.row_active(gi, i) {
                            continue;
                        }
                        let sum: f64 = (0..level.k_len).map(|j| level.weight(gi, h, i, j)).sum();
                        worst = worst.max((sum - 1.0).abs());
                        rows += 1;
                    }
                }
            }
        }
    }
    check(worst <= 1e-5, format!("attention row sum off by {worst:.2e}"))?;
    Ok(format!("{rows} rows sum to 1 within {worst:.1e}"))
}

fn permutation_and_dummies() -> Result<String, String> {
    let (ps, enc) = encoder(2);
    let cfg = SceneConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(2..=cfg.neighbors);
        let s = random_state(&cfg, &mut rng, n);
        let base = encode(&ps, &enc, &s);
        let live: Vec<usize> = (1..cfg.agents()).filter(|&i| s.agent_mask[i]).collect();
        let i = live[rng.random_range(0..live.len())];
        let j = live[rng.random_range(0..live.len())];
        worst = worst.max(max_abs_diff(&base, &encode(&ps, &enc, &swap_agents(&s, i, j))));
        // garbage behind every false mask entry
        let mut d = s.clone();
        for ((a, t), m) in s.motion_mask.indexed_iter() {
            if !m {
                for f in 0..5 {
                    d.motion[[a, t, f]] = rng.random_range(-1e3..1e3);
                }
            }
        }
        for ((a, r, w), m) in s.route_mask.indexed_iter() {
            if !m {
                for f in 0..3 {
                    d.routes[[a, r, w, f]] = rng.random_range(-1e3..1e3);
                }
            }
        }
        worst = worst.max(max_abs_diff(&base, &encode(&ps, &enc, &d)));
    }
    check(worst <= 1e-6, format!("h_t moved by {worst:.2e}"))?;
    Ok(format!("permutation/dummy |dh| <= {worst:.1e}"))
}

fn rewards_and_bins() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut steps = 0;
    let mut episodes = 0;
    for name in ScenarioConfig::PRESETS {
        let mut sim = Simulator::new(ScenarioConfig::preset(name).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        for ep in 0..3 {
            sim.reset(ep);
            loop {
                let raw = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
                let (_, r, done, _) = sim.step(&HybridAction::from_raw(raw, 10.0)).map_err(|e| e.to_string())?;
                steps += 1;
                check([-1.0, 0.0, 1.0].contains(&r), format!("reward {r} in {name}"))?;
                check(done || r == 0.0, format!("non-terminal reward {r} in {name}"))?;
                if done {
                    episodes += 1;
                    break;
                }
            }
        }
    }
    // the lane bins cover [-1, 1] without overlap and the speed map is affine
    let third = 1.0 / 3.0;
    for k in 0..=60_000 {
        let x = -1.0 + 2.0 * k as f64 / 60_000.0;
        for x in [x, third, -third, f64::from_bits(third.to_bits() + 1), f64::from_bits(third.to_bits() - 1)] {
            let a = HybridAction::from_raw([x, x], 10.0);
            let bins = [x < -third, (-third..=third).contains(&x), x > third];
            check(bins.iter().filter(|&&b| b).count() == 1, format!("{x} falls in several bins"))?;
            let expect = [-1i8, 0, 1][bins.iter().position(|&b| b).unwrap()];
            check(a.lane_command == expect, format!("lane bin of {x}: {} vs {expect}", a.lane_command))?;
            check((a.target_speed - (x + 1.0) * 5.0).abs() < 1e-12, format!("speed of {x}"))?;
        }
    }
    Ok(format!("{steps} steps / {episodes} episodes rewards in {{-1,0,1}}, bins partition [-1,1]"))
}

fn tagged(tag: usize) -> Arc<SceneState> {
    let mut s = SceneState::empty(&SceneConfig::default());
    s.ids[0] = tag as u64;
    Arc::new(s)
}

fn replay_alignment() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut checked = 0;
    for _ in 0..50 {
        let horizon = rng.random_range(1..=4);
        let mut q = FutureQueue::new(horizon);
        let mut buf = ReplayBuffer::new(10_000);
        let mut episodes = Vec::new();
        let mut base = 0;
        for _ in 0..rng.random_range(1..6) {
            let len = rng.random_range(1..12);
            let states: Vec<Arc<SceneState>> = (0..=len).map(|k| tagged(base + k)).collect();
            let actions: Vec<[f64; 2]> = (0..len).map(|k| [(base + k) as f64, -1.0]).collect();
            for k in 0..len {
                buf.extend(q.push_step(Step {
                    state: states[k].clone(),
                    action: actions[k],
                    reward: 0.0,
                    next_state: states[k + 1].clone(),
                    done: k + 1 == len,
                }));
            }
            buf.extend(q.flush_episode());
            episodes.push((base, len));
            base += len + 1;
        }
        let total: usize = episodes.iter().map(|e| e.1).sum();
        check(buf.len() == total, format!("{} transitions for {total} steps", buf.len()))?;
        let mut seen = HashSet::new();
        for t in buf.iter() {
            let tag = t.state.ids[0] as usize;
            check(seen.insert(tag), "duplicate transition")?;
            let &(b0, len) = episodes.iter().find(|(b, l)| tag >= *b && tag < b + l).ok_or("stray state")?;
            let k = tag - b0;
            for j in 0..=horizon {
                let sv = k + j <= len;
                check(t.window.state_valid[j] == sv, "state validity")?;
                if sv {
                    check(t.window.states[j].ids[0] as usize == tag + j, "state alignment")?;
                }
                let av = k + j < len;
                check(t.window.action_valid[j] == av, "action validity")?;
                if av {
                    check(t.window.actions[j][0] as usize == tag + j, "action alignment")?;
                }
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} transitions conserved and aligned"))
}

fn slt_causality_and_stop_gradients() -> Result<String, String> {
    let cfg = tiny_config(Ablation::Full);
    let mut ps = ParamStore::new();
    let agent = Agent::build(&cfg, &mut ps, 3).map_err(|e| e.to_string())?;
    let slt = agent.slt.as_ref().ok_or("full model lacks the latent model")?;
    let tf = cfg.horizon;
    let d = cfg.encoder.width;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let h = Array2::from_shape_fn((2 * tf, d), |_| rng.random_range(-1.0..1.0));
    let a = Array2::from_shape_fn((2 * tf, 2), |_| rng.random_range(-1.0..1.0));
    let mut nonzero_blocks = 0;
    for out_row in 0..2 * tf {
        let mut g = Graph::new();
        let (hv, av) = (g.input(h.clone()), g.input(a.clone()));
        let p = slt.predict_transitions(&mut g, &ps, hv, av, 2).map_err(|e| e.to_string())?;
        let sel = g.gather_rows(p, &[out_row]);
        let root = g.sum(sel);
        let grads = g.backward(root);
        for x in [hv, av] {
            let jac = grads.wrt(x).ok_or("missing input gradient")?;
            for in_row in 0..2 * tf {
                let nz = jac.row(in_row).iter().any(|&v| v != 0.0);
                let allowed = in_row / tf == out_row / tf && in_row % tf <= out_row % tf;
                check(!nz || allowed, format!("prediction {out_row} depends on input {in_row}"))?;
                nonzero_blocks += nz as usize;
            }
        }
    }

    // stop-gradients: actor -> encoder, latent target branch, TD target
    let cfg_s = SceneConfig::default();
    let states: Vec<SceneState> = (0..3).map(|k| random_state(&cfg_s, &mut rng, k + 1)).collect();
    let refs: Vec<&SceneState> = states.iter().collect();
    let mut g = Graph::new();
    let hv = agent.encoder.encode(&mut g, &ps, &refs);
    let xi = normal_noise(3, &mut rng);
    let (la, _) = agent.sac.actor_loss(&mut g, &ps, hv, &xi).map_err(|e| e.to_string())?;
    let ga = g.backward(la);
    for id in ps.group("encoder") {
        check(ga.param(id).is_none_or(|m| m.iter().all(|&x| x == 0.0)), "actor loss reaches the encoder")?;
    }
    check(ga.param(ps.group("actor")[0]).is_some(), "actor loss misses the actor")?;

    let mut g = Graph::new();
    let hi = g.input(h.clone());
    let ht = g.input(h.mapv(|x| x * 0.5 + 0.1));
    let ls = slt.loss(&mut g, &ps, hi, ht, &a, &vec![true; 2 * tf], 2).map_err(|e| e.to_string())?;
    let gs = g.backward(ls);
    check(gs.wrt(ht).is_none_or(|m| m.iter().all(|&x| x == 0.0)), "gradient through the latent target branch")?;
    check(gs.wrt(hi).is_some_and(|m| m.iter().any(|&x| x != 0.0)), "no gradient on the online branch")?;

    let mut target = ps.clone();
    for id in ps.ids() {
        target.get_mut(id).mapv_inplace(|x| x * 0.9);
    }
    let hn = Array2::from_shape_fn((3, d), |_| rng.random_range(-1.0..1.0));
    let y = agent
        .sac
        .td_target(&ps, &target, &hn, &hn, &[0.0, 1.0, -1.0], &[false, true, false], &xi)
        .map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let hv = agent.encoder.encode(&mut g, &ps, &refs);
    let lc = agent.sac.critic_loss(&mut g, &ps, hv, &xi.mapv(f64::tanh), &y).map_err(|e| e.to_string())?;
    let gc = g.backward(lc);
    for grp in ["actor", "alpha"] {
        for id in ps.group(grp) {
            check(gc.param(id).is_none_or(|m| m.iter().all(|&x| x == 0.0)), format!("critic loss reaches {grp}"))?;
        }
    }
    Ok(format!("causal Jacobian ({nonzero_blocks} nonzero blocks, none above the diagonal); stop-gradients hold"))
}

fn criterion_2() -> Verdict {
    let parts = [
        attention_rows()?,
        permutation_and_dummies()?,
        rewards_and_bins()?,
        replay_alignment()?,
        slt_causality_and_stop_gradients()?,
    ];
    Ok(parts.join("; "))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Verdict {
    let cfg = tiny_config(Ablation::Full);
    let mut ps = ParamStore::new();
    let agent = Agent::build(&cfg, &mut ps, 21).map_err(|e| e.to_string())?;
    let slt = agent.slt.as_ref().ok_or("no latent model")?;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let sc = SceneConfig::default();
    let (b, tf) = (2, cfg.horizon);
    let per = tf + 1;
    let states: Vec<SceneState> = (0..b * per).map(|k| random_state(&sc, &mut rng, 1 + k % 4)).collect();
    let refs: Vec<&SceneState> = states.iter().collect();
    let first: Vec<usize> = (0..b).map(|i| i * per).collect();
    let actions = Array2::from_shape_fn((b, 2), |_| rng.random_range(-0.9..0.9));
    let y = Array2::from_shape_fn((b, 1), |_| rng.random_range(-1.0..1.0));
    let xi = normal_noise(b, &mut rng);
    let input_rows: Vec<usize> = (0..b).flat_map(|i| (0..tf).map(move |k| i * per + k)).collect();
    let target_rows: Vec<usize> = input_rows.iter().map(|r| r + 1).collect();
    let seq_actions = Array2::from_shape_fn((b * tf, 2), |_| rng.random_range(-0.9..0.9));
    let valid = vec![true; b * tf];
    let group_ids = |names: &[&str]| names.iter().flat_map(|n| ps.group(n)).collect::<Vec<_>>();

    let critic = |p: &ParamStore| {
        let mut g = Graph::new();
        let h = agent.encoder.encode(&mut g, p, &refs);
        let h = g.gather_rows(h, &first);
        let l = agent.sac.critic_loss(&mut g, p, h, &actions, &y).unwrap();
        (g, l)
    };
    let (g, l) = critic(&ps);
    let e_c = fd_relative_error(&ps, &group_ids(&["encoder", "critic1", "critic2"]), &g.backward(l), |p| {
        let (g, l) = critic(p);
        g.scalar(l)
    });

    let actor = |p: &ParamStore| {
        let mut g = Graph::new();
        let h = agent.encoder.encode(&mut g, p, &refs);
        let h = g.gather_rows(h, &first);
        let (l, _) = agent.sac.actor_loss(&mut g, p, h, &xi).unwrap();
        (g, l)
    };
    let (g, l) = actor(&ps);
    let e_a = fd_relative_error(&ps, &group_ids(&["actor"]), &g.backward(l), |p| {
        let (g, l) = actor(p);
        g.scalar(l)
    });

    // the stopped projection is a constant of the objective: hold it at the
    // unperturbed parameters
    let z0 = {
        let mut g = Graph::no_grad();
        let h = agent.encoder.encode(&mut g, &ps, &refs);
        let ht = g.gather_rows(h, &target_rows);
        let z = slt.projector.forward(&mut g, &ps, ht);
        g.value(z).clone()
    };
    let latent = |p: &ParamStore, frozen: bool| {
        let mut g = Graph::new();
        let h = agent.encoder.encode(&mut g, p, &refs);
        let hi = g.gather_rows(h, &input_rows);
        let ht = g.gather_rows(h, &target_rows);
        let l = if frozen {
            let a = g.constant(seq_actions.clone());
            let preds = slt.predict_transitions(&mut g, p, hi, a, b).unwrap();
            let proj = slt.projector.forward(&mut g, p, preds);
            let z_hat = slt.predictor.forward(&mut g, p, proj);
            let z = g.constant(z0.clone());
            similarity_loss(&mut g, z, z_hat, &valid).unwrap()
        } else {
            slt.loss(&mut g, p, hi, ht, &seq_actions, &valid, b).unwrap()
        };
        (g, l)
    };
    let (g, l) = latent(&ps, false);
    let e_s = fd_relative_error(
        &ps,
        &group_ids(&["encoder", "transition", "projector", "predictor"]),
        &g.backward(l),
        |p| {
            let (g, l) = latent(p, true);
            g.scalar(l)
        },
    );

    let mut g = Graph::new();
    let logp = Array2::from_shape_fn((b, 1), |_| rng.random_range(-3.0..1.0));
    let lal = agent.sac.alpha_loss(&mut g, &ps, &logp);
    let e_al = fd_relative_error(&ps, &group_ids(&["alpha"]), &g.backward(lal), |p| {
        let mut g = Graph::new();
        let l = agent.sac.alpha_loss(&mut g, p, &logp);
        g.scalar(l)
    });

    let worst = e_c.max(e_a).max(e_s).max(e_al);
    let detail = format!("D=8 parameter-vector rel err critic {e_c:.1e}, actor {e_a:.1e}, latent {e_s:.1e}, temperature {e_al:.1e}");
    check(worst <= 1e-4, format!("{detail} (> 1e-4)"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 4

fn sim_loss(z: &Mat, zh: &Mat) -> f64 {
    let mut g = Graph::new();
    let valid = vec![true; z.nrows()];
    let (a, b) = (g.constant(z.clone()), g.constant(zh.clone()));
    let l = similarity_loss(&mut g, a, b, &valid).unwrap();
    g.scalar(l)
}

fn criterion_4() -> Verdict {
    let z = ndarray::array![[0.3, -1.2, 2.0, 0.5]];
    let orth = ndarray::array![[1.2, 0.3, 0.0, 0.0]];
    let cases = [("parallel", 2.5 * &z, -1.0), ("orthogonal", orth, 0.0), ("anti-parallel", -0.4 * &z, 1.0)];
    let mut worst: f64 = 0.0;
    for (name, zh, expect) in &cases {
        let v = sim_loss(&z, zh);
        worst = worst.max((v - expect).abs());
        check((v - expect).abs() <= 1e-9, format!("{name}: {v} vs {expect}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let a = Array2::from_shape_fn((4, 6), |_| rng.random_range(-2.0..2.0));
        let b = Array2::from_shape_fn((4, 6), |_| rng.random_range(-2.0..2.0));
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let d = (sim_loss(&a, &b) - sim_loss(&a, &(c * &b))).abs();
        worst = worst.max(d);
        check(d <= 1e-9, format!("scale {c}: loss moved by {d:.2e}"))?;
    }
    Ok(format!("anchors -1/0/+1 and 200 rescalings within {worst:.1e}"))
}

// ---------------------------------------------------------------- 5, 6

fn trend_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../results/trend")
}

fn trend_summary() -> Result<TrendSummary, String> {
    summarize(&TrendPlan::default(), &trend_dir()).map_err(|e| e.to_string())
}

fn means(s: &TrendSummary, abls: &[Ablation]) -> Result<Vec<f64>, String> {
    abls.iter()
        .map(|&a| {
            if !s.complete(a) {
                let missing = s.ablations.get(a.as_str()).map(|x| x.missing_seeds.clone()).unwrap_or_default();
                return Err(format!("{a} runs missing for seeds {missing:?} (run `scene-rep trend`)"));
            }
            Ok(s.mean(a).unwrap())
        })
        .collect()
}

fn criterion_5() -> Verdict {
    let s = trend_summary()?;
    let m = means(&s, &[Ablation::Full, Ablation::MstOnly, Ablation::LstmSac])?;
    let detail = format!(
        "final success full {:.3}, mst_only {:.3}, lstm_sac {:.3} (3 seeds, 20k steps, flow 50)",
        m[0], m[1], m[2]
    );
    let mut fails = Vec::new();
    if m[0] < 0.5 {
        fails.push("full < 0.5");
    }
    if m[0] - m[1] < 0.0 {
        fails.push("full - mst_only < 0.0");
    }
    if m[0] - m[2] < 0.05 {
        fails.push("full - lstm_sac < 0.05");
    }
    if fails.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}: {}", fails.join(", ")))
    }
}

fn criterion_6() -> Verdict {
    let s = trend_summary()?;
    let m = means(&s, &[Ablation::Full, Ablation::NoRoutes])?;
    let detail = format!("final success full {:.3}, no_routes {:.3}, gap {:.3}", m[0], m[1], m[0] - m[1]);
    if m[0] - m[1] >= 0.1 {
        Ok(detail)
    } else {
        Err(format!("{detail} < 0.1"))
    }
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut t = Trainer::new(tiny_config(Ablation::Full)).map_err(|e| e.to_string())?;
    while t.steps() < 60 {
        t.step().map_err(|e| e.to_string())?;
    }
    let snap = dir.path().join("snapshot.bin");
    t.save_snapshot(&snap).map_err(|e| e.to_string())?;
    let next_row = |t: &mut Trainer| loop {
        if let Some(r) = t.step().unwrap() {
            return r;
        }
    };
    let a = next_row(&mut t);
    let mut resumed = Trainer::load_snapshot(&snap).map_err(|e| e.to_string())?;
    let b = next_row(&mut resumed);
    let (ja, jb) = (serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    check(ja == jb, format!("resumed row differs:\n{ja}\n{jb}"))?;
    let bits = |r: &scene_rep::train::MetricsRow| {
        [r.critic_loss, r.actor_loss, r.alpha_loss, r.slt_loss, Some(r.alpha), Some(r.train_success_rate)]
            .map(|x| x.map(f64::to_bits))
    };
    check(bits(&a) == bits(&b), "resumed losses differ bitwise")?;

    let ckpt = dir.path().join("ckpt.json");
    t.checkpoint().save(&ckpt).map_err(|e| e.to_string())?;
    let policy = Checkpoint::load(&ckpt).and_then(|c| c.policy()).map_err(|e| e.to_string())?;
    let sc = ScenarioConfig::preset("left_turn").map_err(|e| e.to_string())?;
    let r1 = evaluate(&policy, &sc, 3, 1_000_000, None).map_err(|e| e.to_string())?;
    let policy2 = Checkpoint::load(&ckpt).and_then(|c| c.policy()).map_err(|e| e.to_string())?;
    let r2 = evaluate(&policy2, &sc, 3, 1_000_000, None).map_err(|e| e.to_string())?;
    check(r1 == r2, "evaluation reports differ")?;
    Ok(format!(
        "resumed row at step {} bit-identical; two evaluations identical ({} episodes)",
        a.step, r1.episodes
    ))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Verdict {
    let out = Command::new(env!("CARGO_BIN_EXE_scene-rep"))
        .arg("dump-config")
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), "dump-config failed")?;
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    let table: [(&str, f64); 13] = [
        ("neighbors", 5.0),
        ("v_max", 10.0),
        ("history", 10.0),
        ("route_len", 10.0),
        ("horizon", 3.0),
        ("routes", 2.0),
        ("gamma", 0.99),
        ("polyak", 0.005),
        ("initial_alpha", 1.0),
        ("warmup_steps", 5000.0),
        ("buffer_capacity", 20000.0),
        ("batch_size", 32.0),
        ("total_steps", 100000.0),
    ];
    for (field, expect) in table {
        let got = v[field].as_f64().ok_or(format!("missing field {field}"))?;
        check(got == expect, format!("{field} = {got}, expected {expect}"))?;
    }
    let lr = v["learning_rate"].as_f64().ok_or("missing learning_rate")?;
    check(lr == 1e-4, format!("learning_rate = {lr}"))?;
    Ok("13 default hyperparameters and the learning rate match field-for-field".into())
}

#[test]
fn acceptance() {
    type Crit = (u32, &'static str, fn() -> Verdict, bool);
    let criteria: [Crit; 8] = [
        (1, "masked MHA vs naive oracle", criterion_1, true),
        (2, "invariant suite", criterion_2, true),
        (3, "gradient checks", criterion_3, true),
        (4, "similarity anchors", criterion_4, true),
        (5, "desk-scale training trend", criterion_5, false),
        (6, "no_routes ablation direction", criterion_6, false),
        (7, "determinism", criterion_7, true),
        (8, "default hyperparameter audit", criterion_8, true),
    ];
    let mut failed = Vec::new();
    for (id, title, f, enforced) in criteria {
        let (v, secs) = timed(f);
        emit(id, title, &v, secs);
        if v.is_err() && enforced {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "criteria {failed:?} failed");
}

/// Strict form of criteria 5 and 6 against the recorded runs.
#[test]
#[ignore = "reads the multi-hour desk-scale runs; run with --ignored after `scene-rep trend`"]
fn trend_criteria_strict() {
    let c5 = criterion_5();
    let c6 = criterion_6();
    emit(5, "desk-scale training trend", &c5, 0.0);
    emit(6, "no_routes ablation direction", &c6, 0.0);
    assert!(c5.is_ok() && c6.is_ok());
}
