use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mst::EncoderConfig;

use super::config::{Ablation, TrainConfig};
use super::trainer::{read_metrics, write_metrics, MetricsRow, Trainer};

/// A grid of (ablation, seed) training runs sharing one base config.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrendPlan {
    pub base: TrainConfig,
    pub ablations: Vec<Ablation>,
    pub seeds: Vec<u64>,
    pub snapshot_every: u64,
}

impl Default for TrendPlan {
    fn default() -> Self {
        Self {
            base: TrainConfig {
                scenario: "left_turn".into(),
                flow_rate: Some(50.0),
                total_steps: 20_000,
                encoder: EncoderConfig {
                    width: 32,
                    heads: 4,
                    mlp_hidden: 64,
                    ..EncoderConfig::default()
                },
                ..TrainConfig::default()
            },
            ablations: vec![Ablation::Full, Ablation::MstOnly, Ablation::LstmSac, Ablation::NoRoutes],
            seeds: vec![0, 1, 2],
            snapshot_every: 2000,
        }
    }
}

impl TrendPlan {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let plan: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        plan.base.validate()?;
        Ok(plan)
    }

    /// Seed-major, so an interrupted grid stays balanced across ablations.
    pub fn jobs(&self) -> Vec<(Ablation, u64)> {
        self.seeds
            .iter()
            .flat_map(|&s| self.ablations.iter().map(move |&a| (a, s)))
            .collect()
    }

    pub fn config(&self, ablation: Ablation, seed: u64) -> TrainConfig {
        TrainConfig {
            ablation,
            seed,
            ..self.base.clone()
        }
    }
}

/// Outcome of one finished run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrendRun {
    pub ablation: Ablation,
    pub seed: u64,
    pub steps: u64,
    pub episodes: u64,
    /// Goal rate over the last `success_window` training episodes.
    pub final_success: f64,
    pub final_return: Option<f64>,
    pub wall_seconds: f64,
    pub config: TrainConfig,
}

pub fn job_dir(out: &Path, ablation: Ablation, seed: u64) -> PathBuf {
    out.join(format!("{ablation}_seed{seed}"))
}

/// Keeps the metrics rows logged up to `step`, dropping any written after
/// the snapshot being resumed.
pub fn truncate_metrics(path: &Path, step: u64) -> Result<Vec<MetricsRow>> {
    let kept: Vec<MetricsRow> = match fs::read_to_string(path) {
        Ok(text) => read_metrics(&text)?.into_iter().filter(|r| r.step <= step).collect(),
        Err(_) => Vec::new(),
    };
    let mut f = BufWriter::new(File::create(path)?);
    for r in &kept {
        write_metrics(&mut f, r)?;
    }
    f.flush()?;
    Ok(kept)
}

/// Runs (or resumes, or skips if finished) one job of the plan.
pub fn run_job(
    plan: &TrendPlan,
    ablation: Ablation,
    seed: u64,
    out: &Path,
    mut progress: impl FnMut(&MetricsRow),
) -> Result<TrendRun> {
    let dir = job_dir(out, ablation, seed);
    let result_path = dir.join("result.json");
    if let Ok(text) = fs::read_to_string(&result_path) {
        return Ok(serde_json::from_str(&text)?);
    }
    fs::create_dir_all(&dir)?;
    let snap = dir.join("snapshot.bin");
    let metrics = dir.join("metrics.jsonl");
    let cfg = plan.config(ablation, seed);
    let (mut trainer, mut elapsed) = match Trainer::load_snapshot(&snap) {
        Ok(t) if t.config() == &cfg => {
            truncate_metrics(&metrics, t.steps())?;
            let prior = fs::read_to_string(dir.join("elapsed"))
                .ok()
                .and_then(|s| s.trim().parse().ok())
                .unwrap_or(0.0);
            (t, prior)
        }
        _ => {
            File::create(&metrics)?;
            (Trainer::new(cfg)?, 0.0)
        }
    };
    let mut log = BufWriter::new(OpenOptions::new().append(true).open(&metrics)?);
    let mut last = None;
    let mut clock = Instant::now();
    while !trainer.is_finished() {
        if let Some(row) = trainer.step()? {
            write_metrics(&mut log, &row)?;
            log.flush()?;
            progress(&row);
            last = Some(row);
        }
        if plan.snapshot_every > 0 && trainer.steps() % plan.snapshot_every == 0 && !trainer.is_finished() {
            trainer.save_snapshot(&snap)?;
            elapsed += clock.elapsed().as_secs_f64();
            clock = Instant::now();
            fs::write(dir.join("elapsed"), format!("{elapsed}\n"))?;
        }
    }
    elapsed += clock.elapsed().as_secs_f64();
    trainer.checkpoint().save(dir.join("checkpoint.json"))?;
    let run = TrendRun {
        ablation,
        seed,
        steps: trainer.steps(),
        episodes: trainer.episodes(),
        final_success: trainer.success_rate(),
        final_return: last.and_then(|r| r.episodic_return),
        wall_seconds: elapsed,
        config: trainer.config().clone(),
    };
    fs::write(&result_path, serde_json::to_string_pretty(&run)? + "\n")?;
    let _ = fs::remove_file(&snap);
    Ok(run)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AblationSummary {
    pub runs: usize,
    pub missing_seeds: Vec<u64>,
    pub final_success: Vec<f64>,
    pub mean_final_success: Option<f64>,
    pub stderr_final_success: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrendSummary {
    pub plan: TrendPlan,
    pub ablations: BTreeMap<String, AblationSummary>,
}

impl TrendSummary {
    pub fn mean(&self, a: Ablation) -> Option<f64> {
        self.ablations.get(a.as_str()).and_then(|s| s.mean_final_success)
    }

    pub fn complete(&self, a: Ablation) -> bool {
        self.ablations.get(a.as_str()).is_some_and(|s| s.missing_seeds.is_empty())
    }
}

/// Collects finished runs of the plan found under `out`.
pub fn summarize(plan: &TrendPlan, out: &Path) -> Result<TrendSummary> {
    let mut ablations = BTreeMap::new();
    for &a in &plan.ablations {
        let mut finals = Vec::new();
        let mut missing = Vec::new();
        for &s in &plan.seeds {
            match fs::read_to_string(job_dir(out, a, s).join("result.json")) {
                Ok(text) => {
                    let run: TrendRun = serde_json::from_str(&text)?;
                    finals.push(run.final_success);
                }
                Err(_) => missing.push(s),
            }
        }
        let n = finals.len();
        let mean = (n > 0).then(|| finals.iter().sum::<f64>() / n as f64);
        let stderr = mean.map(|m| {
            if n > 1 {
                (finals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt()
            } else {
                0.0
            }
        });
        ablations.insert(
            a.to_string(),
            AblationSummary {
                runs: n,
                missing_seeds: missing,
                final_success: finals,
                mean_final_success: mean,
                stderr_final_success: stderr,
            },
        );
    }
    Ok(TrendSummary {
        plan: plan.clone(),
        ablations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_plan() -> TrendPlan {
        TrendPlan {
            base: TrainConfig {
                encoder: EncoderConfig {
                    width: 8,
                    heads: 2,
                    mlp_hidden: 16,
                    ..EncoderConfig::default()
                },
                head_hidden: 16,
                projector_hidden: 8,
                projector_dim: 4,
                warmup_steps: 20,
                batch_size: 4,
                buffer_capacity: 200,
                total_steps: 60,
                log_interval: 20,
                ..TrendPlan::default().base
            },
            ablations: vec![Ablation::Full, Ablation::NoRoutes],
            seeds: vec![3],
            snapshot_every: 30,
        }
    }

    #[test]
    fn default_plan_is_the_desk_protocol() {
        let p = TrendPlan::default();
        assert_eq!(p.jobs().len(), 12);
        assert_eq!(p.base.total_steps, 20_000);
        assert_eq!(p.base.flow_rate, Some(50.0));
        assert_eq!(p.base.scenario, "left_turn");
        assert_eq!(p.jobs()[..2], [(Ablation::Full, 0), (Ablation::MstOnly, 0)]);
    }

    #[test]
    fn jobs_finish_resume_and_summarize() {
        let dir = tempfile::tempdir().unwrap();
        let plan = tiny_plan();
        let partial = summarize(&plan, dir.path()).unwrap();
        assert_eq!(partial.mean(Ablation::Full), None);
        assert!(!partial.complete(Ablation::Full));

        // an interrupted run leaves a snapshot at step 30 and rows past it
        let mut t = Trainer::new(plan.config(Ablation::Full, 3)).unwrap();
        let jd = job_dir(dir.path(), Ablation::Full, 3);
        fs::create_dir_all(&jd).unwrap();
        let mut f = File::create(jd.join("metrics.jsonl")).unwrap();
        while t.steps() < 40 {
            if let Some(r) = t.step().unwrap() {
                write_metrics(&mut f, &r).unwrap();
            }
            if t.steps() == 30 {
                t.save_snapshot(jd.join("snapshot.bin")).unwrap();
            }
        }
        drop(f);
        let resumed = run_job(&plan, Ablation::Full, 3, dir.path(), |_| {}).unwrap();

        let fresh_dir = tempfile::tempdir().unwrap();
        let fresh = run_job(&plan, Ablation::Full, 3, fresh_dir.path(), |_| {}).unwrap();
        assert_eq!(resumed.final_success, fresh.final_success);
        assert_eq!(resumed.steps, 60);
        let a = fs::read_to_string(jd.join("metrics.jsonl")).unwrap();
        let b = fs::read_to_string(job_dir(fresh_dir.path(), Ablation::Full, 3).join("metrics.jsonl")).unwrap();
        assert_eq!(a, b);
        assert!(!jd.join("snapshot.bin").exists());

        run_job(&plan, Ablation::NoRoutes, 3, dir.path(), |_| {}).unwrap();
        let s = summarize(&plan, dir.path()).unwrap();
        assert!(s.complete(Ablation::Full) && s.complete(Ablation::NoRoutes));
        assert_eq!(s.mean(Ablation::Full), Some(fresh.final_success));
        assert_eq!(s.ablations["full"].stderr_final_success, Some(0.0));
    }
}
