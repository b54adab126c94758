use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scene_rep::sim::{trace::write_records, ScenarioConfig};
use scene_rep::train::eval::{export_attention, pca_latents, read_attention};
use scene_rep::train::plot::{attention_svg, curves_svg, success_curves, EMA_WEIGHT};
use scene_rep::train::trainer::{read_metrics, write_metrics};
use scene_rep::train::trend::{self, TrendPlan};
use scene_rep::train::{evaluate, Ablation, Checkpoint, TrainConfig, Trainer, EVAL_SEED_OFFSET};
use scene_rep::{Error, Result};

#[derive(Parser)]
#[command(name = "scene-rep", version, about = "Scene encoder, latent model and SAC for urban driving")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an agent; writes metrics.jsonl, checkpoint.json and snapshot.bin
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        total_steps: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Steps between resumable snapshots (0 = only at the end)
        #[arg(long, default_value_t = 5000)]
        snapshot_every: u64,
        /// Continue from out/snapshot.bin
        #[arg(long)]
        resume: bool,
    },
    /// Deterministic evaluation of a checkpoint
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Defaults to the training seed plus 10^6
        #[arg(long)]
        seed: Option<u64>,
        /// Per-step trace (JSON lines)
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-step attention weights of evaluation rollouts (JSON lines)
    ExportAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-component PCA of critic inputs with mean Q-values
    PcaLatents {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long, default_value_t = 5)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Training curves from metrics logs, or heatmaps from an attention export
    Plot {
        #[arg(long, num_args = 1..)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        attention: Option<PathBuf>,
        /// Attention record index to draw
        #[arg(long, default_value_t = 0)]
        record: usize,
        #[arg(long, default_value = "training success rate")]
        title: String,
        #[arg(long, default_value_t = EMA_WEIGHT)]
        ema: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective training configuration
    DumpConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print a scenario preset as JSON
    Scenario { name: String },
    /// Desk-scale ablation trend runs (resumable)
    Trend {
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value = "results/trend")]
        out: PathBuf,
        /// Run only this ablation
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long)]
        seed: Option<u64>,
        /// Only rewrite the summary from finished runs
        #[arg(long)]
        summarize: bool,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn eval_setup(ckpt: &Path, scenario: Option<String>, seed: Option<u64>) -> Result<(Checkpoint, ScenarioConfig, u64)> {
    let ck = Checkpoint::load(ckpt)?;
    let mut cfg = ck.config.clone();
    if let Some(s) = scenario {
        cfg.scenario = s;
    }
    let sc = cfg.scenario_config()?;
    let seed = seed.unwrap_or(ck.config.seed + EVAL_SEED_OFFSET);
    Ok((ck, sc, seed))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train {
            config,
            seed,
            ablation,
            scenario,
            total_steps,
            out,
            snapshot_every,
            resume,
        } => {
            fs::create_dir_all(&out)?;
            let snap = out.join("snapshot.bin");
            let metrics_path = out.join("metrics.jsonl");
            let mut trainer = if resume {
                let t = Trainer::load_snapshot(&snap)?;
                trend::truncate_metrics(&metrics_path, t.steps())?;
                eprintln!("resumed at step {}", t.steps());
                t
            } else {
                let mut cfg = load_config(config.as_deref())?;
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                if let Some(a) = ablation {
                    cfg.ablation = a;
                }
                if let Some(s) = scenario {
                    cfg.scenario = s;
                }
                if let Some(n) = total_steps {
                    cfg.total_steps = n;
                }
                File::create(&metrics_path)?;
                Trainer::new(cfg)?
            };
            let mut log = BufWriter::new(OpenOptions::new().append(true).open(&metrics_path)?);
            while !trainer.is_finished() {
                if let Some(row) = trainer.step()? {
                    write_metrics(&mut log, &row)?;
                    log.flush()?;
                    eprintln!(
                        "step {} episodes {} success {:.2} alpha {:.4}",
                        row.step, row.episodes, row.train_success_rate, row.alpha
                    );
                }
                if snapshot_every > 0 && trainer.steps() % snapshot_every == 0 {
                    trainer.save_snapshot(&snap)?;
                }
            }
            trainer.save_snapshot(&snap)?;
            trainer.checkpoint().save(out.join("checkpoint.json"))?;
            Ok(())
        }
        Cmd::Evaluate {
            ckpt,
            scenario,
            episodes,
            seed,
            trace,
            out,
        } => {
            let (ck, sc, seed) = eval_setup(&ckpt, scenario, seed)?;
            let policy = ck.policy()?;
            let episodes = episodes.unwrap_or(ck.config.eval_episodes);
            let mut records = Vec::new();
            let report = evaluate(&policy, &sc, episodes, seed, trace.as_ref().map(|_| &mut records))?;
            if let Some(p) = trace {
                let mut f = BufWriter::new(File::create(p)?);
                write_records(&mut f, &records)?;
                f.flush()?;
            }
            write_json(out.as_deref(), &report)
        }
        Cmd::ExportAttention {
            ckpt,
            scenario,
            episodes,
            seed,
            out,
        } => {
            let (ck, sc, seed) = eval_setup(&ckpt, scenario, seed)?;
            let policy = ck.policy()?;
            let mut f = BufWriter::new(File::create(out)?);
            export_attention(&policy, &sc, episodes, seed, &mut f)?;
            f.flush()?;
            Ok(())
        }
        Cmd::PcaLatents {
            ckpt,
            scenario,
            episodes,
            seed,
            out,
        } => {
            let (ck, sc, seed) = eval_setup(&ckpt, scenario, seed)?;
            let policy = ck.policy()?;
            write_json(Some(&out), &pca_latents(&policy, &sc, episodes, seed)?)
        }
        Cmd::Plot {
            metrics,
            attention,
            record,
            title,
            ema,
            out,
        } => {
            let svg = match (attention, metrics.is_empty()) {
                (Some(p), true) => {
                    let recs = read_attention(BufReader::new(File::open(p)?))?;
                    let rec = recs
                        .get(record)
                        .ok_or_else(|| Error::Usage(format!("record {record} out of range ({} records)", recs.len())))?;
                    attention_svg(rec)
                }
                (None, false) => {
                    let mut rows = Vec::new();
                    for p in &metrics {
                        rows.extend(read_metrics(&fs::read_to_string(p)?)?);
                    }
                    curves_svg(&success_curves(&rows, ema), &title, "success rate")
                }
                _ => return Err(Error::Usage("pass either --metrics or --attention".into())),
            };
            fs::write(out, svg)?;
            Ok(())
        }
        Cmd::DumpConfig { config } => {
            println!("{}", load_config(config.as_deref())?.to_json());
            Ok(())
        }
        Cmd::Scenario { name } => {
            println!("{}", ScenarioConfig::preset(&name)?.to_json());
            Ok(())
        }
        Cmd::Trend {
            plan,
            out,
            ablation,
            seed,
            summarize,
        } => {
            let plan = match plan {
                Some(p) => TrendPlan::load(p)?,
                None => TrendPlan::default(),
            };
            fs::create_dir_all(&out)?;
            if !summarize {
                for (a, s) in plan.jobs() {
                    if ablation.is_some_and(|x| x != a) || seed.is_some_and(|x| x != s) {
                        continue;
                    }
                    let r = trend::run_job(&plan, a, s, &out, |row| {
                        eprintln!("{a} seed {s} step {} success {:.2}", row.step, row.train_success_rate);
                    })?;
                    eprintln!("{a} seed {s} final success {:.3}", r.final_success);
                }
            }
            let summary = trend::summarize(&plan, &out)?;
            write_json(Some(&out.join("summary.json")), &summary)?;
            write_json(None, &summary)
        }
    }
}
