use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use ur2::batch::{emit_batch, read_jsonl, write_atomic, write_jsonl};
use ur2::canonical;
use ur2::config::Config;
use ur2::curation::{curate, load_curriculum, load_questions, score_questions, write_curriculum};
use ur2::evalkit::{evaluate_benchmark, EvalContext, Judge, Metric};
use ur2::pipeline::{run_stage_file, score_group, scored};
use ur2::retrieval::server::RetrievalServer;
use ur2::rollout::{run_groups, GroupJob, RolloutConfig, RolloutDriver};
use ur2_core::credit::{compute_advantages, ScoredGroup, DEFAULT_EPS};
use ur2_core::protocol::PromptMode;
use ur2_core::rewards::{Preset, RewardConfig, Stage};
use ur2_core::rollout::RolloutGroup;

#[derive(Parser)]
#[command(name = "ur2", version, about = "Training data plane for retrieval-augmented RL")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Estimate per-question solve rates with the configured backend.
    Score {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bucket scored questions and draw one curriculum epoch.
    Curate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out groups for every curriculum item.
    Rollout {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        curriculum: PathBuf,
        /// Overrides each item's prompt mode.
        #[arg(long)]
        mode: Option<PromptMode>,
        #[arg(long)]
        group_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score rollout groups.
    Reward {
        #[arg(long)]
        groups: PathBuf,
        #[arg(long)]
        curriculum: PathBuf,
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        #[arg(long, default_value = "Default7B")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        step: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute advantages and write a trainer batch.
    Batch {
        #[arg(long)]
        scored: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate on a benchmark question file.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long, default_value = "retrieval")]
        mode: PromptMode,
        #[arg(long, value_delimiter = ',', default_value = "em,f1")]
        metrics: Vec<Metric>,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full training stage and write per-step batches.
    RunStage {
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        #[arg(long)]
        config: PathBuf,
    },
    /// Serve the configured corpus over HTTP.
    ServeRetrieval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8090")]
        addr: String,
        #[arg(long, default_value_t = 8)]
        threads: usize,
    },
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse::<u8>()
        .ok()
        .and_then(Stage::from_number)
        .ok_or_else(|| format!("stage must be 1 or 2, got '{s}'"))
}

type CliResult = Result<(), Box<dyn std::error::Error + Send + Sync>>;

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult {
    let text = canonical::to_string(value)?;
    write_atomic(path, format!("{text}\n").as_bytes())?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> CliResult {
    match cmd {
        Cmd::Score {
            config,
            questions,
            n,
            seed,
            out,
        } => {
            let cfg = Config::load(&config)?;
            let backend = cfg.build_backend()?;
            let qs = load_questions(&questions)?;
            let scores = score_questions(backend.as_ref(), &qs, n, seed, cfg.run.workers)?;
            let count = write_jsonl(&out, &scores)?;
            eprintln!("scored {count} questions");
        }
        Cmd::Curate { scores, n, seed, out } => {
            let records = read_jsonl(&scores)?;
            let report = curate(&records, n, seed)?;
            write_curriculum(&out, &report.sample.items)?;
            write_json(&out.with_extension("report.json"), &report)?;
            eprintln!(
                "curriculum of {} items (hard {}, medium {}, easy {}), {} filtered",
                report.sample.items.len(),
                report.sample.quotas.hard,
                report.sample.quotas.medium,
                report.sample.quotas.easy,
                report.filtered
            );
        }
        Cmd::Rollout {
            config,
            curriculum,
            mode,
            group_size,
            seed,
            out,
        } => {
            let cfg = Config::load(&config)?;
            let backend = cfg.build_backend()?;
            let retriever = cfg.build_retriever()?;
            let driver = RolloutDriver::new(backend.as_ref(), retriever.as_deref());
            let items = load_curriculum(&curriculum)?;
            let jobs: Vec<GroupJob> = items
                .into_iter()
                .enumerate()
                .map(|(j, item)| {
                    let mut rc =
                        RolloutConfig::training(item.task_family, mode.unwrap_or(item.prompt_mode));
                    rc.top_k = cfg.retrieval.top_k;
                    GroupJob {
                        item,
                        cfg: rc,
                        seed: seed.wrapping_add((j as u64) << 32),
                    }
                })
                .collect();
            let g = group_size.unwrap_or(cfg.run.group_size);
            let outcomes = run_groups(&driver, &jobs, g, cfg.run.workers)?;
            let mut groups = Vec::new();
            for o in &outcomes {
                match o.group() {
                    Some(grp) => groups.push(grp),
                    None => {
                        for (i, e) in o.errors() {
                            eprintln!("excluded {} (member {i}): {e}", o.question_id);
                        }
                    }
                }
            }
            std::fs::create_dir_all(&out)?;
            let count = write_jsonl(&out.join("groups.jsonl"), &groups)?;
            eprintln!("wrote {count} complete groups of {}", outcomes.len());
        }
        Cmd::Reward {
            groups,
            curriculum,
            stage,
            preset,
            step,
            out,
        } => {
            let gold: HashMap<String, String> = load_curriculum(&curriculum)?
                .into_iter()
                .map(|it| (it.question_id, it.gold))
                .collect();
            let rc = RewardConfig::new(stage, preset).at_step(step);
            let groups: Vec<RolloutGroup> = read_jsonl(&groups)?;
            let mut out_groups = Vec::with_capacity(groups.len());
            for grp in groups {
                let g = gold
                    .get(&grp.question_id)
                    .ok_or_else(|| format!("no gold answer for {}", grp.question_id))?;
                let rewards = score_group(&grp, g, &rc)?;
                out_groups.push(scored(grp, &rewards, &rc));
            }
            let count = write_jsonl(&out, &out_groups)?;
            eprintln!("scored {count} groups");
        }
        Cmd::Batch { scored, eps, out } => {
            let groups: Vec<ScoredGroup> = read_jsonl(&scored)?;
            let batch = compute_advantages(&groups, eps)?;
            let count = emit_batch(&batch, &out)?;
            eprintln!(
                "wrote {count} records (batch mean {}, std {})",
                batch.batch_stats.mean, batch.batch_stats.std
            );
        }
        Cmd::Eval {
            config,
            benchmark,
            mode,
            metrics,
            n,
            seed,
            out,
        } => {
            let cfg = Config::load(&config)?;
            let backend = cfg.build_backend()?;
            let retriever = cfg.build_retriever()?;
            let items = load_questions(&benchmark)?;
            let ctx = EvalContext {
                driver: RolloutDriver::new(backend.as_ref(), retriever.as_deref()),
                judge: Some(Judge::new(backend.as_ref())),
                workers: cfg.run.workers,
            };
            let id = benchmark
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let report = evaluate_benchmark(&ctx, &id, &items, mode, &metrics, n, seed)?;
            write_json(&out, &report)?;
            for (k, v) in &report.metrics {
                println!("{id} {k} {v:.4}");
            }
        }
        Cmd::RunStage { stage, config } => {
            let m = run_stage_file(stage, &config)?;
            for s in &m.steps {
                eprintln!(
                    "step {:>4}: {} records, {} groups excluded",
                    s.step,
                    s.records,
                    s.excluded.len()
                );
            }
            println!("fingerprint {}", m.fingerprint);
        }
        Cmd::ServeRetrieval {
            config,
            addr,
            threads,
        } => {
            let cfg = Config::load(&config)?;
            let svc = cfg
                .build_service()?
                .ok_or("retrieval.corpus_path is required to serve")?;
            let server = RetrievalServer::start(Arc::new(svc), &addr, threads)?;
            eprintln!("listening on {}", server.url());
            server.wait();
        }
    }
    Ok(())
}
