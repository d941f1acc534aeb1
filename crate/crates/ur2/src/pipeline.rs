//! Stage runner: curriculum slice → rollout groups → rewards → advantages →
//! batch file, once per step, with a run manifest.
//!
//! Output layout:
//!
//! ```text
//! <out_dir>/batches/step_0000.jsonl
//! <out_dir>/manifest.json
//! ```
//!
//! Everything under `batches/` is a pure function of the inputs. The
//! manifest additionally carries wall-clock timestamps.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ur2_core::credit::{compute_advantages, CreditError, ScoredGroup};
use ur2_core::curriculum::CurriculumItem;
use ur2_core::protocol::{validate_format, FormatLimits, PromptMode};
use ur2_core::rewards::{
    score_stage1, score_stage2, Preset, RewardBreakdown, RewardConfig, RewardError, Stage,
};
use ur2_core::rollout::RolloutGroup;
use ur2_core::tokens::fnv1a64;

use crate::batch::{emit_batch, write_atomic, BatchError};
use crate::canonical;
use crate::config::{Config, ConfigError};
use crate::curation::load_curriculum;
use crate::rollout::{run_groups, GroupJob, RolloutConfig, RolloutDriver, RolloutError};

/// Stage 1 only shapes retrieval behaviour and runs briefly.
pub const STAGE1_DEFAULT_STEPS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] BatchError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Credit(#[from] CreditError),
    #[error("{0}")]
    Setup(String),
    #[error("step {step} failed: {detail}")]
    StepFailed { step: usize, detail: String },
}

/// Rewards for every transcript of a complete group.
pub fn score_group(
    group: &RolloutGroup,
    gold: &str,
    cfg: &RewardConfig,
) -> Result<Vec<RewardBreakdown>, RewardError> {
    group
        .transcripts
        .iter()
        .map(|t| {
            let report = validate_format(t, &FormatLimits::for_family(t.task_family));
            match cfg.stage {
                Stage::One => score_stage1(t, &report, cfg),
                Stage::Two => score_stage2(t, &report, gold, cfg),
            }
        })
        .collect()
}

pub fn scored(group: RolloutGroup, rewards: &[RewardBreakdown], cfg: &RewardConfig) -> ScoredGroup {
    ScoredGroup {
        group,
        rewards: rewards.iter().map(|r| r.total).collect(),
        stage: cfg.stage,
        preset: cfg.preset,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedGroup {
    pub question_id: String,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub file: String,
    pub records: usize,
    pub groups: usize,
    pub excluded: Vec<ExcludedGroup>,
    pub reward_mean: Option<f64>,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: u8,
    pub preset: String,
    pub config: Config,
    pub seed: u64,
    pub group_size: usize,
    pub rollout_batch: usize,
    pub planned_steps: usize,
    pub curriculum_size: usize,
    /// Questions consumed divided by curriculum size.
    pub epochs: f64,
    pub input_hash: String,
    pub steps: Vec<StepRecord>,
    pub status: RunStatus,
    pub error: Option<String>,
    /// Hash of this manifest without the timestamps, the config snapshot
    /// (covered by `input_hash`) and this field.
    pub fingerprint: String,
    pub started_at: u64,
    pub finished_at: u64,
}

impl RunManifest {
    pub fn compute_fingerprint(&self) -> String {
        let mut m = self.clone();
        m.fingerprint = String::new();
        m.config = Config::default();
        m.started_at = 0;
        m.finished_at = 0;
        let text = canonical::to_string(&m).unwrap_or_default();
        hex_sha256(text.as_bytes())
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn file_name_only(p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        *path = path.file_name().map(PathBuf::from).unwrap_or_default();
    }
}

/// Hash over the configuration that affects outputs and the bytes of every
/// input file it references. Directory locations and the worker count do
/// not contribute.
fn input_hash(cfg: &Config) -> Result<String, PipelineError> {
    let mut h = Sha256::new();
    let mut snapshot = cfg.clone();
    snapshot.run.workers = 0;
    snapshot.run.out_dir = PathBuf::new();
    file_name_only(&mut snapshot.gateway.script);
    file_name_only(&mut snapshot.retrieval.corpus_path);
    file_name_only(&mut snapshot.retrieval.summarizer.script);
    file_name_only(&mut snapshot.curriculum.path);
    h.update(canonical::to_string(&snapshot).map_err(BatchError::from)?.as_bytes());
    let files = [
        &cfg.gateway.script,
        &cfg.retrieval.corpus_path,
        &cfg.retrieval.summarizer.script,
        &cfg.curriculum.path,
    ];
    for path in files.into_iter().flatten() {
        let bytes = std::fs::read(path).map_err(|source| BatchError::Io {
            path: path.clone(),
            source,
        })?;
        h.update(format!("blob {}\0", bytes.len()).as_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Curriculum positions used by `step`: `rollout_batch` consecutive items,
/// wrapping around.
pub fn step_slice(len: usize, rollout_batch: usize, step: usize) -> Vec<usize> {
    (0..rollout_batch)
        .map(|j| (step * rollout_batch + j) % len)
        .collect()
}

fn group_seed(run_seed: u64, step: usize, slot: usize) -> u64 {
    fnv1a64(format!("{run_seed}:{step}:{slot}").as_bytes())
}

pub fn batch_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join("batches").join(format!("step_{step:04}.jsonl"))
}

pub fn run_stage_file(stage: Stage, config_path: &Path) -> Result<RunManifest, PipelineError> {
    let cfg = Config::load(config_path)?;
    run_stage(stage, &cfg)
}

/// Runs all steps of a stage and writes batch files plus the manifest.
pub fn run_stage(stage: Stage, cfg: &Config) -> Result<RunManifest, PipelineError> {
    cfg.validate()?;
    let preset = cfg.preset()?;
    let started_at = unix_now();
    let backend = cfg.build_backend()?;
    let retriever = cfg.build_retriever()?;
    let curriculum_path = cfg
        .curriculum
        .path
        .as_deref()
        .ok_or_else(|| PipelineError::Setup("curriculum.path is not set".into()))?;
    let items = load_curriculum(curriculum_path)?;
    if items.is_empty() {
        return Err(PipelineError::Setup("curriculum is empty".into()));
    }
    let run = &cfg.run;
    let planned_steps = run.steps.unwrap_or(match stage {
        Stage::One => STAGE1_DEFAULT_STEPS,
        Stage::Two => items.len().div_ceil(run.rollout_batch),
    });

    let mut manifest = RunManifest {
        stage: stage.number(),
        preset: preset.name().to_string(),
        config: cfg.clone(),
        seed: run.seed,
        group_size: run.group_size,
        rollout_batch: run.rollout_batch,
        planned_steps,
        curriculum_size: items.len(),
        epochs: (planned_steps * run.rollout_batch) as f64 / items.len() as f64,
        input_hash: input_hash(cfg)?,
        steps: Vec::new(),
        status: RunStatus::Running,
        error: None,
        fingerprint: String::new(),
        started_at,
        finished_at: 0,
    };

    let driver = RolloutDriver::new(backend.as_ref(), retriever.as_deref());
    let mut failure = None;
    for step in 0..planned_steps {
        match run_step(&driver, stage, preset, cfg, &items, step) {
            Ok(rec) => manifest.steps.push(rec),
            Err(e) => {
                failure = Some(PipelineError::StepFailed {
                    step,
                    detail: e.to_string(),
                });
                break;
            }
        }
    }
    manifest.status = if failure.is_some() {
        RunStatus::Failed
    } else {
        RunStatus::Completed
    };
    manifest.error = failure.as_ref().map(|e| e.to_string());
    manifest.finished_at = unix_now();
    manifest.fingerprint = manifest.compute_fingerprint();
    let text = canonical::to_string(&manifest).map_err(BatchError::from)?;
    write_atomic(&run.out_dir.join("manifest.json"), format!("{text}\n").as_bytes())?;
    match failure {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

fn run_step(
    driver: &RolloutDriver<'_>,
    stage: Stage,
    preset: Preset,
    cfg: &Config,
    items: &[CurriculumItem],
    step: usize,
) -> Result<StepRecord, PipelineError> {
    let run = &cfg.run;
    let jobs: Vec<GroupJob> = step_slice(items.len(), run.rollout_batch, step)
        .into_iter()
        .enumerate()
        .map(|(slot, i)| {
            let item = items[i].clone();
            let mode = match stage {
                Stage::One => PromptMode::Retrieval,
                Stage::Two => item.prompt_mode,
            };
            let mut rc = RolloutConfig::training(item.task_family, mode);
            rc.top_k = cfg.retrieval.top_k;
            GroupJob {
                item,
                cfg: rc,
                seed: group_seed(run.seed, step, slot),
            }
        })
        .collect();
    let outcomes = run_groups(driver, &jobs, run.group_size, run.workers)?;

    let mut reward_cfg = RewardConfig::new(stage, preset);
    if let Some(w) = cfg.reward.warm_steps {
        reward_cfg.warm_steps = w;
    }
    let reward_cfg = reward_cfg.at_step(step as u32);

    let mut groups = Vec::new();
    let mut excluded = Vec::new();
    let mut totals = Vec::new();
    for (job, outcome) in jobs.iter().zip(outcomes) {
        let Some(group) = outcome.group() else {
            excluded.push(ExcludedGroup {
                question_id: outcome.question_id.clone(),
                errors: outcome
                    .errors()
                    .into_iter()
                    .map(|(i, e)| format!("member {i}: {e}"))
                    .collect(),
            });
            continue;
        };
        let rewards = score_group(&group, &job.item.gold, &reward_cfg)?;
        totals.extend(rewards.iter().map(|r| r.total));
        groups.push(scored(group, &rewards, &reward_cfg));
    }
    let batch = compute_advantages(&groups, run.eps)?;
    let path = batch_path(&run.out_dir, step);
    let records = emit_batch(&batch, &path)?;
    let bytes = std::fs::read(&path).map_err(|source| BatchError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(StepRecord {
        step,
        file: format!("batches/step_{step:04}.jsonl"),
        records,
        groups: groups.len(),
        excluded,
        reward_mean: (!totals.is_empty()).then(|| totals.iter().sum::<f64>() / totals.len() as f64),
        sha256: hex_sha256(&bytes),
    })
}
