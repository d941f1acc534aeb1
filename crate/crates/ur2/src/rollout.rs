//! Multi-turn rollouts: generate until a query closes, retrieve, inject the
//! documents, continue. Groups run on a bounded worker pool and are
//! assembled by rollout index.

use serde::{Deserialize, Serialize};
use ur2_core::curriculum::CurriculumItem;
use ur2_core::prompts::{task_prompt, SummaryDomain, SummaryPhase};
use ur2_core::protocol::{parse_transcript, PromptMode, TaskFamily, Transcript, BEGIN_QUERY, END_QUERY};
use ur2_core::rollout::{injection, BudgetError, RolloutBudget, RolloutGroup};

use crate::gateway::{Backend, FinishReason, GatewayError, GenerationRequest, SamplingParams};
use crate::retrieval::{RetrieveRequest, Retriever};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub budget: RolloutBudget,
    pub family: TaskFamily,
    pub mode: PromptMode,
    pub sampling: SamplingParams,
    pub phase: SummaryPhase,
    pub top_k: usize,
}

impl RolloutConfig {
    pub fn training(family: TaskFamily, mode: PromptMode) -> Self {
        RolloutConfig {
            budget: RolloutBudget::for_family(family),
            family,
            mode,
            sampling: SamplingParams::TRAINING,
            phase: SummaryPhase::Train,
            top_k: ur2_core::retrieval::DEFAULT_TOP_K,
        }
    }

    pub fn evaluation(family: TaskFamily, mode: PromptMode) -> Self {
        RolloutConfig {
            sampling: SamplingParams::EVALUATION,
            phase: SummaryPhase::Eval,
            ..Self::training(family, mode)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RolloutEvent {
    Served { query: String, is_fallback: bool },
    OverCap { query: String },
    RetrievalUnavailable { query: String, detail: String },
    TurnLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutOutcome {
    pub transcript: Transcript,
    pub events: Vec<RolloutEvent>,
    pub turns: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error("retrieval mode requires a retriever")]
    NoRetriever,
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Query text of a chunk that ends with the query close delimiter.
fn closing_query(chunk: &str) -> Option<&str> {
    let body = chunk.strip_suffix(END_QUERY)?;
    let open = body.rfind(BEGIN_QUERY)?;
    let q = body[open + BEGIN_QUERY.len()..].trim();
    (!q.is_empty()).then_some(q)
}

pub struct RolloutDriver<'a> {
    pub backend: &'a dyn Backend,
    pub retriever: Option<&'a dyn Retriever>,
}

impl<'a> RolloutDriver<'a> {
    pub fn new(backend: &'a dyn Backend, retriever: Option<&'a dyn Retriever>) -> Self {
        RolloutDriver { backend, retriever }
    }

    pub fn run_rollout(
        &self,
        prompt: &str,
        cfg: &RolloutConfig,
        seed: u64,
    ) -> Result<RolloutOutcome, RolloutError> {
        cfg.budget.validate()?;
        let retrieval = cfg.mode == PromptMode::Retrieval;
        if retrieval && self.retriever.is_none() {
            return Err(RolloutError::NoRetriever);
        }
        let domain = match cfg.family {
            TaskFamily::Math => SummaryDomain::Math,
            _ => SummaryDomain::General,
        };
        let mut response = String::new();
        let mut events = Vec::new();
        let mut served = 0;
        let mut turns = 0;
        loop {
            if turns == cfg.budget.max_turns {
                events.push(RolloutEvent::TurnLimit);
                break;
            }
            turns += 1;
            let mut req = GenerationRequest::new(prompt, &response, cfg.sampling, seed);
            req.max_new_tokens = cfg.budget.max_tokens_per_turn;
            if retrieval {
                req.stop_sequences = vec![END_QUERY.to_string()];
            }
            let chunk = self.backend.generate(&req)?;
            let reasoning_end = response.len();
            response.push_str(&chunk.text);
            if chunk.finish_reason != FinishReason::Stop || !retrieval {
                break;
            }
            let Some(query) = closing_query(&chunk.text) else {
                continue;
            };
            if served >= cfg.budget.max_queries {
                events.push(RolloutEvent::OverCap {
                    query: query.to_string(),
                });
                continue;
            }
            let open = reasoning_end + chunk.text.rfind(BEGIN_QUERY).unwrap_or(0);
            let rreq = RetrieveRequest {
                query: query.to_string(),
                prev_reasoning: response[..open].to_string(),
                k: cfg.top_k,
                mode: cfg.phase,
                domain,
            };
            let retriever = self.retriever.ok_or(RolloutError::NoRetriever)?;
            match retriever.retrieve(&rreq) {
                Ok(r) => {
                    response.push_str(&injection(&r.payload, r.is_fallback));
                    served += 1;
                    events.push(RolloutEvent::Served {
                        query: rreq.query,
                        is_fallback: r.is_fallback,
                    });
                }
                Err(e) => events.push(RolloutEvent::RetrievalUnavailable {
                    query: rreq.query,
                    detail: e.to_string(),
                }),
            }
        }
        let mut transcript = parse_transcript(prompt, &response, cfg.family, cfg.mode);
        transcript.assign_tokens(|s| self.backend.tokenize(s))?;
        Ok(RolloutOutcome {
            transcript,
            events,
            turns,
        })
    }
}

/// One group's members in rollout index order.
#[derive(Debug)]
pub struct GroupOutcome {
    pub question_id: String,
    pub members: Vec<Result<RolloutOutcome, RolloutError>>,
}

impl GroupOutcome {
    pub fn is_complete(&self) -> bool {
        self.members.iter().all(Result::is_ok)
    }

    pub fn errors(&self) -> Vec<(usize, String)> {
        self.members
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.as_ref().err().map(|e| (i, e.to_string())))
            .collect()
    }

    /// The group, if every member finished.
    pub fn group(&self) -> Option<RolloutGroup> {
        let transcripts = self
            .members
            .iter()
            .map(|m| m.as_ref().ok().map(|o| o.transcript.clone()))
            .collect::<Option<Vec<_>>>()?;
        Some(RolloutGroup {
            question_id: self.question_id.clone(),
            group_size: transcripts.len(),
            transcripts,
        })
    }
}

/// Runs `f(0..n)` on `workers` threads and returns results in index order.
pub fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>, RolloutError>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| RolloutError::Pool(e.to_string()))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(&f).collect()))
}

/// One group to roll out: member `i` uses seed `seed + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupJob {
    pub item: CurriculumItem,
    pub cfg: RolloutConfig,
    pub seed: u64,
}

/// Rolls out every job `g` times. All members of all groups share one pool
/// of `workers` threads; results do not depend on the worker count.
pub fn run_groups(
    driver: &RolloutDriver<'_>,
    jobs: &[GroupJob],
    g: usize,
    workers: usize,
) -> Result<Vec<GroupOutcome>, RolloutError> {
    if g < 2 {
        return Err(RolloutError::GroupTooSmall(g));
    }
    let prompts: Vec<String> = jobs
        .iter()
        .map(|j| task_prompt(j.item.task_family, j.cfg.mode, &j.item.question_text))
        .collect();
    let mut flat = parallel_map(jobs.len() * g, workers, |n| {
        let (q, i) = (n / g, n % g);
        driver.run_rollout(&prompts[q], &jobs[q].cfg, jobs[q].seed.wrapping_add(i as u64))
    })?
    .into_iter();
    Ok(jobs
        .iter()
        .map(|j| GroupOutcome {
            question_id: j.item.question_id.clone(),
            members: flat.by_ref().take(g).collect(),
        })
        .collect())
}

pub fn run_group(
    driver: &RolloutDriver<'_>,
    item: &CurriculumItem,
    cfg: &RolloutConfig,
    g: usize,
    seed: u64,
    workers: usize,
) -> Result<GroupOutcome, RolloutError> {
    let job = GroupJob {
        item: item.clone(),
        cfg: *cfg,
        seed,
    };
    let mut v = run_groups(driver, &[job], g, workers)?;
    Ok(v.remove(0))
}
