//! Benchmark evaluation: seeded sampling, rollouts with evaluation sampling
//! parameters, EM / F1 / LLM-judge scoring and report assembly.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ur2_core::metrics::{judge_prompt, parse_verdict, token_f1, JudgeKind, Verdict};
use ur2_core::protocol::{extract_answer, PromptMode, TaskFamily};
use ur2_core::prompts::task_prompt;
use ur2_core::rewards::match_answer;

use crate::curation::Question;
use crate::gateway::{Backend, GatewayError, GenerationRequest, SamplingParams};
use crate::rollout::{parallel_map, RolloutConfig, RolloutDriver, RolloutError};

/// Attempts made before a judge reply is declared unparseable.
pub const JUDGE_ATTEMPTS: u32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("judge replied {attempts} times without a parseable verdict; last reply: {last:?}")]
    JudgeProtocolError { attempts: u32, last: String },
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Em,
    F1,
    Judge,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Em => "em",
            Metric::F1 => "f1",
            Metric::Judge => "judge",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "em" => Ok(Metric::Em),
            "f1" => Ok(Metric::F1),
            "judge" => Ok(Metric::Judge),
            other => Err(format!("unknown metric '{other}'")),
        }
    }
}

pub struct Judge<'a> {
    pub backend: &'a dyn Backend,
    pub sampling: SamplingParams,
}

impl<'a> Judge<'a> {
    pub fn new(backend: &'a dyn Backend) -> Self {
        Judge {
            backend,
            sampling: SamplingParams::EVALUATION,
        }
    }

    pub fn judge(
        &self,
        pred: &str,
        gold: &str,
        question: &str,
        kind: JudgeKind,
    ) -> Result<Verdict, EvalError> {
        let prompt = judge_prompt(kind, question, gold, pred);
        let mut last = String::new();
        for attempt in 0..JUDGE_ATTEMPTS {
            let mut req = GenerationRequest::new(&prompt, "", self.sampling, u64::from(attempt));
            req.max_new_tokens = 512;
            last = self.backend.generate(&req)?.text;
            if let Some(v) = parse_verdict(kind, &last) {
                return Ok(v);
            }
        }
        Err(EvalError::JudgeProtocolError {
            attempts: JUDGE_ATTEMPTS,
            last,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub question_id: String,
    pub prediction: Option<String>,
    pub gold: String,
    pub em: Option<f64>,
    pub f1: Option<f64>,
    pub verdict: Option<Verdict>,
    /// Verdict as a number; partially correct counts 0.5.
    pub judge: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmark_id: String,
    pub n_samples: usize,
    pub metrics: BTreeMap<String, f64>,
    pub items: Vec<ItemResult>,
    pub complete: bool,
}

/// Scores one prediction. Errors are kept on the item.
pub fn score_item(
    q: &Question,
    prediction: Option<String>,
    metrics: &[Metric],
    judge: Option<&Judge<'_>>,
) -> ItemResult {
    let pred = prediction.as_deref().unwrap_or("");
    let mut r = ItemResult {
        question_id: q.question_id.clone(),
        prediction: prediction.clone(),
        gold: q.gold.clone(),
        em: None,
        f1: None,
        verdict: None,
        judge: None,
        error: None,
    };
    for m in metrics {
        match m {
            Metric::Em => {
                let hit = match_answer(prediction.as_deref(), &q.gold, q.task_family);
                r.em = Some(if hit { 1.0 } else { 0.0 });
            }
            Metric::F1 => r.f1 = Some(token_f1(pred, &q.gold)),
            Metric::Judge => {
                let kind = match q.task_family {
                    TaskFamily::Math => JudgeKind::Math,
                    _ => JudgeKind::Qa,
                };
                match judge.map(|j| j.judge(pred, &q.gold, &q.question_text, kind)) {
                    Some(Ok(v)) => {
                        r.verdict = Some(v);
                        r.judge = Some(v.score());
                    }
                    Some(Err(e)) => r.error = Some(e.to_string()),
                    None => r.error = Some("no judge backend configured".into()),
                }
            }
        }
    }
    r
}

/// Mean of each requested metric over the items that produced it.
pub fn aggregate(items: &[ItemResult], metrics: &[Metric]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for m in metrics {
        let values: Vec<f64> = items
            .iter()
            .filter_map(|r| match m {
                Metric::Em => r.em,
                Metric::F1 => r.f1,
                Metric::Judge => r.judge,
            })
            .collect();
        if !values.is_empty() {
            out.insert(m.name().to_string(), values.iter().sum::<f64>() / values.len() as f64);
        }
    }
    out
}

/// Indices of a seeded uniform sample of `n` out of `len`, in ascending
/// order. Asking for at least `len` returns everything.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, len, n).into_vec();
    idx.sort_unstable();
    idx
}

pub struct EvalContext<'a> {
    pub driver: RolloutDriver<'a>,
    pub judge: Option<Judge<'a>>,
    pub workers: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_benchmark(
    ctx: &EvalContext<'_>,
    benchmark_id: &str,
    items: &[Question],
    mode: PromptMode,
    metrics: &[Metric],
    sample_n: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let chosen = sample_indices(items.len(), sample_n, seed);
    let results = parallel_map(chosen.len(), ctx.workers, |j| {
        let q = &items[chosen[j]];
        let cfg = RolloutConfig::evaluation(q.task_family, mode);
        let prompt = task_prompt(q.task_family, mode, &q.question_text);
        match ctx.driver.run_rollout(&prompt, &cfg, seed.wrapping_add(j as u64)) {
            Ok(o) => score_item(q, extract_answer(&o.transcript), metrics, ctx.judge.as_ref()),
            Err(e) => {
                let mut r = score_item(q, None, &[], None);
                r.error = Some(e.to_string());
                r
            }
        }
    })?;
    Ok(EvalReport {
        benchmark_id: benchmark_id.to_string(),
        n_samples: results.len(),
        metrics: aggregate(&results, metrics),
        complete: results.iter().all(|r| r.error.is_none()),
        items: results,
    })
}
