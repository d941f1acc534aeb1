//! Question files, difficulty scoring against a baseline backend, and
//! curriculum construction.

use std::path::Path;

use serde::{Deserialize, Serialize};
use ur2_core::curriculum::{
    apply_mixing, difficulty_score, sample_epoch, Bucket, CurriculumError, CurriculumItem,
    EpochSample, MixingPolicy,
};
use ur2_core::protocol::{extract_answer_text, PromptMode, TaskFamily};
use ur2_core::prompts::task_prompt;
use ur2_core::rewards::match_answer;
use ur2_core::rollout::RolloutBudget;

use crate::batch::{read_jsonl, write_jsonl, BatchError};
use crate::gateway::{Backend, GatewayError, GenerationRequest, SamplingParams};
use crate::rollout::{parallel_map, RolloutError};

/// One line of a question file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub question_text: String,
    pub gold: String,
    pub task_family: TaskFamily,
}

/// One line of a scores table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub question_id: String,
    pub question_text: String,
    pub gold: String,
    pub task_family: TaskFamily,
    pub n_rollouts: usize,
    pub correct: usize,
    pub score_s: f64,
}

impl ScoreRecord {
    pub fn to_item(&self) -> Result<CurriculumItem, CurriculumError> {
        CurriculumItem::new(
            self.question_id.clone(),
            self.question_text.clone(),
            self.gold.clone(),
            self.task_family,
            self.score_s,
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CurationError {
    #[error(transparent)]
    Io(#[from] BatchError),
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error(transparent)]
    Pool(#[from] RolloutError),
}

pub fn load_questions(path: &Path) -> Result<Vec<Question>, BatchError> {
    read_jsonl(path)
}

/// Solve rate of `question` over `n_rollouts` direct-prompted samples,
/// graded with the strict answer matcher. Sample `i` uses seed `seed + i`.
pub fn estimate_difficulty(
    backend: &dyn Backend,
    question: &Question,
    n_rollouts: usize,
    seed: u64,
) -> Result<ScoreRecord, CurationError> {
    let prompt = task_prompt(question.task_family, PromptMode::Direct, &question.question_text);
    let budget = RolloutBudget::for_family(question.task_family);
    let mut correct = 0;
    for i in 0..n_rollouts {
        let mut req = GenerationRequest::new(
            &prompt,
            "",
            SamplingParams::TRAINING,
            seed.wrapping_add(i as u64),
        );
        req.max_new_tokens = budget.max_tokens_per_turn;
        let chunk = backend.generate(&req)?;
        let pred = extract_answer_text(&chunk.text, question.task_family);
        if match_answer(pred.as_deref(), &question.gold, question.task_family) {
            correct += 1;
        }
    }
    Ok(ScoreRecord {
        question_id: question.question_id.clone(),
        question_text: question.question_text.clone(),
        gold: question.gold.clone(),
        task_family: question.task_family,
        n_rollouts,
        correct,
        score_s: difficulty_score(correct, n_rollouts)?,
    })
}

pub fn score_questions(
    backend: &dyn Backend,
    questions: &[Question],
    n_rollouts: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<ScoreRecord>, CurationError> {
    parallel_map(questions.len(), workers, |i| {
        estimate_difficulty(backend, &questions[i], n_rollouts, seed)
    })?
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub pool_size: usize,
    pub filtered: usize,
    pub sample: EpochSample,
    pub policy: MixingPolicy,
}

/// Buckets scored questions, draws one 7:2:1 epoch and assigns prompt modes.
pub fn curate(scores: &[ScoreRecord], n: usize, seed: u64) -> Result<CurationReport, CurationError> {
    let pool = scores
        .iter()
        .map(ScoreRecord::to_item)
        .collect::<Result<Vec<_>, _>>()?;
    let mut sample = sample_epoch(&pool, n, seed)?;
    let policy = MixingPolicy::solve(&sample.items, seed);
    apply_mixing(&mut sample.items, &policy);
    Ok(CurationReport {
        pool_size: pool.len(),
        filtered: pool.iter().filter(|it| it.bucket == Bucket::Filtered).count(),
        sample,
        policy,
    })
}

pub fn write_curriculum(path: &Path, items: &[CurriculumItem]) -> Result<usize, BatchError> {
    write_jsonl(path, items)
}

pub fn load_curriculum(path: &Path) -> Result<Vec<CurriculumItem>, BatchError> {
    read_jsonl(path)
}
