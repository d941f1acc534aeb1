//! Difficulty buckets, 7:2:1 epoch sampling and retrieval/direct task mixing.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::protocol::{PromptMode, TaskFamily};
use crate::tokens::fnv1a64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Bucket {
    Easy,
    Medium,
    Hard,
    Filtered,
}

impl Bucket {
    pub const SAMPLED: [Bucket; 3] = [Bucket::Hard, Bucket::Medium, Bucket::Easy];
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CurriculumError {
    #[error("difficulty score {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("bucket {bucket:?} is empty but its quota is {quota}")]
    EmptyBucket { bucket: Bucket, quota: usize },
    #[error("n_rollouts must be at least 1")]
    NoRollouts,
    #[error("{correct} correct out of {n} rollouts")]
    TooManyCorrect { correct: usize, n: usize },
}

/// Maps a solve rate to its bucket. Lower bounds are inclusive, and 1.0 is
/// Easy.
pub fn bucket(s: f64) -> Result<Bucket, CurriculumError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(CurriculumError::OutOfRange(s));
    }
    Ok(if s >= 0.8 {
        Bucket::Easy
    } else if s >= 0.5 {
        Bucket::Medium
    } else if s >= 0.2 {
        Bucket::Hard
    } else {
        Bucket::Filtered
    })
}

pub fn difficulty_score(correct: usize, n_rollouts: usize) -> Result<f64, CurriculumError> {
    if n_rollouts == 0 {
        return Err(CurriculumError::NoRollouts);
    }
    if correct > n_rollouts {
        return Err(CurriculumError::TooManyCorrect {
            correct,
            n: n_rollouts,
        });
    }
    Ok(correct as f64 / n_rollouts as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumItem {
    pub question_id: String,
    pub question_text: String,
    pub gold: String,
    pub task_family: TaskFamily,
    pub score_s: f64,
    pub bucket: Bucket,
    pub prompt_mode: PromptMode,
}

impl CurriculumItem {
    /// Builds an item with its bucket derived from `score_s` and direct mode.
    pub fn new(
        question_id: impl Into<String>,
        question_text: impl Into<String>,
        gold: impl Into<String>,
        task_family: TaskFamily,
        score_s: f64,
    ) -> Result<Self, CurriculumError> {
        Ok(CurriculumItem {
            question_id: question_id.into(),
            question_text: question_text.into(),
            gold: gold.into(),
            task_family,
            score_s,
            bucket: bucket(score_s)?,
            prompt_mode: PromptMode::Direct,
        })
    }

    pub fn is_consistent(&self) -> bool {
        bucket(self.score_s).map_or(false, |b| b == self.bucket)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quotas {
    pub hard: usize,
    pub medium: usize,
    pub easy: usize,
}

impl Quotas {
    /// Hard and Medium are floored; Easy takes the remainder.
    pub fn for_epoch(n: usize) -> Self {
        let hard = n * 7 / 10;
        let medium = n * 2 / 10;
        Quotas {
            hard,
            medium,
            easy: n - hard - medium,
        }
    }

    pub fn get(&self, b: Bucket) -> usize {
        match b {
            Bucket::Hard => self.hard,
            Bucket::Medium => self.medium,
            Bucket::Easy => self.easy,
            Bucket::Filtered => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSample {
    pub items: Vec<CurriculumItem>,
    pub quotas: Quotas,
    /// Buckets whose quota exceeded their size and were topped up with
    /// replacement.
    pub with_replacement: Vec<Bucket>,
}

/// Draws one epoch of `n` items in 7:2:1 Hard/Medium/Easy proportion.
/// Filtered items are never drawn.
pub fn sample_epoch(
    pool: &[CurriculumItem],
    n: usize,
    seed: u64,
) -> Result<EpochSample, CurriculumError> {
    let quotas = Quotas::for_epoch(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n);
    let mut with_replacement = Vec::new();
    for b in Bucket::SAMPLED {
        let quota = quotas.get(b);
        if quota == 0 {
            continue;
        }
        let mut members: Vec<&CurriculumItem> = pool.iter().filter(|it| it.bucket == b).collect();
        if members.is_empty() {
            return Err(CurriculumError::EmptyBucket { bucket: b, quota });
        }
        members.shuffle(&mut rng);
        let take = quota.min(members.len());
        items.extend(members[..take].iter().map(|it| (*it).clone()));
        if quota > members.len() {
            with_replacement.push(b);
            for _ in members.len()..quota {
                let i = rng.gen_range(0..members.len());
                items.push(members[i].clone());
            }
        }
    }
    items.shuffle(&mut rng);
    Ok(EpochSample {
        items,
        quotas,
        with_replacement,
    })
}

/// Seeded retrieval/direct assignment for mcq items, solved so that half of
/// the mcq pool uses retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingPolicy {
    pub seed: u64,
    /// Share of Hard mcq items that receive retrieval.
    pub mcq_hard_probability: f64,
    /// Mcq ids the policy was solved over.
    pub mcq_pool: BTreeSet<String>,
    pub mcq_retrieval: BTreeSet<String>,
}

impl MixingPolicy {
    pub fn solve(pool: &[CurriculumItem], seed: u64) -> Self {
        let mcq: Vec<&CurriculumItem> = pool
            .iter()
            .filter(|it| it.task_family == TaskFamily::Mcq && it.bucket != Bucket::Filtered)
            .collect();
        let target = mcq.len() / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hard: Vec<&str> = mcq
            .iter()
            .filter(|it| it.bucket == Bucket::Hard)
            .map(|it| it.question_id.as_str())
            .collect();
        let mut rest: Vec<&str> = mcq
            .iter()
            .filter(|it| it.bucket != Bucket::Hard)
            .map(|it| it.question_id.as_str())
            .collect();
        hard.shuffle(&mut rng);
        rest.shuffle(&mut rng);

        let mut chosen = BTreeSet::new();
        let p = if hard.is_empty() {
            0.0
        } else {
            (target as f64 / hard.len() as f64).min(1.0)
        };
        if hard.len() >= target {
            chosen.extend(hard[..target].iter().map(|s| String::from(*s)));
        } else {
            chosen.extend(hard.iter().map(|s| String::from(*s)));
            chosen.extend(rest[..target - hard.len()].iter().map(|s| String::from(*s)));
        }
        MixingPolicy {
            seed,
            mcq_hard_probability: p,
            mcq_pool: mcq.iter().map(|it| it.question_id.clone()).collect(),
            mcq_retrieval: chosen,
        }
    }

    /// Retrieval for an mcq item the policy was not solved over: Hard items
    /// only, by a seeded hash draw at the solved probability.
    fn unseen_mcq(&self, item: &CurriculumItem) -> bool {
        if item.bucket != Bucket::Hard {
            return false;
        }
        let mut key = String::from(item.question_id.as_str());
        key.push_str(&alloc::format!("#{}", self.seed));
        let u = (fnv1a64(key.as_bytes()) >> 11) as f64 / (1u64 << 53) as f64;
        u < self.mcq_hard_probability
    }
}

pub fn assign_mode(item: &CurriculumItem, policy: &MixingPolicy) -> PromptMode {
    let retrieval = match item.task_family {
        TaskFamily::Math => item.bucket == Bucket::Hard,
        TaskFamily::OpenQa => true,
        TaskFamily::Mcq => {
            if policy.mcq_pool.contains(&item.question_id) {
                policy.mcq_retrieval.contains(&item.question_id)
            } else {
                policy.unseen_mcq(item)
            }
        }
    };
    if retrieval {
        PromptMode::Retrieval
    } else {
        PromptMode::Direct
    }
}

/// Assigns modes to every item in place.
pub fn apply_mixing(items: &mut [CurriculumItem], policy: &MixingPolicy) {
    for it in items.iter_mut() {
        it.prompt_mode = assign_mode(it, policy);
    }
}
