//! Allocation-only core of the ur2 training data plane.
//!
//! Everything in this crate is a pure function over owned or borrowed data:
//! the transcript tag protocol, stage rewards, group/batch advantage
//! normalization with retrieval masking, difficulty curriculum, evaluation
//! metrics and the lexical corpus index. IO, networking, threading and the
//! CLI live in the `ur2` companion crate.
//!
//! The crate is `#![no_std]` and only needs `alloc`.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod credit;
pub mod curriculum;
pub mod metrics;
pub mod numfmt;
pub mod prompts;
pub mod protocol;
pub mod retrieval;
pub mod rewards;
pub mod rollout;
pub mod tokens;

pub use credit::{
    build_action_mask, compute_advantages, normalize_rewards, AdvantageBatch, CreditError,
    NormalizedRewards, ScoredGroup, TrajectoryRecord,
};
pub use curriculum::{
    assign_mode, bucket, sample_epoch, Bucket, CurriculumError, CurriculumItem, EpochSample,
    MixingPolicy,
};
pub use metrics::{exact_match, normalize_answer, token_f1, JudgeKind, Verdict};
pub use protocol::{
    extract_answer, parse_transcript, validate_format, FormatLimits, FormatReport, PromptMode,
    Segment, SegmentKind, TaskFamily, Transcript, ViolationKind,
};
pub use retrieval::{CorpusChunk, CorpusIndex, RetrievalError, RetrievalResult, ScoredChunk};
pub use rewards::{
    match_answer, score_stage1, score_stage2, Preset, RewardBreakdown, RewardConfig, RewardError,
    Stage,
};
pub use rollout::{RolloutBudget, RolloutGroup};
pub use tokens::{Token, TokenId, Tokenizer, WhitespaceTokenizer};
