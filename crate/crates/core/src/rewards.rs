//! Stage-1 (retrieval activation) and Stage-2 (answer quality) rewards.

use alloc::string::String;
use core::fmt;
use core::str::FromStr;
use serde::{Deserialize, Serialize};

use crate::metrics::normalize_answer;
use crate::protocol::{extract_answer, FormatReport, PromptMode, TaskFamily, Transcript, ViolationKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Option<Stage> {
        match n {
            1 => Some(Stage::One),
            2 => Some(Stage::Two),
            _ => None,
        }
    }
}

/// Per-model retrieval reward tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    /// +3 for one served query, +4 for two or more.
    Default7B,
    /// +5 / +7, for small models that trip format penalties often.
    Small3B,
    /// Flat +3 on any retrieval.
    Llama8B,
    /// +0.5 / +1, answer reward from the start, retrieval bonus only in a
    /// warm-up window.
    McqWeak,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Default7B, Preset::Small3B, Preset::Llama8B, Preset::McqWeak];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Default7B => "Default7B",
            Preset::Small3B => "Small3B",
            Preset::Llama8B => "Llama8B",
            Preset::McqWeak => "McqWeak",
        }
    }

    /// (one served query, two or more)
    pub fn retrieval_rewards(self) -> (f64, f64) {
        match self {
            Preset::Default7B => (3.0, 4.0),
            Preset::Small3B => (5.0, 7.0),
            Preset::Llama8B => (3.0, 3.0),
            Preset::McqWeak => (0.5, 1.0),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| alloc::format!("unknown preset '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub stage: Stage,
    pub preset: Preset,
    pub retrieval_reward_single: f64,
    pub retrieval_reward_multi: f64,
    pub fallback_penalty: f64,
    pub answer_reward: f64,
    pub format_bonus: f64,
    /// Stage 1 only: subtracted once per violation.
    pub format_violation_penalty: f64,
    /// McqWeak: the retrieval bonus applies while `step < warm_steps`.
    pub warm_steps: u32,
    /// Current training step.
    pub step: u32,
}

impl RewardConfig {
    pub fn new(stage: Stage, preset: Preset) -> Self {
        let (single, multi) = preset.retrieval_rewards();
        RewardConfig {
            stage,
            preset,
            retrieval_reward_single: single,
            retrieval_reward_multi: multi,
            fallback_penalty: 0.5,
            answer_reward: 2.0,
            format_bonus: 1.0,
            format_violation_penalty: 1.0,
            warm_steps: 10,
            step: 0,
        }
    }

    pub fn at_step(mut self, step: u32) -> Self {
        self.step = step;
        self
    }

    fn retrieval_value(&self, served: usize) -> f64 {
        match served {
            0 => 0.0,
            1 => self.retrieval_reward_single,
            _ => self.retrieval_reward_multi,
        }
    }

    fn warm(&self) -> bool {
        self.preset == Preset::McqWeak && self.step < self.warm_steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub retrieval: f64,
    pub answer: f64,
    /// Penalty magnitude; subtracted in `total`.
    pub fallback: f64,
    pub total: f64,
}

impl RewardBreakdown {
    fn new(format: f64, retrieval: f64, answer: f64, fallback: f64) -> Self {
        RewardBreakdown {
            format,
            retrieval,
            answer,
            fallback,
            total: format + retrieval + answer - fallback,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RewardError {
    #[error("reward config is for stage {expected:?}, called for {got:?}")]
    StageMismatch { expected: Stage, got: Stage },
    #[error("gold answer is empty")]
    MissingGold,
}

fn check_stage(cfg: &RewardConfig, want: Stage) -> Result<(), RewardError> {
    if cfg.stage == want {
        Ok(())
    } else {
        Err(RewardError::StageMismatch {
            expected: cfg.stage,
            got: want,
        })
    }
}

/// Format + retrieval − fallback. Answers are not scored in this stage.
///
/// A query counts towards the retrieval reward only if it was served, i.e.
/// followed by a documents block.
pub fn score_stage1(
    t: &Transcript,
    report: &FormatReport,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    check_stage(cfg, Stage::One)?;
    let format = if report.compliant {
        cfg.format_bonus
    } else {
        -(report.violations.len() as f64) * cfg.format_violation_penalty
    };
    let retrieval = cfg.retrieval_value(t.served_query_count());
    let fallback = cfg.fallback_penalty * t.fallback_count() as f64;
    Ok(RewardBreakdown::new(format, retrieval, 0.0, fallback))
}

/// Answer + format − fallback. Under `McqWeak` inside the warm window the
/// retrieval bonus is added and a retrieval-mode answer with no query gets a
/// single −1 format reward.
pub fn score_stage2(
    t: &Transcript,
    report: &FormatReport,
    gold: &str,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    check_stage(cfg, Stage::Two)?;
    if gold.trim().is_empty() {
        return Err(RewardError::MissingGold);
    }
    let extracted = extract_answer(t);
    let answer = if match_answer(extracted.as_deref(), gold, t.task_family) {
        cfg.answer_reward
    } else {
        0.0
    };
    let mut format = if report.compliant { cfg.format_bonus } else { 0.0 };
    let mut retrieval = 0.0;
    if cfg.warm() {
        retrieval = cfg.retrieval_value(t.served_query_count());
        if t.prompt_mode == PromptMode::Retrieval
            && report.count(ViolationKind::MissingRetrieval) > 0
        {
            format = -cfg.format_violation_penalty;
        }
    }
    let fallback = cfg.fallback_penalty * t.fallback_count() as f64;
    Ok(RewardBreakdown::new(format, retrieval, answer, fallback))
}

/// Strict answer match used for training rewards and difficulty scoring.
///
/// * mcq: single letter, case-insensitive
/// * math: whitespace removed, outer braces and a leading `+` stripped
/// * open_qa: lowercased, punctuation and articles removed
pub fn match_answer(extracted: Option<&str>, gold: &str, family: TaskFamily) -> bool {
    let Some(pred) = extracted else {
        return false;
    };
    match family {
        TaskFamily::Mcq => match (single_letter(pred), single_letter(gold)) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        },
        TaskFamily::Math => {
            let p = normalize_math(pred);
            !p.is_empty() && p == normalize_math(gold)
        }
        TaskFamily::OpenQa => {
            let p = normalize_answer(pred);
            !p.is_empty() && p == normalize_answer(gold)
        }
    }
}

fn single_letter(s: &str) -> Option<char> {
    let mut chars = s.trim().chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => Some(c.to_ascii_uppercase()),
        _ => None,
    }
}

pub fn normalize_math(s: &str) -> String {
    let mut t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    loop {
        let before = t.len();
        if let Some(rest) = t.strip_prefix('+') {
            t = String::from(rest);
        }
        if t.len() >= 2 && t.starts_with('{') && t.ends_with('}') && braces_wrap(&t) {
            t = String::from(&t[1..t.len() - 1]);
        }
        if t.len() == before {
            return t;
        }
    }
}

/// True when the first `{` closes at the last byte.
fn braces_wrap(s: &str) -> bool {
    let mut depth = 0i32;
    for (i, b) in s.bytes().enumerate() {
        match b {
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return i == s.len() - 1;
                }
            }
            _ => {}
        }
    }
    false
}
