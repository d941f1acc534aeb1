use ur2_core::prompts::FALLBACK_SUMMARY;
use ur2_core::protocol::{
    parse_transcript, validate_format, FormatLimits, PromptMode, TaskFamily, Transcript,
};
use ur2_core::rewards::{
    match_answer, score_stage1, score_stage2, Preset, RewardConfig, RewardError, Stage,
};
use ur2_core::rollout::injection;

fn q(text: &str) -> String {
    format!("<|begin_of_query|> {text} <|end_of_query|>")
}

fn transcript(raw: &str, mode: PromptMode) -> Transcript {
    parse_transcript("Q: ", raw, TaskFamily::OpenQa, mode)
}

fn two_query(answer: &str, fallbacks: usize) -> String {
    let docs = |i: usize| {
        if i < fallbacks {
            injection(FALLBACK_SUMMARY, true)
        } else {
            injection("Paris is the capital of France.", false)
        }
    };
    format!(
        "First. {}{} Then. {}{} So \\boxed{{{answer}}}",
        q("capital of France"),
        docs(0),
        q("population of Paris"),
        docs(1)
    )
}

fn stage1(raw: &str, preset: Preset) -> f64 {
    let t = transcript(raw, PromptMode::Retrieval);
    let r = validate_format(&t, &FormatLimits::for_family(t.task_family));
    score_stage1(&t, &r, &RewardConfig::new(Stage::One, preset))
        .unwrap()
        .total
}

fn stage2(raw: &str, gold: &str, cfg: &RewardConfig) -> f64 {
    let t = transcript(raw, PromptMode::Retrieval);
    let r = validate_format(&t, &FormatLimits::for_family(t.task_family));
    score_stage2(&t, &r, gold, cfg).unwrap().total
}

#[test]
fn preset_table() {
    let raw = two_query("Paris", 0);
    let got: Vec<f64> = Preset::ALL.iter().map(|p| stage1(&raw, *p)).collect();
    assert_eq!(got, vec![5.0, 8.0, 4.0, 2.0]);
}

#[test]
fn stage1_examples() {
    let one = format!(
        "x {}{} \\boxed{{a}}",
        q("capital"),
        injection(FALLBACK_SUMMARY, true)
    );
    assert_eq!(stage1(&one, Preset::Default7B), 1.0 + 3.0 - 0.5);
    // Two stray delimiters in model text: two violations.
    let bad = format!("{} <|end_of_query|> <|end_of_documents|>", two_query("a", 0));
    assert_eq!(stage1(&bad, Preset::Default7B), -2.0 + 4.0);
}

#[test]
fn stage1_ignores_answer() {
    let raw = two_query("Paris", 0);
    let t = transcript(&raw, PromptMode::Retrieval);
    let r = validate_format(&t, &FormatLimits::for_family(t.task_family));
    let cfg = RewardConfig::new(Stage::One, Preset::Default7B);
    assert_eq!(score_stage1(&t, &r, &cfg), score_stage1(&t, &r, &cfg));
    assert_eq!(stage1(&two_query("London", 0), Preset::Default7B), 5.0);
}

#[test]
fn stage2_examples() {
    let cfg = RewardConfig::new(Stage::Two, Preset::Default7B);
    assert_eq!(stage2(&two_query("Paris", 0), "paris", &cfg), 3.0);
    assert_eq!(stage2(&two_query("Paris", 1), "paris", &cfg), 2.5);
    let bad = format!("{} <|end_of_query|>", two_query("Rome", 1));
    assert_eq!(stage2(&bad, "paris", &cfg), -0.5);
    let t = transcript("x", PromptMode::Direct);
    let r = validate_format(&t, &FormatLimits::for_family(t.task_family));
    assert_eq!(score_stage2(&t, &r, " ", &cfg), Err(RewardError::MissingGold));
}

#[test]
fn fallback_costs_half_each() {
    let c2 = RewardConfig::new(Stage::Two, Preset::Default7B);
    for n in 0..2 {
        let a = two_query("Paris", n);
        let b = two_query("Paris", n + 1);
        assert_eq!(stage1(&a, Preset::Default7B) - stage1(&b, Preset::Default7B), 0.5);
        assert_eq!(stage2(&a, "Paris", &c2) - stage2(&b, "Paris", &c2), 0.5);
    }
}

#[test]
fn mcq_weak_window() {
    let raw = two_query("Paris", 0);
    let cfg = RewardConfig::new(Stage::Two, Preset::McqWeak);
    assert_eq!(stage2(&raw, "Paris", &cfg.clone().at_step(0)), 3.0 + 1.0);
    assert_eq!(stage2(&raw, "Paris", &cfg.clone().at_step(10)), 3.0);
    let mut late = cfg.clone();
    late.warm_steps = 15;
    assert_eq!(stage2(&raw, "Paris", &late.at_step(12)), 4.0);
}

#[test]
fn wrong_stage_rejected() {
    let t = transcript("x", PromptMode::Direct);
    let r = validate_format(&t, &FormatLimits::for_family(t.task_family));
    assert!(matches!(
        score_stage1(&t, &r, &RewardConfig::new(Stage::Two, Preset::Default7B)),
        Err(RewardError::StageMismatch { .. })
    ));
}

#[test]
fn matcher_examples() {
    assert!(match_answer(Some("C"), "C", TaskFamily::Mcq));
    assert!(match_answer(Some("c"), "C", TaskFamily::Mcq));
    assert!(!match_answer(None, "B", TaskFamily::Mcq));
    assert!(!match_answer(Some("1/2"), "0.5", TaskFamily::Math));
    assert!(match_answer(Some("{+ 12}"), "12", TaskFamily::Math));
    assert!(match_answer(Some("The Ninth Gate!"), "ninth gate", TaskFamily::OpenQa));
    assert!(!match_answer(Some(""), "x", TaskFamily::OpenQa));
}
