use proptest::prelude::*;
use ur2_core::curriculum::{
    apply_mixing, assign_mode, bucket, difficulty_score, sample_epoch, Bucket, CurriculumError,
    CurriculumItem, MixingPolicy, Quotas,
};
use ur2_core::protocol::{PromptMode, TaskFamily};

// Interval membership written out from the closed/open bounds.
fn bucket_oracle(s: f64) -> Option<Bucket> {
    if (0.8..=1.0).contains(&s) {
        Some(Bucket::Easy)
    } else if (0.5..0.8).contains(&s) {
        Some(Bucket::Medium)
    } else if (0.2..0.5).contains(&s) {
        Some(Bucket::Hard)
    } else if (0.0..0.2).contains(&s) {
        Some(Bucket::Filtered)
    } else {
        None
    }
}

proptest! {
    #[test]
    fn bucket_agrees_with_intervals(s in -0.5f64..1.5) {
        prop_assert_eq!(bucket(s).ok(), bucket_oracle(s));
    }

    #[test]
    fn quotas_sum_and_ratio(tenths in 0usize..500) {
        let n = tenths * 10;
        let q = Quotas::for_epoch(n);
        prop_assert_eq!((q.hard, q.medium, q.easy), (7 * tenths, 2 * tenths, tenths));
    }

    #[test]
    fn quotas_any_n(n in 0usize..5000) {
        let q = Quotas::for_epoch(n);
        prop_assert_eq!(q.hard + q.medium + q.easy, n);
        prop_assert_eq!(q.hard, n * 7 / 10);
    }

    #[test]
    fn epochs_never_contain_filtered(seed in any::<u64>(), n in 1usize..200) {
        let p = pool(40, 30, 20, 25);
        let e = sample_epoch(&p, n, seed).unwrap();
        prop_assert_eq!(e.items.len(), n);
        prop_assert!(e.items.iter().all(|it| it.bucket != Bucket::Filtered));
    }
}

fn item(id: String, family: TaskFamily, s: f64) -> CurriculumItem {
    CurriculumItem::new(id, "text", "A", family, s).unwrap()
}

fn pool(hard: usize, medium: usize, easy: usize, filtered: usize) -> Vec<CurriculumItem> {
    let mut v = Vec::new();
    for (count, s, tag) in [(hard, 0.3, "h"), (medium, 0.6, "m"), (easy, 0.9, "e"), (filtered, 0.1, "f")] {
        for i in 0..count {
            v.push(item(format!("{tag}{i}"), TaskFamily::Math, s));
        }
    }
    v
}

#[test]
fn boundaries() {
    assert_eq!(bucket(0.2).unwrap(), Bucket::Hard);
    assert_eq!(bucket(0.5).unwrap(), Bucket::Medium);
    assert_eq!(bucket(0.8).unwrap(), Bucket::Easy);
    assert_eq!(bucket(1.0).unwrap(), Bucket::Easy);
    assert_eq!(bucket(0.85).unwrap(), Bucket::Easy);
    assert_eq!(bucket(0.0).unwrap(), Bucket::Filtered);
    assert!(matches!(bucket(1.0000001), Err(CurriculumError::OutOfRange(_))));
    assert!(bucket(f64::NAN).is_err());
}

#[test]
fn difficulty_examples() {
    assert_eq!(difficulty_score(10, 20).unwrap(), 0.5);
    assert_eq!(bucket(difficulty_score(20, 20).unwrap()).unwrap(), Bucket::Easy);
    assert_eq!(bucket(difficulty_score(3, 20).unwrap()).unwrap(), Bucket::Filtered);
    assert!(difficulty_score(1, 0).is_err());
}

#[test]
fn epoch_splits() {
    let p = pool(1000, 400, 200, 100);
    let count = |e: &[CurriculumItem], b| e.iter().filter(|it| it.bucket == b).count();
    let e = sample_epoch(&p, 1000, 3).unwrap();
    assert_eq!(
        (count(&e.items, Bucket::Hard), count(&e.items, Bucket::Medium), count(&e.items, Bucket::Easy)),
        (700, 200, 100)
    );
    assert!(e.with_replacement.is_empty());
    let e = sample_epoch(&p, 10, 3).unwrap();
    assert_eq!(
        (count(&e.items, Bucket::Hard), count(&e.items, Bucket::Medium), count(&e.items, Bucket::Easy)),
        (7, 2, 1)
    );
    assert_eq!(sample_epoch(&p, 50, 9).unwrap(), sample_epoch(&p, 50, 9).unwrap());
}

#[test]
fn exhausted_bucket_is_reported() {
    let p = pool(5, 10, 10, 0);
    let e = sample_epoch(&p, 100, 1).unwrap();
    assert_eq!(e.items.len(), 100);
    assert_eq!(e.with_replacement, vec![Bucket::Hard, Bucket::Medium]);
    assert!(matches!(
        sample_epoch(&pool(0, 10, 10, 5), 10, 1),
        Err(CurriculumError::EmptyBucket { bucket: Bucket::Hard, quota: 7 })
    ));
}

#[test]
fn mode_rules() {
    let policy = MixingPolicy::solve(&[], 0);
    let mode = |f, s| assign_mode(&item("x".into(), f, s), &policy);
    assert_eq!(mode(TaskFamily::Math, 0.3), PromptMode::Retrieval);
    assert_eq!(mode(TaskFamily::Math, 0.6), PromptMode::Direct);
    assert_eq!(mode(TaskFamily::OpenQa, 0.9), PromptMode::Retrieval);
    assert_eq!(mode(TaskFamily::OpenQa, 0.3), PromptMode::Retrieval);
}

#[test]
fn mcq_mixing_balances() {
    let mut items: Vec<CurriculumItem> = (0..600)
        .map(|i| item(format!("h{i}"), TaskFamily::Mcq, 0.3))
        .chain((0..400).map(|i| item(format!("r{i}"), TaskFamily::Mcq, if i % 2 == 0 { 0.6 } else { 0.9 })))
        .collect();
    for seed in [0, 1, 77] {
        let policy = MixingPolicy::solve(&items, seed);
        assert!((policy.mcq_hard_probability - 5.0 / 6.0).abs() < 1e-12);
        apply_mixing(&mut items, &policy);
        let retrieval = items.iter().filter(|it| it.prompt_mode == PromptMode::Retrieval).count();
        assert_eq!(retrieval, 500);
        assert!(items
            .iter()
            .filter(|it| it.prompt_mode == PromptMode::Retrieval)
            .all(|it| it.bucket == Bucket::Hard));
    }
}
