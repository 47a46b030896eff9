use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqa_balance_core::data::{
    AnnotationResult, AnswerSet, DataStore, FeatureVector, ImageRecord, Outcome, QuestionRecord, Split, TaskStatus,
};
use vqa_balance_core::knn::neighbor_table;
use vqa_balance_core::pipeline::{
    add_round_answer, aggregate_round, assemble_balanced, balance_report, create_tasks, entropy_bits,
    explanation_tasks, generate_tasks, ingest_result, original_split, subsample_questions, DatasetSplit,
    QaInstance,
};
use vqa_balance_core::Error;

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// `n_images` train images on a random cloud, and one "yes" question on each
/// of the first `n_questions` images.
fn store(n_images: usize, n_questions: usize, seed: u64) -> DataStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = DataStore::new();
    for i in 0..n_images {
        s.insert_image(ImageRecord {
            image_id: format!("i{i:03}"),
            features: FeatureVector::raw((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()),
            split: Split::Train,
            display_uri: None,
        })
        .unwrap();
    }
    for i in 0..n_questions {
        let qid = format!("q{i:03}");
        s.insert_question(QuestionRecord::new(qid.clone(), format!("i{i:03}"), tokens("is there a dog")))
            .unwrap();
        s.insert_answers(AnswerSet::new(qid, &["yes"; 10]).unwrap()).unwrap();
    }
    s
}

fn with_tasks(n_images: usize, n_questions: usize) -> DataStore {
    let mut s = store(n_images, n_questions, 1);
    let nb = neighbor_table(&s, 24).unwrap();
    create_tasks(&mut s, &nb).unwrap();
    s
}

fn result(task_id: &str, outcome: Outcome, who: &str) -> AnnotationResult {
    AnnotationResult {
        task_id: task_id.into(),
        outcome,
        annotator_id: who.into(),
        timestamp: 1,
    }
}

fn pick_first(s: &mut DataStore, task_id: &str) -> String {
    let c = s.task(task_id).unwrap().candidate_image_ids[0].clone();
    ingest_result(s, result(task_id, Outcome::Pick(c.clone()), "a")).unwrap();
    c
}

#[test]
fn one_task_with_ordered_candidates() {
    let s = store(30, 1, 2);
    let nb = neighbor_table(&s, 24).unwrap();
    let tasks = generate_tasks(&s, &nb, 24).unwrap();
    assert_eq!(tasks.len(), 1);
    let t = &tasks[0];
    assert_eq!(t.status, TaskStatus::Open);
    assert_eq!(t.shown_answer, "yes");
    let want: Vec<&str> = nb["i000"].ids().take(24).collect();
    assert_eq!(t.candidate_image_ids, want);
    assert!(!t.candidate_image_ids.contains(&"i000".to_string()));
}

#[test]
fn too_few_images_is_reported_per_question() {
    let s = store(20, 2, 2);
    let nb = neighbor_table(&s, 24).unwrap();
    match generate_tasks(&s, &nb, 24) {
        Err(Error::InsufficientNeighbors(q)) => assert_eq!(q, vec!["q000", "q001"]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn questions_on_one_image_share_candidates() {
    let mut s = store(30, 0, 3);
    for j in 0..3 {
        let qid = format!("q{j}");
        s.insert_question(QuestionRecord::new(qid.clone(), "i005", tokens("what color is it")))
            .unwrap();
        s.insert_answers(AnswerSet::new(qid, &["red"; 10]).unwrap()).unwrap();
    }
    let nb = neighbor_table(&s, 24).unwrap();
    let tasks = generate_tasks(&s, &nb, 24).unwrap();
    assert_eq!(tasks.len(), 3);
    let ids: std::collections::BTreeSet<_> = tasks.iter().map(|t| &t.task_id).collect();
    assert_eq!(ids.len(), 3);
    assert!(tasks.iter().all(|t| t.candidate_image_ids == tasks[0].candidate_image_ids));
}

#[test]
fn ingest_transitions() {
    let mut s = with_tasks(30, 3);
    let picked = pick_first(&mut s, "task-q000");
    assert_eq!(s.task("task-q000").unwrap().status, TaskStatus::Picked);
    let round = s.round("task-q000").unwrap();
    assert_eq!(round.image_id, picked);
    assert!(round.answers.is_empty());

    ingest_result(&mut s, result("task-q001", Outcome::NotPossible, "a")).unwrap();
    assert_eq!(s.task("task-q001").unwrap().status, TaskStatus::NotPossible);
    assert!(s.round("task-q001").is_none());

    // original image is never a candidate
    let err = ingest_result(&mut s, result("task-q002", Outcome::Pick("i002".into()), "a"));
    assert!(matches!(err, Err(Error::NotACandidate { .. })), "{err:?}");
    assert_eq!(s.task("task-q002").unwrap().status, TaskStatus::Open);

    // closed task
    let err = ingest_result(&mut s, result("task-q001", Outcome::NotPossible, "b"));
    assert!(matches!(err, Err(Error::TaskState { .. })));
    let err = ingest_result(&mut s, result("task-none", Outcome::NotPossible, "b"));
    assert!(matches!(err, Err(Error::Unknown { .. })));
}

#[test]
fn aggregation_examples() {
    let mut s = with_tasks(30, 3);
    pick_first(&mut s, "task-q000");
    pick_first(&mut s, "task-q001");
    pick_first(&mut s, "task-q002");

    let mut a = vec!["no"; 8];
    a.extend(["yes"; 2]);
    let p = aggregate_round(&mut s, "task-q000", &a).unwrap();
    assert_eq!(p.complement_answers.consensus, "no");
    assert!(!p.mismatch);
    assert_eq!(s.pair("q000"), Some(&p));

    let mut a = vec!["yes"; 6];
    a.extend(["no"; 4]);
    assert!(aggregate_round(&mut s, "task-q001", &a).unwrap().mismatch);

    assert!(matches!(
        aggregate_round(&mut s, "task-q002", &["no"; 9]),
        Err(Error::AnswerCount { expected: 10, got: 9 })
    ));
    // already aggregated
    assert!(matches!(
        aggregate_round(&mut s, "task-q000", &["no"; 10]),
        Err(Error::TaskState { .. })
    ));
}

#[test]
fn aggregate_requires_picked_state() {
    let mut s = with_tasks(30, 1);
    assert!(matches!(
        aggregate_round(&mut s, "task-q000", &["no"; 10]),
        Err(Error::TaskState { .. })
    ));
}

#[test]
fn incremental_round() {
    let mut s = with_tasks(30, 1);
    pick_first(&mut s, "task-q000");
    assert!(add_round_answer(&mut s, "task-q000", "   ").is_err());
    for i in 0..9 {
        assert_eq!(add_round_answer(&mut s, "task-q000", if i < 5 { " No" } else { "yes" }).unwrap(), None);
    }
    let p = add_round_answer(&mut s, "task-q000", "no").unwrap().unwrap();
    assert_eq!(p.complement_answers.consensus, "no");
    assert_eq!(p.complement_answers.answers.len(), 10);
    assert!(add_round_answer(&mut s, "task-q000", "no").is_err());
}

fn collected(n: usize, picked: usize, mismatched: usize) -> DataStore {
    let mut s = with_tasks(n + 30, n);
    for i in 0..n {
        let tid = format!("task-q{i:03}");
        if i < picked {
            pick_first(&mut s, &tid);
            let ans = if i < mismatched { "yes" } else { "no" };
            aggregate_round(&mut s, &tid, &[ans; 10]).unwrap();
        } else {
            ingest_result(&mut s, result(&tid, Outcome::NotPossible, "a")).unwrap();
        }
    }
    s
}

#[test]
fn balanced_split_sizes() {
    let s = collected(100, 78, 0);
    let b = assemble_balanced(&s, Split::Train).unwrap();
    assert_eq!(b.len(), 178);
    assert_eq!(b.pairs.len(), 78);
    let r = balance_report(&b);
    assert!((r.not_possible_rate - 0.22).abs() < 1e-12);
    assert_eq!(r.mismatch_rate, 0.0);

    let s = collected(10, 10, 1);
    let b = assemble_balanced(&s, Split::Train).unwrap();
    assert_eq!(b.len(), 20);
    assert_eq!(b.pairs.len(), 9);
    assert!(b.instance("q000#c").is_some(), "mismatched complement stays as an instance");
    assert!(b.pairs.iter().all(|p| p.question_id != "q000"));
}

#[test]
fn nothing_picked_equals_original() {
    let s = collected(10, 0, 0);
    let b = assemble_balanced(&s, Split::Train).unwrap();
    assert_eq!(b.instances, original_split(&s, Split::Train).instances);
    assert!(b.pairs.is_empty());
    assert!(assemble_balanced(&s, Split::Val).unwrap().is_empty());
}

#[test]
fn pending_tasks_block_assembly() {
    let mut s = with_tasks(30, 2);
    assert!(matches!(assemble_balanced(&s, Split::Train), Err(Error::PendingTasks(2))));
    pick_first(&mut s, "task-q000");
    ingest_result(&mut s, result("task-q001", Outcome::NotPossible, "a")).unwrap();
    // picked but not aggregated is still pending
    assert!(matches!(assemble_balanced(&s, Split::Train), Err(Error::PendingTasks(1))));
}

#[test]
fn assembly_is_idempotent_and_survives_a_round_trip() {
    let s = collected(40, 30, 4);
    let a = assemble_balanced(&s, Split::Train).unwrap();
    assert_eq!(a, assemble_balanced(&s, Split::Train).unwrap());
    let reloaded = DataStore::from_records(s.to_records()).unwrap();
    assert_eq!(a, assemble_balanced(&reloaded, Split::Train).unwrap());
}

#[test]
fn explanation_tasks_skip_mismatches() {
    let s = collected(10, 6, 2);
    let tasks = explanation_tasks(&s, Split::Train);
    assert_eq!(tasks.len(), 4);
    for t in &tasks {
        assert_eq!(t.candidates.len(), 24);
        assert!(t.candidates.contains(&t.picked));
        assert_eq!(t.answer, "yes");
    }
}

fn typed_split(groups: &[(&str, &[(&str, usize)])]) -> DatasetSplit {
    let mut instances = Vec::new();
    for (qt, hist) in groups {
        for (ans, n) in hist.iter() {
            for _ in 0..*n {
                let id = format!("x{}", instances.len());
                instances.push(QaInstance {
                    instance_id: id.clone(),
                    question_id: id.clone(),
                    image_id: "i".into(),
                    tokens: vec![],
                    question_type: qt.to_string(),
                    answers: AnswerSet::new(id, &[*ans; 10]).unwrap(),
                    complement: false,
                });
            }
        }
    }
    DatasetSplit {
        split: None,
        instances,
        pairs: vec![],
        collection: Default::default(),
    }
}

#[test]
fn entropy_examples() {
    let r = balance_report(&typed_split(&[("is", &[("yes", 50), ("no", 50)])]));
    assert!((r.per_question_type["is"].entropy_bits - 1.0).abs() < 1e-12);
    let r = balance_report(&typed_split(&[("is", &[("yes", 100)])]));
    assert_eq!(r.per_question_type["is"].entropy_bits, 0.0);
    let r = balance_report(&typed_split(&[
        ("is", &[("yes", 30), ("no", 30)]),
        ("what color", &[("red", 40)]),
    ]));
    assert!((r.weighted_entropy - 0.6).abs() < 1e-12);
    assert_eq!(r.instances, 100);
}

#[test]
fn subsample_keeps_whole_questions() {
    let s = collected(40, 30, 0);
    let b = assemble_balanced(&s, Split::Train).unwrap();
    let half = subsample_questions(&b, 35, 9);
    assert!(half.len() >= 35 && half.len() <= 36);
    for p in &half.pairs {
        assert!(half.instance(&p.original).is_some() && half.instance(&p.complement).is_some());
    }
    assert_eq!(half, subsample_questions(&b, 35, 9));
}

fn histogram(max_types: usize) -> impl Strategy<Value = BTreeMap<(usize, usize), usize>> {
    prop::collection::btree_map((0..max_types, 0..5usize), 1..20usize, 1..20)
}

proptest! {
    #[test]
    fn report_invariants(h in histogram(4)) {
        let names = ["a", "b", "c", "d"];
        let answers = ["w", "x", "y", "z", "v"];
        let mut groups: BTreeMap<&str, Vec<(&str, usize)>> = BTreeMap::new();
        for ((t, a), n) in &h {
            groups.entry(names[*t]).or_default().push((answers[*a], *n));
        }
        let g: Vec<(&str, &[(&str, usize)])> = groups.iter().map(|(k, v)| (*k, v.as_slice())).collect();
        let r = balance_report(&typed_split(&g));
        let total: usize = h.values().sum();
        prop_assert_eq!(r.instances, total);
        let mut weights = 0.0;
        let mut weighted = 0.0;
        for stats in r.per_question_type.values() {
            prop_assert_eq!(stats.histogram.values().sum::<usize>(), stats.count);
            prop_assert!(stats.entropy_bits >= 0.0);
            prop_assert!(stats.entropy_bits <= (stats.histogram.len() as f64).log2() + 1e-12);
            let w = stats.count as f64 / total as f64;
            weights += w;
            weighted += w * stats.entropy_bits;
        }
        prop_assert!((weights - 1.0).abs() < 1e-12);
        prop_assert!((weighted - r.weighted_entropy).abs() < 1e-12);
    }

    #[test]
    fn entropy_matches_direct_formula(counts in prop::collection::vec(0..50usize, 1..8)) {
        let total: usize = counts.iter().sum();
        let want: f64 = if total == 0 { 0.0 } else {
            counts.iter().filter(|c| **c > 0).map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln() / std::f64::consts::LN_2
            }).sum()
        };
        prop_assert!((entropy_bits(&counts) - want).abs() < 1e-12);
    }

    #[test]
    fn picked_and_not_possible_cover_closed_tasks(n in 1..25usize, frac in 0.0..1.0f64) {
        let picked = (n as f64 * frac) as usize;
        let mut s = collected(n, picked, 0);
        let b = assemble_balanced(&s, Split::Train).unwrap();
        let c = b.collection;
        prop_assert_eq!(c.picked + c.not_possible, c.closed_tasks);
        prop_assert_eq!(c.closed_tasks, n);
        prop_assert_eq!(b.len(), n + picked);
        for p in &b.pairs {
            let o = b.instance(&p.original).unwrap();
            let q = b.instance(&p.complement).unwrap();
            prop_assert_eq!(&o.tokens, &q.tokens);
            prop_assert_ne!(&o.image_id, &q.image_id);
            prop_assert_ne!(&o.answers.consensus, &q.answers.consensus);
        }
        // store survives serialization-order independent rebuild
        s = DataStore::from_records(s.to_records()).unwrap();
        prop_assert_eq!(assemble_balanced(&s, Split::Train).unwrap(), b);
    }
}
