//! Two-round complementary-image collection and the balanced dataset it yields.
//!
//! Round one: for each (question, image, consensus answer) triplet an annotator
//! sees the 24 nearest neighbors of the image and picks one where the question
//! still applies but the answer differs, or declares the task not possible.
//! Round two: ten fresh answers are collected for the picked image; their
//! consensus is the complement answer.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::ANSWERS_PER_QUESTION;
use crate::data::{
    invalid, unknown, AnnotationResult, AnnotationTask, AnswerRound, AnswerSet, ComplementaryPair,
    DataStore, Outcome, Split, TaskStatus, CANDIDATES_PER_TASK,
};
use crate::knn::NeighborList;
use crate::{Error, Result};

/// One open task per answered question whose image has at least `k` neighbors.
/// Questions that already have a task are skipped.
pub fn generate_tasks(
    store: &DataStore,
    neighbors: &BTreeMap<String, NeighborList>,
    k: usize,
) -> Result<Vec<AnnotationTask>> {
    let mut tasks = Vec::new();
    let mut short = Vec::new();
    for q in store.questions() {
        let Some(answers) = store.answers_for(&q.question_id) else {
            continue;
        };
        let task_id = AnnotationTask::task_id_for(&q.question_id);
        if store.task(&task_id).is_some() {
            continue;
        }
        let image = store.image(&q.image_id).ok_or_else(|| unknown("image", &q.image_id))?;
        let list = match neighbors.get(&q.image_id) {
            Some(l) if l.neighbors.len() >= k => l,
            _ => {
                short.push(q.question_id.clone());
                continue;
            }
        };
        let mut candidates = Vec::with_capacity(k);
        for id in list.ids().take(k) {
            let c = store.image(id).ok_or_else(|| unknown("image", id))?;
            if c.split != image.split || c.image_id == image.image_id {
                return Err(invalid(&q.question_id, "neighbor list crosses splits or contains the query"));
            }
            candidates.push(id.to_string());
        }
        tasks.push(AnnotationTask {
            task_id,
            question_id: q.question_id.clone(),
            shown_answer: answers.consensus.clone(),
            candidate_image_ids: candidates,
            status: TaskStatus::Open,
        });
    }
    if !short.is_empty() {
        return Err(Error::InsufficientNeighbors(short));
    }
    Ok(tasks)
}

/// Generates tasks with the standard 24 candidates and inserts them.
pub fn create_tasks(store: &mut DataStore, neighbors: &BTreeMap<String, NeighborList>) -> Result<usize> {
    let tasks = generate_tasks(store, neighbors, CANDIDATES_PER_TASK)?;
    let n = tasks.len();
    for t in tasks {
        store.insert_task(t)?;
    }
    Ok(n)
}

/// Closes an open task. A pick opens an empty second-round answer collection.
pub fn ingest_result(store: &mut DataStore, result: AnnotationResult) -> Result<()> {
    let task = store.task(&result.task_id).ok_or_else(|| unknown("task", &result.task_id))?;
    if task.status != TaskStatus::Open {
        return Err(Error::TaskState {
            task_id: result.task_id.clone(),
            status: task.status.as_str(),
            expected: "open",
        });
    }
    let question_id = task.question_id.clone();
    store.insert_result(result.clone())?;
    let task = store.task_mut(&result.task_id).expect("checked above");
    match &result.outcome {
        Outcome::Pick(image_id) => {
            task.status = TaskStatus::Picked;
            store.insert_round(AnswerRound {
                task_id: result.task_id.clone(),
                question_id,
                image_id: image_id.clone(),
                answers: Vec::new(),
            })?;
        }
        Outcome::NotPossible => task.status = TaskStatus::NotPossible,
    }
    Ok(())
}

fn picked_round<'a>(store: &'a DataStore, task_id: &str) -> Result<&'a AnswerRound> {
    let task = store.task(task_id).ok_or_else(|| unknown("task", task_id))?;
    if task.status != TaskStatus::Picked {
        return Err(Error::TaskState {
            task_id: task_id.to_string(),
            status: task.status.as_str(),
            expected: "picked",
        });
    }
    if store.pair(&task.question_id).is_some() {
        return Err(Error::TaskState {
            task_id: task_id.to_string(),
            status: "aggregated",
            expected: "picked",
        });
    }
    Ok(store.round(task_id).expect("picked tasks always have a round"))
}

/// Records the full second round at once and builds the pair.
pub fn aggregate_round<S: AsRef<str>>(
    store: &mut DataStore,
    task_id: &str,
    answers: &[S],
) -> Result<ComplementaryPair> {
    if answers.len() != ANSWERS_PER_QUESTION {
        return Err(Error::AnswerCount {
            expected: ANSWERS_PER_QUESTION,
            got: answers.len(),
        });
    }
    picked_round(store, task_id)?;
    let complement = AnswerSet::new("", answers)?;
    store.round_mut(task_id).expect("checked").answers = complement.answers;
    finish_round(store, task_id)
}

/// Appends one second-round answer. The tenth answer builds and returns the pair.
pub fn add_round_answer(
    store: &mut DataStore,
    task_id: &str,
    answer: &str,
) -> Result<Option<ComplementaryPair>> {
    let round = picked_round(store, task_id)?;
    if round.is_complete() {
        return Err(Error::RoundComplete(task_id.to_string()));
    }
    let answer = crate::answer::normalize_answer(answer);
    if answer.is_empty() {
        return Err(invalid(task_id, "empty answer"));
    }
    let round = store.round_mut(task_id).expect("checked");
    round.answers.push(answer);
    if round.is_complete() {
        finish_round(store, task_id).map(Some)
    } else {
        Ok(None)
    }
}

fn finish_round(store: &mut DataStore, task_id: &str) -> Result<ComplementaryPair> {
    let round = store.round(task_id).expect("checked").clone();
    let original = store
        .answers_for(&round.question_id)
        .ok_or_else(|| unknown("answers", &round.question_id))?
        .clone();
    let question = store.question(&round.question_id).expect("task references a question");
    let complement_answers = AnswerSet::new(round.question_id.clone(), &round.answers)?;
    let pair = ComplementaryPair {
        question_id: round.question_id.clone(),
        original_image_id: question.image_id.clone(),
        complement_image_id: round.image_id.clone(),
        mismatch: complement_answers.consensus == original.consensus,
        original_answers: original,
        complement_answers,
    };
    store.insert_pair(pair.clone())?;
    Ok(pair)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaInstance {
    pub instance_id: String,
    pub question_id: String,
    pub image_id: String,
    pub tokens: Vec<String>,
    pub question_type: String,
    pub answers: AnswerSet,
    pub complement: bool,
}

impl QaInstance {
    pub fn complement_id(question_id: &str) -> String {
        format!("{question_id}#c")
    }
}

/// Original and complement instance ids of a pair whose answers differ.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub question_id: String,
    pub original: String,
    pub complement: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionStats {
    pub closed_tasks: usize,
    pub picked: usize,
    pub not_possible: usize,
    pub pairs: usize,
    pub mismatched: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub split: Option<Split>,
    pub instances: Vec<QaInstance>,
    pub pairs: Vec<EvalPair>,
    pub collection: CollectionStats,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instance(&self, id: &str) -> Option<&QaInstance> {
        self.instances.iter().find(|i| i.instance_id == id)
    }
}

fn in_split(store: &DataStore, image_id: &str, split: Option<Split>) -> bool {
    match split {
        None => true,
        Some(s) => store.image(image_id).is_some_and(|i| i.split == s),
    }
}

fn original_instances(store: &DataStore, split: Option<Split>) -> Vec<QaInstance> {
    store
        .questions()
        .filter(|q| in_split(store, &q.image_id, split))
        .filter_map(|q| {
            let answers = store.answers_for(&q.question_id)?;
            Some(QaInstance {
                instance_id: q.question_id.clone(),
                question_id: q.question_id.clone(),
                image_id: q.image_id.clone(),
                tokens: q.tokens.clone(),
                question_type: q.question_type.clone(),
                answers: answers.clone(),
                complement: false,
            })
        })
        .collect()
}

/// The original (unbalanced) instances of a split.
pub fn original_split(store: &DataStore, split: Split) -> DatasetSplit {
    DatasetSplit {
        split: Some(split),
        instances: original_instances(store, Some(split)),
        pairs: Vec::new(),
        collection: CollectionStats::default(),
    }
}

fn collect(store: &DataStore, split: Option<Split>, strict: bool) -> Result<DatasetSplit> {
    let mut stats = CollectionStats::default();
    let mut pending = 0;
    for t in store.tasks() {
        let q = store.question(&t.question_id).expect("task references a question");
        if !in_split(store, &q.image_id, split) {
            continue;
        }
        match t.status {
            TaskStatus::Open => pending += 1,
            TaskStatus::NotPossible => {
                stats.closed_tasks += 1;
                stats.not_possible += 1;
            }
            TaskStatus::Picked => {
                stats.closed_tasks += 1;
                stats.picked += 1;
                if store.pair(&t.question_id).is_none() {
                    pending += 1;
                }
            }
        }
    }
    if strict && pending > 0 {
        return Err(Error::PendingTasks(pending));
    }

    let mut instances = original_instances(store, split);
    let mut pairs = Vec::new();
    for p in store.pairs() {
        if !in_split(store, &p.original_image_id, split) {
            continue;
        }
        let q = store.question(&p.question_id).expect("pair references a question");
        let complement_id = QaInstance::complement_id(&p.question_id);
        instances.push(QaInstance {
            instance_id: complement_id.clone(),
            question_id: p.question_id.clone(),
            image_id: p.complement_image_id.clone(),
            tokens: q.tokens.clone(),
            question_type: q.question_type.clone(),
            answers: p.complement_answers.clone(),
            complement: true,
        });
        stats.pairs += 1;
        if p.mismatch {
            stats.mismatched += 1;
        } else {
            pairs.push(EvalPair {
                question_id: p.question_id.clone(),
                original: p.question_id.clone(),
                complement: complement_id,
            });
        }
    }
    instances.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    Ok(DatasetSplit {
        split,
        instances,
        pairs,
        collection: stats,
    })
}

/// Originals plus every collected complement. Mismatched pairs stay as
/// instances but are left out of `pairs`.
pub fn assemble_balanced(store: &DataStore, split: Split) -> Result<DatasetSplit> {
    collect(store, Some(split), true)
}

/// Like [`assemble_balanced`] over all splits, tolerating pending tasks.
pub fn balanced_snapshot(store: &DataStore) -> DatasetSplit {
    collect(store, None, false).expect("non-strict collection cannot fail")
}

/// Keeps whole questions (original and complement together) in seeded random
/// order until the instance count reaches `target`.
pub fn subsample_questions(split: &DatasetSplit, target: usize, seed: u64) -> DatasetSplit {
    let mut qids: Vec<&str> = split
        .instances
        .iter()
        .map(|i| i.question_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    qids.shuffle(&mut rng);
    let mut per_q: BTreeMap<&str, usize> = BTreeMap::new();
    for i in &split.instances {
        *per_q.entry(i.question_id.as_str()).or_default() += 1;
    }
    let mut keep = BTreeSet::new();
    let mut count = 0;
    for q in qids {
        if count >= target {
            break;
        }
        count += per_q[q];
        keep.insert(q);
    }
    DatasetSplit {
        split: split.split,
        instances: split
            .instances
            .iter()
            .filter(|i| keep.contains(i.question_id.as_str()))
            .cloned()
            .collect(),
        pairs: split
            .pairs
            .iter()
            .filter(|p| keep.contains(p.question_id.as_str()))
            .cloned()
            .collect(),
        collection: split.collection,
    }
}

/// A picked task whose complement answer differs from the shown answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplainTask {
    pub task_id: String,
    pub question_id: String,
    pub original_image_id: String,
    pub tokens: Vec<String>,
    pub answer: String,
    pub candidates: Vec<String>,
    pub picked: String,
}

/// Explanation supervision: picked tasks with a non-mismatched pair, in task-id order.
pub fn explanation_tasks(store: &DataStore, split: Split) -> Vec<ExplainTask> {
    store
        .tasks()
        .filter(|t| t.status == TaskStatus::Picked)
        .filter_map(|t| {
            let q = store.question(&t.question_id)?;
            if !in_split(store, &q.image_id, Some(split)) {
                return None;
            }
            let pair = store.pair(&t.question_id).filter(|p| !p.mismatch)?;
            Some(ExplainTask {
                task_id: t.task_id.clone(),
                question_id: t.question_id.clone(),
                original_image_id: q.image_id.clone(),
                tokens: q.tokens.clone(),
                answer: t.shown_answer.clone(),
                candidates: t.candidate_image_ids.clone(),
                picked: pair.complement_image_id.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeStats {
    pub count: usize,
    pub histogram: BTreeMap<String, usize>,
    pub entropy_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub instances: usize,
    pub per_question_type: BTreeMap<String, TypeStats>,
    pub weighted_entropy: f64,
    pub not_possible_rate: f64,
    pub mismatch_rate: f64,
}

/// Shannon entropy in bits of a histogram, with 0·log 0 = 0.
pub fn entropy_bits<'a, I: IntoIterator<Item = &'a usize>>(counts: I) -> f64 {
    let counts: Vec<usize> = counts.into_iter().copied().collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * libm::log2(p)
        })
        .sum();
    // -0.0 for single-answer histograms
    h.max(0.0)
}

/// Per-question-type answer entropy and its frequency-weighted mean.
/// An empty split yields a zeroed report.
pub fn balance_report(split: &DatasetSplit) -> BalanceReport {
    let mut per: BTreeMap<String, TypeStats> = BTreeMap::new();
    for inst in &split.instances {
        let e = per.entry(inst.question_type.clone()).or_insert_with(|| TypeStats {
            count: 0,
            histogram: BTreeMap::new(),
            entropy_bits: 0.0,
        });
        e.count += 1;
        *e.histogram.entry(inst.answers.consensus.clone()).or_default() += 1;
    }
    let total = split.instances.len();
    let mut weighted = 0.0;
    for stats in per.values_mut() {
        stats.entropy_bits = entropy_bits(stats.histogram.values());
        weighted += stats.count as f64 / total as f64 * stats.entropy_bits;
    }
    let c = split.collection;
    BalanceReport {
        instances: total,
        per_question_type: per,
        weighted_entropy: weighted,
        not_possible_rate: ratio(c.not_possible, c.closed_tasks),
        mismatch_rate: ratio(c.mismatched, c.pairs),
    }
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}
