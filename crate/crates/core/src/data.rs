//! Record types and the in-memory store.
//!
//! Every insert validates the record against the store's current contents, so a
//! `DataStore` value is always internally consistent.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::answer::{consensus_answer, normalize_answer, question_type, ANSWERS_PER_QUESTION};
use crate::{Error, Result};

/// Number of nearest-neighbor candidates shown per annotation task.
pub const CANDIDATES_PER_TASK: usize = 24;

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl FeatureVector {
    pub fn raw(values: Vec<f64>) -> Self {
        FeatureVector { values, normalized: false }
    }

    /// ℓ2-normalized copy. A zero vector stays zero and keeps `normalized = false`.
    pub fn l2_normalized(values: Vec<f64>) -> Self {
        let norm = l2_norm(&values);
        if norm == 0.0 {
            return FeatureVector::raw(values);
        }
        FeatureVector {
            values: values.into_iter().map(|v| v / norm).collect(),
            normalized: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn validate(&self, id: &str) -> Result<()> {
        if self.values.is_empty() {
            return Err(invalid(id, "empty feature vector"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(invalid(id, "non-finite feature value"));
        }
        if self.normalized && (l2_norm(&self.values) - 1.0).abs() > NORM_TOLERANCE {
            return Err(invalid(id, "normalized flag set but l2 norm is not 1"));
        }
        Ok(())
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// Euclidean distance, summed in index order.
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    libm::sqrt(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub features: FeatureVector,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display_uri: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: String,
    pub image_id: String,
    pub tokens: Vec<String>,
    pub question_type: String,
}

impl QuestionRecord {
    /// Builds a record with `question_type` derived from the tokens.
    pub fn new(question_id: impl Into<String>, image_id: impl Into<String>, tokens: Vec<String>) -> Self {
        let question_type = question_type(&tokens);
        QuestionRecord {
            question_id: question_id.into(),
            image_id: image_id.into(),
            tokens,
            question_type,
        }
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSet {
    pub question_id: String,
    pub answers: Vec<String>,
    pub consensus: String,
}

impl AnswerSet {
    /// Normalizes the raw answers and derives the consensus.
    pub fn new<S: AsRef<str>>(question_id: impl Into<String>, raw: &[S]) -> Result<Self> {
        let answers: Vec<String> = raw.iter().map(|a| normalize_answer(a.as_ref())).collect();
        let consensus = consensus_answer(&answers)?;
        Ok(AnswerSet {
            question_id: question_id.into(),
            answers,
            consensus,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.answers.len() != ANSWERS_PER_QUESTION {
            return Err(Error::AnswerCount {
                expected: ANSWERS_PER_QUESTION,
                got: self.answers.len(),
            });
        }
        if self.answers.iter().any(|a| *a != normalize_answer(a)) {
            return Err(invalid(&self.question_id, "answers are not normalized"));
        }
        if consensus_answer(&self.answers)? != self.consensus {
            return Err(invalid(&self.question_id, "consensus does not match answers"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplementaryPair {
    pub question_id: String,
    pub original_image_id: String,
    pub complement_image_id: String,
    pub original_answers: AnswerSet,
    pub complement_answers: AnswerSet,
    pub mismatch: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Open,
    Picked,
    NotPossible,
}

impl TaskStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskStatus::Open => "open",
            TaskStatus::Picked => "picked",
            TaskStatus::NotPossible => "not_possible",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub question_id: String,
    pub shown_answer: String,
    pub candidate_image_ids: Vec<String>,
    pub status: TaskStatus,
}

impl AnnotationTask {
    pub fn task_id_for(question_id: &str) -> String {
        format!("task-{question_id}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Pick(String),
    NotPossible,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationResult {
    pub task_id: String,
    pub outcome: Outcome,
    pub annotator_id: String,
    /// Seconds since the Unix epoch, supplied by the caller.
    pub timestamp: u64,
}

/// Second-round answer collection for a picked image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRound {
    pub task_id: String,
    pub question_id: String,
    pub image_id: String,
    pub answers: Vec<String>,
}

impl AnswerRound {
    pub fn is_complete(&self) -> bool {
        self.answers.len() >= ANSWERS_PER_QUESTION
    }
}

/// All records of one dataset. Maps are keyed by the record id
/// (question id for answers and pairs, task id for results and rounds).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataStore {
    dim: Option<usize>,
    images: BTreeMap<String, ImageRecord>,
    questions: BTreeMap<String, QuestionRecord>,
    answers: BTreeMap<String, AnswerSet>,
    pairs: BTreeMap<String, ComplementaryPair>,
    tasks: BTreeMap<String, AnnotationTask>,
    results: BTreeMap<String, AnnotationResult>,
    rounds: BTreeMap<String, AnswerRound>,
}

/// Flat record lists, the unit exchanged with persistence code.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Records {
    pub images: Vec<ImageRecord>,
    pub questions: Vec<QuestionRecord>,
    pub answers: Vec<AnswerSet>,
    pub pairs: Vec<ComplementaryPair>,
    pub tasks: Vec<AnnotationTask>,
    pub results: Vec<AnnotationResult>,
    pub rounds: Vec<AnswerRound>,
}

impl DataStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a store from records, validating every invariant.
    /// Records are inserted in dependency order, so input order does not matter.
    pub fn from_records(records: Records) -> Result<Self> {
        let mut s = DataStore::new();
        for r in records.images {
            s.insert_image(r)?;
        }
        for r in records.questions {
            s.insert_question(r)?;
        }
        for r in records.answers {
            s.insert_answers(r)?;
        }
        for r in records.tasks {
            s.insert_task(r)?;
        }
        for r in records.results {
            s.insert_result(r)?;
        }
        for r in records.rounds {
            s.insert_round(r)?;
        }
        for r in records.pairs {
            s.insert_pair(r)?;
        }
        s.check_task_consistency()?;
        Ok(s)
    }

    /// Records in ascending id order.
    pub fn to_records(&self) -> Records {
        Records {
            images: self.images.values().cloned().collect(),
            questions: self.questions.values().cloned().collect(),
            answers: self.answers.values().cloned().collect(),
            pairs: self.pairs.values().cloned().collect(),
            tasks: self.tasks.values().cloned().collect(),
            results: self.results.values().cloned().collect(),
            rounds: self.rounds.values().cloned().collect(),
        }
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn sizes(&self) -> (usize, usize) {
        (self.images.len(), self.questions.len())
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRecord> {
        self.images.values()
    }
    pub fn questions(&self) -> impl Iterator<Item = &QuestionRecord> {
        self.questions.values()
    }
    pub fn answer_sets(&self) -> impl Iterator<Item = &AnswerSet> {
        self.answers.values()
    }
    pub fn pairs(&self) -> impl Iterator<Item = &ComplementaryPair> {
        self.pairs.values()
    }
    pub fn tasks(&self) -> impl Iterator<Item = &AnnotationTask> {
        self.tasks.values()
    }
    pub fn results(&self) -> impl Iterator<Item = &AnnotationResult> {
        self.results.values()
    }
    pub fn rounds(&self) -> impl Iterator<Item = &AnswerRound> {
        self.rounds.values()
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.get(id)
    }
    pub fn question(&self, id: &str) -> Option<&QuestionRecord> {
        self.questions.get(id)
    }
    pub fn answers_for(&self, question_id: &str) -> Option<&AnswerSet> {
        self.answers.get(question_id)
    }
    pub fn pair(&self, question_id: &str) -> Option<&ComplementaryPair> {
        self.pairs.get(question_id)
    }
    pub fn task(&self, task_id: &str) -> Option<&AnnotationTask> {
        self.tasks.get(task_id)
    }
    pub fn result(&self, task_id: &str) -> Option<&AnnotationResult> {
        self.results.get(task_id)
    }
    pub fn round(&self, task_id: &str) -> Option<&AnswerRound> {
        self.rounds.get(task_id)
    }

    pub fn insert_image(&mut self, r: ImageRecord) -> Result<()> {
        if r.image_id.is_empty() {
            return Err(invalid("", "empty image id"));
        }
        r.features.validate(&r.image_id)?;
        if let Some(d) = self.dim {
            if r.features.dim() != d {
                return Err(Error::DimensionMismatch {
                    id: r.image_id,
                    expected: d,
                    got: r.features.dim(),
                });
            }
        }
        if self.images.contains_key(&r.image_id) {
            return Err(Error::Duplicate(r.image_id));
        }
        self.dim = Some(r.features.dim());
        self.images.insert(r.image_id.clone(), r);
        Ok(())
    }

    pub fn insert_question(&mut self, r: QuestionRecord) -> Result<()> {
        if r.tokens.is_empty() {
            return Err(invalid(&r.question_id, "question has no tokens"));
        }
        if question_type(&r.tokens) != r.question_type {
            return Err(invalid(&r.question_id, "question_type does not match tokens"));
        }
        self.require_image(&r.image_id)?;
        if self.questions.contains_key(&r.question_id) {
            return Err(Error::Duplicate(r.question_id));
        }
        self.questions.insert(r.question_id.clone(), r);
        Ok(())
    }

    pub fn insert_answers(&mut self, r: AnswerSet) -> Result<()> {
        r.validate()?;
        self.require_question(&r.question_id)?;
        if self.answers.contains_key(&r.question_id) {
            return Err(Error::Duplicate(r.question_id));
        }
        self.answers.insert(r.question_id.clone(), r);
        Ok(())
    }

    pub fn insert_task(&mut self, t: AnnotationTask) -> Result<()> {
        let q = self.require_question(&t.question_id)?;
        let original = self.require_image(&q.image_id)?;
        if t.candidate_image_ids.len() != CANDIDATES_PER_TASK {
            return Err(invalid(&t.task_id, "task must have exactly 24 candidates"));
        }
        let mut prev: Option<(f64, &str)> = None;
        for c in &t.candidate_image_ids {
            if *c == original.image_id {
                return Err(invalid(&t.task_id, "candidates include the original image"));
            }
            let img = self.require_image(c)?;
            let d = l2_distance(&original.features.values, &img.features.values);
            if let Some((pd, pid)) = prev {
                if d < pd || (d == pd && c.as_str() <= pid) {
                    return Err(invalid(&t.task_id, "candidates not in ascending distance order"));
                }
            }
            prev = Some((d, c));
        }
        if self.tasks.contains_key(&t.task_id) {
            return Err(Error::Duplicate(t.task_id));
        }
        self.tasks.insert(t.task_id.clone(), t);
        Ok(())
    }

    pub fn insert_result(&mut self, r: AnnotationResult) -> Result<()> {
        let task = self.tasks.get(&r.task_id).ok_or_else(|| unknown("task", &r.task_id))?;
        if let Outcome::Pick(id) = &r.outcome {
            if !task.candidate_image_ids.contains(id) {
                return Err(Error::NotACandidate {
                    task_id: r.task_id.clone(),
                    image_id: id.clone(),
                });
            }
        }
        if self.results.contains_key(&r.task_id) {
            return Err(Error::Duplicate(r.task_id));
        }
        self.results.insert(r.task_id.clone(), r);
        Ok(())
    }

    pub fn insert_round(&mut self, r: AnswerRound) -> Result<()> {
        if r.answers.len() > ANSWERS_PER_QUESTION {
            return Err(invalid(&r.task_id, "more than 10 second-round answers"));
        }
        let task = self.tasks.get(&r.task_id).ok_or_else(|| unknown("task", &r.task_id))?;
        let picked = match self.results.get(&r.task_id).map(|x| &x.outcome) {
            Some(Outcome::Pick(id)) => id,
            _ => return Err(invalid(&r.task_id, "answer round without a pick")),
        };
        if *picked != r.image_id || task.question_id != r.question_id {
            return Err(invalid(&r.task_id, "answer round does not match the pick"));
        }
        if self.rounds.contains_key(&r.task_id) {
            return Err(Error::Duplicate(r.task_id));
        }
        self.rounds.insert(r.task_id.clone(), r);
        Ok(())
    }

    pub fn insert_pair(&mut self, p: ComplementaryPair) -> Result<()> {
        let q = self.require_question(&p.question_id)?;
        if q.image_id != p.original_image_id {
            return Err(invalid(&p.question_id, "pair original image differs from question image"));
        }
        if p.original_image_id == p.complement_image_id {
            return Err(invalid(&p.question_id, "pair images must differ"));
        }
        let a = self.require_image(&p.original_image_id)?;
        let b = self.require_image(&p.complement_image_id)?;
        if a.split != b.split {
            return Err(invalid(&p.question_id, "pair images are in different splits"));
        }
        p.original_answers.validate()?;
        p.complement_answers.validate()?;
        if p.mismatch != (p.original_answers.consensus == p.complement_answers.consensus) {
            return Err(invalid(&p.question_id, "mismatch flag disagrees with consensus answers"));
        }
        if self.pairs.contains_key(&p.question_id) {
            return Err(Error::Duplicate(p.question_id));
        }
        self.pairs.insert(p.question_id.clone(), p);
        Ok(())
    }

    pub(crate) fn task_mut(&mut self, task_id: &str) -> Option<&mut AnnotationTask> {
        self.tasks.get_mut(task_id)
    }

    pub(crate) fn round_mut(&mut self, task_id: &str) -> Option<&mut AnswerRound> {
        self.rounds.get_mut(task_id)
    }

    /// Task status, results and rounds must agree with each other.
    fn check_task_consistency(&self) -> Result<()> {
        for t in self.tasks.values() {
            let expected = match self.results.get(&t.task_id).map(|r| &r.outcome) {
                None => TaskStatus::Open,
                Some(Outcome::Pick(_)) => TaskStatus::Picked,
                Some(Outcome::NotPossible) => TaskStatus::NotPossible,
            };
            if t.status != expected {
                return Err(invalid(&t.task_id, "task status disagrees with its result"));
            }
        }
        for p in self.pairs.values() {
            let task_id = AnnotationTask::task_id_for(&p.question_id);
            match self.rounds.get(&task_id) {
                Some(r) if r.is_complete() && r.image_id == p.complement_image_id => {}
                _ => return Err(invalid(&p.question_id, "pair without a complete answer round")),
            }
        }
        Ok(())
    }

    fn require_image(&self, id: &str) -> Result<&ImageRecord> {
        self.images.get(id).ok_or_else(|| unknown("image", id))
    }

    fn require_question(&self, id: &str) -> Result<&QuestionRecord> {
        self.questions.get(id).ok_or_else(|| unknown("question", id))
    }
}

pub(crate) fn invalid(id: &str, reason: &str) -> Error {
    Error::Invalid {
        id: id.to_string(),
        reason: reason.to_string(),
    }
}

pub(crate) fn unknown(kind: &'static str, id: &str) -> Error {
    Error::Unknown {
        kind,
        id: id.to_string(),
    }
}
