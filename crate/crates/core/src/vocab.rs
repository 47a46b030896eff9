//! Vocabularies, feature lookup and the integer-encoded training examples.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::DataStore;
use crate::pipeline::{ExplainTask, QaInstance};

pub const UNKNOWN_WORD: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabParts", into = "VocabParts")]
pub struct Vocabulary {
    words: Vec<String>,
    answers: Vec<String>,
    word_index: BTreeMap<String, usize>,
    answer_index: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabParts {
    words: Vec<String>,
    answers: Vec<String>,
}

impl From<VocabParts> for Vocabulary {
    fn from(p: VocabParts) -> Self {
        Vocabulary::from_parts(p.words, p.answers)
    }
}

impl From<Vocabulary> for VocabParts {
    fn from(v: Vocabulary) -> Self {
        VocabParts {
            words: v.words,
            answers: v.answers,
        }
    }
}

impl Vocabulary {
    /// `words[0]` must be the unknown-word token.
    pub fn from_parts(words: Vec<String>, answers: Vec<String>) -> Self {
        let word_index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let answer_index = answers.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        Vocabulary {
            words,
            answers,
            word_index,
            answer_index,
        }
    }

    /// Question words in sorted order after the unknown token; answers by
    /// descending training frequency (ties lexicographic), capped at `max_answers`.
    pub fn build<'a, I: IntoIterator<Item = &'a QaInstance>>(instances: I, max_answers: usize) -> Self {
        let mut words = BTreeMap::new();
        let mut answers: BTreeMap<&str, usize> = BTreeMap::new();
        for inst in instances {
            for t in &inst.tokens {
                words.insert(t.clone(), ());
            }
            *answers.entry(inst.answers.consensus.as_str()).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = answers.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_answers);
        let mut word_list = alloc::vec![UNKNOWN_WORD.to_string()];
        word_list.extend(words.into_keys().filter(|w| w != UNKNOWN_WORD));
        Vocabulary::from_parts(word_list, ranked.into_iter().map(|(a, _)| a.to_string()).collect())
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn word_id(&self, w: &str) -> usize {
        self.word_index.get(w).copied().unwrap_or(0)
    }

    pub fn answer_id(&self, a: &str) -> Option<usize> {
        self.answer_index.get(a).copied()
    }

    pub fn answer(&self, id: usize) -> &str {
        &self.answers[id]
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.word_id(t)).collect()
    }
}

/// Feature vectors of every image in a store, addressed by dense index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    data: Vec<f64>,
    index: BTreeMap<String, usize>,
}

impl FeatureTable {
    pub fn from_store(store: &DataStore) -> Self {
        let dim = store.dim().unwrap_or(0);
        let mut data = Vec::new();
        let mut index = BTreeMap::new();
        for (i, img) in store.images().enumerate() {
            data.extend_from_slice(&img.features.values);
            index.insert(img.image_id.clone(), i);
        }
        FeatureTable { dim, data, index }
    }

    /// Table over explicit rows, ids `"0"`, `"1"`, ...
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        FeatureTable {
            dim,
            data: rows.iter().flatten().copied().collect(),
            index: (0..rows.len()).map(|i| (i.to_string(), i)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn by_id(&self, id: &str) -> Option<&[f64]> {
        self.index_of(id).map(|i| self.get(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainTarget {
    pub answer: usize,
    pub candidates: Vec<usize>,
    /// Position of the human pick inside `candidates`.
    pub picked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub image: usize,
    /// `None` when the consensus answer is outside the answer vocabulary.
    pub answer: Option<usize>,
    pub explain: Option<ExplainTarget>,
}

/// One example per instance, in instance order. Instances whose image is
/// missing from the table are skipped.
pub fn encode_instances(vocab: &Vocabulary, instances: &[QaInstance], table: &FeatureTable) -> (Vec<String>, Vec<Example>) {
    let mut ids = Vec::new();
    let mut out = Vec::new();
    for inst in instances {
        let Some(image) = table.index_of(&inst.image_id) else {
            continue;
        };
        ids.push(inst.instance_id.clone());
        out.push(Example {
            tokens: vocab.encode_tokens(&inst.tokens),
            image,
            answer: vocab.answer_id(&inst.answers.consensus),
            explain: None,
        });
    }
    (ids, out)
}

pub fn explain_target(vocab: &Vocabulary, task: &ExplainTask, table: &FeatureTable) -> Option<ExplainTarget> {
    let answer = vocab.answer_id(&task.answer)?;
    let candidates = task
        .candidates
        .iter()
        .map(|c| table.index_of(c))
        .collect::<Option<Vec<_>>>()?;
    let picked = task.candidates.iter().position(|c| *c == task.picked)?;
    Some(ExplainTarget {
        answer,
        candidates,
        picked,
    })
}

/// Attaches each explanation task to the example of its original instance.
/// Returns how many tasks were attached.
pub fn attach_explanations(
    vocab: &Vocabulary,
    ids: &[String],
    examples: &mut [Example],
    tasks: &[ExplainTask],
    table: &FeatureTable,
) -> usize {
    let pos: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut n = 0;
    for t in tasks {
        let (Some(&i), Some(target)) = (pos.get(t.question_id.as_str()), explain_target(vocab, t, table)) else {
            continue;
        };
        examples[i].explain = Some(target);
        n += 1;
    }
    n
}
