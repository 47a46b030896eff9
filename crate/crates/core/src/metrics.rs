//! VQA accuracy, answer-type breakdown, complementary-pair consistency and Recall@5.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::{answer_type_of, AnswerType};
use crate::data::AnswerSet;
use crate::pipeline::{DatasetSplit, ExplainTask};
use crate::train::TrainedModel;
use crate::vocab::FeatureTable;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    /// `min(matches / 3, 1)` over all ten answers.
    Simple,
    /// Mean of the simple formula over the ten leave-one-out subsets of nine.
    Consensus,
}

impl AccuracyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AccuracyMode::Simple => "simple",
            AccuracyMode::Consensus => "consensus",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "simple" => Some(AccuracyMode::Simple),
            "consensus" => Some(AccuracyMode::Consensus),
            _ => None,
        }
    }
}

pub fn vqa_accuracy(prediction: &str, answers: &AnswerSet, mode: AccuracyMode) -> f64 {
    vqa_accuracy_raw(prediction, &answers.answers, mode)
}

/// Accuracy against a raw answer list (normally ten answers).
pub fn vqa_accuracy_raw<S: AsRef<str>>(prediction: &str, answers: &[S], mode: AccuracyMode) -> f64 {
    let hits: Vec<bool> = answers.iter().map(|a| a.as_ref() == prediction).collect();
    let matches = hits.iter().filter(|&&h| h).count();
    match mode {
        AccuracyMode::Simple => matches.min(3) as f64 / 3.0,
        AccuracyMode::Consensus => {
            if hits.is_empty() {
                return 0.0;
            }
            // Each subset drops answer i; credits are summed as integers over 3 · n.
            let credit: usize = hits
                .iter()
                .map(|&dropped| (matches - usize::from(dropped)).min(3))
                .sum();
            credit as f64 / (3 * hits.len()) as f64
        }
    }
}

/// Answer predicted by `model` for every instance of the split, by instance id.
pub fn predict_split(model: &TrainedModel, split: &DatasetSplit, table: &FeatureTable) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for inst in &split.instances {
        let f = table.by_id(&inst.image_id).ok_or_else(|| Error::Unknown {
            kind: "image",
            id: inst.image_id.clone(),
        })?;
        out.insert(inst.instance_id.clone(), model.predict(&inst.tokens, f)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pairs: usize,
    pub both_correct: f64,
    pub identical_preds: f64,
    pub different_preds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: AccuracyMode,
    pub instances: usize,
    pub overall: f64,
    pub per_answer_type: BTreeMap<AnswerType, TypeAccuracy>,
    pub pair: Option<PairMetrics>,
    pub recall_at_5: BTreeMap<String, f64>,
}

/// Accuracy (overall and per answer type) and, when the split has evaluation
/// pairs, pair consistency.
pub fn evaluate_predictions(
    predictions: &BTreeMap<String, String>,
    split: &DatasetSplit,
    mode: AccuracyMode,
) -> Result<EvalReport> {
    let mut total = 0.0;
    let mut per: BTreeMap<AnswerType, (usize, f64)> = BTreeMap::new();
    for inst in &split.instances {
        let pred = predictions
            .get(&inst.instance_id)
            .ok_or_else(|| Error::MissingPrediction(inst.instance_id.clone()))?;
        let acc = vqa_accuracy(pred, &inst.answers, mode);
        total += acc;
        let e = per.entry(answer_type_of(&inst.answers.consensus)).or_default();
        e.0 += 1;
        e.1 += acc;
    }
    let n = split.instances.len();
    let pair = if split.pairs.is_empty() {
        None
    } else {
        Some(pair_metrics(predictions, split)?)
    };
    Ok(EvalReport {
        mode,
        instances: n,
        overall: if n == 0 { 0.0 } else { total / n as f64 },
        per_answer_type: per
            .into_iter()
            .map(|(t, (c, s))| {
                (
                    t,
                    TypeAccuracy {
                        count: c,
                        accuracy: s / c as f64,
                    },
                )
            })
            .collect(),
        pair,
        recall_at_5: BTreeMap::new(),
    })
}

/// Fractions of evaluation pairs with both members correct, and with identical
/// or different predictions. A prediction is correct when it equals the consensus.
pub fn pair_metrics(predictions: &BTreeMap<String, String>, split: &DatasetSplit) -> Result<PairMetrics> {
    if split.pairs.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    let mut both = 0usize;
    let mut identical = 0usize;
    for p in &split.pairs {
        let get = |id: &str| -> Result<(&String, &str)> {
            let inst = split.instance(id).ok_or_else(|| Error::Unknown {
                kind: "instance",
                id: id.to_string(),
            })?;
            let pred = predictions
                .get(id)
                .ok_or_else(|| Error::MissingPrediction(id.to_string()))?;
            Ok((pred, inst.answers.consensus.as_str()))
        };
        let (pa, ta) = get(&p.original)?;
        let (pb, tb) = get(&p.complement)?;
        if pa == ta && pb == tb {
            both += 1;
        }
        if pa == pb {
            identical += 1;
        }
    }
    let n = split.pairs.len() as f64;
    Ok(PairMetrics {
        pairs: split.pairs.len(),
        both_correct: both as f64 / n,
        identical_preds: identical as f64 / n,
        different_preds: (split.pairs.len() - identical) as f64 / n,
    })
}

/// 1 when the human pick is within the first five of `ranking`, else 0.
pub fn recall_at_5<S: AsRef<str>>(ranking: &[S], human_pick: &str) -> Result<u8> {
    let pos = ranking
        .iter()
        .position(|r| r.as_ref() == human_pick)
        .ok_or_else(|| Error::Unknown {
            kind: "ranked candidate",
            id: human_pick.to_string(),
        })?;
    Ok(u8::from(pos < 5))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Baseline {
    Random { seed: u64 },
    Distance,
    VqaProb,
}

/// Candidate ordering of one explanation method, most likely counter-example first.
pub fn explanation_baseline(
    baseline: Baseline,
    task: &ExplainTask,
    model: Option<(&TrainedModel, &FeatureTable)>,
) -> Result<Vec<String>> {
    match baseline {
        Baseline::Distance => Ok(task.candidates.clone()),
        Baseline::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(task.task_id.as_bytes()));
            let mut order = task.candidates.clone();
            order.shuffle(&mut rng);
            Ok(order)
        }
        Baseline::VqaProb => {
            let (model, table) = model.ok_or(Error::MissingModel("vqa_prob baseline needs an answer model"))?;
            let mut scored = Vec::with_capacity(task.candidates.len());
            for c in &task.candidates {
                let f = table.by_id(c).ok_or_else(|| Error::Unknown {
                    kind: "image",
                    id: c.clone(),
                })?;
                scored.push((model.answer_probability(&task.tokens, f, &task.answer)?, c.clone()));
            }
            // Stable: equal probabilities keep candidate (distance) order.
            scored.sort_by(|a, b| a.0.total_cmp(&b.0));
            Ok(scored.into_iter().map(|(_, c)| c).collect())
        }
    }
}

/// Ordering by the trained explaining head, highest score first; ties keep
/// candidate order.
pub fn explanation_ranking(model: &TrainedModel, task: &ExplainTask, table: &FeatureTable) -> Result<Vec<String>> {
    let feats = task
        .candidates
        .iter()
        .map(|c| {
            table.by_id(c).ok_or_else(|| Error::Unknown {
                kind: "image",
                id: c.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = model
        .explain_scores(&task.tokens, &task.answer, &feats)?
        .ok_or(Error::MissingModel("model has no explaining head"))?;
    let mut order: Vec<(f64, &String)> = scores.into_iter().zip(&task.candidates).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(order.into_iter().map(|(_, c)| c.clone()).collect())
}

/// Mean Recall@5 of a ranking function over tasks. Empty input gives 0.
pub fn mean_recall_at_5<F>(tasks: &[ExplainTask], mut rank: F) -> Result<f64>
where
    F: FnMut(&ExplainTask) -> Result<Vec<String>>,
{
    if tasks.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for t in tasks {
        hits += usize::from(recall_at_5(&rank(t)?, &t.picked)?);
    }
    Ok(hits as f64 / tasks.len() as f64)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
