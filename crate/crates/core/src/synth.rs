//! Synthetic worlds with controllable answer priors, plus simulated annotators.
//!
//! Each image is a latent scene: a value in `0..V` (or absent) for each of `A`
//! attributes. Features are a fixed random linear embedding of the one-hot
//! scene plus Gaussian noise, so ℓ2-close images share most attributes.
//! Attribute values are drawn with probability proportional to
//! `exp(-β · value)`; `β = 0` gives a uniform world.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::answer::ANSWERS_PER_QUESTION;
use crate::data::{
    AnnotationResult, AnnotationTask, AnswerSet, DataStore, FeatureVector, ImageRecord, Outcome, QuestionRecord,
    Split, TaskStatus,
};
use crate::pipeline::{aggregate_round, ingest_result};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_images: usize,
    pub n_attributes: usize,
    pub values_per_attribute: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Tilt `β`; 0 draws attribute values uniformly.
    pub prior_strength: f64,
    pub questions_per_image: usize,
    pub seed: u64,
    /// Probability that an attribute is present in a scene at all.
    pub presence_prob: f64,
    /// Probability that a simulated human answers from the latent truth.
    pub answer_accuracy: f64,
    /// Share of yes/no questions among generated questions.
    pub binary_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_images: 2000,
            n_attributes: 6,
            values_per_attribute: 4,
            feature_dim: 32,
            noise_sigma: 2.0,
            prior_strength: 2.0,
            questions_per_image: 2,
            seed: 0,
            presence_prob: 0.85,
            answer_accuracy: 0.9,
            binary_fraction: 0.5,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.n_images > 0
            && self.n_attributes > 0
            && self.values_per_attribute > 1
            && self.feature_dim > 0
            && self.questions_per_image > 0;
        let probs = [self.presence_prob, self.answer_accuracy, self.binary_fraction];
        if !positive
            || !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite())
            || !(self.prior_strength >= 0.0 && self.prior_strength.is_finite())
            || probs.iter().any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::Config(format!("invalid world config {self:?}")));
        }
        Ok(())
    }

    /// Attribute value distribution, `p(v) ∝ exp(-β v)`.
    pub fn value_distribution(&self) -> Vec<f64> {
        let w: Vec<f64> = (0..self.values_per_attribute)
            .map(|v| libm::exp(-self.prior_strength * v as f64))
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentScene {
    pub image_id: String,
    /// Value of each attribute, `None` when absent.
    pub attributes: Vec<Option<u32>>,
}

/// Parsed template question.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Query {
    /// "what is attribute_k"
    Which { attribute: usize },
    /// "is attribute_k value_v"
    Is { attribute: usize, value: u32 },
}

impl Query {
    pub fn attribute(self) -> usize {
        match self {
            Query::Which { attribute } | Query::Is { attribute, .. } => attribute,
        }
    }

    pub fn tokens(self) -> Vec<String> {
        match self {
            Query::Which { attribute } => ["what".to_string(), "is".into(), attribute_token(attribute)].into(),
            Query::Is { attribute, value } => ["is".to_string(), attribute_token(attribute), value_token(value)].into(),
        }
    }

    pub fn parse(tokens: &[String]) -> Result<Query> {
        let bad = || Error::Invalid {
            id: tokens.join(" "),
            reason: "not a synthetic question template".into(),
        };
        let num = |t: &str, prefix: &str| t.strip_prefix(prefix).and_then(|n| n.parse::<usize>().ok());
        match tokens {
            [w, i, a] if w == "what" && i == "is" => Ok(Query::Which {
                attribute: num(a, "attribute_").ok_or_else(bad)?,
            }),
            [i, a, v] if i == "is" => Ok(Query::Is {
                attribute: num(a, "attribute_").ok_or_else(bad)?,
                value: num(v, "value_").ok_or_else(bad)? as u32,
            }),
            _ => Err(bad()),
        }
    }
}

fn attribute_token(a: usize) -> String {
    format!("attribute_{a}")
}

pub fn value_token(v: u32) -> String {
    format!("value_{v}")
}

/// Ground-truth answer of a template question for a scene.
pub fn oracle_answer(scene: &LatentScene, tokens: &[String]) -> Result<String> {
    let q = Query::parse(tokens)?;
    let slot = scene.attributes.get(q.attribute()).ok_or_else(|| Error::Unknown {
        kind: "attribute",
        id: attribute_token(q.attribute()),
    })?;
    let value = slot.ok_or_else(|| Error::Invalid {
        id: scene.image_id.clone(),
        reason: format!("attribute_{} is absent, question premise fails", q.attribute()),
    })?;
    Ok(match q {
        Query::Which { .. } => value_token(value),
        Query::Is { value: asked, .. } => if asked == value { "yes" } else { "no" }.to_string(),
    })
}

/// Latent scenes and the world's configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub scenes: BTreeMap<String, LatentScene>,
}

pub fn image_id(i: usize) -> String {
    format!("img{i:06}")
}

fn split_of(i: usize) -> Split {
    match i % 10 {
        0..=5 => Split::Train,
        6 | 7 => Split::Val,
        _ => Split::Test,
    }
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// One simulated human answer: the truth with probability `answer_accuracy`,
/// otherwise a uniformly random plausible answer.
fn human_answer<R: Rng>(config: &WorldConfig, query: Query, truth: &str, rng: &mut R) -> String {
    if rng.random::<f64>() < config.answer_accuracy {
        return truth.to_string();
    }
    match query {
        Query::Which { .. } => value_token(rng.random_range(0..config.values_per_attribute as u32)),
        Query::Is { .. } => if rng.random::<bool>() { "yes" } else { "no" }.to_string(),
    }
}

fn simulated_answers<R: Rng>(config: &WorldConfig, scene: &LatentScene, tokens: &[String], rng: &mut R) -> Result<Vec<String>> {
    let query = Query::parse(tokens)?;
    let truth = oracle_answer(scene, tokens)?;
    Ok((0..ANSWERS_PER_QUESTION)
        .map(|_| human_answer(config, query, &truth, rng))
        .collect())
}

/// Images, template questions and ten-answer sets, plus the latent scenes.
/// Image `i` draws from its own RNG stream, so records depend only on `(seed, i)`.
pub fn generate_world(config: &WorldConfig) -> Result<(DataStore, World)> {
    config.validate()?;
    let (a_count, v_count, d) = (config.n_attributes, config.values_per_attribute, config.feature_dim);
    let mut base = ChaCha8Rng::seed_from_u64(config.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let embedding: Vec<Vec<f64>> = (0..a_count * v_count)
        .map(|_| (0..d).map(|_| unit.sample(&mut base)).collect())
        .collect();
    let values = config.value_distribution();
    let noise = Normal::new(0.0, config.noise_sigma).expect("sigma checked");

    let mut store = DataStore::new();
    let mut scenes = BTreeMap::new();
    for i in 0..config.n_images {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64 + 1);
        let attributes: Vec<Option<u32>> = (0..a_count)
            .map(|_| {
                let present = rng.random::<f64>() < config.presence_prob;
                let v = sample_index(&values, &mut rng) as u32;
                present.then_some(v)
            })
            .collect();
        let mut feats: Vec<f64> = (0..d)
            .map(|_| if config.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 })
            .collect();
        for (a, slot) in attributes.iter().enumerate() {
            if let Some(v) = slot {
                for (f, e) in feats.iter_mut().zip(&embedding[a * v_count + *v as usize]) {
                    *f += e;
                }
            }
        }
        let id = image_id(i);
        let scene = LatentScene {
            image_id: id.clone(),
            attributes,
        };
        store.insert_image(ImageRecord {
            image_id: id.clone(),
            features: FeatureVector::raw(feats),
            split: split_of(i),
            display_uri: None,
        })?;

        let mut present: Vec<usize> = (0..a_count).filter(|&a| scene.attributes[a].is_some()).collect();
        for j in 0..config.questions_per_image.min(present.len()) {
            let pick = rng.random_range(0..present.len());
            let attribute = present.swap_remove(pick);
            let query = if rng.random::<f64>() < config.binary_fraction {
                Query::Is {
                    attribute,
                    value: sample_index(&values, &mut rng) as u32,
                }
            } else {
                Query::Which { attribute }
            };
            let qid = format!("q{i:06}_{j}");
            let tokens = query.tokens();
            let raw = simulated_answers(config, &scene, &tokens, &mut rng)?;
            store.insert_question(QuestionRecord::new(qid.clone(), id.clone(), tokens))?;
            store.insert_answers(AnswerSet::new(qid, &raw)?)?;
        }
        scenes.insert(id, scene);
    }
    Ok((
        store,
        World {
            config: config.clone(),
            scenes,
        },
    ))
}

impl World {
    pub fn from_scenes<I: IntoIterator<Item = LatentScene>>(config: WorldConfig, scenes: I) -> Self {
        World {
            config,
            scenes: scenes.into_iter().map(|s| (s.image_id.clone(), s)).collect(),
        }
    }

    fn scene(&self, id: &str) -> Result<&LatentScene> {
        self.scenes.get(id).ok_or_else(|| Error::Unknown {
            kind: "latent scene",
            id: id.to_string(),
        })
    }

    /// Candidates where the question's premise holds and its answer is not the shown one.
    pub fn qualifying_candidates<'a>(&self, store: &DataStore, task: &'a AnnotationTask) -> Result<Vec<&'a String>> {
        let q = store.question(&task.question_id).ok_or_else(|| Error::Unknown {
            kind: "question",
            id: task.question_id.clone(),
        })?;
        let mut out = Vec::new();
        for c in &task.candidate_image_ids {
            // An absent attribute means the premise fails for that image.
            if let Ok(ans) = oracle_answer(self.scene(c)?, &q.tokens) {
                if ans != task.shown_answer {
                    out.push(c);
                }
            }
        }
        Ok(out)
    }

    /// Picks uniformly among qualifying candidates, or declares the task not possible.
    pub fn simulated_annotator<R: Rng>(
        &self,
        store: &DataStore,
        task: &AnnotationTask,
        annotator_id: &str,
        timestamp: u64,
        rng: &mut R,
    ) -> Result<AnnotationResult> {
        let ok = self.qualifying_candidates(store, task)?;
        let outcome = if ok.is_empty() {
            Outcome::NotPossible
        } else {
            Outcome::Pick(ok[rng.random_range(0..ok.len())].clone())
        };
        Ok(AnnotationResult {
            task_id: task.task_id.clone(),
            outcome,
            annotator_id: annotator_id.to_string(),
            timestamp,
        })
    }

    /// Ten simulated second-round answers for `question` on `image_id`.
    pub fn simulated_round<R: Rng>(&self, question: &QuestionRecord, image_id: &str, rng: &mut R) -> Result<Vec<String>> {
        simulated_answers(&self.config, self.scene(image_id)?, &question.tokens, rng)
    }

    /// Runs both rounds for every open task, in task-id order.
    pub fn simulate_collection(&self, store: &mut DataStore, seed: u64) -> Result<SimulationSummary> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let open: Vec<AnnotationTask> = store.tasks().filter(|t| t.status == TaskStatus::Open).cloned().collect();
        let mut summary = SimulationSummary::default();
        for task in &open {
            let result = self.simulated_annotator(store, task, "simulated", 0, &mut rng)?;
            let picked = match &result.outcome {
                Outcome::Pick(id) => Some(id.clone()),
                Outcome::NotPossible => None,
            };
            ingest_result(store, result)?;
            let Some(image) = picked else {
                summary.not_possible += 1;
                continue;
            };
            summary.picked += 1;
            let q = store.question(&task.question_id).expect("task question").clone();
            let answers = self.simulated_round(&q, &image, &mut rng)?;
            if aggregate_round(store, &task.task_id, &answers)?.mismatch {
                summary.mismatched += 1;
            }
        }
        Ok(summary)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub picked: usize,
    pub not_possible: usize,
    pub mismatched: usize,
}
