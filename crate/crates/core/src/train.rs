//! Optimizers, the minibatch training loop and finite-difference gradient checks.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Branch, ModelConfig, ModelKind, ModelParams, TENSOR_NAMES};
use crate::pipeline::{ExplainTask, QaInstance};
use crate::vocab::{attach_explanations, encode_instances, Example, ExplainTarget, FeatureTable, Vocabulary};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Weight of the ranking term.
    pub lambda: f64,
    /// Ranking margin `M`.
    pub margin: f64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            optimizer: Optimizer::adam(),
            batch_size: 32,
            epochs: 20,
            seed: 0,
            lambda: 1.0,
            margin: 0.1,
            init_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.batch_size > 0
            && self.lambda >= 0.0
            && self.margin > 0.0
            && self.init_scale > 0.0
            && self.learning_rate.is_finite()
            && self.lambda.is_finite();
        if !ok {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        if let Optimizer::Adam { beta1, beta2, epsilon } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || epsilon <= 0.0 {
                return Err(Error::Config("invalid adam parameters".into()));
            }
        }
        Ok(())
    }
}

/// Per-tensor optimizer state.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    learning_rate: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, learning_rate: f64, params: &ModelParams) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        OptimizerState {
            kind,
            learning_rate,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            Optimizer::Sgd => params.add_scaled(grads, -lr),
            Optimizer::Adam { beta1, beta2, epsilon } => {
                let t = self.step as f64;
                let c1 = 1.0 - libm::pow(beta1, t);
                let c2 = 1.0 - libm::pow(beta2, t);
                for (k, (p, g)) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] -= lr * m_hat / (libm::sqrt(v_hat) + epsilon);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

fn branch_for(kind: ModelKind) -> Branch {
    if kind.uses_image() {
        Branch::Joint
    } else {
        Branch::LanguageOnly
    }
}

fn effective_lambda(kind: ModelKind, config: &TrainConfig) -> f64 {
    if kind == ModelKind::Counterexample {
        config.lambda
    } else {
        0.0
    }
}

/// Mean loss and exact-match accuracy over examples (examples without an
/// in-vocabulary answer count as wrong).
pub fn evaluate_examples(
    params: &ModelParams,
    branch: Branch,
    examples: &[Example],
    table: &FeatureTable,
    lambda: f64,
    margin: f64,
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut scratch = params.zeros_like();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for ex in examples {
        loss += params
            .loss_and_grad(branch, ex, table, lambda, margin, &mut scratch)?
            .total;
        if let Some(a) = ex.answer {
            let dist = params.answer_distribution(branch, &ex.tokens, table.get(ex.image))?;
            if dist.argmax() == a {
                correct += 1;
            }
        }
    }
    let n = examples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Minibatch training of one parametric model on pre-encoded examples.
///
/// `on_step` sees the parameters after every optimizer step.
pub fn train_params<F: FnMut(&ModelParams)>(
    kind: ModelKind,
    model_config: ModelConfig,
    config: &TrainConfig,
    examples: &[Example],
    val: &[Example],
    table: &FeatureTable,
    mut on_step: F,
) -> Result<(ModelParams, Vec<EpochStats>)> {
    if kind == ModelKind::Prior {
        return Err(Error::Config("the prior model has no parameters to train".into()));
    }
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let branch = branch_for(kind);
    let lambda = effective_lambda(kind, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(model_config, config.init_scale, &mut rng)?;
    let mut opt = OptimizerState::new(config.optimizer, config.learning_rate, &params);
    let mut history = Vec::with_capacity(config.epochs + 1);

    let record = |epoch: usize, params: &ModelParams| -> Result<EpochStats> {
        let (train_loss, train_accuracy) = evaluate_examples(params, branch, examples, table, lambda, config.margin)?;
        let (val_loss, val_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_examples(params, branch, val, table, lambda, config.margin)?;
            (Some(l), Some(a))
        };
        if !train_loss.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: 0,
                value: train_loss,
            });
        }
        Ok(EpochStats {
            epoch,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
        })
    };
    history.push(record(0, &params)?);

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut grads = params.zeros_like();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            for t in grads.tensors_mut() {
                t.fill(0.0);
            }
            let mut batch_loss = 0.0;
            for &i in batch {
                batch_loss += params
                    .loss_and_grad(branch, &examples[i], table, lambda, config.margin, &mut grads)?
                    .total;
            }
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    value: batch_loss,
                });
            }
            let scale = 1.0 / batch.len() as f64;
            for t in grads.tensors_mut() {
                for g in t.iter_mut() {
                    *g *= scale;
                }
            }
            opt.step(&mut params, &grads);
            on_step(&params);
        }
        history.push(record(epoch, &params)?);
    }
    Ok((params, history))
}

/// A model ready to answer questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub vocab: Vocabulary,
    pub prior_answer: String,
    pub params: Option<ModelParams>,
}

impl TrainedModel {
    fn branch(&self) -> Branch {
        branch_for(self.kind)
    }

    /// Predicted answer string.
    pub fn predict(&self, tokens: &[String], features: &[f64]) -> Result<String> {
        match &self.params {
            None => Ok(self.prior_answer.clone()),
            Some(p) => {
                let ids = self.vocab.encode_tokens(tokens);
                let dist = p.answer_distribution(self.branch(), &ids, features)?;
                Ok(self.vocab.answer(dist.argmax()).to_string())
            }
        }
    }

    /// `P(answer | question, image)`; zero for out-of-vocabulary answers.
    /// The prior model puts all mass on its single answer.
    pub fn answer_probability(&self, tokens: &[String], features: &[f64], answer: &str) -> Result<f64> {
        match &self.params {
            None => Ok(if answer == self.prior_answer { 1.0 } else { 0.0 }),
            Some(p) => {
                let Some(a) = self.vocab.answer_id(answer) else {
                    return Ok(0.0);
                };
                let ids = self.vocab.encode_tokens(tokens);
                Ok(p.answer_distribution(self.branch(), &ids, features)?.probabilities[a])
            }
        }
    }

    /// Explaining-head scores, when this model has one. An answer outside the
    /// vocabulary has no embedding, so every candidate scores 0.
    pub fn explain_scores(&self, tokens: &[String], answer: &str, candidates: &[&[f64]]) -> Result<Option<Vec<f64>>> {
        let Some(p) = self.params.as_ref().filter(|_| self.kind == ModelKind::Counterexample) else {
            return Ok(None);
        };
        let Some(a) = self.vocab.answer_id(answer) else {
            return Ok(Some(vec![0.0; candidates.len()]));
        };
        let ids = self.vocab.encode_tokens(tokens);
        Ok(Some(p.explain_forward(&ids, a, candidates)?.scores))
    }
}

/// Architecture knobs that are not derived from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub word_dim: usize,
    pub hidden_dim: usize,
    pub common_dim: usize,
    pub answer_embed_dim: usize,
    pub max_answers: usize,
    pub normalize_image: bool,
    pub mix: crate::model::MixMode,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            word_dim: 32,
            hidden_dim: 64,
            common_dim: 32,
            answer_embed_dim: 32,
            max_answers: 1000,
            normalize_image: false,
            mix: crate::model::MixMode::Full,
        }
    }
}

pub struct FitOutput {
    pub model: TrainedModel,
    pub history: Vec<EpochStats>,
    pub explain_tasks_used: usize,
}

/// Builds the vocabulary from `train`, encodes examples, and trains `kind`.
/// Explanation tasks only matter for the counter-example model but are
/// attached for every parametric kind so example lists stay identical.
pub fn fit(
    kind: ModelKind,
    train: &[QaInstance],
    explain: &[ExplainTask],
    val: &[QaInstance],
    table: &FeatureTable,
    arch: &ArchConfig,
    config: &TrainConfig,
) -> Result<FitOutput> {
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let vocab = Vocabulary::build(train, arch.max_answers);
    let prior_answer = crate::model::predict_prior(train.iter().map(|i| i.answers.consensus.as_str()))?;
    if kind == ModelKind::Prior {
        return Ok(FitOutput {
            model: TrainedModel {
                kind,
                vocab,
                prior_answer,
                params: None,
            },
            history: Vec::new(),
            explain_tasks_used: 0,
        });
    }
    let (ids, mut examples) = encode_instances(&vocab, train, table);
    let attached = attach_explanations(&vocab, &ids, &mut examples, explain, table);
    if kind == ModelKind::Counterexample && attached == 0 && config.lambda > 0.0 {
        return Err(Error::Empty("explanation tasks with human picks"));
    }
    let (_, val_examples) = encode_instances(&vocab, val, table);
    let model_config = ModelConfig {
        feature_dim: table.dim(),
        word_dim: arch.word_dim,
        hidden_dim: arch.hidden_dim,
        common_dim: arch.common_dim,
        answer_embed_dim: arch.answer_embed_dim,
        candidates: crate::data::CANDIDATES_PER_TASK,
        question_vocab: vocab.words().len(),
        answer_vocab: vocab.answers().len(),
        normalize_image: arch.normalize_image,
        mix: arch.mix,
    };
    let (params, history) = train_params(kind, model_config, config, &examples, &val_examples, table, |_| {})?;
    Ok(FitOutput {
        model: TrainedModel {
            kind,
            vocab,
            prior_answer,
            params: Some(params),
        },
        history,
        explain_tasks_used: if kind == ModelKind::Counterexample { attached } else { 0 },
    })
}

// ---------------------------------------------------------------------------
// Gradient checking

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub lambda: f64,
    pub margin: f64,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Tensors to compare; the rest are treated as frozen.
    pub tensors: Vec<String>,
}

impl GradCheckConfig {
    /// d = 6, h = 5, K = 4, four answers.
    pub fn small(seed: u64) -> Self {
        GradCheckConfig {
            model: ModelConfig {
                feature_dim: 6,
                word_dim: 4,
                hidden_dim: 5,
                common_dim: 3,
                answer_embed_dim: 3,
                candidates: 4,
                question_vocab: 7,
                answer_vocab: 4,
                normalize_image: false,
                mix: crate::model::MixMode::Full,
            },
            lambda: 0.7,
            margin: 1.0,
            step: 1e-4,
            tolerance: 1e-4,
            seed,
            tensors: TENSOR_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub trials: usize,
    pub checked_tensors: usize,
    pub max_relative_error: f64,
    /// Worst relative error per tensor name.
    pub per_tensor: Vec<(String, f64)>,
    pub passed: bool,
}

/// Relative error of two gradient blocks: `‖a − n‖ / max(‖a‖, ‖n‖, 1e-6)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| libm::sqrt(v.map(|x| x * x).sum::<f64>());
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    // Gradients that cancel exactly leave only finite-difference noise; the
    // floor keeps that from reading as a relative error of 1.
    diff / scale.max(1e-6)
}

/// Signature of an analytic loss-and-gradient routine under test.
pub type GradientFn<'a> = dyn Fn(&ModelParams, &Example, &FeatureTable, &mut ModelParams) -> Result<f64> + 'a;

/// Finite-difference check of the combined loss with the built-in gradients.
pub fn grad_check(config: &GradCheckConfig, trials: usize) -> Result<GradCheckReport> {
    let (lambda, margin) = (config.lambda, config.margin);
    grad_check_with(config, trials, &|p, ex, table, g| {
        Ok(p.loss_and_grad(Branch::Joint, ex, table, lambda, margin, g)?.total)
    })
}

/// Central differences against any analytic routine (negative controls use this).
pub fn grad_check_with(config: &GradCheckConfig, trials: usize, analytic: &GradientFn<'_>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let selected: Vec<usize> = TENSOR_NAMES
        .iter()
        .enumerate()
        .filter(|(_, n)| config.tensors.iter().any(|t| t == *n))
        .map(|(i, _)| i)
        .collect();
    let mut per_tensor: Vec<(String, f64)> = selected.iter().map(|&i| (TENSOR_NAMES[i].to_string(), 0.0)).collect();
    if selected.is_empty() {
        return Ok(GradCheckReport {
            trials,
            checked_tensors: 0,
            max_relative_error: 0.0,
            per_tensor,
            passed: true,
        });
    }

    let loss_of = |p: &ModelParams, ex: &Example, table: &FeatureTable| -> Result<f64> {
        p.loss(Branch::Joint, ex, table, config.lambda, config.margin)
    };
    let mut done = 0;
    while done < trials {
        let (params, example, table) = random_problem(&config.model, &mut rng)?;
        if near_hinge(&params, &example, &table, config.margin, 1e-3)? {
            continue;
        }
        let mut grads = params.zeros_like();
        analytic(&params, &example, &table, &mut grads)?;
        for (slot, &ti) in selected.iter().enumerate() {
            let n = params.tensors()[ti].len();
            let mut numeric = vec![0.0; n];
            for (j, num) in numeric.iter_mut().enumerate() {
                let mut plus = params.clone();
                plus.tensors_mut()[ti][j] += config.step;
                let mut minus = params.clone();
                minus.tensors_mut()[ti][j] -= config.step;
                *num = (loss_of(&plus, &example, &table)? - loss_of(&minus, &example, &table)?) / (2.0 * config.step);
            }
            let err = relative_error(grads.tensors()[ti], &numeric);
            let entry = &mut per_tensor[slot].1;
            *entry = entry.max(err);
        }
        done += 1;
    }
    let max = per_tensor.iter().fold(0.0f64, |m, (_, e)| m.max(*e));
    Ok(GradCheckReport {
        trials,
        checked_tensors: selected.len(),
        max_relative_error: max,
        passed: max < config.tolerance,
        per_tensor,
    })
}

/// Random parameters (biases included), features, question and explanation target.
pub fn random_problem<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<(ModelParams, Example, FeatureTable)> {
    let mut params = ModelParams::init(*config, 0.5, rng)?;
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let k = config.candidates;
    let rows: Vec<Vec<f64>> = (0..=k)
        .map(|_| (0..config.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let n_tokens = rng.random_range(1..=4);
    let example = Example {
        tokens: (0..n_tokens).map(|_| rng.random_range(0..config.question_vocab)).collect(),
        image: 0,
        answer: Some(rng.random_range(0..config.answer_vocab)),
        explain: Some(ExplainTarget {
            answer: rng.random_range(0..config.answer_vocab),
            candidates: (1..=k).collect(),
            picked: rng.random_range(0..k),
        }),
    };
    Ok((params, example, FeatureTable::from_rows(&rows)))
}

/// Whether any hinge argument sits within `band` of its kink.
fn near_hinge(params: &ModelParams, ex: &Example, table: &FeatureTable, margin: f64, band: f64) -> Result<bool> {
    let Some(t) = &ex.explain else {
        return Ok(false);
    };
    let cands: Vec<&[f64]> = t.candidates.iter().map(|&c| table.get(c)).collect();
    let s = params.explain_forward(&ex.tokens, t.answer, &cands)?.scores;
    Ok(s
        .iter()
        .enumerate()
        .any(|(i, si)| i != t.picked && (margin - (s[t.picked] - si)).abs() < band))
}
