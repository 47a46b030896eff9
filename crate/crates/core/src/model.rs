//! Answer and counter-example explanation models.
//!
//! A shared base embeds the question (mean of word vectors, affine, tanh) and the
//! image (affine, tanh) into `h` dimensions and multiplies them element-wise.
//! The answering head is an affine map plus softmax over the answer vocabulary.
//! The explaining head projects each candidate's joint embedding and the
//! embedding of the answer being explained into a common space, takes their
//! inner product, and mixes the `K` products with a fully connected layer into
//! `K` scores. Training minimizes
//!
//! ```text
//! L = -ln P(A | I, Q) + λ Σ_{i ≠ picked} max(0, M - (S(I') - S(I_i)))
//! ```
//!
//! All gradients are computed by hand in [`ModelParams::loss_and_grad`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::CANDIDATES_PER_TASK;
use crate::tensor::{dot, softmax, tanh_in_place, Affine, Matrix};
use crate::vocab::{Example, FeatureTable};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    /// Full `K × K` affine map over the candidate inner products.
    Full,
    /// One scalar weight and bias shared by every candidate.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Prior,
    Lang,
    Joint,
    Counterexample,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Prior,
        ModelKind::Lang,
        ModelKind::Joint,
        ModelKind::Counterexample,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Prior => "prior",
            ModelKind::Lang => "lang",
            ModelKind::Joint => "joint",
            ModelKind::Counterexample => "counterexample",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        ModelKind::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn uses_image(self) -> bool {
        matches!(self, ModelKind::Joint | ModelKind::Counterexample)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Image feature dimension `d`.
    pub feature_dim: usize,
    /// Word embedding dimension `e`.
    pub word_dim: usize,
    /// Joint embedding dimension `h`.
    pub hidden_dim: usize,
    /// Explaining-head common space dimension `c`.
    pub common_dim: usize,
    /// Answer embedding dimension `e_a`.
    pub answer_embed_dim: usize,
    /// Candidates per explanation task `K`.
    pub candidates: usize,
    pub question_vocab: usize,
    pub answer_vocab: usize,
    pub normalize_image: bool,
    pub mix: MixMode,
}

impl ModelConfig {
    /// Default hidden sizes (`h = 64`, `e = 32`, `c = 32`, `e_a = 32`, `K = 24`).
    pub fn with_dims(feature_dim: usize, question_vocab: usize, answer_vocab: usize) -> Self {
        ModelConfig {
            feature_dim,
            word_dim: 32,
            hidden_dim: 64,
            common_dim: 32,
            answer_embed_dim: 32,
            candidates: CANDIDATES_PER_TASK,
            question_vocab,
            answer_vocab,
            normalize_image: false,
            mix: MixMode::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.feature_dim,
            self.word_dim,
            self.hidden_dim,
            self.common_dim,
            self.answer_embed_dim,
            self.candidates,
            self.question_vocab,
            self.answer_vocab,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("all model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Every trainable tensor of the two-headed model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub word_embeddings: Matrix,
    pub question_proj: Affine,
    pub image_proj: Affine,
    pub answer_head: Affine,
    pub answer_embed_table: Matrix,
    pub explain_qi_proj: Affine,
    pub explain_ans_proj: Affine,
    pub explain_mix: Affine,
}

/// Names of the tensors in [`ModelParams::tensors`] order.
pub const TENSOR_NAMES: [&str; 14] = [
    "word_embeddings",
    "question_proj.weight",
    "question_proj.bias",
    "image_proj.weight",
    "image_proj.bias",
    "answer_head.weight",
    "answer_head.bias",
    "answer_embed_table",
    "explain_qi_proj.weight",
    "explain_qi_proj.bias",
    "explain_ans_proj.weight",
    "explain_ans_proj.bias",
    "explain_mix.weight",
    "explain_mix.bias",
];

/// Tensors used only by the explaining head.
pub const EXPLAIN_ONLY_TENSORS: [&str; 7] = [
    "answer_embed_table",
    "explain_qi_proj.weight",
    "explain_qi_proj.bias",
    "explain_ans_proj.weight",
    "explain_ans_proj.bias",
    "explain_mix.weight",
    "explain_mix.bias",
];

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub question_embedding: Vec<f64>,
    pub image_embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointEmbedding {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerDistribution {
    pub probabilities: Vec<f64>,
}

impl AnswerDistribution {
    /// Most probable answer index; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probabilities.iter().enumerate() {
            if p > self.probabilities[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
}

/// Which input branches feed the answering head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Question ⊙ image.
    Joint,
    /// Question embedding only; the image branch is replaced by all ones.
    LanguageOnly,
}

struct QuestionState {
    mean: Vec<f64>,
    embedding: Vec<f64>,
}

struct ImageState {
    input: Vec<f64>,
    embedding: Vec<f64>,
}

/// Result of one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    pub hinge: f64,
}

impl ModelParams {
    pub fn init<R: Rng>(config: ModelConfig, scale: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mix_dim = match c.mix {
            MixMode::Full => c.candidates,
            MixMode::Shared => 1,
        };
        Ok(ModelParams {
            word_embeddings: Matrix::uniform(c.question_vocab, c.word_dim, scale, rng),
            question_proj: Affine::init(c.hidden_dim, c.word_dim, scale, rng),
            image_proj: Affine::init(c.hidden_dim, c.feature_dim, scale, rng),
            answer_head: Affine::init(c.answer_vocab, c.hidden_dim, scale, rng),
            answer_embed_table: Matrix::uniform(c.answer_vocab, c.answer_embed_dim, scale, rng),
            explain_qi_proj: Affine::init(c.common_dim, c.hidden_dim, scale, rng),
            explain_ans_proj: Affine::init(c.common_dim, c.answer_embed_dim, scale, rng),
            explain_mix: Affine::init(mix_dim, mix_dim, scale, rng),
            config,
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn tensors(&self) -> [&[f64]; 14] {
        [
            &self.word_embeddings.data,
            &self.question_proj.weight.data,
            &self.question_proj.bias,
            &self.image_proj.weight.data,
            &self.image_proj.bias,
            &self.answer_head.weight.data,
            &self.answer_head.bias,
            &self.answer_embed_table.data,
            &self.explain_qi_proj.weight.data,
            &self.explain_qi_proj.bias,
            &self.explain_ans_proj.weight.data,
            &self.explain_ans_proj.bias,
            &self.explain_mix.weight.data,
            &self.explain_mix.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 14] {
        [
            &mut self.word_embeddings.data,
            &mut self.question_proj.weight.data,
            &mut self.question_proj.bias,
            &mut self.image_proj.weight.data,
            &mut self.image_proj.bias,
            &mut self.answer_head.weight.data,
            &mut self.answer_head.bias,
            &mut self.answer_embed_table.data,
            &mut self.explain_qi_proj.weight.data,
            &mut self.explain_qi_proj.bias,
            &mut self.explain_ans_proj.weight.data,
            &mut self.explain_ans_proj.bias,
            &mut self.explain_mix.weight.data,
            &mut self.explain_mix.bias,
        ]
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let i = TENSOR_NAMES.iter().position(|n| *n == name)?;
        Some(self.tensors()[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    fn question_forward(&self, tokens: &[usize]) -> QuestionState {
        let mut mean = vec![0.0; self.config.word_dim];
        for &t in tokens {
            let t = t.min(self.config.question_vocab - 1);
            for (m, w) in mean.iter_mut().zip(self.word_embeddings.row(t)) {
                *m += w;
            }
        }
        if !tokens.is_empty() {
            let n = tokens.len() as f64;
            for m in &mut mean {
                *m /= n;
            }
        }
        let mut embedding = self.question_proj.apply(&mean);
        tanh_in_place(&mut embedding);
        QuestionState { mean, embedding }
    }

    fn question_backward(&self, tokens: &[usize], state: &QuestionState, d_emb: &[f64], grads: &mut ModelParams) {
        let dz: Vec<f64> = d_emb
            .iter()
            .zip(&state.embedding)
            .map(|(g, y)| g * (1.0 - y * y))
            .collect();
        let mut d_mean = vec![0.0; self.config.word_dim];
        self.question_proj
            .backward(&state.mean, &dz, &mut grads.question_proj, Some(&mut d_mean));
        if tokens.is_empty() {
            return;
        }
        let n = tokens.len() as f64;
        for &t in tokens {
            let t = t.min(self.config.question_vocab - 1);
            for (g, d) in grads.word_embeddings.row_mut(t).iter_mut().zip(&d_mean) {
                *g += d / n;
            }
        }
    }

    fn image_forward(&self, features: &[f64]) -> ImageState {
        let input = if self.config.normalize_image {
            let norm = libm::sqrt(dot(features, features));
            if norm > 0.0 {
                features.iter().map(|v| v / norm).collect()
            } else {
                features.to_vec()
            }
        } else {
            features.to_vec()
        };
        let mut embedding = self.image_proj.apply(&input);
        tanh_in_place(&mut embedding);
        ImageState { input, embedding }
    }

    fn image_backward(&self, state: &ImageState, d_emb: &[f64], grads: &mut ModelParams) {
        let dz: Vec<f64> = d_emb
            .iter()
            .zip(&state.embedding)
            .map(|(g, y)| g * (1.0 - y * y))
            .collect();
        self.image_proj.backward(&state.input, &dz, &mut grads.image_proj, None);
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.config.feature_dim {
            return Err(Error::DimensionMismatch {
                id: String::from("features"),
                expected: self.config.feature_dim,
                got: features.len(),
            });
        }
        Ok(())
    }

    pub fn encoder_output(&self, tokens: &[usize], features: &[f64]) -> Result<EncoderOutput> {
        self.check_features(features)?;
        Ok(EncoderOutput {
            question_embedding: self.question_forward(tokens).embedding,
            image_embedding: self.image_forward(features).embedding,
        })
    }

    /// Question embedding ⊙ image embedding.
    pub fn encode(&self, tokens: &[usize], features: &[f64]) -> Result<JointEmbedding> {
        let out = self.encoder_output(tokens, features)?;
        Ok(JointEmbedding {
            values: hadamard(&out.question_embedding, &out.image_embedding),
        })
    }

    pub fn answer_forward(&self, joint: &JointEmbedding) -> AnswerDistribution {
        AnswerDistribution {
            probabilities: softmax(&self.answer_head.apply(&joint.values)),
        }
    }

    /// Answer distribution that never looks at an image.
    pub fn language_only_forward(&self, tokens: &[usize]) -> AnswerDistribution {
        let joint = JointEmbedding {
            values: self.question_forward(tokens).embedding,
        };
        self.answer_forward(&joint)
    }

    pub fn answer_distribution(&self, branch: Branch, tokens: &[usize], features: &[f64]) -> Result<AnswerDistribution> {
        match branch {
            Branch::Joint => Ok(self.answer_forward(&self.encode(tokens, features)?)),
            Branch::LanguageOnly => Ok(self.language_only_forward(tokens)),
        }
    }

    fn mix_forward(&self, products: &[f64]) -> Vec<f64> {
        match self.config.mix {
            MixMode::Full => self.explain_mix.apply(products),
            MixMode::Shared => {
                let w = self.explain_mix.weight.data[0];
                let b = self.explain_mix.bias[0];
                products.iter().map(|r| w * r + b).collect()
            }
        }
    }

    fn mix_backward(&self, products: &[f64], d_scores: &[f64], grads: &mut ModelParams) -> Vec<f64> {
        match self.config.mix {
            MixMode::Full => {
                let mut d = vec![0.0; products.len()];
                self.explain_mix
                    .backward(products, d_scores, &mut grads.explain_mix, Some(&mut d));
                d
            }
            MixMode::Shared => {
                let w = self.explain_mix.weight.data[0];
                for (r, g) in products.iter().zip(d_scores) {
                    grads.explain_mix.weight.data[0] += g * r;
                    grads.explain_mix.bias[0] += g;
                }
                d_scores.iter().map(|g| w * g).collect()
            }
        }
    }

    /// Scores `S(I_i)` for the `K` candidates, in the given order.
    pub fn explain_forward(&self, tokens: &[usize], answer: usize, candidates: &[&[f64]]) -> Result<ScoreVector> {
        if candidates.len() != self.config.candidates {
            return Err(Error::Config(alloc::format!(
                "expected {} candidates, got {}",
                self.config.candidates,
                candidates.len()
            )));
        }
        if answer >= self.config.answer_vocab {
            return Err(Error::Config("answer index out of range".into()));
        }
        let q = self.question_forward(tokens);
        let v = self.explain_ans_proj.apply(self.answer_embed_table.row(answer));
        let mut products = Vec::with_capacity(candidates.len());
        for f in candidates {
            self.check_features(f)?;
            let img = self.image_forward(f);
            let u = self.explain_qi_proj.apply(&hadamard(&q.embedding, &img.embedding));
            products.push(dot(&u, &v));
        }
        Ok(ScoreVector {
            scores: self.mix_forward(&products),
        })
    }

    /// Loss of one example and its exact gradient, accumulated into `grads`.
    ///
    /// The cross-entropy term is skipped when the example has no in-vocabulary
    /// answer; the hinge term is skipped when `lambda == 0` or there is no
    /// explanation target.
    pub fn loss_and_grad(
        &self,
        branch: Branch,
        example: &Example,
        features: &FeatureTable,
        lambda: f64,
        margin: f64,
        grads: &mut ModelParams,
    ) -> Result<LossBreakdown> {
        let q = self.question_forward(&example.tokens);
        let mut d_q = vec![0.0; self.config.hidden_dim];
        let mut cross_entropy = 0.0;

        if let Some(answer) = example.answer {
            let image = match branch {
                Branch::Joint => {
                    let f = features.get(example.image);
                    self.check_features(f)?;
                    Some(self.image_forward(f))
                }
                Branch::LanguageOnly => None,
            };
            let joint = match &image {
                Some(img) => hadamard(&q.embedding, &img.embedding),
                None => q.embedding.clone(),
            };
            let probs = softmax(&self.answer_head.apply(&joint));
            cross_entropy = -libm::log(probs[answer]);
            let mut d_logits = probs;
            d_logits[answer] -= 1.0;
            let mut d_joint = vec![0.0; joint.len()];
            self.answer_head
                .backward(&joint, &d_logits, &mut grads.answer_head, Some(&mut d_joint));
            match &image {
                Some(img) => {
                    for ((dq, dj), ie) in d_q.iter_mut().zip(&d_joint).zip(&img.embedding) {
                        *dq += dj * ie;
                    }
                    let d_img = hadamard(&d_joint, &q.embedding);
                    self.image_backward(img, &d_img, grads);
                }
                None => {
                    for (dq, dj) in d_q.iter_mut().zip(&d_joint) {
                        *dq += dj;
                    }
                }
            }
        }

        let mut hinge = 0.0;
        if let (Some(target), true) = (&example.explain, lambda != 0.0 && branch == Branch::Joint) {
            if target.candidates.len() != self.config.candidates {
                return Err(Error::Config("wrong candidate count".into()));
            }
            if target.picked >= target.candidates.len() {
                return Err(Error::Config("picked image is not among the candidates".into()));
            }
            let a_emb = self.answer_embed_table.row(target.answer);
            let v = self.explain_ans_proj.apply(a_emb);
            let mut images = Vec::with_capacity(target.candidates.len());
            let mut joints = Vec::with_capacity(target.candidates.len());
            let mut projected = Vec::with_capacity(target.candidates.len());
            let mut products = Vec::with_capacity(target.candidates.len());
            for &c in &target.candidates {
                let f = features.get(c);
                self.check_features(f)?;
                let img = self.image_forward(f);
                let j = hadamard(&q.embedding, &img.embedding);
                let u = self.explain_qi_proj.apply(&j);
                products.push(dot(&u, &v));
                images.push(img);
                joints.push(j);
                projected.push(u);
            }
            let scores = self.mix_forward(&products);
            let (h, mut d_scores) = hinge_terms(&scores, target.picked, margin);
            hinge = h;
            for d in &mut d_scores {
                *d *= lambda;
            }
            let d_products = self.mix_backward(&products, &d_scores, grads);
            let mut d_v = vec![0.0; v.len()];
            for i in 0..target.candidates.len() {
                let dr = d_products[i];
                if dr == 0.0 {
                    continue;
                }
                let d_u: Vec<f64> = v.iter().map(|x| dr * x).collect();
                for (dv, u) in d_v.iter_mut().zip(&projected[i]) {
                    *dv += dr * u;
                }
                let mut d_j = vec![0.0; joints[i].len()];
                self.explain_qi_proj
                    .backward(&joints[i], &d_u, &mut grads.explain_qi_proj, Some(&mut d_j));
                for ((dq, dj), ie) in d_q.iter_mut().zip(&d_j).zip(&images[i].embedding) {
                    *dq += dj * ie;
                }
                let d_img = hadamard(&d_j, &q.embedding);
                self.image_backward(&images[i], &d_img, grads);
            }
            let mut d_a = vec![0.0; a_emb.len()];
            self.explain_ans_proj
                .backward(a_emb, &d_v, &mut grads.explain_ans_proj, Some(&mut d_a));
            for (g, d) in grads.answer_embed_table.row_mut(target.answer).iter_mut().zip(&d_a) {
                *g += d;
            }
        }

        self.question_backward(&example.tokens, &q, &d_q, grads);
        Ok(LossBreakdown {
            total: cross_entropy + lambda * hinge,
            cross_entropy,
            hinge,
        })
    }

    /// Loss only, without gradients.
    pub fn loss(&self, branch: Branch, example: &Example, features: &FeatureTable, lambda: f64, margin: f64) -> Result<f64> {
        let mut scratch = self.zeros_like();
        Ok(self
            .loss_and_grad(branch, example, features, lambda, margin, &mut scratch)?
            .total)
    }
}

/// Sum of `max(0, M - (S(picked) - S(i)))` over the non-picked candidates, and
/// its (sub)gradient with respect to the scores. Terms exactly at the hinge
/// contribute no gradient.
pub fn hinge_terms(scores: &[f64], picked: usize, margin: f64) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut grad = vec![0.0; scores.len()];
    let sp = scores[picked];
    for (i, &si) in scores.iter().enumerate() {
        if i == picked {
            continue;
        }
        let h = margin - (sp - si);
        if h > 0.0 {
            total += h;
            grad[i] += 1.0;
            grad[picked] -= 1.0;
        }
    }
    (total, grad)
}

fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Index of the most common answer, ties to the smallest string.
pub fn predict_prior<'a, I: IntoIterator<Item = &'a str>>(answers: I) -> Result<String> {
    crate::answer::mode(answers).ok_or(Error::Empty("training split"))
}
