//! Model checkpoints: a versioned JSON tensor dump with a shape manifest.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, ensure, Context};
use serde::{Deserialize, Serialize};
use vqa_balance_core::model::{MixMode, ModelParams, TENSOR_NAMES};
use vqa_balance_core::train::TrainedModel;

use crate::store::write_atomic;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Tensor name to `[rows, cols]`; vectors are `[len, 1]`.
    pub shapes: BTreeMap<String, [usize; 2]>,
    pub model: TrainedModel,
}

/// Expected shape of every tensor for a parameter set's configuration.
pub fn expected_shapes(p: &ModelParams) -> BTreeMap<String, [usize; 2]> {
    let c = &p.config;
    let mix = match c.mix {
        MixMode::Full => c.candidates,
        MixMode::Shared => 1,
    };
    let dims: [[usize; 2]; 14] = [
        [c.question_vocab, c.word_dim],
        [c.hidden_dim, c.word_dim],
        [c.hidden_dim, 1],
        [c.hidden_dim, c.feature_dim],
        [c.hidden_dim, 1],
        [c.answer_vocab, c.hidden_dim],
        [c.answer_vocab, 1],
        [c.answer_vocab, c.answer_embed_dim],
        [c.common_dim, c.hidden_dim],
        [c.common_dim, 1],
        [c.common_dim, c.answer_embed_dim],
        [c.common_dim, 1],
        [mix, mix],
        [mix, 1],
    ];
    TENSOR_NAMES.iter().map(|n| n.to_string()).zip(dims).collect()
}

impl Checkpoint {
    pub fn new(model: TrainedModel) -> Self {
        let shapes = model.params.as_ref().map(expected_shapes).unwrap_or_default();
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            shapes,
            model,
        }
    }

    /// Checks the version, the shape manifest, and every tensor length.
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.format_version != CHECKPOINT_VERSION {
            bail!("unsupported checkpoint format_version {}", self.format_version);
        }
        let Some(p) = &self.model.params else {
            ensure!(self.shapes.is_empty(), "parameter-free model with a shape manifest");
            return Ok(());
        };
        p.config.validate()?;
        let want = expected_shapes(p);
        ensure!(self.shapes == want, "shape manifest does not match the model configuration");
        for (name, t) in TENSOR_NAMES.iter().zip(p.tensors()) {
            let [r, c] = want[*name];
            ensure!(t.len() == r * c, "tensor {name} has {} values, expected {}", t.len(), r * c);
        }
        ensure!(p.is_finite(), "checkpoint contains non-finite values");
        ensure!(
            p.config.answer_vocab == self.model.vocab.answers().len()
                && p.config.question_vocab == self.model.vocab.words().len(),
            "vocabulary sizes do not match the model configuration"
        );
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = serde_json::to_vec(self).expect("checkpoint serializes");
        b.push(b'\n');
        b
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        write_atomic(path, &self.to_bytes()).map_err(Into::into)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let c: Checkpoint = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        c.validate().with_context(|| format!("validating {}", path.display()))?;
        Ok(c)
    }
}
