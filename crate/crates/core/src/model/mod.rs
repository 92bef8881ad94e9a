//! The frozen encoder stand-in, its task heads and checkpoint files.

mod checkpoint;
mod encoder;
mod head;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor};

pub use checkpoint::{
    load_model, read_checkpoint, save_model, write_checkpoint, Checkpoint, CheckpointHeader, ParamEntry,
    FORMAT_VERSION,
};
pub use encoder::{attention_block, ffn_block, BlockHooks, BlockParams, Encoder, EncoderOutput, NoHooks, TokenBatch};
pub use head::{argmax, decode_span, HeadLogits, Prediction, TaskHead, TaskKind, Targets, DEFAULT_MAX_SPAN_LEN};
pub use params::{Bound, ParamId, ParamStore};
pub(crate) use params::{gaussian, uniform};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 64,
            max_seq_len: 32,
            num_classes: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Encoder parameter count as a closed form of the config.
    pub fn encoder_param_count(&self) -> usize {
        let d = self.hidden_dim;
        let per_block = 4 * d * d + 2 * d * self.ffn_dim + 4 * d;
        (self.vocab_size + self.max_seq_len) * d + self.num_layers * per_block + 2 * d
    }
}

/// Encoder plus task head.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel<T> {
    pub encoder: Encoder<T>,
    pub head: TaskHead<T>,
    pub seed: u64,
}

/// Tape handles for both parameter stores of a [`BaseModel`].
pub struct ModelBound<'t, T: Element> {
    pub encoder: Bound<'t, T>,
    pub head: Bound<'t, T>,
}

impl<T: Element> BaseModel<T> {
    pub fn new(config: &ModelConfig, task: TaskKind, seed: u64) -> Result<Self> {
        Ok(BaseModel {
            encoder: Encoder::new(config, seed)?,
            head: TaskHead::new(task, config.hidden_dim, config.num_classes, seed),
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.encoder.config()
    }

    pub fn task(&self) -> TaskKind {
        self.head.kind()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> ModelBound<'t, T> {
        ModelBound {
            encoder: self.encoder.params().bind(tape),
            head: self.head.params().bind(tape),
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        bound: &ModelBound<'t, T>,
        tokens: &TokenBatch,
        hooks: &mut dyn BlockHooks<'t, T>,
        segment: Option<(usize, usize)>,
    ) -> Result<(EncoderOutput<'t, T>, HeadLogits<'t, T>)> {
        let out = self.encoder.forward(tape, &bound.encoder, tokens, hooks)?;
        let logits = self.head.forward(&bound.head, out.final_hidden, segment)?;
        Ok((out, logits))
    }

    /// Class logits `[C]` for one sequence.
    pub fn classify(&self, tokens: &[usize], hooks: &mut dyn for<'t> BlockHooks<'t, T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let (_, logits) = self.forward(&tape, &bound, &TokenBatch::single(tokens)?, hooks, None)?;
        match logits {
            HeadLogits::Classes(l) => l.value().reshape(&[self.config().num_classes]),
            HeadLogits::Span(..) => Err(Error::contract("classify on a span head")),
        }
    }

    /// Start logits, end logits and the decoded span for one sequence.
    pub fn span_predict(
        &self,
        tokens: &[usize],
        hooks: &mut dyn for<'t> BlockHooks<'t, T>,
    ) -> Result<(Tensor<T>, Tensor<T>, (usize, usize))> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let (_, logits) = self.forward(&tape, &bound, &TokenBatch::single(tokens)?, hooks, None)?;
        match logits {
            HeadLogits::Span(s, e) => {
                let (s, e) = (s.value(), e.value());
                let span = decode_span(s.data(), e.data(), DEFAULT_MAX_SPAN_LEN);
                let m = tokens.len();
                Ok((s.reshape(&[m])?, e.reshape(&[m])?, span))
            }
            HeadLogits::Classes(_) => Err(Error::contract("span_predict on a classification head")),
        }
    }
}
