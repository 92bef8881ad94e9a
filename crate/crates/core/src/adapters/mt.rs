use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{uniform, Bound, Encoder, ModelConfig, NoHooks, ParamId, ParamStore, TokenBatch};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Architecture of the MT stand-in: two blocks at hidden size `mt_dim`.
pub fn mt_config(model: &ModelConfig, mt_dim: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_dim: mt_dim,
        num_heads: 4,
        ffn_dim: 2 * mt_dim,
        vocab_size: model.vocab_size,
        max_seq_len: model.max_seq_len,
        num_classes: model.num_classes,
    }
}

/// Small encoder that reads target-language tokens and is trained to
/// predict the English token at every position. Its last block output is
/// the latent translation.
#[derive(Clone, Debug, PartialEq)]
pub struct MtEncoder<T> {
    pub encoder: Encoder<T>,
    head: ParamStore<T>,
    out_weight: ParamId,
    out_bias: ParamId,
}

impl<T: Element> MtEncoder<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let encoder = Encoder::new(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3770);
        let mut head = ParamStore::new();
        let scale = 1.0 / (config.hidden_dim as f64).sqrt();
        let out_weight = head.insert("out.weight", uniform(&[config.hidden_dim, config.vocab_size], scale, &mut rng));
        let out_bias = head.insert("out.bias", Tensor::zeros(&[config.vocab_size]));
        head.set_trainable(false);
        Ok(MtEncoder {
            encoder,
            head,
            out_weight,
            out_bias,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.config().hidden_dim
    }

    pub fn head_params(&self) -> &ParamStore<T> {
        &self.head
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.encoder.params_mut().set_trainable(flag);
        self.head.set_trainable(flag);
    }

    pub fn params_mut(&mut self) -> (&mut ParamStore<T>, &mut ParamStore<T>) {
        (self.encoder.params_mut(), &mut self.head)
    }

    /// Per-position token logits `[B·m×V]`.
    pub fn token_logits<'t>(
        &self,
        tape: &'t Tape<T>,
        encoder: &Bound<'t, T>,
        head: &Bound<'t, T>,
        tokens: &TokenBatch,
    ) -> Result<Var<'t, T>> {
        let out = self.encoder.forward(tape, encoder, tokens, &mut NoHooks)?;
        let n = tokens.batch() * tokens.seq_len();
        out.final_hidden
            .reshape(&[n, self.hidden_dim()])?
            .matmul(&head[self.out_weight])?
            .add(&head[self.out_bias])
    }

    /// Last block output `[B×m×d_M]`.
    pub fn latent(&self, tokens: &TokenBatch) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.encoder.params().bind(&tape);
        let out = self.encoder.forward(&tape, &bound, tokens, &mut NoHooks)?;
        Ok(out.per_block.last().expect("at least one block").value())
    }

    /// Argmax English token per position.
    pub fn translate(&self, tokens: &TokenBatch) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let eb = self.encoder.params().bind(&tape);
        let hb = self.head.bind(&tape);
        let logits = self.token_logits(&tape, &eb, &hb, tokens)?.value();
        let v = logits.shape()[1];
        Ok(logits.data().chunks(v).map(crate::model::argmax).collect())
    }
}

/// Projects the frozen MT latent into the model's hidden size:
/// `mt(x_T)·W_proj`, `[B×m×d]`.
pub fn flare_mt_forward<'t, T: Element>(
    tape: &'t Tape<T>,
    mt: &MtEncoder<T>,
    proj: Var<'t, T>,
    tokens: &TokenBatch,
) -> Result<Var<'t, T>> {
    tape.constant(mt.latent(tokens)?).matmul(&proj)
}
