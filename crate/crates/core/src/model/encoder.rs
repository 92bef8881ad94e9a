use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{uniform, Bound, ParamId, ParamStore};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// A batch of equal-length token id sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    batch: usize,
    len: usize,
}

impl TokenBatch {
    pub fn new(seqs: &[&[usize]]) -> Result<Self> {
        let len = seqs.first().map_or(0, |s| s.len());
        if len == 0 {
            return Err(Error::contract("empty token batch"));
        }
        if let Some(bad) = seqs.iter().find(|s| s.len() != len) {
            return Err(Error::Shape {
                op: "token_batch",
                lhs: vec![len],
                rhs: vec![bad.len()],
            });
        }
        Ok(TokenBatch {
            ids: seqs.iter().flat_map(|s| s.iter().copied()).collect(),
            batch: seqs.len(),
            len,
        })
    }

    pub fn single(seq: &[usize]) -> Result<Self> {
        Self::new(&[seq])
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }
}

/// Injection points inside each transformer block.
///
/// `qv_deltas` receives the layer-normed block input that feeds the frozen
/// query and value projections and returns additive deltas for their outputs.
/// `after_block` may rewrite the residual stream leaving a block.
pub trait BlockHooks<'t, T: Element> {
    fn qv_deltas(
        &mut self,
        _block: usize,
        _normed: Var<'t, T>,
    ) -> Result<(Option<Var<'t, T>>, Option<Var<'t, T>>)> {
        Ok((None, None))
    }

    fn after_block(&mut self, _block: usize, hidden: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(hidden)
    }
}

/// The plain model: no adapters, no rewrites.
pub struct NoHooks;

impl<'t, T: Element> BlockHooks<'t, T> for NoHooks {}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w_ffn_in: ParamId,
    pub w_ffn_out: ParamId,
}

/// Pre-layer-norm transformer encoder with learned absolute positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockParams>,
    lnf_gain: ParamId,
    lnf_bias: ParamId,
}

/// Outputs of every block plus the final normalized hidden state.
pub struct EncoderOutput<'t, T: Element> {
    /// One `[B×m×d]` variable per block, in order.
    pub per_block: Vec<Var<'t, T>>,
    /// `[B×m×d]`, the final layer norm applied to the last block output.
    pub final_hidden: Var<'t, T>,
}

impl<T: Element> Encoder<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let mut params = ParamStore::new();
        let tok_emb = params.insert("tok_emb", uniform(&[config.vocab_size, d], scale, &mut rng));
        let pos_emb = params.insert("pos_emb", uniform(&[config.max_seq_len, d], scale, &mut rng));
        let mut blocks = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let mut add = |name: &str, t: Tensor<T>| params.insert(format!("block.{i}.{name}"), t);
            let ln1_gain = add("ln1.gain", Tensor::ones(&[d]));
            let ln1_bias = add("ln1.bias", Tensor::zeros(&[d]));
            let wq = add("wq", uniform(&[d, d], scale, &mut rng));
            let wk = add("wk", uniform(&[d, d], scale, &mut rng));
            let wv = add("wv", uniform(&[d, d], scale, &mut rng));
            let wo = add("wo", uniform(&[d, d], scale, &mut rng));
            let ln2_gain = add("ln2.gain", Tensor::ones(&[d]));
            let ln2_bias = add("ln2.bias", Tensor::zeros(&[d]));
            let w_ffn_in = add("ffn.in", uniform(&[d, config.ffn_dim], scale, &mut rng));
            let w_ffn_out = add("ffn.out", uniform(&[config.ffn_dim, d], scale, &mut rng));
            blocks.push(BlockParams {
                ln1_gain,
                ln1_bias,
                wq,
                wk,
                wv,
                wo,
                ln2_gain,
                ln2_bias,
                w_ffn_in,
                w_ffn_out,
            });
        }
        let lnf_gain = params.insert("lnf.gain", Tensor::ones(&[d]));
        let lnf_bias = params.insert("lnf.bias", Tensor::zeros(&[d]));
        params.set_trainable(false);
        Ok(Encoder {
            config: config.clone(),
            params,
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain,
            lnf_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn block(&self, i: usize) -> &BlockParams {
        &self.blocks[i]
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn check_tokens(&self, tokens: &TokenBatch) -> Result<()> {
        if tokens.seq_len() > self.config.max_seq_len {
            return Err(Error::contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.seq_len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.ids().iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index {
                op: "encode",
                index: bad,
                bound: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Token plus position embeddings, `[B×m×d]`.
    pub fn embed<'t>(&self, tape: &'t Tape<T>, bound: &Bound<'t, T>, tokens: &TokenBatch) -> Result<Var<'t, T>> {
        self.check_tokens(tokens)?;
        let (b, m, d) = (tokens.batch(), tokens.seq_len(), self.config.hidden_dim);
        let tok = tape.embedding(bound[self.tok_emb], tokens.ids())?.reshape(&[b, m, d])?;
        let pos = bound[self.pos_emb].slice(0, 0, m)?;
        tok.add(&pos)
    }

    /// Runs block `i` on the residual stream `x` (`[B×m×d]`).
    pub fn block_forward<'t>(
        &self,
        i: usize,
        bound: &Bound<'t, T>,
        x: Var<'t, T>,
        hooks: &mut dyn BlockHooks<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (h, _) = attention_block(x, &self.blocks[i], bound, self.config.num_heads, i, hooks)?;
        ffn_block(h, &self.blocks[i], bound)
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        bound: &Bound<'t, T>,
        tokens: &TokenBatch,
        hooks: &mut dyn BlockHooks<'t, T>,
    ) -> Result<EncoderOutput<'t, T>> {
        let mut x = self.embed(tape, bound, tokens)?;
        let mut per_block = Vec::with_capacity(self.blocks.len());
        for i in 0..self.blocks.len() {
            x = self.block_forward(i, bound, x, hooks)?;
            x = hooks.after_block(i, x)?;
            per_block.push(x);
        }
        let final_hidden = x.layer_norm(&bound[self.lnf_gain], &bound[self.lnf_bias])?;
        Ok(EncoderOutput {
            per_block,
            final_hidden,
        })
    }

    /// Residual stream leaving block `last`, hooks applied.
    pub fn hidden_after<'t>(
        &self,
        tape: &'t Tape<T>,
        bound: &Bound<'t, T>,
        tokens: &TokenBatch,
        hooks: &mut dyn BlockHooks<'t, T>,
        last: usize,
    ) -> Result<Var<'t, T>> {
        if last >= self.blocks.len() {
            return Err(Error::contract(format!("block {last} of {}", self.blocks.len())));
        }
        let mut x = self.embed(tape, bound, tokens)?;
        for i in 0..=last {
            x = self.block_forward(i, bound, x, hooks)?;
            x = hooks.after_block(i, x)?;
        }
        Ok(x)
    }

    /// Adapter-free encoding of one sequence: per-block states `[l×m×d]`
    /// and the final hidden state `[m×d]`.
    pub fn encode(&self, tokens: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let batch = TokenBatch::single(tokens)?;
        let out = self.forward(&tape, &bound, &batch, &mut NoHooks)?;
        let (m, d) = (tokens.len(), self.config.hidden_dim);
        let mut stacked = Vec::with_capacity(self.blocks.len() * m * d);
        for v in &out.per_block {
            stacked.extend_from_slice(&v.data());
        }
        let per_block = Tensor::new(&[self.blocks.len(), m, d], stacked)?;
        let fin = out.final_hidden.value().reshape(&[m, d])?;
        Ok((per_block, fin))
    }

    /// Final layer norm applied to an arbitrary hidden state.
    pub fn final_norm<'t>(&self, bound: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(&bound[self.lnf_gain], &bound[self.lnf_bias])
    }
}

/// Splits `[B×m×d]` into `[B×h×m×(d/h)]`.
fn split_heads<'t, T: Element>(x: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (b, m, d) = (s[0], s[1], s[2]);
    x.reshape(&[b, m, heads, d / heads])?.permute(&[0, 2, 1, 3])
}

fn merge_heads<'t, T: Element>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (b, h, m, dk) = (s[0], s[1], s[2], s[3]);
    x.permute(&[0, 2, 1, 3])?.reshape(&[b, m, h * dk])
}

/// Multi-head self-attention with pre-layer-norm and residual.
///
/// Returns the new residual stream and the attention weights `[B×h×m×m]`.
/// Hook deltas are added to the query and value projection outputs before
/// the attention softmax.
pub fn attention_block<'t, T: Element>(
    x: Var<'t, T>,
    p: &BlockParams,
    bound: &Bound<'t, T>,
    heads: usize,
    block: usize,
    hooks: &mut dyn BlockHooks<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let a = x.layer_norm(&bound[p.ln1_gain], &bound[p.ln1_bias])?;
    let mut q = a.matmul(&bound[p.wq])?;
    let k = a.matmul(&bound[p.wk])?;
    let mut v = a.matmul(&bound[p.wv])?;
    let (dq, dv) = hooks.qv_deltas(block, a)?;
    if let Some(dq) = dq {
        q = q.add(&dq)?;
    }
    if let Some(dv) = dv {
        v = v.add(&dv)?;
    }
    let d = x.shape()[2];
    let dk = d / heads;
    let (q, k, v) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    let weights = q.matmul_t(&k)?.scale(T::lit(1.0 / (dk as f64).sqrt())).softmax();
    let ctx = merge_heads(weights.matmul(&v)?)?;
    let out = x.add(&ctx.matmul(&bound[p.wo])?)?;
    Ok((out, weights))
}

/// Position-wise feed-forward sub-block with pre-layer-norm and residual.
pub fn ffn_block<'t, T: Element>(x: Var<'t, T>, p: &BlockParams, bound: &Bound<'t, T>) -> Result<Var<'t, T>> {
    let f = x.layer_norm(&bound[p.ln2_gain], &bound[p.ln2_bias])?;
    let hidden = f.matmul(&bound[p.w_ffn_in])?.relu();
    x.add(&hidden.matmul(&bound[p.w_ffn_out])?)
}
