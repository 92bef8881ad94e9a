use super::{build_source_cache, flare_mt_forward, fused_delta, lora_delta, AdapterSet, Attachment, Method, MtEncoder, SourceCache};
use crate::error::{Error, Result};
use crate::model::{BaseModel, BlockHooks, Encoder, Bound, HeadLogits, Prediction, TaskHead, TaskKind, Targets, TokenBatch};
use crate::tensor::{Element, Tape, Var};

/// One training or evaluation batch: target-language tokens, optionally the
/// English side of each pair, and gold targets in target coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub target: TokenBatch,
    pub source: Option<TokenBatch>,
    pub targets: Targets,
}

/// Where fusion methods take their source representation from.
#[derive(Clone, Copy, Debug)]
pub enum SourceInput<'a, T> {
    /// Built from the batch: a fresh source cache, or the MT latent.
    Live,
    /// A prebuilt cache for the batch.
    Cached(&'a SourceCache<T>),
    /// All-zero source of the live shape.
    Zeroed,
    /// No source at all: the plain low-rank graph.
    Absent,
}

/// Source representation visible to the adapter hooks.
pub enum FusionSource<'t, T: Element> {
    None,
    /// One `[B×m_S×d]` state per block.
    PerBlock(Vec<Var<'t, T>>),
    /// A single `[B×m×d]` state fused in every block.
    Shared(Var<'t, T>),
}

struct MixState<'t, T: Element> {
    layer: usize,
    source: Var<'t, T>,
    lambda: T,
    consistency: Option<Var<'t, T>>,
}

/// Mean `|activation|` of the source and target bottleneck streams per
/// layer and position.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationProbe {
    attachment: Attachment,
    /// `[layer][position] -> (source sum, target sum, rows)`
    sums: Vec<Vec<(f64, f64, usize)>>,
}

impl ActivationProbe {
    pub fn new(num_layers: usize, attachment: Attachment) -> Self {
        ActivationProbe {
            attachment,
            sums: vec![Vec::new(); num_layers],
        }
    }

    pub fn attachment(&self) -> Attachment {
        self.attachment
    }

    fn record<T: Element>(&mut self, layer: usize, source: &Var<'_, T>, target: &Var<'_, T>) {
        let shape = target.shape();
        let (b, m, r) = (shape[0], shape[1], shape[2]);
        let slots = &mut self.sums[layer];
        if slots.len() < m {
            slots.resize(m, (0.0, 0.0, 0));
        }
        let (s, t) = (source.data(), target.data());
        for bi in 0..b {
            for p in 0..m {
                let range = (bi * m + p) * r..(bi * m + p + 1) * r;
                let mean = |xs: &[T]| xs.iter().map(|x| x.as_f64().abs()).sum::<f64>() / r as f64;
                let slot = &mut slots[p];
                slot.0 += mean(&s[range.clone()]);
                slot.1 += mean(&t[range]);
                slot.2 += 1;
            }
        }
    }

    /// `(layer, position, source mean, target mean)` for every recorded slot.
    pub fn positions(&self) -> Vec<(usize, usize, f64, f64)> {
        let mut out = Vec::new();
        for (l, slots) in self.sums.iter().enumerate() {
            for (p, &(s, t, n)) in slots.iter().enumerate() {
                if n > 0 {
                    out.push((l, p, s / n as f64, t / n as f64));
                }
            }
        }
        out
    }

    /// `(layer, source mean, target mean)` averaged over positions and rows.
    pub fn layers(&self) -> Vec<(usize, f64, f64)> {
        self.sums
            .iter()
            .enumerate()
            .filter_map(|(l, slots)| {
                let n: usize = slots.iter().map(|x| x.2).sum();
                (n > 0).then(|| {
                    let s: f64 = slots.iter().map(|x| x.0).sum();
                    let t: f64 = slots.iter().map(|x| x.1).sum();
                    (l, s / n as f64, t / n as f64)
                })
            })
            .collect()
    }
}

/// Block hooks that add low-rank (optionally fused) deltas to the query
/// and value projections, and optionally mix a source state after one block.
pub struct AdapterHooks<'a, 't, T: Element> {
    set: &'a AdapterSet<T>,
    bound: &'a Bound<'t, T>,
    source: FusionSource<'t, T>,
    probe: Option<&'a mut ActivationProbe>,
    mix: Option<MixState<'t, T>>,
}

impl<'a, 't, T: Element> AdapterHooks<'a, 't, T> {
    pub fn new(set: &'a AdapterSet<T>, bound: &'a Bound<'t, T>, source: FusionSource<'t, T>) -> Self {
        AdapterHooks {
            set,
            bound,
            source,
            probe: None,
            mix: None,
        }
    }

    pub fn with_probe(mut self, probe: Option<&'a mut ActivationProbe>) -> Self {
        self.probe = probe;
        self
    }

    /// Enables X-Mixup-lite mixing of `source` (`[B×m_S×d]`) after block `layer`.
    pub fn with_mix(mut self, layer: usize, source: Var<'t, T>) -> Result<Self> {
        if self.set.mix_ids().is_none() {
            return Err(Error::contract("mixing needs x-mixup parameters"));
        }
        self.mix = Some(MixState {
            layer,
            source,
            lambda: T::lit(self.set.config().mix_lambda),
            consistency: None,
        });
        Ok(self)
    }

    /// Weighted consistency loss recorded by the mixing block, if it ran.
    pub fn consistency_loss(&self) -> Option<Var<'t, T>> {
        self.mix.as_ref().and_then(|m| m.consistency)
    }

    fn source_for(&self, block: usize) -> Result<Option<Var<'t, T>>> {
        match &self.source {
            FusionSource::None => Ok(None),
            FusionSource::Shared(s) => Ok(Some(*s)),
            FusionSource::PerBlock(layers) => {
                let idx = (block + self.set.config().source_offset).min(self.set.num_layers() - 1);
                layers.get(idx).copied().map(Some).ok_or_else(|| {
                    Error::contract(format!("source cache has {} layers, block {block} needs {idx}", layers.len()))
                })
            }
        }
    }
}

impl<'a, 't, T: Element> BlockHooks<'t, T> for AdapterHooks<'a, 't, T> {
    fn qv_deltas(&mut self, block: usize, normed: Var<'t, T>) -> Result<(Option<Var<'t, T>>, Option<Var<'t, T>>)> {
        let source = self.source_for(block)?;
        let scale = self.set.scale();
        let mut deltas = [None, None];
        for (slot, at) in [Attachment::Query, Attachment::Value].into_iter().enumerate() {
            let ids = self.set.adapter(block, at);
            let (down, up) = (self.bound[ids.down], self.bound[ids.up]);
            deltas[slot] = Some(match source {
                None => lora_delta(normed, down, up, scale)?,
                Some(src) => {
                    let cross = self.set.cross_weights(self.bound, ids);
                    let kind = self.set.config().fusion;
                    let (delta, sb, tb) = fused_delta(normed, src, down, up, scale, kind, cross.as_ref())?;
                    if let Some(probe) = self.probe.as_deref_mut() {
                        if probe.attachment == at {
                            probe.record(block, &sb, &tb);
                        }
                    }
                    delta
                }
            });
        }
        let [dq, dv] = deltas;
        Ok((dq, dv))
    }

    fn after_block(&mut self, block: usize, hidden: Var<'t, T>) -> Result<Var<'t, T>> {
        let Some(mix) = self.mix.as_mut().filter(|m| m.layer == block) else {
            return Ok(hidden);
        };
        let ids = self.set.mix_ids().expect("checked in with_mix");
        let d = hidden.shape()[2];
        let q = hidden.matmul(&self.bound[ids.query])?;
        let k = mix.source.matmul(&self.bound[ids.key])?;
        let v = mix.source.matmul(&self.bound[ids.value])?;
        let attn = q.matmul_t(&k)?.scale(T::lit(1.0 / (d as f64).sqrt())).softmax();
        let mixed = hidden.add(&attn.matmul(&v)?.matmul(&self.bound[ids.out])?)?;
        mix.consistency = Some(mixed.mse(&hidden)?.scale(mix.lambda));
        Ok(mixed)
    }
}

/// `[x_S; sep; x_T]` for the input-level fusion baseline.
pub fn input_level_concat(source: &[usize], target: &[usize], sep: usize, max_len: usize) -> Result<Vec<usize>> {
    let len = source.len() + 1 + target.len();
    if len > max_len {
        return Err(Error::contract(format!(
            "concatenated length {len} exceeds max_seq_len {max_len}"
        )));
    }
    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(source);
    out.push(sep);
    out.extend_from_slice(target);
    Ok(out)
}

/// Adapter-stage model: trainable adapters and task head over a frozen base.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedModel<T> {
    pub adapters: AdapterSet<T>,
    pub head: TaskHead<T>,
}

/// Tape handles for one forward pass of an [`AdaptedModel`].
pub struct Bindings<'t, T: Element> {
    pub encoder: Bound<'t, T>,
    pub adapters: Bound<'t, T>,
    pub head: Bound<'t, T>,
}

pub struct ForwardOut<'t, T: Element> {
    pub logits: HeadLogits<'t, T>,
    /// Extra training loss, e.g. the X-Mixup-lite consistency term.
    pub aux_loss: Option<Var<'t, T>>,
}

impl<'t, T: Element> ForwardOut<'t, T> {
    pub fn loss(&self, targets: &Targets) -> Result<Var<'t, T>> {
        let task = self.logits.loss(targets)?;
        match self.aux_loss {
            Some(aux) => task.add(&aux),
            None => Ok(task),
        }
    }
}

impl<T: Element> AdaptedModel<T> {
    /// Fresh adapters; the head starts as a copy of the base model's head.
    pub fn new(base: &BaseModel<T>, adapters: AdapterSet<T>) -> Self {
        let mut head = base.head.clone();
        head.params_mut().set_trainable(true);
        AdaptedModel { adapters, head }
    }

    pub fn method(&self) -> Method {
        self.adapters.method()
    }

    pub fn trainable_numel(&self) -> usize {
        self.adapters.params().trainable_numel() + self.head.params().trainable_numel()
    }

    pub fn bind<'t>(&self, base: &BaseModel<T>, tape: &'t Tape<T>) -> Bindings<'t, T> {
        Bindings {
            encoder: base.encoder.params().bind(tape),
            adapters: self.adapters.params().bind(tape),
            head: self.head.params().bind(tape),
        }
    }

    /// Method-specific forward pass over a batch.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'a, 't>(
        &'a self,
        tape: &'t Tape<T>,
        base: &BaseModel<T>,
        mt: Option<&MtEncoder<T>>,
        b: &'a Bindings<'t, T>,
        batch: &PairBatch,
        source: SourceInput<'_, T>,
        probe: Option<&'a mut ActivationProbe>,
    ) -> Result<ForwardOut<'t, T>> {
        let set = &self.adapters;
        let enc = &base.encoder;
        let cfg = enc.config();
        let need_source = || {
            batch
                .source
                .as_ref()
                .ok_or_else(|| Error::contract(format!("{} needs source tokens", set.method().name())))
        };
        let plain = || AdapterHooks::new(set, &b.adapters, FusionSource::None);
        let (bs, mt_len) = (batch.target.batch(), batch.target.seq_len());
        match set.method() {
            Method::Lora => self.finish(tape, enc, b, &batch.target, plain(), None),
            Method::Flare => {
                let fs = match source {
                    SourceInput::Live => FusionSource::PerBlock(build_source_cache(enc, need_source()?)?.bind(tape)),
                    SourceInput::Cached(c) => FusionSource::PerBlock(c.bind(tape)),
                    SourceInput::Zeroed => {
                        let len = batch.source.as_ref().map_or(mt_len, TokenBatch::seq_len);
                        FusionSource::PerBlock(
                            SourceCache::zeros(cfg.num_layers, bs, len, cfg.hidden_dim).bind(tape),
                        )
                    }
                    SourceInput::Absent => FusionSource::None,
                };
                let hooks = AdapterHooks::new(set, &b.adapters, fs).with_probe(probe);
                self.finish(tape, enc, b, &batch.target, hooks, None)
            }
            Method::FlareMt => {
                let fs = match source {
                    SourceInput::Live | SourceInput::Cached(_) => {
                        let mt = mt.ok_or_else(|| Error::contract("flare_mt needs the MT stand-in"))?;
                        let proj = b.adapters[set.mt_proj().expect("flare_mt owns a projection")];
                        FusionSource::Shared(flare_mt_forward(tape, mt, proj, &batch.target)?)
                    }
                    SourceInput::Zeroed => FusionSource::Shared(tape.zeros(&[bs, mt_len, cfg.hidden_dim])),
                    SourceInput::Absent => FusionSource::None,
                };
                let hooks = AdapterHooks::new(set, &b.adapters, fs).with_probe(probe);
                self.finish(tape, enc, b, &batch.target, hooks, None)
            }
            Method::InputFusion => {
                let src = need_source()?;
                let sep = crate::data::SEP;
                let rows = (0..bs)
                    .map(|i| input_level_concat(src.row(i), batch.target.row(i), sep, cfg.max_seq_len))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&[usize]> = rows.iter().map(Vec::as_slice).collect();
                let joined = TokenBatch::new(&refs)?;
                let segment = (self.head.kind() == TaskKind::Span).then(|| (src.seq_len() + 1, mt_len));
                self.finish(tape, enc, b, &joined, plain(), segment)
            }
            Method::Xmixup => xmixup_layer_forward(self, tape, base, b, need_source()?, &batch.target),
        }
    }

    fn finish<'t>(
        &self,
        tape: &'t Tape<T>,
        enc: &Encoder<T>,
        b: &Bindings<'t, T>,
        tokens: &TokenBatch,
        mut hooks: AdapterHooks<'_, 't, T>,
        segment: Option<(usize, usize)>,
    ) -> Result<ForwardOut<'t, T>> {
        let out = enc.forward(tape, &b.encoder, tokens, &mut hooks)?;
        let logits = self.head.forward(&b.head, out.final_hidden, segment)?;
        Ok(ForwardOut {
            logits,
            aux_loss: hooks.consistency_loss(),
        })
    }

    /// Predictions for one batch without keeping the tape.
    pub fn predict(
        &self,
        base: &BaseModel<T>,
        mt: Option<&MtEncoder<T>>,
        batch: &PairBatch,
        source: SourceInput<'_, T>,
        max_span_len: usize,
    ) -> Result<Vec<Prediction>> {
        let tape = Tape::new();
        let b = self.bind(base, &tape);
        let out = self.forward(&tape, base, mt, &b, batch, source, None)?;
        Ok(out.logits.predictions(max_span_len))
    }
}

/// X-Mixup-lite: both sequences pass through the low-rank model; after the
/// mixing block the target stream attends to the source stream and the
/// result is added residually. The consistency term penalizes the squared
/// difference between mixed and unmixed target states.
pub fn xmixup_layer_forward<'t, T: Element>(
    model: &AdaptedModel<T>,
    tape: &'t Tape<T>,
    base: &BaseModel<T>,
    b: &Bindings<'t, T>,
    source: &TokenBatch,
    target: &TokenBatch,
) -> Result<ForwardOut<'t, T>> {
    let set = &model.adapters;
    let layer = set.config().mix_layer(set.num_layers());
    if layer >= set.num_layers() {
        return Err(Error::contract(format!("mix layer {layer} of {}", set.num_layers())));
    }
    let mut plain = AdapterHooks::new(set, &b.adapters, FusionSource::None);
    let src_hidden = base.encoder.hidden_after(tape, &b.encoder, source, &mut plain, layer)?;
    let hooks = AdapterHooks::new(set, &b.adapters, FusionSource::None).with_mix(layer, src_hidden)?;
    model.finish(tape, &base.encoder, b, target, hooks, None)
}
