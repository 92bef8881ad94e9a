//! Low-rank adapters, fusion of source and target bottleneck states, and the
//! baselines that share the adapter machinery.

mod cache;
mod fusion;
mod mt;
mod pipeline;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{
    gaussian, read_checkpoint, uniform, write_checkpoint, Bound, Encoder, ModelConfig, ParamId, ParamStore, TaskHead,
    TaskKind,
};
use crate::tensor::{matmul_into, Element, Tensor};

pub use cache::{build_source_cache, SourceCache};
pub use fusion::{align_length, cross_attention, fuse, fused_delta, lora_delta, CrossAttnWeights, FusionKind};
pub use mt::{flare_mt_forward, mt_config, MtEncoder};
pub use pipeline::{
    input_level_concat, xmixup_layer_forward, ActivationProbe, AdaptedModel, AdapterHooks, Bindings, ForwardOut,
    FusionSource, PairBatch, SourceInput,
};

/// Standard deviation of the Gaussian used for down-projections.
pub const DOWN_INIT_STD: f64 = 0.02;

/// Cross-lingual transfer method trained in the adapter stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lora,
    Flare,
    FlareMt,
    InputFusion,
    Xmixup,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Lora, Method::Flare, Method::FlareMt, Method::InputFusion, Method::Xmixup];

    pub fn name(self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::Flare => "flare",
            Method::FlareMt => "flare_mt",
            Method::InputFusion => "input_fusion",
            Method::Xmixup => "xmixup",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Whether the method fuses inside the adapter bottlenecks.
    pub fn fuses(self) -> bool {
        matches!(self, Method::Flare | Method::FlareMt)
    }

    /// Whether the method consumes the English side of a parallel pair.
    pub fn needs_source(self) -> bool {
        matches!(self, Method::Flare | Method::InputFusion | Method::Xmixup)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub fusion: FusionKind,
    /// 0: block `i` fuses the source output of block `i`; 1: of block `i+1`,
    /// clamped at the last block.
    pub source_offset: usize,
    /// Hidden size of the MT stand-in encoder.
    pub mt_dim: usize,
    /// X-Mixup-lite mixing block; `None` means `num_layers / 2`.
    pub mix_layer: Option<usize>,
    pub mix_lambda: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 8,
            alpha: 16.0,
            fusion: FusionKind::AddRelu,
            source_offset: 0,
            mt_dim: 48,
            mix_layer: None,
            mix_lambda: 0.1,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be positive".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if self.source_offset > 1 {
            return Err(Error::Config(format!("source_offset must be 0 or 1, got {}", self.source_offset)));
        }
        if self.mt_dim == 0 || self.mt_dim % 4 != 0 {
            return Err(Error::Config(format!("mt_dim must be a positive multiple of 4, got {}", self.mt_dim)));
        }
        if !(self.mix_lambda.is_finite() && self.mix_lambda >= 0.0) {
            return Err(Error::Config("mix_lambda must be nonnegative".into()));
        }
        if self.mix_layer(model.num_layers) >= model.num_layers {
            return Err(Error::Config(format!(
                "mix_layer {} out of range for {} layers",
                self.mix_layer(model.num_layers),
                model.num_layers
            )));
        }
        Ok(())
    }

    pub fn mix_layer(&self, num_layers: usize) -> usize {
        self.mix_layer.unwrap_or(num_layers / 2)
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Which frozen projection an adapter perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attachment {
    Query,
    Value,
}

/// Parameter handles of one low-rank adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraIds {
    pub down: ParamId,
    pub up: ParamId,
    /// Cross-attention fusion weights (query, key, value), when used.
    pub cross: Option<[ParamId; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct MixIds {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub out: ParamId,
}

/// Every trainable adapter-stage parameter except the task head.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet<T> {
    method: Method,
    config: AdapterConfig,
    num_layers: usize,
    params: ParamStore<T>,
    query: Vec<LoraIds>,
    value: Vec<LoraIds>,
    mt_proj: Option<ParamId>,
    mix: Option<MixIds>,
}

impl<T: Element> AdapterSet<T> {
    pub fn new(model: &ModelConfig, method: Method, config: &AdapterConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        config.validate(model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xADA9);
        let (d, r) = (model.hidden_dim, config.rank);
        let mut params = ParamStore::new();
        let cross_attn = method.fuses() && config.fusion == FusionKind::CrossAttn;
        let mut make = |params: &mut ParamStore<T>, i: usize, tag: &str| {
            let down = params.insert(format!("block.{i}.{tag}.down"), gaussian(&[d, r], DOWN_INIT_STD, &mut rng));
            let up = params.insert(format!("block.{i}.{tag}.up"), Tensor::zeros(&[r, d]));
            let cross = cross_attn.then(|| {
                ["wq", "wk", "wv"].map(|w| params.insert(format!("block.{i}.{tag}.fuse.{w}"), Tensor::eye(r)))
            });
            LoraIds { down, up, cross }
        };
        let mut query = Vec::with_capacity(model.num_layers);
        let mut value = Vec::with_capacity(model.num_layers);
        for i in 0..model.num_layers {
            query.push(make(&mut params, i, "q"));
            value.push(make(&mut params, i, "v"));
        }
        let mt_proj = (method == Method::FlareMt).then(|| {
            let scale = 1.0 / (config.mt_dim as f64).sqrt();
            params.insert("mt.proj", uniform(&[config.mt_dim, d], scale, &mut rng))
        });
        let mix = (method == Method::Xmixup).then(|| {
            let scale = 1.0 / (d as f64).sqrt();
            MixIds {
                query: params.insert("mix.wq", uniform(&[d, d], scale, &mut rng)),
                key: params.insert("mix.wk", uniform(&[d, d], scale, &mut rng)),
                value: params.insert("mix.wv", uniform(&[d, d], scale, &mut rng)),
                out: params.insert("mix.wo", Tensor::zeros(&[d, d])),
            }
        });
        params.set_trainable(true);
        Ok(AdapterSet {
            method,
            config: config.clone(),
            num_layers: model.num_layers,
            params,
            query,
            value,
            mt_proj,
            mix,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn adapter(&self, block: usize, at: Attachment) -> &LoraIds {
        match at {
            Attachment::Query => &self.query[block],
            Attachment::Value => &self.value[block],
        }
    }

    pub fn mt_proj(&self) -> Option<ParamId> {
        self.mt_proj
    }

    pub(crate) fn mix_ids(&self) -> Option<&MixIds> {
        self.mix.as_ref()
    }

    pub fn scale(&self) -> T {
        T::lit(self.config.scale())
    }

    /// Fusion function used inside the bottlenecks, if the method fuses.
    pub fn fusion(&self) -> Option<FusionKind> {
        self.method.fuses().then_some(self.config.fusion)
    }

    pub(crate) fn cross_weights<'t>(&self, bound: &Bound<'t, T>, ids: &LoraIds) -> Option<CrossAttnWeights<'t, T>> {
        ids.cross.map(|[q, k, v]| CrossAttnWeights {
            query: bound[q],
            key: bound[k],
            value: bound[v],
        })
    }

    /// Folds every adapter into the frozen projections:
    /// `W ← W + (alpha/r)·W_down·W_up`.
    pub fn merge_into(&self, encoder: &mut Encoder<T>) -> Result<()> {
        if self.method != Method::Lora {
            return Err(Error::contract(format!("cannot merge {} adapters", self.method.name())));
        }
        let d = encoder.config().hidden_dim;
        let r = self.config.rank;
        let scale = self.scale();
        for i in 0..self.num_layers {
            let block = encoder.block(i).clone();
            for (ids, target) in [(&self.query[i], block.wq), (&self.value[i], block.wv)] {
                let mut product = vec![T::zero(); d * d];
                matmul_into(d, r, d, self.params.get(ids.down).data(), self.params.get(ids.up).data(), &mut product);
                let w = encoder.params_mut().get_mut(target);
                for (w, p) in w.data_mut().iter_mut().zip(&product) {
                    *w = *w + scale * *p;
                }
            }
        }
        Ok(())
    }
}

/// Closed-form count of adapter-stage parameters (excluding the head).
pub fn adapter_param_count(model: &ModelConfig, method: Method, config: &AdapterConfig) -> usize {
    let (l, d, r) = (model.num_layers, model.hidden_dim, config.rank);
    let per_adapter = 2 * d * r
        + if method.fuses() {
            config.fusion.extra_params(r)
        } else {
            0
        };
    let mut total = 2 * l * per_adapter;
    if method == Method::FlareMt {
        total += config.mt_dim * d;
    }
    if method == Method::Xmixup {
        total += 4 * d * d;
    }
    total
}

#[derive(Serialize, Deserialize)]
struct AdapterHeaderConfig {
    model: ModelConfig,
    task: TaskKind,
    method: Method,
    adapter: AdapterConfig,
}

/// Writes adapters and head under the `adapter.` and `head.` namespaces.
/// The header's `extra` records the method and fusion spec.
pub fn save_adapted(model: &AdaptedModel<f32>, config: &ModelConfig, seed: u64, path: &Path) -> Result<()> {
    let set = &model.adapters;
    let header = serde_json::to_value(AdapterHeaderConfig {
        model: config.clone(),
        task: model.head.kind(),
        method: set.method,
        adapter: set.config.clone(),
    })?;
    let extra = serde_json::json!({
        "method": set.method.name(),
        "fusion": set.fusion().map(FusionKind::name),
        "rank": set.config.rank,
        "alpha": set.config.alpha,
        "source_offset": set.config.source_offset,
    });
    write_checkpoint(
        path,
        header,
        seed,
        extra,
        &[("adapter.", &set.params), ("head.", model.head.params())],
    )
}

pub fn load_adapted(path: &Path) -> Result<AdaptedModel<f32>> {
    let ckpt = read_checkpoint(path)?;
    let cfg: AdapterHeaderConfig = serde_json::from_value(ckpt.header.config.clone())
        .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    let mut adapters = AdapterSet::new(&cfg.model, cfg.method, &cfg.adapter, ckpt.header.seed)?;
    let mut head = TaskHead::new(cfg.task, cfg.model.hidden_dim, cfg.model.num_classes, ckpt.header.seed);
    ckpt.restore("adapter.", &mut adapters.params)?;
    ckpt.restore("head.", head.params_mut())?;
    Ok(AdaptedModel { adapters, head })
}
