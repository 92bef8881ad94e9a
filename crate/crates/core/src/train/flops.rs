use serde::{Deserialize, Serialize};

use crate::adapters::{mt_config, AdapterConfig, FusionKind, Method};
use crate::model::ModelConfig;

/// Analytic multiply-accumulate counts for one example's forward pass.
///
/// Elementwise fusion operations count one MAC per output element.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounter {
    pub attention_scores: u64,
    pub attention_output: u64,
    pub projections: u64,
    pub ffn: u64,
    pub adapters: u64,
    pub fusion: u64,
    /// Adapter-free (or, for X-Mixup-lite, adapted) pass over the source.
    pub source_pass: u64,
    pub mt_encoder: u64,
    pub mixing: u64,
    /// Part of the total that needs no backward pass.
    pub no_grad: u64,
}

impl FlopCounter {
    pub fn total(&self) -> u64 {
        self.attention_scores
            + self.attention_output
            + self.projections
            + self.ffn
            + self.adapters
            + self.fusion
            + self.source_pass
            + self.mt_encoder
            + self.mixing
    }

    /// FLOPs of one training step: two per MAC, with the differentiated part
    /// of the graph costed at three times its forward pass.
    pub fn flops_per_step(&self, batch: usize) -> u64 {
        let graph = self.total() - self.no_grad;
        2 * batch as u64 * (3 * graph + self.no_grad)
    }
}

/// Encoder MACs `(scores, output, projections, ffn)` over `blocks` blocks at length `m`.
fn encoder_macs(cfg: &ModelConfig, blocks: usize, m: usize) -> (u64, u64, u64, u64) {
    let (l, m, d, f) = (blocks as u64, m as u64, cfg.hidden_dim as u64, cfg.ffn_dim as u64);
    (l * m * m * d, l * m * m * d, l * 4 * m * d * d, l * 2 * m * d * f)
}

fn encoder_total(cfg: &ModelConfig, blocks: usize, m: usize) -> u64 {
    let (s, o, p, f) = encoder_macs(cfg, blocks, m);
    s + o + p + f
}

/// Per-example forward MACs of `method` with a target of length `m` and a
/// source of length `m_source`.
pub fn count_flops(
    method: Method,
    cfg: &ModelConfig,
    adapter: &AdapterConfig,
    m: usize,
    m_source: usize,
) -> FlopCounter {
    let l = cfg.num_layers;
    let (d, r) = (cfg.hidden_dim as u64, adapter.rank as u64);
    let trunk_len = if method == Method::InputFusion { m_source + 1 + m } else { m };
    let (scores, output, projections, ffn) = encoder_macs(cfg, l, trunk_len);
    let per_adapter = 2 * trunk_len as u64 * d * r;
    let mut c = FlopCounter {
        attention_scores: scores,
        attention_output: output,
        projections,
        ffn,
        adapters: 2 * l as u64 * per_adapter,
        ..FlopCounter::default()
    };
    let (mt, ms) = (m as u64, m_source as u64);
    let fusion_op = |kind: FusionKind| match kind {
        FusionKind::Add | FusionKind::Mul | FusionKind::AddRelu => mt * r,
        FusionKind::CrossAttn => 3 * mt * r * r + 2 * mt * mt * r,
    };
    match method {
        Method::Lora | Method::InputFusion => {}
        Method::Flare => {
            c.source_pass = encoder_total(cfg, l, m_source);
            c.no_grad = c.source_pass;
            // Per adapter: down-projection of the source, then the fusion op.
            c.fusion = 2 * l as u64 * (ms * d * r + fusion_op(adapter.fusion));
        }
        Method::FlareMt => {
            let mt_cfg = mt_config(cfg, adapter.mt_dim);
            c.mt_encoder = encoder_total(&mt_cfg, mt_cfg.num_layers, m);
            c.no_grad = c.mt_encoder;
            let proj = mt * adapter.mt_dim as u64 * d;
            c.fusion = proj + 2 * l as u64 * (mt * d * r + fusion_op(adapter.fusion));
        }
        Method::Xmixup => {
            let k = adapter.mix_layer(l);
            c.source_pass = encoder_total(cfg, k + 1, m_source) + 2 * (k as u64 + 1) * 2 * ms * d * r;
            c.mixing = 2 * mt * d * d + 2 * ms * d * d + 2 * mt * ms * d;
        }
    }
    c
}
