use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Var};

/// How source and target bottleneck representations are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Add,
    Mul,
    AddRelu,
    CrossAttn,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [FusionKind::Add, FusionKind::Mul, FusionKind::AddRelu, FusionKind::CrossAttn];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Add => "add",
            FusionKind::Mul => "mul",
            FusionKind::AddRelu => "add_relu",
            FusionKind::CrossAttn => "cross_attn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Extra parameters per adapter at bottleneck size `r`.
    pub fn extra_params(self, r: usize) -> usize {
        match self {
            FusionKind::CrossAttn => 3 * r * r,
            _ => 0,
        }
    }
}

/// Single-head cross-attention weights, each `[r×r]`.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttnWeights<'t, T: Element> {
    pub query: Var<'t, T>,
    pub key: Var<'t, T>,
    pub value: Var<'t, T>,
}

/// Low-rank delta `(alpha/r) · (x·W_down)·W_up`.
pub fn lora_delta<'t, T: Element>(x: Var<'t, T>, down: Var<'t, T>, up: Var<'t, T>, scale: T) -> Result<Var<'t, T>> {
    Ok(x.matmul(&down)?.matmul(&up)?.scale(scale))
}

/// Combines `source` and `target` bottleneck representations of identical
/// shape `[.., m, r]`.
///
/// Cross-attention queries come from the source and keys/values from the
/// target: `softmax((S·Wq)(T·Wk)ᵀ/√r)·(T·Wv)`.
pub fn fuse<'t, T: Element>(
    source: Var<'t, T>,
    target: Var<'t, T>,
    kind: FusionKind,
    cross: Option<&CrossAttnWeights<'t, T>>,
) -> Result<Var<'t, T>> {
    let (ss, ts) = (source.shape(), target.shape());
    if ss != ts {
        return Err(Error::contract(format!(
            "fusion inputs must share a shape, got {ss:?} and {ts:?}"
        )));
    }
    match kind {
        FusionKind::Add => source.add(&target),
        FusionKind::Mul => source.mul(&target),
        FusionKind::AddRelu => source.relu().add(&target.relu()),
        FusionKind::CrossAttn => {
            let w = cross.ok_or_else(|| Error::contract("cross_attn fusion without weights"))?;
            cross_attention(source, target, w).map(|(out, _)| out)
        }
    }
}

/// Returns the fused output and the attention weights.
pub fn cross_attention<'t, T: Element>(
    source: Var<'t, T>,
    target: Var<'t, T>,
    w: &CrossAttnWeights<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let r = *source.shape().last().expect("rank >= 1");
    let q = source.matmul(&w.query)?;
    let k = target.matmul(&w.key)?;
    let v = target.matmul(&w.value)?;
    let attn = q.matmul_t(&k)?.scale(T::lit(1.0 / (r as f64).sqrt())).softmax();
    Ok((attn.matmul(&v)?, attn))
}

/// Pads with zero rows or truncates axis 1 of `[B×m_S×k]` to `target_len`.
pub fn align_length<'t, T: Element>(x: Var<'t, T>, target_len: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let m = s[1];
    if m == target_len {
        Ok(x)
    } else if m > target_len {
        x.slice(1, 0, target_len)
    } else {
        let pad = x.tape().zeros(&[s[0], target_len - m, s[2]]);
        x.tape().concat(&[x, pad], 1)
    }
}

/// Fused adapter delta for one attachment point.
///
/// Both streams share the adapter's down-projection; the fused bottleneck is
/// up-projected and scaled by `alpha/r`. Returns the delta together with the
/// two bottleneck representations (source aligned to the target length).
#[allow(clippy::too_many_arguments)]
pub fn fused_delta<'t, T: Element>(
    target_in: Var<'t, T>,
    source_in: Var<'t, T>,
    down: Var<'t, T>,
    up: Var<'t, T>,
    scale: T,
    kind: FusionKind,
    cross: Option<&CrossAttnWeights<'t, T>>,
) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
    let t_len = target_in.shape()[1];
    let tb = target_in.matmul(&down)?;
    let sb = align_length(source_in.matmul(&down)?, t_len)?;
    let h = fuse(sb, tb, kind, cross)?;
    Ok((h.matmul(&up)?.scale(scale), sb, tb))
}
