use crate::error::{Error, Result};
use crate::model::{Encoder, NoHooks, TokenBatch};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Per-block outputs of an adapter-free pass over a source batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceCache<T> {
    /// One `[B×m_S×d]` tensor per block.
    layers: Vec<Tensor<T>>,
}

impl<T: Element> SourceCache<T> {
    pub fn from_layers(layers: Vec<Tensor<T>>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::contract("empty source cache"))?;
        if first.shape().len() != 3 || layers.iter().any(|t| t.shape() != first.shape()) {
            return Err(Error::contract("source cache layers must share a [B×m×d] shape"));
        }
        Ok(SourceCache { layers })
    }

    /// All-zero cache with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        SourceCache {
            layers: self.layers.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn zeros(num_layers: usize, batch: usize, len: usize, dim: usize) -> Self {
        SourceCache {
            layers: vec![Tensor::zeros(&[batch, len, dim]); num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> Result<&Tensor<T>> {
        self.layers.get(i).ok_or_else(|| {
            Error::contract(format!("source cache has {} layers, block {i} requested", self.layers.len()))
        })
    }

    /// `[l×m_S×d]` view of one batch element.
    pub fn stacked(&self, b: usize) -> Result<Tensor<T>> {
        let s = self.layers[0].shape();
        let (m, d) = (s[1], s[2]);
        let mut data = Vec::with_capacity(self.layers.len() * m * d);
        for t in &self.layers {
            data.extend_from_slice(&t.data()[b * m * d..(b + 1) * m * d]);
        }
        Tensor::new(&[self.layers.len(), m, d], data)
    }

    /// Records every layer on `tape` as a constant.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.layers.iter().map(|t| tape.constant(t.clone())).collect()
    }
}

/// Runs the frozen encoder over `source` with no adapters and keeps every
/// block output.
pub fn build_source_cache<T: Element>(encoder: &Encoder<T>, source: &TokenBatch) -> Result<SourceCache<T>> {
    let tape = Tape::new();
    let bound = encoder.params().bind(&tape);
    let out = encoder.forward(&tape, &bound, source, &mut NoHooks)?;
    SourceCache::from_layers(out.per_block.iter().map(Var::value).collect())
}
