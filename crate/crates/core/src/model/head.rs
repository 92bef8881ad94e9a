use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{uniform, Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

/// Longest span (`end - start`) the decoder considers.
pub const DEFAULT_MAX_SPAN_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Span,
}

/// Task head over the encoder's final hidden state.
///
/// Classification reads position 0; span extraction scores every position
/// as a start and as an end.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead<T> {
    kind: TaskKind,
    params: ParamStore<T>,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
}

/// Head outputs for a batch.
pub enum HeadLogits<'t, T: Element> {
    /// `[B×C]`
    Classes(Var<'t, T>),
    /// Start and end logits, each `[B×m]`.
    Span(Var<'t, T>, Var<'t, T>),
}

impl<T: Element> TaskHead<T> {
    pub fn new(kind: TaskKind, hidden_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4EAD);
        let scale = 1.0 / (hidden_dim as f64).sqrt();
        let mut params = ParamStore::new();
        let (weights, biases) = match kind {
            TaskKind::Classification => (
                vec![params.insert("cls.weight", uniform(&[hidden_dim, num_classes], scale, &mut rng))],
                vec![params.insert("cls.bias", Tensor::zeros(&[num_classes]))],
            ),
            TaskKind::Span => {
                let ws = params.insert("start.weight", uniform(&[hidden_dim, 1], scale, &mut rng));
                let we = params.insert("end.weight", uniform(&[hidden_dim, 1], scale, &mut rng));
                let bs = params.insert("start.bias", Tensor::zeros(&[1]));
                let be = params.insert("end.bias", Tensor::zeros(&[1]));
                (vec![ws, we], vec![bs, be])
            }
        };
        params.set_trainable(true);
        TaskHead {
            kind,
            params,
            weights,
            biases,
        }
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// `hidden` is `[B×m×d]`. For span heads, `segment = (start, len)`
    /// restricts scoring to a window of positions.
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t, T>,
        hidden: Var<'t, T>,
        segment: Option<(usize, usize)>,
    ) -> Result<HeadLogits<'t, T>> {
        let s = hidden.shape();
        let (b, m, d) = (s[0], s[1], s[2]);
        match self.kind {
            TaskKind::Classification => {
                let first = hidden.slice(1, 0, 1)?.reshape(&[b, d])?;
                let logits = first.matmul(&bound[self.weights[0]])?.add(&bound[self.biases[0]])?;
                Ok(HeadLogits::Classes(logits))
            }
            TaskKind::Span => {
                let (start, len) = segment.unwrap_or((0, m));
                let h = if (start, len) == (0, m) { hidden } else { hidden.slice(1, start, len)? };
                let score = |w: ParamId, bias: ParamId| -> Result<Var<'t, T>> {
                    h.matmul(&bound[w])?.add(&bound[bias])?.reshape(&[b, len])
                };
                Ok(HeadLogits::Span(
                    score(self.weights[0], self.biases[0])?,
                    score(self.weights[1], self.biases[1])?,
                ))
            }
        }
    }
}

impl<'t, T: Element> HeadLogits<'t, T> {
    /// Mean cross-entropy against class labels or `(start, end)` spans.
    pub fn loss(&self, targets: &Targets) -> Result<Var<'t, T>> {
        match (self, targets) {
            (HeadLogits::Classes(l), Targets::Classes(y)) => l.cross_entropy(y),
            (HeadLogits::Span(s, e), Targets::Spans(spans)) => {
                let starts: Vec<usize> = spans.iter().map(|p| p.0).collect();
                let ends: Vec<usize> = spans.iter().map(|p| p.1).collect();
                let ls = s.cross_entropy(&starts)?;
                let le = e.cross_entropy(&ends)?;
                Ok(ls.add(&le)?.scale(T::lit(0.5)))
            }
            _ => Err(Error::contract("head kind does not match targets")),
        }
    }

    /// Argmax class or best constrained span per example.
    pub fn predictions(&self, max_span_len: usize) -> Vec<Prediction> {
        match self {
            HeadLogits::Classes(l) => {
                let t = l.value();
                let c = t.shape()[1];
                t.data().chunks(c).map(|row| Prediction::Class(argmax(row))).collect()
            }
            HeadLogits::Span(s, e) => {
                let (s, e) = (s.value(), e.value());
                let m = s.shape()[1];
                s.data()
                    .chunks(m)
                    .zip(e.data().chunks(m))
                    .map(|(sr, er)| {
                        let (i, j) = decode_span(sr, er, max_span_len);
                        Prediction::Span(i, j)
                    })
                    .collect()
            }
        }
    }
}

/// Training targets for a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Targets {
    Classes(Vec<usize>),
    Spans(Vec<(usize, usize)>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Class(usize),
    Span(usize, usize),
}

/// Index of the first maximum.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Maximizes `start[i] + end[j]` over `i ≤ j ≤ i + max_span_len`.
/// Ties keep the lexicographically first pair.
pub fn decode_span<T: Element>(start: &[T], end: &[T], max_span_len: usize) -> (usize, usize) {
    let m = start.len().min(end.len());
    let mut best = (0, 0);
    let mut best_score = T::neg_infinity();
    for i in 0..m {
        for j in i..m.min(i + max_span_len + 1) {
            let s = start[i] + end[j];
            if s > best_score {
                best_score = s;
                best = (i, j);
            }
        }
    }
    best
}
