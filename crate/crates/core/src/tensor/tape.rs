use std::cell::{Ref, RefCell};
use std::fmt;

use super::kernels::MatLayout;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Layer-norm epsilon, added to the variance inside the square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

type Id = usize;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Id,
        b: Id,
        batch: usize,
        p: usize,
        q: usize,
        s: usize,
        shared_rhs: bool,
        rhs_transposed: bool,
    },
    Add {
        a: Id,
        b: Id,
        repeat: usize,
    },
    Sub {
        a: Id,
        b: Id,
        repeat: usize,
    },
    Mul {
        a: Id,
        b: Id,
        repeat: usize,
    },
    Scale {
        a: Id,
        c: T,
    },
    Relu {
        a: Id,
    },
    Softmax {
        a: Id,
        cols: usize,
    },
    LayerNorm {
        x: Id,
        gain: Id,
        bias: Id,
        cols: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Id,
        ids: Vec<usize>,
        dim: usize,
    },
    CrossEntropy {
        logits: Id,
        labels: Vec<usize>,
        probs: Vec<T>,
        classes: usize,
    },
    Permute {
        a: Id,
        perm: Vec<usize>,
    },
    Reshape {
        a: Id,
    },
    Concat {
        parts: Vec<Id>,
        outer: usize,
        inner: usize,
        widths: Vec<usize>,
    },
    Slice {
        a: Id,
        outer: usize,
        inner: usize,
        in_width: usize,
        start: usize,
        len: usize,
    },
    Sum {
        a: Id,
    },
    Mean {
        a: Id,
    },
}

struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
}

/// Records operations in execution order; ids are assigned increasingly so
/// every node's inputs precede it.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: Id,
}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }
}

fn suffix_repeat(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        let outer: usize = a[..a.len() - b.len()].iter().product();
        Ok(outer)
    } else {
        Err(Error::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn acc_slot<'g, T: Element>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: Id,
) -> Option<&'g mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
}

/// Maps every flat output index of a permutation to its flat input index.
fn permute_index(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = in_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..numel {
        map.push(offset);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    map
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes held by recorded values.
    pub fn bytes(&self) -> usize {
        self.nodes.borrow().iter().map(|n| n.value.len()).sum::<usize>() * std::mem::size_of::<T>()
    }

    fn push(&self, op: Op<T>, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a tensor as a leaf; it participates in backward iff it requires grad.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a trainable leaf regardless of the tensor's flag.
    pub fn param(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        let shape = t.shape().to_vec();
        self.push(Op::Leaf, shape, t.into_data(), false)
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<'_, T> {
        self.constant(Tensor::zeros(shape))
    }

    /// Gathers rows of `table` ([V×d]) for each id; output is `[ids.len(), d]`.
    pub fn embedding<'t>(&'t self, table: Var<'t, T>, ids: &[usize]) -> Result<Var<'t, T>> {
        let nodes = self.nodes.borrow();
        let t = &nodes[table.id];
        if t.shape.len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: t.shape.clone(),
                rhs: vec![ids.len()],
            });
        }
        let (vocab, dim) = (t.shape[0], t.shape[1]);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&t.value[id * dim..(id + 1) * dim]);
        }
        let rg = t.requires_grad;
        drop(nodes);
        Ok(self.push(
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
                dim,
            },
            vec![ids.len(), dim],
            out,
            rg,
        ))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let nodes = self.nodes.borrow();
        let first = &nodes[parts.first().ok_or_else(|| Error::contract("concat of nothing"))?.id];
        let rank = first.shape.len();
        if axis >= rank {
            return Err(Error::contract(format!("concat axis {axis} for rank {rank}")));
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = &nodes[p.id].shape;
            if s.len() != rank || s[..axis] != first.shape[..axis] || s[axis + 1..] != first.shape[axis + 1..] {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: s.clone(),
                });
            }
            widths.push(s[axis]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                let v = &nodes[p.id].value;
                out.extend_from_slice(&v[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        Ok(self.push(
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                outer,
                inner,
                widths,
            },
            shape,
            out,
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        if root.requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            propagate(node, &g, &mut grads, &nodes);
        }
        Ok(Gradients { grads })
    }
}

fn propagate<T: Element>(node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>], nodes: &[Node<T>]) {
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            batch,
            p,
            q,
            s,
            shared_rhs,
            rhs_transposed,
        } => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            if let Some(ga) = acc_slot(grads, nodes, a) {
                for i in 0..batch {
                    let gi = &g[i * p * s..(i + 1) * p * s];
                    let bi = if shared_rhs { &bv[..] } else { &bv[i * q * s..(i + 1) * q * s] };
                    let dst = &mut ga[i * p * q..(i + 1) * p * q];
                    if rhs_transposed {
                        // C = A·Bᵀ, B stored [s×q]: dA = dC·B
                        T::gemm(p, s, q, gi, MatLayout::row_major(s), bi, MatLayout::row_major(q), T::one(), dst, MatLayout::row_major(q));
                    } else {
                        T::gemm(p, s, q, gi, MatLayout::row_major(s), bi, MatLayout::transposed(s), T::one(), dst, MatLayout::row_major(q));
                    }
                }
            }
            if let Some(gb) = acc_slot(grads, nodes, b) {
                for i in 0..batch {
                    let gi = &g[i * p * s..(i + 1) * p * s];
                    let ai = &av[i * p * q..(i + 1) * p * q];
                    let dst = if shared_rhs { &mut gb[..] } else { &mut gb[i * q * s..(i + 1) * q * s] };
                    if rhs_transposed {
                        // dB = dCᵀ·A  ([s×p]·[p×q])
                        T::gemm(s, p, q, gi, MatLayout::transposed(s), ai, MatLayout::row_major(q), T::one(), dst, MatLayout::row_major(q));
                    } else {
                        // dB = Aᵀ·dC  ([q×p]·[p×s])
                        T::gemm(q, p, s, ai, MatLayout::transposed(q), gi, MatLayout::row_major(s), T::one(), dst, MatLayout::row_major(s));
                    }
                }
            }
        }
        &Op::Add { a, b, repeat } | &Op::Sub { a, b, repeat } => {
            let negate = matches!(node.op, Op::Sub { .. });
            if let Some(ga) = acc_slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
            }
            if let Some(gb) = acc_slot(grads, nodes, b) {
                let n = gb.len();
                for r in 0..repeat {
                    for (x, &y) in gb.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *x = if negate { *x - y } else { *x + y };
                    }
                }
            }
        }
        &Op::Mul { a, b, repeat } => {
            let n = nodes[b].value.len();
            if let Some(ga) = acc_slot(grads, nodes, a) {
                let bv = &nodes[b].value;
                for (i, x) in ga.iter_mut().enumerate() {
                    *x = *x + g[i] * bv[i % n];
                }
            }
            if let Some(gb) = acc_slot(grads, nodes, b) {
                let av = &nodes[a].value;
                for r in 0..repeat {
                    for j in 0..n {
                        gb[j] = gb[j] + g[r * n + j] * av[r * n + j];
                    }
                }
            }
        }
        &Op::Scale { a, c } => {
            if let Some(ga) = acc_slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + c * y);
            }
        }
        &Op::Relu { a } => {
            let av = &nodes[a].value;
            if let Some(ga) = acc_slot(grads, nodes, a) {
                for ((x, &y), &v) in ga.iter_mut().zip(g).zip(av) {
                    if v > T::zero() {
                        *x = *x + y;
                    }
                }
            }
        }
        &Op::Softmax { a, cols } => {
            let y = &node.value;
            if let Some(ga) = acc_slot(grads, nodes, a) {
                for ((gr, yr), dst) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dot: T = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum();
                    for ((d, &u), &v) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = *d + v * (u - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            cols,
            xhat,
            rstd,
        } => {
            let (x, gain, bias, cols) = (*x, *gain, *bias, *cols);
            let gv = &nodes[gain].value;
            let n = T::from_usize(cols).unwrap();
            if let Some(gx) = acc_slot(grads, nodes, x) {
                for (row, ((gr, xr), dst)) in g.chunks(cols).zip(xhat.chunks(cols)).zip(gx.chunks_mut(cols)).enumerate() {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..cols {
                        let d = gr[j] * gv[j];
                        mean_d = mean_d + d;
                        mean_dx = mean_dx + d * xr[j];
                    }
                    mean_d = mean_d / n;
                    mean_dx = mean_dx / n;
                    let rs = rstd[row];
                    for j in 0..cols {
                        let d = gr[j] * gv[j];
                        dst[j] = dst[j] + rs * (d - mean_d - xr[j] * mean_dx);
                    }
                }
            }
            if let Some(gg) = acc_slot(grads, nodes, gain) {
                for (gr, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for j in 0..cols {
                        gg[j] = gg[j] + gr[j] * xr[j];
                    }
                }
            }
            if let Some(gb) = acc_slot(grads, nodes, bias) {
                for gr in g.chunks(cols) {
                    for j in 0..cols {
                        gb[j] = gb[j] + gr[j];
                    }
                }
            }
        }
        Op::Embedding { table, ids, dim } => {
            let dim = *dim;
            if let Some(gt) = acc_slot(grads, nodes, *table) {
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..dim {
                        gt[id * dim + j] = gt[id * dim + j] + g[row * dim + j];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
            classes,
        } => {
            let classes = *classes;
            if let Some(gl) = acc_slot(grads, nodes, *logits) {
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                for (i, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == label { T::one() } else { T::zero() };
                        let k = i * classes + c;
                        gl[k] = gl[k] + scale * (probs[k] - onehot);
                    }
                }
            }
        }
        Op::Permute { a, perm } => {
            let a = *a;
            let map = permute_index(&nodes[a].shape, perm);
            if let Some(ga) = acc_slot(grads, nodes, a) {
                for (o, &i) in map.iter().enumerate() {
                    ga[i] = ga[i] + g[o];
                }
            }
        }
        &Op::Reshape { a } => {
            if let Some(ga) = acc_slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
            }
        }
        Op::Concat {
            parts,
            outer,
            inner,
            widths,
        } => {
            let total: usize = widths.iter().sum();
            let mut col = 0;
            for (&p, &w) in parts.iter().zip(widths) {
                if let Some(gp) = acc_slot(grads, nodes, p) {
                    for o in 0..*outer {
                        let src = &g[(o * total + col) * inner..(o * total + col + w) * inner];
                        let dst = &mut gp[o * w * inner..(o + 1) * w * inner];
                        dst.iter_mut().zip(src).for_each(|(x, &y)| *x = *x + y);
                    }
                }
                col += w;
            }
        }
        &Op::Slice {
            a,
            outer,
            inner,
            in_width,
            start,
            len,
        } => {
            if let Some(ga) = acc_slot(grads, nodes, a) {
                for o in 0..outer {
                    let dst = &mut ga[(o * in_width + start) * inner..(o * in_width + start + len) * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(x, &y)| *x = *x + y);
                }
            }
        }
        &Op::Sum { a } => {
            if let Some(ga) = acc_slot(grads, nodes, a) {
                ga.iter_mut().for_each(|x| *x = *x + g[0]);
            }
        }
        &Op::Mean { a } => {
            if let Some(ga) = acc_slot(grads, nodes, a) {
                let s = g[0] / T::from_usize(ga.len()).unwrap();
                ga.iter_mut().for_each(|x| *x = *x + s);
            }
        }
    }
}

impl<'t, T: Element> Var<'t, T> {
    fn node(&self) -> Ref<'t, Node<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node().value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor<T> {
        let n = self.node();
        Tensor::new(&n.shape, n.value.clone()).expect("node shape consistent")
    }

    pub fn data(&self) -> Ref<'t, [T]> {
        Ref::map(self.node(), |n| n.value.as_slice())
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> T {
        self.node().value[0]
    }

    fn unary(&self, op: Op<T>, shape: Vec<usize>, value: Vec<T>) -> Var<'t, T> {
        let rg = self.requires_grad();
        self.tape.push(op, shape, value, rg)
    }

    fn binary(&self, other: &Var<'t, T>, op: Op<T>, shape: Vec<usize>, value: Vec<T>) -> Var<'t, T> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(op, shape, value, rg)
    }

    /// Matrix product over the last two axes.
    ///
    /// `rhs` is either a plain `[q×s]` matrix shared across all leading axes of
    /// `self`, or has the same leading axes as `self`.
    pub fn matmul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(rhs, false)
    }

    /// `self · rhsᵀ` over the last two axes, without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(&self, rhs: &Var<'t, T>, rhs_transposed: bool) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes.borrow();
        let (an, bn) = (&nodes[self.id], &nodes[rhs.id]);
        let err = || Error::Shape {
            op: "matmul",
            lhs: an.shape.clone(),
            rhs: bn.shape.clone(),
        };
        if an.shape.len() < 2 || bn.shape.len() < 2 {
            return Err(err());
        }
        let ar = an.shape.len();
        let br = bn.shape.len();
        let (bq, bs) = if rhs_transposed {
            (bn.shape[br - 1], bn.shape[br - 2])
        } else {
            (bn.shape[br - 2], bn.shape[br - 1])
        };
        let q = an.shape[ar - 1];
        if q != bq {
            return Err(err());
        }
        let shared_rhs = br == 2;
        let (batch, p) = if shared_rhs {
            (1, an.shape[..ar - 1].iter().product())
        } else {
            if an.shape[..ar - 2] != bn.shape[..br - 2] {
                return Err(err());
            }
            (an.shape[..ar - 2].iter().product(), an.shape[ar - 2])
        };
        let s = bs;
        let b_layout = if rhs_transposed {
            MatLayout::transposed(q)
        } else {
            MatLayout::row_major(s)
        };
        let mut out = vec![T::zero(); batch * p * s];
        for i in 0..batch {
            let ai = &an.value[i * p * q..(i + 1) * p * q];
            let bi = if shared_rhs { &bn.value[..] } else { &bn.value[i * q * s..(i + 1) * q * s] };
            T::gemm(
                p,
                q,
                s,
                ai,
                MatLayout::row_major(q),
                bi,
                b_layout,
                T::zero(),
                &mut out[i * p * s..(i + 1) * p * s],
                MatLayout::row_major(s),
            );
        }
        let mut shape = an.shape[..ar - 1].to_vec();
        shape.push(s);
        drop(nodes);
        Ok(self.binary(
            rhs,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                batch,
                p,
                q,
                s,
                shared_rhs,
                rhs_transposed,
            },
            shape,
            out,
        ))
    }

    fn elementwise(
        &self,
        rhs: &Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<usize>, Vec<T>, usize)> {
        let nodes = self.tape.nodes.borrow();
        let (an, bn) = (&nodes[self.id], &nodes[rhs.id]);
        let repeat = suffix_repeat(name, &an.shape, &bn.shape)?;
        let n = bn.value.len();
        let out = an
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bn.value[i % n]))
            .collect();
        Ok((an.shape.clone(), out, repeat))
    }

    /// Elementwise sum; `rhs` may broadcast over leading axes of `self`.
    pub fn add(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        if rhs.node().shape.len() > self.node().shape.len() {
            return rhs.add(self);
        }
        let (shape, out, repeat) = self.elementwise(rhs, "add", |a, b| a + b)?;
        Ok(self.binary(
            rhs,
            Op::Add {
                a: self.id,
                b: rhs.id,
                repeat,
            },
            shape,
            out,
        ))
    }

    pub fn sub(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (shape, out, repeat) = self.elementwise(rhs, "sub", |a, b| a - b)?;
        Ok(self.binary(
            rhs,
            Op::Sub {
                a: self.id,
                b: rhs.id,
                repeat,
            },
            shape,
            out,
        ))
    }

    /// Elementwise (Hadamard) product; `rhs` may broadcast over leading axes.
    pub fn mul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        if rhs.node().shape.len() > self.node().shape.len() {
            return rhs.mul(self);
        }
        let (shape, out, repeat) = self.elementwise(rhs, "mul", |a, b| a * b)?;
        Ok(self.binary(
            rhs,
            Op::Mul {
                a: self.id,
                b: rhs.id,
                repeat,
            },
            shape,
            out,
        ))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let (shape, out) = {
            let n = self.node();
            (n.shape.clone(), n.value.iter().map(|&x| x * c).collect())
        };
        self.unary(Op::Scale { a: self.id, c }, shape, out)
    }

    pub fn relu(&self) -> Var<'t, T> {
        let (shape, out) = {
            let n = self.node();
            (
                n.shape.clone(),
                n.value.iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect(),
            )
        };
        self.unary(Op::Relu { a: self.id }, shape, out)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&self) -> Var<'t, T> {
        let (shape, out, cols) = {
            let n = self.node();
            let cols = *n.shape.last().unwrap_or(&1);
            let mut out = n.value.clone();
            for row in out.chunks_mut(cols) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total = total + *x;
                }
                row.iter_mut().for_each(|x| *x = *x / total);
            }
            (n.shape.clone(), out, cols)
        };
        self.unary(Op::Softmax { a: self.id, cols }, shape, out)
    }

    /// Normalizes each row of the last axis to zero mean and unit variance,
    /// then applies `gain` and `bias` (both `[cols]`).
    pub fn layer_norm(&self, gain: &Var<'t, T>, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes.borrow();
        let xn = &nodes[self.id];
        let cols = *xn.shape.last().unwrap_or(&1);
        for p in [gain, bias] {
            if nodes[p.id].shape != [cols] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: xn.shape.clone(),
                    rhs: nodes[p.id].shape.clone(),
                });
            }
        }
        let (gv, bv) = (&nodes[gain.id].value, &nodes[bias.id].value);
        let n = T::from_usize(cols).unwrap();
        let eps = T::lit(LAYER_NORM_EPS);
        let rows = xn.value.len() / cols;
        let mut xhat = Vec::with_capacity(xn.value.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xn.value.len());
        for row in xn.value.chunks(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &x) in row.iter().enumerate() {
                let h = (x - mean) * rs;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let rg = xn.requires_grad || nodes[gain.id].requires_grad || nodes[bias.id].requires_grad;
        let shape = xn.shape.clone();
        drop(nodes);
        Ok(self.tape.push(
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                cols,
                xhat,
                rstd,
            },
            shape,
            out,
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `self` (`[n×C]`, or any shape whose last axis is the class axis).
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, T>> {
        let (loss, probs, classes) = {
            let n = self.node();
            let classes = *n.shape.last().unwrap_or(&1);
            let rows = n.value.len() / classes;
            if rows != labels.len() {
                return Err(Error::Shape {
                    op: "cross_entropy",
                    lhs: n.shape.clone(),
                    rhs: vec![labels.len()],
                });
            }
            let mut probs = Vec::with_capacity(n.value.len());
            let mut loss = T::zero();
            for (row, &label) in n.value.chunks(classes).zip(labels) {
                if label >= classes {
                    return Err(Error::Index {
                        op: "cross_entropy",
                        index: label,
                        bound: classes,
                    });
                }
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let total: T = row.iter().map(|&x| (x - max).exp()).sum();
                let lse = max + total.ln();
                loss = loss + (lse - row[label]);
                probs.extend(row.iter().map(|&x| (x - lse).exp()));
            }
            (loss / T::from_usize(rows).unwrap(), probs, classes)
        };
        Ok(self.unary(
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
                classes,
            },
            vec![],
            vec![loss],
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let (shape, out) = {
            let n = self.node();
            let mut seen = vec![false; n.shape.len()];
            if perm.len() != n.shape.len() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::Shape {
                    op: "permute",
                    lhs: n.shape.clone(),
                    rhs: perm.to_vec(),
                });
            }
            let map = permute_index(&n.shape, perm);
            let out = map.iter().map(|&i| n.value[i]).collect();
            (perm.iter().map(|&p| n.shape[p]).collect(), out)
        };
        Ok(self.unary(
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
            shape,
            out,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let rank = self.node().shape.len();
        if rank < 2 {
            return Err(Error::contract("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = {
            let n = self.node();
            if shape.iter().product::<usize>() != n.value.len() {
                return Err(Error::Shape {
                    op: "reshape",
                    lhs: n.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            n.value.clone()
        };
        Ok(self.unary(Op::Reshape { a: self.id }, shape.to_vec(), out))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let (shape, out, outer, inner, in_width) = {
            let n = self.node();
            if axis >= n.shape.len() || start + len > n.shape[axis] || len == 0 {
                return Err(Error::Index {
                    op: "slice",
                    index: start + len,
                    bound: n.shape.get(axis).copied().unwrap_or(0),
                });
            }
            let outer: usize = n.shape[..axis].iter().product();
            let inner: usize = n.shape[axis + 1..].iter().product();
            let in_width = n.shape[axis];
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                out.extend_from_slice(&n.value[(o * in_width + start) * inner..(o * in_width + start + len) * inner]);
            }
            let mut shape = n.shape.clone();
            shape[axis] = len;
            (shape, out, outer, inner, in_width)
        };
        Ok(self.unary(
            Op::Slice {
                a: self.id,
                outer,
                inner,
                in_width,
                start,
                len,
            },
            shape,
            out,
        ))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.node().value.iter().copied().sum();
        self.unary(Op::Sum { a: self.id }, vec![], vec![s])
    }

    pub fn mean(&self) -> Var<'t, T> {
        let s = {
            let n = self.node();
            n.value.iter().copied().sum::<T>() / T::from_usize(n.value.len()).unwrap()
        };
        self.unary(Op::Mean { a: self.id }, vec![], vec![s])
    }

    /// Mean squared difference.
    pub fn mse(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let d = self.sub(other)?;
        Ok(d.mul(&d)?.mean())
    }
}
