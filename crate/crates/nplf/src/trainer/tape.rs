//! Reverse-mode gradient tape over vector-valued nodes.
//!
//! The tape records an eager forward pass: every operation computes its
//! value immediately into a shared arena and remembers its operands, so a
//! backward sweep can accumulate adjoints in reverse order. Parameter leaves
//! are bound to ranges of the flat parameter vector and scatter their
//! adjoints into the gradient buffer. Values are plain `Vec<f64>` spans;
//! scalars are length-1 vectors.
//!
//! Those operations that also exist in the plain rendering path (`matvec`,
//! `softmax`, the weighted-sum aggregation) call the same kernels from
//! `lightfield`, which keeps the two paths bit-identical.

use std::sync::Arc;

use crate::lightfield::{matvec, sigmoid, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(u32);

#[derive(Debug, Clone)]
enum Op {
    /// Leaf bound to `store[offset .. offset + len)`.
    Param { offset: usize },
    /// Leaf with a fixed value.
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    Neg(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// max(x, c) elementwise; gradient passes only where x > c.
    ClampMin(NodeId, f64),
    /// Scalar inner product.
    Dot(NodeId, NodeId),
    MatVec {
        mat: NodeId,
        vec: NodeId,
        rows: usize,
        cols: usize,
    },
    /// Elementwise vec * scalar-node broadcast.
    MulScalar { vec: NodeId, scalar: NodeId },
    Concat(Vec<NodeId>),
    /// out[i] = src[idx[i]].
    Gather { src: NodeId, idx: Arc<[u32]> },
    Softmax(NodeId),
    /// out = sum_i weights[i] * items[i].
    WeightedSum {
        weights: NodeId,
        items: Vec<NodeId>,
    },
}

struct Node {
    op: Op,
    offset: usize,
    len: usize,
}

/// Eagerly evaluated Wengert list with arena value storage. `clear` keeps
/// capacity so a training loop can reuse one tape across steps.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    data: Vec<f64>,
    adjoint: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.data.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        let node = &self.nodes[id.0 as usize];
        &self.data[node.offset..node.offset + node.len]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    fn push(&mut self, op: Op, values: &[f64]) -> NodeId {
        let offset = self.data.len();
        self.data.extend_from_slice(values);
        self.nodes.push(Node {
            op,
            offset,
            len: values.len(),
        });
        NodeId((self.nodes.len() - 1) as u32)
    }

    /// Push a node whose value is computed in place to avoid a temporary.
    fn push_with(&mut self, op: Op, len: usize, fill: impl FnOnce(&mut [f64], &[f64])) -> NodeId {
        let offset = self.data.len();
        self.data.resize(offset + len, 0.0);
        let (prefix, out) = self.data.split_at_mut(offset);
        fill(out, prefix);
        self.nodes.push(Node { op, offset, len });
        NodeId((self.nodes.len() - 1) as u32)
    }

    fn span(&self, id: NodeId) -> (usize, usize) {
        let node = &self.nodes[id.0 as usize];
        (node.offset, node.len)
    }

    // -- leaves -------------------------------------------------------------

    pub fn param(&mut self, store: &[f64], offset: usize, len: usize) -> NodeId {
        let values = &store[offset..offset + len];
        self.push(Op::Param { offset }, &values.to_vec())
    }

    pub fn constant(&mut self, values: &[f64]) -> NodeId {
        self.push(Op::Const, values)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.push(Op::Const, &[v])
    }

    // -- elementwise binary -------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ao, al) = self.span(a);
        let (bo, _) = self.span(b);
        debug_assert_eq!(al, self.span(b).1);
        self.push_with(Op::Add(a, b), al, |out, data| {
            for i in 0..out.len() {
                out[i] = data[ao + i] + data[bo + i];
            }
        })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ao, al) = self.span(a);
        let (bo, _) = self.span(b);
        self.push_with(Op::Sub(a, b), al, |out, data| {
            for i in 0..out.len() {
                out[i] = data[ao + i] - data[bo + i];
            }
        })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ao, al) = self.span(a);
        let (bo, _) = self.span(b);
        self.push_with(Op::Mul(a, b), al, |out, data| {
            for i in 0..out.len() {
                out[i] = data[ao + i] * data[bo + i];
            }
        })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ao, al) = self.span(a);
        let (bo, _) = self.span(b);
        self.push_with(Op::Div(a, b), al, |out, data| {
            for i in 0..out.len() {
                out[i] = data[ao + i] / data[bo + i];
            }
        })
    }

    // -- elementwise unary --------------------------------------------------

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let (ao, al) = self.span(a);
        self.push_with(Op::Scale(a, k), al, |out, data| {
            for i in 0..out.len() {
                out[i] = data[ao + i] * k;
            }
        })
    }

    pub fn add_const(&mut self, a: NodeId, k: f64) -> NodeId {
        let (ao, al) = self.span(a);
        self.push_with(Op::AddConst(a, k), al, |out, data| {
            for i in 0..out.len() {
                out[i] = data[ao + i] + k;
            }
        })
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let (ao, al) = self.span(a);
        self.push_with(Op::Neg(a), al, |out, data| {
            for i in 0..out.len() {
                out[i] = -data[ao + i];
            }
        })
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let (ao, al) = self.span(a);
        self.push_with(Op::Sin(a), al, |out, data| {
            for i in 0..out.len() {
                out[i] = data[ao + i].sin();
            }
        })
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let (ao, al) = self.span(a);
        self.push_with(Op::Cos(a), al, |out, data| {
            for i in 0..out.len() {
                out[i] = data[ao + i].cos();
            }
        })
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let (ao, al) = self.span(a);
        self.push_with(Op::Sqrt(a), al, |out, data| {
            for i in 0..out.len() {
                out[i] = data[ao + i].sqrt();
            }
        })
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let (ao, al) = self.span(a);
        self.push_with(Op::Recip(a), al, |out, data| {
            for i in 0..out.len() {
                out[i] = 1.0 / data[ao + i];
            }
        })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let (ao, al) = self.span(a);
        self.push_with(Op::Relu(a), al, |out, data| {
            for i in 0..out.len() {
                out[i] = if data[ao + i] < 0.0 { 0.0 } else { data[ao + i] };
            }
        })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (ao, al) = self.span(a);
        self.push_with(Op::Sigmoid(a), al, |out, data| {
            for i in 0..out.len() {
                out[i] = sigmoid(data[ao + i]);
            }
        })
    }

    pub fn clamp_min(&mut self, a: NodeId, k: f64) -> NodeId {
        let (ao, al) = self.span(a);
        self.push_with(Op::ClampMin(a, k), al, |out, data| {
            for i in 0..out.len() {
                out[i] = data[ao + i].max(k);
            }
        })
    }

    // -- reductions and shapes ----------------------------------------------

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ao, al) = self.span(a);
        let (bo, bl) = self.span(b);
        debug_assert_eq!(al, bl);
        self.push_with(Op::Dot(a, b), 1, |out, data| {
            let mut acc = 0.0;
            for i in 0..al {
                acc += data[ao + i] * data[bo + i];
            }
            out[0] = acc;
        })
    }

    pub fn matvec(&mut self, mat: NodeId, vec: NodeId, rows: usize, cols: usize) -> NodeId {
        let (mo, ml) = self.span(mat);
        let (vo, vl) = self.span(vec);
        debug_assert_eq!(ml, rows * cols);
        debug_assert_eq!(vl, cols);
        self.push_with(
            Op::MatVec { mat, vec, rows, cols },
            rows,
            |out, data| {
                matvec(&data[mo..mo + ml], &data[vo..vo + vl], rows, cols, out);
            },
        )
    }

    pub fn mul_scalar(&mut self, vec: NodeId, scalar: NodeId) -> NodeId {
        let (vo, vl) = self.span(vec);
        let (so, sl) = self.span(scalar);
        debug_assert_eq!(sl, 1);
        self.push_with(Op::MulScalar { vec, scalar }, vl, |out, data| {
            let s = data[so];
            for i in 0..out.len() {
                out[i] = data[vo + i] * s;
            }
        })
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let spans: Vec<(usize, usize)> = parts.iter().map(|&p| self.span(p)).collect();
        let total: usize = spans.iter().map(|&(_, l)| l).sum();
        self.push_with(Op::Concat(parts.to_vec()), total, |out, data| {
            let mut at = 0;
            for &(off, len) in &spans {
                out[at..at + len].copy_from_slice(&data[off..off + len]);
                at += len;
            }
        })
    }

    pub fn gather(&mut self, src: NodeId, idx: Arc<[u32]>) -> NodeId {
        let (so, _) = self.span(src);
        let len = idx.len();
        let indices = Arc::clone(&idx);
        self.push_with(Op::Gather { src, idx }, len, |out, data| {
            for (o, &i) in out.iter_mut().zip(indices.iter()) {
                *o = data[so + i as usize];
            }
        })
    }

    pub fn softmax(&mut self, scores: NodeId) -> NodeId {
        let (so, sl) = self.span(scores);
        self.push_with(Op::Softmax(scores), sl, |out, data| {
            softmax(&data[so..so + sl], out);
        })
    }

    pub fn weighted_sum(&mut self, weights: NodeId, items: &[NodeId]) -> NodeId {
        let (wo, wl) = self.span(weights);
        debug_assert_eq!(wl, items.len());
        let spans: Vec<(usize, usize)> = items.iter().map(|&p| self.span(p)).collect();
        let dim = spans.first().map_or(0, |&(_, l)| l);
        self.push_with(
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
            dim,
            |out, data| {
                out.fill(0.0);
                for (i, &(off, len)) in spans.iter().enumerate() {
                    debug_assert_eq!(len, out.len());
                    let w = data[wo + i];
                    for j in 0..len {
                        out[j] += w * data[off + j];
                    }
                }
            },
        )
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from the scalar `loss` node, accumulating parameter
    /// adjoints into `grad` (same length as the parameter store).
    pub fn backward(&mut self, loss: NodeId, grad: &mut [f64]) {
        debug_assert_eq!(self.span(loss).1, 1, "loss must be scalar");
        self.adjoint.clear();
        self.adjoint.resize(self.data.len(), 0.0);
        let (lo, _) = self.span(loss);
        self.adjoint[lo] = 1.0;

        for ni in (0..=loss.0 as usize).rev() {
            let node = &self.nodes[ni];
            let (o, l) = (node.offset, node.len);
            match &node.op {
                Op::Const => {}
                Op::Param { offset } => {
                    let param_grad = &mut grad[*offset..*offset + l];
                    for (g, a) in param_grad.iter_mut().zip(&self.adjoint[o..o + l]) {
                        *g += a;
                    }
                }
                Op::Add(a, b) => {
                    let (ao, _) = self.span(*a);
                    let (bo, _) = self.span(*b);
                    for i in 0..l {
                        let d = self.adjoint[o + i];
                        self.adjoint[ao + i] += d;
                        self.adjoint[bo + i] += d;
                    }
                }
                Op::Sub(a, b) => {
                    let (ao, _) = self.span(*a);
                    let (bo, _) = self.span(*b);
                    for i in 0..l {
                        let d = self.adjoint[o + i];
                        self.adjoint[ao + i] += d;
                        self.adjoint[bo + i] -= d;
                    }
                }
                Op::Mul(a, b) => {
                    let (ao, _) = self.span(*a);
                    let (bo, _) = self.span(*b);
                    for i in 0..l {
                        let d = self.adjoint[o + i];
                        self.adjoint[ao + i] += d * self.data[bo + i];
                        self.adjoint[bo + i] += d * self.data[ao + i];
                    }
                }
                Op::Div(a, b) => {
                    let (ao, _) = self.span(*a);
                    let (bo, _) = self.span(*b);
                    for i in 0..l {
                        let d = self.adjoint[o + i];
                        let bv = self.data[bo + i];
                        self.adjoint[ao + i] += d / bv;
                        self.adjoint[bo + i] -= d * self.data[o + i] / bv;
                    }
                }
                Op::Scale(a, k) => {
                    let (ao, _) = self.span(*a);
                    for i in 0..l {
                        self.adjoint[ao + i] += self.adjoint[o + i] * k;
                    }
                }
                Op::AddConst(a, _) => {
                    let (ao, _) = self.span(*a);
                    for i in 0..l {
                        self.adjoint[ao + i] += self.adjoint[o + i];
                    }
                }
                Op::Neg(a) => {
                    let (ao, _) = self.span(*a);
                    for i in 0..l {
                        self.adjoint[ao + i] -= self.adjoint[o + i];
                    }
                }
                Op::Sin(a) => {
                    let (ao, _) = self.span(*a);
                    for i in 0..l {
                        self.adjoint[ao + i] += self.adjoint[o + i] * self.data[ao + i].cos();
                    }
                }
                Op::Cos(a) => {
                    let (ao, _) = self.span(*a);
                    for i in 0..l {
                        self.adjoint[ao + i] -= self.adjoint[o + i] * self.data[ao + i].sin();
                    }
                }
                Op::Sqrt(a) => {
                    let (ao, _) = self.span(*a);
                    for i in 0..l {
                        let y = self.data[o + i];
                        if y > 0.0 {
                            self.adjoint[ao + i] += self.adjoint[o + i] * 0.5 / y;
                        }
                    }
                }
                Op::Recip(a) => {
                    let (ao, _) = self.span(*a);
                    for i in 0..l {
                        let y = self.data[o + i];
                        self.adjoint[ao + i] -= self.adjoint[o + i] * y * y;
                    }
                }
                Op::Relu(a) => {
                    let (ao, _) = self.span(*a);
                    for i in 0..l {
                        if self.data[ao + i] > 0.0 {
                            self.adjoint[ao + i] += self.adjoint[o + i];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let (ao, _) = self.span(*a);
                    for i in 0..l {
                        let y = self.data[o + i];
                        self.adjoint[ao + i] += self.adjoint[o + i] * y * (1.0 - y);
                    }
                }
                Op::ClampMin(a, k) => {
                    let (ao, _) = self.span(*a);
                    for i in 0..l {
                        if self.data[ao + i] > *k {
                            self.adjoint[ao + i] += self.adjoint[o + i];
                        }
                    }
                }
                Op::Dot(a, b) => {
                    let (ao, al) = self.span(*a);
                    let (bo, _) = self.span(*b);
                    let d = self.adjoint[o];
                    for i in 0..al {
                        self.adjoint[ao + i] += d * self.data[bo + i];
                        self.adjoint[bo + i] += d * self.data[ao + i];
                    }
                }
                Op::MatVec { mat, vec, rows, cols } => {
                    let (mo, _) = self.span(*mat);
                    let (vo, _) = self.span(*vec);
                    for r in 0..*rows {
                        let dy = self.adjoint[o + r];
                        if dy == 0.0 {
                            continue;
                        }
                        let mrow = mo + r * cols;
                        for c in 0..*cols {
                            self.adjoint[mrow + c] += dy * self.data[vo + c];
                            self.adjoint[vo + c] += dy * self.data[mrow + c];
                        }
                    }
                }
                Op::MulScalar { vec, scalar } => {
                    let (vo, vl) = self.span(*vec);
                    let (so, _) = self.span(*scalar);
                    let s = self.data[so];
                    let mut ds = 0.0;
                    for i in 0..vl {
                        let d = self.adjoint[o + i];
                        self.adjoint[vo + i] += d * s;
                        ds += d * self.data[vo + i];
                    }
                    self.adjoint[so] += ds;
                }
                Op::Concat(parts) => {
                    let spans: Vec<(usize, usize)> =
                        parts.iter().map(|&p| self.span(p)).collect();
                    let mut at = 0;
                    for (off, len) in spans {
                        for i in 0..len {
                            self.adjoint[off + i] += self.adjoint[o + at + i];
                        }
                        at += len;
                    }
                }
                Op::Gather { src, idx } => {
                    let (so, _) = self.span(*src);
                    for (i, &srci) in idx.iter().enumerate() {
                        self.adjoint[so + srci as usize] += self.adjoint[o + i];
                    }
                }
                Op::Softmax(scores) => {
                    let (so, sl) = self.span(*scores);
                    let mut inner = 0.0;
                    for i in 0..sl {
                        inner += self.adjoint[o + i] * self.data[o + i];
                    }
                    for i in 0..sl {
                        self.adjoint[so + i] +=
                            self.data[o + i] * (self.adjoint[o + i] - inner);
                    }
                }
                Op::WeightedSum { weights, items } => {
                    let (wo, _) = self.span(*weights);
                    let spans: Vec<(usize, usize)> =
                        items.iter().map(|&p| self.span(p)).collect();
                    for (i, (off, len)) in spans.into_iter().enumerate() {
                        let w = self.data[wo + i];
                        let mut dw = 0.0;
                        for j in 0..len {
                            let d = self.adjoint[o + j];
                            self.adjoint[off + j] += d * w;
                            dw += d * self.data[off + j];
                        }
                        self.adjoint[wo + i] += dw;
                    }
                }
            }
        }
    }
}
