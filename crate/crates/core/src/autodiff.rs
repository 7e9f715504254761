//! Reverse-mode differentiation on an explicit tape.
//!
//! Every primitive records its inputs and output value when applied; the tape
//! is therefore already in topological order and `backward` walks it in
//! reverse. A tape is single-writer: recording and backward must be
//! externally serialized per tape.

use crate::error::{Error, Result};
use crate::tensor::{ResizeMode, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Softmax(NodeId, usize),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Resize(NodeId, (usize, usize), ResizeMode),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    MeanAll(NodeId),
}

#[derive(Debug, Clone)]
struct Node<E: Scalar> {
    op: Op,
    value: Tensor<E>,
}

/// Ordered record of primitive operations with saved forward values.
#[derive(Debug, Default)]
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node id. Nodes that
/// do not influence the output have no entry.
pub struct Grads<E: Scalar> {
    by_node: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Grads<E> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros of `shape` when the node was unused.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<E> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor<E>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<E>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(E::from_f64(c));
        self.push(Op::Scale(a, c), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), v))
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(a).softmax(axis)?;
        Ok(self.push(Op::Softmax(a, axis), v))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    pub fn permute(&mut self, a: NodeId, order: &[usize]) -> Result<NodeId> {
        let v = self.value(a).permute(order)?;
        Ok(self.push(Op::Permute(a, order.to_vec()), v))
    }

    pub fn resize(
        &mut self,
        a: NodeId,
        target: (usize, usize),
        mode: ResizeMode,
    ) -> Result<NodeId> {
        let v = self.value(a).resize_spatial(target, mode)?;
        Ok(self.push(Op::Resize(a, target, mode), v))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    /// `gamma` and `beta` are vectors of the last-axis length.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let v = layer_norm_forward(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, v))
    }

    /// Mean of all elements as a `[1]` tensor.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(Op::MeanAll(a), v)
    }

    /// Re-run every recorded op from the leaves and check the stored outputs
    /// are reproduced bit-exactly.
    pub fn replay_is_exact(&self) -> bool {
        for node in &self.nodes {
            let recomputed = match &node.op {
                Op::Leaf => continue,
                Op::Add(a, b) => self.value(*a).add(self.value(*b)),
                Op::Sub(a, b) => self.value(*a).sub(self.value(*b)),
                Op::Mul(a, b) => self.value(*a).mul(self.value(*b)),
                Op::Scale(a, c) => Ok(self.value(*a).scale(E::from_f64(*c))),
                Op::Matmul(a, b) => self.value(*a).matmul(self.value(*b)),
                Op::Softmax(a, axis) => self.value(*a).softmax(*axis),
                Op::Reshape(a) => self.value(*a).reshape(node.value.shape()),
                Op::Permute(a, order) => self.value(*a).permute(order),
                Op::Resize(a, target, mode) => self.value(*a).resize_spatial(*target, *mode),
                Op::LayerNorm { x, gamma, beta } => {
                    layer_norm_forward(self.value(*x), self.value(*gamma), self.value(*beta))
                }
                Op::MeanAll(a) => Ok(Tensor::scalar(self.value(*a).mean())),
            };
            match recomputed {
                Ok(v) if v == node.value => {}
                _ => return false,
            }
        }
        true
    }

    /// Reverse-mode sweep from `output`, seeded with `seed_grad`.
    pub fn backward(&self, output: NodeId, seed_grad: &Tensor<E>) -> Result<Grads<E>> {
        if output.0 >= self.nodes.len() {
            return Err(Error::arg(format!("unknown node id {}", output.0)));
        }
        if seed_grad.shape() != self.value(output).shape() {
            return Err(Error::shape(format!(
                "seed grad shape {:?} does not match output shape {:?}",
                seed_grad.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed_grad.clone());
        for i in (0..=output.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.scale(E::from_f64(-1.0)))?;
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b))?;
                    let gb = g.mul(self.value(*a))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.scale(E::from_f64(*c)))?;
                }
                Op::Matmul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = g.matmul(&transpose_last2(bv)?)?;
                    let gb = transpose_last2(av)?.matmul(&g)?;
                    accumulate(&mut grads, *a, reduce_to_shape(ga, av.shape())?)?;
                    accumulate(&mut grads, *b, reduce_to_shape(gb, bv.shape())?)?;
                }
                Op::Softmax(a, axis) => {
                    let y = &self.nodes[i].value;
                    accumulate(&mut grads, *a, softmax_backward(y, &g, *axis)?)?;
                }
                Op::Reshape(a) => {
                    accumulate(&mut grads, *a, g.reshape(self.value(*a).shape())?)?;
                }
                Op::Permute(a, order) => {
                    let mut inv = vec![0usize; order.len()];
                    for (j, &o) in order.iter().enumerate() {
                        inv[o] = j;
                    }
                    accumulate(&mut grads, *a, g.permute(&inv)?)?;
                }
                Op::Resize(a, _target, mode) => {
                    let src = self.value(*a).shape();
                    let r = src.len();
                    let back = g.resize_spatial_transpose((src[r - 2], src[r - 1]), *mode)?;
                    accumulate(&mut grads, *a, back)?;
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (gx, gg, gb) = layer_norm_backward(self.value(*x), self.value(*gamma), &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *gamma, gg)?;
                    accumulate(&mut grads, *beta, gb)?;
                }
                Op::MeanAll(a) => {
                    let n = self.value(*a).len() as f64;
                    let gv = g.data()[0].as_f64() / n;
                    let full = Tensor::full(self.value(*a).shape().to_vec(), E::from_f64(gv));
                    accumulate(&mut grads, *a, full)?;
                }
            }
        }
        Ok(Grads { by_node: grads })
    }
}

fn accumulate<E: Scalar>(grads: &mut [Option<Tensor<E>>], id: NodeId, g: Tensor<E>) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => {
            *existing = existing.add(&g)?;
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

fn transpose_last2<E: Scalar>(t: &Tensor<E>) -> Result<Tensor<E>> {
    let r = t.rank();
    let mut order: Vec<usize> = (0..r).collect();
    order.swap(r - 2, r - 1);
    t.permute(&order)
}

/// Sum out leading batch axes of `t` until it matches `shape` (used when a
/// rank-2 matmul operand was broadcast across a batch).
fn reduce_to_shape<E: Scalar>(t: Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
    if t.shape() == shape {
        return Ok(t);
    }
    let inner: usize = shape.iter().product();
    let batch = t.len() / inner;
    let flat = t.reshape(&[batch, inner])?;
    let mut acc = vec![0.0f64; inner];
    for b in 0..batch {
        for (j, a) in acc.iter_mut().enumerate() {
            *a += flat.data()[b * inner + j].as_f64();
        }
    }
    Tensor::new(shape.to_vec(), acc.into_iter().map(E::from_f64).collect())
}

fn softmax_backward<E: Scalar>(y: &Tensor<E>, g: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    let shape = y.shape();
    let lanes = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![E::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lanes * inner + i;
            let mut dot = 0.0f64;
            for l in 0..lanes {
                let p = base + l * inner;
                dot += g.data()[p].as_f64() * y.data()[p].as_f64();
            }
            for l in 0..lanes {
                let p = base + l * inner;
                let yv = y.data()[p].as_f64();
                out[p] = E::from_f64(yv * (g.data()[p].as_f64() - dot));
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

fn layer_norm_forward<E: Scalar>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
) -> Result<Tensor<E>> {
    let r = x.rank();
    let c = x.shape()[r - 1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "layer_norm scale/shift must be [{c}], got {:?} / {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let rows = x.len() / c;
    let mut out = vec![E::zero(); x.len()];
    for row in 0..rows {
        let xs = &x.data()[row * c..(row + 1) * c];
        let mu: f64 = xs.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
        let var: f64 = xs
            .iter()
            .map(|v| {
                let d = v.as_f64() - mu;
                d * d
            })
            .sum::<f64>()
            / c as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..c {
            let xh = (xs[j].as_f64() - mu) * inv;
            out[row * c + j] = E::from_f64(gamma.data()[j].as_f64() * xh + beta.data()[j].as_f64());
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn layer_norm_backward<E: Scalar>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    g: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let r = x.rank();
    let c = x.shape()[r - 1];
    let rows = x.len() / c;
    let mut gx = vec![0.0f64; x.len()];
    let mut gg = vec![0.0f64; c];
    let mut gb = vec![0.0f64; c];
    for row in 0..rows {
        let xs = &x.data()[row * c..(row + 1) * c];
        let gs = &g.data()[row * c..(row + 1) * c];
        let mu: f64 = xs.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
        let var: f64 = xs
            .iter()
            .map(|v| {
                let d = v.as_f64() - mu;
                d * d
            })
            .sum::<f64>()
            / c as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let xh: Vec<f64> = xs.iter().map(|v| (v.as_f64() - mu) * inv).collect();
        let dxh: Vec<f64> = gs
            .iter()
            .zip(gamma.data())
            .map(|(gv, gm)| gv.as_f64() * gm.as_f64())
            .collect();
        let mean_dxh: f64 = dxh.iter().sum::<f64>() / c as f64;
        let mean_dxh_xh: f64 = dxh.iter().zip(&xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        for j in 0..c {
            gx[row * c + j] = (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh) * inv;
            gg[j] += gs[j].as_f64() * xh[j];
            gb[j] += gs[j].as_f64();
        }
    }
    Ok((
        Tensor::new(
            x.shape().to_vec(),
            gx.into_iter().map(E::from_f64).collect(),
        )?,
        Tensor::new(vec![c], gg.into_iter().map(E::from_f64).collect())?,
        Tensor::new(vec![c], gb.into_iter().map(E::from_f64).collect())?,
    ))
}

/// Central-difference gradient estimate of a scalar-valued function:
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<E: Scalar>(
    f: &mut dyn FnMut(&Tensor<E>) -> E,
    x: &Tensor<E>,
    h: f64,
) -> Tensor<E> {
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + E::from_f64(h);
        let mut minus = x.clone();
        minus.data_mut()[i] = minus.data()[i] - E::from_f64(h);
        let d = (f(&plus).as_f64() - f(&minus).as_f64()) / (2.0 * h);
        out.data_mut()[i] = E::from_f64(d);
    }
    out
}

/// Relative error with an absolute floor, used by all gradient checks.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / got.abs().max(want.abs()).max(1e-6)
}
