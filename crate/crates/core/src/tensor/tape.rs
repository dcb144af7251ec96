//! The compute graph: an append-only tape of nodes in topological order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{NodeHandle, Tensor};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Broadcast mode for elementwise binary ops. Broadcasting is restricted to
/// scalar right-hand sides and trailing-dimension suffixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bcast {
    Same,
    /// rhs shape is a strict suffix of lhs shape.
    Trailing,
    /// rhs is a single value.
    ScalarRhs,
}

/// Recorded operation kind plus whatever the backward rule needs.
#[derive(Clone)]
pub enum Op<S: Scalar> {
    Leaf,
    Matmul,
    Add(Bcast),
    Mul(Bcast),
    Neg,
    Scale(S),
    Softmax,
    RmsNorm { eps: S },
    Gelu,
    Sigmoid,
    EmbedGather { ids: Arc<Vec<u32>> },
    CrossEntropy { targets: Arc<Vec<u32>> },
    Mse,
    SumAll,
    MeanAll,
    Reshape,
    Reindex { perm: Arc<Vec<u32>> },
    Concat,
}

pub(crate) struct Node<S: Scalar> {
    pub op: Op<S>,
    pub inputs: Vec<usize>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    /// The node's output values (saved activation).
    pub data: Arc<Vec<S>>,
}

pub(crate) struct TapeInner<S: Scalar> {
    pub nodes: Vec<Node<S>>,
}

/// Shared handle to a compute graph. A tape is single-writer: one forward
/// computation appends to it at a time. Distinct tapes are fully independent.
pub struct Tape<S: Scalar> {
    pub(crate) inner: Arc<Mutex<TapeInner<S>>>,
    id: u64,
}

impl<S: Scalar> Clone for Tape<S> {
    fn clone(&self) -> Self {
        Tape {
            inner: Arc::clone(&self.inner),
            id: self.id,
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            inner: Arc::new(Mutex::new(TapeInner { nodes: Vec::new() })),
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Create a leaf tensor recorded on this tape.
    pub fn leaf(&self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Result<Tensor<S>> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(
                "leaf",
                format!("shape {:?} wants {} values, got {}", shape, shape.iter().product::<usize>(), data.len()),
            ));
        }
        let data = Arc::new(data);
        let index = self.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: shape.clone(),
            requires_grad,
            data: Arc::clone(&data),
        });
        Ok(Tensor::with_node(
            shape,
            data,
            Some(NodeHandle {
                tape: self.clone(),
                index,
            }),
            requires_grad,
        ))
    }

    /// Wrap an existing tensor's buffer as a leaf on this tape.
    pub fn leaf_from(&self, t: &Tensor<S>, requires_grad: bool) -> Tensor<S> {
        let data = t.data_arc();
        let shape = t.shape().to_vec();
        let index = self.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: shape.clone(),
            requires_grad,
            data: Arc::clone(&data),
        });
        Tensor::with_node(
            shape,
            data,
            Some(NodeHandle {
                tape: self.clone(),
                index,
            }),
            requires_grad,
        )
    }

    pub(crate) fn push(&self, node: Node<S>) -> usize {
        let mut inner = self.inner.lock().unwrap();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    /// Serialize the graph, preserving node order. Intended for structural
    /// round-trip checks: backward over the deserialized tape must agree with
    /// backward over the original.
    pub fn to_bytes(&self) -> Vec<u8> {
        let inner = self.inner.lock().unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(b"FFTAPE01");
        push_u8(&mut out, S::DTYPE.size() as u8);
        push_u64(&mut out, inner.nodes.len() as u64);
        for node in &inner.nodes {
            encode_op(&node.op, &mut out);
            push_u64(&mut out, node.inputs.len() as u64);
            for &i in &node.inputs {
                push_u64(&mut out, i as u64);
            }
            push_u64(&mut out, node.shape.len() as u64);
            for &d in &node.shape {
                push_u64(&mut out, d as u64);
            }
            push_u8(&mut out, node.requires_grad as u8);
            push_scalars(&node.data, &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != b"FFTAPE01" {
            return Err(Error::invalid("tape", "bad magic"));
        }
        let width = cur.u8()? as usize;
        if width != S::DTYPE.size() {
            return Err(Error::invalid("tape", "dtype width mismatch"));
        }
        let n = cur.u64()? as usize;
        let tape = Tape::new();
        {
            let mut inner = tape.inner.lock().unwrap();
            for _ in 0..n {
                let op = decode_op::<S>(&mut cur)?;
                let n_inputs = cur.u64()? as usize;
                let mut inputs = Vec::with_capacity(n_inputs);
                for _ in 0..n_inputs {
                    inputs.push(cur.u64()? as usize);
                }
                let rank = cur.u64()? as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(cur.u64()? as usize);
                }
                let requires_grad = cur.u8()? != 0;
                let data = take_scalars::<S>(&mut cur)?;
                inner.nodes.push(Node {
                    op,
                    inputs,
                    shape,
                    requires_grad,
                    data: Arc::new(data),
                });
            }
        }
        Ok(tape)
    }

    /// Handle to the node at `index`, for backward over a deserialized tape.
    pub fn tensor_at(&self, index: usize) -> Result<Tensor<S>> {
        let inner = self.inner.lock().unwrap();
        let node = inner
            .nodes
            .get(index)
            .ok_or_else(|| Error::invalid("tape", format!("no node {index}")))?;
        Ok(Tensor::with_node(
            node.shape.clone(),
            Arc::clone(&node.data),
            Some(NodeHandle {
                tape: self.clone(),
                index,
            }),
            node.requires_grad,
        ))
    }
}

fn op_tag<S: Scalar>(op: &Op<S>) -> u8 {
    match op {
        Op::Leaf => 0,
        Op::Matmul => 1,
        Op::Add(Bcast::Same) => 2,
        Op::Add(Bcast::Trailing) => 3,
        Op::Add(Bcast::ScalarRhs) => 4,
        Op::Mul(Bcast::Same) => 5,
        Op::Mul(Bcast::Trailing) => 6,
        Op::Mul(Bcast::ScalarRhs) => 7,
        Op::Neg => 8,
        Op::Scale(_) => 9,
        Op::Softmax => 10,
        Op::RmsNorm { .. } => 11,
        Op::Gelu => 12,
        Op::Sigmoid => 13,
        Op::EmbedGather { .. } => 14,
        Op::CrossEntropy { .. } => 15,
        Op::Mse => 16,
        Op::SumAll => 17,
        Op::MeanAll => 18,
        Op::Reshape => 19,
        Op::Reindex { .. } => 20,
        Op::Concat => 21,
    }
}

fn encode_op<S: Scalar>(op: &Op<S>, out: &mut Vec<u8>) {
    push_u8(out, op_tag(op));
    match op {
        Op::Scale(c) => c.write_le(out),
        Op::RmsNorm { eps } => eps.write_le(out),
        Op::EmbedGather { ids } => push_u32s(ids, out),
        Op::CrossEntropy { targets } => push_u32s(targets, out),
        Op::Reindex { perm } => push_u32s(perm, out),
        _ => {}
    }
}

fn decode_op<S: Scalar>(cur: &mut Cursor) -> Result<Op<S>> {
    let tag = cur.u8()?;
    Ok(match tag {
        0 => Op::Leaf,
        1 => Op::Matmul,
        2 => Op::Add(Bcast::Same),
        3 => Op::Add(Bcast::Trailing),
        4 => Op::Add(Bcast::ScalarRhs),
        5 => Op::Mul(Bcast::Same),
        6 => Op::Mul(Bcast::Trailing),
        7 => Op::Mul(Bcast::ScalarRhs),
        8 => Op::Neg,
        9 => Op::Scale(cur.scalar::<S>()?),
        10 => Op::Softmax,
        11 => Op::RmsNorm { eps: cur.scalar::<S>()? },
        12 => Op::Gelu,
        13 => Op::Sigmoid,
        14 => Op::EmbedGather { ids: Arc::new(take_u32s(cur)?) },
        15 => Op::CrossEntropy { targets: Arc::new(take_u32s(cur)?) },
        16 => Op::Mse,
        17 => Op::SumAll,
        18 => Op::MeanAll,
        19 => Op::Reshape,
        20 => Op::Reindex { perm: Arc::new(take_u32s(cur)?) },
        21 => Op::Concat,
        other => return Err(Error::invalid("tape", format!("unknown op tag {other}"))),
    })
}

fn push_u8(out: &mut Vec<u8>, v: u8) {
    out.push(v);
}
fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn push_u32s(vals: &[u32], out: &mut Vec<u8>) {
    push_u64(out, vals.len() as u64);
    for &v in vals {
        push_u32(out, v);
    }
}
fn push_scalars<S: Scalar>(vals: &[S], out: &mut Vec<u8>) {
    push_u64(out, vals.len() as u64);
    for &v in vals {
        v.write_le(out);
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::invalid("tape", "truncated buffer"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn scalar<S: Scalar>(&mut self) -> Result<S> {
        Ok(S::read_le(self.take(S::DTYPE.size())?))
    }
}

fn take_u32s(cur: &mut Cursor) -> Result<Vec<u32>> {
    let n = cur.u64()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(cur.u32()?);
    }
    Ok(out)
}

fn take_scalars<S: Scalar>(cur: &mut Cursor) -> Result<Vec<S>> {
    let n = cur.u64()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(cur.scalar::<S>()?);
    }
    Ok(out)
}
