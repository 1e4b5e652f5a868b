//! Differentiation record: an append-only tape of primitive operations.
//!
//! Values are computed eagerly as nodes are appended, so a node always
//! carries both the metadata needed for its backward rule and its forward
//! value. Backward rules append new nodes to the same record, which is what
//! makes gradients themselves differentiable (double backprop).

use std::cell::{Cell, RefCell};
use std::rc::Rc;

thread_local! {
    /// Number of records alive on this thread. Graphs are `!Send`, so a
    /// record lives and dies on one thread; per-thread counters keep the
    /// online meta loop's record-count assertion immune to unrelated
    /// activity on other threads.
    static LIVE_RECORDS: Cell<usize> = const { Cell::new(0) };
    /// High-water mark of `LIVE_RECORDS` since the last reset.
    static PEAK_RECORDS: Cell<usize> = const { Cell::new(0) };
}

pub fn live_record_count() -> usize {
    LIVE_RECORDS.with(Cell::get)
}

pub fn peak_record_count() -> usize {
    PEAK_RECORDS.with(Cell::get)
}

pub fn reset_peak_record_count() {
    PEAK_RECORDS.with(|p| p.set(live_record_count()));
}

/// Primitive operations. Anything the pipeline needs must compose from these.
#[derive(Debug, Clone)]
pub enum Op {
    /// Trainable input; participates in gradient requests.
    Leaf,
    /// Non-trainable constant (data, masks, labels-as-floats).
    Const,
    Add,
    Sub,
    Mul,
    Neg,
    /// Multiply every element by a compile-time scalar.
    Scale(f64),
    /// (m x k) * (k x n) row-major matrix product.
    Matmul { m: usize, k: usize, n: usize },
    /// 2-D transpose of an (rows x cols) row-major matrix.
    Transpose { rows: usize, cols: usize },
    /// out[i] = in[idx[i]], with idx[i] == -1 meaning 0 (zero padding).
    /// Linear, so its backward (scatter-add) is also a primitive.
    Gather { idx: Rc<Vec<i64>>, in_len: usize },
    /// out[idx[i]] += in[i]; the adjoint of Gather.
    ScatterAdd { idx: Rc<Vec<i64>>, out_len: usize },
    /// Concatenate flat inputs back to back.
    Concat { lens: Vec<usize> },
    Reshape,
    Relu,
    Sigmoid,
    /// Row-wise softmax over an (rows x cols) matrix.
    Softmax { rows: usize, cols: usize },
    /// Fused mean negative log-likelihood over (rows x cols) logits.
    SoftmaxCe { labels: Rc<Vec<usize>>, rows: usize, cols: usize },
    /// Fused mean smooth-L1 over two equal-shape tensors.
    SmoothL1,
    /// Identity forward; backward multiplies upstream by -lambda.
    Grl(f64),
    SumAll,
    /// Replicate a scalar to a target shape; adjoint of SumAll.
    BroadcastScalar,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Concat { .. } => "concat",
            Op::Reshape => "reshape",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::SoftmaxCe { .. } => "softmax_ce",
            Op::SmoothL1 => "smooth_l1",
            Op::Grl(_) => "grl",
            Op::SumAll => "sum_all",
            Op::BroadcastScalar => "broadcast_scalar",
        }
    }
}

pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<usize>,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// First non-finite value seen while appending nodes.
#[derive(Debug, Clone)]
pub struct Fault {
    pub op: &'static str,
    pub node: usize,
}

pub struct Graph {
    pub(crate) nodes: RefCell<Vec<Node>>,
    fault: RefCell<Option<Fault>>,
}

pub type GraphRef = Rc<Graph>;

impl Graph {
    pub fn new() -> GraphRef {
        let live = LIVE_RECORDS.with(|l| {
            l.set(l.get() + 1);
            l.get()
        });
        PEAK_RECORDS.with(|p| p.set(p.get().max(live)));
        Rc::new(Graph {
            nodes: RefCell::new(Vec::new()),
            fault: RefCell::new(None),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Append a node whose value was already computed by the caller.
    pub(crate) fn push(&self, op: Op, inputs: Vec<usize>, shape: Vec<usize>, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.fault.borrow().is_none() && data.iter().any(|v| !v.is_finite()) {
            *self.fault.borrow_mut() = Some(Fault { op: op.name(), node: id });
        }
        nodes.push(Node { op, inputs, shape, data });
        id
    }

    pub fn fault(&self) -> Option<Fault> {
        self.fault.borrow().clone()
    }

    /// Surface any recorded NaN/Inf as an error.
    pub fn check(&self) -> crate::Result<()> {
        match self.fault() {
            None => Ok(()),
            Some(f) => Err(crate::Error::Numeric {
                op: f.op,
                node: f.node,
                detail: "non-finite value produced".into(),
            }),
        }
    }
}

impl Drop for Graph {
    fn drop(&mut self) {
        LIVE_RECORDS.with(|l| l.set(l.get() - 1));
    }
}
