//! Reverse pass. Every backward rule is itself expressed with recorded
//! primitives, so the returned adjoints are ordinary `Var`s and a second
//! backward pass over them yields exact second-order quantities.

use std::rc::Rc;

use super::graph::Op;
use super::var::Var;
use crate::{Error, Result};

/// Adjoints of `loss` with respect to the given node ids. Nodes unreachable
/// from the loss get zero adjoints of the right shape.
pub fn backward_vars(loss: &Var, wrt: &[Var]) -> Result<Vec<Var>> {
    if loss.len() != 1 {
        return Err(Error::contract("backward: loss must be scalar"));
    }
    for w in wrt {
        assert!(
            Rc::ptr_eq(w.graph(), loss.graph()),
            "backward: wrt var from a different record"
        );
    }
    let graph = loss.graph().clone();
    let limit = loss.id();
    let mut adjoints: Vec<Option<Var>> = vec![None; limit + 1];
    adjoints[limit] = Some(Var::scalar(&graph, 1.0).reshape(loss.shape()));

    for id in (0..=limit).rev() {
        let adj = match &adjoints[id] {
            Some(a) => a.clone(),
            None => continue,
        };
        // Snapshot the node before appending VJP nodes.
        let (op, inputs) = {
            let nodes = graph.nodes.borrow();
            (nodes[id].op.clone(), nodes[id].inputs.clone())
        };
        let var_of = |nid: usize| Var { graph: graph.clone(), id: nid };
        let contribs: Vec<(usize, Var)> = match op {
            Op::Leaf | Op::Const => vec![],
            Op::Add => vec![(inputs[0], adj.clone()), (inputs[1], adj.clone())],
            Op::Sub => vec![(inputs[0], adj.clone()), (inputs[1], adj.neg())],
            Op::Mul => {
                let a = var_of(inputs[0]);
                let b = var_of(inputs[1]);
                vec![(inputs[0], adj.mul(&b)), (inputs[1], adj.mul(&a))]
            }
            Op::Neg => vec![(inputs[0], adj.neg())],
            Op::Scale(c) => vec![(inputs[0], adj.scale(c))],
            Op::Matmul { .. } => {
                let a = var_of(inputs[0]);
                let b = var_of(inputs[1]);
                vec![
                    (inputs[0], adj.matmul(&b.transpose())),
                    (inputs[1], a.transpose().matmul(&adj)),
                ]
            }
            Op::Transpose { .. } => vec![(inputs[0], adj.transpose())],
            Op::Gather { idx, in_len } => {
                let in_shape = graph.nodes.borrow()[inputs[0]].shape.clone();
                let flat = adj.reshape(vec![adj.len()]);
                vec![(inputs[0], flat.scatter_add(idx, in_len).reshape(in_shape))]
            }
            Op::ScatterAdd { idx, .. } => {
                let in_shape = graph.nodes.borrow()[inputs[0]].shape.clone();
                let n = idx.len();
                vec![(inputs[0], adj.gather(idx, vec![n]).reshape(in_shape))]
            }
            Op::Concat { lens } => {
                let mut out = Vec::with_capacity(inputs.len());
                let mut offset = 0i64;
                for (&inp, &len) in inputs.iter().zip(lens.iter()) {
                    let idx: Rc<Vec<i64>> =
                        Rc::new((0..len as i64).map(|i| offset + i).collect());
                    let in_shape = graph.nodes.borrow()[inp].shape.clone();
                    out.push((inp, adj.gather(idx, vec![len]).reshape(in_shape)));
                    offset += len as i64;
                }
                out
            }
            Op::Reshape => {
                let in_shape = graph.nodes.borrow()[inputs[0]].shape.clone();
                vec![(inputs[0], adj.reshape(in_shape))]
            }
            Op::Relu => {
                let (mask, shape) = {
                    let nodes = graph.nodes.borrow();
                    let x = &nodes[inputs[0]];
                    (
                        x.data.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
                        x.shape.clone(),
                    )
                };
                let mask = Var::constant(&graph, shape, mask);
                vec![(inputs[0], adj.mul(&mask))]
            }
            Op::Sigmoid => {
                let y = var_of(id);
                let one = y.ones_like();
                vec![(inputs[0], adj.mul(&y).mul(&one.sub(&y)))]
            }
            Op::Softmax { rows, cols } => {
                // gx = y * (g - rowsum(g * y)); rowsum/broadcast via matmul with ones.
                let y = var_of(id);
                let gy = adj.mul(&y);
                let ones_col = Var::constant(&graph, vec![cols, 1], vec![1.0; cols]);
                let ones_row = Var::constant(&graph, vec![1, cols], vec![1.0; cols]);
                let s = gy.matmul(&ones_col).matmul(&ones_row);
                let _ = rows;
                vec![(inputs[0], y.mul(&adj.sub(&s)))]
            }
            Op::SoftmaxCe { labels, rows, cols } => {
                let logits = var_of(inputs[0]);
                let p = logits.softmax();
                let mut onehot = vec![0.0; rows * cols];
                for (r, &l) in labels.iter().enumerate() {
                    onehot[r * cols + l] = 1.0;
                }
                let onehot = Var::constant(&graph, vec![rows, cols], onehot);
                let d = p.sub(&onehot).scale(1.0 / rows as f64);
                let gb = adj.broadcast_scalar(vec![rows, cols]);
                vec![(inputs[0], gb.mul(&d))]
            }
            Op::SmoothL1 => {
                let pred = var_of(inputs[0]);
                let target = var_of(inputs[1]);
                let (mask_in, sign_out, shape) = {
                    let nodes = graph.nodes.borrow();
                    let a = &nodes[inputs[0]].data;
                    let b = &nodes[inputs[1]].data;
                    let mut mask = Vec::with_capacity(a.len());
                    let mut sign = Vec::with_capacity(a.len());
                    for i in 0..a.len() {
                        let d = a[i] - b[i];
                        if d.abs() < 1.0 {
                            mask.push(1.0);
                            sign.push(0.0);
                        } else {
                            mask.push(0.0);
                            sign.push(d.signum());
                        }
                    }
                    (mask, sign, nodes[inputs[0]].shape.clone())
                };
                let n = pred.len() as f64;
                let mask = Var::constant(&graph, shape.clone(), mask_in);
                let sign = Var::constant(&graph, shape.clone(), sign_out);
                let d = pred.sub(&target);
                let coef = d.mul(&mask).add(&sign);
                let gp = adj.broadcast_scalar(shape).mul(&coef).scale(1.0 / n);
                let gt = gp.neg();
                vec![(inputs[0], gp), (inputs[1], gt)]
            }
            Op::Grl(lambda) => vec![(inputs[0], adj.scale(-lambda))],
            Op::SumAll => {
                let in_shape = graph.nodes.borrow()[inputs[0]].shape.clone();
                vec![(inputs[0], adj.broadcast_scalar(in_shape))]
            }
            Op::BroadcastScalar => vec![(inputs[0], adj.sum_all())],
        };
        for (inp, g) in contribs {
            adjoints[inp] = Some(match adjoints[inp].take() {
                None => g,
                Some(prev) => prev.add(&g),
            });
        }
    }

    let out = wrt
        .iter()
        .map(|w| match adjoints.get(w.id()).and_then(|a| a.clone()) {
            Some(a) => a,
            None => Var::zeros_const(&graph, w.shape()),
        })
        .collect();
    graph.check()?;
    Ok(out)
}
