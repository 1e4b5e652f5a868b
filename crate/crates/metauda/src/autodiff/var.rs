//! A `Var` is a handle to one node of a differentiation record. All tensor
//! operations are eager: the forward value is computed immediately and the
//! primitive is appended to the record for later backward passes.

use std::rc::Rc;

use super::graph::{GraphRef, Op};

#[derive(Clone)]
pub struct Var {
    pub(crate) graph: GraphRef,
    pub(crate) id: usize,
}

fn same_graph(a: &Var, b: &Var) {
    assert!(Rc::ptr_eq(&a.graph, &b.graph), "vars belong to different records");
}

impl Var {
    pub fn leaf(graph: &GraphRef, shape: Vec<usize>, data: Vec<f64>) -> Var {
        let id = graph.push(Op::Leaf, vec![], shape, data);
        Var { graph: graph.clone(), id }
    }

    pub fn constant(graph: &GraphRef, shape: Vec<usize>, data: Vec<f64>) -> Var {
        let id = graph.push(Op::Const, vec![], shape, data);
        Var { graph: graph.clone(), id }
    }

    pub fn scalar(graph: &GraphRef, v: f64) -> Var {
        Var::constant(graph, vec![], vec![v])
    }

    pub fn zeros_const(graph: &GraphRef, shape: Vec<usize>) -> Var {
        let n = shape.iter().product();
        Var::constant(graph, shape, vec![0.0; n])
    }

    pub fn graph(&self) -> &GraphRef {
        &self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.graph.nodes.borrow()[self.id].data.len()
    }

    pub fn data(&self) -> Vec<f64> {
        self.graph.nodes.borrow()[self.id].data.clone()
    }

    pub fn value(&self) -> f64 {
        let nodes = self.graph.nodes.borrow();
        let d = &nodes[self.id].data;
        assert_eq!(d.len(), 1, "value() on non-scalar");
        d[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1 && self.shape().is_empty()
    }

    fn push(&self, op: Op, inputs: Vec<usize>, shape: Vec<usize>, data: Vec<f64>) -> Var {
        let id = self.graph.push(op, inputs, shape, data);
        Var { graph: self.graph.clone(), id }
    }

    pub fn add(&self, other: &Var) -> Var {
        same_graph(self, other);
        let (a, b, shape) = {
            let nodes = self.graph.nodes.borrow();
            assert_eq!(nodes[self.id].shape, nodes[other.id].shape, "add: shape mismatch");
            (
                nodes[self.id].data.clone(),
                nodes[other.id].data.clone(),
                nodes[self.id].shape.clone(),
            )
        };
        let data = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        self.push(Op::Add, vec![self.id, other.id], shape, data)
    }

    pub fn sub(&self, other: &Var) -> Var {
        same_graph(self, other);
        let (a, b, shape) = {
            let nodes = self.graph.nodes.borrow();
            assert_eq!(nodes[self.id].shape, nodes[other.id].shape, "sub: shape mismatch");
            (
                nodes[self.id].data.clone(),
                nodes[other.id].data.clone(),
                nodes[self.id].shape.clone(),
            )
        };
        let data = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        self.push(Op::Sub, vec![self.id, other.id], shape, data)
    }

    pub fn mul(&self, other: &Var) -> Var {
        same_graph(self, other);
        let (a, b, shape) = {
            let nodes = self.graph.nodes.borrow();
            assert_eq!(nodes[self.id].shape, nodes[other.id].shape, "mul: shape mismatch");
            (
                nodes[self.id].data.clone(),
                nodes[other.id].data.clone(),
                nodes[self.id].shape.clone(),
            )
        };
        let data = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        self.push(Op::Mul, vec![self.id, other.id], shape, data)
    }

    pub fn neg(&self) -> Var {
        let (a, shape) = {
            let nodes = self.graph.nodes.borrow();
            (nodes[self.id].data.clone(), nodes[self.id].shape.clone())
        };
        let data = a.iter().map(|x| -x).collect();
        self.push(Op::Neg, vec![self.id], shape, data)
    }

    pub fn scale(&self, c: f64) -> Var {
        let (a, shape) = {
            let nodes = self.graph.nodes.borrow();
            (nodes[self.id].data.clone(), nodes[self.id].shape.clone())
        };
        let data = a.iter().map(|x| x * c).collect();
        self.push(Op::Scale(c), vec![self.id], shape, data)
    }

    /// Row-major (m x k) * (k x n).
    pub fn matmul(&self, other: &Var) -> Var {
        same_graph(self, other);
        let (a, b, sa, sb) = {
            let nodes = self.graph.nodes.borrow();
            (
                nodes[self.id].data.clone(),
                nodes[other.id].data.clone(),
                nodes[self.id].shape.clone(),
                nodes[other.id].shape.clone(),
            )
        };
        assert_eq!(sa.len(), 2, "matmul: lhs not 2-D");
        assert_eq!(sb.len(), 2, "matmul: rhs not 2-D");
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        assert_eq!(k, k2, "matmul: inner dims differ");
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let drow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    drow[j] += aip * brow[j];
                }
            }
        }
        self.push(Op::Matmul { m, k, n }, vec![self.id, other.id], vec![m, n], data)
    }

    pub fn transpose(&self) -> Var {
        let (a, shape) = {
            let nodes = self.graph.nodes.borrow();
            (nodes[self.id].data.clone(), nodes[self.id].shape.clone())
        };
        assert_eq!(shape.len(), 2, "transpose: not 2-D");
        let (rows, cols) = (shape[0], shape[1]);
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = a[i * cols + j];
            }
        }
        self.push(Op::Transpose { rows, cols }, vec![self.id], vec![cols, rows], data)
    }

    /// out[i] = self.flat[idx[i]]; idx -1 reads as 0.0 (zero padding).
    pub fn gather(&self, idx: Rc<Vec<i64>>, out_shape: Vec<usize>) -> Var {
        let a = self.data();
        let in_len = a.len();
        assert_eq!(out_shape.iter().product::<usize>(), idx.len(), "gather: shape/index mismatch");
        let data = idx
            .iter()
            .map(|&i| if i < 0 { 0.0 } else { a[i as usize] })
            .collect();
        self.push(Op::Gather { idx, in_len }, vec![self.id], out_shape, data)
    }

    /// out[idx[i]] += self.flat[i]; indices < 0 are dropped.
    pub fn scatter_add(&self, idx: Rc<Vec<i64>>, out_len: usize) -> Var {
        let a = self.data();
        assert_eq!(a.len(), idx.len(), "scatter_add: shape/index mismatch");
        let mut data = vec![0.0; out_len];
        for (v, &i) in a.iter().zip(idx.iter()) {
            if i >= 0 {
                data[i as usize] += v;
            }
        }
        self.push(Op::ScatterAdd { idx, out_len }, vec![self.id], vec![out_len], data)
    }

    /// Flat concatenation of all parts (result is 1-D).
    pub fn concat(parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let graph = parts[0].graph.clone();
        let mut lens = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        let mut inputs = Vec::with_capacity(parts.len());
        for p in parts {
            same_graph(&parts[0], p);
            let d = p.data();
            lens.push(d.len());
            data.extend_from_slice(&d);
            inputs.push(p.id);
        }
        let total = data.len();
        let id = graph.push(Op::Concat { lens }, inputs, vec![total], data);
        Var { graph, id }
    }

    pub fn reshape(&self, new_shape: Vec<usize>) -> Var {
        let data = self.data();
        assert_eq!(new_shape.iter().product::<usize>(), data.len(), "reshape: element count");
        self.push(Op::Reshape, vec![self.id], new_shape, data)
    }

    pub fn relu(&self) -> Var {
        let (a, shape) = {
            let nodes = self.graph.nodes.borrow();
            (nodes[self.id].data.clone(), nodes[self.id].shape.clone())
        };
        let data = a.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.push(Op::Relu, vec![self.id], shape, data)
    }

    pub fn sigmoid(&self) -> Var {
        let (a, shape) = {
            let nodes = self.graph.nodes.borrow();
            (nodes[self.id].data.clone(), nodes[self.id].shape.clone())
        };
        let data = a.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        self.push(Op::Sigmoid, vec![self.id], shape, data)
    }

    /// Row-wise softmax; input must be 2-D.
    pub fn softmax(&self) -> Var {
        let (a, shape) = {
            let nodes = self.graph.nodes.borrow();
            (nodes[self.id].data.clone(), nodes[self.id].shape.clone())
        };
        assert_eq!(shape.len(), 2, "softmax: not 2-D");
        let (rows, cols) = (shape[0], shape[1]);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &a[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..cols {
                let e = (row[j] - mx).exp();
                data[r * cols + j] = e;
                z += e;
            }
            for j in 0..cols {
                data[r * cols + j] /= z;
            }
        }
        self.push(Op::Softmax { rows, cols }, vec![self.id], vec![rows, cols], data)
    }

    /// Mean negative log-likelihood over (rows x cols) logits.
    pub fn softmax_ce(&self, labels: Rc<Vec<usize>>) -> Var {
        let (a, shape) = {
            let nodes = self.graph.nodes.borrow();
            (nodes[self.id].data.clone(), nodes[self.id].shape.clone())
        };
        assert_eq!(shape.len(), 2, "softmax_ce: logits not 2-D");
        let (rows, cols) = (shape[0], shape[1]);
        assert_eq!(labels.len(), rows, "softmax_ce: one label per row");
        assert!(labels.iter().all(|&l| l < cols), "softmax_ce: label out of range");
        let mut total = 0.0;
        for r in 0..rows {
            let row = &a[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            total += lse - row[labels[r]];
        }
        let loss = total / rows as f64;
        self.push(Op::SoftmaxCe { labels, rows, cols }, vec![self.id], vec![], vec![loss])
    }

    /// Mean smooth-L1 of (self - target).
    pub fn smooth_l1(&self, target: &Var) -> Var {
        same_graph(self, target);
        let (a, b) = {
            let nodes = self.graph.nodes.borrow();
            assert_eq!(
                nodes[self.id].shape, nodes[target.id].shape,
                "smooth_l1: shape mismatch"
            );
            (nodes[self.id].data.clone(), nodes[target.id].data.clone())
        };
        let n = a.len();
        let mut total = 0.0;
        for i in 0..n {
            let d = a[i] - b[i];
            total += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        }
        let loss = total / n as f64;
        self.push(Op::SmoothL1, vec![self.id, target.id], vec![], vec![loss])
    }

    /// Gradient reversal: identity forward, backward scales by -lambda.
    pub fn grl(&self, lambda: f64) -> Var {
        assert!(lambda >= 0.0, "grl: lambda must be non-negative");
        let (data, shape) = {
            let nodes = self.graph.nodes.borrow();
            (nodes[self.id].data.clone(), nodes[self.id].shape.clone())
        };
        self.push(Op::Grl(lambda), vec![self.id], shape, data)
    }

    pub fn sum_all(&self) -> Var {
        let total = self.graph.nodes.borrow()[self.id].data.iter().sum();
        self.push(Op::SumAll, vec![self.id], vec![], vec![total])
    }

    pub fn mean_all(&self) -> Var {
        let n = self.len();
        assert!(n > 0, "mean_all: empty tensor");
        self.sum_all().scale(1.0 / n as f64)
    }

    pub fn broadcast_scalar(&self, shape: Vec<usize>) -> Var {
        let v = self.value();
        let n = shape.iter().product();
        self.push(Op::BroadcastScalar, vec![self.id], shape, vec![v; n])
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn ones_like(&self) -> Var {
        let shape = self.shape();
        let n = shape.iter().product();
        Var::constant(&self.graph, shape, vec![1.0; n])
    }
}
