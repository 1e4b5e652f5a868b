//! Named parameter collections and the public gradient entry points.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::backward::backward_vars;
use super::graph::GraphRef;
use super::var::Var;
use crate::{Error, Result};

/// Plain tensor value detached from any record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TensorData {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        TensorData { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> TensorData {
        let n = shape.iter().product();
        TensorData { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> TensorData {
        TensorData { shape: vec![], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Trainable tensors addressed by stable string paths (BTreeMap keeps the
/// iteration order deterministic).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet(pub BTreeMap<String, TensorData>);

impl ParameterSet {
    pub fn new() -> ParameterSet {
        ParameterSet(BTreeMap::new())
    }

    pub fn insert(&mut self, path: impl Into<String>, t: TensorData) {
        let path = path.into();
        assert!(
            self.0.insert(path.clone(), t).is_none(),
            "duplicate parameter path {path}"
        );
    }

    pub fn get(&self, path: &str) -> &TensorData {
        self.0
            .get(path)
            .unwrap_or_else(|| panic!("unknown parameter path {path}"))
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorData)> {
        self.0.iter()
    }

    pub fn num_elements(&self) -> usize {
        self.0.values().map(|t| t.len()).sum()
    }

    /// Merge another set; paths must be disjoint.
    pub fn extend(&mut self, other: ParameterSet) {
        for (k, v) in other.0 {
            self.insert(k, v);
        }
    }

    /// theta <- theta - lr * g, elementwise over matching paths.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (path, g) in grads.0.iter() {
            let t = self.0.get_mut(path).expect("gradient for unknown path");
            assert_eq!(t.shape, g.shape, "gradient shape mismatch at {path}");
            for (p, gv) in t.data.iter_mut().zip(&g.data) {
                *p -= lr * gv;
            }
        }
    }
}

/// Map from parameter path to a gradient tensor of identical shape.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Gradients(pub BTreeMap<String, TensorData>);

impl Gradients {
    pub fn zeros_like(params: &ParameterSet) -> Gradients {
        Gradients(
            params
                .iter()
                .map(|(k, t)| (k.clone(), TensorData::zeros(t.shape.clone())))
                .collect(),
        )
    }

    pub fn get(&self, path: &str) -> &TensorData {
        self.0
            .get(path)
            .unwrap_or_else(|| panic!("unknown gradient path {path}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorData)> {
        self.0.iter()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (path, g) in other.0.iter() {
            let t = self.0.get_mut(path).expect("gradient path mismatch");
            for (a, b) in t.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.0.values_mut() {
            for v in t.data.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.data.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Parameters materialized as leaves of one record.
pub struct BoundParams {
    pub graph: GraphRef,
    pub vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind(graph: &GraphRef, params: &ParameterSet) -> BoundParams {
        let vars = params
            .iter()
            .map(|(k, t)| (k.clone(), Var::leaf(graph, t.shape.clone(), t.data.clone())))
            .collect();
        BoundParams { graph: graph.clone(), vars }
    }

    pub fn var(&self, path: &str) -> &Var {
        self.vars
            .get(path)
            .unwrap_or_else(|| panic!("unbound parameter path {path}"))
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// Snapshot the bound values back into a detached set.
    pub fn to_params(&self) -> ParameterSet {
        let mut p = ParameterSet::new();
        for (k, v) in &self.vars {
            p.insert(k.clone(), TensorData::new(v.shape(), v.data()));
        }
        p
    }
}

/// dL/dtheta for every bound parameter, detached from the record.
pub fn grad(loss: &Var, params: &BoundParams) -> Result<Gradients> {
    let vars = grad_vars(loss, params)?;
    let mut out = BTreeMap::new();
    for (path, v) in params.paths().zip(vars.iter()) {
        out.insert(path.clone(), TensorData::new(v.shape(), v.data()));
    }
    Ok(Gradients(out))
}

/// dL/dtheta as recorded `Var`s; differentiating through these yields exact
/// second-order terms.
pub fn grad_vars(loss: &Var, params: &BoundParams) -> Result<Vec<Var>> {
    if loss.len() != 1 {
        return Err(Error::contract("grad: loss must be scalar"));
    }
    let wrt: Vec<Var> = params.vars.values().cloned().collect();
    backward_vars(loss, &wrt)
}

/// H*v via differentiating the inner product of grad(loss) with v.
pub fn hessian_vector_product(loss: &Var, params: &BoundParams, v: &Gradients) -> Result<Gradients> {
    let gvars = grad_vars(loss, params)?;
    let graph = loss.graph().clone();
    let mut dot: Option<Var> = None;
    for (path, gv) in params.paths().zip(gvars.iter()) {
        let vt = v.get(path);
        assert_eq!(vt.shape, gv.shape(), "hvp: v shape mismatch at {path}");
        let vc = Var::constant(&graph, vt.shape.clone(), vt.data.clone());
        let term = gv.mul(&vc).sum_all();
        dot = Some(match dot {
            None => term,
            Some(d) => d.add(&term),
        });
    }
    let dot = dot.ok_or_else(|| Error::contract("hvp: empty parameter set"))?;
    grad(&dot, params)
}

/// Central-difference gradient oracle. `loss_fn` must be deterministic; two
/// evaluations at the base point are compared bitwise to detect otherwise.
pub fn finite_diff_gradient<F>(loss_fn: F, params: &ParameterSet, eps: f64) -> Result<Gradients>
where
    F: Fn(&ParameterSet) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::contract("finite_diff_gradient: eps must be positive"));
    }
    let base1 = loss_fn(params)?;
    let base2 = loss_fn(params)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "loss_fn nondeterministic: {base1} vs {base2} at identical params"
        )));
    }
    let mut out = BTreeMap::new();
    for (path, t) in params.iter() {
        let mut g = vec![0.0; t.len()];
        for i in 0..t.len() {
            let mut plus = params.clone();
            plus.0.get_mut(path).unwrap().data[i] += eps;
            let mut minus = params.clone();
            minus.0.get_mut(path).unwrap().data[i] -= eps;
            g[i] = (loss_fn(&plus)? - loss_fn(&minus)?) / (2.0 * eps);
        }
        out.insert(path.clone(), TensorData::new(t.shape.clone(), g));
    }
    Ok(Gradients(out))
}
