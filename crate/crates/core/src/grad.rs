//! Minimal reverse-mode gradient engine over a closed primitive set.
//!
//! A [`Graph`] is a tape of nodes built define-by-run: values are computed
//! eagerly as nodes are added, `backward` walks the tape in reverse, and
//! `forward` re-binds named inputs and replays the whole tape (which is what
//! the finite-difference validator uses). The primitive set is exactly what
//! the embedding models and training objectives need; there is no
//! broadcasting and no dynamic shapes.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::linalg::{
    build_skew, expm_frechet_adjoint, expm_skew, skew_param_len, theta_gradient, DenseMatrix,
    LinalgError, SkewParams,
};

/// Floor used by l2-normalize so zero vectors never produce NaN.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph error: input '{0}' is not bound")]
    UnboundInput(String),
    #[error("graph error: shapes {a:?} and {b:?} are incompatible for {op}")]
    ShapeMismatch {
        op: &'static str,
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("graph error: {op} expects a column vector, got {shape:?}")]
    NotAVector { op: &'static str, shape: (usize, usize) },
    #[error("graph error: slice [{start}, {start}+{len}) out of range for length {src_len}")]
    SliceOutOfRange {
        start: usize,
        len: usize,
        src_len: usize,
    },
    #[error("graph error: loss node must be scalar, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("domain error: label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("graph error: node is not an input or parameter")]
    NotBindable,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("training-divergence error: non-finite gradient for parameter '{0}'")]
    Divergence(String),
}

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input { name: String },
    Parameter { key: String },
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    L2Normalize(NodeId),
    Concat(NodeId, NodeId),
    Slice { src: NodeId, start: usize, len: usize },
    Dot(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    SoftmaxCrossEntropy { logits: NodeId, label: usize },
    MatrixExpSkew { theta: NodeId, dim: usize },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: DenseMatrix,
    grad: Option<DenseMatrix>,
}

/// Named parameter tensors, ordered so iteration is deterministic.
pub type ParamMap = BTreeMap<String, DenseMatrix>;

/// A tape of primitive operations with cached values and gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: DenseMatrix) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    /// Cached value of a node.
    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        self.val(id)
    }

    /// Gradient accumulated at a node by the last `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Named input bound to a value now; re-bindable through [`Graph::forward`].
    pub fn input(&mut self, name: &str, value: DenseMatrix) -> NodeId {
        self.push(
            Op::Input {
                name: name.to_string(),
            },
            value,
        )
    }

    /// Trainable parameter; its gradient is collected by [`Graph::param_grads`].
    pub fn parameter(&mut self, key: &str, value: DenseMatrix) -> NodeId {
        self.push(
            Op::Parameter {
                key: key.to_string(),
            },
            value,
        )
    }

    /// Fixed scalar baked into the tape.
    pub fn constant(&mut self, v: f64) -> NodeId {
        self.push(Op::Constant, DenseMatrix::column(&[v]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (ar, ac) = self.val(a).shape();
        let (br, bc) = self.val(b).shape();
        if ac != br {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                a: (ar, ac),
                b: (br, bc),
            });
        }
        let value = self.val(a).matmul(self.val(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(GraphError::ShapeMismatch {
                op: "add",
                a: self.val(a).shape(),
                b: self.val(b).shape(),
            });
        }
        let value = self.val(a).add(self.val(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.val(a).scale(c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a);
        let data: Vec<f64> = v.data().iter().map(|x| x.max(0.0)).collect();
        let value = DenseMatrix::from_raw(v.rows(), v.cols(), data);
        self.push(Op::Relu(a), value)
    }

    /// `x / max(||x||, NORMALIZE_EPS)` over a column vector.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let v = self.val(a);
        if v.cols() != 1 {
            return Err(GraphError::NotAVector {
                op: "l2-normalize",
                shape: v.shape(),
            });
        }
        let value = normalize_value(v);
        Ok(self.push(Op::L2Normalize(a), value))
    }

    /// Vertical concatenation of two column vectors.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (va, vb) = (self.val(a), self.val(b));
        if va.cols() != 1 {
            return Err(GraphError::NotAVector {
                op: "concat",
                shape: va.shape(),
            });
        }
        if vb.cols() != 1 {
            return Err(GraphError::NotAVector {
                op: "concat",
                shape: vb.shape(),
            });
        }
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        let value = DenseMatrix::from_raw(va.rows() + vb.rows(), 1, data);
        Ok(self.push(Op::Concat(a, b), value))
    }

    /// Contiguous rows `[start, start+len)` of a column vector. `len` may be
    /// zero, yielding an empty vector.
    pub fn slice(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId, GraphError> {
        let v = self.val(src);
        if v.cols() != 1 {
            return Err(GraphError::NotAVector {
                op: "slice",
                shape: v.shape(),
            });
        }
        if start + len > v.rows() {
            return Err(GraphError::SliceOutOfRange {
                start,
                len,
                src_len: v.rows(),
            });
        }
        let data = v.data()[start..start + len].to_vec();
        let value = DenseMatrix::from_raw(len, 1, data);
        Ok(self.push(Op::Slice { src, start, len }, value))
    }

    /// Sum of the elementwise product of two same-shape tensors; scalar result.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(GraphError::ShapeMismatch {
                op: "dot",
                a: self.val(a).shape(),
                b: self.val(b).shape(),
            });
        }
        let s: f64 = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data().iter())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Op::Dot(a, b), DenseMatrix::column(&[s])))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a);
        let data: Vec<f64> = v.data().iter().map(|x| x.exp()).collect();
        let value = DenseMatrix::from_raw(v.rows(), v.cols(), data);
        self.push(Op::Exp(a), value)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a);
        let data: Vec<f64> = v.data().iter().map(|x| x.ln()).collect();
        let value = DenseMatrix::from_raw(v.rows(), v.cols(), data);
        self.push(Op::Log(a), value)
    }

    /// Numerically stable softmax cross-entropy of a logits column vector
    /// against a class index.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        label: usize,
    ) -> Result<NodeId, GraphError> {
        let v = self.val(logits);
        if v.cols() != 1 {
            return Err(GraphError::NotAVector {
                op: "softmax-cross-entropy",
                shape: v.shape(),
            });
        }
        if label >= v.rows() {
            return Err(GraphError::LabelOutOfRange {
                label,
                classes: v.rows(),
            });
        }
        let loss = softmax_ce_value(v.data(), label);
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits, label },
            DenseMatrix::column(&[loss]),
        ))
    }

    /// `P = e^{A(theta)}` where `theta` is a column vector holding the strict
    /// upper triangle of a `dim x dim` skew-symmetric matrix. Backpropagates
    /// through the exponential via its Fréchet-derivative adjoint.
    pub fn matrix_exp_skew(&mut self, theta: NodeId, dim: usize) -> Result<NodeId, GraphError> {
        let v = self.val(theta);
        let expected = skew_param_len(dim);
        if v.cols() != 1 || v.rows() != expected {
            return Err(GraphError::ShapeMismatch {
                op: "matrix-exp-skew",
                a: v.shape(),
                b: (expected, 1),
            });
        }
        let params = SkewParams::new(dim, v.data().to_vec())?;
        let p = expm_skew(&build_skew(&params))?;
        Ok(self.push(
            Op::MatrixExpSkew { theta, dim },
            p.matrix().clone(),
        ))
    }

    /// Re-binds named inputs and recomputes every cached value in tape order.
    /// Every `Input` node's name must appear in `bindings`.
    pub fn forward(&mut self, bindings: &BTreeMap<String, DenseMatrix>) -> Result<(), GraphError> {
        for idx in 0..self.nodes.len() {
            if let Op::Input { name } = &self.nodes[idx].op {
                let v = bindings
                    .get(name)
                    .ok_or_else(|| GraphError::UnboundInput(name.clone()))?;
                if v.shape() != self.nodes[idx].value.shape() {
                    return Err(GraphError::ShapeMismatch {
                        op: "bind",
                        a: v.shape(),
                        b: self.nodes[idx].value.shape(),
                    });
                }
                self.nodes[idx].value = v.clone();
            }
        }
        self.refresh()
    }

    /// Overwrites the value of an input or parameter node (same shape).
    pub fn set_value(&mut self, id: NodeId, value: DenseMatrix) -> Result<(), GraphError> {
        match self.nodes[id.0].op {
            Op::Input { .. } | Op::Parameter { .. } => {}
            _ => return Err(GraphError::NotBindable),
        }
        if value.shape() != self.nodes[id.0].value.shape() {
            return Err(GraphError::ShapeMismatch {
                op: "set_value",
                a: value.shape(),
                b: self.nodes[id.0].value.shape(),
            });
        }
        self.nodes[id.0].value = value;
        Ok(())
    }

    /// Recomputes every non-leaf value in tape order. The tape is already a
    /// topological order because parents must exist when a node is added.
    pub fn refresh(&mut self) -> Result<(), GraphError> {
        for idx in 0..self.nodes.len() {
            let op = self.nodes[idx].op.clone();
            let value = match op {
                Op::Input { .. } | Op::Parameter { .. } | Op::Constant => continue,
                Op::MatMul(a, b) => self.val(a).matmul(self.val(b))?,
                Op::Add(a, b) => self.val(a).add(self.val(b))?,
                Op::Scale(a, c) => self.val(a).scale(c),
                Op::Relu(a) => {
                    let v = self.val(a);
                    DenseMatrix::from_raw(
                        v.rows(),
                        v.cols(),
                        v.data().iter().map(|x| x.max(0.0)).collect(),
                    )
                }
                Op::L2Normalize(a) => normalize_value(self.val(a)),
                Op::Concat(a, b) => {
                    let mut data = self.val(a).data().to_vec();
                    data.extend_from_slice(self.val(b).data());
                    let rows = data.len();
                    DenseMatrix::from_raw(rows, 1, data)
                }
                Op::Slice { src, start, len } => {
                    let data = self.val(src).data()[start..start + len].to_vec();
                    DenseMatrix::from_raw(len, 1, data)
                }
                Op::Dot(a, b) => {
                    let s: f64 = self
                        .val(a)
                        .data()
                        .iter()
                        .zip(self.val(b).data().iter())
                        .map(|(x, y)| x * y)
                        .sum();
                    DenseMatrix::column(&[s])
                }
                Op::Exp(a) => {
                    let v = self.val(a);
                    DenseMatrix::from_raw(
                        v.rows(),
                        v.cols(),
                        v.data().iter().map(|x| x.exp()).collect(),
                    )
                }
                Op::Log(a) => {
                    let v = self.val(a);
                    DenseMatrix::from_raw(
                        v.rows(),
                        v.cols(),
                        v.data().iter().map(|x| x.ln()).collect(),
                    )
                }
                Op::SoftmaxCrossEntropy { logits, label } => {
                    DenseMatrix::column(&[softmax_ce_value(self.val(logits).data(), label)])
                }
                Op::MatrixExpSkew { theta, dim } => {
                    let params = SkewParams::new(dim, self.val(theta).data().to_vec())?;
                    expm_skew(&build_skew(&params))?.matrix().clone()
                }
            };
            self.nodes[idx].value = value;
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss node; visits the tape once in reverse
    /// topological order and leaves a gradient on every node that influences
    /// the loss. Parameter nodes always end up with a gradient of their own
    /// shape (zero if unused).
    pub fn backward(&mut self, loss: NodeId) -> Result<(), GraphError> {
        if self.val(loss).shape() != (1, 1) {
            return Err(GraphError::NonScalarLoss(self.val(loss).shape()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(DenseMatrix::column(&[1.0]));

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = self.nodes[idx].grad.clone() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Input { .. } | Op::Parameter { .. } | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.val(b).transpose())?;
                    let db = self.val(a).transpose().matmul(&g)?;
                    self.accumulate(a, da)?;
                    self.accumulate(b, db)?;
                }
                Op::Add(a, b) => {
                    self.accumulate(a, g.clone())?;
                    self.accumulate(b, g)?;
                }
                Op::Scale(a, c) => self.accumulate(a, g.scale(c))?,
                Op::Relu(a) => {
                    let v = self.val(a);
                    let data: Vec<f64> = v
                        .data()
                        .iter()
                        .zip(g.data().iter())
                        .map(|(x, gi)| if *x > 0.0 { *gi } else { 0.0 })
                        .collect();
                    let da = DenseMatrix::from_raw(v.rows(), v.cols(), data);
                    self.accumulate(a, da)?;
                }
                Op::L2Normalize(a) => {
                    let x = self.val(a);
                    let norm = crate::linalg::vec_norm(x.data());
                    let da = if norm >= NORMALIZE_EPS {
                        // d(x/||x||) = (G - y (y.G)) / ||x||
                        let y = self.nodes[idx].value.clone();
                        let ydotg = crate::linalg::vec_dot(y.data(), g.data());
                        g.add(&y.scale(-ydotg))?.scale(1.0 / norm)
                    } else {
                        // below the floor the map is x / NORMALIZE_EPS, linear
                        g.scale(1.0 / NORMALIZE_EPS)
                    };
                    self.accumulate(a, da)?;
                }
                Op::Concat(a, b) => {
                    let na = self.val(a).rows();
                    let ga = DenseMatrix::from_raw(na, 1, g.data()[..na].to_vec());
                    let gb =
                        DenseMatrix::from_raw(g.rows() - na, 1, g.data()[na..].to_vec());
                    self.accumulate(a, ga)?;
                    self.accumulate(b, gb)?;
                }
                Op::Slice { src, start, len } => {
                    let mut data = vec![0.0; self.val(src).rows()];
                    data[start..start + len].copy_from_slice(g.data());
                    let rows = data.len();
                    let ds = DenseMatrix::from_raw(rows, 1, data);
                    self.accumulate(src, ds)?;
                }
                Op::Dot(a, b) => {
                    let s = g.at(0, 0);
                    let da = self.val(b).scale(s);
                    let db = self.val(a).scale(s);
                    self.accumulate(a, da)?;
                    self.accumulate(b, db)?;
                }
                Op::Exp(a) => {
                    let y = &self.nodes[idx].value;
                    let data: Vec<f64> = y
                        .data()
                        .iter()
                        .zip(g.data().iter())
                        .map(|(yi, gi)| yi * gi)
                        .collect();
                    let da = DenseMatrix::from_raw(y.rows(), y.cols(), data);
                    self.accumulate(a, da)?;
                }
                Op::Log(a) => {
                    let x = self.val(a);
                    let data: Vec<f64> = x
                        .data()
                        .iter()
                        .zip(g.data().iter())
                        .map(|(xi, gi)| gi / xi)
                        .collect();
                    let da = DenseMatrix::from_raw(x.rows(), x.cols(), data);
                    self.accumulate(a, da)?;
                }
                Op::SoftmaxCrossEntropy { logits, label } => {
                    let s = g.at(0, 0);
                    let probs = softmax(self.val(logits).data());
                    let data: Vec<f64> = probs
                        .iter()
                        .enumerate()
                        .map(|(i, p)| s * (p - if i == label { 1.0 } else { 0.0 }))
                        .collect();
                    let rows = data.len();
                    let dl = DenseMatrix::from_raw(rows, 1, data);
                    self.accumulate(logits, dl)?;
                }
                Op::MatrixExpSkew { theta, dim } => {
                    let params = SkewParams::new(dim, self.val(theta).data().to_vec())?;
                    let a = build_skew(&params);
                    let dlda = expm_frechet_adjoint(&a, &g)?;
                    let gt = theta_gradient(&dlda)?;
                    let dt = DenseMatrix::from_vec(gt.len(), 1, gt)?;
                    self.accumulate(theta, dt)?;
                }
            }
        }

        // every parameter reports a gradient of its own shape
        for idx in 0..self.nodes.len() {
            if let Op::Parameter { .. } = self.nodes[idx].op {
                if self.nodes[idx].grad.is_none() {
                    let (r, c) = self.nodes[idx].value.shape();
                    self.nodes[idx].grad = Some(DenseMatrix::zeros(r, c));
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: DenseMatrix) -> Result<(), GraphError> {
        let node = &mut self.nodes[id.0];
        node.grad = Some(match node.grad.take() {
            Some(g) => g.add(&delta)?,
            None => delta,
        });
        Ok(())
    }

    /// Gradients of all parameter nodes keyed by parameter name; call after
    /// `backward`. Parameters appearing at several nodes accumulate.
    pub fn param_grads(&self) -> Result<ParamMap, GraphError> {
        let mut out = ParamMap::new();
        for node in &self.nodes {
            if let Op::Parameter { key } = &node.op {
                let g = node
                    .grad
                    .clone()
                    .unwrap_or_else(|| DenseMatrix::zeros(node.value.rows(), node.value.cols()));
                match out.remove(key) {
                    Some(prev) => {
                        out.insert(key.clone(), prev.add(&g)?);
                    }
                    None => {
                        out.insert(key.clone(), g);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Parameter node ids by key, for targeted perturbation.
    pub fn parameter_nodes(&self) -> Vec<(String, NodeId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Parameter { key } => Some((key.clone(), NodeId(i))),
                _ => None,
            })
            .collect()
    }
}

fn normalize_value(v: &DenseMatrix) -> DenseMatrix {
    crate::linalg::normalize_with_floor(v, NORMALIZE_EPS)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn softmax_ce_value(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Optimizer family and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    AdaptiveMoments { beta1: f64, beta2: f64, eps: f64 },
}

/// Optimizer state: step count plus per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    step_count: u64,
    moment1: ParamMap,
    moment2: ParamMap,
}

impl OptimizerState {
    pub fn sgd_momentum(learning_rate: f64, momentum: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::SgdMomentum { momentum },
            learning_rate,
            step_count: 0,
            moment1: ParamMap::new(),
            moment2: ParamMap::new(),
        }
    }

    pub fn adaptive_moments(learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::AdaptiveMoments { beta1, beta2, eps },
            learning_rate,
            step_count: 0,
            moment1: ParamMap::new(),
            moment2: ParamMap::new(),
        }
    }

    /// The default training recipe: adaptive moments at lr 1e-3.
    pub fn default_adaptive(learning_rate: f64) -> Self {
        Self::adaptive_moments(learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// Applies one optimizer update. Rejects non-finite gradients, and commits
/// nothing if any updated parameter would be non-finite, so the parameter
/// map always holds the last values that were numerically sound.
pub fn optimizer_step(
    state: &mut OptimizerState,
    params: &mut ParamMap,
    grads: &ParamMap,
) -> Result<(), GraphError> {
    for (key, g) in grads {
        if !g.is_finite() {
            return Err(GraphError::Divergence(key.clone()));
        }
        if let Some(p) = params.get(key) {
            if p.shape() != g.shape() {
                return Err(GraphError::ShapeMismatch {
                    op: "optimizer_step",
                    a: p.shape(),
                    b: g.shape(),
                });
            }
        }
    }
    let t = state.step_count + 1;
    let lr = state.learning_rate;

    // (key, updated param, first moment, optional second moment)
    let mut staged: Vec<(String, DenseMatrix, DenseMatrix, Option<DenseMatrix>)> = Vec::new();
    match state.kind {
        OptimizerKind::SgdMomentum { momentum } => {
            for (key, g) in grads {
                let Some(p) = params.get(key) else { continue };
                let v_prev = state
                    .moment1
                    .get(key)
                    .cloned()
                    .unwrap_or_else(|| DenseMatrix::zeros(g.rows(), g.cols()));
                let v = v_prev.scale(momentum).add(g)?;
                let updated = p.add(&v.scale(-lr))?;
                staged.push((key.clone(), updated, v, None));
            }
        }
        OptimizerKind::AdaptiveMoments { beta1, beta2, eps } => {
            let bc1 = 1.0 - beta1.powi(t as i32);
            let bc2 = 1.0 - beta2.powi(t as i32);
            for (key, g) in grads {
                let Some(p) = params.get(key) else { continue };
                let m_prev = state
                    .moment1
                    .get(key)
                    .cloned()
                    .unwrap_or_else(|| DenseMatrix::zeros(g.rows(), g.cols()));
                let v_prev = state
                    .moment2
                    .get(key)
                    .cloned()
                    .unwrap_or_else(|| DenseMatrix::zeros(g.rows(), g.cols()));
                let m = m_prev.scale(beta1).add(&g.scale(1.0 - beta1))?;
                let g2data: Vec<f64> = g.data().iter().map(|x| x * x).collect();
                let g2 = DenseMatrix::from_vec(g.rows(), g.cols(), g2data)?;
                let v = v_prev.scale(beta2).add(&g2.scale(1.0 - beta2))?;

                let step: Vec<f64> = m
                    .data()
                    .iter()
                    .zip(v.data().iter())
                    .map(|(mi, vi)| {
                        let mh = mi / bc1;
                        let vh = vi / bc2;
                        -lr * mh / (vh.sqrt() + eps)
                    })
                    .collect();
                let delta = DenseMatrix::from_vec(g.rows(), g.cols(), step)?;
                let updated = p.add(&delta)?;
                staged.push((key.clone(), updated, m, Some(v)));
            }
        }
    }

    for (key, updated, _, _) in &staged {
        if !updated.is_finite() {
            return Err(GraphError::Divergence(key.clone()));
        }
    }
    state.step_count = t;
    for (key, updated, m1, m2) in staged {
        state.moment1.insert(key.clone(), m1);
        if let Some(m2) = m2 {
            state.moment2.insert(key.clone(), m2);
        }
        params.insert(key, updated);
    }
    Ok(())
}

/// Central-difference validation of every parameter gradient in the graph.
///
/// Perturbs each parameter coordinate by `step` (subsampling to 200
/// coordinates, seeded, when there are more), replays the tape, and compares
/// against the analytic gradients. The central differences at `step` and
/// `step / 2` are Richardson-combined, which cancels the quadratic
/// truncation term and keeps the oracle sharp even where the loss has
/// strong curvature (for example near a normalization of a small vector).
/// Uses absolute error where the analytic value is below 1e-8 and relative
/// error otherwise; returns the maximum.
pub fn finite_diff_check(
    graph: &mut Graph,
    loss: NodeId,
    step: f64,
    seed: u64,
) -> Result<f64, GraphError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    graph.refresh()?;
    graph.backward(loss)?;

    let params = graph.parameter_nodes();
    let analytic: Vec<DenseMatrix> = params
        .iter()
        .map(|(_, id)| graph.grad(*id).expect("backward populates params").clone())
        .collect();

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pi, (_, id)) in params.iter().enumerate() {
        for ci in 0..graph.value(*id).data().len() {
            coords.push((pi, ci));
        }
    }
    if coords.len() > 200 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(200);
        coords.sort_unstable();
    }

    let mut max_err = 0.0f64;
    for (pi, ci) in coords {
        let (_, id) = params[pi];
        let base = graph.value(id).clone();
        let (r, c) = base.shape();

        let perturb = |delta: f64, g: &mut Graph| -> Result<f64, GraphError> {
            let mut data = base.data().to_vec();
            data[ci] += delta;
            g.set_value(id, DenseMatrix::from_vec(r, c, data)?)?;
            g.refresh()?;
            Ok(g.value(loss).at(0, 0))
        };

        let fd_at = |h: f64, g: &mut Graph| -> Result<f64, GraphError> {
            let lp = perturb(h, g)?;
            let lm = perturb(-h, g)?;
            Ok((lp - lm) / (2.0 * h))
        };

        let d_full = fd_at(step, graph)?;
        let d_half = fd_at(step / 2.0, graph)?;
        graph.set_value(id, base)?;
        let fd = (4.0 * d_half - d_full) / 3.0;

        let a = analytic[pi].data()[ci];
        let err = if a.abs() < 1e-8 {
            (fd - a).abs()
        } else {
            (fd - a).abs() / a.abs()
        };
        max_err = max_err.max(err);
    }
    graph.refresh()?;
    Ok(max_err)
}
