//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! The engine is a classic gradient tape: every differentiable operation is a
//! method on [`Tape`] that computes the forward value and appends one node to
//! an append-only list. [`Tape::backward`] walks the node list once in
//! reverse, accumulating vector-Jacobian products into per-node gradient
//! buffers.
//!
//! Design points that matter for reproducibility:
//!
//! * Tensor element order is row-major and all reductions (sums, dot
//!   products, matrix products, norms) accumulate strictly in ascending
//!   index order, so results are bitwise identical across runs and across
//!   thread counts.
//! * Tensors are immutable value types with shared storage (`Arc`), so
//!   recording an operand on the tape never copies its data. A tensor only
//!   participates in differentiation after it has been registered with
//!   [`Tape::leaf`]; tensors without a node id act as constants and receive
//!   no gradient buffer, which keeps frozen model weights cheap during
//!   attack loops.
//! * Gradient accumulation order is fixed by node order, never by hash maps
//!   or threads.

use std::cell::RefCell;
use std::sync::Arc;

use thiserror::Error;

/// Domain floor below which vector norms are rejected rather than
/// regularised. Dividing by anything smaller would amplify noise past the
/// point where gradients mean anything, so it is a hard error.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({lhs:?} vs {rhs:?})")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported rank for shape {shape:?}")]
    UnsupportedRank { op: &'static str, shape: Vec<usize> },
    #[error("{op}: {count} elements do not fit shape {shape:?}")]
    BadElementCount {
        op: &'static str,
        count: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: vector norm {norm:e} is below the {floor:e} domain floor")]
    DegenerateNorm {
        op: &'static str,
        norm: f64,
        floor: f64,
    },
    #[error("softmax_cross_entropy: class {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("backward: root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward: root tensor is not attached to a tape")]
    DetachedRoot,
}

pub type NodeId = usize;

/// A dense row-major tensor of `f64` values.
///
/// Cloning is cheap (shared storage). `node` is `Some` only for tensors
/// produced by a [`Tape`]; such tensors must only be combined with tensors
/// from the same tape.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::BadElementCount {
                op: "from_vec",
                count: data.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
            node: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::from_vec(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; n]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Scalar value of a single-element tensor.
    ///
    /// Panics if the tensor has more than one element; use only on outputs of
    /// scalar-producing ops.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    /// Same data under a new shape. The result is detached from any tape.
    pub fn with_shape(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != self.len() {
            return Err(TensorError::BadElementCount {
                op: "with_shape",
                count: self.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
            node: None,
        })
    }

    fn from_parts(shape: Vec<usize>, data: Vec<f64>, node: Option<NodeId>) -> Self {
        Tensor {
            shape,
            data: Arc::new(data),
            node,
        }
    }
}

/// One recorded operation. Operand tensors are stored as cheap clones; the
/// small scalars cached at forward time (norms, softmax probabilities, ...)
/// are exactly the values the backward pass reuses, so forward and backward
/// always agree bitwise.
enum Op {
    Leaf,
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    ScalarMul { a: Tensor, k: f64 },
    MatMul { a: Tensor, b: Tensor },
    Relu { a: Tensor },
    Sigmoid { a: Tensor, out: Arc<Vec<f64>> },
    L2Normalize { a: Tensor, norms: Vec<f64> },
    Dot { a: Tensor, b: Tensor },
    Sum { a: Tensor },
    Mean { a: Tensor },
    BceWithLogits { logits: Tensor, targets: Tensor },
    SoftmaxCrossEntropy { logits: Tensor, probs: Vec<f64>, class: usize },
    CosineSimilarity { a: Tensor, b: Tensor, na: f64, nb: f64, denom: f64, cos: f64 },
}

/// Gradient tape. Create one per differentiated computation; ops append
/// nodes, [`Tape::backward`] consumes the recorded graph (the tape can be
/// replayed — backward does not mutate it).
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Op>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `t`.
    ///
    /// Returns `None` if `t` never went through the tape (a constant).
    /// Tensors that are on the tape but not reachable from the root get a
    /// zero gradient.
    pub fn wrt(&self, t: &Tensor) -> Option<Tensor> {
        let id = t.node?;
        let data = match self.grads.get(id) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; t.len()],
        };
        Some(Tensor::from_parts(t.shape.clone(), data, None))
    }
}

#[inline]
fn sigmoid_scalar(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, op: Op) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(op);
        nodes.len() - 1
    }

    /// Node id for the result of an op, or `None` when no operand is tracked
    /// (pure constant computation stays off the tape entirely).
    fn track(&self, operands: &[&Tensor], op: impl FnOnce() -> Op) -> Option<NodeId> {
        if operands.iter().any(|t| t.node.is_some()) {
            Some(self.push(op()))
        } else {
            None
        }
    }

    /// Registers `t` as a differentiable leaf and returns the tracked copy.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let id = self.push(Op::Leaf);
        Tensor {
            shape: t.shape.clone(),
            data: Arc::clone(&t.data),
            node: Some(id),
        }
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        same_shape("add", a, b)?;
        let data: Vec<f64> = a.data.iter().zip(b.data.iter()).map(|(x, y)| x + y).collect();
        let node = self.track(&[a, b], || Op::Add { a: a.clone(), b: b.clone() });
        Ok(Tensor::from_parts(a.shape.clone(), data, node))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        same_shape("sub", a, b)?;
        let data: Vec<f64> = a.data.iter().zip(b.data.iter()).map(|(x, y)| x - y).collect();
        let node = self.track(&[a, b], || Op::Sub { a: a.clone(), b: b.clone() });
        Ok(Tensor::from_parts(a.shape.clone(), data, node))
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        same_shape("mul", a, b)?;
        let data: Vec<f64> = a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).collect();
        let node = self.track(&[a, b], || Op::Mul { a: a.clone(), b: b.clone() });
        Ok(Tensor::from_parts(a.shape.clone(), data, node))
    }

    pub fn scalar_mul(&self, a: &Tensor, k: f64) -> Result<Tensor, TensorError> {
        let data: Vec<f64> = a.data.iter().map(|x| x * k).collect();
        let node = self.track(&[a], || Op::ScalarMul { a: a.clone(), k });
        Ok(Tensor::from_parts(a.shape.clone(), data, node))
    }

    /// Matrix product. `a` must be rank 2 `[m, n]`; `b` is either rank 2
    /// `[n, p]` (result `[m, p]`) or rank 1 `[n]` (result `[m]`).
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.rank() != 2 {
            return Err(TensorError::UnsupportedRank { op: "matmul", shape: a.shape.clone() });
        }
        let (m, n) = (a.shape[0], a.shape[1]);
        let (data, shape) = match b.rank() {
            1 => {
                if b.shape[0] != n {
                    return Err(mismatch("matmul", a, b));
                }
                let mut out = vec![0.0; m];
                for i in 0..m {
                    let row = &a.data[i * n..(i + 1) * n];
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += row[k] * b.data[k];
                    }
                    out[i] = acc;
                }
                (out, vec![m])
            }
            2 => {
                if b.shape[0] != n {
                    return Err(mismatch("matmul", a, b));
                }
                let p = b.shape[1];
                let mut out = vec![0.0; m * p];
                for i in 0..m {
                    for j in 0..p {
                        let mut acc = 0.0;
                        for k in 0..n {
                            acc += a.data[i * n + k] * b.data[k * p + j];
                        }
                        out[i * p + j] = acc;
                    }
                }
                (out, vec![m, p])
            }
            _ => {
                return Err(TensorError::UnsupportedRank { op: "matmul", shape: b.shape.clone() })
            }
        };
        let node = self.track(&[a, b], || Op::MatMul { a: a.clone(), b: b.clone() });
        Ok(Tensor::from_parts(shape, data, node))
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        let data: Vec<f64> = a.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let node = self.track(&[a], || Op::Relu { a: a.clone() });
        Ok(Tensor::from_parts(a.shape.clone(), data, node))
    }

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        let out = Arc::new(a.data.iter().map(|&z| sigmoid_scalar(z)).collect::<Vec<f64>>());
        let node = self.track(&[a], || Op::Sigmoid { a: a.clone(), out: Arc::clone(&out) });
        Ok(Tensor {
            shape: a.shape.clone(),
            data: out,
            node,
        })
    }

    /// L2 normalisation along the last axis (whole vector for rank 1, each
    /// row for rank 2). Rows with norm below [`NORM_FLOOR`] are a hard error.
    pub fn l2_normalize(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        let (rows, cols) = match a.rank() {
            1 => (1, a.shape[0]),
            2 => (a.shape[0], a.shape[1]),
            _ => {
                return Err(TensorError::UnsupportedRank {
                    op: "l2_normalize",
                    shape: a.shape.clone(),
                })
            }
        };
        let mut norms = vec![0.0; rows];
        let mut data = vec![0.0; a.len()];
        for r in 0..rows {
            let row = &a.data[r * cols..(r + 1) * cols];
            let mut ss = 0.0;
            for &x in row {
                ss += x * x;
            }
            let norm = ss.sqrt();
            if norm < NORM_FLOOR {
                return Err(TensorError::DegenerateNorm {
                    op: "l2_normalize",
                    norm,
                    floor: NORM_FLOOR,
                });
            }
            norms[r] = norm;
            for c in 0..cols {
                data[r * cols + c] = row[c] / norm;
            }
        }
        let node = self.track(&[a], || Op::L2Normalize { a: a.clone(), norms });
        Ok(Tensor::from_parts(a.shape.clone(), data, node))
    }

    pub fn dot(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        rank1("dot", a)?;
        same_shape("dot", a, b)?;
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += a.data[i] * b.data[i];
        }
        let node = self.track(&[a, b], || Op::Dot { a: a.clone(), b: b.clone() });
        Ok(Tensor::from_parts(vec![1], vec![acc], node))
    }

    pub fn sum(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        let mut acc = 0.0;
        for &x in a.data.iter() {
            acc += x;
        }
        let node = self.track(&[a], || Op::Sum { a: a.clone() });
        Ok(Tensor::from_parts(vec![1], vec![acc], node))
    }

    pub fn mean(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        if a.is_empty() {
            return Err(TensorError::BadElementCount {
                op: "mean",
                count: 0,
                shape: a.shape.clone(),
            });
        }
        let mut acc = 0.0;
        for &x in a.data.iter() {
            acc += x;
        }
        let v = acc / a.len() as f64;
        let node = self.track(&[a], || Op::Mean { a: a.clone() });
        Ok(Tensor::from_parts(vec![1], vec![v], node))
    }

    /// Mean binary cross-entropy on logits, computed in the numerically
    /// stable form `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&self, logits: &Tensor, targets: &Tensor) -> Result<Tensor, TensorError> {
        same_shape("bce_with_logits", logits, targets)?;
        if logits.is_empty() {
            return Err(TensorError::BadElementCount {
                op: "bce_with_logits",
                count: 0,
                shape: logits.shape.clone(),
            });
        }
        let n = logits.len() as f64;
        let mut acc = 0.0;
        for i in 0..logits.len() {
            let z = logits.data[i];
            let y = targets.data[i];
            let zpos = if z > 0.0 { z } else { 0.0 };
            acc += zpos - z * y + (-z.abs()).exp().ln_1p();
        }
        let v = acc / n;
        let node = self.track(&[logits, targets], || Op::BceWithLogits {
            logits: logits.clone(),
            targets: targets.clone(),
        });
        Ok(Tensor::from_parts(vec![1], vec![v], node))
    }

    /// Cross-entropy of a softmax over rank-1 logits against a class index,
    /// computed via the log-sum-exp trick.
    pub fn softmax_cross_entropy(&self, logits: &Tensor, class: usize) -> Result<Tensor, TensorError> {
        rank1("softmax_cross_entropy", logits)?;
        if class >= logits.len() {
            return Err(TensorError::ClassOutOfRange {
                index: class,
                classes: logits.len(),
            });
        }
        let mut maxz = f64::NEG_INFINITY;
        for &z in logits.data.iter() {
            if z > maxz {
                maxz = z;
            }
        }
        let mut sum = 0.0;
        let mut probs = vec![0.0; logits.len()];
        for i in 0..logits.len() {
            let e = (logits.data[i] - maxz).exp();
            probs[i] = e;
            sum += e;
        }
        for p in probs.iter_mut() {
            *p /= sum;
        }
        let loss = sum.ln() + maxz - logits.data[class];
        let node = self.track(&[logits], || Op::SoftmaxCrossEntropy {
            logits: logits.clone(),
            probs,
            class,
        });
        Ok(Tensor::from_parts(vec![1], vec![loss], node))
    }

    /// Cosine similarity of two rank-1 tensors as a single fused op with
    /// analytic gradients. Norms below [`NORM_FLOOR`] are a hard error.
    pub fn cosine_similarity(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        rank1("cosine_similarity", a)?;
        same_shape("cosine_similarity", a, b)?;
        let mut ssa = 0.0;
        let mut ssb = 0.0;
        let mut dot = 0.0;
        for i in 0..a.len() {
            ssa += a.data[i] * a.data[i];
            ssb += b.data[i] * b.data[i];
            dot += a.data[i] * b.data[i];
        }
        let na = ssa.sqrt();
        let nb = ssb.sqrt();
        let smallest = if na < nb { na } else { nb };
        if smallest < NORM_FLOOR {
            return Err(TensorError::DegenerateNorm {
                op: "cosine_similarity",
                norm: smallest,
                floor: NORM_FLOOR,
            });
        }
        let denom = na * nb;
        let cos = dot / denom;
        let node = self.track(&[a, b], || Op::CosineSimilarity {
            a: a.clone(),
            b: b.clone(),
            na,
            nb,
            denom,
            cos,
        });
        Ok(Tensor::from_parts(vec![1], vec![cos], node))
    }

    /// Reverse pass from a scalar root. Visits each recorded node exactly
    /// once in strictly decreasing id order, so gradient accumulation order
    /// is deterministic.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients, TensorError> {
        let root_id = root.node.ok_or(TensorError::DetachedRoot)?;
        if root.len() != 1 {
            return Err(TensorError::NonScalarRoot { shape: root.shape.clone() });
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root_id] = Some(vec![1.0]);

        for id in (0..=root_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &nodes[id] {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    if let Some(ga) = grad_buf(&mut grads, a) {
                        for i in 0..g.len() {
                            ga[i] += g[i];
                        }
                    }
                    if let Some(gb) = grad_buf(&mut grads, b) {
                        for i in 0..g.len() {
                            gb[i] += g[i];
                        }
                    }
                }
                Op::Sub { a, b } => {
                    if let Some(ga) = grad_buf(&mut grads, a) {
                        for i in 0..g.len() {
                            ga[i] += g[i];
                        }
                    }
                    if let Some(gb) = grad_buf(&mut grads, b) {
                        for i in 0..g.len() {
                            gb[i] -= g[i];
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if let Some(ga) = grad_buf(&mut grads, a) {
                        for i in 0..g.len() {
                            ga[i] += g[i] * b.data[i];
                        }
                    }
                    if let Some(gb) = grad_buf(&mut grads, b) {
                        for i in 0..g.len() {
                            gb[i] += g[i] * a.data[i];
                        }
                    }
                }
                Op::ScalarMul { a, k } => {
                    if let Some(ga) = grad_buf(&mut grads, a) {
                        for i in 0..g.len() {
                            ga[i] += g[i] * k;
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, n) = (a.shape[0], a.shape[1]);
                    if b.rank() == 1 {
                        if let Some(ga) = grad_buf(&mut grads, a) {
                            for i in 0..m {
                                for k in 0..n {
                                    ga[i * n + k] += g[i] * b.data[k];
                                }
                            }
                        }
                        if let Some(gb) = grad_buf(&mut grads, b) {
                            for k in 0..n {
                                let mut acc = 0.0;
                                for i in 0..m {
                                    acc += a.data[i * n + k] * g[i];
                                }
                                gb[k] += acc;
                            }
                        }
                    } else {
                        let p = b.shape[1];
                        if let Some(ga) = grad_buf(&mut grads, a) {
                            for i in 0..m {
                                for k in 0..n {
                                    let mut acc = 0.0;
                                    for j in 0..p {
                                        acc += g[i * p + j] * b.data[k * p + j];
                                    }
                                    ga[i * n + k] += acc;
                                }
                            }
                        }
                        if let Some(gb) = grad_buf(&mut grads, b) {
                            for k in 0..n {
                                for j in 0..p {
                                    let mut acc = 0.0;
                                    for i in 0..m {
                                        acc += a.data[i * n + k] * g[i * p + j];
                                    }
                                    gb[k * p + j] += acc;
                                }
                            }
                        }
                    }
                }
                Op::Relu { a } => {
                    if let Some(ga) = grad_buf(&mut grads, a) {
                        for i in 0..g.len() {
                            if a.data[i] > 0.0 {
                                ga[i] += g[i];
                            }
                        }
                    }
                }
                Op::Sigmoid { a, out } => {
                    if let Some(ga) = grad_buf(&mut grads, a) {
                        for i in 0..g.len() {
                            let s = out[i];
                            ga[i] += g[i] * s * (1.0 - s);
                        }
                    }
                }
                Op::L2Normalize { a, norms } => {
                    if let Some(ga) = grad_buf(&mut grads, a) {
                        let cols = a.len() / norms.len();
                        for (r, &norm) in norms.iter().enumerate() {
                            let base = r * cols;
                            let mut s = 0.0;
                            for c in 0..cols {
                                s += g[base + c] * (a.data[base + c] / norm);
                            }
                            for c in 0..cols {
                                let y = a.data[base + c] / norm;
                                ga[base + c] += (g[base + c] - y * s) / norm;
                            }
                        }
                    }
                }
                Op::Dot { a, b } => {
                    let g0 = g[0];
                    if let Some(ga) = grad_buf(&mut grads, a) {
                        for i in 0..a.len() {
                            ga[i] += g0 * b.data[i];
                        }
                    }
                    if let Some(gb) = grad_buf(&mut grads, b) {
                        for i in 0..b.len() {
                            gb[i] += g0 * a.data[i];
                        }
                    }
                }
                Op::Sum { a } => {
                    let g0 = g[0];
                    if let Some(ga) = grad_buf(&mut grads, a) {
                        for v in ga.iter_mut() {
                            *v += g0;
                        }
                    }
                }
                Op::Mean { a } => {
                    let g0 = g[0];
                    let n = a.len() as f64;
                    if let Some(ga) = grad_buf(&mut grads, a) {
                        for v in ga.iter_mut() {
                            *v += g0 / n;
                        }
                    }
                }
                Op::BceWithLogits { logits, targets } => {
                    let g0 = g[0];
                    let n = logits.len() as f64;
                    if let Some(gz) = grad_buf(&mut grads, logits) {
                        for i in 0..logits.len() {
                            let s = sigmoid_scalar(logits.data[i]);
                            gz[i] += g0 * ((s - targets.data[i]) / n);
                        }
                    }
                    if let Some(gy) = grad_buf(&mut grads, targets) {
                        for i in 0..targets.len() {
                            gy[i] += g0 * (-logits.data[i] / n);
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, probs, class } => {
                    let g0 = g[0];
                    if let Some(gz) = grad_buf(&mut grads, logits) {
                        for i in 0..probs.len() {
                            let ind = if i == *class { 1.0 } else { 0.0 };
                            gz[i] += g0 * (probs[i] - ind);
                        }
                    }
                }
                Op::CosineSimilarity { a, b, na, nb, denom, cos } => {
                    let g0 = g[0];
                    if let Some(ga) = grad_buf(&mut grads, a) {
                        for i in 0..a.len() {
                            ga[i] += g0 * (b.data[i] / denom - cos * a.data[i] / (na * na));
                        }
                    }
                    if let Some(gb) = grad_buf(&mut grads, b) {
                        for i in 0..b.len() {
                            gb[i] += g0 * (a.data[i] / denom - cos * b.data[i] / (nb * nb));
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn grad_buf<'a>(grads: &'a mut [Option<Vec<f64>>], t: &Tensor) -> Option<&'a mut Vec<f64>> {
    let id = t.node?;
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(vec![0.0; t.len()]);
    }
    slot.as_mut()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape != b.shape {
        return Err(mismatch(op, a, b));
    }
    Ok(())
}

fn rank1(op: &'static str, t: &Tensor) -> Result<(), TensorError> {
    if t.rank() != 1 {
        return Err(TensorError::UnsupportedRank { op, shape: t.shape.clone() });
    }
    Ok(())
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

/// A scalar-valued differentiable function of one tensor, as accepted by
/// [`finite_diff_check`]: the function receives a tape plus the leaf-
/// registered input and returns the scalar output tensor.
pub type ScalarFn<'f> = dyn Fn(&Tape, &Tensor) -> Result<Tensor, TensorError> + 'f;

/// Compares the analytic gradient of `f` at `x` against central finite
/// differences over the given coordinates. Returns the maximum relative
/// error `|analytic - numeric| / (|analytic| + 1e-8)`.
pub fn finite_diff_check_coords(
    f: &ScalarFn,
    x: &Tensor,
    step: f64,
    coords: &[usize],
) -> Result<f64, TensorError> {
    let tape = Tape::new();
    let leaf = tape.leaf(x);
    let out = f(&tape, &leaf)?;
    let grads = tape.backward(&out)?;
    let analytic = grads.wrt(&leaf).expect("leaf is on the tape");

    let eval = |data: Vec<f64>| -> Result<f64, TensorError> {
        let probe = Tensor::from_parts(x.shape.clone(), data, None);
        let t = Tape::new();
        let leaf = t.leaf(&probe);
        Ok(f(&t, &leaf)?.item())
    };

    let mut max_err = 0.0f64;
    for &i in coords {
        let mut plus = x.to_vec();
        plus[i] += step;
        let mut minus = x.to_vec();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + 1e-8);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

/// [`finite_diff_check_coords`] over every coordinate of `x`.
pub fn finite_diff_check(f: &ScalarFn, x: &Tensor, step: f64) -> Result<f64, TensorError> {
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_coords(f, x, step, &coords)
}
