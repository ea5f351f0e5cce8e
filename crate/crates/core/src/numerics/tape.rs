//! Reverse-mode gradient tape.
//!
//! Operations are recorded eagerly: each call computes the forward value,
//! checks it for non-finite entries (which abort with the producing op's
//! name), and pushes a node whose backward rule is replayed by
//! [`Tape::backward`]. A tape is confined to one thread per training step;
//! the tensors it produces are immutable values.

use std::collections::BTreeMap;

use super::{
    gelu_grad_kernel, gelu_kernel, matmul_kernel, softmax_rows_kernel, NumericsError, Result,
    Scalar, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter set with deterministic iteration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<S>) {
        self.map.insert(name.to_string(), tensor.with_grad());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// Set requires_grad on every parameter whose name matches the predicate.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, t) in self.map.iter_mut() {
            t.set_requires_grad(pred(name));
        }
    }
}

enum Op<S> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRow { a: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: S },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
    GatherRows { a: NodeId, ids: Vec<usize> },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, len: usize },
    Softmax { a: NodeId, temp: S, mask: Option<Vec<bool>> },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Gelu { a: NodeId },
    Relu { a: NodeId },
    RowNorms { a: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<Option<usize>> },
    CosineSim { a: NodeId, b: NodeId },
    SumAll { a: NodeId },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

const LN_EPS: f64 = 1e-5;

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<String, NodeId>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: BTreeMap::new(), grad_enabled: true }
    }

    /// A tape that records values only; every node is grad-free. Used for
    /// evaluation passes.
    pub fn no_grad() -> Self {
        Tape { nodes: Vec::new(), params: BTreeMap::new(), grad_enabled: false }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>, rg: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, requires_grad: rg && self.grad_enabled });
        Ok(id)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: Tensor<S>) -> Result<NodeId> {
        let rg = t.requires_grad();
        self.push("leaf", t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Result<NodeId> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Register a named parameter leaf; its gradient is retrievable by name.
    /// Repeated registration under one name returns the existing node, so a
    /// parameter used many times in a graph accumulates into one gradient.
    pub fn param(&mut self, name: &str, t: &Tensor<S>) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let id = self.leaf(t.clone())?;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    // ── Forward operations ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(NumericsError::Dimension {
                op: "matmul",
                detail: format!("{:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = matmul_kernel(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::from_vec(vec![m, n], out)?, Op::Matmul { a, b }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(NumericsError::Dimension {
                op: "add",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push("add", Tensor::from_vec(shape, data)?, Op::Add { a, b }, rg)
    }

    /// Broadcast a length-n bias over the rows of an (m, n) tensor.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        if ta.shape().len() != 2 || tb.len() != ta.cols() {
            return Err(NumericsError::Dimension {
                op: "add_row",
                detail: format!("{:?} + {:?}", ta.shape(), tb.shape()),
            });
        }
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += tb.data()[j];
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push("add_row", Tensor::from_vec(vec![m, n], data)?, Op::AddRow { a, bias }, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(NumericsError::Dimension {
                op: "mul",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", Tensor::from_vec(shape, data)?, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| x * c).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.push("scale", Tensor::from_vec(shape, data)?, Op::Scale { a, c }, rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        if ta.shape().len() != 2 {
            return Err(NumericsError::Dimension {
                op: "transpose",
                detail: format!("{:?}", ta.shape()),
            });
        }
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data()[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push("transpose", Tensor::from_vec(vec![n, m], out)?, Op::Transpose { a }, rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let numel: usize = shape.iter().product();
        if numel != ta.len() {
            return Err(NumericsError::Dimension {
                op: "reshape",
                detail: format!("{:?} -> {:?}", ta.shape(), shape),
            });
        }
        let data = ta.data().to_vec();
        let rg = self.rg(a);
        self.push("reshape", Tensor::from_vec(shape, data)?, Op::Reshape { a }, rg)
    }

    /// Row lookup (embedding gather). Duplicate ids accumulate gradient.
    pub fn gather_rows(&mut self, a: NodeId, ids: &[usize]) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        if ta.shape().len() != 2 {
            return Err(NumericsError::Dimension {
                op: "gather_rows",
                detail: format!("{:?}", ta.shape()),
            });
        }
        let (m, n) = (ta.rows(), ta.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
            return Err(NumericsError::Dimension {
                op: "gather_rows",
                detail: format!("row id {} out of range (rows={})", bad, m),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            out.extend_from_slice(&ta.data()[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        self.push(
            "gather_rows",
            Tensor::from_vec(vec![ids.len(), n], out)?,
            Op::GatherRows { a, ids: ids.to_vec() },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(NumericsError::Dimension { op: "concat_rows", detail: "no parts".into() });
        }
        let n = self.nodes[parts[0].0].value.cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape().len() != 2 || t.cols() != n {
                return Err(NumericsError::Dimension {
                    op: "concat_rows",
                    detail: format!("{:?} with cols {}", t.shape(), n),
                });
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            "concat_rows",
            Tensor::from_vec(vec![rows, n], out)?,
            Op::ConcatRows { parts: parts.to_vec() },
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(NumericsError::Dimension { op: "concat_cols", detail: "no parts".into() });
        }
        let m = self.nodes[parts[0].0].value.rows();
        let mut cols = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape().len() != 2 || t.rows() != m {
                return Err(NumericsError::Dimension {
                    op: "concat_cols",
                    detail: format!("{:?} with rows {}", t.shape(), m),
                });
            }
            cols += t.cols();
        }
        let mut out = Vec::with_capacity(m * cols);
        for r in 0..m {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                out.extend_from_slice(t.row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            "concat_cols",
            Tensor::from_vec(vec![m, cols], out)?,
            Op::ConcatCols { parts: parts.to_vec() },
            rg,
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        if ta.shape().len() != 2 || start + len > ta.cols() {
            return Err(NumericsError::Dimension {
                op: "slice_cols",
                detail: format!("cols {}..{} of {:?}", start, start + len, ta.shape()),
            });
        }
        let m = ta.rows();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            let row = ta.row(r);
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(
            "slice_cols",
            Tensor::from_vec(vec![m, len], out)?,
            Op::SliceCols { a, start, len },
            rg,
        )
    }

    /// Row-wise softmax with temperature; `mask[j] = true` removes column j
    /// from every row's normalization (it gets weight 0).
    pub fn softmax(&mut self, a: NodeId, temp: S, mask: Option<Vec<bool>>) -> Result<NodeId> {
        if temp <= S::zero() {
            return Err(NumericsError::Parameter {
                op: "softmax",
                detail: format!("temperature must be > 0, got {}", temp),
            });
        }
        let ta = &self.nodes[a.0].value;
        if ta.shape().len() != 2 {
            return Err(NumericsError::Dimension {
                op: "softmax",
                detail: format!("{:?}", ta.shape()),
            });
        }
        if let Some(m) = &mask {
            if m.len() != ta.cols() {
                return Err(NumericsError::Dimension {
                    op: "softmax",
                    detail: format!("mask len {} vs cols {}", m.len(), ta.cols()),
                });
            }
            if m.iter().all(|&x| x) {
                return Err(NumericsError::DegenerateInput {
                    op: "softmax",
                    detail: "all columns masked".into(),
                });
            }
        }
        let out = softmax_rows_kernel(ta.data(), ta.rows(), ta.cols(), temp, mask.as_deref());
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.push("softmax", Tensor::from_vec(shape, out)?, Op::Softmax { a, temp, mask }, rg)
    }

    /// Per-row layer normalization with learned gain/bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (tx, tg, tb) =
            (&self.nodes[x.0].value, &self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if tx.shape().len() != 2 || tg.len() != tx.cols() || tb.len() != tx.cols() {
            return Err(NumericsError::Dimension {
                op: "layer_norm",
                detail: format!("x {:?}, gamma {:?}, beta {:?}", tx.shape(), tg.shape(), tb.shape()),
            });
        }
        let (m, n) = (tx.rows(), tx.cols());
        let eps = S::from_f64(LN_EPS);
        let nf = S::from_f64(n as f64);
        let mut out = vec![S::zero(); m * n];
        for r in 0..m {
            let row = tx.row(r);
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) / nf;
            let var = row.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
            let inv = S::one() / (var + eps).sqrt();
            for j in 0..n {
                out[r * n + j] = (row[j] - mean) * inv * tg.data()[j] + tb.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            "layer_norm",
            Tensor::from_vec(vec![m, n], out)?,
            Op::LayerNorm { x, gamma, beta },
            rg,
        )
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| gelu_kernel(x)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.push("gelu", Tensor::from_vec(shape, data)?, Op::Gelu { a }, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| if x > S::zero() { x } else { S::zero() }).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.push("relu", Tensor::from_vec(shape, data)?, Op::Relu { a }, rg)
    }

    /// L2 norm of every row; (m, n) -> (m, 1).
    pub fn row_norms(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        if ta.shape().len() != 2 {
            return Err(NumericsError::Dimension {
                op: "row_norms",
                detail: format!("{:?}", ta.shape()),
            });
        }
        let m = ta.rows();
        let data: Vec<S> =
            (0..m).map(|r| ta.row(r).iter().fold(S::zero(), |acc, &v| acc + v * v).sqrt()).collect();
        let rg = self.rg(a);
        self.push("row_norms", Tensor::from_vec(vec![m, 1], data)?, Op::RowNorms { a }, rg)
    }

    /// Mean cross-entropy over the rows that carry a target; rows with
    /// `None` are ignored. Errors when no row has a target.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
        let tl = &self.nodes[logits.0].value;
        if tl.shape().len() != 2 || targets.len() != tl.rows() {
            return Err(NumericsError::Dimension {
                op: "cross_entropy",
                detail: format!("logits {:?}, targets {}", tl.shape(), targets.len()),
            });
        }
        let v = tl.cols();
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(NumericsError::DegenerateInput {
                op: "cross_entropy",
                detail: "zero masked positions".into(),
            });
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(NumericsError::Dimension {
                op: "cross_entropy",
                detail: format!("target {} out of range (classes={})", bad, v),
            });
        }
        let mut total = S::zero();
        for (r, tgt) in targets.iter().enumerate() {
            if let Some(t) = tgt {
                let row = tl.row(r);
                let mx = row.iter().fold(S::neg_infinity(), |a, &x| if x > a { x } else { a });
                let lse = row.iter().fold(S::zero(), |a, &x| a + (x - mx).exp()).ln() + mx;
                total += lse - row[*t];
            }
        }
        let loss = total / S::from_f64(count as f64);
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            rg,
        )
    }

    /// Cosine similarity of two tensors viewed as flat vectors; scalar output.
    pub fn cosine_sim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.len() != tb.len() || ta.is_empty() {
            return Err(NumericsError::Dimension {
                op: "cosine_sim",
                detail: format!("lengths {} vs {}", ta.len(), tb.len()),
            });
        }
        let na = super::l2_norm(ta.data());
        let nb = super::l2_norm(tb.data());
        if na == S::zero() || nb == S::zero() {
            return Err(NumericsError::DegenerateInput {
                op: "cosine_sim",
                detail: "zero-norm embedding".into(),
            });
        }
        let dot = ta.data().iter().zip(tb.data()).fold(S::zero(), |acc, (&x, &y)| acc + x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push("cosine_sim", Tensor::scalar(dot / (na * nb)), Op::CosineSim { a, b }, rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let s = ta.data().iter().fold(S::zero(), |acc, &v| acc + v);
        let rg = self.rg(a);
        self.push("sum_all", Tensor::scalar(s), Op::SumAll { a }, rg)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Replay the tape in reverse from a scalar loss node. Returns one
    /// gradient (same shape) per requires-grad node on the path.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(NumericsError::Dimension {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", lt.shape()),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(NumericsError::Evaluation {
                op: "backward",
                detail: "loss does not require grad".into(),
            });
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(up) = grads[idx].take() else { continue };
            self.accumulate(idx, &up, &mut grads);
            grads[idx] = Some(up);
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (idx, g) in grads.into_iter().enumerate() {
            out.push(g.map(|d| Tensor {
                shape: self.nodes[idx].value.shape().to_vec(),
                data: d,
                requires_grad: false,
            }));
        }
        Ok(Gradients { grads: out, params: self.params.clone() })
    }

    fn add_into(&self, grads: &mut [Option<Vec<S>>], id: NodeId, delta: &[S]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(delta) {
                    *gi += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn accumulate(&self, idx: usize, up: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(*a) {
                    // dA = dC @ B^T
                    let mut da = vec![S::zero(); m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = S::zero();
                            for j in 0..n {
                                s += up[i * n + j] * tb.data()[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    self.add_into(grads, *a, &da);
                }
                if self.rg(*b) {
                    // dB = A^T @ dC
                    let mut db = vec![S::zero(); k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let av = ta.data()[i * k + p];
                            if av == S::zero() {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * up[i * n + j];
                            }
                        }
                    }
                    self.add_into(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                self.add_into(grads, *a, up);
                self.add_into(grads, *b, up);
            }
            Op::AddRow { a, bias } => {
                self.add_into(grads, *a, up);
                if self.rg(*bias) {
                    let n = self.nodes[bias.0].value.len();
                    let m = up.len() / n;
                    let mut db = vec![S::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += up[i * n + j];
                        }
                    }
                    self.add_into(grads, *bias, &db);
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let tb = &self.nodes[b.0].value;
                    let da: Vec<S> = up.iter().zip(tb.data()).map(|(&u, &y)| u * y).collect();
                    self.add_into(grads, *a, &da);
                }
                if self.rg(*b) {
                    let ta = &self.nodes[a.0].value;
                    let db: Vec<S> = up.iter().zip(ta.data()).map(|(&u, &x)| u * x).collect();
                    self.add_into(grads, *b, &db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<S> = up.iter().map(|&u| u * *c).collect();
                self.add_into(grads, *a, &da);
            }
            Op::Transpose { a } => {
                let ta = &self.nodes[a.0].value;
                let (m, n) = (ta.rows(), ta.cols());
                let mut da = vec![S::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = up[j * m + i];
                    }
                }
                self.add_into(grads, *a, &da);
            }
            Op::Reshape { a } => {
                self.add_into(grads, *a, up);
            }
            Op::GatherRows { a, ids } => {
                let ta = &self.nodes[a.0].value;
                let (m, n) = (ta.rows(), ta.cols());
                let mut da = vec![S::zero(); m * n];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..n {
                        da[i * n + j] += up[r * n + j];
                    }
                }
                self.add_into(grads, *a, &da);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let t = &self.nodes[p.0].value;
                    let chunk = t.len();
                    self.add_into(grads, p, &up[offset..offset + chunk]);
                    offset += chunk;
                }
            }
            Op::ConcatCols { parts } => {
                let m = self.nodes[parts[0].0].value.rows();
                let total: usize = parts.iter().map(|&p| self.nodes[p.0].value.cols()).sum();
                let mut offset = 0;
                for &p in parts {
                    let t = &self.nodes[p.0].value;
                    let c = t.cols();
                    if self.rg(p) {
                        let mut dp = vec![S::zero(); m * c];
                        for r in 0..m {
                            dp[r * c..(r + 1) * c]
                                .copy_from_slice(&up[r * total + offset..r * total + offset + c]);
                        }
                        self.add_into(grads, p, &dp);
                    }
                    offset += c;
                }
            }
            Op::SliceCols { a, start, len } => {
                let ta = &self.nodes[a.0].value;
                let (m, n) = (ta.rows(), ta.cols());
                let mut da = vec![S::zero(); m * n];
                for r in 0..m {
                    for j in 0..*len {
                        da[r * n + start + j] = up[r * len + j];
                    }
                }
                self.add_into(grads, *a, &da);
            }
            Op::Softmax { a, temp, mask } => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                let mut da = vec![S::zero(); m * n];
                for r in 0..m {
                    let yr = y.row(r);
                    let ur = &up[r * n..(r + 1) * n];
                    let mut dot = S::zero();
                    for j in 0..n {
                        if mask.as_ref().map_or(true, |mk| !mk[j]) {
                            dot += ur[j] * yr[j];
                        }
                    }
                    for j in 0..n {
                        if mask.as_ref().map_or(true, |mk| !mk[j]) {
                            da[r * n + j] = yr[j] * (ur[j] - dot) / *temp;
                        }
                    }
                }
                self.add_into(grads, *a, &da);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (tx, tg) = (&self.nodes[x.0].value, &self.nodes[gamma.0].value);
                let (m, n) = (tx.rows(), tx.cols());
                let eps = S::from_f64(LN_EPS);
                let nf = S::from_f64(n as f64);
                let mut dx = vec![S::zero(); m * n];
                let mut dg = vec![S::zero(); n];
                let mut db = vec![S::zero(); n];
                for r in 0..m {
                    let row = tx.row(r);
                    let ur = &up[r * n..(r + 1) * n];
                    let mean = row.iter().fold(S::zero(), |a, &v| a + v) / nf;
                    let var =
                        row.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
                    let inv = S::one() / (var + eps).sqrt();
                    let mut mean_dxhat = S::zero();
                    let mut mean_dxhat_xhat = S::zero();
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = ur[j] * tg.data()[j];
                        db[j] += ur[j];
                        dg[j] += ur[j] * xhat;
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat /= nf;
                    mean_dxhat_xhat /= nf;
                    if self.rg(*x) {
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = ur[j] * tg.data()[j];
                            dx[r * n + j] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
                if self.rg(*x) {
                    self.add_into(grads, *x, &dx);
                }
                self.add_into(grads, *gamma, &dg);
                self.add_into(grads, *beta, &db);
            }
            Op::Gelu { a } => {
                let ta = &self.nodes[a.0].value;
                let da: Vec<S> =
                    up.iter().zip(ta.data()).map(|(&u, &x)| u * gelu_grad_kernel(x)).collect();
                self.add_into(grads, *a, &da);
            }
            Op::Relu { a } => {
                let ta = &self.nodes[a.0].value;
                let da: Vec<S> = up
                    .iter()
                    .zip(ta.data())
                    .map(|(&u, &x)| if x > S::zero() { u } else { S::zero() })
                    .collect();
                self.add_into(grads, *a, &da);
            }
            Op::RowNorms { a } => {
                let ta = &self.nodes[a.0].value;
                let (m, n) = (ta.rows(), ta.cols());
                let mut da = vec![S::zero(); m * n];
                for r in 0..m {
                    let norm = node.value.data()[r];
                    if norm > S::zero() {
                        let row = ta.row(r);
                        for j in 0..n {
                            da[r * n + j] = up[r] * row[j] / norm;
                        }
                    }
                }
                self.add_into(grads, *a, &da);
            }
            Op::CrossEntropy { logits, targets } => {
                let tl = &self.nodes[logits.0].value;
                let (m, v) = (tl.rows(), tl.cols());
                let count = S::from_f64(targets.iter().flatten().count() as f64);
                let mut dl = vec![S::zero(); m * v];
                for (r, tgt) in targets.iter().enumerate() {
                    if let Some(t) = tgt {
                        let row = tl.row(r);
                        let mx =
                            row.iter().fold(S::neg_infinity(), |a, &x| if x > a { x } else { a });
                        let denom = row.iter().fold(S::zero(), |a, &x| a + (x - mx).exp());
                        for j in 0..v {
                            let p = (row[j] - mx).exp() / denom;
                            let ind = if j == *t { S::one() } else { S::zero() };
                            dl[r * v + j] = up[0] * (p - ind) / count;
                        }
                    }
                }
                self.add_into(grads, *logits, &dl);
            }
            Op::CosineSim { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let na = super::l2_norm(ta.data());
                let nb = super::l2_norm(tb.data());
                let cos = node.value.item();
                if self.rg(*a) {
                    let da: Vec<S> = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| up[0] * (y / (na * nb) - cos * x / (na * na)))
                        .collect();
                    self.add_into(grads, *a, &da);
                }
                if self.rg(*b) {
                    let db: Vec<S> = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| up[0] * (x / (na * nb) - cos * y / (nb * nb)))
                        .collect();
                    self.add_into(grads, *b, &db);
                }
            }
            Op::SumAll { a } => {
                let n = self.nodes[a.0].value.len();
                let da = vec![up[0]; n];
                self.add_into(grads, *a, &da);
            }
        }
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: BTreeMap<String, NodeId>,
}

impl<S: Scalar> Gradients<S> {
    pub fn by_node(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of every registered parameter that received one.
    pub fn by_param(&self) -> BTreeMap<String, &Tensor<S>> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            if let Some(g) = self.by_node(*id) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tape<f64>;

    fn leaf_grad(t: &mut T, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        t.leaf(Tensor::from_vec(shape, data).unwrap().with_grad()).unwrap()
    }

    #[test]
    fn matmul_backward_hand_case() {
        // f = sum(A @ B), dA = ones @ B^T, dB = A^T @ ones
        let mut t = T::new();
        let a = leaf_grad(&mut t, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf_grad(&mut t, vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = t.matmul(a, b).unwrap();
        let loss = t.sum_all(c).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.by_node(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.by_node(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_backward_is_zero_for_sum() {
        let mut t = T::new();
        let a = leaf_grad(&mut t, vec![1, 3], vec![0.3, -1.2, 2.0]);
        let s = t.softmax(a, 1.0, None).unwrap();
        let total: f64 = t.value(s).data().iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
        // sum(softmax(x)) is constant, so gradient must vanish
        let loss = t.sum_all(s).unwrap();
        let g = t.backward(loss).unwrap();
        for &v in g.by_node(a).unwrap().data() {
            assert!(v.abs() <= 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let mut t = T::new();
        let a = leaf_grad(&mut t, vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let s = t.softmax(a, 1.0, Some(vec![false, false, true])).unwrap();
        let v = t.value(s);
        assert_eq!(v.get2(0, 2), 0.0);
        assert_eq!(v.get2(1, 2), 0.0);
        assert!((v.get2(1, 0) - 0.5).abs() <= 1e-12);
        assert!((v.row(0)[0] + v.row(0)[1] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn all_masked_softmax_is_degenerate() {
        let mut t = T::new();
        let a = leaf_grad(&mut t, vec![1, 2], vec![1.0, 2.0]);
        assert!(matches!(
            t.softmax(a, 1.0, Some(vec![true, true])),
            Err(NumericsError::DegenerateInput { .. })
        ));
    }

    #[test]
    fn cross_entropy_uniform_equals_ln_v() {
        let mut t = T::new();
        let logits = leaf_grad(&mut t, vec![2, 8], vec![0.25; 16]);
        let loss = t.cross_entropy(logits, &[Some(3), Some(0)]).unwrap();
        assert!((t.value(loss).item() - (8f64).ln()).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        let mut t = T::new();
        let mut data = vec![0.0; 5];
        data[2] = 30.0;
        let logits = leaf_grad(&mut t, vec![1, 5], data);
        let loss = t.cross_entropy(logits, &[Some(2)]).unwrap();
        assert!(t.value(loss).item() <= 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_empty_targets() {
        let mut t = T::new();
        let logits = leaf_grad(&mut t, vec![2, 4], vec![0.0; 8]);
        assert!(matches!(
            t.cross_entropy(logits, &[None, None]),
            Err(NumericsError::DegenerateInput { .. })
        ));
    }

    #[test]
    fn cross_entropy_matches_hand_oracle() {
        // two rows, hand-evaluated: loss = mean(lse(row) - row[target])
        let rows: [[f64; 3]; 2] = [[0.5, -0.2, 1.3], [2.0, 0.0, -1.0]];
        let targets = [2usize, 0usize];
        let mut expect = 0.0;
        for (row, &tgt) in rows.iter().zip(targets.iter()) {
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            expect += lse - row[tgt];
        }
        expect /= 2.0;
        let mut t = T::new();
        let logits = leaf_grad(&mut t, vec![2, 3], rows.concat());
        let loss = t.cross_entropy(logits, &[Some(2), Some(0)]).unwrap();
        assert!((t.value(loss).item() - expect).abs() <= 1e-12);
    }

    #[test]
    fn gather_rows_accumulates_duplicate_ids() {
        let mut t = T::new();
        let e = leaf_grad(&mut t, vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = t.gather_rows(e, &[1, 1, 2]).unwrap();
        assert_eq!(t.value(g).row(0), &[3.0, 4.0]);
        let loss = t.sum_all(g).unwrap();
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.by_node(e).unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn gather_rows_rejects_out_of_range() {
        let mut t = T::new();
        let e = leaf_grad(&mut t, vec![2, 2], vec![0.0; 4]);
        assert!(t.gather_rows(e, &[2]).is_err());
    }

    #[test]
    fn non_finite_forward_aborts_with_op_name() {
        let mut t = T::new();
        let a = leaf_grad(&mut t, vec![1, 1], vec![1e308]);
        let b = leaf_grad(&mut t, vec![1, 1], vec![1e308]);
        let err = t.add(a, b).unwrap_err();
        match err {
            NumericsError::NonFinite { op } => assert_eq!(op, "add"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn cosine_sim_node_and_zero_norm_error() {
        let mut t = T::new();
        let a = leaf_grad(&mut t, vec![1, 2], vec![1.0, 0.0]);
        let b = leaf_grad(&mut t, vec![1, 2], vec![0.0, 1.0]);
        let c = t.cosine_sim(a, b).unwrap();
        assert_eq!(t.value(c).item(), 0.0);
        let z = t.leaf(Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        assert!(matches!(t.cosine_sim(a, z), Err(NumericsError::DegenerateInput { .. })));
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let mut t = T::new();
        let a = leaf_grad(&mut t, vec![2, 4], (0..8).map(|x| x as f64).collect());
        let left = t.slice_cols(a, 0, 2).unwrap();
        let right = t.slice_cols(a, 2, 2).unwrap();
        let back = t.concat_cols(&[left, right]).unwrap();
        assert_eq!(t.value(back).data(), t.value(a).data());
        let loss = t.sum_all(back).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.by_node(a).unwrap().data(), &[1.0; 8]);
    }

    #[test]
    fn layer_norm_matches_naive_loop_oracle() {
        let mut t = T::new();
        let x_data = vec![0.3, -1.2, 2.0, 0.1, 0.0, -0.5];
        let gamma_data = vec![1.1, 0.9, 1.3];
        let beta_data = vec![0.2, -0.1, 0.0];
        let x = leaf_grad(&mut t, vec![2, 3], x_data.clone());
        let gamma = leaf_grad(&mut t, vec![3], gamma_data.clone());
        let beta = leaf_grad(&mut t, vec![3], beta_data.clone());
        let y = t.layer_norm(x, gamma, beta).unwrap();
        for r in 0..2 {
            let row = &x_data[r * 3..(r + 1) * 3];
            let mean: f64 = row.iter().sum::<f64>() / 3.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for j in 0..3 {
                let want = (row[j] - mean) * inv * gamma_data[j] + beta_data[j];
                assert!((t.value(y).get2(r, j) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gelu_matches_naive_loop_oracle() {
        let mut t = T::new();
        let data = vec![-2.0, -0.3, 0.0, 0.7, 3.1];
        let x = leaf_grad(&mut t, vec![1, 5], data.clone());
        let y = t.gelu(x).unwrap();
        for (got, &v) in t.value(y).data().iter().zip(&data) {
            let want = 0.5 * v * (1.0 + (0.7978845608028654 * (v + 0.044715 * v * v * v)).tanh());
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn transpose_reshape_backward() {
        let mut t = T::new();
        let a = leaf_grad(&mut t, vec![2, 3], (0..6).map(|x| x as f64).collect());
        let tr = t.transpose(a).unwrap();
        assert_eq!(t.value(tr).shape(), &[3, 2]);
        let rs = t.reshape(tr, vec![6]).unwrap();
        let loss = t.sum_all(rs).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.by_node(a).unwrap().data(), &[1.0; 6]);
    }
}
