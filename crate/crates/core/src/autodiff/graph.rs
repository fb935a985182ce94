use super::tensor::{check_row_stochastic, check_temperature, Tensor, EPS_PROB};
use crate::error::{Error, Result};

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Tensor times a one-element node.
    MulScalar(NodeId, NodeId),
    Exp(NodeId),
    Tanh(NodeId),
    L2NormalizeRows { input: NodeId, norms: Vec<f64> },
    SoftmaxRows { input: NodeId, temperature: f64 },
    LogSoftmaxRows { input: NodeId, temperature: f64 },
    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    Log { input: NodeId, floor: f64 },
    /// `(1/m) Σ p·(ln p − log_q)` with a detached target `p`.
    KlRows { target: Tensor, log_q: NodeId },
    /// `(1/m) Σ −t·log_q` with a detached target `t`.
    CrossEntropyRows { target: Tensor, log_q: NodeId },
    /// `Σ w·(x − anchor)²` with detached `w` and `anchor`.
    WeightedSqDist {
        input: NodeId,
        anchor: Tensor,
        weights: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Nodes are pushed in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to the parameter leaves.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a parameter leaf; `None` when the root does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Param, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Param)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).transpose()?;
        let rg = self.requires(a);
        Ok(self.push(Op::Transpose(a), value, rg))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = self.value(x).add_row(self.value(bias))?;
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.push(Op::AddRow(x, bias), value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|v| v * factor);
        let rg = self.requires(a);
        self.push(Op::Scale(a, factor), value, rg)
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let factor = self.value(s).item()?;
        let value = self.value(x).map(|v| v * factor);
        let rg = self.requires(x) || self.requires(s);
        Ok(self.push(Op::MulScalar(x, s), value, rg))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::exp);
        let rg = self.requires(a);
        self.push(Op::Exp(a), value, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        let rg = self.requires(a);
        self.push(Op::Tanh(a), value, rg)
    }

    /// Scales every row to unit Euclidean norm; rows with norm ≤ `EPS_NORM`
    /// are rejected.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let norms = self.value(x).row_norms()?;
        let value = self.value(x).divide_rows(&norms)?;
        let rg = self.requires(x);
        Ok(self.push(Op::L2NormalizeRows { input: x, norms }, value, rg))
    }

    pub fn softmax_rows(&mut self, x: NodeId, temperature: f64) -> Result<NodeId> {
        let value = self.value(x).softmax_rows(temperature)?;
        let rg = self.requires(x);
        Ok(self.push(
            Op::SoftmaxRows {
                input: x,
                temperature,
            },
            value,
            rg,
        ))
    }

    pub fn log_softmax_rows(&mut self, x: NodeId, temperature: f64) -> Result<NodeId> {
        check_temperature(temperature)?;
        let value = self.value(x).log_softmax_rows(temperature)?;
        let rg = self.requires(x);
        Ok(self.push(
            Op::LogSoftmaxRows {
                input: x,
                temperature,
            },
            value,
            rg,
        ))
    }

    /// Elementwise `ln(max(x, floor))`.
    pub fn log(&mut self, x: NodeId, floor: f64) -> NodeId {
        let value = self.value(x).map(|v| v.max(floor).ln());
        let rg = self.requires(x);
        self.push(Op::Log { input: x, floor }, value, rg)
    }

    /// Mean row-wise KL divergence `KL(p ‖ q)` between a detached
    /// row-stochastic target `p` and row-stochastic probabilities `q`.
    pub fn kl_rows(&mut self, p: &Tensor, q: NodeId) -> Result<NodeId> {
        check_row_stochastic(self.value(q), "q")?;
        let log_q = self.log(q, EPS_PROB);
        self.kl_rows_log(p, log_q)
    }

    /// Same as [`Graph::kl_rows`] but takes `log q` directly, which avoids
    /// the probability floor when `q` comes from a log-softmax.
    pub fn kl_rows_log(&mut self, p: &Tensor, log_q: NodeId) -> Result<NodeId> {
        check_row_stochastic(p, "p")?;
        let lq = self.value(log_q);
        if lq.shape() != p.shape() {
            return Err(Error::Dimension(format!(
                "KL operands differ in shape: {:?} vs {:?}",
                p.shape(),
                lq.shape()
            )));
        }
        let m = p.rows().max(1) as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(lq.data())
            .filter(|(&pv, _)| pv > 0.0)
            .map(|(&pv, &l)| pv * (pv.ln() - l))
            .sum();
        let rg = self.requires(log_q);
        Ok(self.push(
            Op::KlRows {
                target: p.clone(),
                log_q,
            },
            Tensor::scalar(total / m),
            rg,
        ))
    }

    /// Mean row-wise cross-entropy `−(1/m) Σ t·log_q` against a detached
    /// target.
    pub fn cross_entropy_rows(&mut self, target: &Tensor, log_q: NodeId) -> Result<NodeId> {
        let lq = self.value(log_q);
        if lq.shape() != target.shape() {
            return Err(Error::Dimension(format!(
                "cross-entropy operands differ in shape: {:?} vs {:?}",
                target.shape(),
                lq.shape()
            )));
        }
        let m = target.rows().max(1) as f64;
        let total: f64 = target
            .data()
            .iter()
            .zip(lq.data())
            .filter(|(&t, _)| t != 0.0)
            .map(|(&t, &l)| -t * l)
            .sum();
        let rg = self.requires(log_q);
        Ok(self.push(
            Op::CrossEntropyRows {
                target: target.clone(),
                log_q,
            },
            Tensor::scalar(total / m),
            rg,
        ))
    }

    /// `Σ w·(x − anchor)²` with `w` and `anchor` held constant.
    pub fn weighted_sq_dist(
        &mut self,
        x: NodeId,
        anchor: &Tensor,
        weights: &Tensor,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.len() != anchor.len() || xv.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "weighted distance operands have lengths {}, {}, {}",
                xv.len(),
                anchor.len(),
                weights.len()
            )));
        }
        let total: f64 = xv
            .data()
            .iter()
            .zip(anchor.data())
            .zip(weights.data())
            .map(|((&v, &a), &w)| w * (v - a) * (v - a))
            .sum();
        let rg = self.requires(x);
        Ok(self.push(
            Op::WeightedSqDist {
                input: x,
                anchor: anchor.clone(),
                weights: weights.clone(),
            },
            Tensor::scalar(total),
            rg,
        ))
    }

    /// Reverse sweep from a scalar root. Each node is visited once, in
    /// reverse insertion order.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::new(root_value.shape().to_vec(), vec![1.0])?);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    if self.requires(*a) {
                        let ga = g.matmul_t(self.value(*b))?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.requires(*b) {
                        let gb = self.value(*a).t_matmul(&g)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose()?);
                }
                Op::AddRow(x, bias) => {
                    if self.requires(*bias) {
                        let n = g.cols();
                        let mut sums = vec![0.0; n];
                        for row in g.data().chunks(n.max(1)) {
                            for (s, v) in sums.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                        let shape = self.value(*bias).shape().to_vec();
                        accumulate(&mut grads, *bias, Tensor::new(shape, sums)?);
                    }
                    if self.requires(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.requires(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut grads, *a, g.map(|v| v * factor));
                }
                Op::MulScalar(x, s) => {
                    let xv = self.value(*x);
                    if self.requires(*s) {
                        let gs: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                        let shape = self.value(*s).shape().to_vec();
                        accumulate(&mut grads, *s, Tensor::new(shape, vec![gs])?);
                    }
                    if self.requires(*x) {
                        let factor = self.value(*s).item()?;
                        accumulate(&mut grads, *x, g.map(|v| v * factor));
                    }
                }
                Op::Exp(a) => {
                    let gx = g.zip_map(&node.value, |gv, y| gv * y)?;
                    accumulate(&mut grads, *a, gx);
                }
                Op::Tanh(a) => {
                    let gx = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?;
                    accumulate(&mut grads, *a, gx);
                }
                Op::L2NormalizeRows { input, norms } => {
                    let y = &node.value;
                    let n = y.cols().max(1);
                    let mut gx = g.clone();
                    for (i, (grow, yrow)) in
                        gx.data_mut().chunks_mut(n).zip(y.data().chunks(n)).enumerate()
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (gv, yv) in grow.iter_mut().zip(yrow) {
                            *gv = (*gv - yv * dot) / norms[i];
                        }
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::SoftmaxRows { input, temperature } => {
                    let y = &node.value;
                    let n = y.cols().max(1);
                    let mut gx = g.clone();
                    for (grow, yrow) in gx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (gv, yv) in grow.iter_mut().zip(yrow) {
                            *gv = yv * (*gv - dot) / temperature;
                        }
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::LogSoftmaxRows { input, temperature } => {
                    let y = &node.value;
                    let n = y.cols().max(1);
                    let mut gx = g.clone();
                    for (grow, yrow) in gx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                        let total: f64 = grow.iter().sum();
                        for (gv, yv) in grow.iter_mut().zip(yrow) {
                            *gv = (*gv - yv.exp() * total) / temperature;
                        }
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::Log { input, floor } => {
                    let xv = self.value(*input);
                    let gx = g.zip_map(xv, |gv, x| if x > *floor { gv / x } else { 0.0 })?;
                    accumulate(&mut grads, *input, gx);
                }
                Op::KlRows { target, log_q } | Op::CrossEntropyRows { target, log_q } => {
                    let upstream = g.item()?;
                    let m = target.rows().max(1) as f64;
                    let gq = target.map(|t| -upstream * t / m);
                    accumulate(&mut grads, *log_q, gq);
                }
                Op::WeightedSqDist {
                    input,
                    anchor,
                    weights,
                } => {
                    let upstream = g.item()?;
                    let xv = self.value(*input);
                    let data = xv
                        .data()
                        .iter()
                        .zip(anchor.data())
                        .zip(weights.data())
                        .map(|((&v, &a), &w)| upstream * 2.0 * w * (v - a))
                        .collect();
                    accumulate(&mut grads, *input, Tensor::new(xv.shape().to_vec(), data)?);
                }
            }
        }

        for (idx, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[idx].op, Op::Param) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
