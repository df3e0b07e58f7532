use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The primitive algebra exposed through [`Graph::apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasicOp {
    MatMul,
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Sum,
    Mean,
    Square,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    Affine {
        x: usize,
        scale: f64,
    },
    ReverseGrad {
        x: usize,
        lambda: f64,
    },
    Nll {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Bce {
        logits: usize,
        targets: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in evaluation order, so the node vector is always a
/// valid topological order and backward is a single reverse sweep. A graph
/// supports one backward pass; build a new one for the next forward.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Output shape of an elementwise op. Besides equal shapes, one operand may be
/// a single row (`[..]` or `[1, ..]`) repeated over the other's leading
/// batch dimension.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let row_of = |big: &[usize], small: &[usize]| {
        !big.is_empty()
            && ((small.len() + 1 == big.len() && small == &big[1..])
                || (small.len() == big.len() && small[0] == 1 && small[1..] == big[1..]))
    };
    if row_of(a, b) {
        Ok(a.to_vec())
    } else if row_of(b, a) {
        Ok(b.to_vec())
    } else {
        Err(Error::shape(op, format!("{a:?} vs {b:?}")))
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

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        op: Op,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
    ) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(op, shape, value, requires_grad))
    }

    /// Registers a tensor; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Registers a tensor as a differentiable input regardless of its flag.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), true)
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Constant from raw parts, validated like [`Tensor::new`].
    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// First element of a node's value; intended for scalar nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph values are finite")
    }

    /// Gradient of the last backward root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Dispatches one of the primitive ops by kind. Unary kinds use
    /// `inputs[0]`; binary kinds use `inputs[0]` and `inputs[1]`.
    pub fn apply(&mut self, kind: BasicOp, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            BasicOp::MatMul | BasicOp::Add | BasicOp::Sub | BasicOp::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::shape(
                "apply",
                format!("{kind:?} takes {arity} inputs, got {}", inputs.len()),
            ));
        }
        match kind {
            BasicOp::MatMul => self.matmul(inputs[0], inputs[1]),
            BasicOp::Add => self.add(inputs[0], inputs[1]),
            BasicOp::Sub => self.sub(inputs[0], inputs[1]),
            BasicOp::Mul => self.mul(inputs[0], inputs[1]),
            BasicOp::Relu => self.relu(inputs[0]),
            BasicOp::Sigmoid => self.sigmoid(inputs[0]),
            BasicOp::Sum => self.sum(inputs[0]),
            BasicOp::Mean => self.mean(inputs[0]),
            BasicOp::Square => self.square(inputs[0]),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, w) in row.iter_mut().zip(&bv[p * m..(p + 1) * m]) {
                    *o += x * w;
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push_checked("matmul", Op::MatMul(a.0, b.0), vec![n, m], out, rg)
    }

    fn elementwise(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let shape = broadcast_shape(name, &self.nodes[a.0].shape, &self.nodes[b.0].shape)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let len = numel(&shape);
        let out: Vec<f64> = (0..len).map(|i| f(av[i % av.len()], bv[i % bv.len()])).collect();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push_checked(name, op, shape, out, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let node = &self.nodes[x.0];
        let out = node.value.iter().map(|&v| f(v)).collect();
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        self.push_checked(name, op, shape, out, rg)
    }

    /// Positive part. The subgradient at exactly zero is taken to be 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x.0))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary("affine", x, |v| scale * v + shift, Op::Affine { x: x.0, scale })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    /// Identity on the forward pass; multiplies the incoming gradient by
    /// `-lambda` on the way back.
    pub fn reverse_grad(&mut self, x: Var, lambda: f64) -> Result<Var> {
        self.unary("reverse_grad", x, |v| v, Op::ReverseGrad { x: x.0, lambda })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let node = &self.nodes[x.0];
        let s = node.value.iter().sum();
        let rg = node.requires_grad;
        self.push_checked("sum", Op::Sum(x.0), vec![1], vec![s], rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let node = &self.nodes[x.0];
        if node.value.is_empty() {
            return Err(Error::EmptyBatch("mean"));
        }
        let s = node.value.iter().sum::<f64>() / node.value.len() as f64;
        let rg = node.requires_grad;
        self.push_checked("mean", Op::Mean(x.0), vec![1], vec![s], rg)
    }

    /// Mean over every dimension but the first: `[B, ..] -> [B]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let node = &self.nodes[x.0];
        let Some((&batch, rest)) = node.shape.split_first() else {
            return Err(Error::shape("mean_rows", "rank-0 input"));
        };
        let width = numel(rest);
        if batch == 0 || width == 0 {
            return Err(Error::EmptyBatch("mean_rows"));
        }
        let out = node
            .value
            .chunks(width)
            .map(|r| r.iter().sum::<f64>() / width as f64)
            .collect();
        let rg = node.requires_grad;
        self.push_checked("mean_rows", Op::MeanRows(x.0), vec![batch], out, rg)
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    /// Uses max-subtraction so large logits never overflow.
    pub fn nll_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let node = &self.nodes[logits.0];
        if node.shape.len() != 2 {
            return Err(Error::shape("nll_loss", format!("logits {:?}", node.shape)));
        }
        let (batch, classes) = (node.shape[0], node.shape[1]);
        if batch == 0 {
            return Err(Error::EmptyBatch("nll_loss"));
        }
        if classes < 2 {
            return Err(Error::shape("nll_loss", "need at least two classes"));
        }
        if labels.len() != batch {
            return Err(Error::shape(
                "nll_loss",
                format!("{} labels for batch {batch}", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let mut probs = vec![0.0; batch * classes];
        let mut total = 0.0;
        for (b, row) in node.value.chunks(classes).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
            total += lse - row[labels[b]];
            for (p, &l) in probs[b * classes..(b + 1) * classes].iter_mut().zip(row) {
                *p = (l - lse).exp();
            }
        }
        let rg = node.requires_grad;
        let op = Op::Nll {
            logits: logits.0,
            labels: labels.to_vec(),
            probs,
        };
        self.push_checked("nll_loss", op, vec![1], vec![total / batch as f64], rg)
    }

    /// Mean binary cross-entropy of `targets` under sigmoid(`logits`).
    /// `logits` is `[B]` or `[B, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let node = &self.nodes[logits.0];
        let ok = matches!(node.shape.as_slice(), [_] | [_, 1]);
        if !ok || node.value.len() != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {:?} with {} targets", node.shape, targets.len()),
            ));
        }
        if targets.is_empty() {
            return Err(Error::EmptyBatch("bce_with_logits"));
        }
        let total: f64 = node
            .value
            .iter()
            .zip(targets)
            .map(|(&l, &t)| l.max(0.0) - l * t + (-l.abs()).exp().ln_1p())
            .sum();
        let rg = node.requires_grad;
        let op = Op::Bce {
            logits: logits.0,
            targets: targets.to_vec(),
        };
        self.push_checked("bce_with_logits", op, vec![1], vec![total / targets.len() as f64], rg)
    }

    /// Whether each relu input is strictly positive, over every relu node in
    /// graph order. Two evaluations with different patterns sit on different
    /// sides of a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(&self.nodes[x].value),
                _ => None,
            })
            .flat_map(|v| v.iter().map(|&x| x > 0.0))
            .collect()
    }

    /// Reverse sweep from a scalar root. Gradients accumulate additively
    /// where a node fans out.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let node = &self.nodes[root.0];
        if node.value.len() != 1 {
            return Err(Error::NonScalarRoot(node.shape.clone()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !node.requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (n, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let m = nodes[b].shape[1];
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if let Some(da) = slot(nodes, grads, a) {
                for r in 0..n {
                    let grow = &g[r * m..(r + 1) * m];
                    for p in 0..k {
                        let brow = &bv[p * m..(p + 1) * m];
                        da[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for r in 0..n {
                    let grow = &g[r * m..(r + 1) * m];
                    for p in 0..k {
                        let x = av[r * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for (d, gv) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                            *d += x * gv;
                        }
                    }
                }
            }
        }
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if let Some(da) = slot(nodes, grads, a) {
                let len = da.len();
                for (j, gv) in g.iter().enumerate() {
                    da[j % len] += gv;
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                let len = db.len();
                for (j, gv) in g.iter().enumerate() {
                    db[j % len] += sign * gv;
                }
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if let Some(da) = slot(nodes, grads, a) {
                let len = da.len();
                for (j, gv) in g.iter().enumerate() {
                    da[j % len] += gv * bv[j % bv.len()];
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                let len = db.len();
                for (j, gv) in g.iter().enumerate() {
                    db[j % len] += gv * av[j % av.len()];
                }
            }
        }
        &Op::Relu(x) => {
            let xv = &nodes[x].value;
            if let Some(dx) = slot(nodes, grads, x) {
                for ((d, gv), v) in dx.iter_mut().zip(g).zip(xv) {
                    if *v > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        &Op::Sigmoid(x) => {
            let y = &node.value;
            if let Some(dx) = slot(nodes, grads, x) {
                for ((d, gv), s) in dx.iter_mut().zip(g).zip(y) {
                    *d += gv * s * (1.0 - s);
                }
            }
        }
        &Op::Square(x) => {
            let xv = &nodes[x].value;
            if let Some(dx) = slot(nodes, grads, x) {
                for ((d, gv), v) in dx.iter_mut().zip(g).zip(xv) {
                    *d += 2.0 * v * gv;
                }
            }
        }
        &Op::Sum(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mean(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                let scale = g[0] / dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += scale);
            }
        }
        &Op::MeanRows(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                let width = dx.len() / g.len();
                for (row, gv) in dx.chunks_mut(width).zip(g) {
                    let scale = gv / width as f64;
                    row.iter_mut().for_each(|d| *d += scale);
                }
            }
        }
        &Op::Affine { x, scale } => {
            if let Some(dx) = slot(nodes, grads, x) {
                dx.iter_mut().zip(g).for_each(|(d, gv)| *d += scale * gv);
            }
        }
        &Op::ReverseGrad { x, lambda } => {
            if let Some(dx) = slot(nodes, grads, x) {
                dx.iter_mut().zip(g).for_each(|(d, gv)| *d -= lambda * gv);
            }
        }
        Op::Nll { logits, labels, probs } => {
            if let Some(dx) = slot(nodes, grads, *logits) {
                let classes = nodes[*logits].shape[1];
                let scale = g[0] / labels.len() as f64;
                for (b, &y) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == y { 1.0 } else { 0.0 };
                        dx[b * classes + c] += scale * (probs[b * classes + c] - onehot);
                    }
                }
            }
        }
        Op::Bce { logits, targets } => {
            let lv = &nodes[*logits].value;
            if let Some(dx) = slot(nodes, grads, *logits) {
                let scale = g[0] / targets.len() as f64;
                for ((d, &l), &t) in dx.iter_mut().zip(lv).zip(targets) {
                    *d += scale * (sigmoid(l) - t);
                }
            }
        }
    }
}
