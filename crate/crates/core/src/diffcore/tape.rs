use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    Mean(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    KlDivergence { p: Var, q: Var, p_probs: Vec<f64>, log_ratio: Vec<f64>, q_probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Wengert list for reverse-mode differentiation.
///
/// Entries are appended in evaluation order, so operands always precede their
/// consumers. A tape is built fresh for each forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if let Some(i) = value.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("leaf value at flat index {i}"),
            });
        }
        Ok(self.push(Op::Leaf, value, requires_grad))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Clears every gradient buffer so the tape may be differentiated again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::contract(format!(
                "variable {} is not on this tape",
                v.0
            )));
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn finish(&mut self, op: Op, value: Tensor, name: &str) -> Result<Var> {
        if let Some(i) = value.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("{name} output at flat index {i}"),
            });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => self.needs(*a) || self.needs(*b),
            Op::Transpose(a) | Op::Relu(a) | Op::Scale(a, _) | Op::Mean(a) => self.needs(*a),
            Op::SoftmaxCrossEntropy { logits, .. } => self.needs(*logits),
            Op::KlDivergence { p, q, .. } => self.needs(*p) || self.needs(*q),
        };
        Ok(self.push(op, value, requires_grad))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| Error::shape(op, format!("expected a matrix, got shape {:?}", self.value(v).shape())))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: [{m}, {k}] x [{k2}, {n}]"),
            ));
        }
        let out = matmul_raw(self.value(a).values(), self.value(b).values(), m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        self.finish(Op::MatMul(a, b), value, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let out = transpose_raw(self.value(a).values(), m, n);
        let value = Tensor::matrix(n, m, out)?;
        self.finish(Op::Transpose(a), value, "transpose")
    }

    /// Elementwise sum. A rank-1 right operand of length `n` broadcasts over
    /// the rows of an `[m, n]` left operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.same_shape(bv) {
            let out: Vec<f64> = av.values().iter().zip(bv.values()).map(|(x, y)| x + y).collect();
            let value = Tensor::new(av.shape().to_vec(), out)?;
            return self.finish(Op::Add(a, b), value, "add");
        }
        match (av.dims2(), bv.shape()) {
            (Some((m, n)), [n2]) if n == *n2 => {
                let bias = bv.values();
                let mut out = av.values().to_vec();
                for row in out.chunks_exact_mut(n) {
                    for (o, b) in row.iter_mut().zip(bias) {
                        *o += b;
                    }
                }
                let value = Tensor::matrix(m, n, out)?;
                self.finish(Op::AddRow(a, b), value, "add")
            }
            _ => Err(Error::shape(
                "add",
                format!("cannot add {:?} and {:?}", av.shape(), bv.shape()),
            )),
        }
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let out = av.values().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.finish(Op::Relu(a), value, "relu")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let out = av.values().iter().map(|x| x * factor).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.finish(Op::Scale(a, factor), value, "scale")
    }

    /// Mean over every entry, producing a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let mean = av.values().iter().sum::<f64>() / av.len() as f64;
        self.finish(Op::Mean(a), Tensor::scalar(mean), "mean")
    }

    /// Per-row cross-entropy of `softmax(logits)` against integer labels.
    /// Returns a rank-1 tensor with one loss per row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let (rows, classes) = self.matrix_dims(logits, "softmax_cross_entropy")?;
        if labels.len() != rows {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{rows} rows of logits but {} labels", labels.len()),
            ));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::domain(format!(
                "label {l} at row {i} outside [0, {classes})"
            )));
        }
        let z = self.value(logits).values();
        let mut probs = Vec::with_capacity(z.len());
        let mut losses = Vec::with_capacity(rows);
        for (row, &label) in z.chunks_exact(classes).zip(labels) {
            let lse = log_sum_exp(row);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
            losses.push(lse - row[label]);
        }
        let value = Tensor::vector(losses)?;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.finish(op, value, "softmax_cross_entropy")
    }

    /// Per-row `KL(softmax(p) || softmax(q))`.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        self.check(p)?;
        self.check(q)?;
        let (rows, classes) = self.matrix_dims(p, "kl_divergence")?;
        if !self.value(p).same_shape(self.value(q)) {
            return Err(Error::shape(
                "kl_divergence",
                format!(
                    "{:?} vs {:?}",
                    self.value(p).shape(),
                    self.value(q).shape()
                ),
            ));
        }
        let (pz, qz) = (self.value(p).values(), self.value(q).values());
        let mut p_probs = Vec::with_capacity(pz.len());
        let mut q_probs = Vec::with_capacity(qz.len());
        let mut log_ratio = Vec::with_capacity(pz.len());
        let mut out = Vec::with_capacity(rows);
        for (prow, qrow) in pz.chunks_exact(classes).zip(qz.chunks_exact(classes)) {
            let (plse, qlse) = (log_sum_exp(prow), log_sum_exp(qrow));
            let mut kl = 0.0;
            for (&a, &b) in prow.iter().zip(qrow) {
                let (lp, lq) = (a - plse, b - qlse);
                let pp = lp.exp();
                kl += pp * (lp - lq);
                p_probs.push(pp);
                q_probs.push(lq.exp());
                log_ratio.push(lp - lq);
            }
            out.push(kl);
        }
        let value = Tensor::vector(out)?;
        let op = Op::KlDivergence {
            p,
            q,
            p_probs,
            log_ratio,
            q_probs,
        };
        self.finish(op, value, "kl_divergence")
    }

    /// Populates gradient buffers of every node that requires one with
    /// `d loss / d node`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.backward_done {
            return Err(Error::contract(
                "backward called twice without zero_grad",
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &upstream, &mut grads)?;
            let shape = self.nodes[i].value.shape().to_vec();
            let grad = Tensor::new(shape, upstream)?;
            if let Some(j) = grad.first_non_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of node {i} at flat index {j}"),
                });
            }
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut send = |v: Var, contribution: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matmul operand");
                let n = self.value(*b).dims2().expect("matmul operand").1;
                if self.needs(*a) {
                    let bt = transpose_raw(self.value(*b).values(), k, n);
                    send(*a, matmul_raw(up, &bt, m, n, k));
                }
                if self.needs(*b) {
                    let at = transpose_raw(self.value(*a).values(), m, k);
                    send(*b, matmul_raw(&at, up, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().expect("transpose operand");
                send(*a, transpose_raw(up, n, m));
            }
            Op::Add(a, b) => {
                send(*a, up.to_vec());
                send(*b, up.to_vec());
            }
            Op::AddRow(a, b) => {
                let n = self.value(*b).len();
                send(*a, up.to_vec());
                if self.needs(*b) {
                    let mut col = vec![0.0; n];
                    for row in up.chunks_exact(n) {
                        col.iter_mut().zip(row).for_each(|(c, r)| *c += r);
                    }
                    send(*b, col);
                }
            }
            Op::Relu(a) => {
                let input = self.value(*a).values();
                let g = up
                    .iter()
                    .zip(input)
                    .map(|(&u, &x)| if x > 0.0 { u } else { 0.0 })
                    .collect();
                send(*a, g);
            }
            Op::Scale(a, factor) => send(*a, up.iter().map(|u| u * factor).collect()),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                send(*a, vec![up[0] / n as f64; n]);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = probs.len() / labels.len();
                let mut g = probs.clone();
                for (r, (&label, &u)) in labels.iter().zip(up).enumerate() {
                    let row = &mut g[r * classes..(r + 1) * classes];
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= u);
                }
                send(*logits, g);
            }
            Op::KlDivergence {
                p,
                q,
                p_probs,
                log_ratio,
                q_probs,
            } => {
                let rows = up.len();
                let classes = p_probs.len() / rows;
                if self.needs(*p) {
                    let mut g = vec![0.0; p_probs.len()];
                    for r in 0..rows {
                        let span = r * classes..(r + 1) * classes;
                        let (pp, lr) = (&p_probs[span.clone()], &log_ratio[span.clone()]);
                        let expected: f64 = pp.iter().zip(lr).map(|(a, b)| a * b).sum();
                        for (j, gj) in g[span].iter_mut().enumerate() {
                            *gj = up[r] * pp[j] * (lr[j] - expected);
                        }
                    }
                    send(*p, g);
                }
                if self.needs(*q) {
                    let g = q_probs
                        .iter()
                        .zip(p_probs)
                        .enumerate()
                        .map(|(idx, (qp, pp))| up[idx / classes] * (qp - pp))
                        .collect();
                    send(*q, g);
                }
            }
        }
        Ok(())
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
