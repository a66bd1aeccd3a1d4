//! Wengert-list reverse-mode differentiation over dense matrices.
//!
//! Every operation appends one node to the [`Tape`]; its inputs always have
//! smaller ids, so walking the list backwards is a valid reverse topological
//! order. Gradients of a node feeding several consumers accumulate.

use std::sync::Arc;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Tensor {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn rows(self) -> usize {
        self.rows
    }

    pub fn cols(self) -> usize {
        self.cols
    }

    pub fn shape(self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Shared index buffer, so that one edge list can drive many segment ops.
pub type Indices = Arc<[usize]>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    Scale(Tensor, f64),
    LeakyRelu(Tensor, f64),
    Sigmoid(Tensor),
    Powf(Tensor, f64),
    ConcatCols(Tensor, Tensor),
    Gather(Tensor, Indices),
    SegmentSoftmax(Tensor, Indices),
    SegmentWeightedSum {
        weights: Tensor,
        msgs: Tensor,
        seg: Indices,
    },
    RowSum(Tensor),
    Sum(Tensor),
    SoftmaxCrossEntropy {
        logits: Tensor,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Matrix,
    },
    BceWithLogits {
        logits: Tensor,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by tensor.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, or `None` when the loss does
    /// not depend on it.
    pub fn get(&self, t: Tensor) -> Option<&Matrix> {
        self.grads.get(t.id).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but materialises zeros for unreached tensors.
    pub fn get_or_zeros(&self, t: Tensor) -> Matrix {
        self.get(t)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(t.rows, t.cols))
    }
}

#[inline]
pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        // exp underflows below about -745; keep probabilities strictly positive
        (e / (1.0 + e)).max(f64::MIN_POSITIVE)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn same_shape(op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn check_indices(op: &'static str, idx: &[usize], bound: usize) -> Result<()> {
    if let Some((position, &index)) = idx.iter().enumerate().find(|(_, &i)| i >= bound) {
        return Err(Error::Index {
            op,
            position,
            index,
            bound,
        });
    }
    Ok(())
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Tensor {
        let (rows, cols) = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Tensor { id, rows, cols }
    }

    fn needs(&self, ts: &[Tensor]) -> bool {
        ts.iter().any(|t| self.nodes[t.id].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Tensor {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Tensor {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, t: Tensor) -> &Matrix {
        &self.nodes[t.id].value
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.id].requires_grad
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds the `1×m` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Tensor, bias: Tensor) -> Result<Tensor> {
        if bias.rows != 1 || bias.cols != a.cols {
            return Err(Error::Dimension {
                op: "add_row",
                left: a.shape(),
                right: bias.shape(),
            });
        }
        let mut value = self.value(a).clone();
        let b = self.value(bias).row(0).to_vec();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        let rg = self.needs(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Tensor, s: f64) -> Tensor {
        let value = self.value(a).map(|x| x * s);
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn leaky_relu(&mut self, a: Tensor, slope: f64) -> Tensor {
        debug_assert!(slope > 0.0 && slope < 1.0);
        let value = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        let rg = self.needs(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        let value = self.value(a).map(stable_sigmoid);
        let rg = self.needs(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Elementwise `x^p`; inputs must be positive when `p` is not an integer.
    pub fn powf(&mut self, a: Tensor, p: f64) -> Tensor {
        let value = self.value(a).map(|x| x.powf(p));
        let rg = self.needs(&[a]);
        self.push(value, Op::Powf(a, p), rg)
    }

    pub fn concat_cols(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.rows != b.rows {
            return Err(Error::Dimension {
                op: "concat_cols",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut value = Matrix::zeros(a.rows, a.cols + b.cols);
        for r in 0..a.rows {
            let row = value.row_mut(r);
            row[..a.cols].copy_from_slice(va.row(r));
            row[a.cols..].copy_from_slice(vb.row(r));
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    /// Row `i` of the output is row `idx[i]` of `h`.
    pub fn gather(&mut self, h: Tensor, idx: Indices) -> Result<Tensor> {
        check_indices("gather", &idx, h.rows)?;
        let value = self.value(h).select_rows(&idx);
        let rg = self.needs(&[h]);
        Ok(self.push(value, Op::Gather(h, idx), rg))
    }

    /// Softmax of an `e×1` score column within each group of equal `seg` ids.
    pub fn segment_softmax(&mut self, scores: Tensor, seg: Indices) -> Result<Tensor> {
        if scores.cols != 1 || scores.rows != seg.len() {
            return Err(Error::Dimension {
                op: "segment_softmax",
                left: scores.shape(),
                right: (seg.len(), 1),
            });
        }
        let groups = seg.iter().max().map_or(0, |m| m + 1);
        let s = self.value(scores).as_slice();
        let mut max = vec![f64::NEG_INFINITY; groups];
        for (&g, &x) in seg.iter().zip(s) {
            if x > max[g] {
                max[g] = x;
            }
        }
        let mut out: Vec<f64> = seg.iter().zip(s).map(|(&g, &x)| (x - max[g]).exp()).collect();
        let mut total = vec![0.0; groups];
        for (&g, &x) in seg.iter().zip(&out) {
            total[g] += x;
        }
        for (&g, x) in seg.iter().zip(out.iter_mut()) {
            *x /= total[g];
        }
        let value = Matrix::column(&out);
        let rg = self.needs(&[scores]);
        Ok(self.push(value, Op::SegmentSoftmax(scores, seg), rg))
    }

    /// Row `v` of the `n×d` output is `Σ weights[e]·msgs[e]` over edges with
    /// `seg[e] == v`. Nodes without edges get zero rows.
    pub fn segment_weighted_sum(
        &mut self,
        weights: Tensor,
        msgs: Tensor,
        seg: Indices,
        n: usize,
    ) -> Result<Tensor> {
        if weights.cols != 1 || weights.rows != msgs.rows || seg.len() != msgs.rows {
            return Err(Error::Dimension {
                op: "segment_weighted_sum",
                left: weights.shape(),
                right: msgs.shape(),
            });
        }
        check_indices("segment_weighted_sum", &seg, n)?;
        let (w, m) = (self.value(weights), self.value(msgs));
        let mut value = Matrix::zeros(n, msgs.cols);
        for (e, &v) in seg.iter().enumerate() {
            let we = w.get(e, 0);
            if we == 0.0 {
                continue;
            }
            let src = m.row(e);
            for (o, &x) in value.row_mut(v).iter_mut().zip(src) {
                *o += we * x;
            }
        }
        let rg = self.needs(&[weights, msgs]);
        Ok(self.push(value, Op::SegmentWeightedSum { weights, msgs, seg }, rg))
    }

    /// `n×d → n×1` sum across columns.
    pub fn row_sum(&mut self, a: Tensor) -> Tensor {
        let va = self.value(a);
        let sums: Vec<f64> = (0..a.rows).map(|r| va.row(r).iter().sum()).collect();
        let rg = self.needs(&[a]);
        self.push(Matrix::column(&sums), Op::RowSum(a), rg)
    }

    /// Sum of every entry, as a 1×1 tensor.
    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let s = self.value(a).sum();
        let rg = self.needs(&[a]);
        self.push(Matrix::scalar(s), Op::Sum(a), rg)
    }

    /// Mean negative log-likelihood of `targets[k]` under `softmax(logits[rows[k]])`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Tensor,
        rows: &[usize],
        targets: &[usize],
    ) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::Contract("cross-entropy over an empty row set".into()));
        }
        if rows.len() != targets.len() {
            return Err(Error::Contract(format!(
                "{} rows but {} targets",
                rows.len(),
                targets.len()
            )));
        }
        check_indices("softmax_cross_entropy", rows, logits.rows)?;
        check_indices("softmax_cross_entropy", targets, logits.cols)?;
        let v = self.value(logits);
        let mut probs = Matrix::zeros(rows.len(), logits.cols);
        let mut loss = 0.0;
        for (k, (&r, &t)) in rows.iter().zip(targets).enumerate() {
            let row = v.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            for (p, &x) in probs.row_mut(k).iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let value = Matrix::scalar(loss / rows.len() as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets,
    /// evaluated in the log domain.
    pub fn bce_with_logits(&mut self, logits: Tensor, targets: &[f64]) -> Result<Tensor> {
        if logits.cols != 1 || logits.rows != targets.len() {
            return Err(Error::Dimension {
                op: "bce_with_logits",
                left: logits.shape(),
                right: (targets.len(), 1),
            });
        }
        if targets.is_empty() {
            return Err(Error::Contract("binary cross-entropy over no pairs".into()));
        }
        let x = self.value(logits).as_slice();
        let total: f64 = x.iter().zip(targets).map(|(&x, &t)| softplus(x) - t * x).sum();
        let value = Matrix::scalar(total / targets.len() as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Tensor) -> Result<Gradients> {
        if loss.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                loss.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], t: Tensor, delta: Matrix) {
        if !self.nodes[t.id].requires_grad {
            return;
        }
        match &mut grads[t.id] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn wants(&self, t: Tensor) -> bool {
        self.nodes[t.id].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.wants(a) {
                    let d = g.matmul_nt(self.value(b))?;
                    self.accumulate(grads, a, d);
                }
                if self.wants(b) {
                    let d = self.value(a).matmul_tn(g)?;
                    self.accumulate(grads, b, d);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let d = g.zip_map(self.value(b), |x, y| x * y);
                    self.accumulate(grads, a, d);
                }
                if self.wants(b) {
                    let d = g.zip_map(self.value(a), |x, y| x * y);
                    self.accumulate(grads, b, d);
                }
            }
            &Op::AddRow(a, bias) => {
                self.accumulate(grads, a, g.clone());
                if self.wants(bias) {
                    let mut d = Matrix::zeros(1, bias.cols);
                    for r in 0..g.rows() {
                        for (o, x) in d.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, bias, d);
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.map(|x| x * s)),
            &Op::LeakyRelu(a, slope) => {
                let d = g.zip_map(self.value(a), |gx, x| if x >= 0.0 { gx } else { slope * gx });
                self.accumulate(grads, a, d);
            }
            &Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gx, y| gx * y * (1.0 - y));
                self.accumulate(grads, a, d);
            }
            &Op::Powf(a, p) => {
                let d = g.zip_map(self.value(a), |gx, x| gx * p * x.powf(p - 1.0));
                self.accumulate(grads, a, d);
            }
            &Op::ConcatCols(a, b) => {
                let mut da = Matrix::zeros(a.rows, a.cols);
                let mut db = Matrix::zeros(b.rows, b.cols);
                for r in 0..g.rows() {
                    let row = g.row(r);
                    da.row_mut(r).copy_from_slice(&row[..a.cols]);
                    db.row_mut(r).copy_from_slice(&row[a.cols..]);
                }
                self.accumulate(grads, a, da);
                self.accumulate(grads, b, db);
            }
            Op::Gather(h, idx) => {
                let mut d = Matrix::zeros(h.rows, h.cols);
                for (i, &r) in idx.iter().enumerate() {
                    for (o, x) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *h, d);
            }
            Op::SegmentSoftmax(scores, seg) => {
                let y = node.value.as_slice();
                let gs = g.as_slice();
                let groups = seg.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; groups];
                for ((&s, &yi), &gi) in seg.iter().zip(y).zip(gs) {
                    dot[s] += yi * gi;
                }
                let d: Vec<f64> = seg
                    .iter()
                    .zip(y)
                    .zip(gs)
                    .map(|((&s, &yi), &gi)| yi * (gi - dot[s]))
                    .collect();
                self.accumulate(grads, *scores, Matrix::column(&d));
            }
            Op::SegmentWeightedSum { weights, msgs, seg } => {
                let w = self.value(*weights);
                let m = self.value(*msgs);
                if self.wants(*weights) {
                    let d: Vec<f64> = seg
                        .iter()
                        .enumerate()
                        .map(|(e, &v)| g.row(v).iter().zip(m.row(e)).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *weights, Matrix::column(&d));
                }
                if self.wants(*msgs) {
                    let mut d = Matrix::zeros(msgs.rows, msgs.cols);
                    for (e, &v) in seg.iter().enumerate() {
                        let we = w.get(e, 0);
                        for (o, x) in d.row_mut(e).iter_mut().zip(g.row(v)) {
                            *o = we * x;
                        }
                    }
                    self.accumulate(grads, *msgs, d);
                }
            }
            &Op::RowSum(a) => {
                let mut d = Matrix::zeros(a.rows, a.cols);
                for r in 0..a.rows {
                    let gr = g.get(r, 0);
                    d.row_mut(r).iter_mut().for_each(|x| *x = gr);
                }
                self.accumulate(grads, a, d);
            }
            &Op::Sum(a) => self.accumulate(grads, a, Matrix::filled(a.rows, a.cols, g.item())),
            Op::SoftmaxCrossEntropy {
                logits,
                rows,
                targets,
                probs,
            } => {
                let scale = g.item() / rows.len() as f64;
                let mut d = Matrix::zeros(logits.rows, logits.cols);
                for (k, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                    let drow = d.row_mut(r);
                    for (o, &p) in drow.iter_mut().zip(probs.row(k)) {
                        *o += scale * p;
                    }
                    drow[t] -= scale;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::BceWithLogits { logits, targets } => {
                let scale = g.item() / targets.len() as f64;
                let x = self.value(*logits).as_slice();
                let d: Vec<f64> = x
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| scale * (stable_sigmoid(x) - t))
                    .collect();
                self.accumulate(grads, *logits, Matrix::column(&d));
            }
        }
        Ok(())
    }
}
