//! Reverse-mode differentiation over [`Tensor2D`] values.
//!
//! Every forward operation appends a node to a [`Tape`]; [`Tape::backward`]
//! walks the nodes in reverse and returns the gradient of a scalar node with
//! respect to every trainable parameter leaf that contributed to it. Nodes
//! that do not depend on a trainable leaf are skipped entirely, so frozen
//! sub-graphs cost nothing on the way back.

use super::tensor::{self, matmul, matmul_nt, matmul_tn, Tensor2D};
use super::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Which entries of a score matrix take part in a softmax.
#[derive(Debug, Clone, Copy)]
pub enum Mask<'a> {
    /// Row `i` keeps columns `0..=i`.
    Causal,
    /// Row-major keep flags; a fully masked row yields zeros.
    Keep(&'a [bool]),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var, f64),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor2D,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    RepeatRows(Var, usize),
    Reshape(Var),
    SegmentSum(Var, usize),
    Sum(Var),
    Bce {
        probs: Var,
        labels: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor2D,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor2D,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(what: &str, a: &Tensor2D, b: &Tensor2D) -> Error {
    Error::Dimension(format!(
        "{what}: {}x{} vs {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    ))
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

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor2D, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor2D) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to a store entry; gradients flow only if it is trainable.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let p = store.get(name)?;
        Ok(self.push(p.value.clone(), Op::Param(name.to_string()), p.trainable))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let y = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(y, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    /// `a + 1·row` where `row` is 1×cols.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(dim_err("add_row", av, rv));
        }
        let mut y = av.clone();
        for r in 0..y.rows() {
            for (o, b) in y.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(y, Op::AddRow(a, row), rg))
    }

    /// Scales row `i` of `a` by `col[i]` where `col` is rows×1.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(dim_err("mul_col", av, cv));
        }
        let mut y = av.clone();
        for r in 0..y.rows() {
            let s = cv.data()[r];
            for o in y.row_mut(r) {
                *o *= s;
            }
        }
        let rg = self.rg(&[a, col]);
        Ok(self.push(y, Op::MulCol(a, col), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(y, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = tensor::relu(self.value(a));
        let rg = self.rg(&[a]);
        self.push(y, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = tensor::sigmoid(self.value(a));
        let rg = self.rg(&[a]);
        self.push(y, Op::Sigmoid(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let y = tensor::softmax_rows(self.value(a), temperature)?;
        let rg = self.rg(&[a]);
        Ok(self.push(y, Op::Softmax(a, temperature), rg))
    }

    /// Row softmax restricted to kept entries; masked entries are exactly 0.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Mask<'_>) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        if let Mask::Keep(k) = mask {
            if k.len() != rows * cols {
                return Err(Error::Dimension(format!(
                    "mask of {} flags for a {rows}x{cols} matrix",
                    k.len()
                )));
            }
        }
        let keep = |r: usize, c: usize| match mask {
            Mask::Causal => c <= r,
            Mask::Keep(k) => k[r * cols + c],
        };
        let mut y = Tensor2D::zeros(rows, cols);
        for r in 0..rows {
            let xr = x.row(r);
            let max = (0..cols)
                .filter(|&c| keep(r, c))
                .map(|c| xr[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let yr = y.row_mut(r);
            let mut total = 0.0;
            for c in 0..cols {
                if keep(r, c) {
                    yr[c] = (xr[c] - max).exp();
                    total += yr[c];
                }
            }
            for v in yr.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(y, Op::MaskedSoftmax(a), rg))
    }

    /// Layer norm with 1×cols `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        if gv.shape() != (1, xv.cols()) || bv.shape() != (1, xv.cols()) {
            return Err(Error::Dimension(format!(
                "layer_norm: {} columns but gain {:?} / bias {:?}",
                xv.cols(),
                gv.shape(),
                bv.shape()
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::Domain(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut y = Tensor2D::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let (mean, inv) = tensor::row_stats(xv.row(r), eps);
            inv_std.push(inv);
            let hr = xhat.row_mut(r);
            for h in hr.iter_mut() {
                *h = (*h - mean) * inv;
            }
            for (((o, h), g), b) in y
                .row_mut(r)
                .iter_mut()
                .zip(xhat.row(r))
                .zip(gv.data())
                .zip(bv.data())
            {
                *o = h * g + b;
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Embedding lookup: row `i` of the output is row `ids[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut y = Tensor2D::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(Error::Index(format!(
                    "id {id} outside table of {} rows",
                    t.rows()
                )));
            }
            y.row_mut(i).copy_from_slice(t.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            y,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Dimension("concat_cols of nothing".into()))?;
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::Dimension(format!(
                    "concat_cols: {} rows vs {rows}",
                    v.rows()
                )));
            }
            total += v.cols();
        }
        let mut y = Tensor2D::zeros(rows, total);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                y.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(y, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.cols() {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{end} of {} columns",
                av.cols()
            )));
        }
        let mut y = Tensor2D::zeros(av.rows(), end - start);
        for r in 0..av.rows() {
            y.row_mut(r).copy_from_slice(&av.row(r)[start..end]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(y, Op::SliceCols(a, start), rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.rows() {
            return Err(Error::Dimension(format!(
                "slice_rows {start}..{end} of {} rows",
                av.rows()
            )));
        }
        let c = av.cols();
        let y = Tensor2D::new(end - start, c, av.data()[start * c..end * c].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(y, Op::SliceRows(a, start), rg))
    }

    /// Each row repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::Dimension("repeat_rows with zero repeats".into()));
        }
        let av = self.value(a);
        let mut data = Vec::with_capacity(av.len() * times);
        for r in 0..av.rows() {
            for _ in 0..times {
                data.extend_from_slice(av.row(r));
            }
        }
        let y = Tensor2D::new(av.rows() * times, av.cols(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(y, Op::RepeatRows(a, times), rg))
    }

    /// Row-major reinterpretation with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let y = Tensor2D::new(rows, cols, self.value(a).data().to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(y, Op::Reshape(a), rg))
    }

    /// Sums consecutive blocks of `seg` rows.
    pub fn segment_sum(&mut self, a: Var, seg: usize) -> Result<Var> {
        let av = self.value(a);
        if seg == 0 || av.rows() % seg != 0 {
            return Err(Error::Dimension(format!(
                "segment_sum: {} rows not divisible into blocks of {seg}",
                av.rows()
            )));
        }
        let mut y = Tensor2D::zeros(av.rows() / seg, av.cols());
        for r in 0..av.rows() {
            for (o, v) in y.row_mut(r / seg).iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(y, Op::SegmentSum(a, seg), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor2D::full(1, 1, self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(y, Op::Sum(a), rg)
    }

    /// Mean binary cross-entropy of a probability column against labels.
    pub fn bce(&mut self, probs: Var, labels: &[f64]) -> Result<Var> {
        let loss = tensor::bce_loss(self.value(probs).data(), labels)?;
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Tensor2D::full(1, 1, loss),
            Op::Bce {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean token cross-entropy, one target per logits row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let loss = tensor::ce_from_logits(lv, targets)?;
        let probs = tensor::softmax_rows(lv, 1.0)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor2D::full(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Gradient of the 1×1 node `loss` with respect to every trainable
    /// parameter leaf on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward on a node that was never recorded".into(),
            ));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor2D>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor2D::full(1, 1, 1.0));
        let mut out = Gradients::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    /// Convenience: backward then accumulate into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let g = self.backward(loss)?;
        store.accumulate(&g)
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor2D,
        grads: &mut [Option<Tensor2D>],
        out: &mut Gradients,
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, t: Tensor2D| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Param(name) => match out.get_mut(name) {
                Some(acc) => acc.add_assign(g)?,
                None => {
                    out.insert(name.clone(), g.clone());
                }
            },
            Op::MatMul(a, b) => {
                if wants(*a) {
                    send(*a, matmul_nt(g, val(*b))?)?;
                }
                if wants(*b) {
                    send(*b, matmul_tn(val(*a), g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if wants(*a) {
                    send(*a, matmul(g, val(*b))?)?;
                }
                if wants(*b) {
                    send(*b, matmul_tn(g, val(*a))?)?;
                }
            }
            Op::Transpose(a) => send(*a, g.transpose())?,
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, g.mul(val(*b))?)?;
                }
                if wants(*b) {
                    send(*b, g.mul(val(*a))?)?;
                }
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone())?;
                if wants(*row) {
                    let mut gr = Tensor2D::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    send(*row, gr)?;
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (val(*a), val(*col));
                if wants(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let s = cv.data()[r];
                        for o in ga.row_mut(r) {
                            *o *= s;
                        }
                    }
                    send(*a, ga)?;
                }
                if wants(*col) {
                    let gc: Vec<f64> = (0..g.rows())
                        .map(|r| tensor::dot(g.row(r), av.row(r)))
                        .collect();
                    send(*col, Tensor2D::col_vector(&gc))?;
                }
            }
            Op::Scale(a, s) => send(*a, g.scale(*s))?,
            Op::Relu(a) => {
                let x = val(*a);
                let mut ga = g.clone();
                for (o, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *o = 0.0;
                    }
                }
                send(*a, ga)?;
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                for (o, &y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                    *o *= y * (1.0 - y);
                }
                send(*a, ga)?;
            }
            Op::Softmax(a, tp) => send(*a, softmax_backward(&node.value, g).scale(1.0 / tp))?,
            Op::MaskedSoftmax(a) => send(*a, softmax_backward(&node.value, g))?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain);
                let n = xhat.cols() as f64;
                if wants(*x) {
                    let mut gx = Tensor2D::zeros(xhat.rows(), xhat.cols());
                    for r in 0..xhat.rows() {
                        let dxhat: Vec<f64> =
                            g.row(r).iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = tensor::dot(&dxhat, xhat.row(r));
                        let inv = inv_std[r];
                        for ((o, d), h) in gx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat.row(r)) {
                            *o = inv / n * (n * d - s1 - h * s2);
                        }
                    }
                    send(*x, gx)?;
                }
                if wants(*gain) || wants(*bias) {
                    let mut gg = Tensor2D::zeros(1, xhat.cols());
                    let mut gb = Tensor2D::zeros(1, xhat.cols());
                    for r in 0..xhat.rows() {
                        for c in 0..xhat.cols() {
                            gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            gb.data_mut()[c] += g.get(r, c);
                        }
                    }
                    send(*gain, gg)?;
                    send(*bias, gb)?;
                }
            }
            Op::Gather { table, ids } => {
                let tv = val(*table);
                let mut gt = Tensor2D::zeros(tv.rows(), tv.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                send(*table, gt)?;
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if wants(p) {
                        let mut gp = Tensor2D::zeros(g.rows(), c);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                        }
                        send(p, gp)?;
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let av = val(*a);
                let mut ga = Tensor2D::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                send(*a, ga)?;
            }
            Op::SliceRows(a, start) => {
                let av = val(*a);
                let mut ga = Tensor2D::zeros(av.rows(), av.cols());
                let c = av.cols();
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                send(*a, ga)?;
            }
            Op::RepeatRows(a, times) => {
                let av = val(*a);
                let mut ga = Tensor2D::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    for (o, v) in ga.row_mut(r / times).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                send(*a, ga)?;
            }
            Op::Reshape(a) => {
                let av = val(*a);
                send(*a, Tensor2D::new(av.rows(), av.cols(), g.data().to_vec())?)?;
            }
            Op::SegmentSum(a, seg) => {
                let av = val(*a);
                let mut ga = Tensor2D::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    ga.row_mut(r).copy_from_slice(g.row(r / seg));
                }
                send(*a, ga)?;
            }
            Op::Sum(a) => {
                let av = val(*a);
                send(*a, Tensor2D::full(av.rows(), av.cols(), g.data()[0]))?;
            }
            Op::Bce { probs, labels } => {
                let pv = val(*probs);
                let n = labels.len() as f64;
                let scale = g.data()[0] / n;
                let gd: Vec<f64> = pv
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        if p <= tensor::PROB_EPS || p >= 1.0 - tensor::PROB_EPS {
                            0.0
                        } else {
                            scale * (-y / p + (1.0 - y) / (1.0 - p))
                        }
                    })
                    .collect();
                send(*probs, Tensor2D::new(pv.rows(), pv.cols(), gd)?)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.data()[0] / targets.len() as f64;
                let mut gl = probs.scale(scale);
                for (r, &t) in targets.iter().enumerate() {
                    let v = gl.get(r, t);
                    gl.set(r, t, v - scale);
                }
                send(*logits, gl)?;
            }
        }
        Ok(())
    }
}

fn softmax_backward(y: &Tensor2D, g: &Tensor2D) -> Tensor2D {
    let mut out = Tensor2D::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let gr = g.row(r);
        let s = tensor::dot(yr, gr);
        for ((o, &yv), &gv) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - s);
        }
    }
    out
}
