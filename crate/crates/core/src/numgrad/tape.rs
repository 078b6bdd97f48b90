use rand::Rng as _;

use super::{gemm, Grads, NumError, ParamId, ParamStore, Rng, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Conditions that produced a defined-but-degenerate result.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TapeWarnings {
    /// A masked cross-entropy saw no labelled position; it returned 0.
    pub empty_cross_entropy: bool,
    /// A masked softmax row had every entry masked; it returned zeros.
    pub fully_masked_softmax: bool,
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    MulConst {
        x: Var,
        c: Tensor,
    },
    Scale {
        x: Var,
        s: f64,
    },
    Passthrough(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<i64>,
        probs: Vec<f64>,
        denom: f64,
    },
    Sum(Var),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Ordered record of operations for reverse-mode differentiation.
///
/// Parameters are borrowed from a [`ParamStore`] for the tape's lifetime, so
/// a forward pass never copies weights. A tape belongs to one thread.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    warnings: TapeWarnings,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumError {
    NumError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            warnings: TapeWarnings::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn warnings(&self) -> TapeWarnings {
        self.warnings
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.tensor()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant (no gradient flows into it).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a trainable parameter by reference.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(store.get(id)),
            op: Op::Leaf,
            param: Some(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Matrix product of the 2-D views `op(a)·op(b)`, where `op` optionally
    /// transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ar, ac) = (av.rows(), av.cols());
        let (br, bc) = (bv.rows(), bv.cols());
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 || av.shape().len() > 2 || bv.shape().len() > 2 {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(av.data(), bv.data(), m, k, n, ta, tb, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.matmul_t(a, b, false, false)
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(shape_err("add_row", xv, bv));
        }
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddRow { x, bias }, rg))
    }

    /// `x @ w + b` for a row-major batch of vectors.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var, NumError> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return Err(shape_err("mul_const", xv, &c));
        }
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MulConst { x, c }, rg))
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var, NumError> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return Err(shape_err("add_const", xv, c));
        }
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Passthrough(x), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, s }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NumError> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Passthrough(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose2();
        let rg = self.rg(x);
        self.push(t, Op::Transpose(x), rg)
    }

    /// Joins 2-D values side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = parts
            .first()
            .ok_or_else(|| NumError::InvalidArgument("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), v));
            }
            total += v.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks 2-D values vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = parts
            .first()
            .ok_or_else(|| NumError::InvalidArgument("concat of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), v));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let v = self.value(x);
        if start > end || end > v.rows() {
            return Err(NumError::InvalidArgument(format!(
                "row slice {start}..{end} of {:?}",
                v.shape()
            )));
        }
        let c = v.cols();
        let data = v.data()[start * c..end * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![end - start, c], data)?, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let v = self.value(x);
        if start > end || end > v.cols() {
            return Err(NumError::InvalidArgument(format!(
                "column slice {start}..{end} of {:?}",
                v.shape()
            )));
        }
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![rows, end - start], data)?, Op::SliceCols { x, start }, rg))
    }

    /// Selects rows of `table` (an embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        let tv = self.value(table);
        let c = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= tv.rows() {
                return Err(NumError::InvalidArgument(format!(
                    "gather index {i} out of {} rows",
                    tv.rows()
                )));
            }
            data.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), c], data)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_masked(x, None)
    }

    /// Row softmax with max subtraction. Columns where `keep` is false get
    /// probability 0; a row with nothing kept comes out all zeros and sets
    /// [`TapeWarnings::fully_masked_softmax`].
    pub fn softmax_masked(&mut self, x: Var, keep: Option<&[bool]>) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![0.0; xv.len()];
        let mut empty_row = false;
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let kept = |j: usize| keep.is_none_or(|k| k[j]);
            let max = (0..c).filter(|&j| kept(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                empty_row = true;
                continue;
            }
            let o = &mut out[r * c..(r + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                if kept(j) {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        if empty_row {
            self.warnings.fully_masked_softmax = true;
        }
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(t, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    /// Inverted dropout: keeps each entry with probability `1 - p` and scales
    /// survivors by `1 / (1 - p)`. `p = 0` records nothing.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Result<Var, NumError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumError::InvalidArgument(format!("dropout rate {p}")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.shape(x), p, rng);
        self.mul_const(x, mask)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean cross-entropy of row logits against integer labels, skipping rows
    /// labelled `-1`. With no labelled row the loss is 0 with zero gradient
    /// and [`TapeWarnings::empty_cross_entropy`] is set.
    pub fn cross_entropy_masked(&mut self, logits: Var, labels: &[i64]) -> Result<Var, NumError> {
        let count = labels.iter().filter(|&&l| l >= 0).count();
        self.cross_entropy_with_denominator(logits, labels, count as f64)
    }

    /// As [`Tape::cross_entropy_masked`] but divides the summed loss by
    /// `denom` instead of the local count, so partial batches can be summed.
    pub fn cross_entropy_with_denominator(&mut self, logits: Var, labels: &[i64], denom: f64) -> Result<Var, NumError> {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        if labels.len() != rows {
            return Err(NumError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let mut probs = vec![0.0; rows * c];
        let mut total = 0.0;
        let mut any = false;
        for (r, &label) in labels.iter().enumerate() {
            if label < 0 {
                continue;
            }
            let label = label as usize;
            if label >= c {
                return Err(NumError::InvalidArgument(format!("label {label} out of {c} classes")));
            }
            any = true;
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - log_z).exp();
            }
            total += log_z - row[label];
        }
        let (loss, denom) = if any && denom > 0.0 {
            (total / denom, denom)
        } else {
            self.warnings.empty_cross_entropy = true;
            (0.0, 0.0)
        };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                denom,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns parameter gradients and
    /// clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Grads, NumError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut out = Grads::new();

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(pid) = node.param {
                out.accumulate(pid, g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
        }
        self.nodes.clear();
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), NumError> {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.tensor();
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| {
            let slot = &mut grads[v.0];
            match slot {
                Some(s) => s.add_assign(&t),
                None => *slot = Some(t),
            }
        };
        let out = nodes[i].value.tensor();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (av, bv) = (val(a), val(b));
                let (m, n) = (out.rows(), out.cols());
                let k = if ta { av.rows() } else { av.cols() };
                if wants(a) {
                    let mut da = vec![0.0; av.len()];
                    if ta {
                        gemm(bv.data(), g.data(), k, n, m, tb, true, &mut da, false);
                    } else {
                        gemm(g.data(), bv.data(), m, n, k, false, !tb, &mut da, false);
                    }
                    acc(a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if wants(b) {
                    let mut db = vec![0.0; bv.len()];
                    if tb {
                        gemm(g.data(), av.data(), n, m, k, true, ta, &mut db, false);
                    } else {
                        gemm(av.data(), g.data(), k, m, n, !ta, false, &mut db, false);
                    }
                    acc(b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    acc(*a, Tensor::new(av.shape().to_vec(), d)?);
                }
                if wants(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    acc(*b, Tensor::new(bv.shape().to_vec(), d)?);
                }
            }
            Op::AddRow { x, bias } => {
                if wants(*x) {
                    acc(*x, g.clone());
                }
                if wants(*bias) {
                    let bv = val(*bias);
                    let mut db = vec![0.0; bv.len()];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(*bias, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::MulConst { x, c } => {
                if wants(*x) {
                    let d = g.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
                    acc(*x, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Scale { x, s } => {
                if wants(*x) {
                    acc(*x, g.map(|v| v * s));
                }
            }
            Op::Passthrough(x) => {
                if wants(*x) {
                    acc(*x, g.clone().reshape(val(*x).shape().to_vec())?);
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    acc(*x, g.transpose2());
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.cols();
                    if wants(p) {
                        let mut d = Vec::with_capacity(pv.len());
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        acc(p, Tensor::new(pv.shape().to_vec(), d)?);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let len = pv.len();
                    if wants(p) {
                        let d = g.data()[offset..offset + len].to_vec();
                        acc(p, Tensor::new(pv.shape().to_vec(), d)?);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let xv = val(*x);
                    let c = xv.cols();
                    let mut d = Tensor::zeros(xv.shape());
                    d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(*x, d);
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let xv = val(*x);
                    let w = g.cols();
                    let mut d = Tensor::zeros(xv.shape());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                    }
                    acc(*x, d);
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let tv = val(*table);
                    let mut d = Tensor::zeros(tv.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*table, d);
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let c = out.cols();
                    let mut d = vec![0.0; out.len()];
                    for r in 0..out.rows() {
                        let p = out.row(r);
                        let gr = g.row(r);
                        let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[r * c + j] = p[j] * (gr[j] - dot);
                        }
                    }
                    acc(*x, Tensor::new(out.shape().to_vec(), d)?);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = val(*gamma);
                let c = out.cols();
                let rows = out.rows();
                if wants(*gamma) || wants(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += g.data()[r * c + j] * xhat[r * c + j];
                            db[j] += g.data()[r * c + j];
                        }
                    }
                    if wants(*gamma) {
                        acc(*gamma, Tensor::new(gv.shape().to_vec(), dg)?);
                    }
                    if wants(*beta) {
                        acc(*beta, Tensor::new(val(*beta).shape().to_vec(), db)?);
                    }
                }
                if wants(*x) {
                    let mut d = vec![0.0; out.len()];
                    let nf = c as f64;
                    for r in 0..rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..c {
                            let dh = g.data()[r * c + j] * gv.data()[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * c + j];
                        }
                        for j in 0..c {
                            let dh = g.data()[r * c + j] * gv.data()[j];
                            d[r * c + j] = inv_std[r] / nf * (nf * dh - sum_dh - xhat[r * c + j] * sum_dh_h);
                        }
                    }
                    acc(*x, Tensor::new(out.shape().to_vec(), d)?);
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    let d = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gg, v)| if *v > 0.0 { *gg } else { 0.0 })
                        .collect();
                    acc(*x, Tensor::new(xv.shape().to_vec(), d)?);
                }
            }
            Op::Tanh(x) => {
                if wants(*x) {
                    let d = g.data().iter().zip(out.data()).map(|(gg, y)| gg * (1.0 - y * y)).collect();
                    acc(*x, Tensor::new(out.shape().to_vec(), d)?);
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let d = g.data().iter().zip(out.data()).map(|(gg, y)| gg * y * (1.0 - y)).collect();
                    acc(*x, Tensor::new(out.shape().to_vec(), d)?);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                denom,
            } => {
                if wants(*logits) {
                    let lv = val(*logits);
                    let c = lv.cols();
                    let mut d = vec![0.0; lv.len()];
                    if *denom > 0.0 {
                        let s = g.item() / denom;
                        for (r, &label) in labels.iter().enumerate() {
                            if label < 0 {
                                continue;
                            }
                            for j in 0..c {
                                d[r * c + j] = s * probs[r * c + j];
                            }
                            d[r * c + label as usize] -= s;
                        }
                    }
                    acc(*logits, Tensor::new(lv.shape().to_vec(), d)?);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    acc(*x, Tensor::full(val(*x).shape(), g.item()));
                }
            }
        }
        Ok(())
    }
}

/// Inverted-dropout multiplier mask.
pub(crate) fn dropout_mask(shape: &[usize], p: f64, rng: &mut Rng) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    let mut m = Tensor::zeros(shape);
    for v in m.data_mut() {
        *v = if rng.random::<f64>() < p { 0.0 } else { keep };
    }
    m
}
