//! Dynamic tape. Nodes are appended in construction order, which is a valid
//! topological order, and backward walks the tape once in reverse.

use super::{softmax_rows_in_place, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Sum(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    LayerNormRows(Var, Vec<f64>),
    Frobenius(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; all zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => {
                let shape = self.shapes[v.0].clone();
                let n = shape.iter().product();
                Tensor::new(shape, vec![0.0; n]).expect("node shapes are valid")
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(t) => t,
            None => {
                let shape = self.shapes[v.0].clone();
                let n = shape.iter().product();
                Tensor::new(shape, vec![0.0; n]).expect("node shapes are valid")
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], contrib: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n]).expect("node shapes are valid")
    });
    contrib(t.data_mut());
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rec, rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, rec: Op) -> Var {
        let va = self.value(a);
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
            .expect("elementwise map preserves shape");
        let rg = self.rg(&[a]);
        self.push(value, rec, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    fn row_broadcast(
        &mut self,
        op: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        rec: Op,
    ) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        let (_, c) = va.dims2(op)?;
        let (rr, rc) = vr.dims2(op)?;
        if rr != 1 || rc != c {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: va.shape().to_vec(),
                rhs: vr.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .chunks(c)
            .flat_map(|r| r.iter().zip(vr.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, rec, rg))
    }

    /// Adds a `1×c` row to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    /// Multiplies every row of an `r×c` matrix elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (_, c) = va.dims2("softmax_rows")?;
        let mut data = va.data().to_vec();
        softmax_rows_in_place(&mut data, c);
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (_, c) = va.dims2("log_softmax_rows")?;
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LogSoftmaxRows(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(sigmoid(x))`, stable for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Column means of an `r×c` matrix, as a `1×c` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = va.dims2("mean_rows")?;
        let mut out = vec![0.0; c];
        for row in va.data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::row_vector(out), Op::MeanRows(a), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat_rows" })?;
        let (_, c) = self.value(first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let vp = self.value(p);
            let (r, pc) = vp.dims2("concat_rows")?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: vp.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(vp.data());
        }
        let value = Tensor::matrix(rows, c, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat_cols" })?;
        let (r, _) = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let vp = self.value(p);
            let (pr, pc) = vp.dims2("concat_cols")?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: vp.shape().to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::matrix(r, total, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(a).gather_rows(idx)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = va.dims2("slice_cols")?;
        if start >= end || end > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end.max(start),
                extent: c,
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for row in va.data().chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let value = Tensor::matrix(r, w, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start, end), rg))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let va = self.value(a);
        let (_, c) = va.dims2("layer_norm_rows")?;
        let mut data = va.data().to_vec();
        let mut inv_std = Vec::with_capacity(va.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LayerNormRows(a, inv_std), rg))
    }

    /// Frobenius norm as a `1×1` tensor.
    pub fn frobenius(&mut self, a: Var) -> Var {
        let n = self.value(a).frobenius();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(n), Op::Frobenius(a), rg)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        // Routes a contribution to an input if it participates in differentiation.
        macro_rules! to {
            ($v:expr, |$buf:ident| $body:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let shape = self.nodes[v.0].value.shape().to_vec();
                    accumulate(&mut grads[v.0], &shape, |$buf: &mut [f64]| $body);
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                to!(*a, |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o += g));
                to!(*b, |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o += g));
            }
            Op::Sub(a, b) => {
                to!(*a, |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o += g));
                to!(*b, |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                to!(*a, |buf| for k in 0..buf.len() {
                    buf[k] += gd[k] * vb[k];
                });
                to!(*b, |buf| for k in 0..buf.len() {
                    buf[k] += gd[k] * va[k];
                });
            }
            Op::Scale(a, s) => {
                to!(*a, |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o += s * g));
            }
            Op::AddRow(a, r) => {
                let c = y.cols();
                to!(*a, |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o += g));
                to!(*r, |buf| for row in gd.chunks(c) {
                    buf.iter_mut().zip(row).for_each(|(o, g)| *o += g);
                });
            }
            Op::MulRow(a, r) => {
                let c = y.cols();
                let (va, vr) = (self.value(*a).data(), self.value(*r).data());
                to!(*a, |buf| for (k, o) in buf.iter_mut().enumerate() {
                    *o += gd[k] * vr[k % c];
                });
                to!(*r, |buf| for (k, &gk) in gd.iter().enumerate() {
                    buf[k % c] += gk * va[k];
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.rows(), va.cols());
                let n = vb.cols();
                // dA = G Bᵀ
                to!(*a, |buf| for r in 0..m {
                    let grow = &gd[r * n..(r + 1) * n];
                    for p in 0..k {
                        let brow = &vb.data()[p * n..(p + 1) * n];
                        buf[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                });
                // dB = Aᵀ G
                to!(*b, |buf| for r in 0..m {
                    let grow = &gd[r * n..(r + 1) * n];
                    for p in 0..k {
                        let arp = va.data()[r * k + p];
                        if arp == 0.0 {
                            continue;
                        }
                        let orow = &mut buf[p * n..(p + 1) * n];
                        orow.iter_mut().zip(grow).for_each(|(o, g)| *o += arp * g);
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (y.rows(), y.cols());
                // y is r×c, input is c×r
                to!(*a, |buf| for i in 0..r {
                    for j in 0..c {
                        buf[j * r + i] += gd[i * c + j];
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = y.cols();
                to!(
                    *a,
                    |buf| for (r, (yrow, grow)) in y.data().chunks(c).zip(gd.chunks(c)).enumerate() {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            buf[r * c + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                );
            }
            Op::LogSoftmaxRows(a) => {
                let c = y.cols();
                to!(
                    *a,
                    |buf| for (r, (yrow, grow)) in y.data().chunks(c).zip(gd.chunks(c)).enumerate() {
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..c {
                            buf[r * c + j] += grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                );
            }
            Op::Exp(a) => {
                to!(*a, |buf| for k in 0..buf.len() {
                    buf[k] += gd[k] * y.data()[k];
                });
            }
            Op::Log(a) => {
                let va = self.value(*a).data();
                to!(*a, |buf| for k in 0..buf.len() {
                    buf[k] += gd[k] / va[k];
                });
            }
            Op::Sigmoid(a) => {
                to!(*a, |buf| for k in 0..buf.len() {
                    let s = y.data()[k];
                    buf[k] += gd[k] * s * (1.0 - s);
                });
            }
            Op::LogSigmoid(a) => {
                let va = self.value(*a).data();
                to!(*a, |buf| for k in 0..buf.len() {
                    buf[k] += gd[k] * sigmoid(-va[k]);
                });
            }
            Op::Tanh(a) => {
                to!(*a, |buf| for k in 0..buf.len() {
                    let t = y.data()[k];
                    buf[k] += gd[k] * (1.0 - t * t);
                });
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                to!(*a, |buf| for k in 0..buf.len() {
                    buf[k] += gd[k] * gelu_grad(va[k]);
                });
            }
            Op::Sum(a) => {
                to!(*a, |buf| buf.iter_mut().for_each(|o| *o += gd[0]));
            }
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let (r, c) = (va.rows(), va.cols());
                to!(*a, |buf| for (k, o) in buf.iter_mut().enumerate() {
                    *o += gd[k % c] / r as f64;
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let seg = &gd[offset..offset + n];
                    to!(p, |buf| buf.iter_mut().zip(seg).for_each(|(o, g)| *o += g));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    to!(p, |buf| for (r, brow) in buf.chunks_mut(w).enumerate() {
                        let grow = &gd[r * total + col..r * total + col + w];
                        brow.iter_mut().zip(grow).for_each(|(o, g)| *o += g);
                    });
                    col += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let c = y.cols();
                to!(*a, |buf| for (k, &src) in idx.iter().enumerate() {
                    let grow = &gd[k * c..(k + 1) * c];
                    buf[src * c..(src + 1) * c]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(o, g)| *o += g);
                });
            }
            Op::SliceCols(a, start, end) => {
                let w = end - start;
                let c = self.value(*a).cols();
                to!(*a, |buf| for (r, grow) in gd.chunks(w).enumerate() {
                    buf[r * c + start..r * c + end]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(o, g)| *o += g);
                });
            }
            Op::LayerNormRows(a, inv_std) => {
                let c = y.cols();
                let n = c as f64;
                to!(
                    *a,
                    |buf| for (r, (yrow, grow)) in y.data().chunks(c).zip(gd.chunks(c)).enumerate() {
                        let gsum: f64 = grow.iter().sum();
                        let gy: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        let inv = inv_std[r];
                        for j in 0..c {
                            buf[r * c + j] += inv / n * (n * grow[j] - gsum - yrow[j] * gy);
                        }
                    }
                );
            }
            Op::Frobenius(a) => {
                let norm = y.data()[0];
                let va = self.value(*a).data();
                if norm > 0.0 {
                    to!(*a, |buf| for k in 0..buf.len() {
                        buf[k] += gd[0] * va[k] / norm;
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row_vector(vec![0.0, 0.0]));
        let s = g.softmax_rows(a).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let b = g.constant(Tensor::row_vector(vec![1f64.ln(), 3f64.ln()]));
        let s = g.softmax_rows(b).unwrap();
        assert!((g.value(s).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(s).data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let a = g.constant(rand_tensor(&mut rng, 7, 5).clone());
        let big = g.scale(a, 4.0);
        let s = g.softmax_rows(big).unwrap();
        for row in g.value(s).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row_vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row_vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::scalar(3.0));
        let loss = g.scale(c, 2.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_cross_entropy_at_uniform_logits() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::row_vector(vec![0.0, 0.0]));
        let ls = g.log_softmax_rows(z).unwrap();
        let onehot = g.constant(Tensor::row_vector(vec![1.0, 0.0]));
        let picked = g.mul(ls, onehot).unwrap();
        let s = g.sum(picked);
        let loss = g.scale(s, -1.0);
        assert!((g.value(loss).data()[0] - 2f64.ln()).abs() < 1e-15);
        let grads = g.backward(loss).unwrap();
        let gz = grads.get(z);
        assert!((gz.data()[0] + 0.5).abs() < 1e-15);
        assert!((gz.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row_vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(2, 3));
        let b = g.leaf(Tensor::zeros(3, 2));
        match g.add(a, b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let r = g.leaf(Tensor::zeros(1, 2));
        assert!(g.add_row(a, r).is_err());
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, 4, 3);
        let w = rand_tensor(&mut rng, 3, 3);
        let run = || {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let wv = g.leaf(w.clone());
            let h = g.matmul(xv, wv).unwrap();
            let s = g.softmax_rows(h).unwrap();
            let n = g.layer_norm_rows(s, 1e-5).unwrap();
            let t = g.gelu(n);
            let loss = g.frobenius(t);
            let grads = g.backward(loss).unwrap();
            (grads.get(xv), grads.get(wv))
        };
        let (a, b) = run();
        let (c, d) = run();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            c.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            d.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    type Unary = fn(&mut Graph, Var) -> Result<Var>;

    /// Every primitive against central differences on 10 random shapes.
    #[test]
    fn primitives_match_finite_differences() {
        let unary: Vec<(&str, Unary)> = vec![
            ("scale", |g, a| Ok(g.scale(a, -1.7))),
            ("transpose", |g, a| g.transpose(a)),
            ("softmax_rows", |g, a| g.softmax_rows(a)),
            ("log_softmax_rows", |g, a| g.log_softmax_rows(a)),
            ("exp", |g, a| Ok(g.exp(a))),
            ("log", |g, a| {
                let e = g.exp(a);
                Ok(g.log(e))
            }),
            ("sigmoid", |g, a| Ok(g.sigmoid(a))),
            ("log_sigmoid", |g, a| Ok(g.log_sigmoid(a))),
            ("tanh", |g, a| Ok(g.tanh(a))),
            ("gelu", |g, a| Ok(g.gelu(a))),
            ("mean_rows", |g, a| g.mean_rows(a)),
            ("layer_norm_rows", |g, a| g.layer_norm_rows(a, 1e-5)),
            ("frobenius", |g, a| Ok(g.frobenius(a))),
            ("gather_rows", |g, a| {
                let r = g.value(a).rows();
                g.gather_rows(a, &[r - 1, 0, r - 1])
            }),
            ("slice_cols", |g, a| {
                let c = g.value(a).cols();
                g.slice_cols(a, c / 2, c)
            }),
            ("concat_rows", |g, a| g.concat_rows(&[a, a])),
            ("concat_cols", |g, a| g.concat_cols(&[a, a])),
        ];
        type Binary = fn(&mut Graph, Var, Var) -> Result<Var>;
        let binary: Vec<(&str, Binary)> = vec![
            ("add", |g, a, b| g.add(a, b)),
            ("sub", |g, a, b| g.sub(a, b)),
            ("mul", |g, a, b| g.mul(a, b)),
            ("matmul", |g, a, b| {
                let bt = g.transpose(b)?;
                g.matmul(a, bt)
            }),
            ("add_row", |g, a, b| {
                let r = g.gather_rows(b, &[0])?;
                g.add_row(a, r)
            }),
            ("mul_row", |g, a, b| {
                let r = g.gather_rows(b, &[0])?;
                g.mul_row(a, r)
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..10 {
            let r = rng.random_range(1..5);
            let c = rng.random_range(2..6);
            let a = rand_tensor(&mut rng, r, c);
            let b = rand_tensor(&mut rng, r, c);
            // A fixed random readout turns any output into a scalar with generic gradients.
            let readout = |g: &mut Graph, out: Var| -> Result<Var> {
                let (orr, oc) = g.value(out).dims2("readout")?;
                let mut wr = ChaCha8Rng::seed_from_u64(orr as u64 * 31 + oc as u64);
                let wv = g.constant(rand_tensor(&mut wr, orr, oc));
                let p = g.mul(out, wv)?;
                Ok(g.sum(p))
            };
            for (name, op) in &unary {
                let rep = finite_diff_check(std::slice::from_ref(&a), 1e-5, |g, v| {
                    let out = op(g, v[0])?;
                    readout(g, out)
                })
                .unwrap();
                assert!(rep.max_rel_error < 1e-4, "{name} trial {trial}: {}", rep.max_rel_error);
            }
            for (name, op) in &binary {
                let rep = finite_diff_check(&[a.clone(), b.clone()], 1e-5, |g, v| {
                    let out = op(g, v[0], v[1])?;
                    readout(g, out)
                })
                .unwrap();
                assert!(rep.max_rel_error < 1e-4, "{name} trial {trial}: {}", rep.max_rel_error);
            }
        }
    }
}
