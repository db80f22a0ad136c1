//! Define-by-run tape: each forward pass records primitive applications in
//! order, and [`Tape::backward`] replays them in reverse.

use std::fmt;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

/// Vector-Jacobian product of a user-supplied primitive.
///
/// Receives the input values, the output value and the upstream gradient;
/// returns one gradient per input (same shapes as the inputs).
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    RowSoftmax(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    L2Normalize {
        input: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    Sum(Var),
    MeanRows(Var),
    Trace(Var),
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    BagMean {
        table: Var,
        bags: Vec<Vec<usize>>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulScalar(a, b)
            | DivScalar(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | Tanh(a) | Relu(a) | Exp(a) | Sigmoid(a)
            | Clamp(a, _, _) | RowSoftmax(a) | LogSoftmaxRows(a) | Sum(a) | MeanRows(a)
            | Trace(a) => vec![*a],
            LayerNorm {
                input, gain, bias, ..
            } => vec![*input, *gain, *bias],
            L2Normalize { input, .. } | SliceCols { input, .. } => vec![*input],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
            GatherRows { table, .. } | BagMean { table, .. } => vec![*table],
            Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of primitive applications plus per-node gradient accumulators.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
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

    /// Records a leaf. Non-finite leaves are rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: "leaf",
                context: format!("leaf {}x{}", value.rows(), value.cols()),
            });
        }
        Ok(self.push_node(value, Op::Leaf, requires_grad))
    }

    /// Leaf that accumulates a gradient.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, if `backward` has reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like its value.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.value(v).shape();
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: name,
                context: format!(
                    "node %{} of shape {}x{}",
                    self.nodes.len(),
                    value.rows(),
                    value.cols()
                ),
            });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(value, op, requires_grad))
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a))
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, op)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |p, q| p + q)?;
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |p, q| p - q)?;
        self.push("sub", out, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |p, q| p * q)?;
        self.push("mul", out, Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::dim(
                "add_row",
                format!("{}x{} plus row {}x{}", x.rows(), x.cols(), r.rows(), r.cols()),
            ));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(a, row))
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push("scale", out, Op::Scale(a, factor))
    }

    fn check_scalar(&self, op: &'static str, s: Var) -> Result<f64> {
        let t = self.value(s);
        if t.shape() != (1, 1) {
            return Err(Error::dim(op, format!("expected 1x1 scalar, got {}x{}", t.rows(), t.cols())));
        }
        Ok(t.item())
    }

    /// Multiplication by a recorded `1 x 1` scalar.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let k = self.check_scalar("mul_scalar", s)?;
        let out = self.value(a).map(|v| v * k);
        self.push("mul_scalar", out, Op::MulScalar(a, s))
    }

    /// Division by a recorded `1 x 1` scalar.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let k = self.check_scalar("div_scalar", s)?;
        let out = self.value(a).map(|v| v / k);
        self.push("div_scalar", out, Op::DivScalar(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a))
    }

    /// Element-wise clamp to `[lo, hi]`; the gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::InvalidArgument(format!("clamp bounds lo={lo} > hi={hi}")));
        }
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp(a, lo, hi))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        self.push("row_softmax", out, Op::RowSoftmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            log_softmax_in_place(out.row_mut(i));
        }
        self.push("log_softmax_rows", out, Op::LogSoftmaxRows(a))
    }

    /// Row-wise layer normalisation with population variance.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be positive, got {eps}")));
        }
        let x = self.value(a);
        let (m, d) = x.shape();
        if d == 0 {
            return Err(Error::dim("layer_norm", "zero-width input"));
        }
        for (name, p) in [("gain", gain), ("bias", bias)] {
            let t = self.value(p);
            if t.shape() != (1, d) {
                return Err(Error::dim(
                    "layer_norm",
                    format!("{name} is {}x{}, expected 1x{d}", t.rows(), t.cols()),
                ));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Tensor::zeros(m, d);
        let mut out = Tensor::zeros(m, d);
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat.set(i, j, h);
                out.set(i, j, h * g[j] + b[j]);
            }
        }
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                input: a,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Row-wise `x / max(|x|, eps)`.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("l2_normalize eps must be positive, got {eps}")));
        }
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            let denom = n.max(eps);
            row.iter_mut().for_each(|v| *v /= denom);
        }
        self.push("l2_normalize", out, Op::L2Normalize { input: a, eps, norms })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    /// Column means: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::dim("mean_rows", "no rows"));
        }
        let mut out = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let m = x.rows() as f64;
        out.iter_mut().for_each(|v| *v /= m);
        self.push("mean_rows", Tensor::row_vector(out), Op::MeanRows(a))
    }

    /// Sum of the main diagonal.
    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = (0..x.rows().min(x.cols())).map(|i| x.get(i, i)).sum();
        self.push("trace", Tensor::scalar(s), Op::Trace(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} of {}", start + len, x.cols()),
            ));
        }
        let mut out = Tensor::zeros(x.rows(), len);
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        self.push("slice_cols", out, Op::SliceCols { input: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|p| self.value(*p).rows()).ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let mut cols = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows {
                return Err(Error::dim("concat_cols", format!("row counts {} vs {rows}", t.rows())));
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut c = 0;
            for p in parts {
                let src = self.value(*p).row(i);
                out.row_mut(i)[c..c + src.len()].copy_from_slice(src);
                c += src.len();
            }
        }
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|p| self.value(*p).cols()).ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(Error::dim("concat_rows", format!("column counts {} vs {cols}", t.cols())));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::new(rows, cols, data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()))
    }

    /// Selects rows of `table` by index (duplicates allowed).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Tensor::zeros(indices.len(), t.cols());
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= t.rows() {
                return Err(Error::dim("gather_rows", format!("row {idx} of {}", t.rows())));
            }
            out.row_mut(i).copy_from_slice(t.row(idx));
        }
        self.push(
            "gather_rows",
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    /// One output row per bag: the mean of the bag's table rows, or zeros for an empty bag.
    pub fn bag_mean(&mut self, table: Var, bags: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Tensor::zeros(bags.len(), t.cols());
        for (i, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                continue;
            }
            let row = out.row_mut(i);
            for &idx in bag {
                if idx >= t.rows() {
                    return Err(Error::dim("bag_mean", format!("row {idx} of {}", t.rows())));
                }
                for (o, v) in row.iter_mut().zip(t.row(idx)) {
                    *o += v;
                }
            }
            let n = bag.len() as f64;
            row.iter_mut().for_each(|v| *v /= n);
        }
        self.push(
            "bag_mean",
            out,
            Op::BagMean {
                table,
                bags: bags.to_vec(),
            },
        )
    }

    /// Records a primitive whose forward value is already computed and whose
    /// vector-Jacobian product is supplied by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Result<Var> {
        self.push(
            "custom",
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    // ---- reverse pass -----------------------------------------------------

    /// Propagates `d loss / d node` to every node that requires a gradient and
    /// adds it to that node's accumulator. Calling twice doubles the gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::dim(
                "backward",
                format!("loss must be 1x1, got {}x{}", shape.0, shape.1),
            ));
        }
        let mut adjoint: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adjoint[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adjoint[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (input, contrib) in self.input_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adjoint[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let elementwise = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            // f(upstream, input, output)
            let x = val(a);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&gv, &xv), &yv)| f(gv, xv, yv))
                .collect();
            Tensor::new(x.rows(), x.cols(), data).expect("shape preserved")
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => vec![
                (*a, g.matmul_t(val(*b)).expect("matmul backward")),
                (*b, val(*a).t_matmul(g).expect("matmul backward")),
            ],
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let times = |other: &Tensor| {
                    let data = g.data().iter().zip(other.data()).map(|(p, q)| p * q).collect();
                    Tensor::new(g.rows(), g.cols(), data).expect("shape preserved")
                };
                vec![(*a, times(val(*b))), (*b, times(val(*a)))]
            }
            Op::AddRow(a, row) => {
                let mut gr = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (acc, v) in gr.iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                vec![(*a, g.clone()), (*row, Tensor::row_vector(gr))]
            }
            Op::Scale(a, k) => vec![(*a, g.map(|v| v * k))],
            Op::MulScalar(a, s) => {
                let k = val(*s).item();
                let gs: f64 = g.data().iter().zip(val(*a).data()).map(|(p, q)| p * q).sum();
                vec![(*a, g.map(|v| v * k)), (*s, Tensor::scalar(gs))]
            }
            Op::DivScalar(a, s) => {
                let k = val(*s).item();
                let gs: f64 = g.data().iter().zip(val(*a).data()).map(|(p, q)| p * q).sum();
                vec![(*a, g.map(|v| v / k)), (*s, Tensor::scalar(-gs / (k * k)))]
            }
            Op::Tanh(a) => vec![(*a, elementwise(*a, &|gv, _, yv| gv * (1.0 - yv * yv)))],
            Op::Relu(a) => vec![(*a, elementwise(*a, &|gv, xv, _| if xv > 0.0 { gv } else { 0.0 }))],
            Op::Exp(a) => vec![(*a, elementwise(*a, &|gv, _, yv| gv * yv))],
            Op::Sigmoid(a) => vec![(*a, elementwise(*a, &|gv, _, yv| gv * yv * (1.0 - yv)))],
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                vec![(
                    *a,
                    elementwise(*a, &|gv, xv, _| if xv > lo && xv < hi { gv } else { 0.0 }),
                )]
            }
            Op::RowSoftmax(a) => {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for (o, (gv, yv)) in ga.row_mut(r).iter_mut().zip(gr.iter().zip(yr)) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![(*a, ga)]
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let total: f64 = gr.iter().sum();
                    for (o, (gv, yv)) in ga.row_mut(r).iter_mut().zip(gr.iter().zip(yr)) {
                        *o = gv - yv.exp() * total;
                    }
                }
                vec![(*a, ga)]
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gamma = val(*gain).data();
                let (m, d) = g.shape();
                let mut gx = Tensor::zeros(m, d);
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for r in 0..m {
                    let (gr, hr) = (g.row(r), xhat.row(r));
                    let mut mean_gh = 0.0;
                    let mut mean_gh_h = 0.0;
                    for j in 0..d {
                        ggain[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                        let gh = gr[j] * gamma[j];
                        mean_gh += gh;
                        mean_gh_h += gh * hr[j];
                    }
                    mean_gh /= d as f64;
                    mean_gh_h /= d as f64;
                    let out = gx.row_mut(r);
                    for j in 0..d {
                        let gh = gr[j] * gamma[j];
                        out[j] = rstd[r] * (gh - mean_gh - hr[j] * mean_gh_h);
                    }
                }
                vec![
                    (*input, gx),
                    (*gain, Tensor::row_vector(ggain)),
                    (*bias, Tensor::row_vector(gbias)),
                ]
            }
            Op::L2Normalize { input, eps, norms } => {
                let mut gx = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let out = gx.row_mut(r);
                    if norms[r] >= *eps {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for j in 0..gr.len() {
                            out[j] = (gr[j] - yr[j] * dot) / norms[r];
                        }
                    } else {
                        for j in 0..gr.len() {
                            out[j] = gr[j] / eps;
                        }
                    }
                }
                vec![(*input, gx)]
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, Tensor::filled(r, c, g.item()))]
            }
            Op::MeanRows(a) => {
                let (m, n) = val(*a).shape();
                let mut ga = Tensor::zeros(m, n);
                for r in 0..m {
                    for (o, v) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v / m as f64;
                    }
                }
                vec![(*a, ga)]
            }
            Op::Trace(a) => {
                let (m, n) = val(*a).shape();
                let mut ga = Tensor::zeros(m, n);
                for k in 0..m.min(n) {
                    ga.set(k, k, g.item());
                }
                vec![(*a, ga)]
            }
            Op::SliceCols { input, start } => {
                let (m, n) = val(*input).shape();
                let mut ga = Tensor::zeros(m, n);
                for r in 0..m {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                vec![(*input, ga)]
            }
            Op::ConcatCols(parts) => {
                let mut c = 0;
                parts
                    .iter()
                    .map(|p| {
                        let w = val(*p).cols();
                        let mut gp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[c..c + w]);
                        }
                        c += w;
                        (*p, gp)
                    })
                    .collect()
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let (h, w) = val(*p).shape();
                        let gp = Tensor::new(h, w, g.data()[offset * w..(offset + h) * w].to_vec())
                            .expect("concat_rows backward");
                        offset += h;
                        (*p, gp)
                    })
                    .collect()
            }
            Op::GatherRows { table, indices } => {
                let (m, n) = val(*table).shape();
                let mut gt = Tensor::zeros(m, n);
                for (i, &idx) in indices.iter().enumerate() {
                    for (o, v) in gt.row_mut(idx).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                vec![(*table, gt)]
            }
            Op::BagMean { table, bags } => {
                let (m, n) = val(*table).shape();
                let mut gt = Tensor::zeros(m, n);
                for (i, bag) in bags.iter().enumerate() {
                    let w = 1.0 / bag.len().max(1) as f64;
                    for &idx in bag {
                        for (o, v) in gt.row_mut(idx).iter_mut().zip(g.row(i)) {
                            *o += v * w;
                        }
                    }
                }
                vec![(*table, gt)]
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                inputs.iter().copied().zip(backward(&values, y, g)).collect()
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter_mut().for_each(|v| *v = *v - max - lse);
}
