//! Define-by-run tape over dense matrices.
//!
//! Every primitive appends one node holding its forward value. Nodes only
//! reference earlier ids, so insertion order is a topological order and the
//! backward pass is a single reverse sweep. A tape is built, differentiated
//! and dropped once per training step.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{LabError, Result};
use crate::matrix::{gemm, Cholesky, DenseMatrix};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Parameter,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Elu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Powf(NodeId, f64),
    NormalizeRows(NodeId, Vec<f64>),
    SoftmaxRows(NodeId),
    LogSumExpRows(NodeId),
    FrobeniusSq(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ColumnMean(NodeId),
    RowSum(NodeId),
    ConcatRows(Vec<NodeId>),
    SelectRows(NodeId, Vec<usize>),
    SpdSolve(NodeId, NodeId, Box<Cholesky>),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    LayerNormRows(NodeId, Vec<f64>),
    SegmentAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: Arc<Vec<Vec<usize>>>,
        scale: f64,
        probs: Vec<DenseMatrix>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Parameter => "parameter",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Elu(..) => "elu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Powf(..) => "powf",
            Op::NormalizeRows(..) => "normalize_rows",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSumExpRows(..) => "logsumexp_rows",
            Op::FrobeniusSq(..) => "frobenius_sq",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ColumnMean(..) => "column_mean",
            Op::RowSum(..) => "row_sum",
            Op::ConcatRows(..) => "concat_rows",
            Op::SelectRows(..) => "select_rows",
            Op::SpdSolve(..) => "spd_solve",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::LayerNormRows(..) => "layer_norm_rows",
            Op::SegmentAttention { .. } => "segment_attention",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: DenseMatrix,
}

/// Append-only record of differentiable operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    parameters: Vec<NodeId>,
}

/// Gradients of a scalar root with respect to every trainable parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<NodeId, DenseMatrix>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.grads.get(&id)
    }

    /// Gradient for `id`; panics if `id` is not a parameter of the tape.
    pub fn of(&self, id: NodeId) -> &DenseMatrix {
        self.grads
            .get(&id)
            .unwrap_or_else(|| panic!("node {} is not a parameter", id.0))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &DenseMatrix)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn mismatch(op: &'static str, a: &DenseMatrix, b: &DenseMatrix) -> LabError {
    LabError::ShapeMismatch {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
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

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).item()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).shape()
    }

    pub fn parameters(&self) -> &[NodeId] {
        &self.parameters
    }

    fn push(&mut self, op: Op, value: DenseMatrix) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(LabError::NonFinite(op.name()));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        Ok(id)
    }

    fn v(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Result<NodeId> {
        self.push(Op::Constant, value)
    }

    /// Records a trainable leaf; `backward` reports a gradient for it.
    pub fn parameter(&mut self, value: DenseMatrix) -> Result<NodeId> {
        let id = self.push(Op::Parameter, value)?;
        self.parameters.push(id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.v(a).matmul(self.v(b))?;
        self.push(Op::MatMul(a, b), value)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.v(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.v(a).shape() != self.v(b).shape() {
            return Err(mismatch(op, self.v(a), self.v(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let value = self.v(a).zip_map(self.v(b), |x, y| x + y);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let value = self.v(a).zip_map(self.v(b), |x, y| x - y);
        self.push(Op::Sub(a, b), value)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let value = self.v(a).zip_map(self.v(b), |x, y| x * y);
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        if !s.is_finite() {
            return Err(LabError::invalid("scale factor must be finite"));
        }
        let value = self.v(a).scale(s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn elu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.v(a).map(elu);
        self.push(Op::Elu(a), value)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.v(a).map(f64::exp);
        self.push(Op::Exp(a), value)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(&bad) = self.v(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(LabError::invalid(format!("log of non-positive value {bad}")));
        }
        let value = self.v(a).map(f64::ln);
        self.push(Op::Log(a), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.v(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    /// Elementwise power; inputs must be positive.
    pub fn powf(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        if let Some(&bad) = self.v(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(LabError::invalid(format!("powf of non-positive value {bad}")));
        }
        let value = self.v(a).map(|x| x.powf(p));
        self.push(Op::Powf(a, p), value)
    }

    /// Scales every row to unit L2 norm. Zero rows are rejected.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.v(a);
        let mut norms = Vec::with_capacity(x.rows());
        let mut out = x.clone();
        for i in 0..x.rows() {
            let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(LabError::ZeroRow(i));
            }
            out.row_mut(i).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(Op::NormalizeRows(a, norms), out)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let mut out = self.v(a).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    /// `log(sum(exp(row)))` for every row, as a rows x 1 column.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.v(a);
        let vals: Vec<f64> = (0..x.rows()).map(|i| logsumexp(x.row(i))).collect();
        self.push(Op::LogSumExpRows(a), DenseMatrix::column(&vals))
    }

    pub fn frobenius_sq(&mut self, a: NodeId) -> Result<NodeId> {
        let value = DenseMatrix::scalar(self.v(a).frobenius_sq());
        self.push(Op::FrobeniusSq(a), value)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = DenseMatrix::scalar(self.v(a).data().iter().sum());
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.v(a);
        let n = x.data().len();
        if n == 0 {
            return Err(LabError::invalid("mean of an empty matrix"));
        }
        let value = DenseMatrix::scalar(x.data().iter().sum::<f64>() / n as f64);
        self.push(Op::Mean(a), value)
    }

    /// Means over rows, as a 1 x cols row.
    pub fn column_mean(&mut self, a: NodeId) -> Result<NodeId> {
        if self.v(a).rows() == 0 {
            return Err(LabError::invalid("column mean of a matrix with no rows"));
        }
        let value = self.v(a).column_means();
        self.push(Op::ColumnMean(a), value)
    }

    /// Sums over columns, as a rows x 1 column.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.v(a);
        let vals: Vec<f64> = (0..x.rows()).map(|i| x.row(i).iter().sum()).collect();
        self.push(Op::RowSum(a), DenseMatrix::column(&vals))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mats: Vec<&DenseMatrix> = parts.iter().map(|&p| self.v(p)).collect();
        let value = DenseMatrix::vstack(&mats)?;
        self.push(Op::ConcatRows(parts.to_vec()), value)
    }

    /// Gathers rows by index; indices may repeat.
    pub fn select_rows(&mut self, a: NodeId, index: &[usize]) -> Result<NodeId> {
        let x = self.v(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= x.rows()) {
            return Err(LabError::invalid(format!(
                "row index {bad} out of range for {} rows",
                x.rows()
            )));
        }
        let value = x.select_rows(index);
        self.push(Op::SelectRows(a, index.to_vec()), value)
    }

    /// `X = G^-1 B` for symmetric positive-definite `G`, via Cholesky.
    pub fn spd_solve(&mut self, g: NodeId, b: NodeId) -> Result<NodeId> {
        let chol = Cholesky::factor(self.v(g))?;
        let value = chol.solve(self.v(b))?;
        self.push(Op::SpdSolve(g, b, Box::new(chol)), value)
    }

    /// Adds a 1 x cols row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (x, r) = (self.v(a), self.v(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(mismatch("add_row", x, r));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(Op::AddRow(a, row), out)
    }

    /// Multiplies every row of `a` elementwise by a 1 x cols row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (x, r) = (self.v(a), self.v(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(mismatch("mul_row", x, r));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o *= b;
            }
        }
        self.push(Op::MulRow(a, row), out)
    }

    /// Standardizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let x = self.v(a);
        let d = x.cols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let mu = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
            let s = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mu) * s);
            inv_std.push(s);
        }
        self.push(Op::LayerNormRows(a, inv_std), out)
    }

    /// Scaled dot-product attention restricted to row groups.
    ///
    /// Each segment is a list of row indices; rows attend only to rows in
    /// the same segment, in the listed order. Segments must be disjoint.
    /// Rows outside every segment produce zeros.
    pub fn segment_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: Arc<Vec<Vec<usize>>>,
        scale: f64,
    ) -> Result<NodeId> {
        let (qm, km, vm) = (self.v(q), self.v(k), self.v(v));
        if qm.shape() != km.shape() {
            return Err(mismatch("segment_attention", qm, km));
        }
        if vm.rows() != qm.rows() {
            return Err(mismatch("segment_attention", qm, vm));
        }
        let n = qm.rows();
        let mut seen = vec![false; n];
        for seg in segments.iter() {
            for &r in seg {
                if r >= n || std::mem::replace(&mut seen[r], true) {
                    return Err(LabError::invalid(format!(
                        "segment row {r} out of range or repeated"
                    )));
                }
            }
        }
        let dv = vm.cols();
        let mut out = DenseMatrix::zeros(n, dv);
        let mut probs = Vec::with_capacity(segments.len());
        for seg in segments.iter() {
            let l = seg.len();
            let mut p = DenseMatrix::zeros(l, l);
            for (a, &ra) in seg.iter().enumerate() {
                let qa = qm.row(ra);
                let prow = p.row_mut(a);
                for (b, &rb) in seg.iter().enumerate() {
                    prow[b] = scale * dot(qa, km.row(rb));
                }
                softmax_in_place(prow);
            }
            for (a, &ra) in seg.iter().enumerate() {
                let orow = out.row_mut(ra);
                for (b, &rb) in seg.iter().enumerate() {
                    let w = p.get(a, b);
                    for (o, x) in orow.iter_mut().zip(vm.row(rb)) {
                        *o += w * x;
                    }
                }
            }
            probs.push(p);
        }
        self.push(
            Op::SegmentAttention {
                q,
                k,
                v,
                segments,
                scale,
                probs,
            },
            out,
        )
    }

    /// Reverse sweep from a 1x1 root.
    ///
    /// Every parameter on the tape receives a gradient; parameters the root
    /// does not depend on receive exact zeros.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.v(root);
        if !rv.is_scalar() {
            return Err(LabError::NonScalarRoot(rv.rows(), rv.cols()));
        }
        let mut adj: Vec<Option<DenseMatrix>> = vec![None; root.0 + 1];
        adj[root.0] = Some(DenseMatrix::scalar(1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(&node.op, &node.value, &g, &mut adj)?;
            adj[id] = Some(g);
        }

        let mut grads = BTreeMap::new();
        for &p in &self.parameters {
            let g = adj
                .get_mut(p.0)
                .and_then(Option::take)
                .unwrap_or_else(|| {
                    let (r, c) = self.v(p).shape();
                    DenseMatrix::zeros(r, c)
                });
            grads.insert(p, g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        op: &Op,
        out: &DenseMatrix,
        g: &DenseMatrix,
        adj: &mut [Option<DenseMatrix>],
    ) -> Result<()> {
        match op {
            Op::Constant | Op::Parameter => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.v(*a), self.v(*b));
                let mut ga = DenseMatrix::zeros(av.rows(), av.cols());
                gemm(g, false, bv, true, &mut ga, 0.0);
                accumulate(adj, *a, ga);
                let mut gb = DenseMatrix::zeros(bv.rows(), bv.cols());
                gemm(av, true, g, false, &mut gb, 0.0);
                accumulate(adj, *b, gb);
            }
            Op::Transpose(a) => accumulate(adj, *a, g.transpose()),
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accumulate(adj, *a, g.zip_map(self.v(*b), |x, y| x * y));
                accumulate(adj, *b, g.zip_map(self.v(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => accumulate(adj, *a, g.scale(*s)),
            Op::Elu(a) => {
                let x = self.v(*a);
                let d = DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| {
                    let xv = x.get(i, j);
                    let dy = if xv > 0.0 { 1.0 } else { xv.exp() };
                    dy * g.get(i, j)
                });
                accumulate(adj, *a, d);
            }
            Op::Exp(a) => accumulate(adj, *a, g.zip_map(out, |x, y| x * y)),
            Op::Log(a) => accumulate(adj, *a, g.zip_map(self.v(*a), |x, y| x / y)),
            Op::Tanh(a) => accumulate(adj, *a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
            Op::Powf(a, p) => {
                let p = *p;
                accumulate(
                    adj,
                    *a,
                    g.zip_map(self.v(*a), |gv, x| gv * p * x.powf(p - 1.0)),
                );
            }
            Op::NormalizeRows(a, norms) => {
                let mut d = g.clone();
                for (i, &n) in norms.iter().enumerate() {
                    let y = out.row(i);
                    let proj = dot(y, g.row(i));
                    for (dv, yv) in d.row_mut(i).iter_mut().zip(y) {
                        *dv = (*dv - yv * proj) / n;
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = g.clone();
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let s = dot(y, g.row(i));
                    for (dv, yv) in d.row_mut(i).iter_mut().zip(y) {
                        *dv = yv * (*dv - s);
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::LogSumExpRows(a) => {
                let x = self.v(*a);
                let d = DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| {
                    g.get(i, 0) * (x.get(i, j) - out.get(i, 0)).exp()
                });
                accumulate(adj, *a, d);
            }
            Op::FrobeniusSq(a) => {
                let s = 2.0 * g.item();
                accumulate(adj, *a, self.v(*a).scale(s));
            }
            Op::Sum(a) => {
                let (r, c) = self.v(*a).shape();
                accumulate(adj, *a, DenseMatrix::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.v(*a).shape();
                let n = (r * c) as f64;
                accumulate(adj, *a, DenseMatrix::filled(r, c, g.item() / n));
            }
            Op::ColumnMean(a) => {
                let (r, c) = self.v(*a).shape();
                let n = r as f64;
                accumulate(adj, *a, DenseMatrix::from_fn(r, c, |_, j| g.get(0, j) / n));
            }
            Op::RowSum(a) => {
                let (r, c) = self.v(*a).shape();
                accumulate(adj, *a, DenseMatrix::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.v(p).rows();
                    let idx: Vec<usize> = (offset..offset + rows).collect();
                    accumulate(adj, p, g.select_rows(&idx));
                    offset += rows;
                }
            }
            Op::SelectRows(a, index) => {
                let (r, c) = self.v(*a).shape();
                let mut d = DenseMatrix::zeros(r, c);
                for (k, &i) in index.iter().enumerate() {
                    for (dv, gv) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *dv += gv;
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::SpdSolve(gid, b, chol) => {
                // B̄ += G⁻¹X̄ ; Ḡ -= sym((G⁻¹X̄) Xᵀ)
                let y = chol.solve(g)?;
                let mut yx = DenseMatrix::zeros(y.rows(), out.rows());
                gemm(&y, false, out, true, &mut yx, 0.0);
                let sym = yx.zip_map(&yx.transpose(), |p, q| -0.5 * (p + q));
                accumulate(adj, *gid, sym);
                accumulate(adj, *b, y);
            }
            Op::AddRow(a, row) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *row, g.column_means().scale(g.rows() as f64));
            }
            Op::MulRow(a, row) => {
                let x = self.v(*a);
                let r = self.v(*row);
                let da = DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| g.get(i, j) * r.get(0, j));
                let mut dr = DenseMatrix::zeros(1, x.cols());
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        dr.data_mut()[j] += g.get(i, j) * x.get(i, j);
                    }
                }
                accumulate(adj, *a, da);
                accumulate(adj, *row, dr);
            }
            Op::LayerNormRows(a, inv_std) => {
                let d = out.cols() as f64;
                let mut dx = g.clone();
                for (i, &s) in inv_std.iter().enumerate() {
                    let y = out.row(i);
                    let gr = g.row(i);
                    let mg = gr.iter().sum::<f64>() / d;
                    let mgy = dot(gr, y) / d;
                    for ((dv, gv), yv) in dx.row_mut(i).iter_mut().zip(gr).zip(y) {
                        *dv = s * (gv - mg - yv * mgy);
                    }
                }
                accumulate(adj, *a, dx);
            }
            Op::SegmentAttention {
                q,
                k,
                v,
                segments,
                scale,
                probs,
            } => {
                let (qm, km, vm) = (self.v(*q), self.v(*k), self.v(*v));
                let mut dq = DenseMatrix::zeros(qm.rows(), qm.cols());
                let mut dk = DenseMatrix::zeros(km.rows(), km.cols());
                let mut dvm = DenseMatrix::zeros(vm.rows(), vm.cols());
                for (seg, p) in segments.iter().zip(probs) {
                    let l = seg.len();
                    // dP = dO Vᵀ ; dS = P ⊙ (dP - rowsum(dP ⊙ P))
                    let mut ds = DenseMatrix::zeros(l, l);
                    for (a, &ra) in seg.iter().enumerate() {
                        let go = g.row(ra);
                        let mut acc = 0.0;
                        for (b, &rb) in seg.iter().enumerate() {
                            let dp = dot(go, vm.row(rb));
                            ds.set(a, b, dp);
                            acc += dp * p.get(a, b);
                        }
                        for b in 0..l {
                            let pv = p.get(a, b);
                            ds.set(a, b, pv * (ds.get(a, b) - acc));
                        }
                    }
                    for (a, &ra) in seg.iter().enumerate() {
                        for (b, &rb) in seg.iter().enumerate() {
                            let pab = p.get(a, b);
                            let sab = ds.get(a, b) * scale;
                            // dV[rb] += P[a,b] dO[ra]
                            for (d, x) in dvm.row_mut(rb).iter_mut().zip(g.row(ra)) {
                                *d += pab * x;
                            }
                            for (d, x) in dq.row_mut(ra).iter_mut().zip(km.row(rb)) {
                                *d += sab * x;
                            }
                            for (d, x) in dk.row_mut(rb).iter_mut().zip(qm.row(ra)) {
                                *d += sab * x;
                            }
                        }
                    }
                }
                accumulate(adj, *q, dq);
                accumulate(adj, *k, dk);
                accumulate(adj, *v, dvm);
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<DenseMatrix>], id: NodeId, g: DenseMatrix) {
    match &mut adj[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_node_has_product_shape() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]])).unwrap();
        let b = t.constant(m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]])).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &m(&[&[4.0, 5.0], &[10.0, 11.0]]));
    }

    #[test]
    fn elu_reference_points() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[0.0, -1.0, 2.0]])).unwrap();
        let y = t.elu(a).unwrap();
        let v = t.value(y);
        assert_eq!(v.get(0, 0), 0.0);
        assert!((v.get(0, 1) - (-0.632_120_558_828_557_7)).abs() < 1e-15);
        assert_eq!(v.get(0, 2), 2.0);
    }

    #[test]
    fn spd_solve_diagonal() {
        let mut t = Tape::new();
        let g = t.constant(DenseMatrix::identity(2).scale(2.0)).unwrap();
        let b = t.constant(DenseMatrix::column(&[4.0, 6.0])).unwrap();
        let x = t.spd_solve(g, b).unwrap();
        assert_eq!(t.value(x).data(), &[2.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(DenseMatrix::zeros(2, 3)).unwrap();
        let b = t.constant(DenseMatrix::zeros(2, 2)).unwrap();
        match t.add(a, b) {
            Err(LabError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, (2, 3));
                assert_eq!(rhs, (2, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(t.matmul(a, a).is_err());
    }

    #[test]
    fn spd_solve_rejects_indefinite() {
        let mut t = Tape::new();
        let g = t.constant(m(&[&[1.0, 2.0], &[2.0, 1.0]])).unwrap();
        let b = t.constant(DenseMatrix::column(&[1.0, 1.0])).unwrap();
        assert!(matches!(t.spd_solve(g, b), Err(LabError::Singular { .. })));
    }

    #[test]
    fn frobenius_gradient_is_twice_the_input() {
        let mut t = Tape::new();
        let w = t.parameter(m(&[&[1.0, -2.0], &[0.5, 3.0]])).unwrap();
        let f = t.frobenius_sq(w).unwrap();
        let g = t.backward(f).unwrap();
        assert_eq!(g.of(w), &t.value(w).scale(2.0));
    }

    #[test]
    fn linear_map_gradient_is_outer_product_with_ones() {
        let mut t = Tape::new();
        let w = t.parameter(m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]])).unwrap();
        let x = t.constant(DenseMatrix::column(&[0.25, -1.5])).unwrap();
        let y = t.matmul(w, x).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        for i in 0..3 {
            assert_eq!(g.of(w).row(i), &[0.25, -1.5]);
        }
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let mut t = Tape::new();
        let r = t.parameter(m(&[&[0.3, -1.2, 2.0, 0.0]])).unwrap();
        let l = t.logsumexp_rows(r).unwrap();
        let s = t.sum(l).unwrap();
        let g = t.backward(s).unwrap();
        let mut expect = t.value(r).row(0).to_vec();
        softmax_in_place(&mut expect);
        for (a, b) in g.of(r).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn unreached_parameter_gets_exact_zero() {
        let mut t = Tape::new();
        let a = t.parameter(m(&[&[1.0, 2.0]])).unwrap();
        let b = t.parameter(m(&[&[3.0], &[4.0]])).unwrap();
        let f = t.frobenius_sq(a).unwrap();
        let g = t.backward(f).unwrap();
        assert_eq!(g.of(b).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let a = t.parameter(m(&[&[1.0, 2.0]])).unwrap();
        assert!(matches!(t.backward(a), Err(LabError::NonScalarRoot(1, 2))));
    }

    #[test]
    fn non_finite_results_rejected() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[1000.0]])).unwrap();
        assert!(matches!(t.exp(a), Err(LabError::NonFinite("exp"))));
        let z = t.constant(m(&[&[0.0, 0.0], &[1.0, 0.0]])).unwrap();
        assert!(matches!(t.normalize_rows(z), Err(LabError::ZeroRow(0))));
    }

    #[test]
    fn segment_attention_respects_segments() {
        let mut t = Tape::new();
        let x = t
            .constant(m(&[&[1.0, 0.0], &[0.0, 1.0], &[5.0, 5.0]]))
            .unwrap();
        let segs = Arc::new(vec![vec![0, 1], vec![2]]);
        let o = t.segment_attention(x, x, x, segs, 1.0).unwrap();
        // a singleton segment attends only to itself
        assert_eq!(t.value(o).row(2), &[5.0, 5.0]);
        let w = (1.0f64).exp() / ((1.0f64).exp() + 1.0);
        assert!((t.value(o).get(0, 0) - w).abs() < 1e-15);
    }
}
