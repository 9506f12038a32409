//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records one forward pass. Parameters live in a [`ParamStore`]
//! and are referenced by the tape without copying; [`Tape::backward`] returns
//! the gradient of a scalar node with respect to every parameter it touched.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::tensor::{matmul_nt_acc, matmul_tn_acc, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Which optimization stage owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Graph encoder and planner (stage 1 only).
    Planner,
    /// Sentence decoder and copy heads (stage 2 only).
    Realizer,
    /// Node and context embeddings: trained in stage 1, fine-tuned in stage 2.
    Shared,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, group: ParamGroup) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.groups.push(group);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// Per-parameter gradients; `None` for parameters the loss never touched.
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                let mut g = g.clone();
                g.scale_assign(scale);
                self.accumulate(ParamId(i), &g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Matrix::sum_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Rc<Matrix>),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Gather(Var, Rc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    MeanRows(Var),
    SumAll(Var),
    RowSum(Var),
    Reshape(Var),
    Pick(Var, Vec<(usize, usize)>),
}

struct Node {
    value: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// The single element of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data[0]
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.nodes.push(Node {
            value: Some(m),
            op: Op::Const,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shapes");
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// `a [m,n] + b [1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.rows, 1, "add_row bias must be a row vector");
        assert_eq!(va.cols, vb.cols, "add_row cols");
        let mut out = va.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&vb.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shapes");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(va.rows, va.cols, data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn mul_const(&mut self, a: Var, m: Matrix) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), m.shape(), "mul_const shapes");
        let data = va.data.iter().zip(&m.data).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(va.rows, va.cols, data);
        self.push(out, Op::MulConst(a, Rc::new(m)), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let out = Matrix::from_vec(va.rows, va.cols, va.data.iter().map(|&x| f(x)).collect());
        self.push(out, op, &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// `log σ(x)`, computed stably.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, log_sigmoid, Op::LogSigmoid(a))
    }

    /// Row-wise softmax. Entries where `allowed` is false get probability 0;
    /// a row with nothing allowed becomes all zeros.
    pub fn softmax(&mut self, a: Var, allowed: Option<&[bool]>) -> Var {
        let va = self.value(a);
        if let Some(m) = allowed {
            assert_eq!(m.len(), va.len(), "softmax mask size");
        }
        let mut out = va.clone();
        for r in 0..out.rows {
            let cols = out.cols;
            let row = out.row_mut(r);
            if let Some(m) = allowed {
                for (c, x) in row.iter_mut().enumerate() {
                    if !m[r * cols + c] {
                        *x = f64::NEG_INFINITY;
                    }
                }
            }
            crate::tensor::softmax_in_place(row);
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Matrix::zeros(va.rows, va.cols);
        for r in 0..va.rows {
            out.row_mut(r)
                .copy_from_slice(&crate::tensor::log_softmax(va.row(r)));
        }
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    /// Row-wise layer normalization with gain and bias row vectors.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gain), self.value(bias));
        assert_eq!(vg.shape(), (1, vx.cols), "layer_norm gain");
        assert_eq!(vb.shape(), (1, vx.cols), "layer_norm bias");
        let n = vx.cols as f64;
        let mut xhat = Matrix::zeros(vx.rows, vx.cols);
        let mut out = Matrix::zeros(vx.rows, vx.cols);
        let mut rstd = Vec::with_capacity(vx.rows);
        for r in 0..vx.rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for c in 0..vx.cols {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * vg.data[c] + vb.data[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Output row `i` is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let va = self.value(a);
        let mut out = Matrix::zeros(idx.len(), va.cols);
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(va.row(r));
        }
        self.push(out, Op::Gather(a, Rc::new(idx)), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows, rows, "concat_cols rows");
            for r in 0..rows {
                out.row_mut(r)[off..off + vp.cols].copy_from_slice(vp.row(r));
            }
            off += vp.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols, cols, "concat_rows cols");
            data.extend_from_slice(&vp.data);
            rows += vp.rows;
        }
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols, "slice_cols range");
        let mut out = Matrix::zeros(va.rows, len);
        for r in 0..va.rows {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    /// Mean over rows: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert!(va.rows > 0, "mean of zero rows");
        let mut out = Matrix::zeros(1, va.cols);
        for r in 0..va.rows {
            for (o, x) in out.data.iter_mut().zip(va.row(r)) {
                *o += x;
            }
        }
        out.scale_assign(1.0 / va.rows as f64);
        self.push(out, Op::MeanRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::SumAll(a), &[a])
    }

    /// Sum over columns: `[m,n] -> [m,1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows).map(|r| va.row(r).iter().sum()).collect();
        self.push(Matrix::from_vec(va.rows, 1, data), Op::RowSum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), rows * cols, "reshape size");
        let out = Matrix::from_vec(rows, cols, va.data.clone());
        self.push(out, Op::Reshape(a), &[a])
    }

    /// Selected entries as a `[1,k]` row.
    pub fn pick(&mut self, a: Var, at: Vec<(usize, usize)>) -> Var {
        let va = self.value(a);
        let data = at.iter().map(|&(r, c)| va.get(r, c)).collect();
        let k = at.len();
        self.push(Matrix::from_vec(1, k, data), Op::Pick(a, at), &[a])
    }

    /// Gradients of the scalar `loss` with respect to all parameters.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads = Grads::zeros_like(self.params);
        let mut adj: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        adj.resize_with(self.nodes.len(), || None);
        adj[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut adj, &mut grads);
        }
        grads
    }

    fn backprop_node(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>], grads: &mut Grads) {
        let node = &self.nodes[i];
        let out = node.value.as_ref();
        match &node.op {
            Op::Const => {}
            Op::Param(id) => grads.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = slot(adj, *a, va.shape());
                    matmul_nt_acc(g, vb, ga);
                }
                if self.needs(*b) {
                    let gb = slot(adj, *b, vb.shape());
                    matmul_tn_acc(va, g, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        slot(adj, v, g.shape()).add_assign(g);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if self.needs(*a) {
                    slot(adj, *a, g.shape()).add_assign(g);
                }
                if self.needs(*b) {
                    let gb = slot(adj, *b, (1, g.cols));
                    for r in 0..g.rows {
                        for (o, x) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = slot(adj, *a, va.shape());
                    for ((o, x), y) in ga.data.iter_mut().zip(&g.data).zip(&vb.data) {
                        *o += x * y;
                    }
                }
                if self.needs(*b) {
                    let gb = slot(adj, *b, vb.shape());
                    for ((o, x), y) in gb.data.iter_mut().zip(&g.data).zip(&va.data) {
                        *o += x * y;
                    }
                }
            }
            Op::MulConst(a, m) => {
                let ga = slot(adj, *a, g.shape());
                for ((o, x), y) in ga.data.iter_mut().zip(&g.data).zip(&m.data) {
                    *o += x * y;
                }
            }
            Op::Scale(a, s) => {
                let ga = slot(adj, *a, g.shape());
                for (o, x) in ga.data.iter_mut().zip(&g.data) {
                    *o += s * x;
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let ga = slot(adj, *a, g.shape());
                for ((o, gx), &x) in ga.data.iter_mut().zip(&g.data).zip(&va.data) {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    *o += gx * d;
                }
            }
            Op::Tanh(a) => {
                let y = out.unwrap();
                let ga = slot(adj, *a, g.shape());
                for ((o, gx), yv) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                    *o += gx * (1.0 - yv * yv);
                }
            }
            Op::Sigmoid(a) => {
                let y = out.unwrap();
                let ga = slot(adj, *a, g.shape());
                for ((o, gx), yv) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                    *o += gx * yv * (1.0 - yv);
                }
            }
            Op::LogSigmoid(a) => {
                let va = self.value(*a);
                let ga = slot(adj, *a, g.shape());
                for ((o, gx), &x) in ga.data.iter_mut().zip(&g.data).zip(&va.data) {
                    *o += gx * sigmoid(-x);
                }
            }
            Op::Softmax(a) => {
                let y = out.unwrap();
                let ga = slot(adj, *a, g.shape());
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    let orow = ga.row_mut(r);
                    for c in 0..yr.len() {
                        orow[c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = out.unwrap();
                let ga = slot(adj, *a, g.shape());
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gsum: f64 = gr.iter().sum();
                    let orow = ga.row_mut(r);
                    for c in 0..yr.len() {
                        orow[c] += gr[c] - yr[c].exp() * gsum;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let vg = self.value(*gain);
                let n = xhat.cols;
                if self.needs(*gain) {
                    let gg = slot(adj, *gain, (1, n));
                    for r in 0..g.rows {
                        for c in 0..n {
                            gg.data[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                }
                if self.needs(*bias) {
                    let gb = slot(adj, *bias, (1, n));
                    for r in 0..g.rows {
                        for c in 0..n {
                            gb.data[c] += g.get(r, c);
                        }
                    }
                }
                if self.needs(*x) {
                    let gx = slot(adj, *x, g.shape());
                    let nf = n as f64;
                    for r in 0..g.rows {
                        let dxhat: Vec<f64> = (0..n).map(|c| g.get(r, c) * vg.data[c]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / nf;
                        let mean_dx = dxhat
                            .iter()
                            .enumerate()
                            .map(|(c, d)| d * xhat.get(r, c))
                            .sum::<f64>()
                            / nf;
                        let row = gx.row_mut(r);
                        for c in 0..n {
                            row[c] += rstd[r] * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx);
                        }
                    }
                }
            }
            Op::Gather(a, idx) => {
                let shape = self.value(*a).shape();
                let ga = slot(adj, *a, shape);
                for (i, &r) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let shape = self.value(p).shape();
                    if self.needs(p) {
                        let gp = slot(adj, p, shape);
                        for r in 0..shape.0 {
                            for (o, x) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + shape.1])
                            {
                                *o += x;
                            }
                        }
                    }
                    off += shape.1;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let shape = self.value(p).shape();
                    let n = shape.0 * shape.1;
                    if self.needs(p) {
                        let gp = slot(adj, p, shape);
                        for (o, x) in gp.data.iter_mut().zip(&g.data[off..off + n]) {
                            *o += x;
                        }
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let shape = self.value(*a).shape();
                let ga = slot(adj, *a, shape);
                for r in 0..g.rows {
                    for (o, x) in ga.row_mut(r)[*start..*start + g.cols].iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                slot(adj, *a, gt.shape()).add_assign(&gt);
            }
            Op::MeanRows(a) => {
                let shape = self.value(*a).shape();
                let ga = slot(adj, *a, shape);
                let inv = 1.0 / shape.0 as f64;
                for r in 0..shape.0 {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(&g.data) {
                        *o += x * inv;
                    }
                }
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).shape();
                let ga = slot(adj, *a, shape);
                let s = g.data[0];
                ga.data.iter_mut().for_each(|o| *o += s);
            }
            Op::RowSum(a) => {
                let shape = self.value(*a).shape();
                let ga = slot(adj, *a, shape);
                for r in 0..shape.0 {
                    let s = g.data[r];
                    ga.row_mut(r).iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape();
                let ga = slot(adj, *a, shape);
                for (o, x) in ga.data.iter_mut().zip(&g.data) {
                    *o += x;
                }
            }
            Op::Pick(a, at) => {
                let shape = self.value(*a).shape();
                let ga = slot(adj, *a, shape);
                for (k, &(r, c)) in at.iter().enumerate() {
                    ga.data[r * shape.1 + c] += g.data[k];
                }
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn slot(adj: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    adj[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
