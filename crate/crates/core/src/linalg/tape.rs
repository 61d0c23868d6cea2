//! Reverse-mode differentiation over dense matrices.
//!
//! Values are held as `f64` but, by default, every op rounds its output to
//! `f32`, so a tape reproduces `f32` forward compute exactly while adjoints
//! accumulate in `f64`. [`Tape::exact`] skips the rounding, which lets
//! finite-difference checks use steps far below `f32` resolution. Nodes are
//! appended in evaluation order, so the node vector is already a topological
//! order and the backward sweep walks it once in reverse.

use std::sync::Arc;

use crate::error::{PolarError, Result};
use crate::linalg::matrix::Matrix;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-major node value.
#[derive(Clone, Debug)]
struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Dense {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn of(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// `a (n×k) · b (k×m)`, accumulating each output entry over ascending `k`.
fn matmul64(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n * m];
    for i in 0..n {
        let acc = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a[i * k + p];
            for (o, &bv) in acc.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += s * bv;
            }
        }
    }
    out
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        scale: f64,
        q_offset: usize,
        probs: Vec<f64>,
    },
    SelectRows(NodeId, Vec<usize>),
    SetRows {
        base: NodeId,
        rows: NodeId,
        positions: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    MeanSquares(NodeId),
    SumSquares(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Arc<Dense>,
    needs_grad: bool,
    /// Unrounded value for 1×1 reduction results.
    scalar: Option<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    exact: bool,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Number of nodes whose adjoint was propagated.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl Tape {
    /// A tape whose op outputs are rounded to `f32`.
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that keeps every op output in full `f64`.
    pub fn exact() -> Self {
        Self {
            nodes: Vec::new(),
            exact: true,
        }
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The node value rounded to `f32`.
    pub fn value(&self, id: NodeId) -> Matrix {
        let v = self.val(id);
        Matrix::from_raw(v.rows, v.cols, v.data.iter().map(|&x| x as f32).collect())
    }

    pub fn shared_value(&self, id: NodeId) -> Arc<Matrix> {
        Arc::new(self.value(id))
    }

    /// Scalar value of a 1×1 node, unrounded when the node was produced by a
    /// reduction (or a combination of reductions).
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.val(id);
        if v.shape() != (1, 1) {
            return Err(PolarError::shape(format!("scalar requested from {}x{} node", v.rows, v.cols)));
        }
        Ok(self.nodes[id.0].scalar.unwrap_or(v.data[0]))
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Attention probabilities recorded by an attention node, laid out as
    /// `heads × q_rows × keys`. Masked entries are zero.
    pub fn attention_probs(&self, id: NodeId) -> Option<(Vec<f32>, usize, usize, usize)> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, heads, k, .. } => {
                let keys = self.val(*k).rows;
                let q_rows = probs.len() / (heads * keys.max(1));
                Some((probs.iter().map(|&p| p as f32).collect(), *heads, q_rows, keys))
            }
            _ => None,
        }
    }

    fn round(&self, v: f64) -> f64 {
        if self.exact {
            v
        } else {
            f64::from(v as f32)
        }
    }

    fn rounded(&self, mut d: Dense) -> Dense {
        if !self.exact {
            d.data.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
        d
    }

    fn push(&mut self, op: Op, value: Dense, parents: &[NodeId], scalar: Option<f64>) -> NodeId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_with(op, Arc::new(value), needs_grad, scalar)
    }

    fn push_with(&mut self, op: Op, value: Arc<Dense>, needs_grad: bool, scalar: Option<f64>) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            scalar,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Arc<Matrix>, trainable: bool) -> NodeId {
        self.push_with(Op::Leaf, Arc::new(Dense::of(&value)), trainable, None)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push_with(Op::Leaf, Arc::new(Dense::of(&value)), false, None)
    }

    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push_with(Op::Leaf, Arc::new(Dense::of(&value)), true, None)
    }

    fn val(&self, id: NodeId) -> &Dense {
        &self.nodes[id.0].value
    }

    fn scalar_of(&self, id: NodeId) -> Option<f64> {
        let v = self.val(id);
        (v.shape() == (1, 1)).then(|| self.nodes[id.0].scalar.unwrap_or(v.data[0]))
    }

    fn finite(&self, d: &Dense, what: &str) -> Result<()> {
        if d.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(PolarError::NonFinite(what.to_string()))
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.val(a), self.val(b));
        if x.cols != y.rows {
            return Err(PolarError::shape(format!("tape matmul {:?} by {:?}", x.shape(), y.shape())));
        }
        let out = matmul64(&x.data, x.rows, x.cols, &y.data, y.cols);
        let m = self.rounded(Dense {
            rows: x.rows,
            cols: y.cols,
            data: out,
        });
        Ok(self.push(Op::MatMul(a, b), m, &[a, b], None))
    }

    /// `a · bᵀ`, the layout of `y = x Wᵀ` with `W` stored as out×in.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, w) = (self.val(a), self.val(b));
        if x.cols != w.cols {
            return Err(PolarError::shape(format!("tape matmul_t {:?} by {:?}ᵀ", x.shape(), w.shape())));
        }
        let wt = w.transpose();
        let out = matmul64(&x.data, x.rows, x.cols, &wt.data, wt.cols);
        let m = self.rounded(Dense {
            rows: x.rows,
            cols: w.rows,
            data: out,
        });
        Ok(self.push(Op::MatMulT(a, b), m, &[a, b], None))
    }

    fn zip(&mut self, a: NodeId, b: NodeId, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Dense> {
        let (x, y) = (self.val(a), self.val(b));
        if x.shape() != y.shape() {
            return Err(PolarError::shape(format!("{what} {:?} with {:?}", x.shape(), y.shape())));
        }
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect();
        let m = self.rounded(Dense {
            rows: x.rows,
            cols: x.cols,
            data,
        });
        self.finite(&m, what)?;
        Ok(m)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let m = self.zip(a, b, "add", |x, y| x + y)?;
        let s = self.scalar_of(a).zip(self.scalar_of(b)).map(|(x, y)| x + y);
        Ok(self.push(Op::Add(a, b), m, &[a, b], s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let m = self.zip(a, b, "sub", |x, y| x - y)?;
        let s = self.scalar_of(a).zip(self.scalar_of(b)).map(|(x, y)| x - y);
        Ok(self.push(Op::Sub(a, b), m, &[a, b], s))
    }

    /// Adds a 1×cols row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (x, r) = (self.val(a), self.val(row));
        if r.rows != 1 || r.cols != x.cols {
            return Err(PolarError::shape(format!("add_row {:?} + {:?}", x.shape(), r.shape())));
        }
        let mut m = x.clone();
        for chunk in m.data.chunks_mut(x.cols) {
            for (o, &b) in chunk.iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        let m = self.rounded(m);
        Ok(self.push(Op::AddRow(a, row), m, &[a, row], None))
    }

    /// Multiplies by `s`. A rounding tape also rounds `s` to `f32` for the
    /// value; the unrounded scalar and the adjoint use the full factor.
    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let f = self.round(s);
        let x = self.val(a);
        let m = self.rounded(Dense {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|&v| v * f).collect(),
        });
        self.finite(&m, "scale")?;
        let sc = self.scalar_of(a).map(|x| x * s);
        Ok(self.push(Op::Scale(a, s), m, &[a], sc))
    }

    /// Row-wise layer normalization with learned gain and bias (1×cols each).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (xv, g, b) = (self.val(x), self.val(gamma), self.val(beta));
        let cols = xv.cols;
        if g.shape() != (1, cols) || b.shape() != (1, cols) {
            return Err(PolarError::shape("layer_norm parameters"));
        }
        let mut out = Dense::zeros(xv.rows, cols);
        let mut means = Vec::with_capacity(xv.rows);
        let mut rstds = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = (row[c] - mean) * rstd * g.data[c] + b.data[c];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let out = self.rounded(out);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            out,
            &[x, gamma, beta],
            None,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let data = xv
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let m = self.rounded(Dense {
            rows: xv.rows,
            cols: xv.cols,
            data,
        });
        self.push(Op::Gelu(x), m, &[x], None)
    }

    /// Causal multi-head attention. `q` holds the query rows for positions
    /// `q_offset..q_offset + q.rows()`; `k` and `v` hold every position. Head
    /// `h` uses columns `h*dh..(h+1)*dh` of all three inputs.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        scale: f64,
        q_offset: usize,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let d = qv.cols;
        let keys = kv.rows;
        let tq = qv.rows;
        if heads == 0 || d % heads != 0 || kv.cols != d || vv.shape() != kv.shape() {
            return Err(PolarError::shape("attention inputs"));
        }
        if q_offset + tq > keys {
            return Err(PolarError::shape("attention query rows past key length"));
        }
        let dh = d / heads;
        let mut probs = vec![0.0f64; heads * tq * keys];
        let mut out = Dense::zeros(tq, d);
        let mut scores = vec![0.0f64; keys];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..tq {
                let visible = q_offset + i + 1;
                let qrow = &qv.row(i)[cols.clone()];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate().take(visible) {
                    let krow = &kv.row(j)[cols.clone()];
                    let dotp: f64 = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum();
                    *s = dotp * scale;
                    max = max.max(*s);
                }
                let mut total = 0.0;
                for s in scores.iter_mut().take(visible) {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let base = (h * tq + i) * keys;
                let orow = &mut out.row_mut(i)[cols.clone()];
                for j in 0..visible {
                    let p = scores[j] / total;
                    probs[base + j] = p;
                    for (a, &x) in orow.iter_mut().zip(&vv.row(j)[cols.clone()]) {
                        *a += p * x;
                    }
                }
            }
        }
        if !self.exact {
            probs.iter_mut().for_each(|p| *p = f64::from(*p as f32));
        }
        let out = self.rounded(out);
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                q_offset,
                probs,
            },
            out,
            &[q, k, v],
            None,
        ))
    }

    pub fn select_rows(&mut self, x: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let xv = self.val(x);
        if rows.iter().any(|&r| r >= xv.rows) {
            return Err(PolarError::shape("select_rows index out of range"));
        }
        let mut data = Vec::with_capacity(rows.len() * xv.cols);
        for &r in &rows {
            data.extend_from_slice(xv.row(r));
        }
        let m = Dense {
            rows: rows.len(),
            cols: xv.cols,
            data,
        };
        Ok(self.push(Op::SelectRows(x, rows), m, &[x], None))
    }

    /// Copy of `base` with row `positions[i]` replaced by row `i` of `rows`.
    pub fn set_rows(&mut self, base: NodeId, rows: NodeId, positions: Vec<usize>) -> Result<NodeId> {
        let (bv, rv) = (self.val(base), self.val(rows));
        if rv.cols != bv.cols || rv.rows != positions.len() {
            return Err(PolarError::shape("set_rows shapes"));
        }
        if positions.iter().any(|&p| p >= bv.rows) {
            return Err(PolarError::shape("set_rows position out of range"));
        }
        let mut m = bv.clone();
        for (i, &p) in positions.iter().enumerate() {
            m.row_mut(p).copy_from_slice(rv.row(i));
        }
        Ok(self.push(Op::SetRows { base, rows, positions }, m, &[base, rows], None))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let cols = match parts.first() {
            Some(&p) => self.val(p).cols,
            None => return Err(PolarError::Empty("concat_rows".into())),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let v = self.val(p);
            if v.cols != cols {
                return Err(PolarError::shape("concat_rows column mismatch"));
            }
            rows += v.rows;
            data.extend_from_slice(&v.data);
        }
        let m = Dense { rows, cols, data };
        let parents = parts.clone();
        Ok(self.push(Op::ConcatRows(parts), m, &parents, None))
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.val(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let n = xv.row(r).iter().map(|&v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(PolarError::ZeroVector);
            }
            out.row_mut(r).iter_mut().for_each(|o| *o /= n);
            norms.push(n);
        }
        let out = self.rounded(out);
        Ok(self.push(Op::NormalizeRows { x, norms }, out, &[x], None))
    }

    fn reduction(&mut self, op: Op, x: NodeId, s: f64) -> NodeId {
        let m = Dense {
            rows: 1,
            cols: 1,
            data: vec![self.round(s)],
        };
        self.push(op, m, &[x], Some(s))
    }

    /// Mean of squared entries, as a 1×1 node.
    pub fn mean_squares(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let n = xv.data.len().max(1) as f64;
        let s = xv.data.iter().map(|v| v * v).sum::<f64>() / n;
        self.reduction(Op::MeanSquares(x), x, s)
    }

    /// Sum of squared entries, as a 1×1 node.
    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let s = self.val(x).data.iter().map(|v| v * v).sum::<f64>();
        self.reduction(Op::SumSquares(x), x, s)
    }
    /// Propagates adjoints from a 1×1 `loss` node back to every node that
    /// depends on a trainable leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.val(loss).shape() != (1, 1) {
            return Err(PolarError::shape(format!(
                "loss node must be 1x1, got {:?}",
                self.val(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            visited += 1;
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> Option<&'g mut [f64]> {
        let node = &self.nodes[id.0];
        if !node.needs_grad {
            return None;
        }
        let len = node.value.data.len();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (n, k, m) = (av.rows, av.cols, bv.cols);
                if let Some(da) = self.slot(grads, *a) {
                    // dA = dY · Bᵀ
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = bv.row(p);
                            da[i * k + p] += gi.iter().zip(brow).map(|(&x, &y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    // dB = Aᵀ · dY
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let s = av.data[i * k + p];
                            for (d, &x) in db[p * m..(p + 1) * m].iter_mut().zip(gi) {
                                *d += s * x;
                            }
                        }
                    }
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (n, k, m) = (av.rows, av.cols, bv.rows);
                if let Some(da) = self.slot(grads, *a) {
                    // dA = dY · B
                    for i in 0..n {
                        let dai = &mut da[i * k..(i + 1) * k];
                        for j in 0..m {
                            let s = g[i * m + j];
                            if s == 0.0 {
                                continue;
                            }
                            for (d, &y) in dai.iter_mut().zip(bv.row(j)) {
                                *d += s * y;
                            }
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    // dB = dYᵀ · A
                    for i in 0..n {
                        let arow = av.row(i);
                        for j in 0..m {
                            let s = g[i * m + j];
                            if s == 0.0 {
                                continue;
                            }
                            for (d, &x) in db[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                *d += s * x;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for (id, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(d) = self.slot(grads, id) {
                        for (x, &y) in d.iter_mut().zip(g) {
                            *x += sign * y;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                for (id, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if let Some(d) = self.slot(grads, id) {
                        for (x, &y) in d.iter_mut().zip(g) {
                            *x += sign * y;
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(d) = self.slot(grads, *a) {
                    for (x, &y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if let Some(d) = self.slot(grads, *row) {
                    let cols = d.len();
                    for chunk in g.chunks(cols) {
                        for (x, &y) in d.iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = self.slot(grads, *a) {
                    let s = *s;
                    for (x, &y) in d.iter_mut().zip(g) {
                        *x += s * y;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (xv, gv) = (self.val(*x), self.val(*gamma));
                let cols = xv.cols;
                let rows = xv.rows;
                let xhat = |r: usize, c: usize| (xv.data[r * cols + c] - mean[r]) * rstd[r];
                if let Some(dg) = self.slot(grads, *gamma) {
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * xhat(r, c);
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let n = cols as f64;
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let dxh = g[r * cols + c] * gv.data[c];
                            m1 += dxh;
                            m2 += dxh * xhat(r, c);
                        }
                        m1 /= n;
                        m2 /= n;
                        for c in 0..cols {
                            let dxh = g[r * cols + c] * gv.data[c];
                            dx[r * cols + c] += rstd[r] * (dxh - m1 - xhat(r, c) * m2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &v), &y) in dx.iter_mut().zip(&self.val(*x).data).zip(g) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *d += y * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                q_offset,
                probs,
            } => self.attention_backward(g, grads, (*q, *k, *v), *heads, *scale, *q_offset, probs),
            Op::SelectRows(x, rows) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let cols = out.cols;
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            dx[r * cols + c] += g[i * cols + c];
                        }
                    }
                }
            }
            Op::SetRows { base, rows, positions } => {
                let cols = out.cols;
                if let Some(db) = self.slot(grads, *base) {
                    for (i, (d, &y)) in db.iter_mut().zip(g).enumerate() {
                        if !positions.contains(&(i / cols)) {
                            *d += y;
                        }
                    }
                }
                if let Some(dr) = self.slot(grads, *rows) {
                    for (i, &p) in positions.iter().enumerate() {
                        for c in 0..cols {
                            dr[i * cols + c] += g[p * cols + c];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).data.len();
                    if let Some(d) = self.slot(grads, p) {
                        for (x, &y) in d.iter_mut().zip(&g[offset..offset + len]) {
                            *x += y;
                        }
                    }
                    offset += len;
                }
            }
            Op::NormalizeRows { x, norms } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let cols = out.cols;
                    for (r, &n) in norms.iter().enumerate() {
                        let y = out.row(r);
                        let gy = &g[r * cols..(r + 1) * cols];
                        let proj: f64 = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            dx[r * cols + c] += (gy[c] - y[c] * proj) / n;
                        }
                    }
                }
            }
            Op::MeanSquares(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let xv = self.val(*x);
                    let s = 2.0 * g[0] / xv.data.len().max(1) as f64;
                    for (d, &v) in dx.iter_mut().zip(&xv.data) {
                        *d += s * v;
                    }
                }
            }
            Op::SumSquares(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let s = 2.0 * g[0];
                    for (d, &v) in dx.iter_mut().zip(&self.val(*x).data) {
                        *d += s * v;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (NodeId, NodeId, NodeId),
        heads: usize,
        scale: f64,
        q_offset: usize,
        probs: &[f64],
    ) {
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let d = qv.cols;
        let dh = d / heads;
        let tq = qv.rows;
        let keys = kv.rows;
        let mut dq = vec![0.0f64; tq * d];
        let mut dk = vec![0.0f64; keys * d];
        let mut dv = vec![0.0f64; keys * d];
        let mut dp = vec![0.0f64; keys];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..tq {
                let visible = q_offset + i + 1;
                let base = (h * tq + i) * keys;
                let gi = &g[i * d + c0..i * d + c0 + dh];
                let mut weighted = 0.0;
                for j in 0..visible {
                    let p = probs[base + j];
                    let vrow = &vv.row(j)[c0..c0 + dh];
                    dp[j] = gi.iter().zip(vrow).map(|(&a, &b)| a * b).sum();
                    weighted += p * dp[j];
                    for (dst, &y) in dv[j * d + c0..j * d + c0 + dh].iter_mut().zip(gi) {
                        *dst += p * y;
                    }
                }
                let qrow = &qv.row(i)[c0..c0 + dh];
                for j in 0..visible {
                    let ds = probs[base + j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = &kv.row(j)[c0..c0 + dh];
                    for c in 0..dh {
                        dq[i * d + c0 + c] += ds * krow[c];
                        dk[j * d + c0 + c] += ds * qrow[c];
                    }
                }
            }
        }
        for (id, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(dst) = self.slot(grads, id) {
                for (x, y) in dst.iter_mut().zip(buf) {
                    *x += y;
                }
            }
        }
    }
}
