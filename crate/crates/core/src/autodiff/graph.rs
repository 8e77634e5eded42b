use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive that produced a node. Parents always have smaller ids than the
/// node itself, so the tape order is a topological order.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `op(a) · op(b)` where `op` optionally transposes.
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    ConcatCols(Var, Var),
    SliceCols { src: Var, start: usize },
    PadCols { src: Var, left: usize },
    GatherRows { src: Var, ids: Arc<[usize]> },
    ScatterRows { src: Var, ids: Arc<[usize]> },
    Tanh(Var),
    /// `1 - x²`, the local derivative of tanh expressed on its output.
    OneMinusSq(Var),
    SoftmaxRows(Var),
    Log(Var),
    Recip(Var),
    Sum(Var),
    Expand(Var),
    RowSum(Var),
    BroadcastCols(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Probabilities below this are clamped before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Append-only tape of tensor operations with a reverse-mode pass.
///
/// Gradients are themselves built out of tape operations, so with
/// `create_graph` the returned gradients can be differentiated again.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Trainable leaves propagate `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::InvalidValue("leaf holds a non-finite value".into()));
        }
        Ok(self.push_raw(value, Op::Leaf, trainable))
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)`, transposing `a` and/or `b` as requested.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims(a)?;
        let (br, bc) = self.dims(b)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: {m}×{k} times {k2}×{n} (ta={ta}, tb={tb})"
            )));
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = if ta { av[p * ac + i] } else { av[i * ac + p] };
                if x == 0.0 {
                    continue;
                }
                if tb {
                    for (j, o) in row.iter_mut().enumerate() {
                        *o += x * bv[j * bc + p];
                    }
                } else {
                    let brow = &bv[p * bc..(p + 1) * bc];
                    for (o, &y) in row.iter_mut().zip(brow) {
                        *o += x * y;
                    }
                }
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    /// Concatenates two matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.dims(a)?;
        let (br, bc) = self.dims(b)?;
        if ar != br {
            return Err(Error::Shape(format!("concat: {ar} rows vs {br} rows")));
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = Vec::with_capacity(ar * (ac + bc));
        for r in 0..ar {
            out.extend_from_slice(&av[r * ac..(r + 1) * ac]);
            out.extend_from_slice(&bv[r * bc..(r + 1) * bc]);
        }
        let t = Tensor::matrix(ar, ac + bc, out)?;
        Ok(self.push(t, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Columns `[start, start + len)`.
    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(src)?;
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!("slice [{start}, {}) of {c} columns", start + len)));
        }
        let sv = self.value(src).values();
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&sv[row * c + start..row * c + start + len]);
        }
        let t = Tensor::matrix(r, len, out)?;
        Ok(self.push(t, Op::SliceCols { src, start }, &[src]))
    }

    /// Embeds `src` in a zero matrix of `total` columns starting at `left`.
    fn pad_cols(&mut self, src: Var, left: usize, total: usize) -> Result<Var> {
        let (r, c) = self.dims(src)?;
        if left + c > total {
            return Err(Error::Shape(format!("pad {c} columns at {left} into {total}")));
        }
        let sv = self.value(src).values();
        let mut out = vec![0.0; r * total];
        for row in 0..r {
            out[row * total + left..row * total + left + c]
                .copy_from_slice(&sv[row * c..(row + 1) * c]);
        }
        let t = Tensor::matrix(r, total, out)?;
        Ok(self.push(t, Op::PadCols { src, left }, &[src]))
    }

    /// Selects rows of `src` by index (embedding lookup).
    pub fn gather_rows(&mut self, src: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(src)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("row index {bad} out of {r} rows")));
        }
        let sv = self.value(src).values();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&sv[i * c..(i + 1) * c]);
        }
        let t = Tensor::matrix(ids.len(), c, out)?;
        Ok(self.push(t, Op::GatherRows { src, ids: ids.into() }, &[src]))
    }

    /// Adjoint of [`Graph::gather_rows`]: accumulates row `k` of `src` into
    /// row `ids[k]` of a `rows`-row zero matrix.
    fn scatter_rows(&mut self, src: Var, ids: Arc<[usize]>, rows: usize) -> Result<Var> {
        let (r, c) = self.dims(src)?;
        if r != ids.len() || ids.iter().any(|&i| i >= rows) {
            return Err(Error::Shape("scatter indices do not match source".into()));
        }
        let sv = self.value(src).values();
        let mut out = vec![0.0; rows * c];
        for (k, &i) in ids.iter().enumerate() {
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(&sv[k * c..(k + 1) * c]) {
                *o += x;
            }
        }
        let t = Tensor::matrix(rows, c, out)?;
        Ok(self.push(t, Op::ScatterRows { src, ids }, &[src]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    fn one_minus_sq(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 - x * x);
        self.push(v, Op::OneMinusSq(a), &[a])
    }

    /// Row-wise softmax with max-shift.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let av = self.value(a).values();
        let mut out = vec![0.0; r * c];
        for row in 0..r {
            let src = &av[row * c..(row + 1) * c];
            let dst = &mut out[row * c..(row + 1) * c];
            let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - m).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        let t = Tensor::matrix(r, c, out)?;
        Ok(self.push(t, Op::SoftmaxRows(a), &[a]))
    }

    /// Natural log of `max(x, PROB_FLOOR)`; the clamped region has zero slope.
    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(PROB_FLOOR).ln());
        self.push(v, Op::Log(a), &[a])
    }

    /// `1/x` above the floor, `0` below it (derivative of the clamped log).
    fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x < PROB_FLOOR { 0.0 } else { 1.0 / x });
        self.push(v, Op::Recip(a), &[a])
    }

    /// Sum of all entries as a 1×1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `Σ w_i · x_i` for equally shaped `w` and `x`.
    pub fn weighted_sum(&mut self, w: Var, x: Var) -> Result<Var> {
        let p = self.mul(w, x)?;
        Ok(self.sum(p))
    }

    /// Broadcasts a scalar to `shape`.
    fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if !self.value(a).is_scalar() {
            return Err(Error::Shape("expand needs a scalar".into()));
        }
        let t = Tensor::full(shape, self.value(a).item());
        Ok(self.push(t, Op::Expand(a), &[a]))
    }

    /// Per-row sums as an r×1 column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let av = self.value(a).values();
        let out = (0..r).map(|row| av[row * c..(row + 1) * c].iter().sum()).collect();
        let t = Tensor::matrix(r, 1, out)?;
        Ok(self.push(t, Op::RowSum(a), &[a]))
    }

    /// Repeats an r×1 column across `cols` columns.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if c != 1 {
            return Err(Error::Shape(format!("broadcast needs one column, got {c}")));
        }
        let av = self.value(a).values();
        let out = (0..r).flat_map(|row| std::iter::repeat_n(av[row], cols)).collect();
        let t = Tensor::matrix(r, cols, out)?;
        Ok(self.push(t, Op::BroadcastCols(a), &[a]))
    }

    /// Gradients of the scalar `objective` with respect to each of `wrt`.
    ///
    /// Leaves that do not reach the objective get a zero tensor of their own
    /// shape. With `create_graph` the returned nodes stay connected to the
    /// tape and can be differentiated again; otherwise the backward nodes are
    /// dropped and the gradients come back as fresh constants.
    pub fn grad(&mut self, objective: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        if !self.value(objective).is_scalar() {
            return Err(Error::NotScalar(self.shape(objective).to_vec()));
        }
        let mark = self.nodes.len();
        let raw = self.backward(objective, wrt)?;
        if create_graph {
            return Ok(raw);
        }
        let values: Vec<Tensor> = raw.iter().map(|&g| self.value(g).clone()).collect();
        self.nodes.truncate(mark);
        Ok(values.into_iter().map(|t| self.push_raw(t, Op::Leaf, false)).collect())
    }

    /// Convenience: gradient values without keeping any backward nodes.
    pub fn grad_values(&mut self, objective: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        if !self.value(objective).is_scalar() {
            return Err(Error::NotScalar(self.shape(objective).to_vec()));
        }
        let mark = self.nodes.len();
        let raw = self.backward(objective, wrt)?;
        let values = raw.iter().map(|&g| self.value(g).clone()).collect();
        self.nodes.truncate(mark);
        Ok(values)
    }

    fn backward(&mut self, objective: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let end = objective.0 + 1;
        // nodes whose value depends on some wrt node
        let mut live = vec![false; end];
        for w in wrt {
            if w.0 < end {
                live[w.0] = true;
            }
        }
        for i in 0..end {
            if live[i] {
                continue;
            }
            live[i] = parents(&self.nodes[i].op).iter().any(|p| live[p.0]);
        }

        let mut adj: Vec<Option<Var>> = vec![None; end];
        if live[objective.0] {
            let shape = self.shape(objective).to_vec();
            adj[objective.0] = Some(self.push_raw(Tensor::full(&shape, 1.0), Op::Leaf, false));
        }
        for i in (0..end).rev() {
            let Some(g) = adj[i] else { continue };
            if !live[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (parent, contrib) in self.vjp(Var(i), &op, g, &live)? {
                adj[parent.0] = Some(match adj[parent.0] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let g = match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(w).to_vec();
                    self.push_raw(Tensor::zeros(&shape), Op::Leaf, false)
                }
            };
            out.push(g);
        }
        Ok(out)
    }

    /// Vector-Jacobian products of node `out` (produced by `op`) for each
    /// live parent, written in terms of tape operations.
    fn vjp(&mut self, out: Var, op: &Op, g: Var, live: &[bool]) -> Result<Vec<(Var, Var)>> {
        let want = |v: &Var| live[v.0];
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(&a) {
                    res.push((a, g));
                }
                if want(&b) {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if want(&a) {
                    res.push((a, g));
                }
                if want(&b) {
                    res.push((b, self.scale(g, -1.0)));
                }
            }
            Op::Mul(a, b) => {
                if want(&a) {
                    res.push((a, self.mul(g, b)?));
                }
                if want(&b) {
                    res.push((b, self.mul(g, a)?));
                }
            }
            Op::Scale(a, c) => {
                if want(&a) {
                    res.push((a, self.scale(g, c)));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                if want(&a) {
                    let ga = if ta { self.matmul_t(b, g, tb, true)? } else { self.matmul_t(g, b, false, !tb)? };
                    res.push((a, ga));
                }
                if want(&b) {
                    let gb = if tb { self.matmul_t(g, a, true, ta)? } else { self.matmul_t(a, g, !ta, false)? };
                    res.push((b, gb));
                }
            }
            Op::ConcatCols(a, b) => {
                let (_, ac) = self.dims(a)?;
                let (_, bc) = self.dims(b)?;
                if want(&a) {
                    res.push((a, self.slice_cols(g, 0, ac)?));
                }
                if want(&b) {
                    res.push((b, self.slice_cols(g, ac, bc)?));
                }
            }
            Op::SliceCols { src, start } => {
                let (_, total) = self.dims(src)?;
                res.push((src, self.pad_cols(g, start, total)?));
            }
            Op::PadCols { src, left } => {
                let (_, c) = self.dims(src)?;
                res.push((src, self.slice_cols(g, left, c)?));
            }
            Op::GatherRows { src, ref ids } => {
                let (rows, _) = self.dims(src)?;
                res.push((src, self.scatter_rows(g, ids.clone(), rows)?));
            }
            Op::ScatterRows { src, ref ids } => {
                res.push((src, self.gather_rows(g, ids)?));
            }
            Op::Tanh(a) => {
                let d = self.one_minus_sq(out);
                res.push((a, self.mul(g, d)?));
            }
            Op::OneMinusSq(a) => {
                let ga = self.mul(g, a)?;
                res.push((a, self.scale(ga, -2.0)));
            }
            Op::SoftmaxRows(a) => {
                let (_, c) = self.dims(a)?;
                let gy = self.mul(g, out)?;
                let rs = self.row_sum(gy)?;
                let bc = self.broadcast_cols(rs, c)?;
                let centered = self.sub(g, bc)?;
                res.push((a, self.mul(out, centered)?));
            }
            Op::Log(a) => {
                let r = self.recip(a);
                res.push((a, self.mul(g, r)?));
            }
            Op::Recip(a) => {
                let sq = self.mul(out, out)?;
                let gs = self.mul(g, sq)?;
                res.push((a, self.scale(gs, -1.0)));
            }
            Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                res.push((a, self.expand(g, &shape)?));
            }
            Op::Expand(a) => {
                let s = self.sum(g);
                res.push((a, s));
            }
            Op::RowSum(a) => {
                let (_, c) = self.dims(a)?;
                res.push((a, self.broadcast_cols(g, c)?));
            }
            Op::BroadcastCols(a) => {
                res.push((a, self.row_sum(g)?));
            }
        }
        res.retain(|(p, _)| want(p));
        Ok(res)
    }

    /// Invariant check used in tests: every parent precedes its child.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| parents(&n.op).iter().all(|p| p.0 < i))
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatCols(a, b) => vec![a, b],
        Op::MatMul { a, b, .. } => vec![a, b],
        Op::Scale(a, _)
        | Op::Tanh(a)
        | Op::OneMinusSq(a)
        | Op::SoftmaxRows(a)
        | Op::Log(a)
        | Op::Recip(a)
        | Op::Sum(a)
        | Op::Expand(a)
        | Op::RowSum(a)
        | Op::BroadcastCols(a) => vec![a],
        Op::SliceCols { src, .. }
        | Op::PadCols { src, .. }
        | Op::GatherRows { src, .. }
        | Op::ScatterRows { src, .. } => vec![src],
    }
}
