//! Tape-based reverse-mode differentiation over 2-D matrices.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Every op records its inputs plus whatever it needs for the backward pass;
//! [`Graph::backward`] walks the tape in reverse. Sequences are laid out as
//! `[batch * time, features]` with time varying fastest.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::par::{self, Exec};
use crate::tensor::{self, Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow { a: NodeId, row: NodeId },
    MulCol { a: NodeId, col: NodeId },
    AddRepeat { a: NodeId, y: NodeId, t: usize },
    AddTile { a: NodeId, p: NodeId, t: usize },
    Scale(NodeId, T),
    AddScalar(NodeId),
    Exp(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    LeakyRelu(NodeId, T),
    Abs(NodeId),
    Square(NodeId),
    Powf(NodeId, T),
    SumAll(NodeId),
    SumCols(NodeId),
    GatherRows { table: NodeId, ids: Vec<usize> },
    SliceCols { a: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Mat<T>, rstd: Vec<T> },
    Attention { q: NodeId, k: NodeId, v: NodeId, t: usize, heads: usize, probs: Vec<T> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, mask: Vec<bool>, probs: Mat<T> },
    GruCell { gx: NodeId, gh: NodeId, h: NodeId, mask: Vec<T>, r: Mat<T>, z: Mat<T>, n: Mat<T> },
    Unfold { x: NodeId, t: usize, w: usize },
    MaxPoolTime { x: NodeId, argmax: Vec<usize> },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Mat<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'a, T: Real> {
    store: Option<&'a ParamStore<T>>,
    nodes: Vec<Node<'a, T>>,
    params: HashMap<ParamId, NodeId>,
    exec: Exec,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    nodes: Vec<Option<Mat<T>>>,
    params: HashMap<ParamId, NodeId>,
}

impl<T: Real> Grads<T> {
    pub fn param(&self, id: ParamId) -> Option<&Mat<T>> {
        self.params.get(&id).and_then(|n| self.nodes[n.0].as_ref())
    }

    pub fn node(&self, id: NodeId) -> Option<&Mat<T>> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }
}

fn check_same(a: &Mat<impl Real>, b: &Mat<impl Real>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Graph { store: Some(store), nodes: Vec::new(), params: HashMap::new(), exec: Exec::default() }
    }

    /// A graph over constants and explicit inputs only.
    pub fn detached() -> Self {
        Graph { store: None, nodes: Vec::new(), params: HashMap::new(), exec: Exec::default() }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id.0].value
    }

    /// Leaf for a stored parameter. Repeated calls return the same node, so a
    /// parameter used in several places (weight tying) accumulates one gradient.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let store = self.store.expect("graph has no parameter store");
        self.nodes.push(Node { value: Cow::Borrowed(store.get(id)), op: Op::Leaf, needs_grad: true });
        let n = NodeId(self.nodes.len() - 1);
        self.params.insert(id, n);
        n
    }

    pub fn constant(&mut self, m: Mat<T>) -> NodeId {
        self.push(m, Op::Leaf, false)
    }

    /// A leaf that is not a stored parameter but still receives a gradient.
    pub fn input(&mut self, m: Mat<T>) -> NodeId {
        self.push(m, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let v = tensor::matmul(self.exec, self.value(a), ta, self.value(b), tb)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same(self.value(a), self.value(b), "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same(self.value(a), self.value(b), "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same(self.value(a), self.value(b), "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err(format!("add_row {:?} + {:?}", av.shape(), rv.shape())));
        }
        let mut v = av.clone();
        let r = rv.data().to_vec();
        for i in 0..v.rows() {
            v.row_mut(i).iter_mut().zip(&r).for_each(|(x, &b)| *x += b);
        }
        let ng = self.ng(&[a, row]);
        Ok(self.push(v, Op::AddRow { a, row }, ng))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(shape_err(format!("mul_col {:?} * {:?}", av.shape(), cv.shape())));
        }
        let mut v = av.clone();
        for i in 0..v.rows() {
            let c = cv.data()[i];
            v.row_mut(i).iter_mut().for_each(|x| *x *= c);
        }
        let ng = self.ng(&[a, col]);
        Ok(self.push(v, Op::MulCol { a, col }, ng))
    }

    /// Adds row `y[r / t]` to row `r` of `a` (per-sequence broadcast).
    pub fn add_repeat(&mut self, a: NodeId, y: NodeId, t: usize) -> Result<NodeId> {
        let (av, yv) = (self.value(a), self.value(y));
        if t == 0 || av.cols() != yv.cols() || av.rows() != yv.rows() * t {
            return Err(shape_err(format!("add_repeat {:?} + {:?} x{t}", av.shape(), yv.shape())));
        }
        let mut v = av.clone();
        for r in 0..v.rows() {
            let src = yv.row(r / t);
            v.row_mut(r).iter_mut().zip(src).for_each(|(x, &b)| *x += b);
        }
        let ng = self.ng(&[a, y]);
        Ok(self.push(v, Op::AddRepeat { a, y, t }, ng))
    }

    /// Adds row `p[r % t]` to row `r` of `a` (per-position broadcast).
    pub fn add_tile(&mut self, a: NodeId, p: NodeId, t: usize) -> Result<NodeId> {
        let (av, pv) = (self.value(a), self.value(p));
        if t == 0 || av.cols() != pv.cols() || av.rows() % t != 0 || pv.rows() < t {
            return Err(shape_err(format!("add_tile {:?} + {:?} period {t}", av.shape(), pv.shape())));
        }
        let mut v = av.clone();
        for r in 0..v.rows() {
            let src = pv.row(r % t);
            v.row_mut(r).iter_mut().zip(src).for_each(|(x, &b)| *x += b);
        }
        let ng = self.ng(&[a, p]);
        Ok(self.push(v, Op::AddTile { a, p, t }, ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let c = T::of(c);
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let c = T::of(c);
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(&[a]);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.exp());
        let ng = self.ng(&[a]);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.tanh());
        let ng = self.ng(&[a]);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(&[a]);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let s = T::of(slope);
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * s });
        let ng = self.ng(&[a]);
        self.push(v, Op::LeakyRelu(a, s), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.leaky_relu(a, 0.0)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.abs());
        let ng = self.ng(&[a]);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(&[a]);
        self.push(v, Op::Square(a), ng)
    }

    /// Elementwise `x^p`; inputs must be non-negative unless `p` is integral.
    pub fn powf(&mut self, a: NodeId, p: f64) -> NodeId {
        let p = T::of(p);
        let v = self.value(a).map(|x| x.powf(p));
        let ng = self.ng(&[a]);
        self.push(v, Op::Powf(a, p), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.ng(&[a]);
        self.push(Mat::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums as a `rows x 1` column.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let data = (0..av.rows()).map(|i| av.row(i).iter().copied().sum()).collect();
        let v = Mat::from_vec(av.rows(), 1, data).expect("row sums");
        let ng = self.ng(&[a]);
        self.push(v, Op::SumCols(a), ng)
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes row `i`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::IdOutOfRange(bad));
        }
        let v = tv.select_rows(ids);
        let ng = self.ng(&[table]);
        Ok(self.push(v, Op::GatherRows { table, ids: ids.to_vec() }, ng))
    }

    /// Row selection; gradients scatter back into the selected rows.
    pub fn select_rows(&mut self, a: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.gather_rows(a, ids)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(shape_err(format!("slice_cols {start}+{len} of {}", av.cols())));
        }
        let mut data = Vec::with_capacity(av.rows() * len);
        for i in 0..av.rows() {
            data.extend_from_slice(&av.row(i)[start..start + len]);
        }
        let v = Mat::from_vec(av.rows(), len, data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::SliceCols { a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(shape_err("concat_cols row mismatch"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Mat::from_vec(rows, cols, data)?;
        let ng = self.ng(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Row-wise layer normalization with affine `1 x cols` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let eps = T::of(1e-5);
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != (1, cols) || bv.shape() != (1, cols) {
            return Err(shape_err("layer_norm affine shape"));
        }
        let mut xhat = Mat::zeros(rows, cols);
        let mut out = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        let n = T::of(cols as f64);
        for i in 0..rows {
            let r = xv.row(i);
            let mu = r.iter().copied().sum::<T>() / n;
            let var = r.iter().map(|&a| (a - mu) * (a - mu)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..cols {
                let h = (r[j] - mu) * rs;
                xhat.set(i, j, h);
                out.set(i, j, h * gv.data()[j] + bv.data()[j]);
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// Causally masked multi-head scaled dot-product attention. `q`, `k`, `v`
    /// are `[batch * t, d]` with heads taking contiguous column blocks.
    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, t: usize, heads: usize) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.shape();
        if kv.shape() != (rows, d) || vv.shape() != (rows, d) || t == 0 || rows % t != 0 || heads == 0 || d % heads != 0 {
            return Err(shape_err(format!("attention {rows}x{d}, t={t}, heads={heads}")));
        }
        let batch = rows / t;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let per_b = par::map_range(self.exec, batch, |b| {
            let mut out = vec![T::zero(); t * d];
            let mut probs = vec![T::zero(); heads * t * t];
            let base = b * t;
            let mut s = vec![T::zero(); t];
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..t {
                    let qi = &qv.row(base + i)[c0..c0 + dh];
                    let mut mx = T::neg_infinity();
                    for j in 0..=i {
                        let kj = &kv.row(base + j)[c0..c0 + dh];
                        let dot: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                        s[j] = dot * scale;
                        mx = mx.max(s[j]);
                    }
                    let mut z = T::zero();
                    for sj in s.iter_mut().take(i + 1) {
                        *sj = (*sj - mx).exp();
                        z += *sj;
                    }
                    let p = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                    let o = &mut out[i * d + c0..i * d + c0 + dh];
                    for j in 0..=i {
                        let pj = s[j] / z;
                        p[j] = pj;
                        let vj = &vv.row(base + j)[c0..c0 + dh];
                        o.iter_mut().zip(vj).for_each(|(x, &y)| *x += pj * y);
                    }
                }
            }
            (out, probs)
        });
        let mut out = Vec::with_capacity(rows * d);
        let mut probs = Vec::with_capacity(batch * heads * t * t);
        for (o, p) in per_b {
            out.extend(o);
            probs.extend(p);
        }
        let value = Mat::from_vec(rows, d, out)?;
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(value, Op::Attention { q, k, v, t, heads, probs }, ng))
    }

    /// Summed token cross-entropy over rows whose `mask` entry is set.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], mask: &[bool]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (rows, cols) = lv.shape();
        if targets.len() != rows || mask.len() != rows {
            return Err(shape_err(format!("cross_entropy: {rows} rows, {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= cols) {
            return Err(Error::IdOutOfRange(bad));
        }
        let row_block = 64;
        let blocks = par::map_range(self.exec, rows.div_ceil(row_block), |bi| {
            let r0 = bi * row_block;
            let r1 = (r0 + row_block).min(rows);
            let mut probs = Vec::with_capacity((r1 - r0) * cols);
            let mut loss = T::zero();
            for r in r0..r1 {
                let x = lv.row(r);
                let mx = x.iter().copied().fold(T::neg_infinity(), T::max);
                let start = probs.len();
                let mut z = T::zero();
                for &xi in x {
                    let e = (xi - mx).exp();
                    z += e;
                    probs.push(e);
                }
                probs[start..].iter_mut().for_each(|p| *p /= z);
                if mask[r] {
                    loss += mx + z.ln() - x[targets[r]];
                }
            }
            (probs, loss)
        });
        let mut pdata = Vec::with_capacity(rows * cols);
        let mut losses = Vec::with_capacity(blocks.len());
        for (p, l) in blocks {
            pdata.extend(p);
            losses.push(l);
        }
        let probs = Mat::from_vec(rows, cols, pdata)?;
        let total: T = losses.iter().copied().sum();
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Mat::scalar(total),
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs },
            ng,
        ))
    }

    /// One masked GRU update. `gx` and `gh` are `[batch, 3h]` pre-activations
    /// (reset, update, candidate) from the input and the previous state; rows
    /// with `mask = 0` keep their previous state.
    pub fn gru_cell(&mut self, gx: NodeId, gh: NodeId, h: NodeId, mask: &[T]) -> Result<NodeId> {
        let (gxv, ghv, hv) = (self.value(gx), self.value(gh), self.value(h));
        let (b, hd) = hv.shape();
        if gxv.shape() != (b, 3 * hd) || ghv.shape() != (b, 3 * hd) || mask.len() != b {
            return Err(shape_err("gru_cell shapes"));
        }
        let mut r = Mat::zeros(b, hd);
        let mut z = Mat::zeros(b, hd);
        let mut n = Mat::zeros(b, hd);
        let mut out = Mat::zeros(b, hd);
        for i in 0..b {
            let (x, g, hp) = (gxv.row(i), ghv.row(i), hv.row(i));
            let m = mask[i];
            for j in 0..hd {
                let rj = sigmoid(x[j] + g[j]);
                let zj = sigmoid(x[hd + j] + g[hd + j]);
                let nj = (x[2 * hd + j] + rj * g[2 * hd + j]).tanh();
                let hn = (T::one() - zj) * nj + zj * hp[j];
                r.set(i, j, rj);
                z.set(i, j, zj);
                n.set(i, j, nj);
                out.set(i, j, m * hn + (T::one() - m) * hp[j]);
            }
        }
        let ng = self.ng(&[gx, gh, h]);
        Ok(self.push(out, Op::GruCell { gx, gh, h, mask: mask.to_vec(), r, z, n }, ng))
    }

    /// Sliding windows of `w` consecutive rows within each length-`t` sequence,
    /// concatenated column-wise: `[b*t, e] -> [b*(t-w+1), w*e]`.
    pub fn unfold(&mut self, x: NodeId, t: usize, w: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, e) = xv.shape();
        if t == 0 || w == 0 || w > t || rows % t != 0 {
            return Err(shape_err(format!("unfold {rows} rows, t={t}, w={w}")));
        }
        let b = rows / t;
        let l = t - w + 1;
        let mut data = Vec::with_capacity(b * l * w * e);
        for bi in 0..b {
            for p in 0..l {
                for o in 0..w {
                    data.extend_from_slice(xv.row(bi * t + p + o));
                }
            }
        }
        let v = Mat::from_vec(b * l, w * e, data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::Unfold { x, t, w }, ng))
    }

    /// Column-wise max over each group of `len` consecutive rows.
    pub fn max_pool_time(&mut self, x: NodeId, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, c) = xv.shape();
        if len == 0 || rows % len != 0 {
            return Err(shape_err("max_pool_time"));
        }
        let b = rows / len;
        let mut out = Mat::zeros(b, c);
        let mut argmax = vec![0usize; b * c];
        for bi in 0..b {
            for j in 0..c {
                let mut best = bi * len;
                for r in bi * len..(bi + 1) * len {
                    if xv.get(r, j) > xv.get(best, j) {
                        best = r;
                    }
                }
                argmax[bi * c + j] = best;
                out.set(bi, j, xv.get(best, j));
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::MaxPoolTime { x, argmax }, ng))
    }

    /// Reverse pass from a `1 x 1` root.
    pub fn backward(&self, root: NodeId) -> Result<Grads<T>> {
        if self.value(root).shape() != (1, 1) {
            return Err(shape_err("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::scalar(T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { nodes: grads, params: self.params.clone() })
    }

    fn acc(&self, grads: &mut [Option<Mat<T>>], id: NodeId, g: Mat<T>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &*node.value;
        let ex = self.exec;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.nodes[a.0].needs_grad {
                    let da = if ta { tensor::matmul(ex, bv, tb, g, true)? } else { tensor::matmul(ex, g, false, bv, !tb)? };
                    self.acc(grads, a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let db = if tb { tensor::matmul(ex, g, true, av, ta)? } else { tensor::matmul(ex, av, !ta, g, false)? };
                    self.acc(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                self.acc(grads, a, g.zip_map(bv, |x, y| x * y));
                self.acc(grads, b, g.zip_map(av, |x, y| x * y));
            }
            &Op::AddRow { a, row } => {
                self.acc(grads, a, g.clone());
                if self.nodes[row.0].needs_grad {
                    let mut dr = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        dr.data_mut().iter_mut().zip(g.row(r)).for_each(|(x, &y)| *x += y);
                    }
                    self.acc(grads, row, dr);
                }
            }
            &Op::MulCol { a, col } => {
                let (av, cv) = (self.value(a), self.value(col));
                if self.nodes[a.0].needs_grad {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        let c = cv.data()[r];
                        da.row_mut(r).iter_mut().for_each(|x| *x *= c);
                    }
                    self.acc(grads, a, da);
                }
                if self.nodes[col.0].needs_grad {
                    let data = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(&x, &y)| x * y).sum())
                        .collect();
                    self.acc(grads, col, Mat::from_vec(g.rows(), 1, data)?);
                }
            }
            &Op::AddRepeat { a, y, t } => {
                self.acc(grads, a, g.clone());
                if self.nodes[y.0].needs_grad {
                    let mut dy = Mat::zeros(g.rows() / t, g.cols());
                    for r in 0..g.rows() {
                        dy.row_mut(r / t).iter_mut().zip(g.row(r)).for_each(|(x, &v)| *x += v);
                    }
                    self.acc(grads, y, dy);
                }
            }
            &Op::AddTile { a, p, t } => {
                self.acc(grads, a, g.clone());
                if self.nodes[p.0].needs_grad {
                    let pv = self.value(p);
                    let mut dp = Mat::zeros(pv.rows(), pv.cols());
                    for r in 0..g.rows() {
                        dp.row_mut(r % t).iter_mut().zip(g.row(r)).for_each(|(x, &v)| *x += v);
                    }
                    self.acc(grads, p, dp);
                }
            }
            &Op::Scale(a, c) => self.acc(grads, a, g.map(|x| x * c)),
            &Op::AddScalar(a) => self.acc(grads, a, g.clone()),
            &Op::Exp(a) => self.acc(grads, a, g.zip_map(out, |x, y| x * y)),
            &Op::Tanh(a) => self.acc(grads, a, g.zip_map(out, |x, y| x * (T::one() - y * y))),
            &Op::Sigmoid(a) => self.acc(grads, a, g.zip_map(out, |x, y| x * y * (T::one() - y))),
            &Op::LeakyRelu(a, s) => {
                let da = g.zip_map(self.value(a), |x, y| if y > T::zero() { x } else { x * s });
                self.acc(grads, a, da);
            }
            &Op::Abs(a) => {
                let da = g.zip_map(self.value(a), |x, y| {
                    if y > T::zero() {
                        x
                    } else if y < T::zero() {
                        -x
                    } else {
                        T::zero()
                    }
                });
                self.acc(grads, a, da);
            }
            &Op::Square(a) => {
                let two = T::of(2.0);
                self.acc(grads, a, g.zip_map(self.value(a), |x, y| x * two * y));
            }
            &Op::Powf(a, p) => {
                let da = g.zip_map(self.value(a), |x, y| {
                    if y == T::zero() && p >= T::one() {
                        if p == T::one() { x } else { T::zero() }
                    } else {
                        x * p * y.powf(p - T::one())
                    }
                });
                self.acc(grads, a, da);
            }
            &Op::SumAll(a) => {
                let av = self.value(a);
                self.acc(grads, a, Mat::filled(av.rows(), av.cols(), g.item()));
            }
            &Op::SumCols(a) => {
                let av = self.value(a);
                let mut da = Mat::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let v = g.data()[r];
                    da.row_mut(r).iter_mut().for_each(|x| *x = v);
                }
                self.acc(grads, a, da);
            }
            Op::GatherRows { table, ids } => {
                if self.nodes[table.0].needs_grad {
                    // scatter straight into the accumulator; selections are often
                    // a small slice of a large table
                    let tv = self.value(*table);
                    let dt = grads[table.0].get_or_insert_with(|| Mat::zeros(tv.rows(), tv.cols()));
                    for (r, &id) in ids.iter().enumerate() {
                        dt.row_mut(id).iter_mut().zip(g.row(r)).for_each(|(x, &v)| *x += v);
                    }
                }
            }
            &Op::SliceCols { a, start } => {
                let av = self.value(a);
                let mut da = Mat::zeros(av.rows(), av.cols());
                let len = g.cols();
                for r in 0..g.rows() {
                    da.row_mut(r)[start..start + len].copy_from_slice(g.row(r));
                }
                self.acc(grads, a, da);
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.nodes[p.0].needs_grad {
                        let mut data = Vec::with_capacity(g.rows() * cols);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[c0..c0 + cols]);
                        }
                        self.acc(grads, p, Mat::from_vec(g.rows(), cols, data)?);
                    }
                    c0 += cols;
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.value(*gamma);
                let (rows, cols) = g.shape();
                let n = T::of(cols as f64);
                let mut dx = Mat::zeros(rows, cols);
                let mut dg = Mat::zeros(1, cols);
                let mut db = Mat::zeros(1, cols);
                let mut dxh = vec![T::zero(); cols];
                for r in 0..rows {
                    let (gr, hr) = (g.row(r), xhat.row(r));
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..cols {
                        dg.data_mut()[j] += gr[j] * hr[j];
                        db.data_mut()[j] += gr[j];
                        dxh[j] = gr[j] * gv.data()[j];
                        m1 += dxh[j];
                        m2 += dxh[j] * hr[j];
                    }
                    m1 = m1 / n;
                    m2 = m2 / n;
                    let dr = dx.row_mut(r);
                    for j in 0..cols {
                        dr[j] = rstd[r] * (dxh[j] - m1 - hr[j] * m2);
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dg);
                self.acc(grads, *beta, db);
            }
            Op::Attention { q, k, v, t, heads, probs } => {
                let (q, k, v, t, heads) = (*q, *k, *v, *t, *heads);
                let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
                let (rows, d) = qv.shape();
                let batch = rows / t;
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let per_b = par::map_range(ex, batch, |b| {
                    let base = b * t;
                    let mut dq = vec![T::zero(); t * d];
                    let mut dk = vec![T::zero(); t * d];
                    let mut dv = vec![T::zero(); t * d];
                    let mut dp = vec![T::zero(); t];
                    for h in 0..heads {
                        let c0 = h * dh;
                        let pb = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                        for i in 0..t {
                            let go = &g.row(base + i)[c0..c0 + dh];
                            let p = &pb[i * t..(i + 1) * t];
                            let mut acc = T::zero();
                            for j in 0..=i {
                                let vj = &vv.row(base + j)[c0..c0 + dh];
                                dp[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                                acc += p[j] * dp[j];
                                let dvj = &mut dv[j * d + c0..j * d + c0 + dh];
                                dvj.iter_mut().zip(go).for_each(|(x, &y)| *x += p[j] * y);
                            }
                            let qi = &qv.row(base + i)[c0..c0 + dh];
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - acc) * scale;
                                let kj = &kv.row(base + j)[c0..c0 + dh];
                                let dqi = &mut dq[i * d + c0..i * d + c0 + dh];
                                dqi.iter_mut().zip(kj).for_each(|(x, &y)| *x += ds * y);
                                let dkj = &mut dk[j * d + c0..j * d + c0 + dh];
                                dkj.iter_mut().zip(qi).for_each(|(x, &y)| *x += ds * y);
                            }
                        }
                    }
                    (dq, dk, dv)
                });
                let mut dq = Vec::with_capacity(rows * d);
                let mut dk = Vec::with_capacity(rows * d);
                let mut dv = Vec::with_capacity(rows * d);
                for (a, b, c) in per_b {
                    dq.extend(a);
                    dk.extend(b);
                    dv.extend(c);
                }
                self.acc(grads, q, Mat::from_vec(rows, d, dq)?);
                self.acc(grads, k, Mat::from_vec(rows, d, dk)?);
                self.acc(grads, v, Mat::from_vec(rows, d, dv)?);
            }
            Op::CrossEntropy { logits, targets, mask, probs } => {
                let s = g.item();
                let mut dl = probs.clone();
                for r in 0..dl.rows() {
                    let row = dl.row_mut(r);
                    if mask[r] {
                        row[targets[r]] -= T::one();
                        row.iter_mut().for_each(|x| *x *= s);
                    } else {
                        row.iter_mut().for_each(|x| *x = T::zero());
                    }
                }
                self.acc(grads, *logits, dl);
            }
            Op::GruCell { gx, gh, h, mask, r, z, n } => {
                let hv = self.value(*h);
                let ghv = self.value(*gh);
                let (b, hd) = hv.shape();
                let mut dgx = Mat::zeros(b, 3 * hd);
                let mut dgh = Mat::zeros(b, 3 * hd);
                let mut dh = Mat::zeros(b, hd);
                let one = T::one();
                for i in 0..b {
                    let m = mask[i];
                    for j in 0..hd {
                        let go = g.get(i, j);
                        let (rj, zj, nj) = (r.get(i, j), z.get(i, j), n.get(i, j));
                        let hp = hv.get(i, j);
                        let dhn = go * m;
                        dh.set(i, j, go * (one - m) + dhn * zj);
                        let dn = dhn * (one - zj);
                        let dz = dhn * (hp - nj);
                        let dan = dn * (one - nj * nj);
                        let dr = dan * ghv.get(i, 2 * hd + j);
                        let daz = dz * zj * (one - zj);
                        let dar = dr * rj * (one - rj);
                        dgx.set(i, j, dar);
                        dgx.set(i, hd + j, daz);
                        dgx.set(i, 2 * hd + j, dan);
                        dgh.set(i, j, dar);
                        dgh.set(i, hd + j, daz);
                        dgh.set(i, 2 * hd + j, dan * rj);
                    }
                }
                self.acc(grads, *gx, dgx);
                self.acc(grads, *gh, dgh);
                self.acc(grads, *h, dh);
            }
            &Op::Unfold { x, t, w } => {
                let xv = self.value(x);
                let e = xv.cols();
                let b = xv.rows() / t;
                let l = t - w + 1;
                let mut dx = Mat::zeros(xv.rows(), e);
                for bi in 0..b {
                    for p in 0..l {
                        let gr = g.row(bi * l + p);
                        for o in 0..w {
                            dx.row_mut(bi * t + p + o)
                                .iter_mut()
                                .zip(&gr[o * e..(o + 1) * e])
                                .for_each(|(a, &v)| *a += v);
                        }
                    }
                }
                self.acc(grads, x, dx);
            }
            Op::MaxPoolTime { x, argmax } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Mat::zeros(xv.rows(), c);
                for (idx, &src) in argmax.iter().enumerate() {
                    let j = idx % c;
                    let v = dx.get(src, j) + g.data()[idx];
                    dx.set(src, j, v);
                }
                self.acc(grads, *x, dx);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
