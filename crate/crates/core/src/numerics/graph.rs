//! Reverse-mode differentiation over a per-forward tape.
//!
//! A [`Graph`] owns every value produced during one forward pass. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and `backward` is a single reverse sweep.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Bmm { a: Var, b: Var, trans_b: bool, groups: usize },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Transpose(Var),
    Reshape(Var),
    SplitHeads { x: Var, groups: usize, tokens: usize, heads: usize },
    MergeHeads { x: Var, groups: usize, tokens: usize, heads: usize },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Softplus(Var),
    Mse(Var, Var),
    L1(Var, Var),
    Mean(Var),
    Sum(Var),
    Embedding { table: Var, ids: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Softplus(_) => "softplus",
            Op::Mse(..) => "mse",
            Op::L1(..) => "l1",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::Embedding { .. } => "embedding",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Variance epsilon used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Default)]
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

    /// Op names in evaluation order, for inspection.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric(format!("NaN input to {what}")));
        }
        Ok(())
    }

    // ---- forward ops -------------------------------------------------------

    /// `a · b` where `a` is `[.., k]` (rows view) and `b` is `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` where `a` is `[.., k]` and `b` is `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.len() < 2 {
            return Err(Error::Shape(format!("matmul needs matrices, got {sa:?} and {sb:?}")));
        }
        let k = *sa.last().unwrap();
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: {sa:?} · {}{sb:?}",
                if trans_b { "transpose " } else { "" }
            )));
        }
        let rows = self.value(a).rows();
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Grouped product: `a: [g, m, k]` with `b: [g, k, n]` (or `[g, n, k]`
    /// when `trans_b`), giving `[g, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Shape(format!("bmm needs matching [g,.,.] operands, got {sa:?} and {sb:?}")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::Shape(format!("bmm inner extents differ: {sa:?} and {sb:?}")));
        }
        let mut out = vec![0.0; g * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..g {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[g, m, n], out)?, Op::Bmm { a, b, trans_b, groups: g }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// `x[.., d] + bias[d]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::Shape(format!("bias {:?} does not match rows of {:?}", self.shape(bias), self.shape(x))));
        }
        let b = self.value(bias).data();
        let data = self.value(x).data().chunks(d).flat_map(|r| r.iter().zip(b).map(|(u, v)| u + v)).collect();
        let t = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    /// Stacks the row views of all inputs (shared trailing extent) into `[Σrows, d]`.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let d = self.value(first).last_dim();
        let mut data = Vec::new();
        for &x in xs {
            if self.value(x).last_dim() != d {
                return Err(Error::Shape(format!(
                    "concat_rows: trailing extents differ ({:?} vs {:?})",
                    self.shape(first),
                    self.shape(x)
                )));
            }
            data.extend_from_slice(self.value(x).data());
        }
        let rows = data.len() / d;
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(&[rows, d], data)?, Op::ConcatRows(xs.to_vec()), rg))
    }

    /// Joins 2-D inputs with equal row counts along the column axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?;
        let rows = self.value(first).rows();
        for &x in xs {
            if self.shape(x).len() != 2 || self.value(x).rows() != rows {
                return Err(Error::Shape(format!(
                    "concat_cols: {:?} incompatible with {:?}",
                    self.shape(x),
                    self.shape(first)
                )));
            }
        }
        let total: usize = xs.iter().map(|&x| self.value(x).last_dim()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                let d = self.value(x).last_dim();
                data.extend_from_slice(&self.value(x).data()[r * d..(r + 1) * d]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(&[rows, total], data)?, Op::ConcatCols(xs.to_vec()), rg))
    }

    /// Rows `start..start+len` of the row view, as `[len, d]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if len == 0 || start + len > t.rows() {
            return Err(Error::Shape(format!("slice {start}..{} out of {} rows of {:?}", start + len, t.rows(), t.shape())));
        }
        let out = t.row_block(start, len);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose needs a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[c, r], data)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `[g, t, h·dh] → [g·h, t, dh]`.
    pub fn split_heads(&mut self, x: Var, groups: usize, tokens: usize, heads: usize) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d % heads != 0 || self.value(x).len() != groups * tokens * d {
            return Err(Error::Shape(format!("cannot split {:?} into {groups}×{tokens} with {heads} heads", self.shape(x))));
        }
        let dh = d / heads;
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for g in 0..groups {
            for t in 0..tokens {
                for h in 0..heads {
                    let from = (g * tokens + t) * d + h * dh;
                    let to = ((g * heads + h) * tokens + t) * dh;
                    data[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[groups * heads, tokens, dh], data)?, Op::SplitHeads { x, groups, tokens, heads }, rg))
    }

    /// Inverse of [`split_heads`](Self::split_heads): `[g·h, t, dh] → [g·t, h·dh]`.
    pub fn merge_heads(&mut self, x: Var, groups: usize, tokens: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != groups * heads || s[1] != tokens {
            return Err(Error::Shape(format!("cannot merge {s:?} as {groups}×{heads} heads of {tokens} tokens")));
        }
        let dh = s[2];
        let d = dh * heads;
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for g in 0..groups {
            for t in 0..tokens {
                for h in 0..heads {
                    let to = (g * tokens + t) * d + h * dh;
                    let from = ((g * heads + h) * tokens + t) * dh;
                    data[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[groups * tokens, d], data)?, Op::MergeHeads { x, groups, tokens, heads }, rg))
    }

    /// Softmax along the trailing axis, stabilised by subtracting the row max.
    /// Entries equal to `-inf` get exactly zero weight.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_finite(x, "softmax")?;
        let t = self.value(x);
        let d = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                row.fill(0.0);
                continue;
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm affine {:?}/{:?} does not match {:?}",
                self.shape(gain),
                self.shape(bias),
                self.shape(x)
            )));
        }
        let t = self.value(x);
        let rows = t.rows();
        let mut xhat = vec![0.0; t.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        let rg = self.rg(&[x]);
        self.push(t, Op::Softplus(x), rg)
    }

    /// `x[.., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Mean squared error, reduced to a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let v = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(v), Op::Mse(pred, target), rg))
    }

    /// Mean absolute error, reduced to a scalar.
    pub fn l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "l1")?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let v = p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(v), Op::L1(pred, target), rg))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.sum() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    /// Gathers rows of `table: [vocab, d]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() {
            return Err(Error::Shape(format!("embedding table {s:?} with {} ids", ids.len())));
        }
        let (vocab, d) = (s[0], s[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Shape(format!("token id {id} outside vocabulary of {vocab}")));
            }
            data.extend_from_slice(&self.value(table).data()[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor::new(&[ids.len(), d], data)?, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Accumulates d`loss`/d(node) into every node that requires a gradient.
    /// Call [`zero_grads`](Self::zero_grads) first to restart accumulation.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = self.nodes.iter_mut().map(|n| n.grad.take().map(Tensor::into_data)).collect();
        add_into(&mut grads, loss, &[1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (n, g) in self.nodes.iter_mut().zip(grads) {
            if n.requires_grad {
                n.grad = g.map(|g| Tensor::new(n.value.shape(), g).expect("grad shape"));
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let k = ta.last_dim();
                let rows = ta.rows();
                let n = node.value.last_dim();
                if rg(a) {
                    let ga = slot(grads, a, ta.len());
                    // ga += g · bᵀ (or g · b when b was read transposed)
                    gemm(rows, n, k, g, false, tb.data(), !trans_b, ga, true);
                }
                if rg(b) {
                    let gb = slot(grads, b, tb.len());
                    if trans_b {
                        gemm(n, rows, k, g, true, ta.data(), false, gb, true);
                    } else {
                        gemm(k, rows, n, ta.data(), true, g, false, gb, true);
                    }
                }
            }
            &Op::Bmm { a, b, trans_b, groups } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = (ta.shape()[1], ta.shape()[2]);
                let n = node.value.shape()[2];
                for i in 0..groups {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &tb.data()[i * k * n..(i + 1) * k * n];
                    let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                    if rg(a) {
                        let ga = &mut slot(grads, a, ta.len())[i * m * k..(i + 1) * m * k];
                        gemm(m, n, k, gi, false, bi, !trans_b, ga, true);
                    }
                    if rg(b) {
                        let gb = &mut slot(grads, b, tb.len())[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, gi, true, ai, false, gb, true);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, gb, true);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if rg(v) {
                        add_into(grads, v, g);
                    }
                }
            }
            &Op::AddBias(x, bias) => {
                if rg(x) {
                    add_into(grads, x, g);
                }
                if rg(bias) {
                    let d = self.value(bias).len();
                    let gb = slot(grads, bias, d);
                    for row in g.chunks(d) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a).data(), self.value(b).data());
                if rg(a) {
                    let ga = slot(grads, a, ta.len());
                    for ((acc, gv), bv) in ga.iter_mut().zip(g).zip(tb) {
                        *acc += gv * bv;
                    }
                }
                if rg(b) {
                    let gb = slot(grads, b, tb.len());
                    for ((acc, gv), av) in gb.iter_mut().zip(g).zip(ta) {
                        *acc += gv * av;
                    }
                }
            }
            &Op::Scale(x, s) => {
                if rg(x) {
                    let gx = slot(grads, x, g.len());
                    for (acc, gv) in gx.iter_mut().zip(g) {
                        *acc += gv * s;
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    if rg(x) {
                        add_into(grads, x, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.last_dim();
                let rows = node.value.rows();
                let mut col = 0;
                for &x in xs {
                    let d = self.value(x).last_dim();
                    if rg(x) {
                        let gx = slot(grads, x, rows * d);
                        for r in 0..rows {
                            for j in 0..d {
                                gx[r * d + j] += g[r * total + col + j];
                            }
                        }
                    }
                    col += d;
                }
            }
            &Op::SliceRows { x, start } => {
                if rg(x) {
                    let t = self.value(x);
                    let d = t.last_dim();
                    let gx = slot(grads, x, t.len());
                    for (acc, gv) in gx[start * d..start * d + g.len()].iter_mut().zip(g) {
                        *acc += gv;
                    }
                }
            }
            &Op::Transpose(x) => {
                if rg(x) {
                    let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                    let gx = slot(grads, x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if rg(x) {
                    add_into(grads, x, g);
                }
            }
            &Op::SplitHeads { x, groups, tokens, heads } => {
                if rg(x) {
                    let d = self.value(x).last_dim();
                    let dh = d / heads;
                    let gx = slot(grads, x, g.len());
                    for gi in 0..groups {
                        for t in 0..tokens {
                            for h in 0..heads {
                                let xo = (gi * tokens + t) * d + h * dh;
                                let yo = ((gi * heads + h) * tokens + t) * dh;
                                for j in 0..dh {
                                    gx[xo + j] += g[yo + j];
                                }
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads { x, groups, tokens, heads } => {
                if rg(x) {
                    let dh = self.value(x).last_dim();
                    let d = dh * heads;
                    let gx = slot(grads, x, g.len());
                    for gi in 0..groups {
                        for t in 0..tokens {
                            for h in 0..heads {
                                let yo = (gi * tokens + t) * d + h * dh;
                                let xo = ((gi * heads + h) * tokens + t) * dh;
                                for j in 0..dh {
                                    gx[xo + j] += g[yo + j];
                                }
                            }
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                if rg(x) {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    let gx = slot(grads, x, y.len());
                    for ((yr, gr), xr) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            xr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = self.value(gain).len();
                if rg(gain) {
                    let gg = slot(grads, gain, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if rg(bias) {
                    let gb = slot(grads, bias, d);
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                }
                if rg(x) {
                    let gain_v = self.value(gain).data();
                    let gx = slot(grads, x, g.len());
                    let inv_d = 1.0 / d as f64;
                    for (r, ((gr, hr), xr)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let gh = gr[j] * gain_v[j];
                            m1 += gh;
                            m2 += gh * hr[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let gh = gr[j] * gain_v[j];
                            xr[j] += rstd[r] * (gh - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if rg(x) {
                    let xv = self.value(x).data();
                    let gx = slot(grads, x, xv.len());
                    for ((acc, gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        *acc += gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                }
            }
            &Op::Softplus(x) => {
                if rg(x) {
                    let xv = self.value(x).data();
                    let gx = slot(grads, x, xv.len());
                    for ((acc, gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *acc += gv / (1.0 + (-v).exp());
                    }
                }
            }
            &Op::Mse(p, t) => {
                let (pv, tv) = (self.value(p).data(), self.value(t).data());
                let c = 2.0 * g[0] / pv.len() as f64;
                for (v, sign) in [(p, 1.0), (t, -1.0)] {
                    if rg(v) {
                        let gv = slot(grads, v, pv.len());
                        for ((acc, a), b) in gv.iter_mut().zip(pv).zip(tv) {
                            *acc += sign * c * (a - b);
                        }
                    }
                }
            }
            &Op::L1(p, t) => {
                let (pv, tv) = (self.value(p).data(), self.value(t).data());
                let c = g[0] / pv.len() as f64;
                for (v, sign) in [(p, 1.0), (t, -1.0)] {
                    if rg(v) {
                        let gv = slot(grads, v, pv.len());
                        for ((acc, a), b) in gv.iter_mut().zip(pv).zip(tv) {
                            let s = if a > b {
                                1.0
                            } else if a < b {
                                -1.0
                            } else {
                                0.0
                            };
                            *acc += sign * c * s;
                        }
                    }
                }
            }
            &Op::Mean(x) => {
                if rg(x) {
                    let n = self.value(x).len();
                    let c = g[0] / n as f64;
                    for acc in slot(grads, x, n).iter_mut() {
                        *acc += c;
                    }
                }
            }
            &Op::Sum(x) => {
                if rg(x) {
                    let n = self.value(x).len();
                    for acc in slot(grads, x, n).iter_mut() {
                        *acc += g[0];
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                if rg(table) {
                    let d = self.value(table).last_dim();
                    let gt = slot(grads, table, self.value(table).len());
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[i * d + j];
                        }
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    let s = slot(grads, v, g.len());
    for (acc, x) in s.iter_mut().zip(g) {
        *acc += x;
    }
}
