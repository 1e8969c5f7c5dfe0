//! Reverse-mode automatic differentiation over a per-pass tape.
//!
//! Every operation appends a node holding its value and enough saved state to
//! run its vector-Jacobian product. [`Tape::backward`] replays the nodes in
//! reverse creation order, which is a valid topological order because inputs
//! always precede outputs.

use super::ops::{self, dot};
use super::{ParamId, ParameterStore, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param { store: u64, id: ParamId },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    MulConst(Var, Vec<f64>),
    MulScalarVar(Var, Var),
    AddScalarVar(Var, Var),
    AffineInverse { y: Var, gain: Var, bias: Var, eps: f64 },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Softmax(Var),
    Mse { pred: Var, target: Vec<f64> },
    Smape { pred: Var, target: Vec<f64>, guard: f64 },
    Sum(Var),
    Mean(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.node(v).shape[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(dim_err(op, s, &[])),
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// A leaf that honors `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), rg, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    /// Copies a stored parameter onto the tape. Frozen parameters enter as
    /// constants: gradient passes through the ops that use them but is not
    /// recorded for them.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        let p = store.get(id);
        let rg = p.tensor.requires_grad();
        self.push(
            p.tensor.shape().to_vec(),
            p.tensor.data().to_vec(),
            rg,
            Op::Param { store: store.uid(), id },
        )
    }

    pub(crate) fn param_grads(&self, store: u64) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Param { store: s, id } if s == store => {
                self.grads.get(i).and_then(|g| g.as_deref()).map(|g| (id, g))
            }
            _ => None,
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        ops::gemm_acc(&mut out, self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_t")?;
        let (n, k2) = self.dims2(b, "matmul_t")?;
        if k != k2 {
            return Err(dim_err("matmul_t", &[m, k], &[n, k2]));
        }
        let mut out = vec![0.0; m * n];
        ops::gemm_nt_acc(&mut out, self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add(a, b)))
    }

    /// `x[m×n] + bias[n]` on every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2(x, "add_bias")?;
        if self.value(bias).len() != n {
            return Err(dim_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    /// `c·x + shift` with constant scalars.
    pub fn affine(&mut self, x: Var, c: f64, shift: f64) -> Var {
        let out = self.value(x).iter().map(|v| c * v + shift).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Affine(x, c))
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(dim_err("mul_const", self.shape(x), &[mask.len()]));
        }
        let out = self.value(x).iter().zip(&mask).map(|(a, b)| a * b).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::MulConst(x, mask)))
    }

    /// `x · s` for a one-element tensor `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of(s, "mul_scalar_var")?;
        let out = self.value(x).iter().map(|v| v * sv).collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::MulScalarVar(x, s)))
    }

    /// `x + s` for a one-element tensor `s`.
    pub fn add_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of(s, "add_scalar_var")?;
        let out = self.value(x).iter().map(|v| v + sv).collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::AddScalarVar(x, s)))
    }

    /// `(y - bias) / (gain + eps)` with one-element `gain` and `bias`.
    pub fn affine_inverse(&mut self, y: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let g = self.scalar_of(gain, "affine_inverse")? + eps;
        let b = self.scalar_of(bias, "affine_inverse")?;
        let out = self.value(y).iter().map(|v| (v - b) / g).collect();
        let rg = self.rg(&[y, gain, bias]);
        Ok(self.push(self.shape(y).to_vec(), out, rg, Op::AffineInverse { y, gain, bias, eps }))
    }

    fn scalar_of(&self, s: Var, op: &'static str) -> Result<f64> {
        match self.value(s) {
            [v] => Ok(*v),
            _ => Err(dim_err(op, self.shape(s), &[1])),
        }
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let out = ops::transpose(self.value(x), r, c);
        let rg = self.rg(&[x]);
        Ok(self.push(vec![c, r], out, rg, Op::Transpose(x)))
    }

    /// Joins rank-2 tensors with equal row counts side by side.
    pub fn concat_last_dim(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let (rows, _) = self.dims2(first, "concat_last_dim")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.dims2(x, "concat_last_dim")?;
            if r != rows {
                return Err(dim_err("concat_last_dim", self.shape(first), self.shape(x)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(vec![rows, total], out, rg, Op::ConcatCols(xs.to_vec())))
    }

    /// Stacks rank-2 tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let (_, cols) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        for &x in xs {
            let (r, c) = self.dims2(x, "concat_rows")?;
            if c != cols {
                return Err(dim_err("concat_rows", self.shape(first), self.shape(x)));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &x in xs {
            out.extend_from_slice(self.value(x));
        }
        let rg = self.rg(xs);
        Ok(self.push(vec![rows, cols], out, rg, Op::ConcatRows(xs.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(dim_err("slice_cols", &[r, c], &[start, len]));
        }
        let v = self.value(x);
        let out = (0..r).flat_map(|i| v[i * c + start..i * c + start + len].iter().copied()).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![r, len], out, rg, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start + len > r {
            return Err(dim_err("slice_rows", &[r, c], &[start, len]));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![len, c], out, rg, Op::SliceRows { x, start }))
    }

    /// Splits `[m×(heads·d)]` into `heads` column blocks of width `d`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Vec<Var>> {
        let (_, c) = self.dims2(x, "split_heads")?;
        if heads == 0 || c % heads != 0 {
            return Err(dim_err("split_heads", self.shape(x), &[heads]));
        }
        let d = c / heads;
        (0..heads).map(|h| self.slice_cols(x, h * d, d)).collect()
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(dim_err("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, rg, Op::Reshape(x)))
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(dim_err("layer_norm", &[r, c], self.shape(gain)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            vec![r, c],
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| ops::gelu(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Gelu(x))
    }

    /// Gathers rows `ids` of a `[V×D]` table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding_lookup")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!("token id {bad} out of range for vocabulary of {v}")));
        }
        let t = self.value(table);
        let out = ids.iter().flat_map(|&i| t[i * d..(i + 1) * d].iter().copied()).collect();
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Row softmax where row `i` attends to columns `0..=i + query_offset`.
    pub fn causal_softmax_rows(&mut self, x: Var, query_offset: usize) -> Result<Var> {
        self.softmax_impl(x, Some(query_offset))
    }

    fn softmax_impl(&mut self, x: Var, offset: Option<usize>) -> Result<Var> {
        let (r, c) = self.dims2(x, "softmax_rows")?;
        let out = ops::softmax_rows(self.value(x), r, c, offset);
        let rg = self.rg(&[x]);
        Ok(self.push(vec![r, c], out, rg, Op::Softmax(x)))
    }

    /// Mean squared error against a constant target.
    pub fn mse_scalar(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() || p.is_empty() {
            return Err(dim_err("mse_scalar", self.shape(pred), &[target.len()]));
        }
        let loss = p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
        ))
    }

    /// `(200/H) Σ |y − ŷ| / (|y| + |ŷ| + guard)` against a constant target.
    pub fn smape_scalar(&mut self, pred: Var, target: &[f64], guard: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() || p.is_empty() {
            return Err(dim_err("smape_scalar", self.shape(pred), &[target.len()]));
        }
        let h = p.len() as f64;
        let loss = p
            .iter()
            .zip(target)
            .map(|(a, y)| (a - y).abs() / (a.abs() + y.abs() + guard))
            .sum::<f64>()
            * 200.0
            / h;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::Smape {
                pred,
                target: target.to_vec(),
                guard,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    /// Mean of one-element tensors.
    pub fn mean_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::contract("mean of no scalars"));
        }
        let mut s = 0.0;
        for &x in xs {
            s += self.scalar_of(x, "mean_scalars")?;
        }
        let rg = self.rg(xs);
        Ok(self.push(vec![1], vec![s / xs.len() as f64], rg, Op::Mean(xs.to_vec())))
    }

    /// Fills [`Tape::grad`] with d`loss`/d`v` for every node on the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let Tape { nodes, grads } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Buffer for the gradient of `v`, or `None` when `v` needs none.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf | Op::Param { .. } => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                ops::gemm_nt_acc(ga, g, &nodes[b.0].value, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                ops::gemm_tn_acc(gb, &nodes[a.0].value, g, m, k, n);
            }
        }
        Op::MatMulT(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[0];
            if let Some(ga) = slot(nodes, grads, *a) {
                ops::gemm_acc(ga, g, &nodes[b.0].value, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                ops::gemm_tn_acc(gb, g, &nodes[a.0].value, m, n, k);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = slot(nodes, grads, *v) {
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::AddBias(x, bias) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            let n = nodes[bias.0].value.len();
            if let Some(gb) = slot(nodes, grads, *bias) {
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Affine(x, c) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
            }
        }
        Op::MulConst(x, mask) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((a, b), m) in gx.iter_mut().zip(g).zip(mask) {
                    *a += b * m;
                }
            }
        }
        Op::MulScalarVar(x, s) => {
            let sv = nodes[s.0].value[0];
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += sv * b);
            }
            let d = dot(&nodes[x.0].value, g);
            if let Some(gs) = slot(nodes, grads, *s) {
                gs[0] += d;
            }
        }
        Op::AddScalarVar(x, s) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            let total: f64 = g.iter().sum();
            if let Some(gs) = slot(nodes, grads, *s) {
                gs[0] += total;
            }
        }
        Op::AffineInverse { y, gain, bias, eps } => {
            let den = nodes[gain.0].value[0] + eps;
            if let Some(gy) = slot(nodes, grads, *y) {
                gy.iter_mut().zip(g).for_each(|(a, b)| *a += b / den);
            }
            let total: f64 = g.iter().sum();
            if let Some(gb) = slot(nodes, grads, *bias) {
                gb[0] -= total / den;
            }
            // d/dgain of (y-b)/(g+eps) is -out/(g+eps)
            let d = dot(&node.value, g);
            if let Some(gg) = slot(nodes, grads, *gain) {
                gg[0] -= d / den;
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
            if let Some(gx) = slot(nodes, grads, *x) {
                let gt = ops::transpose(g, c, r);
                gx.iter_mut().zip(&gt).for_each(|(a, b)| *a += b);
            }
        }
        Op::ConcatCols(xs) => {
            let rows = node.shape[0];
            let total = node.shape[1];
            let mut off = 0;
            for x in xs {
                let w = nodes[x.0].shape[1];
                if let Some(gx) = slot(nodes, grads, *x) {
                    for r in 0..rows {
                        let src = &g[r * total + off..r * total + off + w];
                        gx[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                off += w;
            }
        }
        Op::ConcatRows(xs) => {
            let mut off = 0;
            for x in xs {
                let len = nodes[x.0].value.len();
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(&g[off..off + len]).for_each(|(a, b)| *a += b);
                }
                off += len;
            }
        }
        Op::SliceCols { x, start } => {
            let c = nodes[x.0].shape[1];
            let (r, w) = (node.shape[0], node.shape[1]);
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..r {
                    let dst = &mut gx[i * c + start..i * c + start + w];
                    dst.iter_mut().zip(&g[i * w..(i + 1) * w]).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::SliceRows { x, start } => {
            let c = node.shape[1];
            if let Some(gx) = slot(nodes, grads, *x) {
                let dst = &mut gx[start * c..start * c + g.len()];
                dst.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let (r, c) = (node.shape[0], node.shape[1]);
            let gv = &nodes[gain.0].value;
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    let hr = &xhat[i * c..(i + 1) * c];
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        sum_d += d;
                        sum_dh += d * hr[j];
                    }
                    let k = inv_std[i] / c as f64;
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        gx[i * c + j] += k * (c as f64 * d - sum_d - hr[j] * sum_dh);
                    }
                }
            }
            if let Some(gg) = slot(nodes, grads, *gain) {
                for i in 0..r {
                    for j in 0..c {
                        gg[j] += g[i * c + j] * xhat[i * c + j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Gelu(x) => {
            let xv = &nodes[x.0].value;
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((a, b), &v) in gx.iter_mut().zip(g).zip(xv) {
                    *a += b * ops::gelu_grad(v);
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = node.shape[1];
            if let Some(gt) = slot(nodes, grads, *table) {
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * d..(id + 1) * d];
                    dst.iter_mut().zip(&g[row * d..(row + 1) * d]).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Softmax(x) => {
            let (r, c) = (node.shape[0], node.shape[1]);
            let y = &node.value;
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let s = dot(yr, gr);
                    for j in 0..c {
                        gx[i * c + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
        }
        Op::Mse { pred, target } => {
            let p = &nodes[pred.0].value;
            let k = 2.0 * g[0] / p.len() as f64;
            if let Some(gp) = slot(nodes, grads, *pred) {
                for ((a, pv), tv) in gp.iter_mut().zip(p).zip(target) {
                    *a += k * (pv - tv);
                }
            }
        }
        Op::Smape { pred, target, guard } => {
            let p = &nodes[pred.0].value;
            let k = 200.0 * g[0] / p.len() as f64;
            if let Some(gp) = slot(nodes, grads, *pred) {
                for ((a, &pv), &y) in gp.iter_mut().zip(p).zip(target) {
                    let num = (pv - y).abs();
                    let den = pv.abs() + y.abs() + guard;
                    *a += k * (ops::sign(pv - y) / den - num * ops::sign(pv) / (den * den));
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::Mean(xs) => {
            let k = g[0] / xs.len() as f64;
            for x in xs {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx[0] += k;
                }
            }
        }
    }
}
