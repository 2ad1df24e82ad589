// Wengert-style tape. Every op appends a node holding its value; backward
// walks the nodes in reverse recording order once, accumulating into leaves.

use std::sync::Arc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    /// `a · b`, or `a · bᵀ` when `b_t` (b stored `[n, k]`).
    Matmul { a: Var, b: Var, b_t: bool, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[m, n] + [n]` broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, F),
    Offset(Var),
    /// Row-wise normalization without affine; keeps 1/σ per row.
    LayerNorm { x: Var, inv_std: Vec<F> },
    Softmax(Var),
    Silu(Var),
    Mean(Var),
    Sum(Var),
    SumSq(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
}

struct Node<F> {
    shape: Vec<usize>,
    value: Arc<[F]>,
    op: Op<F>,
    requires_grad: bool,
}

/// Layer-norm epsilon; a zero-variance row maps to all zeros.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Records operations in order so gradients can be replayed backwards.
///
/// A tape has a single owner. Leaf gradients accumulate across
/// [`Tape::backward`] calls until [`Tape::zero_grad`].
pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    leaf_grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<F: Scalar>(values: &[F], op: &'static str) -> Result<()> {
    if cfg!(debug_assertions) && values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(op));
    }
    Ok(())
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Arc<[F]>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<F> {
        &self.nodes[v.0]
    }

    pub fn leaf(&mut self, t: &Tensor<F>, requires_grad: bool) -> Var {
        self.push(t.shape().to_vec(), t.data_arc().clone(), Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: &Tensor<F>) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    /// A copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor<F> {
        let n = self.node(v);
        Tensor::from_parts(n.shape.clone(), n.value.clone())
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.node(v).shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    fn record(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, inputs: &[Var], name: &'static str) -> Result<Var> {
        check_finite(&value, name)?;
        let rg = self.rg(inputs);
        Ok(self.push(shape, value.into(), op, rg))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (kb, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, &self.node(a).value, false, &self.node(b).value, b_t, &mut out);
        self.record(vec![m, n], out, Op::Matmul { a, b, b_t, m, k, n }, &[a, b], "matmul")
    }

    // ---- elementwise ----

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let out: Vec<F> = self
            .node(a)
            .value
            .iter()
            .zip(self.node(b).value.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.node(a).shape.clone();
        self.record(shape, out, op, &[a, b], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.dims2(a, "add_row")?;
        if self.node(row).value.len() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(row).shape.clone(),
            });
        }
        let r = self.node(row).value.clone();
        let out: Vec<F> = self
            .node(a)
            .value
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r.iter()).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.node(a).shape.clone();
        self.record(shape, out, Op::AddRow(a, row), &[a, row], "add_row")
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let out: Vec<F> = self.node(a).value.iter().map(|&x| x * s).collect();
        let shape = self.node(a).shape.clone();
        self.record(shape, out, Op::Scale(a, s), &[a], "scale")
    }

    /// `a + c` elementwise.
    pub fn offset(&mut self, a: Var, c: F) -> Result<Var> {
        let out: Vec<F> = self.node(a).value.iter().map(|&x| x + c).collect();
        let shape = self.node(a).shape.clone();
        self.record(shape, out, Op::Offset(a), &[a], "offset")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<F> = self
            .node(a)
            .value
            .iter()
            .map(|&x| x / (F::one() + (-x).exp()))
            .collect();
        let shape = self.node(a).shape.clone();
        self.record(shape, out, Op::Silu(a), &[a], "silu")
    }

    // ---- row-wise ----

    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        let eps = F::from_f64_lossy(LAYER_NORM_EPS);
        let nf = F::from_usize(n).unwrap();
        let xv = &self.node(x).value;
        let mut out = vec![F::zero(); m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().fold(F::zero(), |a, &v| a + v) / nf;
            let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
            let r = F::one() / (var + eps).sqrt();
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            inv_std.push(r);
        }
        self.record(vec![m, n], out, Op::LayerNorm { x, inv_std }, &[x], "layer_norm")
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "softmax")?;
        let xv = &self.node(x).value;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let max = row.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
            let o = &mut out[i * n..(i + 1) * n];
            let mut total = F::zero();
            for (oj, &v) in o.iter_mut().zip(row) {
                *oj = (v - max).exp();
                total = total + *oj;
            }
            for oj in o.iter_mut() {
                *oj = *oj / total;
            }
        }
        self.record(vec![m, n], out, Op::Softmax(x), &[x], "softmax")
    }

    // ---- reductions ----

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.node(x).value;
        let s = v.iter().fold(F::zero(), |a, &b| a + b) / F::from_usize(v.len()).unwrap();
        self.record(vec![1], vec![s], Op::Mean(x), &[x], "mean")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x).value.iter().fold(F::zero(), |a, &b| a + b);
        self.record(vec![1], vec![s], Op::Sum(x), &[x], "sum")
    }

    pub fn sum_sq(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x).value.iter().fold(F::zero(), |a, &b| a + b * b);
        self.record(vec![1], vec![s], Op::SumSq(x), &[x], "sum_sq")
    }

    // ---- structural ----

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::contract(format!("slice_rows {start}+{len} exceeds {m} rows")));
        }
        let out = self.node(x).value[start * n..(start + len) * n].to_vec();
        self.record(vec![len, n], out, Op::SliceRows { x, start }, &[x], "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::contract(format!("slice_cols {start}+{len} exceeds {n} cols")));
        }
        let xv = &self.node(x).value;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        self.record(vec![m, len], out, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.node(first).shape.clone(),
                    rhs: self.node(p).shape.clone(),
                });
            }
            rows += r;
            out.extend_from_slice(&self.node(p).value);
        }
        self.record(vec![rows, n], out, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.node(first).shape.clone(),
                    rhs: self.node(p).shape.clone(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.node(p).value[i * w..(i + 1) * w]);
            }
        }
        self.record(vec![m, total], out, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    // ---- gradients ----

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; end];
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..end).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = self.leaf_grads[idx].get_or_insert_with(|| vec![F::zero(); g.len()]);
                for (s, &v) in slot.iter_mut().zip(&g) {
                    *s = *s + v;
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.node(v).requires_grad {
            return;
        }
        let len = self.node(v).value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); len]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::Matmul { a, b, b_t, m, k, n } => {
                let av = &self.node(a).value;
                let bv = &self.node(b).value;
                self.accumulate(grads, a, |ga| {
                    // dA = dC · Bᵀ, logical B is [k, n].
                    let mut tmp = vec![F::zero(); m * k];
                    F::gemm(m, n, k, g, false, bv, !b_t, &mut tmp);
                    add_into(ga, &tmp);
                });
                self.accumulate(grads, b, |gb| {
                    if b_t {
                        // stored [n, k]: dBs = dCᵀ · A
                        let mut tmp = vec![F::zero(); n * k];
                        F::gemm(n, m, k, g, true, av, false, &mut tmp);
                        add_into(gb, &tmp);
                    } else {
                        let mut tmp = vec![F::zero(); k * n];
                        F::gemm(k, m, n, av, true, g, false, &mut tmp);
                        add_into(gb, &tmp);
                    }
                });
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |ga| add_into(ga, g));
                self.accumulate(grads, b, |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, |ga| add_into(ga, g));
                self.accumulate(grads, b, |gb| {
                    for (s, &v) in gb.iter_mut().zip(g) {
                        *s = *s - v;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let av = &self.node(a).value;
                let bv = &self.node(b).value;
                self.accumulate(grads, a, |ga| {
                    for ((s, &v), &y) in ga.iter_mut().zip(g).zip(bv.iter()) {
                        *s = *s + v * y;
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for ((s, &v), &x) in gb.iter_mut().zip(g).zip(av.iter()) {
                        *s = *s + v * x;
                    }
                });
            }
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, |ga| add_into(ga, g));
                let n = self.node(row).value.len();
                self.accumulate(grads, row, |gr| {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            &Op::Scale(a, s) => {
                self.accumulate(grads, a, |ga| {
                    for (d, &v) in ga.iter_mut().zip(g) {
                        *d = *d + v * s;
                    }
                });
            }
            &Op::Offset(a) => self.accumulate(grads, a, |ga| add_into(ga, g)),
            &Op::Silu(a) => {
                let av = &self.node(a).value;
                self.accumulate(grads, a, |ga| {
                    for ((d, &v), &x) in ga.iter_mut().zip(g).zip(av.iter()) {
                        let s = F::one() / (F::one() + (-x).exp());
                        *d = *d + v * s * (F::one() + x * (F::one() - s));
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let n = node.shape[1];
                let nf = F::from_usize(n).unwrap();
                self.accumulate(grads, *x, |gx| {
                    for (i, &r) in inv_std.iter().enumerate() {
                        let gy = &g[i * n..(i + 1) * n];
                        let y = &out[i * n..(i + 1) * n];
                        let mean_g = gy.iter().fold(F::zero(), |a, &v| a + v) / nf;
                        let mean_gy = gy.iter().zip(y).fold(F::zero(), |a, (&u, &w)| a + u * w) / nf;
                        for j in 0..n {
                            gx[i * n + j] = gx[i * n + j] + r * (gy[j] - mean_g - y[j] * mean_gy);
                        }
                    }
                });
            }
            &Op::Softmax(x) => {
                let n = node.shape[1];
                self.accumulate(grads, x, |gx| {
                    for (i, (gy, y)) in g.chunks(n).zip(out.chunks(n)).enumerate() {
                        let dot = gy.iter().zip(y).fold(F::zero(), |a, (&u, &w)| a + u * w);
                        for j in 0..n {
                            gx[i * n + j] = gx[i * n + j] + y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            &Op::Mean(x) => {
                let len = self.node(x).value.len();
                let v = g[0] / F::from_usize(len).unwrap();
                self.accumulate(grads, x, |gx| gx.iter_mut().for_each(|d| *d = *d + v));
            }
            &Op::Sum(x) => {
                let v = g[0];
                self.accumulate(grads, x, |gx| gx.iter_mut().for_each(|d| *d = *d + v));
            }
            &Op::SumSq(x) => {
                let xv = &self.node(x).value;
                let two = F::from_f64_lossy(2.0);
                self.accumulate(grads, x, |gx| {
                    for (d, &v) in gx.iter_mut().zip(xv.iter()) {
                        *d = *d + two * v * g[0];
                    }
                });
            }
            &Op::SliceRows { x, start } => {
                let n = node.shape[1];
                self.accumulate(grads, x, |gx| add_into(&mut gx[start * n..start * n + g.len()], g));
            }
            &Op::SliceCols { x, start } => {
                let len = node.shape[1];
                let n = self.node(x).shape[1];
                self.accumulate(grads, x, |gx| {
                    for (i, chunk) in g.chunks(len).enumerate() {
                        add_into(&mut gx[i * n + start..i * n + start + len], chunk);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.node(p).value.len();
                    self.accumulate(grads, p, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut col = 0;
                for &p in parts {
                    let w = self.node(p).shape[1];
                    self.accumulate(grads, p, |gp| {
                        for (i, dst) in gp.chunks_mut(w).enumerate() {
                            add_into(dst, &g[i * total + col..i * total + col + w]);
                        }
                    });
                    col += w;
                }
            }
        }
    }

    /// Accumulated gradient of a leaf, if any flowed into it.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        self.leaf_grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.node(v).shape.clone(), g.clone().into()))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
