use super::kernels::{self, NormStats};
use super::{broadcast_ok, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: NormStats,
    },
    Rope {
        x: Var,
        n_heads: usize,
        offset: usize,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        offset: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        index: Vec<Option<usize>>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    SegmentWeightedSum {
        weights: Var,
        values: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Wengert list of executed operations.
///
/// Values are computed eagerly when an op is recorded. `backward` walks the
/// list from the loss back to the first node, so adjoints are visited in
/// exact reverse execution order. Nodes that cannot reach a `requires_grad`
/// leaf are skipped.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    visited: Vec<Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when no
    /// differentiable path connects them.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Like [`get`](Self::get) but yields zeros for unreachable variables.
    pub fn get_or_zero(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    /// Nodes whose adjoint rule was applied, in application order.
    pub fn visited(&self) -> &[Var] {
        &self.visited
    }

    /// Stores the gradient of `var` into `tensor.grad`.
    pub fn write_into(&self, var: Var, tensor: &mut Tensor) {
        tensor.grad = self.get(var).map(Tensor::into_data);
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

    /// Drops every recorded node. Vars issued before the call become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let needs = t.requires_grad;
        t.grad = None;
        self.push(t, Op::Leaf, needs)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, k) = av.matrix_dims("matmul")?;
        let (k2, n) = bv.matrix_dims("matmul")?;
        if k != k2 {
            return Err(Error::dims("matmul", av.shape(), bv.shape()));
        }
        let out = Tensor::new(vec![m, n], kernels::matmul(av.data(), bv.data(), m, k, n))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let needs = self.needs(&[a]);
        Ok(self.push(out, Op::Transpose(a), needs))
    }

    /// Sum with row broadcasting of a rank-1 right operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// Hadamard product with the same broadcasting rule as [`add`](Self::add).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let av = self.value(a);
        let bv = self.value(b);
        if !broadcast_ok(av.shape(), bv.shape()) {
            return Err(Error::dims(op, av.shape(), bv.shape()));
        }
        let n = bv.numel();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % n]))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|x| x * c).collect(),
        )
        .expect("same shape");
        let needs = self.needs(&[a]);
        self.push(out, Op::Scale(a, c), needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|&x| kernels::gelu(x)).collect(),
        )
        .expect("same shape");
        let needs = self.needs(&[a]);
        self.push(out, Op::Gelu(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|&x| kernels::sigmoid(x)).collect(),
        )
        .expect("same shape");
        let needs = self.needs(&[a]);
        self.push(out, Op::Sigmoid(a), needs)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (_, n) = av.matrix_dims("softmax_rows")?;
        let out = Tensor::new(av.shape().to_vec(), kernels::softmax_rows(av.data(), n))?;
        let needs = self.needs(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// Row-wise layer normalization with learned `gain` and `bias` of width `cols`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, cols) = xv.matrix_dims("layer_norm")?;
        let gv = self.value(gain);
        let bv = self.value(bias);
        if gv.shape() != [cols] || bv.shape() != [cols] {
            return Err(Error::dims("layer_norm", xv.shape(), gv.shape()));
        }
        let (out, stats) = kernels::layer_norm(xv.data(), cols, gv.data(), bv.data());
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            needs,
        ))
    }

    /// Rotary position encoding; row `i` sits at position `offset + i`.
    pub fn rope(&mut self, x: Var, n_heads: usize, offset: usize) -> Result<Var> {
        let xv = self.value(x);
        let (_, cols) = xv.matrix_dims("rope")?;
        if n_heads == 0 || cols % n_heads != 0 || !(cols / n_heads).is_multiple_of(2) {
            return Err(Error::shape(
                "rope",
                format!("{cols} columns cannot form {n_heads} even-width heads"),
            ));
        }
        let out = Tensor::new(
            xv.shape().to_vec(),
            kernels::rope(xv.data(), cols, n_heads, offset, 1.0),
        )?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Rope { x, n_heads, offset }, needs))
    }

    /// Multi-head causal attention; see [`kernels::causal_attention`].
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        offset: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n_q, dim) = qv.matrix_dims("attention")?;
        let (n_k, dk) = kv.matrix_dims("attention")?;
        if dk != dim || vv.shape() != kv.shape() {
            return Err(Error::dims("attention", qv.shape(), kv.shape()));
        }
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("{dim} not divisible by {n_heads} heads"),
            ));
        }
        if offset + n_q > n_k {
            return Err(Error::shape(
                "attention",
                format!(
                    "query rows end at {} but only {n_k} keys exist",
                    offset + n_q
                ),
            ));
        }
        let (out, probs) = kernels::causal_attention(
            qv.data(),
            kv.data(),
            vv.data(),
            n_q,
            n_k,
            dim,
            n_heads,
            offset,
        );
        let out = Tensor::new(vec![n_q, dim], out)?;
        let needs = self.needs(&[q, k, v]);
        Ok(self.push(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                offset,
                probs,
            },
            needs,
        ))
    }

    /// Builds a matrix whose row `r` is row `index[r]` of `x`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.matrix_dims("gather_rows")?;
        let mut data = Vec::with_capacity(index.len() * cols);
        for &ix in &index {
            match ix {
                Some(r) if r < rows => data.extend_from_slice(xv.row(r)),
                Some(r) => {
                    return Err(Error::shape(
                        "gather_rows",
                        format!("row {r} out of {rows}"),
                    ));
                }
                None => data.extend(std::iter::repeat_n(0.0, cols)),
            }
        }
        let out = Tensor::new(vec![index.len(), cols], data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::GatherRows { x, index }, needs))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.gather_rows(x, (start..end).map(Some).collect())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.value(p).matrix_dims("concat_rows")?.1,
            None => return Err(Error::shape("concat_rows", "nothing to concatenate")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            let (r, c) = pv.matrix_dims("concat_rows")?;
            if c != cols {
                return Err(Error::dims(
                    "concat_rows",
                    self.value(parts[0]).shape(),
                    pv.shape(),
                ));
            }
            rows += r;
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let needs = self.needs(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// `out[r] = Σ_i weights[r][i] · values[r·g + i]` for `weights: [R×g]`,
    /// `values: [R·g × d]`.
    pub fn segment_weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        let wv = self.value(weights);
        let vv = self.value(values);
        let (r, g) = wv.matrix_dims("segment_weighted_sum")?;
        let (n, d) = vv.matrix_dims("segment_weighted_sum")?;
        if n != r * g {
            return Err(Error::dims("segment_weighted_sum", wv.shape(), vv.shape()));
        }
        let mut out = vec![0.0; r * d];
        for seg in 0..r {
            let orow = &mut out[seg * d..(seg + 1) * d];
            for i in 0..g {
                let a = wv.data()[seg * g + i];
                let vrow = vv.row(seg * g + i);
                for j in 0..d {
                    orow[j] += a * vrow[j];
                }
            }
        }
        let out = Tensor::new(vec![r, d], out)?;
        let needs = self.needs(&[weights, values]);
        Ok(self.push(out, Op::SegmentWeightedSum { weights, values }, needs))
    }

    /// Mean over `targets` of `-log softmax(logits[row])[class]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<(usize, usize)>) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = lv.matrix_dims("cross_entropy")?;
        if targets.is_empty() {
            return Err(Error::contract("cross-entropy needs at least one target"));
        }
        let mut probs = Vec::with_capacity(targets.len() * cols);
        let mut total = 0.0;
        for &(r, c) in &targets {
            if r >= rows || c >= cols {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("target ({r}, {c}) outside logits {rows}×{cols}"),
                ));
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[c];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        let loss = total / targets.len() as f64;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            needs,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::contract("loss variable is not on this tape"))?;
        if lv.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.value.shape()
            )));
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut visited = Vec::new();
        if lv.needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited.push(Var(idx));
            self.adjoint(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes,
            visited,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn adjoint(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.rows_cols();
                let n = bv.cols();
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt_acc(&mut da, g, bv.data(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn_acc(&mut db, av.data(), g, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).rows_cols();
                self.accumulate(grads, *a, kernels::transpose(g, n, m));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.wants(*b) {
                    let n = self.value(*b).numel();
                    let mut db = vec![0.0; n];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % n] += gi;
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = bv.numel();
                if self.wants(*a) {
                    let da = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * bv.data()[i % n])
                        .collect();
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % n] += gi * av.data()[i];
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|x| x * c).collect());
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let da = g
                    .iter()
                    .zip(av.data())
                    .map(|(gi, &x)| gi * kernels::gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let da = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(gi, s)| gi * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut da = vec![0.0; y.len()];
                for r in 0..y.len() / cols.max(1) {
                    let s = r * cols..(r + 1) * cols;
                    let dot: f64 = g[s.clone()]
                        .iter()
                        .zip(&y[s.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for j in s {
                        da[j] = y[j] * (g[j] - dot);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let cols = node.value.cols();
                let rows = g.len() / cols;
                let gv = self.value(*gain).data();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            dg[j] += g[r * cols + j] * stats.xhat[r * cols + j];
                            db[j] += g[r * cols + j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                    self.accumulate(grads, *bias, db);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let s = r * cols;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..cols {
                            let dxh = g[s + j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * stats.xhat[s + j];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for j in 0..cols {
                            let dxh = g[s + j] * gv[j];
                            dx[s + j] = stats.rstd[r] * (dxh - m1 - stats.xhat[s + j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Rope { x, n_heads, offset } => {
                let cols = node.value.cols();
                self.accumulate(grads, *x, kernels::rope(g, cols, *n_heads, *offset, -1.0));
            }
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                offset,
                probs,
            } => self.attention_adjoint(g, *q, *k, *v, *n_heads, *offset, probs, grads),
            Op::GatherRows { x, index } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let cols = xv.cols();
                    let mut dx = vec![0.0; xv.numel()];
                    for (r, ix) in index.iter().enumerate() {
                        if let Some(src) = ix {
                            for j in 0..cols {
                                dx[src * cols + j] += g[r * cols + j];
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    self.accumulate(grads, *p, g[at..at + n].to_vec());
                    at += n;
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::SegmentWeightedSum { weights, values } => {
                let (wv, vv) = (self.value(*weights), self.value(*values));
                let (r, gsz) = wv.rows_cols();
                let d = vv.cols();
                let mut dw = vec![0.0; r * gsz];
                let mut dv = vec![0.0; vv.numel()];
                for seg in 0..r {
                    let grow = &g[seg * d..(seg + 1) * d];
                    for i in 0..gsz {
                        let row = seg * gsz + i;
                        let vrow = vv.row(row);
                        dw[row] = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        let a = wv.data()[row];
                        for j in 0..d {
                            dv[row * d + j] = a * grow[j];
                        }
                    }
                }
                self.accumulate(grads, *weights, dw);
                self.accumulate(grads, *values, dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let cols = lv.cols();
                let mut dl = vec![0.0; lv.numel()];
                let w = g[0] / targets.len() as f64;
                for (t, &(r, c)) in targets.iter().enumerate() {
                    for j in 0..cols {
                        dl[r * cols + j] += w * probs[t * cols + j];
                    }
                    dl[r * cols + c] -= w;
                }
                self.accumulate(grads, *logits, dl);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_adjoint(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        offset: usize,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n_q, dim) = qv.rows_cols();
        let n_k = kv.rows();
        let hd = dim / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = vec![0.0; qv.numel()];
        let mut dk = vec![0.0; kv.numel()];
        let mut dv = vec![0.0; vv.numel()];
        let mut dp = vec![0.0; n_k];
        for h in 0..n_heads {
            let c0 = h * hd;
            for i in 0..n_q {
                let visible = (offset + i + 1).min(n_k);
                let p = &probs[(h * n_q + i) * n_k..(h * n_q + i) * n_k + visible];
                let grow = &g[i * dim + c0..i * dim + c0 + hd];
                let mut dot = 0.0;
                for j in 0..visible {
                    let vrow = &vv.data()[j * dim + c0..j * dim + c0 + hd];
                    let mut s = 0.0;
                    for t in 0..hd {
                        s += grow[t] * vrow[t];
                        dv[j * dim + c0 + t] += p[j] * grow[t];
                    }
                    dp[j] = s;
                    dot += p[j] * s;
                }
                for j in 0..visible {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for t in 0..hd {
                        dq[i * dim + c0 + t] += ds * kv.data()[j * dim + c0 + t];
                        dk[j * dim + c0 + t] += ds * qv.data()[i * dim + c0 + t];
                    }
                }
            }
        }
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn detached_parameter_has_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let other = tape.param(Tensor::vector(vec![5.0]));
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(other).is_none());
        assert_eq!(grads.get_or_zero(other).data(), &[0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let w = tape.param(Tensor::vector(vec![3.0, 4.0]));
        let p = tape.mul(c, w).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn adjoints_visit_in_reverse_execution_order() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let a = tape.gelu(w);
        let b = tape.softmax_rows(a).unwrap();
        let c = tape.mul(b, w).unwrap();
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        let order: Vec<usize> = grads.visited().iter().map(|v| v.index()).collect();
        assert_eq!(
            order,
            vec![loss.index(), c.index(), b.index(), a.index(), w.index()]
        );
    }

    #[test]
    fn cleared_tape_yields_no_gradients() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0]));
        let _ = tape.sum(w);
        tape.clear();
        assert!(tape.is_empty());
        let c = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let fresh = tape.param(Tensor::vector(vec![2.0]));
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(fresh).is_none());
        assert!(grads.visited().is_empty());
    }

    #[test]
    fn gradient_lands_in_tensor_grad_field() {
        let mut tape = Tape::new();
        let mut param = Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true);
        let w = tape.leaf(param.clone());
        let loss = tape.sum(w);
        tape.backward(loss).unwrap().write_into(w, &mut param);
        assert_eq!(param.grad.as_deref(), Some(&[1.0, 1.0][..]));
    }
}
