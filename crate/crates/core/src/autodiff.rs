//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and enough
//! saved state to compute a vector-Jacobian product. Nodes only ever
//! reference earlier nodes, so replaying the tape back to front visits
//! each node once in a valid topological order.
//!
//! Trainable [`Parameter`]s enter the tape through [`Tape::param`]. Frozen
//! parameters are recorded as constants: gradient still flows *through*
//! the operations that consume them, but never *into* them.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softmax_into, softplus, Tensor};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A tensor owned by a model, with its gradient buffer and optimizer state.
///
/// Cloning produces an independent parameter (new identity, zeroed
/// gradient, empty optimizer state) holding the same value.
#[derive(Debug)]
pub struct Parameter {
    id: ParamId,
    value: Tensor,
    grad: Tensor,
    trainable: bool,
    pub(crate) state: OptimState,
}

#[derive(Debug, Default, Clone)]
pub(crate) struct OptimState {
    pub step: u64,
    pub slots: Vec<Vec<f32>>,
}

impl Parameter {
    pub fn new(value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            id: ParamId::fresh(),
            value,
            grad,
            trainable,
            state: OptimState::default(),
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Replaces the value. Shape must be unchanged.
    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape(
                "Parameter::set_value",
                format!("{:?}", self.value.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        self.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self) -> &mut [f32] {
        self.value.data_mut()
    }

    /// Adds this parameter's entry from `grads`. Frozen parameters ignore it.
    pub fn accumulate(&mut self, grads: &Gradients) {
        if !self.trainable {
            return;
        }
        if let Some(g) = grads.params.get(&self.id) {
            debug_assert_eq!(g.shape(), self.grad.shape());
            for (acc, &v) in self.grad.data_mut().iter_mut().zip(g.data()) {
                *acc += v;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        if self.grad.data().iter().any(|&v| v != 0.0) {
            self.grad = Tensor::zeros(self.value.shape());
        }
    }
}

impl Clone for Parameter {
    fn clone(&self) -> Self {
        Parameter::new(self.value.clone(), self.trainable)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    Gelu(usize),
    Softplus(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f32>,
        rstd: Vec<f64>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ToHeads {
        x: usize,
        tokens: usize,
        heads: usize,
    },
    FromHeads {
        x: usize,
        tokens: usize,
        heads: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    MeanTokens {
        x: usize,
        tokens: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    RouteMerge(Box<RouteMergeState>),
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct RouteMergeState {
    probs: usize,
    parts: [Option<usize>; 2],
    alternates: [Option<Tensor>; 2],
    assignment: Vec<u8>,
    tokens: usize,
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Gelu(x) | Op::Softplus(x) | Op::Softmax(x) | Op::Sum(x) | Op::Mean(x) => {
                vec![*x]
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::SliceCols { x, .. }
            | Op::ToHeads { x, .. }
            | Op::FromHeads { x, .. }
            | Op::MeanTokens { x, .. }
            | Op::GatherRows { x, .. } => vec![*x],
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::RouteMerge(s) => {
                let mut v = vec![s.probs];
                v.extend(s.parts.iter().flatten());
                v
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass: gradients of leaves and trainable parameters.
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }
}

/// Backpropagates from a scalar `loss` node.
pub fn backward_gradients(tape: &Tape, loss: Var) -> Result<Gradients> {
    tape.backward(loss)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param: None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, p: &Parameter) -> Var {
        self.nodes.push(Node {
            value: p.value().clone(),
            op: Op::Leaf {
                param: p.trainable().then_some(p.id()),
            },
            requires_grad: p.trainable(),
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.value(v).shape() {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, "rank-2 tensor", format!("{s:?}"))),
        }
    }

    fn dims3(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        match *self.value(v).shape() {
            [g, r, c] => Ok((g, r, c)),
            ref s => Err(Error::shape(op, "rank-3 tensor", format!("{s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    /// `[n,k] x [k,m] -> [n,m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a, "matmul")?;
        let (k2, m) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{k}, _] rhs"), format!("[{k2}, {m}]")));
        }
        let out = mm_nn(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push("matmul", Tensor::from_parts(vec![n, m], out), Op::MatMul(a.0, b.0))
    }

    /// Adds a `[m]` bias to every row of `[.., m]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let m = self.value(x).last_dim();
        if self.value(bias).shape() != [m] {
            return Err(Error::shape("add_bias", format!("[{m}]"), format!("{:?}", self.value(bias).shape())));
        }
        let b = self.value(bias).data();
        let out: Vec<f32> = self
            .value(x)
            .data()
            .chunks(m)
            .flat_map(|row| row.iter().zip(b).map(|(v, b)| v + b))
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push("add_bias", Tensor::from_parts(shape, out), Op::AddBias(x.0, bias.0))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", out, Op::Add(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", out, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, Op::Scale(x.0, s))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| gelu(v as f64) as f32);
        self.push("gelu", out, Op::Gelu(x.0))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(softplus);
        self.push("softplus", out, Op::Softplus(x.0))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = crate::tensor::softmax_rows(self.value(x));
        self.push("softmax", out, Op::Softmax(x.0))
    }

    /// Row-wise layer normalization of `[.., d]` with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gamma, beta] {
            if self.value(p).shape() != [d] {
                return Err(Error::shape("layer_norm", format!("[{d}]"), format!("{:?}", self.value(p).shape())));
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        let mut rstds = Vec::with_capacity(xv.rows());
        for row in xv.data().chunks(d) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            rstds.push(rstd);
            for (j, &v) in row.iter().enumerate() {
                let h = ((v as f64 - mean) * rstd) as f32;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd: rstds,
            },
        )
    }

    /// Columns `start..start+len` of a `[n, m]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > m {
            return Err(Error::shape("slice_cols", format!("columns within {m}"), format!("{start}..{}", start + len)));
        }
        let out: Vec<f32> = self
            .value(x)
            .data()
            .chunks(m)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        self.push("slice_cols", Tensor::from_parts(vec![n, len], out), Op::SliceCols { x: x.0, start })
    }

    /// `[B*T, H*dh] -> [B*H, T, dh]`
    pub fn to_heads(&mut self, x: Var, tokens: usize, heads: usize) -> Result<Var> {
        let (n, width) = self.dims2(x, "to_heads")?;
        if tokens == 0 || n % tokens != 0 || heads == 0 || width % heads != 0 {
            return Err(Error::shape("to_heads", format!("rows divisible by {tokens}, cols by {heads}"), format!("[{n}, {width}]")));
        }
        let (batch, dh) = (n / tokens, width / heads);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    let s = (b * tokens + t) * width + h * dh;
                    let d = ((b * heads + h) * tokens + t) * dh;
                    out[d..d + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        self.push(
            "to_heads",
            Tensor::from_parts(vec![batch * heads, tokens, dh], out),
            Op::ToHeads { x: x.0, tokens, heads },
        )
    }

    /// `[B*H, T, dh] -> [B*T, H*dh]`
    pub fn from_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (g, tokens, dh) = self.dims3(x, "from_heads")?;
        if heads == 0 || g % heads != 0 {
            return Err(Error::shape("from_heads", format!("groups divisible by {heads}"), format!("{g}")));
        }
        let batch = g / heads;
        let width = heads * dh;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    let d = (b * tokens + t) * width + h * dh;
                    let s = ((b * heads + h) * tokens + t) * dh;
                    out[d..d + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        self.push(
            "from_heads",
            Tensor::from_parts(vec![batch * tokens, width], out),
            Op::FromHeads { x: x.0, tokens, heads },
        )
    }

    /// Batched matmul over the leading axis. With `trans_b`, `b` is `[G, m, k]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (g, n, k) = self.dims3(a, "batch_matmul")?;
        let (g2, r, c) = self.dims3(b, "batch_matmul")?;
        let (kb, m) = if trans_b { (c, r) } else { (r, c) };
        if g != g2 || k != kb {
            return Err(Error::shape("batch_matmul", format!("[{g}, {k}, _]"), format!("[{g2}, {r}, {c}]")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(g * n * m);
        for i in 0..g {
            let ai = &av[i * n * k..(i + 1) * n * k];
            let bi = &bv[i * k * m..(i + 1) * k * m];
            out.extend(if trans_b { mm_nt(ai, bi, n, k, m) } else { mm_nn(ai, bi, n, k, m) });
        }
        self.push(
            "batch_matmul",
            Tensor::from_parts(vec![g, n, m], out),
            Op::BatchMatMul { a: a.0, b: b.0, trans_b },
        )
    }

    /// Mean over groups of `tokens` consecutive rows: `[B*T, D] -> [B, D]`.
    pub fn mean_tokens(&mut self, x: Var, tokens: usize) -> Result<Var> {
        let (n, d) = self.dims2(x, "mean_tokens")?;
        if tokens == 0 || n % tokens != 0 {
            return Err(Error::shape("mean_tokens", format!("rows divisible by {tokens}"), format!("{n}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n / tokens * d);
        for sample in src.chunks(tokens * d) {
            let mut acc = vec![0.0f64; d];
            for row in sample.chunks(d) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v as f64;
                }
            }
            out.extend(acc.iter().map(|a| (a / tokens as f64) as f32));
        }
        self.push(
            "mean_tokens",
            Tensor::from_parts(vec![n / tokens, d], out),
            Op::MeanTokens { x: x.0, tokens },
        )
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", format!("{b} labels"), format!("{}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape("cross_entropy", format!("labels < {c}"), format!("label {bad}")));
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * c);
        let mut total = 0.0f64;
        for (row, &y) in lv.chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            total += lse - row[y] as f64;
            softmax_into(row, &mut probs);
        }
        self.push(
            "cross_entropy",
            Tensor::scalar((total / b as f64) as f32),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Selects rows of a `[n, m]` tensor (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, m) = self.dims2(x, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::Empty("gather_rows index list"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("gather_rows", format!("row < {n}"), format!("{bad}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            out.extend_from_slice(&src[r * m..(r + 1) * m]);
        }
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![rows.len(), m], out),
            Op::GatherRows { x: x.0, rows: rows.to_vec() },
        )
    }

    /// Reassembles per-sample outputs of a two-way routed layer.
    ///
    /// `assignment[s]` is the probability column (0 or 1) whose block processed
    /// sample `s`; `parts[k]` holds, in batch order, the `[n_k * tokens, d]` rows
    /// of the samples assigned to `k`. The output is exactly those rows, scattered
    /// back to their batch positions.
    ///
    /// When `alternates[k]` supplies block `k`'s output for the samples *not*
    /// assigned to it, the probabilities receive a straight-through gradient as
    /// if the layer had returned `sum_k probs[s, k] * block_k(x_s)`; the forward
    /// value is unaffected.
    pub fn route_merge(
        &mut self,
        probs: Var,
        parts: [Option<Var>; 2],
        alternates: [Option<Tensor>; 2],
        assignment: &[u8],
        tokens: usize,
    ) -> Result<Var> {
        let (batch, cols) = self.dims2(probs, "route_merge")?;
        if cols != 2 || assignment.len() != batch || assignment.iter().any(|&a| a > 1) {
            return Err(Error::shape("route_merge", format!("[{batch}, 2] probs with {batch} assignments"), format!("[{batch}, {cols}], {} assignments", assignment.len())));
        }
        let mut d = None;
        for k in 0..2 {
            let count = assignment.iter().filter(|&&a| a as usize == k).count();
            match (parts[k], count) {
                (None, 0) => {}
                (Some(v), c) if c > 0 => {
                    let (rows, w) = self.dims2(v, "route_merge")?;
                    if rows != c * tokens || d.is_some_and(|d| d != w) {
                        return Err(Error::shape("route_merge", format!("[{}, _] part {k}", c * tokens), format!("[{rows}, {w}]")));
                    }
                    d = Some(w);
                }
                _ => return Err(Error::shape("route_merge", "one part per non-empty assignment", format!("part {k} vs {count} samples"))),
            }
            if let Some(alt) = &alternates[k] {
                let want = (batch - count) * tokens;
                if want > 0 && alt.rows() != want {
                    return Err(Error::shape("route_merge", format!("{want} alternate rows"), format!("{}", alt.rows())));
                }
            }
        }
        let d = d.ok_or(Error::Empty("route_merge parts"))?;
        let mut cursor = [0usize; 2];
        let mut out = Vec::with_capacity(batch * tokens * d);
        for &a in assignment {
            let k = a as usize;
            let part = self.value(parts[k].expect("checked above")).data();
            let start = cursor[k] * tokens * d;
            out.extend_from_slice(&part[start..start + tokens * d]);
            cursor[k] += 1;
        }
        self.push(
            "route_merge",
            Tensor::from_parts(vec![batch * tokens, d], out),
            Op::RouteMerge(Box::new(RouteMergeState {
                probs: probs.0,
                parts: parts.map(|p| p.map(|v| v.0)),
                alternates,
                assignment: assignment.to_vec(),
                tokens,
            })),
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push("sum", Tensor::scalar(s as f32), Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s as f32), Op::Mean(x.0))
    }

    /// Replays the tape backwards from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        for (i, node) in self.nodes[..=loss.0].iter().enumerate() {
            if node.op.inputs().iter().any(|&j| j >= i) {
                return Err(Error::Cycle(i));
            }
        }

        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut result = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf { param } = node.op {
                let t = Tensor::from_parts(node.value.shape().to_vec(), g);
                match param {
                    Some(id) => match result.params.get_mut(&id) {
                        Some(acc) => {
                            for (a, &v) in acc.data_mut().iter_mut().zip(t.data()) {
                                *a += v;
                            }
                        }
                        None => {
                            result.params.insert(id, t);
                        }
                    },
                    None => {
                        result.leaves.insert(i, t);
                    }
                }
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(result)
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |i: usize| self.nodes[i].value.data();
        let shape = |i: usize| self.nodes[i].value.shape();
        match &node.op {
            Op::Leaf { .. } => unreachable!("leaves handled by caller"),
            &Op::MatMul(a, b) => {
                let (n, k) = (shape(a)[0], shape(a)[1]);
                let m = shape(b)[1];
                if self.wants(a) {
                    accumulate(grads, a, mm_nt(g, val(b), n, m, k));
                }
                if self.wants(b) {
                    accumulate(grads, b, mm_tn(val(a), g, n, k, m));
                }
            }
            &Op::AddBias(x, b) => {
                if self.wants(x) {
                    accumulate(grads, x, g.to_vec());
                }
                if self.wants(b) {
                    let m = shape(b)[0];
                    let mut acc = vec![0.0f64; m];
                    for row in g.chunks(m) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v as f64;
                        }
                    }
                    accumulate(grads, b, acc.into_iter().map(|v| v as f32).collect());
                }
            }
            &Op::Add(a, b) => {
                for x in [a, b] {
                    if self.wants(x) {
                        accumulate(grads, x, g.to_vec());
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.iter().zip(val(b)).map(|(g, y)| g * y).collect());
                }
                if self.wants(b) {
                    accumulate(grads, b, g.iter().zip(val(a)).map(|(g, x)| g * x).collect());
                }
            }
            &Op::Scale(x, s) => accumulate(grads, x, g.iter().map(|v| v * s).collect()),
            &Op::Gelu(x) => accumulate(
                grads,
                x,
                g.iter().zip(val(x)).map(|(g, &v)| g * gelu_grad(v as f64) as f32).collect(),
            ),
            &Op::Softplus(x) => accumulate(
                grads,
                x,
                g.iter().zip(val(x)).map(|(g, &v)| g * sigmoid(v)).collect(),
            ),
            &Op::Softmax(x) => {
                let y = node.value.data();
                let w = node.value.last_dim();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(w).zip(g.chunks(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(&y, &g)| y as f64 * g as f64).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&y, &g)| (y as f64 * (g as f64 - dot)) as f32));
                }
                accumulate(grads, x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = shape(*gamma)[0];
                let gam = val(*gamma);
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![0.0f64; d];
                    let mut db = vec![0.0f64; d];
                    for (hr, gr) in xhat.chunks(d).zip(g.chunks(d)) {
                        for j in 0..d {
                            dg[j] += hr[j] as f64 * gr[j] as f64;
                            db[j] += gr[j] as f64;
                        }
                    }
                    if self.wants(*gamma) {
                        accumulate(grads, *gamma, dg.into_iter().map(|v| v as f32).collect());
                    }
                    if self.wants(*beta) {
                        accumulate(grads, *beta, db.into_iter().map(|v| v as f32).collect());
                    }
                }
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((hr, gr), &r) in xhat.chunks(d).zip(g.chunks(d)).zip(rstd) {
                        let mut mean_dh = 0.0f64;
                        let mut mean_dh_h = 0.0f64;
                        for j in 0..d {
                            let dh = gr[j] as f64 * gam[j] as f64;
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j] as f64;
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] as f64 * gam[j] as f64;
                            dx.push((r * (dh - mean_dh - hr[j] as f64 * mean_dh_h)) as f32);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            &Op::SliceCols { x, start } => {
                let m = shape(x)[1];
                let len = node.value.shape()[1];
                let mut dx = vec![0.0; val(x).len()];
                for (dr, gr) in dx.chunks_mut(m).zip(g.chunks(len)) {
                    dr[start..start + len].copy_from_slice(gr);
                }
                accumulate(grads, x, dx);
            }
            &Op::ToHeads { x, tokens, heads } => {
                let width = shape(x)[1];
                let (batch, dh) = (shape(x)[0] / tokens, width / heads);
                let mut dx = vec![0.0; g.len()];
                for b in 0..batch {
                    for t in 0..tokens {
                        for h in 0..heads {
                            let s = (b * tokens + t) * width + h * dh;
                            let d = ((b * heads + h) * tokens + t) * dh;
                            dx[s..s + dh].copy_from_slice(&g[d..d + dh]);
                        }
                    }
                }
                accumulate(grads, x, dx);
            }
            &Op::FromHeads { x, tokens, heads } => {
                let dh = shape(x)[2];
                let batch = shape(x)[0] / heads;
                let width = heads * dh;
                let mut dx = vec![0.0; g.len()];
                for b in 0..batch {
                    for t in 0..tokens {
                        for h in 0..heads {
                            let d = (b * tokens + t) * width + h * dh;
                            let s = ((b * heads + h) * tokens + t) * dh;
                            dx[s..s + dh].copy_from_slice(&g[d..d + dh]);
                        }
                    }
                }
                accumulate(grads, x, dx);
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let (gs, n, k) = (shape(a)[0], shape(a)[1], shape(a)[2]);
                let m = node.value.shape()[2];
                let (av, bv) = (val(a), val(b));
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for i in 0..gs {
                    let ai = &av[i * n * k..(i + 1) * n * k];
                    let bi = &bv[i * k * m..(i + 1) * k * m];
                    let gi = &g[i * n * m..(i + 1) * n * m];
                    if trans_b {
                        // out = a b^T with b: [m, k]
                        if self.wants(a) {
                            da.extend(mm_nn(gi, bi, n, m, k));
                        }
                        if self.wants(b) {
                            db.extend(mm_tn(gi, ai, n, m, k));
                        }
                    } else {
                        if self.wants(a) {
                            da.extend(mm_nt(gi, bi, n, m, k));
                        }
                        if self.wants(b) {
                            db.extend(mm_tn(ai, gi, n, k, m));
                        }
                    }
                }
                if self.wants(a) {
                    accumulate(grads, a, da);
                }
                if self.wants(b) {
                    accumulate(grads, b, db);
                }
            }
            &Op::MeanTokens { x, tokens } => {
                let d = shape(x)[1];
                let inv = 1.0 / tokens as f32;
                let mut dx = Vec::with_capacity(val(x).len());
                for gr in g.chunks(d) {
                    for _ in 0..tokens {
                        dx.extend(gr.iter().map(|v| v * inv));
                    }
                }
                accumulate(grads, x, dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = shape(*logits)[1];
                let scale = g[0] / labels.len() as f32;
                let mut dx = probs.clone();
                for (row, &y) in dx.chunks_mut(c).zip(labels) {
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                accumulate(grads, *logits, dx);
            }
            Op::GatherRows { x, rows } => {
                let m = shape(*x)[1];
                let mut dx = vec![0.0; val(*x).len()];
                for (&r, gr) in rows.iter().zip(g.chunks(m)) {
                    for (d, &v) in dx[r * m..(r + 1) * m].iter_mut().zip(gr) {
                        *d += v;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::RouteMerge(s) => self.backprop_route_merge(s, node, g, grads),
            &Op::Sum(x) => accumulate(grads, x, vec![g[0]; val(x).len()]),
            &Op::Mean(x) => {
                let n = val(x).len();
                accumulate(grads, x, vec![g[0] / n as f32; n]);
            }
        }
    }

    fn backprop_route_merge(&self, s: &RouteMergeState, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let d = node.value.last_dim();
        let span = s.tokens * d;
        let mut part_grads: [Vec<f32>; 2] = [Vec::new(), Vec::new()];
        let want_probs = self.wants(s.probs)
            && (0..2).all(|k| s.alternates[k].is_some() || s.assignment.iter().all(|&a| a as usize == k));
        let mut dprobs = vec![0.0f32; s.assignment.len() * 2];
        let mut cursor = [0usize; 2];
        for (sample, &a) in s.assignment.iter().enumerate() {
            let k = a as usize;
            let gs = &g[sample * span..(sample + 1) * span];
            part_grads[k].extend_from_slice(gs);
            if want_probs {
                let own = self.nodes[s.parts[k].expect("assigned part exists")].value.data();
                let own = &own[cursor[k] * span..(cursor[k] + 1) * span];
                let other = 1 - k;
                // The other block's alternates cover exactly the samples assigned to k.
                let alt_rank = cursor[k];
                let alt = s.alternates[other].as_ref().expect("checked").data();
                let alt = &alt[alt_rank * span..(alt_rank + 1) * span];
                dprobs[sample * 2 + k] = dot(gs, own) as f32;
                dprobs[sample * 2 + other] = dot(gs, alt) as f32;
            }
            cursor[k] += 1;
        }
        for (k, pg) in part_grads.into_iter().enumerate() {
            if let Some(p) = s.parts[k] {
                if self.wants(p) {
                    accumulate(grads, p, pg);
                }
            }
        }
        if want_probs {
            accumulate(grads, s.probs, dprobs);
        }
    }
}

/// Anything that owns parameters in a fixed, deterministic order.
pub trait Module {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    fn accumulate_gradients(&mut self, grads: &Gradients) {
        for p in self.parameters_mut() {
            p.accumulate(grads);
        }
    }

    fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    fn set_trainable(&mut self, trainable: bool) {
        for p in self.parameters_mut() {
            p.set_trainable(trainable);
        }
    }

    /// Concatenated little-endian bytes of every parameter value.
    fn parameter_bytes(&self) -> Vec<u8> {
        self.parameters().iter().flat_map(|p| p.value().to_le_bytes()).collect()
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], i: usize, g: Vec<f32>) {
    match &mut grads[i] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `a[n,k] * b[k,m]`
fn mm_nn(a: &[f32], b: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * m);
    let mut acc = vec![0.0f64; m];
    for i in 0..n {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (p, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
            let x = x as f64;
            for (o, &y) in acc.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += x * y as f64;
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    out
}

/// `a[n,k] * b[m,k]^T`
fn mm_nt(a: &[f32], b: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * m);
    for ar in a.chunks(k).take(n) {
        for br in b.chunks(k).take(m) {
            out.push(dot(ar, br) as f32);
        }
    }
    out
}

/// `a[r,n]^T * b[r,m]`
fn mm_tn(a: &[f32], b: &[f32], r: usize, n: usize, m: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; n * m];
    for row in 0..r {
        let br = &b[row * m..(row + 1) * m];
        for (i, &x) in a[row * n..(row + 1) * n].iter().enumerate() {
            let x = x as f64;
            for (o, &y) in acc[i * m..(i + 1) * m].iter_mut().zip(br) {
                *o += x * y as f64;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(w, w).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 6.0);
    }

    #[test]
    fn frozen_parameter_gets_no_gradient() {
        let frozen = Parameter::new(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let mut trainable = Parameter::new(t(&[2, 2], &[0.5; 4]), true);
        let mut tape = Tape::new();
        let a = tape.param(&frozen);
        let b = tape.param(&trainable);
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.param(frozen.id()).is_none());
        assert_eq!(grads.num_params(), 1);

        let mut frozen = frozen;
        frozen.accumulate(&grads);
        trainable.accumulate(&grads);
        assert!(frozen.grad().data().iter().all(|&v| v == 0.0));
        // d/dB sum(A B) = A^T 1
        assert_eq!(trainable.grad().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn gradient_flows_through_frozen_ops() {
        let frozen = Parameter::new(t(&[1, 1], &[2.0]), false);
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1], &[3.0]), true);
        let w = tape.param(&frozen);
        let y = tape.matmul(x, w).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(tape.matmul(a, b).is_err());
        let bias = tape.leaf(Tensor::zeros(&[2]), false);
        assert!(tape.add_bias(a, bias).is_err());
    }

    #[test]
    fn non_finite_outputs_are_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::filled(&[1], f32::MAX), false);
        assert!(matches!(tape.scale(a, 10.0), Err(Error::NonFinite("scale"))));
    }

    #[test]
    fn heads_round_trip() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[6, 8], |i| i as f32), false);
        let h = tape.to_heads(x, 3, 2).unwrap();
        assert_eq!(tape.value(h).shape(), &[4, 3, 4]);
        let back = tape.from_heads(h, 2).unwrap();
        assert!(tape.value(back).bit_eq(tape.value(x)));
    }

    #[test]
    fn route_merge_scatters_in_batch_order() {
        let mut tape = Tape::new();
        let probs = tape.leaf(Tensor::filled(&[3, 2], 0.5), false);
        let p0 = tape.leaf(t(&[1, 2], &[10.0, 11.0]), false);
        let p1 = tape.leaf(t(&[2, 2], &[0.0, 1.0, 2.0, 3.0]), false);
        let out = tape
            .route_merge(probs, [Some(p0), Some(p1)], [None, None], &[1, 0, 1], 1)
            .unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 1.0, 10.0, 11.0, 2.0, 3.0]);
    }

    #[test]
    fn route_merge_straight_through_probs() {
        let mut tape = Tape::new();
        let probs = tape.leaf(t(&[1, 2], &[0.3, 0.7]), true);
        let chosen = tape.leaf(t(&[1, 2], &[1.0, 2.0]), true);
        let alt = t(&[1, 2], &[5.0, -1.0]);
        let out = tape
            .route_merge(probs, [None, Some(chosen)], [Some(alt), None], &[1], 1)
            .unwrap();
        assert!(tape.value(out).bit_eq(tape.value(chosen)));
        let loss = tape.sum(out).unwrap();
        let grads = tape.backward(loss).unwrap();
        // d/dp_0 = <1, alt> = 4, d/dp_1 = <1, chosen> = 3
        assert_eq!(grads.get(probs).unwrap().data(), &[4.0, 3.0]);
        assert_eq!(grads.get(chosen).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn route_merge_mixed_assignment_probs() {
        // Block 0 gives 10, 20, 30 and block 1 gives 1, 2, 3 for samples 0..3.
        let mut tape = Tape::new();
        let probs = tape.leaf(t(&[3, 2], &[0.5; 6]), true);
        let p0 = tape.leaf(t(&[1, 1], &[20.0]), true);
        let p1 = tape.leaf(t(&[2, 1], &[1.0, 3.0]), true);
        let alts = [Some(t(&[2, 1], &[10.0, 30.0])), Some(t(&[1, 1], &[2.0]))];
        let out = tape.route_merge(probs, [Some(p0), Some(p1)], alts, &[1, 0, 1], 1).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 20.0, 3.0]);
        let loss = tape.sum(out).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(probs).unwrap().data(), &[10.0, 1.0, 20.0, 2.0, 30.0, 3.0]);
    }

    #[test]
    fn clone_is_independent() {
        let p = Parameter::new(Tensor::scalar(1.0), true);
        let q = p.clone();
        assert_ne!(p.id(), q.id());
        assert!(p.value().bit_eq(q.value()));
    }
}
