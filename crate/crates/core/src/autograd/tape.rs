//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and the information its backward rule needs;
//! nodes only ever reference earlier nodes, so the node list is already in
//! topological order and the reverse pass is a single sweep.

use std::collections::HashMap;

use crate::autograd::kernels::{self, gemm, gemm_at, gemm_bt};
use crate::autograd::params::{ParamId, ParamStore};
use crate::autograd::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// `sqrt(2/pi)`, used by the tanh GELU approximation.
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    BatchMatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Reshape(usize),
    Permute {
        x: usize,
        src_index: Vec<usize>,
    },
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedSoftmax {
        x: usize,
        len: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(usize),
    Tanh(usize),
    Relu(usize),
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    ReplaceRows {
        base: usize,
        src: usize,
        positions: Vec<usize>,
    },
    NormalizeRows {
        x: usize,
        norms: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    CrossEntropy {
        logits: usize,
        probs: Vec<f64>,
        targets: Vec<Option<usize>>,
        weights: Vec<f64>,
        denom: f64,
    },
    KlDiv {
        logits: usize,
        probs: Vec<f64>,
        target: Vec<f64>,
        row_weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Clone, Copy)]
struct Binding {
    node: usize,
    store: u64,
    param: usize,
}

/// Record of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<Binding>,
    param_cache: HashMap<(u64, usize), Var>,
}

/// Adjoints produced by one reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<Binding>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it was reached.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every parameter of `store` read on the tape into
    /// the parameters' gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        let sid = store.store_id();
        for b in self.bindings.iter().filter(|b| b.store == sid) {
            if let Some(g) = &self.grads[b.node] {
                store.get_mut(ParamId(b.param)).accumulate_grad(g);
            }
        }
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{op} produced a non-finite value")))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        check_finite(op_name, &data)?;
        let needs_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs(&op).iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<usize> {
        match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => vec![a, b],
            Op::MatMul(a, b) | Op::MatMulBt(a, b) => vec![a, b],
            Op::BatchMatMul { a, b, .. } => vec![a, b],
            Op::Scale(x, _) | Op::AddScalar(x) | Op::Reshape(x) => vec![x],
            Op::Permute { x, .. } | Op::Softmax { x, .. } | Op::MaskedSoftmax { x, .. } => vec![x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Gelu(x) | Op::Tanh(x) | Op::Relu(x) | Op::Sum(x) | Op::Mean(x) => vec![x],
            Op::GatherRows { table, .. } => vec![table],
            Op::ReplaceRows { base, src, .. } => vec![base, src],
            Op::NormalizeRows { x, .. } => vec![x],
            Op::CrossEntropy { logits, .. } | Op::KlDiv { logits, .. } => vec![logits],
        }
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a free-standing leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: Tensor::from_parts(t.shape().to_vec(), t.data().to_vec()),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reads a parameter onto the tape. Repeated reads return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.store_id(), id.0);
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let v = self.leaf(store.get(id));
        if store.get(id).requires_grad() {
            self.bindings.push(Binding {
                node: v.0,
                store: key.0,
                param: id.0,
            });
        }
        self.param_cache.insert(key, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(op_name, self.shape(a).to_vec(), data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// `x[.., d] + bias[d]`, broadcasting the bias over all leading dims.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [d] {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let data: Vec<f64> = self
            .data(x)
            .chunks(d.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        self.push("add_bias", self.shape(x).to_vec(), data, Op::AddBias(x.0, bias.0))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v * c).collect();
        self.push("scale", self.shape(x).to_vec(), data, Op::Scale(x.0, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v + c).collect();
        self.push("add_scalar", self.shape(x).to_vec(), data, Op::AddScalar(x.0))
    }

    /// `[m×k] · [k×n] → [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(self.data(a), self.data(b), &mut out, m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a.0, b.0))
    }

    /// `[m×k] · [n×k]ᵀ → [m×n]`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_bt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm_bt(self.data(a), self.data(b), &mut out, m, k, n);
        self.push("matmul_bt", vec![m, n], out, Op::MatMulBt(a.0, b.0))
    }

    /// Batched product over the leading dim: `[B×m×k]·[B×k×n]`, or with
    /// `trans_b` `[B×m×k]·[B×n×k]ᵀ`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let inner_b = if trans_b { 2 } else { 1 };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[inner_b] {
            return Err(Error::dim("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            let ai = &da[i * m * k..(i + 1) * m * k];
            let bi = &db[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_bt(ai, bi, oi, m, k, n);
            } else {
                gemm(ai, bi, oi, m, k, n);
            }
        }
        self.push(
            "batch_matmul",
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x.0))
    }

    /// Axis permutation: output dim `i` is input dim `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Index(format!("invalid permutation {perm:?} for rank {}", shape.len())));
        }
        let src_index = kernels::permute_index(&shape, perm);
        let src = self.data(x);
        let data = src_index.iter().map(|&i| src[i]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        self.push("permute", out_shape, data, Op::Permute { x: x.0, src_index })
    }

    /// Softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index(format!("softmax axis {axis} out of range for rank {}", shape.len())));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; len];
        let mut res = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = src[(o * len + j) * inner + i];
                }
                kernels::softmax_into(&buf, &mut res);
                for (j, r) in res.iter().enumerate() {
                    out[(o * len + j) * inner + i] = *r;
                }
            }
        }
        self.push("softmax", shape, out, Op::Softmax { x: x.0, outer, len, inner })
    }

    /// Softmax along the last axis where `keep[i] == false` entries get
    /// probability exactly zero. A row with nothing kept is all zeros.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let src = self.data(x);
        if keep.len() != src.len() || shape.is_empty() {
            return Err(Error::dim("masked_softmax", &shape, &[keep.len()]));
        }
        let len = *shape.last().unwrap();
        let mut out = vec![0.0; src.len()];
        for ((row, k), o) in src.chunks(len).zip(keep.chunks(len)).zip(out.chunks_mut(len)) {
            let max = row
                .iter()
                .zip(k)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut s = 0.0;
            for ((dst, &v), &kp) in o.iter_mut().zip(row).zip(k) {
                if kp {
                    *dst = (v - max).exp();
                    s += *dst;
                }
            }
            o.iter_mut().for_each(|v| *v /= s);
        }
        self.push("masked_softmax", shape, out, Op::MaskedSoftmax { x: x.0, len })
    }

    /// Normalizes each row of the last dim to zero mean and unit population
    /// variance, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", &shape, self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::Domain("layer_norm eps must be positive".into()));
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let src = self.data(x);
        let rows = src.len() / d.max(1);
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        )
    }

    /// GELU, tanh approximation:
    /// `0.5·x·(1 + tanh(sqrt(2/π)·(x + 0.044715·x³)))`.
    ///
    /// The exact form `x·Φ(x)` differs by < 1e-3 everywhere and is not used.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| gelu_scalar(v)).collect();
        self.push("gelu", self.shape(x).to_vec(), data, Op::Gelu(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v.tanh()).collect();
        self.push("tanh", self.shape(x).to_vec(), data, Op::Tanh(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v.max(0.0)).collect();
        self.push("relu", self.shape(x).to_vec(), data, Op::Relu(x.0))
    }

    /// Row gather from a `[V×d]` table. Backward scatters (adds) into the table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("gather_rows", &shape, &[ids.len()]));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("row id {bad} out of range for table with {v} rows")));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            "gather_rows",
            vec![ids.len(), d],
            out,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
        )
    }

    /// Copy of `base [N×d]` with rows `positions[i]` replaced by row `i` of
    /// `src [P×d]`. Replaced rows pass no gradient to `base`.
    pub fn replace_rows(&mut self, base: Var, positions: &[usize], src: Var) -> Result<Var> {
        let (sb, ss) = (self.shape(base).to_vec(), self.shape(src).to_vec());
        if sb.len() != 2 || ss.len() != 2 || sb[1] != ss[1] || ss[0] != positions.len() {
            return Err(Error::dim("replace_rows", &sb, &ss));
        }
        let (n, d) = (sb[0], sb[1]);
        let mut seen = vec![false; n];
        for &p in positions {
            if p >= n {
                return Err(Error::Index(format!("row position {p} out of range for {n} rows")));
            }
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::Index(format!("row position {p} replaced twice")));
            }
        }
        let mut out = self.data(base).to_vec();
        let s = self.data(src);
        for (i, &p) in positions.iter().enumerate() {
            out[p * d..(p + 1) * d].copy_from_slice(&s[i * d..(i + 1) * d]);
        }
        self.push(
            "replace_rows",
            sb,
            out,
            Op::ReplaceRows {
                base: base.0,
                src: src.0,
                positions: positions.to_vec(),
            },
        )
    }

    /// L2-normalizes each row of a 2-D tensor. Zero rows are rejected.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("normalize_rows", &shape, &[]));
        }
        let d = shape[1];
        let src = self.data(x);
        let mut norms = Vec::with_capacity(shape[0]);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Domain("cannot normalize a zero vector".into()));
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        self.push("normalize_rows", shape, out, Op::NormalizeRows { x: x.0, norms })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::Domain("mean of an empty tensor".into()));
        }
        let s = self.data(x).iter().sum::<f64>() / n as f64;
        self.push("mean", vec![], vec![s], Op::Mean(x.0))
    }

    /// Mean negative log-likelihood over rows of `logits [n×K]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
        self.cross_entropy_masked(logits, &t, None)
    }

    /// Cross-entropy where `None` targets are ignored and optional per-row
    /// weights scale each term: `Σ w_i·CE_i / (#non-ignored rows)`.
    /// A batch with every row ignored yields 0.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[Option<usize>], weights: Option<&[f64]>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::dim("cross_entropy", &shape, &[targets.len()]));
        }
        let (n, k) = (shape[0], shape[1]);
        if n == 0 {
            return Err(Error::Domain("cross_entropy on an empty batch".into()));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= k) {
            return Err(Error::Index(format!("target {bad} out of range for {k} classes")));
        }
        let weights = match weights {
            Some(w) if w.len() != n => return Err(Error::dim("cross_entropy weights", &[n], &[w.len()])),
            Some(w) => w.to_vec(),
            None => vec![1.0; n],
        };
        let src = self.data(logits);
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            let row = &src[i * k..(i + 1) * k];
            kernels::softmax_into(row, &mut probs[i * k..(i + 1) * k]);
            if let Some(t) = targets[i] {
                total += weights[i] * (kernels::log_sum_exp(row) - row[t]);
                count += 1;
            }
        }
        let denom = count.max(1) as f64;
        self.push(
            "cross_entropy",
            vec![],
            vec![total / denom],
            Op::CrossEntropy {
                logits: logits.0,
                probs,
                targets: targets.to_vec(),
                weights,
                denom,
            },
        )
    }

    /// `Σ_i w_i · KL(target_i ‖ softmax(logits_i)) / n` with a constant target
    /// distribution per row.
    pub fn kl_div(&mut self, logits: Var, target: &[f64], row_weights: Option<&[f64]>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || target.len() != numel(&shape) {
            return Err(Error::dim("kl_div", &shape, &[target.len()]));
        }
        let (n, k) = (shape[0], shape[1]);
        if n == 0 {
            return Err(Error::Domain("kl_div on an empty batch".into()));
        }
        let row_weights = match row_weights {
            Some(w) if w.len() != n => return Err(Error::dim("kl_div weights", &[n], &[w.len()])),
            Some(w) => w.to_vec(),
            None => vec![1.0; n],
        };
        let src = self.data(logits);
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            let row = &src[i * k..(i + 1) * k];
            kernels::softmax_into(row, &mut probs[i * k..(i + 1) * k]);
            let lse = kernels::log_sum_exp(row);
            let mut kl = 0.0;
            for j in 0..k {
                let p = target[i * k + j];
                if p > 0.0 {
                    kl += p * (p.ln() - (row[j] - lse));
                }
            }
            total += row_weights[i] * kl;
        }
        self.push(
            "kl_div",
            vec![],
            vec![total / n as f64],
            Op::KlDiv {
                logits: logits.0,
                probs,
                target: target.to_vec(),
                row_weights,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Domain(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            bindings: self.bindings.clone(),
        })
    }

    /// Reverse sweep that accumulates parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let g = self.gradients(loss)?;
        g.accumulate_into(store);
        Ok(g)
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], idx: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[idx].needs_grad {
            return None;
        }
        let len = self.nodes[idx].value.numel();
        Some(grads[idx].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.buf(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.buf(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if let Some(ga) = self.buf(grads, *a) {
                    for ((d, gg), y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += gg * y;
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for ((d, gg), x) in gb.iter_mut().zip(g).zip(va) {
                        *d += gg * x;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = self.buf(grads, *x) {
                    add_into(gx, g);
                }
                let d = self.nodes[*bias].value.numel();
                if let Some(gb) = self.buf(grads, *bias) {
                    for row in g.chunks(d.max(1)) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.buf(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.buf(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if let Some(ga) = self.buf(grads, *a) {
                    gemm_bt(g, vb, ga, m, n, k);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    gemm_at(va, g, gb, m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if let Some(ga) = self.buf(grads, *a) {
                    gemm(g, vb, ga, m, n, k);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    gemm_at(g, va, gb, m, n, k);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if let Some(ga) = self.buf(grads, *a) {
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt = &vb[t * k * n..(t + 1) * k * n];
                        let dst = &mut ga[t * m * k..(t + 1) * m * k];
                        if *trans_b {
                            gemm(gt, bt, dst, m, n, k);
                        } else {
                            gemm_bt(gt, bt, dst, m, n, k);
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &va[t * m * k..(t + 1) * m * k];
                        let dst = &mut gb[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            gemm_at(gt, at, dst, m, n, k);
                        } else {
                            gemm_at(at, gt, dst, m, k, n);
                        }
                    }
                }
            }
            Op::Permute { x, src_index } => {
                if let Some(gx) = self.buf(grads, *x) {
                    for (gg, &s) in g.iter().zip(src_index) {
                        gx[s] += gg;
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if let Some(gx) = self.buf(grads, *x) {
                    for o in 0..*outer {
                        for c in 0..*inner {
                            let idx = |j: usize| (o * len + j) * inner + c;
                            let dot: f64 = (0..*len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..*len {
                                gx[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x, len } => {
                if let Some(gx) = self.buf(grads, *x) {
                    for ((y, gg), dst) in out.chunks(*len).zip(g.chunks(*len)).zip(gx.chunks_mut(*len)) {
                        let dot: f64 = y.iter().zip(gg).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dst.iter_mut().zip(y).zip(gg) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.nodes[*gamma].value.data();
                let d = gam.len();
                if let Some(gg) = self.buf(grads, *gamma) {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *beta) {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = self.buf(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, (gr, xr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gam[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xr[j];
                        }
                        let scale = inv_std[r] / d as f64;
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += scale * (d as f64 * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.nodes[*x].value.data();
                if let Some(gx) = self.buf(grads, *x) {
                    for ((d, gg), &v) in gx.iter_mut().zip(g).zip(vx) {
                        *d += gg * gelu_grad(v);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.buf(grads, *x) {
                    for ((d, gg), y) in gx.iter_mut().zip(g).zip(out) {
                        *d += gg * (1.0 - y * y);
                    }
                }
            }
            Op::Relu(x) => {
                let vx = self.nodes[*x].value.data();
                if let Some(gx) = self.buf(grads, *x) {
                    for ((d, gg), &v) in gx.iter_mut().zip(g).zip(vx) {
                        if v > 0.0 {
                            *d += gg;
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let d = self.nodes[*table].value.shape()[1];
                if let Some(gt) = self.buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ReplaceRows { base, src, positions } => {
                let d = self.nodes[*base].value.shape()[1];
                if let Some(gb) = self.buf(grads, *base) {
                    let mut replaced = vec![false; g.len() / d.max(1)];
                    for &p in positions {
                        replaced[p] = true;
                    }
                    for (r, (dst, gr)) in gb.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        if !replaced[r] {
                            add_into(dst, gr);
                        }
                    }
                }
                if let Some(gs) = self.buf(grads, *src) {
                    for (i, &p) in positions.iter().enumerate() {
                        add_into(&mut gs[i * d..(i + 1) * d], &g[p * d..(p + 1) * d]);
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let d = self.nodes[*x].value.shape()[1];
                if let Some(gx) = self.buf(grads, *x) {
                    for (r, n) in norms.iter().enumerate() {
                        let y = &out[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += (gr[j] - y[j] * dot) / n;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.buf(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.buf(grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                weights,
                denom,
            } => {
                let k = self.nodes[*logits].value.shape()[1];
                if let Some(gl) = self.buf(grads, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let s = g[0] * weights[r] / denom;
                        if s == 0.0 {
                            continue;
                        }
                        let dst = &mut gl[r * k..(r + 1) * k];
                        for j in 0..k {
                            dst[j] += s * probs[r * k + j];
                        }
                        dst[*t] -= s;
                    }
                }
            }
            Op::KlDiv {
                logits,
                probs,
                target,
                row_weights,
            } => {
                let k = self.nodes[*logits].value.shape()[1];
                let n = row_weights.len() as f64;
                if let Some(gl) = self.buf(grads, *logits) {
                    for (r, w) in row_weights.iter().enumerate() {
                        let s = g[0] * w / n;
                        if s == 0.0 {
                            continue;
                        }
                        for j in 0..k {
                            gl[r * k + j] += s * (probs[r * k + j] - target[r * k + j]);
                        }
                    }
                }
            }
        }
    }
}

/// Scalar GELU (tanh approximation).
pub fn gelu_scalar(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}
