//! Dense row-major tensors with a reverse-mode gradient tape.
//!
//! [`Array`] is plain data: shareable across threads, never tracked.
//! [`Tensor`] wraps an array in a graph node. Tensors built from tracked
//! inputs remember the operation that produced them; calling
//! [`Tensor::backward`] on a scalar walks that record once in reverse
//! topological order and accumulates gradients into tracked leaves.
//!
//! Broadcasting is explicit: the only mixed-shape ops are
//! [`Tensor::add_row`] (row vector over a matrix) and scalar scaling.

pub mod kernels;
mod storage;

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

pub use storage::{
    default_precision, precision_scope, set_default_precision, Array, Precision, PrecisionGuard,
    Scalar, Storage,
};
pub(crate) use storage::{map_storage, zip_storage};

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

struct Node {
    id: usize,
    value: Array,
    requires_grad: bool,
    op: Op,
    grad: RefCell<Option<Storage>>,
}

enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddRow(Tensor, Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    Gelu(Tensor),
    Sum(Tensor),
    Softmax {
        x: Tensor,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Storage,
        rstd: Storage,
    },
    Attention {
        q: Tensor,
        k: Tensor,
        v: Tensor,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Storage,
    },
    Embedding {
        table: Tensor,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Tensor,
        targets: Vec<Option<usize>>,
        log_probs: Storage,
        count: usize,
    },
    KlDiv {
        logits: Tensor,
        log_p: Storage,
        log_q: Storage,
        row_kl: Vec<f64>,
        mask: Vec<bool>,
        count: usize,
    },
    TopK {
        x: Tensor,
        keep: Vec<bool>,
    },
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn dims2(op: &'static str, s: &[usize]) -> Result<(usize, usize)> {
    match s {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, s, &[0, 0])),
    }
}

impl Tensor {
    fn from_op(value: Array, op: Op, parents_require_grad: bool) -> Tensor {
        let op = if parents_require_grad { op } else { Op::Leaf };
        Tensor(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: parents_require_grad,
            op,
            grad: RefCell::new(None),
        }))
    }

    /// An untracked tensor; gradients never flow into it.
    pub fn constant(value: Array) -> Tensor {
        Tensor::from_op(value, Op::Leaf, false)
    }

    /// A tracked leaf whose gradient is accumulated by `backward`.
    pub fn param(value: Array) -> Tensor {
        Tensor(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            op: Op::Leaf,
            grad: RefCell::new(None),
        }))
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Tensor> {
        Ok(Tensor::constant(Array::from_f64(shape, values)?))
    }

    pub fn value(&self) -> &Array {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.value.to_f64_vec()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.0.value.get(0)
    }

    pub fn grad(&self) -> Option<Array> {
        self.0
            .grad
            .borrow()
            .as_ref()
            .map(|g| Array::new(self.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.0.value.clone())
    }

    fn storage(&self) -> &Storage {
        self.0.value.storage()
    }

    fn make(&self, shape: Vec<usize>, data: Storage, op: Op, rg: bool) -> Tensor {
        let value = Array::new(shape, data).expect("kernel output matches shape");
        Tensor::from_op(value, op, rg)
    }

    // ---- ops -------------------------------------------------------------

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (n, m) = dims2("matmul", self.shape())?;
        let (m2, p) = dims2("matmul", rhs.shape())?;
        if m != m2 {
            return Err(Error::shape("matmul", self.shape(), rhs.shape()));
        }
        let data = zip_storage!(self.storage(), rhs.storage(), (a, b) => kernels::matmul(a, b, n, m, p));
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.make(vec![n, p], data, Op::MatMul(self.clone(), rhs.clone()), rg))
    }

    fn same_shape(&self, rhs: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(op, self.shape(), rhs.shape()));
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "add")?;
        let data = zip_storage!(self.storage(), rhs.storage(), (a, b) =>
            a.iter().zip(b).map(|(x, y)| *x + *y).collect());
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.make(self.shape().to_vec(), data, Op::Add(self.clone(), rhs.clone()), rg))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "sub")?;
        let data = zip_storage!(self.storage(), rhs.storage(), (a, b) =>
            a.iter().zip(b).map(|(x, y)| *x - *y).collect());
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.make(self.shape().to_vec(), data, Op::Sub(self.clone(), rhs.clone()), rg))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "mul")?;
        let data = zip_storage!(self.storage(), rhs.storage(), (a, b) =>
            a.iter().zip(b).map(|(x, y)| *x * *y).collect());
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.make(self.shape().to_vec(), data, Op::Mul(self.clone(), rhs.clone()), rg))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = map_storage!(self.storage(), a => scale_vec(a, c));
        self.make(self.shape().to_vec(), data, Op::Scale(self.clone(), c), self.requires_grad())
    }

    /// `x [n×d] + b [d]` applied to every row.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (n, d) = dims2("add_row", self.shape())?;
        if bias.shape() != [d] {
            return Err(Error::shape("add_row", self.shape(), bias.shape()));
        }
        let data = zip_storage!(self.storage(), bias.storage(), (a, b) => {
            let mut out = a.clone();
            for r in 0..n {
                for (o, bv) in out[r * d..(r + 1) * d].iter_mut().zip(b) {
                    *o = *o + *bv;
                }
            }
            out
        });
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.make(vec![n, d], data, Op::AddRow(self.clone(), bias.clone()), rg))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = dims2("transpose", self.shape())?;
        let data = map_storage!(self.storage(), a => kernels::transpose(a, r, c));
        Ok(self.make(vec![c, r], data, Op::Transpose(self.clone()), self.requires_grad()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let value = self.value().reshape(shape)?;
        Ok(Tensor::from_op(value, Op::Reshape(self.clone()), self.requires_grad()))
    }

    pub fn gelu(&self) -> Tensor {
        let data = map_storage!(self.storage(), a => a.iter().map(|&x| kernels::gelu(x)).collect());
        self.make(self.shape().to_vec(), data, Op::Gelu(self.clone()), self.requires_grad())
    }

    pub fn sum(&self) -> Tensor {
        let data = map_storage!(self.storage(), a => vec![a.iter().copied().sum()]);
        self.make(vec![], data, Op::Sum(self.clone()), self.requires_grad())
    }

    pub fn mean(&self) -> Tensor {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        if !self.storage().all_finite() {
            return Err(Error::Numeric {
                op: "softmax",
                detail: "non-finite input".into(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = map_storage!(self.storage(), a => kernels::softmax(a, outer, len, inner));
        let op = Op::Softmax {
            x: self.clone(),
            outer,
            len,
            inner,
        };
        Ok(self.make(shape, data, op, self.requires_grad()))
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (n, d) = dims2("layer_norm", self.shape())?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape("layer_norm", self.shape(), gamma.shape()));
        }
        let (out, xhat, rstd) = match (self.storage(), gamma.storage(), beta.storage()) {
            (Storage::F32(x), Storage::F32(g), Storage::F32(b)) => {
                let (o, h, r) = layer_norm_fwd(x, g, b, n, d, eps);
                (Storage::F32(o), Storage::F32(h), Storage::F32(r))
            }
            (Storage::F64(x), Storage::F64(g), Storage::F64(b)) => {
                let (o, h, r) = layer_norm_fwd(x, g, b, n, d, eps);
                (Storage::F64(o), Storage::F64(h), Storage::F64(r))
            }
            _ => panic!("precision mismatch between operands"),
        };
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let op = Op::LayerNorm {
            x: self.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            xhat,
            rstd,
        };
        Ok(self.make(vec![n, d], out, op, rg))
    }

    /// Causal multi-head attention over `batch` packed sequences of length
    /// `seq`. Inputs are `[batch·seq × d]` projections; heads split `d`.
    pub fn causal_attention(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Tensor> {
        let (rows, d) = dims2("attention", q.shape())?;
        if k.shape() != q.shape() || v.shape() != q.shape() {
            return Err(Error::shape("attention", q.shape(), k.shape()));
        }
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", q.shape(), &[batch, seq, heads]));
        }
        let (out, probs) = match (q.storage(), k.storage(), v.storage()) {
            (Storage::F32(qs), Storage::F32(ks), Storage::F32(vs)) => {
                let (o, p) = attention_fwd(qs, ks, vs, batch, seq, heads, d);
                (Storage::F32(o), Storage::F32(p))
            }
            (Storage::F64(qs), Storage::F64(ks), Storage::F64(vs)) => {
                let (o, p) = attention_fwd(qs, ks, vs, batch, seq, heads, d);
                (Storage::F64(o), Storage::F64(p))
            }
            _ => panic!("precision mismatch between operands"),
        };
        let rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
        let op = Op::Attention {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            batch,
            seq,
            heads,
            probs,
        };
        Ok(q.make(vec![rows, d], out, op, rg))
    }

    /// Gather rows of a `[V×d]` table.
    pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = dims2("embedding", table.shape())?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {v}")));
        }
        let data = map_storage!(table.storage(), t => {
            let mut out = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                out.extend_from_slice(&t[i * d..(i + 1) * d]);
            }
            out
        });
        let op = Op::Embedding {
            table: table.clone(),
            ids: ids.to_vec(),
        };
        Ok(table.make(vec![ids.len(), d], data, op, table.requires_grad()))
    }

    /// Mean next-token cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&self, targets: &[Option<usize>]) -> Result<Tensor> {
        let (n, v) = dims2("cross_entropy", self.shape())?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", self.shape(), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Input(format!("target {bad} outside vocabulary of {v}")));
        }
        let log_probs = map_storage!(self.storage(), a => kernels::log_softmax_rows(a, n, v));
        let count = targets.iter().filter(|t| t.is_some()).count();
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                total -= log_probs.get(r * v + t);
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let data = Storage::from_f64(self.value().precision(), &[loss]);
        let op = Op::CrossEntropy {
            logits: self.clone(),
            targets: targets.to_vec(),
            log_probs,
            count,
        };
        Ok(self.make(vec![], data, op, self.requires_grad()))
    }

    /// Mean over unmasked rows of `KL(softmax(self_row) ‖ softmax(reference_row))`.
    ///
    /// The reference is treated as a constant.
    pub fn kl_div(&self, reference: &Array, mask: &[bool]) -> Result<Tensor> {
        let (n, v) = dims2("kl_div", self.shape())?;
        if reference.shape() != self.shape() {
            return Err(Error::shape("kl_div", self.shape(), reference.shape()));
        }
        if mask.len() != n {
            return Err(Error::shape("kl_div", self.shape(), &[mask.len()]));
        }
        let log_p = map_storage!(self.storage(), a => kernels::log_softmax_rows(a, n, v));
        let log_q = map_storage!(reference.storage(), a => kernels::log_softmax_rows(a, n, v));
        let (row_kl, total) = match (&log_p, &log_q) {
            (Storage::F32(lp), Storage::F32(lq)) => kl_rows(lp, lq, mask, v),
            (Storage::F64(lp), Storage::F64(lq)) => kl_rows(lp, lq, mask, v),
            _ => panic!("precision mismatch between operands"),
        };
        let count = mask.iter().filter(|&&m| m).count();
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let data = Storage::from_f64(self.value().precision(), &[loss]);
        let op = Op::KlDiv {
            logits: self.clone(),
            log_p,
            log_q,
            row_kl,
            mask: mask.to_vec(),
            count,
        };
        Ok(self.make(vec![], data, op, self.requires_grad()))
    }

    /// Keep the `k` largest entries of each row by value and zero the rest.
    ///
    /// Ties go to the lowest column. For differentiation the selection is a
    /// fixed mask: gradients pass through kept entries only.
    pub fn top_k_rows(&self, k: usize) -> Result<Tensor> {
        let (n, m) = dims2("top_k", self.shape())?;
        if k == 0 || k > m {
            return Err(Error::Contract(format!("top-k needs 1 <= k <= {m}, got {k}")));
        }
        let mut keep = vec![false; n * m];
        let data = map_storage!(self.storage(), a => {
            let mut out = vec![cast(0.0); n * m];
            for r in 0..n {
                let row = &a[r * m..(r + 1) * m];
                for j in kernels::top_k_indices(row, k) {
                    keep[r * m + j] = true;
                    out[r * m + j] = row[j];
                }
            }
            out
        });
        let op = Op::TopK {
            x: self.clone(),
            keep,
        };
        Ok(self.make(vec![n, m], data, op, self.requires_grad()))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode pass from a one-element loss into every tracked leaf.
    ///
    /// Leaf gradients accumulate across calls; see [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.value().len() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract("loss is not connected to any tracked tensor".into()));
        }
        let order = self.topo_order();
        let mut grads: HashMap<usize, Storage> = HashMap::new();
        grads.insert(
            self.0.id,
            Storage::from_f64(self.value().precision(), &[1.0]),
        );
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.0.id) else {
                continue;
            };
            if let Op::Leaf = node.0.op {
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.accumulate(&g),
                    None => *slot = Some(g),
                }
                continue;
            }
            for (parent, pg) in node.input_grads(&g) {
                match grads.get_mut(&parent.0.id) {
                    Some(acc) => acc.accumulate(&pg),
                    None => {
                        grads.insert(parent.0.id, pg);
                    }
                }
            }
        }
        Ok(())
    }

    /// Tracked nodes reachable from `self`, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.0.id) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.parents() {
                if p.requires_grad() && !visited.contains(&p.0.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    fn parents(&self) -> Vec<&Tensor> {
        match &self.0.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _) | Op::Transpose(a) | Op::Reshape(a) | Op::Gelu(a) | Op::Sum(a) => {
                vec![a]
            }
            Op::Softmax { x, .. } | Op::TopK { x, .. } => vec![x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
            Op::Embedding { table, .. } => vec![table],
            Op::CrossEntropy { logits, .. } | Op::KlDiv { logits, .. } => vec![logits],
        }
    }

    /// Gradients with respect to each tracked input, given `g = dL/dself`.
    fn input_grads(&self, g: &Storage) -> Vec<(Tensor, Storage)> {
        let mut out = Vec::new();
        let mut push = |t: &Tensor, s: Storage| {
            if t.requires_grad() {
                out.push((t.clone(), s));
            }
        };
        match &self.0.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, m) = (a.shape()[0], a.shape()[1]);
                let p = b.shape()[1];
                if a.requires_grad() {
                    let ga = zip_storage!(g, b.storage(), (gs, bs) => kernels::matmul_nt(gs, bs, n, p, m));
                    push(a, ga);
                }
                if b.requires_grad() {
                    let gb = zip_storage!(a.storage(), g, (as_, gs) => kernels::matmul_tn(as_, gs, n, m, p));
                    push(b, gb);
                }
            }
            Op::Add(a, b) => {
                push(a, g.clone());
                push(b, g.clone());
            }
            Op::Sub(a, b) => {
                push(a, g.clone());
                if b.requires_grad() {
                    push(b, map_storage!(g, gs => gs.iter().map(|x| -*x).collect()));
                }
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    push(a, zip_storage!(g, b.storage(), (gs, bs) =>
                        gs.iter().zip(bs).map(|(x, y)| *x * *y).collect()));
                }
                if b.requires_grad() {
                    push(b, zip_storage!(g, a.storage(), (gs, as_) =>
                        gs.iter().zip(as_).map(|(x, y)| *x * *y).collect()));
                }
            }
            Op::Scale(a, c) => {
                push(a, map_storage!(g, gs => scale_vec(gs, *c)));
            }
            Op::AddRow(x, b) => {
                push(x, g.clone());
                if b.requires_grad() {
                    let d = b.shape()[0];
                    push(b, map_storage!(g, gs => {
                        let mut acc = vec![cast(0.0); d];
                        for row in gs.chunks(d) {
                            for (a, v) in acc.iter_mut().zip(row) {
                                *a = *a + *v;
                            }
                        }
                        acc
                    }));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                push(a, map_storage!(g, gs => kernels::transpose(gs, c, r)));
            }
            Op::Reshape(a) => push(a, g.clone()),
            Op::Gelu(a) => {
                push(a, zip_storage!(g, a.storage(), (gs, xs) =>
                    gs.iter().zip(xs).map(|(gv, &x)| *gv * kernels::gelu_grad(x)).collect()));
            }
            Op::Sum(a) => {
                let n = a.value().len();
                push(a, map_storage!(g, gs => vec![gs[0]; n]));
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                push(x, zip_storage!(g, self.storage(), (gs, ys) => softmax_bwd(gs, ys, outer, len, inner)));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = gamma.shape()[0];
                let (dx, dgamma, dbeta) = match (g, gamma.storage(), xhat, rstd) {
                    (Storage::F32(gs), Storage::F32(gm), Storage::F32(xh), Storage::F32(rs)) => {
                        let (a, b, c) = layer_norm_bwd(gs, gm, xh, rs, d);
                        (Storage::F32(a), Storage::F32(b), Storage::F32(c))
                    }
                    (Storage::F64(gs), Storage::F64(gm), Storage::F64(xh), Storage::F64(rs)) => {
                        let (a, b, c) = layer_norm_bwd(gs, gm, xh, rs, d);
                        (Storage::F64(a), Storage::F64(b), Storage::F64(c))
                    }
                    _ => panic!("precision mismatch between operands"),
                };
                push(x, dx);
                push(gamma, dgamma);
                push(beta, dbeta);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let d = q.shape()[1];
                let (dq, dk, dv) = match (g, q.storage(), k.storage(), v.storage(), probs) {
                    (
                        Storage::F32(gs),
                        Storage::F32(qs),
                        Storage::F32(ks),
                        Storage::F32(vs),
                        Storage::F32(ps),
                    ) => {
                        let (a, b, c) = attention_bwd(gs, qs, ks, vs, ps, *batch, *seq, *heads, d);
                        (Storage::F32(a), Storage::F32(b), Storage::F32(c))
                    }
                    (
                        Storage::F64(gs),
                        Storage::F64(qs),
                        Storage::F64(ks),
                        Storage::F64(vs),
                        Storage::F64(ps),
                    ) => {
                        let (a, b, c) = attention_bwd(gs, qs, ks, vs, ps, *batch, *seq, *heads, d);
                        (Storage::F64(a), Storage::F64(b), Storage::F64(c))
                    }
                    _ => panic!("precision mismatch between operands"),
                };
                push(q, dq);
                push(k, dk);
                push(v, dv);
            }
            Op::Embedding { table, ids } => {
                let (vocab, d) = (table.shape()[0], table.shape()[1]);
                push(table, map_storage!(g, gs => {
                    let mut acc = vec![cast(0.0); vocab * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            acc[id * d + c] = acc[id * d + c] + gs[r * d + c];
                        }
                    }
                    acc
                }));
            }
            Op::CrossEntropy {
                logits,
                targets,
                log_probs,
                count,
            } => {
                let v = logits.shape()[1];
                let count = *count;
                push(logits, zip_storage!(g, log_probs, (gs, lp) => ce_bwd(gs[0], lp, targets, v, count)));
            }
            Op::KlDiv {
                logits,
                log_p,
                log_q,
                row_kl,
                mask,
                count,
            } => {
                let v = logits.shape()[1];
                let count = *count;
                push(logits, zip_storage!(g, log_p, (gs, lp) => kl_bwd(gs[0], lp, log_q, row_kl, mask, v, count)));
            }
            Op::TopK { x, keep } => {
                push(x, map_storage!(g, gs => gs.iter().zip(keep)
                    .map(|(v, &k)| if k { *v } else { cast(0.0) }).collect()));
            }
        }
        out
    }
}

fn softmax_bwd<T: Scalar>(g: &[T], y: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); g.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut dotv = T::zero();
            for j in 0..len {
                dotv = dotv + g[idx(j)] * y[idx(j)];
            }
            for j in 0..len {
                dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dotv);
            }
        }
    }
    dx
}

fn ce_bwd<T: Scalar>(g: T, lp: &[T], targets: &[Option<usize>], v: usize, count: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); lp.len()];
    if count == 0 {
        return dx;
    }
    let s = g / T::of(count as f64);
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            for c in 0..v {
                dx[r * v + c] = lp[r * v + c].exp() * s;
            }
            dx[r * v + t] = dx[r * v + t] - s;
        }
    }
    dx
}

fn kl_bwd<T: Scalar>(
    g: T,
    lp: &[T],
    log_q: &Storage,
    row_kl: &[f64],
    mask: &[bool],
    v: usize,
    count: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); lp.len()];
    if count == 0 {
        return dx;
    }
    let lq = log_q.to_f64_vec();
    let s = g / T::of(count as f64);
    for (r, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let kl = T::of(row_kl[r]);
        for c in 0..v {
            let i = r * v + c;
            dx[i] = s * lp[i].exp() * ((lp[i] - T::of(lq[i])) - kl);
        }
    }
    dx
}

#[inline]
fn cast<T: Scalar>(v: f64) -> T {
    T::of(v)
}

fn scale_vec<T: Scalar>(a: &[T], c: f64) -> Vec<T> {
    let c = T::of(c);
    a.iter().map(|x| *x * c).collect()
}

fn layer_norm_fwd<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    d: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); n * d];
    let mut xhat = vec![T::zero(); n * d];
    let mut rstd = vec![T::zero(); n];
    let dn = T::of(d as f64);
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rs = T::one() / (var + T::of(eps)).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = h * gamma[c] + beta[c];
        }
    }
    (out, xhat, rstd)
}

fn layer_norm_bwd<T: Scalar>(
    g: &[T],
    gamma: &[T],
    xhat: &[T],
    rstd: &[T],
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = rstd.len();
    let mut dx = vec![T::zero(); n * d];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let dn = T::of(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..n {
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..d {
            let i = r * d + c;
            dgamma[c] = dgamma[c] + g[i] * xhat[i];
            dbeta[c] = dbeta[c] + g[i];
            dxhat[c] = g[i] * gamma[c];
            mean_dxhat = mean_dxhat + dxhat[c];
            mean_dxhat_xhat = mean_dxhat_xhat + dxhat[c] * xhat[i];
        }
        mean_dxhat = mean_dxhat / dn;
        mean_dxhat_xhat = mean_dxhat_xhat / dn;
        for c in 0..d {
            let i = r * d + c;
            dx[i] = rstd[r] * (dxhat[c] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

fn attention_fwd<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    batch: usize,
    seq: usize,
    heads: usize,
    d: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); batch * seq * d];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    let mut scores = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            let pbase = (b * heads + h) * seq * seq;
            for t in 0..seq {
                let qrow = &q[(b * seq + t) * d + off..(b * seq + t) * d + off + dh];
                let mut max = T::neg_infinity();
                for s in 0..=t {
                    let krow = &k[(b * seq + s) * d + off..(b * seq + s) * d + off + dh];
                    let sc = kernels::dot(qrow, krow) * scale;
                    scores[s] = sc;
                    max = max.max(sc);
                }
                let mut sum = T::zero();
                for sc in scores.iter_mut().take(t + 1) {
                    *sc = (*sc - max).exp();
                    sum = sum + *sc;
                }
                let orow = (b * seq + t) * d + off;
                for s in 0..=t {
                    let p = scores[s] / sum;
                    probs[pbase + t * seq + s] = p;
                    let vrow = &v[(b * seq + s) * d + off..(b * seq + s) * d + off + dh];
                    for (o, &vv) in out[orow..orow + dh].iter_mut().zip(vrow) {
                        *o = *o + p * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_bwd<T: Scalar>(
    g: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    batch: usize,
    seq: usize,
    heads: usize,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            let pbase = (b * heads + h) * seq * seq;
            for t in 0..seq {
                let ti = (b * seq + t) * d + off;
                let grow = &g[ti..ti + dh];
                let mut weighted = T::zero();
                for s in 0..=t {
                    let si = (b * seq + s) * d + off;
                    let p = probs[pbase + t * seq + s];
                    dp[s] = kernels::dot(grow, &v[si..si + dh]);
                    weighted = weighted + p * dp[s];
                    for (o, &gv) in dv[si..si + dh].iter_mut().zip(grow) {
                        *o = *o + p * gv;
                    }
                }
                for s in 0..=t {
                    let si = (b * seq + s) * d + off;
                    let p = probs[pbase + t * seq + s];
                    let ds = p * (dp[s] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for c in 0..dh {
                        dq[ti + c] = dq[ti + c] + ds * k[si + c];
                        dk[si + c] = dk[si + c] + ds * q[ti + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

fn kl_rows<T: Scalar>(lp: &[T], lq: &[T], mask: &[bool], v: usize) -> (Vec<f64>, f64) {
    let mut rows = vec![0.0; mask.len()];
    let mut total = 0.0;
    for (r, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let mut kl = T::zero();
        for c in 0..v {
            let i = r * v + c;
            kl = kl + lp[i].exp() * (lp[i] - lq[i]);
        }
        // Gibbs' inequality; clamp rounding noise below zero.
        let kl = kl.as_f64().max(0.0);
        rows[r] = kl;
        total += kl;
    }
    (rows, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let m = t(&[3, 3], &[1., -2., 3., 4.5, 5., 6., 7., 8., -9.]);
        assert_eq!(eye.matmul(&m).unwrap().to_f64_vec(), m.to_f64_vec());
    }

    #[test]
    fn matmul_with_zero_column() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let z = t(&[2, 1], &[0., 0.]);
        let out = a.matmul(&z).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.to_f64_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = t(&[2, 3], &[0.; 6]);
        let b = t(&[2, 3], &[0.; 6]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let s = t(&[3], &[0., 0., 0.]).softmax(0).unwrap().to_f64_vec();
        for p in s {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = t(&[2], &[1000., 0.]).softmax(0).unwrap().to_f64_vec();
        assert!((s[0] - 1.0).abs() < 1e-6 && s[1] >= 0.0 && s[1] < 1e-6);
        assert!(s.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rejects_nan() {
        let err = t(&[2], &[f64::NAN, 0.]).softmax(0).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let p = Tensor::param(Array::from_f64(&[2, 2], &[1., -2., 3., 0.5]).unwrap());
        p.sum().backward().unwrap();
        assert_eq!(p.grad().unwrap().to_f64_vec(), vec![1.0; 4]);
    }

    #[test]
    fn backward_of_half_square_is_identity() {
        let vals = [1., -2., 3., 0.5];
        let p = Tensor::param(Array::from_f64(&[4], &vals).unwrap());
        p.mul(&p).unwrap().sum().scale(0.5).backward().unwrap();
        assert_eq!(p.grad().unwrap().to_f64_vec(), vals.to_vec());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let x = Tensor::param(Array::from_f64(&[1], &[3.0]).unwrap());
        x.add(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().to_f64_vec(), vec![2.0]);
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let x = Tensor::param(Array::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn untracked_inputs_produce_untracked_outputs() {
        let a = t(&[1, 2], &[1., 2.]);
        let b = t(&[2, 1], &[3., 4.]);
        let c = a.matmul(&b).unwrap();
        assert!(!c.requires_grad());
        assert!(matches!(c.sum().backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let table = t(&[3, 2], &[0.; 6]);
        assert!(matches!(Tensor::embedding(&table, &[0, 3]), Err(Error::Input(_))));
    }

    #[test]
    fn kl_of_identical_logits_is_exactly_zero() {
        let logits = Array::from_f64(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 5.0, -3.0]).unwrap();
        let s = Tensor::param(logits.clone());
        let loss = s.kl_div(&logits, &[true, true]).unwrap();
        assert_eq!(loss.item(), 0.0);
        loss.backward().unwrap();
        assert!(s.grad().unwrap().to_f64_vec().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn precision_scope_restores_previous() {
        assert_eq!(default_precision(), Precision::F32);
        {
            let _g = precision_scope(Precision::F64);
            assert_eq!(Array::zeros(&[2]).precision(), Precision::F64);
        }
        assert_eq!(default_precision(), Precision::F32);
    }
}
