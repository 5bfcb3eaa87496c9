//! Define-by-run computation tape.
//!
//! Every operation evaluates eagerly, appends a node holding its value and
//! the references to its inputs, and returns a [`Var`] handle. Nodes are
//! stored in creation order, so the tape is always topologically sorted and
//! the backward pass is a single reverse sweep.

use std::rc::Rc;

use crate::error::{shape_err, NumError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// Per-group product of row blocks; `trans_b` multiplies by the
    /// transpose of each block of `b`.
    GroupMatMul {
        a: Var,
        b: Var,
        groups: usize,
        trans_b: bool,
    },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    MaskedSoftmax(Var),
    GatherRows(Var, Rc<[usize]>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of a computation for reverse-mode differentiation.
///
/// A tape is single-threaded. Call [`Tape::reset`] to reuse its storage for
/// a new computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Lower-triangular mask (`true` = may attend) of size `n × n`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = true;
        }
    }
    m
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(NumError::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, a.shape(), b.shape());
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(g.data_mut());
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
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

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        check_finite(op_name, &value)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf)
    }

    /// Places a trainable parameter on the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push("param", store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.require_matrix("matmul")?;
        let (k2, n) = tb.require_matrix("matmul")?;
        if k != k2 {
            return shape_err("matmul", ta.shape(), tb.shape());
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    /// Block-wise product. `a` is `[groups*m, k]`. With `trans_b`, `b` is
    /// `[groups*n, k]` and block `g` of the result is `a_g · b_gᵀ`
    /// (`[groups*m, n]`); otherwise `b` is `[groups*k, n]` and the block is
    /// `a_g · b_g`.
    pub fn group_matmul(&mut self, a: Var, b: Var, groups: usize, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, ka) = ta.require_matrix("group_matmul")?;
        let (rb, cb) = tb.require_matrix("group_matmul")?;
        if groups == 0 || ra % groups != 0 || rb % groups != 0 {
            return shape_err("group_matmul", ta.shape(), tb.shape());
        }
        let m = ra / groups;
        let out = if trans_b {
            let n = rb / groups;
            if ka != cb {
                return shape_err("group_matmul", ta.shape(), tb.shape());
            }
            let mut out = vec![0.0; ra * n];
            for g in 0..groups {
                for i in 0..m {
                    let arow = &ta.data()[(g * m + i) * ka..(g * m + i + 1) * ka];
                    for j in 0..n {
                        let brow = &tb.data()[(g * n + j) * cb..(g * n + j + 1) * cb];
                        out[(g * m + i) * n + j] = dot(arow, brow);
                    }
                }
            }
            Tensor::from_parts(vec![ra, n], out)
        } else {
            let k = rb / groups;
            if ka != k {
                return shape_err("group_matmul", ta.shape(), tb.shape());
            }
            let mut out = vec![0.0; ra * cb];
            for g in 0..groups {
                let ablk = &ta.data()[g * m * k..(g + 1) * m * k];
                let bblk = &tb.data()[g * k * cb..(g + 1) * k * cb];
                let prod = matmul_raw(ablk, bblk, m, k, cb);
                out[g * m * cb..(g + 1) * m * cb].copy_from_slice(&prod);
            }
            Tensor::from_parts(vec![ra, cb], out)
        };
        self.push("group_matmul", out, Op::GroupMatMul { a, b, groups, trans_b })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.require_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        self.push("transpose", Tensor::from_parts(vec![n, m], out), Op::Transpose(a))
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(name, out, op)
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| f(*x)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(name, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix. This is
    /// the only broadcasting the tape supports.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (m, n) = ta.require_matrix("add_bias")?;
        if tb.numel() != n || tb.shape().len() > 1 {
            return shape_err("add_bias", ta.shape(), tb.shape());
        }
        let mut out = ta.data().to_vec();
        for r in 0..m {
            for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push("add_bias", Tensor::from_parts(vec![m, n], out), Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(NumError::Domain {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|v| **v <= 0.0) {
            return Err(NumError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.map("log", a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Row-wise softmax where only entries with `mask == true` take part.
    /// Masked entries get exactly zero weight. Every row needs at least one
    /// allowed entry.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.require_matrix("masked_softmax")?;
        if mask.len() != m * n {
            return shape_err("masked_softmax", t.shape(), &[mask.len()]);
        }
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &t.data()[r * n..(r + 1) * n];
            let mrow = &mask[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &k)| k)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(NumError::Domain {
                    op: "masked_softmax",
                    detail: format!("row {r} has no unmasked entries"),
                });
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut z = 0.0;
            for j in 0..n {
                if mrow[j] {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        self.push(
            "masked_softmax",
            Tensor::from_parts(vec![m, n], out),
            Op::MaskedSoftmax(a),
        )
    }

    /// Softmax with a lower-triangular mask over a square score matrix.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).require_matrix("causal_softmax")?;
        if m != n {
            return shape_err("causal_softmax", &[m, n], &[n, n]);
        }
        self.masked_softmax(a, &causal_mask(n))
    }

    /// Embedding lookup: row `indices[i]` of `table` becomes row `i`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = t.require_matrix("gather_rows")?;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(NumError::Domain {
                    op: "gather_rows",
                    detail: format!("index {i} out of range for {v} rows"),
                });
            }
            out.extend_from_slice(t.row(i));
        }
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![indices.len(), d], out),
            Op::GatherRows(table, indices.into()),
        )
    }

    /// Layer normalization over each row, followed by the affine map
    /// `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = tx.require_matrix("layer_norm")?;
        if tg.numel() != n || tb.numel() != n {
            return shape_err("layer_norm", tx.shape(), tg.shape());
        }
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = tx.row(r);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mu) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        self.push(
            "layer_norm",
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.require_matrix("slice_cols")?;
        if start + len > n {
            return shape_err("slice_cols", t.shape(), &[start, len]);
        }
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(
            "slice_cols",
            Tensor::from_parts(vec![m, len], out),
            Op::SliceCols(a, start),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return shape_err("concat_cols", &[], &[]);
        };
        let m = self.value(*first).require_matrix("concat_cols")?.0;
        let mut total = 0;
        for p in parts {
            let (r, c) = self.value(*p).require_matrix("concat_cols")?;
            if r != m {
                return shape_err("concat_cols", &[m], &[r]);
            }
            total += c;
        }
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return shape_err("concat_rows", &[], &[]);
        };
        let n = self.value(*first).require_matrix("concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (r, c) = self.value(*p).require_matrix("concat_rows")?;
            if c != n {
                return shape_err("concat_rows", &[n], &[c]);
            }
            rows += r;
            out.extend_from_slice(self.value(*p).data());
        }
        self.push(
            "concat_rows",
            Tensor::from_parts(vec![rows, n], out),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    /// Runs the backward pass from a scalar `loss` and returns the gradient
    /// of every parameter in `store`.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(NumError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        let mut param_grads: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !g.all_finite() {
                return Err(NumError::NonFinite { op: "backward" });
            }
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads, &mut param_grads)?;
        }
        Ok(Gradients::new(param_grads))
    }

    /// Loss value together with the parameter gradients.
    pub fn forward_backward(&self, loss: Var, store: &ParamStore) -> Result<(f64, Gradients)> {
        let value = self.scalar(loss)?;
        let grads = self.backward(loss, store)?;
        Ok((value, grads))
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        param_grads: &mut [Tensor],
    ) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let pg = &mut param_grads[id.index()];
                if pg.shape() != g.shape() {
                    return shape_err("backward(param)", pg.shape(), g.shape());
                }
                for (p, v) in pg.data_mut().iter_mut().zip(gd) {
                    *p += v;
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                accumulate(&mut grads[a.0], ta.shape(), |da| {
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for kk in 0..k {
                            da[i * k + kk] += dot(grow, &tb.data()[kk * n..(kk + 1) * n]);
                        }
                    }
                });
                accumulate(&mut grads[b.0], tb.shape(), |db| {
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let av = ta.data()[i * k + kk];
                            if av == 0.0 {
                                continue;
                            }
                            let drow = &mut db[kk * n..(kk + 1) * n];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            Op::GroupMatMul { a, b, groups, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ra, ka) = (ta.shape()[0], ta.shape()[1]);
                let (rb, cb) = (tb.shape()[0], tb.shape()[1]);
                let m = ra / groups;
                let (ad, bd) = (ta.data(), tb.data());
                if *trans_b {
                    // out[g*m+i, j] = Σ_k a[g*m+i, k] b[g*n+j, k]
                    let n = rb / groups;
                    let mut da = vec![0.0; ra * ka];
                    let mut db = vec![0.0; rb * cb];
                    for gi in 0..*groups {
                        for i in 0..m {
                            let ar = (gi * m + i) * ka;
                            for j in 0..n {
                                let gv = gd[(gi * m + i) * n + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                let br = (gi * n + j) * cb;
                                for kk in 0..ka {
                                    da[ar + kk] += gv * bd[br + kk];
                                    db[br + kk] += gv * ad[ar + kk];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], ta.shape(), |s| add_into(s, &da));
                    accumulate(&mut grads[b.0], tb.shape(), |s| add_into(s, &db));
                } else {
                    // out[g*m+i, j] = Σ_k a[g*m+i, k] b[g*k+k', j]
                    let k = rb / groups;
                    let mut da = vec![0.0; ra * ka];
                    let mut db = vec![0.0; rb * cb];
                    for gi in 0..*groups {
                        for i in 0..m {
                            let row = gi * m + i;
                            let grow = &gd[row * cb..(row + 1) * cb];
                            for kk in 0..k {
                                let br = (gi * k + kk) * cb;
                                da[row * ka + kk] += dot(grow, &bd[br..br + cb]);
                                let av = ad[row * ka + kk];
                                for (d, gv) in db[br..br + cb].iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], ta.shape(), |s| add_into(s, &da));
                    accumulate(&mut grads[b.0], tb.shape(), |s| add_into(s, &db));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (g.shape()[1], g.shape()[0]);
                accumulate(&mut grads[a.0], &[m, n], |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += gd[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                let shape = self.shape_of(*a);
                accumulate(&mut grads[a.0], &shape, |d| add_into(d, gd));
                accumulate(&mut grads[b.0], &shape, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                let shape = self.shape_of(*a);
                accumulate(&mut grads[a.0], &shape, |d| add_into(d, gd));
                accumulate(&mut grads[b.0], &shape, |d| {
                    for (x, v) in d.iter_mut().zip(gd) {
                        *x -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                accumulate(&mut grads[a.0], ta.shape(), |d| {
                    for ((x, v), bv) in d.iter_mut().zip(gd).zip(tb.data()) {
                        *x += v * bv;
                    }
                });
                accumulate(&mut grads[b.0], tb.shape(), |d| {
                    for ((x, v), av) in d.iter_mut().zip(gd).zip(ta.data()) {
                        *x += v * av;
                    }
                });
            }
            Op::AddBias(a, bias) => {
                let shape = self.shape_of(*a);
                let n = shape[1];
                accumulate(&mut grads[a.0], &shape, |d| add_into(d, gd));
                let bshape = self.shape_of(*bias);
                accumulate(&mut grads[bias.0], &bshape, |d| {
                    for row in gd.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(a, c) => {
                let shape = self.shape_of(*a);
                accumulate(&mut grads[a.0], &shape, |d| {
                    for (x, v) in d.iter_mut().zip(gd) {
                        *x += v * c;
                    }
                });
            }
            Op::AddScalar(a) => {
                let shape = self.shape_of(*a);
                accumulate(&mut grads[a.0], &shape, |d| add_into(d, gd));
            }
            Op::Sum(a) => {
                let shape = self.shape_of(*a);
                let gv = gd[0];
                accumulate(&mut grads[a.0], &shape, |d| {
                    for x in d.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::Mean(a) => {
                let shape = self.shape_of(*a);
                let n: usize = shape.iter().product();
                let gv = gd[0] / n as f64;
                accumulate(&mut grads[a.0], &shape, |d| {
                    for x in d.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                accumulate(&mut grads[a.0], node.value.shape(), |d| {
                    for ((x, v), yv) in d.iter_mut().zip(gd).zip(y) {
                        *x += v * yv;
                    }
                });
            }
            Op::Log(a) => {
                let ta = self.value(*a);
                accumulate(&mut grads[a.0], ta.shape(), |d| {
                    for ((x, v), av) in d.iter_mut().zip(gd).zip(ta.data()) {
                        *x += v / av;
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                accumulate(&mut grads[a.0], node.value.shape(), |d| {
                    for ((x, v), yv) in d.iter_mut().zip(gd).zip(y) {
                        *x += v * (1.0 - yv * yv);
                    }
                });
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                accumulate(&mut grads[a.0], ta.shape(), |d| {
                    for ((x, v), av) in d.iter_mut().zip(gd).zip(ta.data()) {
                        if *av > 0.0 {
                            *x += v;
                        }
                    }
                });
            }
            Op::MaskedSoftmax(a) => {
                let y = &node.value;
                let (m, n) = (y.shape()[0], y.shape()[1]);
                accumulate(&mut grads[a.0], y.shape(), |d| {
                    for r in 0..m {
                        let yr = &y.data()[r * n..(r + 1) * n];
                        let gr = &gd[r * n..(r + 1) * n];
                        let s = dot(yr, gr);
                        for j in 0..n {
                            d[r * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::GatherRows(table, indices) => {
                let shape = self.shape_of(*table);
                let dcols = shape[1];
                accumulate(&mut grads[table.0], &shape, |d| {
                    for (i, &row) in indices.iter().enumerate() {
                        add_into(&mut d[row * dcols..(row + 1) * dcols], &gd[i * dcols..(i + 1) * dcols]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gamma);
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..m {
                    let grow = &gd[r * n..(r + 1) * n];
                    let hrow = &xhat[r * n..(r + 1) * n];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..n {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                        dxhat[j] = grow[j] * tg.data()[j];
                        mean_d += dxhat[j];
                        mean_dh += dxhat[j] * hrow[j];
                    }
                    mean_d /= n as f64;
                    mean_dh /= n as f64;
                    for j in 0..n {
                        dx[r * n + j] = rstd[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                    }
                }
                accumulate(&mut grads[x.0], &[m, n], |d| add_into(d, &dx));
                let gs = self.shape_of(*gamma);
                accumulate(&mut grads[gamma.0], &gs, |d| add_into(d, &dgamma));
                let bs = self.shape_of(*beta);
                accumulate(&mut grads[beta.0], &bs, |d| add_into(d, &dbeta));
            }
            Op::SliceCols(a, start) => {
                let shape = self.shape_of(*a);
                let (m, n) = (shape[0], shape[1]);
                let len = g.shape()[1];
                accumulate(&mut grads[a.0], &shape, |d| {
                    for r in 0..m {
                        add_into(&mut d[r * n + start..r * n + start + len], &gd[r * len..(r + 1) * len]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = g.shape()[1];
                let m = g.shape()[0];
                let mut offset = 0;
                for p in parts {
                    let shape = self.shape_of(*p);
                    let c = shape[1];
                    accumulate(&mut grads[p.0], &shape, |d| {
                        for r in 0..m {
                            add_into(
                                &mut d[r * c..(r + 1) * c],
                                &gd[r * total + offset..r * total + offset + c],
                            );
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let shape = self.shape_of(*p);
                    let len: usize = shape.iter().product();
                    accumulate(&mut grads[p.0], &shape, |d| add_into(d, &gd[offset..offset + len]));
                    offset += len;
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(store: &mut ParamStore, name: &str, v: f64) -> ParamId {
        store.add(name, Tensor::scalar(v))
    }

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let x = scalar_param(&mut store, "x", 3.0);
        let mut tape = Tape::new();
        let xv = tape.param(&store, x).unwrap();
        let y = tape.mul(xv, xv).unwrap();
        let (loss, grads) = tape.forward_backward(y, &store).unwrap();
        assert_eq!(loss, 9.0);
        assert_eq!(grads.get(x).item().unwrap(), 6.0);
    }

    #[test]
    fn product_rule() {
        let mut store = ParamStore::new();
        let x = scalar_param(&mut store, "x", 2.0);
        let y = scalar_param(&mut store, "y", 5.0);
        let mut tape = Tape::new();
        let (xv, yv) = (tape.param(&store, x).unwrap(), tape.param(&store, y).unwrap());
        let z = tape.mul(xv, yv).unwrap();
        let (loss, grads) = tape.forward_backward(z, &store).unwrap();
        assert_eq!(loss, 10.0);
        assert_eq!(grads.get(x).item().unwrap(), 5.0);
        assert_eq!(grads.get(y).item().unwrap(), 2.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![1.0, 2.0]).unwrap());
        let mut tape = Tape::new();
        let v = tape.param(&store, w).unwrap();
        assert!(matches!(tape.backward(v, &store), Err(NumError::NonScalarLoss(_))));
    }

    #[test]
    fn overflow_surfaces_as_error() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(1000.0)).unwrap();
        assert!(matches!(tape.exp(c), Err(NumError::NonFinite { op: "exp" })));
    }

    #[test]
    fn log_domain() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 0.0]).unwrap()).unwrap();
        assert!(matches!(tape.log(c), Err(NumError::Domain { .. })));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let s = tape
            .constant(Tensor::matrix(3, 3, vec![0.3, 9.0, -2.0, 1.0, 0.5, 4.0, 0.1, 0.2, 0.3]).unwrap())
            .unwrap();
        let p = tape.causal_softmax(s).unwrap();
        let v = tape.value(p);
        for i in 0..3 {
            for j in 0..3 {
                if j > i {
                    assert_eq!(v.data()[i * 3 + j], 0.0);
                }
            }
            let row: f64 = v.row(i).iter().sum();
            assert!((row - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(NumError::Shape { .. })));
        let c = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(tape.add(a, c), Err(NumError::Shape { .. })));
    }

    #[test]
    fn tape_is_reusable_after_reset() {
        let mut store = ParamStore::new();
        let x = scalar_param(&mut store, "x", 3.0);
        let mut tape = Tape::new();
        for _ in 0..2 {
            tape.reset();
            let xv = tape.param(&store, x).unwrap();
            let y = tape.mul(xv, xv).unwrap();
            let (_, g) = tape.forward_backward(y, &store).unwrap();
            assert_eq!(g.get(x).item().unwrap(), 6.0);
            assert_eq!(tape.len(), 2);
        }
    }

    #[test]
    fn unused_params_get_zero_gradients() {
        let mut store = ParamStore::new();
        let x = scalar_param(&mut store, "x", 3.0);
        let w = store.add("w", Tensor::zeros(&[2, 2]));
        let mut tape = Tape::new();
        let xv = tape.param(&store, x).unwrap();
        let y = tape.scale(xv, 2.0).unwrap();
        let g = tape.backward(y, &store).unwrap();
        assert_eq!(g.get(w).shape(), &[2, 2]);
        assert!(g.get(w).data().iter().all(|v| *v == 0.0));
    }
}
