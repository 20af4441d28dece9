//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! immutable once recorded; [`Tape::backward`] walks the tape in reverse and
//! returns a [`Gradients`] table, which can be folded into a
//! [`ParameterStore`]. Tapes are cheap to create and are meant to be dropped
//! after each backward pass.
//!
//! All operations work on matrices (`[rows × cols]`; vectors count as one
//! row). Sequences are kept time-major when stacked: row `t * batch + b`.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{gemm, Tensor};

/// Probability floor applied before taking logs of probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    StackRows(Vec<Var>),
    Gather(Var, Rc<[usize]>),
    Sum(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Rc<[usize]>,
        weights: Rc<[f64]>,
        probs: Tensor,
    },
    NllProb(Var, usize),
    AttnScores {
        keys: Var,
        query: Var,
        v: Var,
        act: Vec<f64>,
    },
    AttnContext(Var, Var),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Shared handle to a recorded value.
    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &*n[v.0].value)
    }

    /// A value that does not receive gradients.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that receives gradients (not backed by a parameter).
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records parameter `id` once per tape; later calls return the same var
    /// so gradients from every use accumulate on one node.
    pub fn param(&self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.borrow_mut().insert(id, v);
        v
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (dims(&av), dims(&bv));
        if k != k2 || av.shape().len() > 2 || bv.shape().len() > 2 {
            return Err(dim_err("matmul", &av, &bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_parts(m, n, out), Op::MatMul(a, b), ng))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (av, bv) = (self.value(a), self.value(b));
        if dims(&av) != dims(&bv) {
            return Err(dim_err(op, &av, &bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((Tensor::new(av.shape().to_vec(), data)?, self.needs(&[a, b])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// `a[m×n] + row[1×n]`, broadcasting the row.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let (m, n) = dims(&av);
        if rv.len() != n {
            return Err(dim_err("add_row", &av, &rv));
        }
        let mut out = av.data().to_vec();
        for r in 0..m {
            for (o, &b) in out[r * n..(r + 1) * n].iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let ng = self.needs(&[a, row]);
        Ok(self.push(Tensor::from_parts(m, n, out), Op::AddRow(a, row), ng))
    }

    /// `a[m×n] ⊙ col[m×1]`, scaling each row.
    pub fn mul_col(&self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        let (m, n) = dims(&av);
        if cv.len() != m {
            return Err(dim_err("mul_col", &av, &cv));
        }
        let mut out = av.data().to_vec();
        for r in 0..m {
            let k = cv.data()[r];
            out[r * n..(r + 1) * n].iter_mut().for_each(|o| *o *= k);
        }
        let ng = self.needs(&[a, col]);
        Ok(self.push(Tensor::from_parts(m, n, out), Op::MulCol(a, col), ng))
    }

    fn map(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(&[a]);
        self.push(t, op, ng)
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        self.map(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn one_minus(&self, a: Var) -> Var {
        self.map(a, Op::OneMinus(a), |x| 1.0 - x)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    /// Column-wise concatenation.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let m = vals[0].rows();
        if let Some(bad) = vals.iter().find(|v| v.rows() != m) {
            return Err(dim_err("concat", &vals[0], bad));
        }
        let n: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for v in &vals {
                out.extend_from_slice(v.row_slice(r));
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(
            Tensor::from_parts(m, n, out),
            Op::Concat(parts.to_vec()),
            ng,
        ))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = dims(&av);
        if start >= end || end > n {
            return Err(Error::Bounds { index: end, len: n });
        }
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&av.row_slice(r)[start..end]);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(
            Tensor::from_parts(m, end - start, out),
            Op::Slice(a, start),
            ng,
        ))
    }

    /// Row-wise concatenation (time-major stacking of per-step states).
    pub fn stack_rows(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let n = vals[0].cols();
        if let Some(bad) = vals.iter().find(|v| v.cols() != n) {
            return Err(dim_err("stack_rows", &vals[0], bad));
        }
        let m: usize = vals.iter().map(|v| v.rows()).sum();
        let mut out = Vec::with_capacity(m * n);
        for v in &vals {
            out.extend_from_slice(v.data());
        }
        let ng = self.needs(parts);
        Ok(self.push(
            Tensor::from_parts(m, n, out),
            Op::StackRows(parts.to_vec()),
            ng,
        ))
    }

    /// Selects rows of `table` (embedding lookup, beam reordering).
    pub fn gather(&self, table: Var, rows: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (m, n) = dims(&tv);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Bounds { index: r, len: m });
            }
            out.extend_from_slice(tv.row_slice(r));
        }
        let ng = self.needs(&[table]);
        Ok(self.push(
            Tensor::from_parts(rows.len(), n, out),
            Op::Gather(table, rows.into()),
            ng,
        ))
    }

    /// Sum of all entries, as a `[1×1]` scalar.
    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Softmax of a vector (or of each row of a matrix).
    pub fn softmax(&self, a: Var) -> Result<Var> {
        self.softmax_masked(a, None)
    }

    /// Row-wise softmax restricted to entries whose mask is non-zero; masked
    /// entries come out as exactly 0.
    pub fn softmax_masked(&self, a: Var, mask: Option<&[f64]>) -> Result<Var> {
        let av = self.value(a);
        if !av.all_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let (m, n) = dims(&av);
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(Error::Dimension {
                    op: "softmax mask",
                    lhs: av.shape().to_vec(),
                    rhs: vec![mk.len()],
                });
            }
        }
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = av.row_slice(r);
            let live = |j: usize| mask.is_none_or(|mk| mk[r * n + j] != 0.0);
            let mx = (0..n)
                .filter(|&j| live(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut z = 0.0;
            for j in (0..n).filter(|&j| live(j)) {
                o[j] = (row[j] - mx).exp();
                z += o[j];
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::new(av.shape().to_vec(), out)?, Op::Softmax(a), ng))
    }

    /// `Σ_b w_b · −log softmax(logits_b)[target_b]` as a scalar. Rows with
    /// zero weight (padding) contribute nothing.
    pub fn cross_entropy_logits(
        &self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (m, n) = dims(&lv);
        if targets.len() != m || weights.len() != m {
            return Err(Error::Dimension {
                op: "cross_entropy_logits",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for r in 0..m {
            if weights[r] == 0.0 {
                continue;
            }
            if targets[r] >= n {
                return Err(Error::Bounds {
                    index: targets[r],
                    len: n,
                });
            }
            let row = lv.row_slice(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * n..(r + 1) * n];
            let mut z = 0.0;
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - mx).exp();
                z += *pj;
            }
            p.iter_mut().for_each(|v| *v /= z);
            loss += weights[r] * (z.ln() + mx - row[targets[r]]);
        }
        if !loss.is_finite() {
            return Err(Error::Numeric("cross-entropy is not finite".into()));
        }
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.into(),
                weights: weights.into(),
                probs: Tensor::from_parts(m, n, probs),
            },
            ng,
        ))
    }

    /// `−ln(max(probs[target], 1e-12))` for a probability vector.
    pub fn cross_entropy(&self, probs: Var, target: usize) -> Result<Var> {
        let pv = self.value(probs);
        if target >= pv.len() {
            return Err(Error::Bounds {
                index: target,
                len: pv.len(),
            });
        }
        let p = pv.data()[target].max(PROB_FLOOR);
        let ng = self.needs(&[probs]);
        Ok(self.push(Tensor::scalar(-p.ln()), Op::NllProb(probs, target), ng))
    }

    /// Additive attention energies. `keys` is time-major `[S·B × a]`,
    /// `query` is `[B × a]`, `v` has `a` entries; the result is `[B × S]` with
    /// `e[b,s] = Σ_k v_k · tanh(keys[s·B+b, k] + query[b, k])`.
    pub fn attn_scores(&self, keys: Var, query: Var, v: Var) -> Result<Var> {
        let (kv, qv, vv) = (self.value(keys), self.value(query), self.value(v));
        let (b, a) = dims(&qv);
        let (kr, ka) = dims(&kv);
        if ka != a || kr % b != 0 || vv.len() != a {
            return Err(dim_err("attn_scores", &kv, &qv));
        }
        let s = kr / b;
        let mut act = vec![0.0; kr * a];
        let mut out = vec![0.0; b * s];
        for si in 0..s {
            for bi in 0..b {
                let row = si * b + bi;
                let krow = kv.row_slice(row);
                let qrow = qv.row_slice(bi);
                let u = &mut act[row * a..(row + 1) * a];
                let mut e = 0.0;
                for k in 0..a {
                    u[k] = (krow[k] + qrow[k]).tanh();
                    e += vv.data()[k] * u[k];
                }
                out[bi * s + si] = e;
            }
        }
        let ng = self.needs(&[keys, query, v]);
        Ok(self.push(
            Tensor::from_parts(b, s, out),
            Op::AttnScores {
                keys,
                query,
                v,
                act,
            },
            ng,
        ))
    }

    /// Weighted sum of time-major `values [S·B × d]` with `weights [B × S]`.
    pub fn attn_context(&self, weights: Var, values: Var) -> Result<Var> {
        let (wv, vv) = (self.value(weights), self.value(values));
        let (b, s) = dims(&wv);
        let (vr, d) = dims(&vv);
        if vr != s * b {
            return Err(dim_err("attn_context", &wv, &vv));
        }
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for si in 0..s {
                let w = wv.data()[bi * s + si];
                if w == 0.0 {
                    continue;
                }
                for (oj, &x) in o.iter_mut().zip(vv.row_slice(si * b + bi)) {
                    *oj += w * x;
                }
            }
        }
        let ng = self.needs(&[weights, values]);
        Ok(self.push(
            Tensor::from_parts(b, d, out),
            Op::AttnContext(weights, values),
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if nodes[i].needs_grad {
                propagate(&nodes, i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let params = self
            .params
            .borrow()
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect();
        Ok(Gradients { grads, params })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adds into the gradient slot of `v` (allocating zeros first), if `v`
/// takes gradients at all.
fn acc(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
    f(slot.data_mut());
}

fn propagate(nodes: &[Node], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[i].value;
    let gd = g.data();
    match &nodes[i].op {
        Op::Leaf | Op::Param => {}
        &Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let ((m, k), n) = (dims(av), bv.cols());
            acc(nodes, grads, a, |ga| {
                gemm(m, n, k, gd, false, bv.data(), true, ga, true)
            });
            acc(nodes, grads, b, |gb| {
                gemm(k, m, n, av.data(), true, gd, false, gb, true)
            });
        }
        &Op::Add(a, b) => {
            acc(nodes, grads, a, |ga| add_to(ga, gd));
            acc(nodes, grads, b, |gb| add_to(gb, gd));
        }
        &Op::Sub(a, b) => {
            acc(nodes, grads, a, |ga| add_to(ga, gd));
            acc(nodes, grads, b, |gb| {
                gb.iter_mut().zip(gd).for_each(|(x, y)| *x -= y)
            });
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            acc(nodes, grads, a, |ga| {
                for ((x, &gy), &bb) in ga.iter_mut().zip(gd).zip(bv.data()) {
                    *x += gy * bb;
                }
            });
            acc(nodes, grads, b, |gb| {
                for ((x, &gy), &aa) in gb.iter_mut().zip(gd).zip(av.data()) {
                    *x += gy * aa;
                }
            });
        }
        &Op::AddRow(a, row) => {
            let n = out.cols();
            acc(nodes, grads, a, |ga| add_to(ga, gd));
            acc(nodes, grads, row, |gr| {
                for chunk in gd.chunks_exact(n) {
                    add_to(gr, chunk);
                }
            });
        }
        &Op::MulCol(a, col) => {
            let (av, cv) = (&nodes[a.0].value, &nodes[col.0].value);
            let n = out.cols();
            acc(nodes, grads, a, |ga| {
                for (r, (gar, gr)) in ga.chunks_exact_mut(n).zip(gd.chunks_exact(n)).enumerate() {
                    let k = cv.data()[r];
                    gar.iter_mut().zip(gr).for_each(|(x, y)| *x += k * y);
                }
            });
            acc(nodes, grads, col, |gc| {
                for (r, (ar, gr)) in av
                    .data()
                    .chunks_exact(n)
                    .zip(gd.chunks_exact(n))
                    .enumerate()
                {
                    gc[r] += ar.iter().zip(gr).map(|(x, y)| x * y).sum::<f64>();
                }
            });
        }
        &Op::Scale(a, k) => acc(nodes, grads, a, |ga| {
            ga.iter_mut().zip(gd).for_each(|(x, y)| *x += k * y)
        }),
        &Op::OneMinus(a) => acc(nodes, grads, a, |ga| {
            ga.iter_mut().zip(gd).for_each(|(x, y)| *x -= y)
        }),
        &Op::Sigmoid(a) => acc(nodes, grads, a, |ga| {
            for ((x, &gy), &s) in ga.iter_mut().zip(gd).zip(out.data()) {
                *x += gy * s * (1.0 - s);
            }
        }),
        &Op::Tanh(a) => acc(nodes, grads, a, |ga| {
            for ((x, &gy), &t) in ga.iter_mut().zip(gd).zip(out.data()) {
                *x += gy * (1.0 - t * t);
            }
        }),
        Op::Concat(parts) => {
            let n = out.cols();
            let mut off = 0;
            for &p in parts {
                let w = nodes[p.0].value.cols();
                acc(nodes, grads, p, |gp| {
                    for (gpr, gr) in gp.chunks_exact_mut(w).zip(gd.chunks_exact(n)) {
                        add_to(gpr, &gr[off..off + w]);
                    }
                });
                off += w;
            }
        }
        &Op::Slice(a, start) => {
            let n_in = nodes[a.0].value.cols();
            let w = out.cols();
            acc(nodes, grads, a, |ga| {
                for (gar, gr) in ga.chunks_exact_mut(n_in).zip(gd.chunks_exact(w)) {
                    add_to(&mut gar[start..start + w], gr);
                }
            });
        }
        Op::StackRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p.0].value.len();
                acc(nodes, grads, p, |gp| add_to(gp, &gd[off..off + len]));
                off += len;
            }
        }
        Op::Gather(table, rows) => {
            let n = out.cols();
            acc(nodes, grads, *table, |gt| {
                for (k, &r) in rows.iter().enumerate() {
                    add_to(&mut gt[r * n..(r + 1) * n], &gd[k * n..(k + 1) * n]);
                }
            });
        }
        &Op::Sum(a) => {
            let k = gd[0];
            acc(nodes, grads, a, |ga| ga.iter_mut().for_each(|x| *x += k));
        }
        &Op::Softmax(a) => {
            let n = out.cols();
            acc(nodes, grads, a, |ga| {
                for ((gar, yr), gr) in ga
                    .chunks_exact_mut(n)
                    .zip(out.data().chunks_exact(n))
                    .zip(gd.chunks_exact(n))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((x, &y), &gg) in gar.iter_mut().zip(yr).zip(gr) {
                        *x += y * (gg - dot);
                    }
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
        } => {
            let n = probs.cols();
            let k = gd[0];
            acc(nodes, grads, *logits, |gl| {
                for r in 0..targets.len() {
                    let w = weights[r] * k;
                    if w == 0.0 {
                        continue;
                    }
                    let row = &mut gl[r * n..(r + 1) * n];
                    for (x, &p) in row.iter_mut().zip(probs.row_slice(r)) {
                        *x += w * p;
                    }
                    row[targets[r]] -= w;
                }
            });
        }
        &Op::NllProb(p, t) => {
            let pv = nodes[p.0].value.data()[t];
            let k = gd[0];
            acc(nodes, grads, p, |gp| {
                if pv > PROB_FLOOR {
                    gp[t] -= k / pv;
                }
            });
        }
        Op::AttnScores {
            keys,
            query,
            v,
            act,
        } => {
            let (b, s) = dims(out);
            let vv = &nodes[v.0].value;
            let a = vv.len();
            // d e[b,s] / d pre[s·B+b, k] = v_k (1 − u²)
            let mut dpre = vec![0.0; s * b * a];
            for si in 0..s {
                for bi in 0..b {
                    let ge = gd[bi * s + si];
                    if ge == 0.0 {
                        continue;
                    }
                    let row = si * b + bi;
                    let u = &act[row * a..(row + 1) * a];
                    let d = &mut dpre[row * a..(row + 1) * a];
                    for k in 0..a {
                        d[k] = ge * vv.data()[k] * (1.0 - u[k] * u[k]);
                    }
                }
            }
            acc(nodes, grads, *keys, |gk| add_to(gk, &dpre));
            acc(nodes, grads, *query, |gq| {
                for (row, d) in dpre.chunks_exact(a).enumerate() {
                    add_to(&mut gq[(row % b) * a..(row % b + 1) * a], d);
                }
            });
            acc(nodes, grads, *v, |gv| {
                for si in 0..s {
                    for bi in 0..b {
                        let ge = gd[bi * s + si];
                        let row = si * b + bi;
                        for (x, &u) in gv.iter_mut().zip(&act[row * a..(row + 1) * a]) {
                            *x += ge * u;
                        }
                    }
                }
            });
        }
        &Op::AttnContext(w, vals) => {
            let (wv, vv) = (&nodes[w.0].value, &nodes[vals.0].value);
            let (b, s) = dims(wv);
            let d = vv.cols();
            acc(nodes, grads, w, |gw| {
                for bi in 0..b {
                    let g = &gd[bi * d..(bi + 1) * d];
                    for si in 0..s {
                        gw[bi * s + si] += vv
                            .row_slice(si * b + bi)
                            .iter()
                            .zip(g)
                            .map(|(x, y)| x * y)
                            .sum::<f64>();
                    }
                }
            });
            acc(nodes, grads, vals, |gv| {
                for bi in 0..b {
                    let g = &gd[bi * d..(bi + 1) * d];
                    for si in 0..s {
                        let k = wv.data()[bi * s + si];
                        if k == 0.0 {
                            continue;
                        }
                        let row = si * b + bi;
                        gv[row * d..(row + 1) * d]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(x, y)| *x += k * y);
                    }
                }
            });
        }
    }
}

fn add_to(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` is on a differentiable path.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.get(v))
    }

    /// Adds every parameter gradient into the store. Parameters used in the
    /// forward pass but unreachable from the loss receive explicit zeros.
    pub fn accumulate_into(&self, store: &mut ParameterStore) {
        for &(id, v) in &self.params {
            match self.get(v) {
                Some(g) => store.accumulate_grad(id, g),
                None => {
                    let z = Tensor::zeros(store.value(id).shape());
                    store.accumulate_grad(id, &z);
                }
            }
        }
    }
}
