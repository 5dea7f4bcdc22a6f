//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Every forward op appends one node holding its output; [`Graph::backward`]
//! walks the tape in reverse and returns gradients for every node and every
//! parameter that was read.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{dot, order_free_sum, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Gather { table: Var, indices: Vec<usize> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    MeanRows(Var),
    MaxRows { x: Var, argmax: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    SoftmaxXent { logits: Var, targets: Tensor, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].as_ref()
    }

    /// Adds the parameter gradients into `acc` (one tensor per parameter).
    pub fn accumulate_into(&self, acc: &mut [Tensor]) {
        for (a, g) in acc.iter_mut().zip(&self.params) {
            if let Some(g) = g {
                a.add_assign(g);
            }
        }
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, param_vars: vec![None; params.len()], nodes: Vec::with_capacity(128) }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param(id))
    }

    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Tensor::zeros(indices.len(), t.cols());
        for (r, &i) in indices.iter().enumerate() {
            if i >= t.rows() {
                return Err(Error::IndexOutOfRange { index: i, len: t.rows() });
            }
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        Ok(self.push(out, Op::Gather { table, indices: indices.to_vec() }))
    }

    fn check(&self, ok: bool, what: &str, a: Var, b: Var) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(self.shape(a).1 == self.shape(b).0, "matmul", a, b)?;
        let v = self.value(a).matmul(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Like [`Graph::matmul`] but summing over the inner dimension in an
    /// order-free way (used where that dimension indexes slate items).
    pub fn matmul_order_free(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(self.shape(a).1 == self.shape(b).0, "matmul", a, b)?;
        let v = self.value(a).matmul_order_free(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(self.shape(a).1 == self.shape(b).1, "matmul_t", a, b)?;
        let v = self.value(a).matmul_t(self.value(b));
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(self.shape(a) == self.shape(b), "add", a, b)?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a `1×c` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        self.check(self.shape(row) == (1, ca), "add_row", a, row)?;
        let mut v = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..ra {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(self.shape(a) == self.shape(b), "mul", a, b)?;
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `scale·x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let mut v = self.value(x).clone();
        for e in v.data_mut() {
            *e = scale * *e + shift;
        }
        self.push(v, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let mut v = self.value(x).clone();
        for e in v.data_mut() {
            *e = f(*e);
        }
        v
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, |e| 1.0 / (1.0 + (-e).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |e| e.max(0.0));
        self.push(v, Op::Relu(x))
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked
    /// to exactly zero.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let limit = if causal { (i + 1).min(c) } else { c };
            let row = &xv.row(i)[..limit];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = out.row_mut(i);
            for j in 0..limit {
                orow[j] = (row[j] - max).exp();
            }
            let mut terms = orow[..limit].to_vec();
            let sum = order_free_sum(&mut terms);
            for o in &mut orow[..limit] {
                *o /= sum;
            }
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        self.check(self.shape(gain) == (1, c), "layer_norm gain", x, gain)?;
        self.check(self.shape(bias) == (1, c), "layer_norm bias", x, bias)?;
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Tensor::zeros(r, c);
        let mut out = Tensor::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(i);
            for j in 0..c {
                xh[j] = (row[j] - mean) * inv;
            }
            let o = out.row_mut(i);
            for j in 0..c {
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                out.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(Error::Shape("concat_rows: column counts differ".into()));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            rows += self.shape(p).0;
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(Error::Shape(format!("slice_cols {start}+{len} > {c}")));
        }
        let mut out = Tensor::zeros(r, len);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&self.value(x).row(i)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > r {
            return Err(Error::Shape(format!("slice_rows {start}+{len} > {r}")));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::from_vec(len, c, data)?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r == 0 {
            return Err(Error::Shape("mean over an empty matrix".into()));
        }
        let xv = self.value(x);
        let mut column = vec![0.0; r];
        let mut out = vec![0.0; c];
        for (j, o) in out.iter_mut().enumerate() {
            for (i, t) in column.iter_mut().enumerate() {
                *t = xv.get(i, j);
            }
            *o = order_free_sum(&mut column) / r as f64;
        }
        Ok(self.push(Tensor::row_vector(out), Op::MeanRows(x)))
    }

    /// Column-wise maximum; ties resolve to the first row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r == 0 {
            return Err(Error::Shape("max over an empty matrix".into()));
        }
        let xv = self.value(x);
        let mut out = xv.row(0).to_vec();
        let mut argmax = vec![0; c];
        for i in 1..r {
            for (j, v) in xv.row(i).iter().enumerate() {
                if *v > out[j] {
                    out[j] = *v;
                    argmax[j] = i;
                }
            }
        }
        Ok(self.push(Tensor::row_vector(out), Op::MaxRows { x, argmax }))
    }

    /// Inverted dropout. A rate of zero returns `x` unchanged.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let mut v = self.value(x).clone();
        for (e, m) in v.data_mut().iter_mut().zip(&mask) {
            *e *= m;
        }
        self.push(v, Op::Dropout { x, mask })
    }

    /// `-Σ_rows Σ_j y_ij · log softmax(logits)_ij` as a `1×1` node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::Shape(format!(
                "cross-entropy: logits {:?} vs targets {:?}",
                self.shape(logits),
                targets.shape()
            )));
        }
        let lv = self.value(logits);
        let (r, c) = lv.shape();
        let mut probs = Tensor::zeros(r, c);
        let mut loss = 0.0;
        for i in 0..r {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let p = probs.row_mut(i);
            for j in 0..c {
                let logp = row[j] - lse;
                p[j] = logp.exp();
                let y = targets.get(i, j);
                if y != 0.0 {
                    loss -= y * logp;
                }
            }
        }
        Ok(self.push(Tensor::filled(1, 1, loss), Op::SoftmaxXent { logits, targets, probs }))
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(Tensor::filled(1, 1, 1.0));
        let mut param_grads: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();

        for idx in (0..=output.0).rev() {
            let Some(g_keep) = grads[idx].take() else { continue };
            let g = g_keep.clone();
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => accumulate(&mut param_grads[id.0], g.clone()),
                Op::Gather { table, indices } => {
                    let (tr, tc) = self.shape(*table);
                    let mut gt = Tensor::zeros(tr, tc);
                    for (r, &i) in indices.iter().enumerate() {
                        for (a, b) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads[table.0], gt);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (s, v) in gr.iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads[row.0], Tensor::row_vector(gr));
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let mut ga = g.clone();
                    for (x, y) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *x *= y;
                    }
                    let mut gb = g;
                    for (x, y) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *x *= y;
                    }
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Affine { x, scale } => {
                    let mut gx = g;
                    gx.scale_assign(*scale);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Tanh(x) => {
                    let mut gx = g;
                    for (e, y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *e *= 1.0 - y * y;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    for (e, y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *e *= y * (1.0 - y);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    for (e, v) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if *v <= 0.0 {
                            *e = 0.0;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut gx = Tensor::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let s = dot(yr, gr);
                        for (o, (yv, gv)) in gx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - s);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let (r, c) = xhat.shape();
                    let gv = self.value(*gain).data();
                    let mut ggain = vec![0.0; c];
                    let mut gbias = vec![0.0; c];
                    let mut gx = Tensor::zeros(r, c);
                    for i in 0..r {
                        let gr = g.row(i);
                        let xh = xhat.row(i);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            ggain[j] += gr[j] * xh[j];
                            gbias[j] += gr[j];
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        let out = gx.row_mut(i);
                        for j in 0..c {
                            let d = gr[j] * gv[j];
                            out[j] = inv_std[i] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(&mut grads[gain.0], Tensor::row_vector(ggain));
                    accumulate(&mut grads[bias.0], Tensor::row_vector(gbias));
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (pr, pc) = self.shape(*p);
                        let mut gp = Tensor::zeros(pr, pc);
                        for i in 0..pr {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + pc]);
                        }
                        off += pc;
                        accumulate(&mut grads[p.0], gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (pr, pc) = self.shape(*p);
                        let data = g.data()[off * pc..(off + pr) * pc].to_vec();
                        off += pr;
                        accumulate(&mut grads[p.0], Tensor::from_vec(pr, pc, data).expect("sized"));
                    }
                }
                Op::SliceCols { x, start } => {
                    let (xr, xc) = self.shape(*x);
                    let mut gx = Tensor::zeros(xr, xc);
                    for i in 0..xr {
                        gx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::SliceRows { x, start } => {
                    let (xr, xc) = self.shape(*x);
                    let mut gx = Tensor::zeros(xr, xc);
                    gx.data_mut()[start * xc..(start + g.rows()) * xc].copy_from_slice(g.data());
                    accumulate(&mut grads[x.0], gx);
                }
                Op::MeanRows(x) => {
                    let (xr, xc) = self.shape(*x);
                    let mut gx = Tensor::zeros(xr, xc);
                    let scale = 1.0 / xr as f64;
                    for i in 0..xr {
                        for (o, v) in gx.row_mut(i).iter_mut().zip(g.data()) {
                            *o = v * scale;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::MaxRows { x, argmax } => {
                    let (xr, xc) = self.shape(*x);
                    let mut gx = Tensor::zeros(xr, xc);
                    for (j, &i) in argmax.iter().enumerate() {
                        gx.set(i, j, g.get(0, j));
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Dropout { x, mask } => {
                    let mut gx = g;
                    for (e, m) in gx.data_mut().iter_mut().zip(mask) {
                        *e *= m;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::SoftmaxXent { logits, targets, probs } => {
                    let scale = g.get(0, 0);
                    let (r, c) = probs.shape();
                    let mut gl = Tensor::zeros(r, c);
                    for i in 0..r {
                        let ysum: f64 = targets.row(i).iter().sum();
                        let (p, y) = (probs.row(i), targets.row(i));
                        for (j, o) in gl.row_mut(i).iter_mut().enumerate() {
                            *o = scale * (p[j] * ysum - y[j]);
                        }
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
            }
            grads[idx] = Some(g_keep);
        }
        Gradients { nodes: grads, params: param_grads }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}
