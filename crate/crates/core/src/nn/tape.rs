//! Reverse-mode differentiation over vector-valued operations.
//!
//! A [`Tape`] evaluates every operation eagerly and records it. Parameters are
//! read from a borrowed [`ParamStore`] and never copied onto the tape, so one
//! tape per training example is cheap to build and throw away. Decoding uses
//! the same tape operations, which keeps training and inference arithmetic
//! bit-identical.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::tensor::{affine_kernel, log_softmax_kernel, sigmoid, softplus};
use crate::nn::{Gradients, ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Embed {
        table: ParamId,
        row: usize,
    },
    Affine {
        w: ParamId,
        x: Var,
        b: Option<ParamId>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar {
        v: Var,
        s: Var,
    },
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Concat(Vec<Var>),
    Slice {
        src: Var,
        start: usize,
    },
    LogSoftmax {
        src: Var,
        mask: Option<Arc<[bool]>>,
    },
    Softmax(Var),
    Pick {
        src: Var,
        index: usize,
    },
    Sum(Vec<Var>),
    Dot(Var, Var),
    WeightedSum {
        weights: Var,
        items: Vec<Var>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
    needs_grad: bool,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, left: usize, right: usize) -> Error {
    Error::Dimension {
        op,
        left: vec![left],
        right: vec![right],
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.store.get(id).data(),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn dim(&self, v: Var) -> usize {
        self.value(v).len()
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, data: Vec<f64>) -> Var {
        self.push(Op::Constant, data, false)
    }

    /// A whole parameter tensor as a flat vector.
    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Op::Param(id), Vec::new(), true)
    }

    /// One row of a parameter matrix.
    pub fn embed(&mut self, table: ParamId, row: usize) -> Result<Var> {
        let t = self.store.get(table);
        if row >= t.rows() {
            return Err(Error::invalid(format!(
                "row {row} out of range for `{}` with {} rows",
                self.store.name(table),
                t.rows()
            )));
        }
        let value = t.row(row).to_vec();
        Ok(self.push(Op::Embed { table, row }, value, true))
    }

    /// `W x + b` with `W` and `b` taken from the parameter store.
    pub fn affine(&mut self, w: ParamId, x: Var, b: Option<ParamId>) -> Result<Var> {
        let wt = self.store.get(w);
        let xv = self.value(x);
        if wt.shape().len() != 2 || wt.cols() != xv.len() {
            return Err(Error::Dimension {
                op: "affine",
                left: wt.shape().to_vec(),
                right: vec![xv.len()],
            });
        }
        let bias = match b {
            Some(b) => {
                let bt = self.store.get(b);
                if bt.len() != wt.rows() {
                    return Err(Error::Dimension {
                        op: "affine",
                        left: wt.shape().to_vec(),
                        right: bt.shape().to_vec(),
                    });
                }
                Some(bt.data())
            }
            None => None,
        };
        let value = affine_kernel(wt.data(), wt.cols(), xv, bias);
        Ok(self.push(Op::Affine { w, x, b }, value, true))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(mismatch("add", av.len(), bv.len()));
        }
        let value = av.iter().zip(bv).map(|(x, y)| x + y).collect();
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(mismatch("mul", av.len(), bv.len()));
        }
        let value = av.iter().zip(bv).map(|(x, y)| x * y).collect();
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, g))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * factor).collect();
        let g = self.grad_of(&[a]);
        self.push(Op::Scale(a, factor), value, g)
    }

    /// Vector times a one-element node.
    pub fn mul_scalar(&mut self, v: Var, s: Var) -> Result<Var> {
        if self.dim(s) != 1 {
            return Err(mismatch("mul_scalar", 1, self.dim(s)));
        }
        let sv = self.scalar(s);
        let value = self.value(v).iter().map(|x| x * sv).collect();
        let g = self.grad_of(&[v, s]);
        Ok(self.push(Op::MulScalar { v, s }, value, g))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let g = self.grad_of(&[a]);
        self.push(Op::Sigmoid(a), value, g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.tanh()).collect();
        let g = self.grad_of(&[a]);
        self.push(Op::Tanh(a), value, g)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| softplus(x)).collect();
        let g = self.grad_of(&[a]);
        self.push(Op::Softplus(a), value, g)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut value = Vec::with_capacity(parts.iter().map(|&p| self.dim(p)).sum());
        for &p in parts {
            value.extend_from_slice(self.value(p));
        }
        let g = self.grad_of(parts);
        self.push(Op::Concat(parts.to_vec()), value, g)
    }

    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let sv = self.value(src);
        if start + len > sv.len() {
            return Err(mismatch("slice", start + len, sv.len()));
        }
        let value = sv[start..start + len].to_vec();
        let g = self.grad_of(&[src]);
        Ok(self.push(Op::Slice { src, start }, value, g))
    }

    /// Log-softmax restricted to unmasked entries (`mask[i] == true` removes
    /// entry `i`, which then holds `-inf`).
    pub fn log_softmax(&mut self, src: Var, mask: Option<Arc<[bool]>>) -> Result<Var> {
        let sv = self.value(src);
        if sv.is_empty() {
            return Err(Error::Empty("log_softmax"));
        }
        if let Some(m) = &mask {
            if m.len() != sv.len() {
                return Err(mismatch("log_softmax", sv.len(), m.len()));
            }
            if m.iter().all(|&b| b) {
                return Err(Error::invalid("log_softmax mask removes every entry"));
            }
        }
        let value = log_softmax_kernel(sv, mask.as_deref());
        let g = self.grad_of(&[src]);
        Ok(self.push(Op::LogSoftmax { src, mask }, value, g))
    }

    pub fn softmax(&mut self, src: Var) -> Result<Var> {
        let sv = self.value(src);
        if sv.is_empty() {
            return Err(Error::Empty("softmax"));
        }
        let value = log_softmax_kernel(sv, None)
            .into_iter()
            .map(f64::exp)
            .collect();
        let g = self.grad_of(&[src]);
        Ok(self.push(Op::Softmax(src), value, g))
    }

    pub fn pick(&mut self, src: Var, index: usize) -> Result<Var> {
        let sv = self.value(src);
        if index >= sv.len() {
            return Err(mismatch("pick", index, sv.len()));
        }
        let value = vec![sv[index]];
        let g = self.grad_of(&[src]);
        Ok(self.push(Op::Pick { src, index }, value, g))
    }

    /// Elementwise sum of equally sized nodes.
    pub fn sum(&mut self, items: &[Var]) -> Result<Var> {
        let first = *items.first().ok_or(Error::Empty("sum"))?;
        let mut value = self.value(first).to_vec();
        for &it in &items[1..] {
            let iv = self.value(it);
            if iv.len() != value.len() {
                return Err(mismatch("sum", value.len(), iv.len()));
            }
            for (acc, x) in value.iter_mut().zip(iv) {
                *acc += x;
            }
        }
        let g = self.grad_of(items);
        Ok(self.push(Op::Sum(items.to_vec()), value, g))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(mismatch("dot", av.len(), bv.len()));
        }
        let value = vec![av.iter().zip(bv).map(|(x, y)| x * y).sum()];
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Op::Dot(a, b), value, g))
    }

    /// `sum_t weights[t] * items[t]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let wv = self.value(weights);
        if wv.len() != items.len() {
            return Err(mismatch("weighted_sum", wv.len(), items.len()));
        }
        let first = *items.first().ok_or(Error::Empty("weighted_sum"))?;
        let dim = self.dim(first);
        let mut value = vec![0.0; dim];
        for (t, &it) in items.iter().enumerate() {
            let iv = self.value(it);
            if iv.len() != dim {
                return Err(mismatch("weighted_sum", dim, iv.len()));
            }
            let w = wv[t];
            for (acc, x) in value.iter_mut().zip(iv) {
                *acc += w * x;
            }
        }
        let mut deps = items.to_vec();
        deps.push(weights);
        let g = self.grad_of(&deps);
        Ok(self.push(
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
            value,
            g,
        ))
    }

    /// Gradients of a scalar node with respect to every parameter in the store.
    /// Parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.dim(loss) != 1 {
            return Err(Error::Dimension {
                op: "backward",
                left: vec![self.dim(loss)],
                right: vec![1],
            });
        }
        let mut out = Gradients::untouched(self.store);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    for (acc, x) in out.get_mut(*id).data_mut().iter_mut().zip(&g) {
                        *acc += x;
                    }
                }
                Op::Embed { table, row } => {
                    let t = out.get_mut(*table);
                    let cols = t.cols();
                    let dst = &mut t.data_mut()[row * cols..(row + 1) * cols];
                    for (acc, x) in dst.iter_mut().zip(&g) {
                        *acc += x;
                    }
                }
                Op::Affine { w, x, b } => {
                    let wt = self.store.get(*w);
                    let cols = wt.cols();
                    let xv = self.value(*x);
                    {
                        let gw = out.get_mut(*w).data_mut();
                        for (r, gr) in g.iter().enumerate() {
                            if *gr == 0.0 {
                                continue;
                            }
                            let row = &mut gw[r * cols..(r + 1) * cols];
                            for (acc, xj) in row.iter_mut().zip(xv) {
                                *acc += gr * xj;
                            }
                        }
                    }
                    if let Some(b) = b {
                        for (acc, x) in out.get_mut(*b).data_mut().iter_mut().zip(&g) {
                            *acc += x;
                        }
                    }
                    if self.nodes[x.0].needs_grad {
                        let mut gx = vec![0.0; cols];
                        let wd = wt.data();
                        for (r, gr) in g.iter().enumerate() {
                            let row = &wd[r * cols..(r + 1) * cols];
                            for (acc, wij) in gx.iter_mut().zip(row) {
                                *acc += gr * wij;
                            }
                        }
                        accumulate(&mut grads, *x, &gx);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<f64> = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Scale(a, f) => {
                    let ga: Vec<f64> = g.iter().map(|x| x * f).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::MulScalar { v, s } => {
                    let sv = self.scalar(*s);
                    let gv: Vec<f64> = g.iter().map(|x| x * sv).collect();
                    let vv = self.value(*v);
                    let gs: f64 = g
                        .iter()
                        .zip(vv)
                        .filter(|(gi, _)| **gi != 0.0)
                        .map(|(gi, vi)| gi * vi)
                        .sum();
                    accumulate(&mut grads, *v, &gv);
                    accumulate(&mut grads, *s, &[gs]);
                }
                Op::Sigmoid(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(gi, y)| gi * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Tanh(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(gi, y)| gi * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Softplus(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(gi, &x)| gi * sigmoid(x))
                        .collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let d = self.dim(p);
                        accumulate(&mut grads, p, &g[off..off + d]);
                        off += d;
                    }
                }
                Op::Slice { src, start } => {
                    let mut gs = vec![0.0; self.dim(*src)];
                    gs[*start..*start + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *src, &gs);
                }
                Op::LogSoftmax { src, mask } => {
                    let live = |k: usize| mask.as_ref().is_none_or(|m| !m[k]);
                    let total: f64 = g
                        .iter()
                        .enumerate()
                        .filter(|&(k, _)| live(k))
                        .map(|(_, x)| x)
                        .sum();
                    let gs: Vec<f64> = node
                        .value
                        .iter()
                        .enumerate()
                        .map(|(k, y)| if live(k) { g[k] - y.exp() * total } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *src, &gs);
                }
                Op::Softmax(src) => {
                    let gy: f64 = g.iter().zip(&node.value).map(|(a, b)| a * b).sum();
                    let gs: Vec<f64> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(gi, y)| y * (gi - gy))
                        .collect();
                    accumulate(&mut grads, *src, &gs);
                }
                Op::Pick { src, index } => {
                    let mut gs = vec![0.0; self.dim(*src)];
                    gs[*index] = g[0];
                    accumulate(&mut grads, *src, &gs);
                }
                Op::Sum(items) => {
                    for &it in items {
                        accumulate(&mut grads, it, &g);
                    }
                }
                Op::Dot(a, b) => {
                    let ga: Vec<f64> = self.value(*b).iter().map(|y| y * g[0]).collect();
                    let gb: Vec<f64> = self.value(*a).iter().map(|x| x * g[0]).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::WeightedSum { weights, items } => {
                    let wv = self.value(*weights);
                    let mut gw = Vec::with_capacity(items.len());
                    for (t, &it) in items.iter().enumerate() {
                        let iv = self.value(it);
                        gw.push(g.iter().zip(iv).map(|(a, b)| a * b).sum());
                        let gi: Vec<f64> = g.iter().map(|x| x * wv[t]).collect();
                        accumulate(&mut grads, it, &gi);
                    }
                    accumulate(&mut grads, *weights, &gw);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}
