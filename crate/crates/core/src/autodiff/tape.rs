//! Reverse-mode tape over dense `f64` vectors.
//!
//! Every node stores its forward value as a flat row-major buffer. Matrices
//! only appear as parameters consumed by [`Tape::linear`], so the tape itself
//! is rank-agnostic: shape bookkeeping lives in the parameter store.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Param(#[allow(dead_code)] ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `y = scale * x + shift`
    Affine(usize, f64),
    /// Elementwise map with the local derivative cached at forward time.
    Unary(usize, Vec<f64>),
    Linear {
        w: usize,
        b: Option<usize>,
        x: usize,
        rows: usize,
        cols: usize,
    },
    Concat(Vec<usize>),
    Slice(usize, usize),
    Sum(usize),
    Dot(usize, usize),
    Gather(usize, Vec<usize>),
    LogSoftmax(usize),
    /// Elementwise choice between two operands (`true` picks the first).
    Select(usize, usize, Vec<bool>),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// A recording of one forward pass.
///
/// Single-threaded by construction (`RefCell`); build one tape per forward
/// pass and drop it after `backward`.
pub struct Tape<'s> {
    nodes: RefCell<Vec<Node>>,
    store: Option<&'s ParamStore>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'a> {
    tape: &'a Tape<'a>,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.to_vec())
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Tape<'s> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            store: None,
            param_nodes: RefCell::new(HashMap::new()),
        }
    }

    /// A tape that can read parameters from `store`.
    pub fn with_params(store: &'s ParamStore) -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(4096)),
            store: Some(store),
            param_nodes: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Vec<f64>, op: Op) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        nodes.len() - 1
    }

    fn var<'a>(&'a self, idx: usize) -> Var<'a> {
        Var { tape: self.shrink(), idx }
    }

    fn shrink<'a>(&'a self) -> &'a Tape<'a> {
        self
    }

    pub fn constant<'a>(&'a self, value: Vec<f64>) -> Var<'a> {
        let idx = self.push(value, Op::Leaf);
        self.var(idx)
    }

    pub fn scalar<'a>(&'a self, value: f64) -> Var<'a> {
        self.constant(vec![value])
    }

    pub fn zeros<'a>(&'a self, len: usize) -> Var<'a> {
        self.constant(vec![0.0; len])
    }

    /// Parameter leaf; repeated requests for the same id share one node.
    pub fn param<'a>(&'a self, id: ParamId) -> Var<'a> {
        if let Some(&idx) = self.param_nodes.borrow().get(&id) {
            return self.var(idx);
        }
        let store = self
            .store
            .expect("tape was created without a parameter store");
        let idx = self.push(store.value(id).to_vec(), Op::Param(id));
        self.param_nodes.borrow_mut().insert(id, idx);
        self.var(idx)
    }

    pub fn concat<'a>(&'a self, parts: &[Var<'a>]) -> Var<'a> {
        let nodes = self.nodes.borrow();
        let total = parts.iter().map(|p| nodes[p.idx].value.len()).sum();
        let mut value = Vec::with_capacity(total);
        for p in parts {
            value.extend_from_slice(&nodes[p.idx].value);
        }
        drop(nodes);
        let idx = self.push(value, Op::Concat(parts.iter().map(|p| p.idx).collect()));
        self.var(idx)
    }

    /// `W x + b` where `W` is a `rows x cols` row-major parameter.
    pub fn linear<'a>(&'a self, w: Var<'a>, b: Option<Var<'a>>, x: Var<'a>) -> Var<'a> {
        let nodes = self.nodes.borrow();
        let wv = &nodes[w.idx].value;
        let xv = &nodes[x.idx].value;
        let cols = xv.len();
        assert!(
            cols > 0 && wv.len() % cols == 0,
            "linear: weight of {} entries incompatible with input of {}",
            wv.len(),
            cols
        );
        let rows = wv.len() / cols;
        let mut value = match b {
            Some(b) => {
                let bv = &nodes[b.idx].value;
                assert_eq!(bv.len(), rows, "linear: bias length mismatch");
                bv.clone()
            }
            None => vec![0.0; rows],
        };
        for (r, out) in value.iter_mut().enumerate() {
            let row = &wv[r * cols..(r + 1) * cols];
            *out += row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
        }
        drop(nodes);
        let idx = self.push(
            value,
            Op::Linear {
                w: w.idx,
                b: b.map(|b| b.idx),
                x: x.idx,
                rows,
                cols,
            },
        );
        self.var(idx)
    }

    fn binary<'a>(&'a self, a: usize, b: usize, kind: u8) -> Var<'a> {
        let nodes = self.nodes.borrow();
        let av = &nodes[a].value;
        let bv = &nodes[b].value;
        let n = broadcast_len(av.len(), bv.len());
        let f = |x: f64, y: f64| match kind {
            0 => x + y,
            1 => x - y,
            2 => x * y,
            _ => x / y,
        };
        let value: Vec<f64> = (0..n)
            .map(|i| f(av[i % av.len()], bv[i % bv.len()]))
            .collect();
        drop(nodes);
        let op = match kind {
            0 => Op::Add(a, b),
            1 => Op::Sub(a, b),
            2 => Op::Mul(a, b),
            _ => Op::Div(a, b),
        };
        let idx = self.push(value, op);
        self.var(idx)
    }

    fn unary<'a>(&'a self, a: usize, f: impl Fn(f64) -> (f64, f64)) -> Var<'a> {
        let nodes = self.nodes.borrow();
        let (value, deriv): (Vec<f64>, Vec<f64>) = nodes[a].value.iter().map(|&x| f(x)).unzip();
        drop(nodes);
        let idx = self.push(value, Op::Unary(a, deriv));
        self.var(idx)
    }

    fn value_of(&self, idx: usize) -> std::cell::Ref<'_, [f64]> {
        std::cell::Ref::map(self.nodes.borrow(), |n| n[idx].value.as_slice())
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.idx].value.len() != 1 {
            return Err(Error::NonScalarRoot(nodes[root.idx].value.len()));
        }
        for (i, n) in nodes.iter().enumerate().take(root.idx + 1) {
            if n.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("forward value at tape node {i}")));
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.idx + 1];
        grads[root.idx] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize, f: impl Fn(usize) -> f64) {
            let slot = grads[idx].get_or_insert_with(|| vec![0.0; len]);
            for (i, s) in slot.iter_mut().enumerate() {
                *s += f(i);
            }
        }
        // Broadcast-aware accumulation: sums over repeats when the operand is shorter.
        fn acc_bcast(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize, g: &[f64], f: impl Fn(usize) -> f64) {
            let slot = grads[idx].get_or_insert_with(|| vec![0.0; len]);
            for i in 0..g.len() {
                slot[i % len] += f(i);
            }
        }

        for i in (0..=root.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &nodes[i].op {
                Op::Leaf | Op::Param(_) => {}
                Op::Add(a, b) => {
                    let (la, lb) = (nodes[*a].value.len(), nodes[*b].value.len());
                    acc_bcast(&mut grads, *a, la, &g, |k| g[k]);
                    acc_bcast(&mut grads, *b, lb, &g, |k| g[k]);
                }
                Op::Sub(a, b) => {
                    let (la, lb) = (nodes[*a].value.len(), nodes[*b].value.len());
                    acc_bcast(&mut grads, *a, la, &g, |k| g[k]);
                    acc_bcast(&mut grads, *b, lb, &g, |k| -g[k]);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (la, lb) = (av.len(), bv.len());
                    acc_bcast(&mut grads, *a, la, &g, |k| g[k] * bv[k % lb]);
                    acc_bcast(&mut grads, *b, lb, &g, |k| g[k] * av[k % la]);
                }
                Op::Div(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (la, lb) = (av.len(), bv.len());
                    acc_bcast(&mut grads, *a, la, &g, |k| g[k] / bv[k % lb]);
                    acc_bcast(&mut grads, *b, lb, &g, |k| {
                        let d = bv[k % lb];
                        -g[k] * av[k % la] / (d * d)
                    });
                }
                Op::Affine(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.len(), |k| g[k] * s);
                }
                Op::Unary(a, d) => acc(&mut grads, *a, g.len(), |k| g[k] * d[k]),
                Op::Linear { w, b, x, rows, cols } => {
                    let (rows, cols) = (*rows, *cols);
                    let wv = &nodes[*w].value;
                    let xv = &nodes[*x].value;
                    {
                        let gx = grads[*x].get_or_insert_with(|| vec![0.0; cols]);
                        for r in 0..rows {
                            let gr = g[r];
                            if gr != 0.0 {
                                let row = &wv[r * cols..(r + 1) * cols];
                                for (o, wrc) in gx.iter_mut().zip(row) {
                                    *o += gr * wrc;
                                }
                            }
                        }
                    }
                    {
                        let gw = grads[*w].get_or_insert_with(|| vec![0.0; rows * cols]);
                        for r in 0..rows {
                            let gr = g[r];
                            if gr != 0.0 {
                                let row = &mut gw[r * cols..(r + 1) * cols];
                                for (o, xc) in row.iter_mut().zip(xv) {
                                    *o += gr * xc;
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc(&mut grads, *b, rows, |k| g[k]);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].value.len();
                        acc(&mut grads, p, len, |k| g[offset + k]);
                        offset += len;
                    }
                }
                Op::Slice(a, start) => {
                    let len = nodes[*a].value.len();
                    let start = *start;
                    let slot = grads[*a].get_or_insert_with(|| vec![0.0; len]);
                    for (k, gk) in g.iter().enumerate() {
                        slot[start + k] += gk;
                    }
                }
                Op::Sum(a) => {
                    let len = nodes[*a].value.len();
                    acc(&mut grads, *a, len, |_| g[0]);
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let len = av.len();
                    acc(&mut grads, *a, len, |k| g[0] * bv[k]);
                    acc(&mut grads, *b, len, |k| g[0] * av[k]);
                }
                Op::Gather(a, idx) => {
                    let len = nodes[*a].value.len();
                    let slot = grads[*a].get_or_insert_with(|| vec![0.0; len]);
                    for (k, &src) in idx.iter().enumerate() {
                        slot[src] += g[k];
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = &nodes[i].value;
                    let total: f64 = g.iter().sum();
                    acc(&mut grads, *a, g.len(), |k| g[k] - y[k].exp() * total);
                }
                Op::Select(a, b, mask) => {
                    let len = g.len();
                    acc(&mut grads, *a, len, |k| if mask[k] { g[k] } else { 0.0 });
                    acc(&mut grads, *b, len, |k| if mask[k] { 0.0 } else { g[k] });
                }
            }
            grads[i] = Some(g);
        }

        let mut params = HashMap::new();
        for (&id, &idx) in self.param_nodes.borrow().iter() {
            if idx <= root.idx {
                if let Some(g) = &grads[idx] {
                    params.insert(id, g.clone());
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }
}

fn broadcast_len(a: usize, b: usize) -> usize {
    if a == b || b == 1 {
        a
    } else if a == 1 {
        b
    } else {
        panic!("shape mismatch: {a} vs {b}")
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Vec<f64>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var` (zeros if unreachable).
    pub fn wrt(&self, var: Var<'_>) -> Vec<f64> {
        match self.nodes.get(var.idx).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![0.0; var.len()],
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(|g| g.as_slice())
    }

    /// Adds parameter gradients into `buffer`; repeated calls accumulate.
    pub fn accumulate_into(&self, buffer: &mut super::params::GradBuffer) {
        for (id, g) in &self.params {
            buffer.add(*id, g);
        }
    }
}

impl<'a> Var<'a> {
    pub fn tape(&self) -> &'a Tape<'a> {
        self.tape
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.idx].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.value_of(self.idx).to_vec()
    }

    /// First (or only) entry.
    pub fn val(&self) -> f64 {
        self.tape.value_of(self.idx)[0]
    }

    pub fn at(&self, i: usize) -> f64 {
        self.tape.value_of(self.idx)[i]
    }

    pub fn affine(self, scale: f64, shift: f64) -> Var<'a> {
        let value: Vec<f64> = self
            .tape
            .value_of(self.idx)
            .iter()
            .map(|x| scale * x + shift)
            .collect();
        let idx = self.tape.push(value, Op::Affine(self.idx, scale));
        self.tape.var(idx)
    }

    pub fn scale(self, s: f64) -> Var<'a> {
        self.affine(s, 0.0)
    }

    pub fn tanh(self) -> Var<'a> {
        self.tape.unary(self.idx, |x| {
            let t = x.tanh();
            (t, 1.0 - t * t)
        })
    }

    pub fn sigmoid(self) -> Var<'a> {
        self.tape.unary(self.idx, |x| {
            let s = sigmoid(x);
            (s, s * (1.0 - s))
        })
    }

    pub fn exp(self) -> Var<'a> {
        self.tape.unary(self.idx, |x| {
            let e = x.exp();
            (e, e)
        })
    }

    pub fn ln(self) -> Var<'a> {
        self.tape.unary(self.idx, |x| (x.ln(), 1.0 / x))
    }

    pub fn sin(self) -> Var<'a> {
        self.tape.unary(self.idx, |x| (x.sin(), x.cos()))
    }

    pub fn cos(self) -> Var<'a> {
        self.tape.unary(self.idx, |x| (x.cos(), -x.sin()))
    }

    pub fn sqrt(self) -> Var<'a> {
        self.tape.unary(self.idx, |x| {
            let s = x.sqrt();
            (s, 0.5 / s)
        })
    }

    pub fn abs(self) -> Var<'a> {
        self.tape
            .unary(self.idx, |x| (x.abs(), if x >= 0.0 { 1.0 } else { -1.0 }))
    }

    pub fn square(self) -> Var<'a> {
        self.tape.unary(self.idx, |x| (x * x, 2.0 * x))
    }

    pub fn relu(self) -> Var<'a> {
        self.tape
            .unary(self.idx, |x| if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) })
    }

    /// `ln(1 + exp(k x)) / k`, evaluated stably.
    pub fn softplus(self, k: f64) -> Var<'a> {
        self.tape.unary(self.idx, move |x| (softplus(x, k), sigmoid(k * x)))
    }

    pub fn sum(self) -> Var<'a> {
        let value = vec![self.tape.value_of(self.idx).iter().sum()];
        let idx = self.tape.push(value, Op::Sum(self.idx));
        self.tape.var(idx)
    }

    pub fn dot(self, other: Var<'a>) -> Var<'a> {
        let v: f64 = {
            let a = self.tape.value_of(self.idx);
            let b = self.tape.value_of(other.idx);
            assert_eq!(a.len(), b.len(), "dot: length mismatch");
            a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
        };
        let idx = self.tape.push(vec![v], Op::Dot(self.idx, other.idx));
        self.tape.var(idx)
    }

    pub fn slice(self, start: usize, len: usize) -> Var<'a> {
        let value = self.tape.value_of(self.idx)[start..start + len].to_vec();
        let idx = self.tape.push(value, Op::Slice(self.idx, start));
        self.tape.var(idx)
    }

    pub fn get(self, i: usize) -> Var<'a> {
        self.slice(i, 1)
    }

    /// Splits into scalar vars.
    pub fn unpack(self) -> Vec<Var<'a>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    pub fn gather(self, indices: Vec<usize>) -> Var<'a> {
        let value = {
            let src = self.tape.value_of(self.idx);
            indices.iter().map(|&i| src[i]).collect()
        };
        let idx = self.tape.push(value, Op::Gather(self.idx, indices));
        self.tape.var(idx)
    }

    pub fn log_softmax(self) -> Var<'a> {
        let value = {
            let x = self.tape.value_of(self.idx);
            let lse = log_sum_exp(&x);
            x.iter().map(|v| v - lse).collect()
        };
        let idx = self.tape.push(value, Op::LogSoftmax(self.idx));
        self.tape.var(idx)
    }

    pub fn softmax(self) -> Var<'a> {
        self.log_softmax().exp()
    }

    pub fn log_sum_exp(self) -> Var<'a> {
        // lse(x) = x_0 - log_softmax(x)_0
        let first = self.get(0);
        first - self.log_softmax().get(0)
    }

    fn select(self, other: Var<'a>, pick_self: impl Fn(f64, f64) -> bool) -> Var<'a> {
        let (value, mask): (Vec<f64>, Vec<bool>) = {
            let a = self.tape.value_of(self.idx);
            let b = self.tape.value_of(other.idx);
            assert_eq!(a.len(), b.len(), "select: length mismatch");
            a.iter()
                .zip(b.iter())
                .map(|(&x, &y)| if pick_self(x, y) { (x, true) } else { (y, false) })
                .unzip()
        };
        let idx = self
            .tape
            .push(value, Op::Select(self.idx, other.idx, mask));
        self.tape.var(idx)
    }

    pub fn maximum(self, other: Var<'a>) -> Var<'a> {
        self.select(other, |x, y| x >= y)
    }

    pub fn minimum(self, other: Var<'a>) -> Var<'a> {
        self.select(other, |x, y| x <= y)
    }

    /// Same value, no gradient flow.
    pub fn detach(self) -> Var<'a> {
        self.tape.constant(self.to_vec())
    }

    pub fn constant(&self, v: f64) -> Var<'a> {
        self.tape.scalar(v)
    }
}

macro_rules! binop {
    ($tr:ident, $m:ident, $kind:expr, $scalar:expr) => {
        impl<'a> $tr for Var<'a> {
            type Output = Var<'a>;
            fn $m(self, rhs: Var<'a>) -> Var<'a> {
                self.tape.binary(self.idx, rhs.idx, $kind)
            }
        }
        impl<'a> $tr<f64> for Var<'a> {
            type Output = Var<'a>;
            fn $m(self, rhs: f64) -> Var<'a> {
                let f: fn(Var<'a>, f64) -> Var<'a> = $scalar;
                f(self, rhs)
            }
        }
    };
}

binop!(Add, add, 0, |v, c| v.affine(1.0, c));
binop!(Sub, sub, 1, |v, c| v.affine(1.0, -c));
binop!(Mul, mul, 2, |v, c| v.affine(c, 0.0));
binop!(Div, div, 3, |v, c| v.affine(1.0 / c, 0.0));

impl<'a> Neg for Var<'a> {
    type Output = Var<'a>;
    fn neg(self) -> Var<'a> {
        self.affine(-1.0, 0.0)
    }
}

impl<'a> Sub<Var<'a>> for f64 {
    type Output = Var<'a>;
    fn sub(self, rhs: Var<'a>) -> Var<'a> {
        rhs.affine(-1.0, self)
    }
}

impl<'a> Mul<Var<'a>> for f64 {
    type Output = Var<'a>;
    fn mul(self, rhs: Var<'a>) -> Var<'a> {
        rhs.affine(self, 0.0)
    }
}

impl<'a> Add<Var<'a>> for f64 {
    type Output = Var<'a>;
    fn add(self, rhs: Var<'a>) -> Var<'a> {
        rhs.affine(1.0, self)
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

pub fn softplus(x: f64, k: f64) -> f64 {
    let kx = k * x;
    (kx.max(0.0) + (-kx.abs()).exp().ln_1p()) / k
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::new();
        let x = tape.constant(vec![1.0, 2.0, 3.0]);
        let root = (x * x).sum();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(x), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_root_has_zero_gradients() {
        let tape = Tape::new();
        let x = tape.constant(vec![1.0, 2.0]);
        let _unused = x.tanh();
        let root = tape.scalar(3.0);
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(x), vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let x = tape.constant(vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(2))));
    }

    #[test]
    fn nan_in_forward_rejected() {
        let tape = Tape::new();
        let x = tape.scalar(-1.0);
        let root = x.ln();
        assert!(matches!(tape.backward(root), Err(Error::NonFinite(_))));
    }

    #[test]
    fn broadcasting_reduces_gradient() {
        let tape = Tape::new();
        let s = tape.scalar(2.0);
        let v = tape.constant(vec![1.0, 2.0, 3.0]);
        let root = (s * v).sum();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(s), vec![6.0]);
        assert_eq!(g.wrt(v), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn log_softmax_is_normalized() {
        let tape = Tape::new();
        let x = tape.constant(vec![0.3, -1.0, 2.5, 0.0]);
        let p = x.softmax().to_vec();
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.scalar(3.0);
        let root = x * x.detach();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(x), vec![3.0]);
    }
}
