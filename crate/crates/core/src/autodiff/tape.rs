use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Adjacency;
use crate::matrix::{matmul_into, Matrix};
use crate::rng::rng_for;

use super::params::{ParamId, ParamStore};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value {
    tape: u64,
    id: usize,
    rows: usize,
    cols: usize,
}

impl Value {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Mean,
    Max,
}

/// Which endpoint of an adjacency entry a gather reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    /// The sending node `j`.
    Source,
    /// The receiving node `i`.
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

/// How the right operand of a binary op is broadcast to the left operand's shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryKind {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    AbsPow(f64),
    Scale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(usize, usize),
    Binary { kind: BinKind, a: usize, b: usize, bcast: Bcast },
    Unary { kind: UnaryKind, a: usize },
    Gather { a: usize, adj: Arc<Adjacency>, end: Endpoint },
    SegmentSum { a: usize, adj: Arc<Adjacency> },
    NeighborAggregate { a: usize, adj: Arc<Adjacency>, mode: Aggregation, argmax: Vec<usize> },
    SegmentSoftmax { a: usize, adj: Arc<Adjacency> },
    EdgeWeighted { alpha: usize, h: usize, adj: Arc<Adjacency> },
    SpMM { a: usize, adj: Arc<Adjacency>, weights: Arc<Vec<f64>> },
    GateDiff { a: usize, adj: Arc<Adjacency>, p: f64, mode: Aggregation, argmax: Vec<usize> },
    GateDiffNorm { a: usize, adj: Arc<Adjacency>, p: f64, mode: Aggregation, norms: Vec<f64>, argmax: Vec<usize> },
    ConcatCols(Vec<usize>),
    Sum(usize),
    Mean(usize),
    Dropout { a: usize, mask: Vec<f64> },
    Blend { tau: usize, x: usize, s: usize },
    CrossEntropy { logits: usize, labels: Arc<Vec<usize>>, idx: Arc<Vec<usize>>, probs: Matrix },
    Nmse { pred: usize, targets: Arc<Vec<f64>>, idx: Arc<Vec<usize>>, denom: f64 },
}

struct Node {
    op: Op,
    value: Matrix,
}

/// The gated update `(1 − t)·x + t·s` for a single entry.
///
/// Shared by the tape op and the explicit Euler integrator so that a unit
/// time step reproduces a layer bitwise.
#[inline]
pub fn blend_scalar(t: f64, x: f64, s: f64) -> f64 {
    (1.0 - t) * x + t * s
}

#[inline]
fn abs_pow_scalar(x: f64, p: f64) -> f64 {
    pow_nonneg(x.abs(), p)
}

/// `x^p` for `x ≥ 0`, with integer exponents taken by repeated multiplication.
#[inline]
fn pow_nonneg(x: f64, p: f64) -> f64 {
    if p == 0.0 {
        1.0
    } else if p == 1.0 {
        x
    } else if p == 2.0 {
        x * x
    } else if p.fract() == 0.0 && p.abs() <= 32.0 {
        x.powi(p as i32)
    } else {
        x.powf(p)
    }
}

/// `d|x|^p / dx`, with 0 at the origin.
#[inline]
fn abs_pow_deriv(x: f64, p: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        p * pow_nonneg(x.abs(), p - 1.0) * x.signum()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Append-only record of operations over dense matrices.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    nondiff_events: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, kept for leaf nodes only.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Value) -> Option<&Matrix> {
        assert_eq!(v.tape, self.tape, "value from a different tape");
        self.grads.get(v.id).and_then(Option::as_ref)
    }
}

fn mismatch(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::invalid(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), nondiff_events: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Count of forward evaluations at points where an op is not
    /// differentiable (`|x|^p` with `p < 1` at 0, tied maxima).
    pub fn nondiff_events(&self) -> usize {
        self.nondiff_events
    }

    fn push(&mut self, op: Op, value: Matrix) -> Value {
        let (rows, cols) = value.shape();
        self.nodes.push(Node { op, value });
        Value { tape: self.id, id: self.nodes.len() - 1, rows, cols }
    }

    fn check(&self, v: Value) {
        assert_eq!(v.tape, self.id, "value recorded on a different tape");
    }

    pub fn value(&self, v: Value) -> &Matrix {
        self.check(v);
        &self.nodes[v.id].value
    }

    pub fn constant(&mut self, m: Matrix) -> Value {
        self.push(Op::Leaf { param: None }, m)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Value {
        self.push(Op::Leaf { param: Some(id) }, store.value(id).clone())
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.check(a);
        self.check(b);
        if a.cols != b.rows {
            return Err(mismatch("matmul", a.shape(), b.shape()));
        }
        let mut out = Matrix::zeros(a.rows, b.cols);
        matmul_into(&self.nodes[a.id].value, &self.nodes[b.id].value, &mut out);
        Ok(self.push(Op::MatMul(a.id, b.id), out))
    }

    fn binary(&mut self, kind: BinKind, a: Value, b: Value, name: &str) -> Result<Value> {
        self.check(a);
        self.check(b);
        let bcast = if b.shape() == a.shape() {
            Bcast::Same
        } else if b.shape() == (1, 1) {
            Bcast::Scalar
        } else if b.rows == 1 && b.cols == a.cols {
            Bcast::Row
        } else if b.cols == 1 && b.rows == a.rows {
            Bcast::Col
        } else {
            return Err(mismatch(name, a.shape(), b.shape()));
        };
        let (av, bv) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let out = Matrix::from_fn(a.rows, a.cols, |i, j| {
            let y = match bcast {
                Bcast::Same => bv.get(i, j),
                Bcast::Row => bv.get(0, j),
                Bcast::Col => bv.get(i, 0),
                Bcast::Scalar => bv.get(0, 0),
            };
            f(av.get(i, j), y)
        });
        Ok(self.push(Op::Binary { kind, a: a.id, b: b.id, bcast }, out))
    }

    /// `a + b`, with `b` of equal shape or a broadcast row, column or scalar.
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(BinKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(BinKind::Sub, a, b, "sub")
    }

    pub fn hadamard(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(BinKind::Mul, a, b, "hadamard")
    }

    fn unary(&mut self, kind: UnaryKind, a: Value) -> Value {
        self.check(a);
        let av = &self.nodes[a.id].value;
        let out = match kind {
            UnaryKind::Relu => av.map(|x| if x > 0.0 { x } else { 0.0 }),
            UnaryKind::LeakyRelu(s) => av.map(|x| if x > 0.0 { x } else { s * x }),
            UnaryKind::Tanh => av.map(f64::tanh),
            UnaryKind::Sigmoid => av.map(sigmoid),
            UnaryKind::AbsPow(p) => av.map(|x| abs_pow_scalar(x, p)),
            UnaryKind::Scale(c) => av.map(|x| c * x),
        };
        if let UnaryKind::AbsPow(p) = kind {
            if p < 1.0 {
                self.nondiff_events += av.as_slice().iter().filter(|&&x| x == 0.0).count();
            }
        }
        self.push(Op::Unary { kind, a: a.id }, out)
    }

    pub fn scalar_mul(&mut self, a: Value, c: f64) -> Value {
        self.unary(UnaryKind::Scale(c), a)
    }

    pub fn relu(&mut self, a: Value) -> Value {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: Value, slope: f64) -> Value {
        self.unary(UnaryKind::LeakyRelu(slope), a)
    }

    pub fn tanh(&mut self, a: Value) -> Value {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        self.unary(UnaryKind::Sigmoid, a)
    }

    /// `|a|^p` elementwise. The derivative at 0 is taken as 0.
    pub fn abs_pow(&mut self, a: Value, p: f64) -> Result<Value> {
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::invalid(format!("abs_pow exponent must be positive, got {p}")));
        }
        Ok(self.unary(UnaryKind::AbsPow(p), a))
    }

    fn check_nodes(&self, a: Value, adj: &Adjacency, op: &str) -> Result<()> {
        self.check(a);
        if a.rows != adj.num_nodes() {
            return Err(Error::invalid(format!(
                "{op}: {} rows for a graph with {} nodes",
                a.rows,
                adj.num_nodes()
            )));
        }
        Ok(())
    }

    fn check_entries(&self, a: Value, adj: &Adjacency, op: &str) -> Result<()> {
        self.check(a);
        if a.rows != adj.num_entries() {
            return Err(Error::invalid(format!(
                "{op}: {} rows for {} adjacency entries",
                a.rows,
                adj.num_entries()
            )));
        }
        Ok(())
    }

    /// Row `e` of the result is row `source(e)` or `target(e)` of `a`.
    pub fn gather(&mut self, a: Value, adj: &Arc<Adjacency>, end: Endpoint) -> Result<Value> {
        self.check_nodes(a, adj, "gather")?;
        let idx = match end {
            Endpoint::Source => adj.sources(),
            Endpoint::Target => adj.targets(),
        };
        let out = self.nodes[a.id].value.select_rows(idx);
        Ok(self.push(Op::Gather { a: a.id, adj: adj.clone(), end }, out))
    }

    /// Sums entry rows into their target node.
    pub fn segment_sum(&mut self, a: Value, adj: &Arc<Adjacency>) -> Result<Value> {
        self.check_entries(a, adj, "segment_sum")?;
        let av = &self.nodes[a.id].value;
        let mut out = Matrix::zeros(adj.num_nodes(), a.cols);
        for i in 0..adj.num_nodes() {
            for e in adj.range(i) {
                for (o, x) in out.row_mut(i).iter_mut().zip(av.row(e)) {
                    *o += x;
                }
            }
        }
        Ok(self.push(Op::SegmentSum { a: a.id, adj: adj.clone() }, out))
    }

    /// `agg_{j∈N_i} a_j` per channel. Empty neighborhoods give 0. Max ties
    /// resolve to the lowest source index.
    pub fn neighbor_aggregate(&mut self, a: Value, adj: &Arc<Adjacency>, mode: Aggregation) -> Result<Value> {
        self.check_nodes(a, adj, "neighbor_aggregate")?;
        let av = &self.nodes[a.id].value;
        let m = a.cols;
        let mut out = Matrix::zeros(adj.num_nodes(), m);
        let mut argmax = Vec::new();
        let mut ties = 0;
        match mode {
            Aggregation::Sum | Aggregation::Mean => {
                for i in 0..adj.num_nodes() {
                    for e in adj.range(i) {
                        for (o, x) in out.row_mut(i).iter_mut().zip(av.row(adj.source(e))) {
                            *o += x;
                        }
                    }
                    if mode == Aggregation::Mean && adj.group_size(i) > 0 {
                        let inv = adj.group_size(i) as f64;
                        out.row_mut(i).iter_mut().for_each(|o| *o /= inv);
                    }
                }
            }
            Aggregation::Max => {
                argmax = vec![usize::MAX; adj.num_nodes() * m];
                for i in 0..adj.num_nodes() {
                    for k in 0..m {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = usize::MAX;
                        for e in adj.range(i) {
                            let x = av.get(adj.source(e), k);
                            if x > best {
                                best = x;
                                arg = adj.source(e);
                            } else if x == best {
                                ties += 1;
                            }
                        }
                        if arg != usize::MAX {
                            out.set(i, k, best);
                            argmax[i * m + k] = arg;
                        }
                    }
                }
            }
        }
        self.nondiff_events += ties;
        Ok(self.push(Op::NeighborAggregate { a: a.id, adj: adj.clone(), mode, argmax }, out))
    }

    /// Softmax of an `E x 1` column within each target group.
    pub fn segment_softmax(&mut self, a: Value, adj: &Arc<Adjacency>) -> Result<Value> {
        self.check_entries(a, adj, "segment_softmax")?;
        if a.cols != 1 {
            return Err(Error::invalid("segment_softmax expects a single column"));
        }
        let av = &self.nodes[a.id].value;
        let mut out = Matrix::zeros(a.rows, 1);
        for i in 0..adj.num_nodes() {
            let r = adj.range(i);
            let mx = r.clone().map(|e| av.get(e, 0)).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in r.clone() {
                let w = (av.get(e, 0) - mx).exp();
                out.set(e, 0, w);
                z += w;
            }
            for e in r {
                out.set(e, 0, out.get(e, 0) / z);
            }
        }
        Ok(self.push(Op::SegmentSoftmax { a: a.id, adj: adj.clone() }, out))
    }

    /// `Y_i = Σ_e alpha_e h_{source(e)}` over entries targeting `i`.
    pub fn edge_weighted_aggregate(&mut self, alpha: Value, h: Value, adj: &Arc<Adjacency>) -> Result<Value> {
        self.check_entries(alpha, adj, "edge_weighted_aggregate")?;
        self.check_nodes(h, adj, "edge_weighted_aggregate")?;
        if alpha.cols != 1 {
            return Err(Error::invalid("edge weights must be a single column"));
        }
        let (al, hv) = (&self.nodes[alpha.id].value, &self.nodes[h.id].value);
        let mut out = Matrix::zeros(adj.num_nodes(), h.cols);
        for i in 0..adj.num_nodes() {
            for e in adj.range(i) {
                let w = al.get(e, 0);
                for (o, x) in out.row_mut(i).iter_mut().zip(hv.row(adj.source(e))) {
                    *o += w * x;
                }
            }
        }
        Ok(self.push(Op::EdgeWeighted { alpha: alpha.id, h: h.id, adj: adj.clone() }, out))
    }

    /// Sparse product with fixed entry weights: `Y_i = Σ_e w_e a_{source(e)}`.
    pub fn sparse_matmul(&mut self, adj: &Arc<Adjacency>, weights: &Arc<Vec<f64>>, a: Value) -> Result<Value> {
        self.check_nodes(a, adj, "sparse_matmul")?;
        if weights.len() != adj.num_entries() {
            return Err(Error::invalid("one weight per adjacency entry required"));
        }
        let av = &self.nodes[a.id].value;
        let mut out = Matrix::zeros(adj.num_nodes(), a.cols);
        for i in 0..adj.num_nodes() {
            for e in adj.range(i) {
                let w = weights[e];
                for (o, x) in out.row_mut(i).iter_mut().zip(av.row(adj.source(e))) {
                    *o += w * x;
                }
            }
        }
        Ok(self.push(Op::SpMM { a: a.id, adj: adj.clone(), weights: weights.clone() }, out))
    }

    /// Per channel, `agg_{j∈N_i} |a_jk − a_ik|^p`.
    pub fn gate_diff(&mut self, a: Value, adj: &Arc<Adjacency>, p: f64, mode: Aggregation) -> Result<Value> {
        self.check_nodes(a, adj, "gate_diff")?;
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::invalid(format!("gating exponent must be positive, got {p}")));
        }
        let av = &self.nodes[a.id].value;
        let m = a.cols;
        let mut out = Matrix::zeros(adj.num_nodes(), m);
        let mut argmax = Vec::new();
        let mut events = 0;
        if mode == Aggregation::Max {
            argmax = vec![usize::MAX; adj.num_nodes() * m];
        }
        for i in 0..adj.num_nodes() {
            let xi = av.row(i);
            let row = out.row_mut(i);
            for e in adj.range(i) {
                let j = adj.source(e);
                for (k, (o, &xj)) in row.iter_mut().zip(av.row(j)).enumerate() {
                    let d = xj - xi[k];
                    if p < 1.0 && d == 0.0 {
                        events += 1;
                    }
                    let t = abs_pow_scalar(d, p);
                    match mode {
                        Aggregation::Sum | Aggregation::Mean => *o += t,
                        Aggregation::Max => {
                            let slot = &mut argmax[i * m + k];
                            if *slot == usize::MAX || t > *o {
                                *o = t;
                                *slot = j;
                            } else if t == *o {
                                events += 1;
                            }
                        }
                    }
                }
            }
            if mode == Aggregation::Mean && adj.group_size(i) > 0 {
                let n = adj.group_size(i) as f64;
                row.iter_mut().for_each(|o| *o /= n);
            }
        }
        self.nondiff_events += events;
        Ok(self.push(Op::GateDiff { a: a.id, adj: adj.clone(), p, mode, argmax }, out))
    }

    /// Per node, `agg_{j∈N_i} ‖a_j − a_i‖_p` (vector p-norm across channels), as a column.
    pub fn gate_diff_norm(&mut self, a: Value, adj: &Arc<Adjacency>, p: f64, mode: Aggregation) -> Result<Value> {
        self.check_nodes(a, adj, "gate_diff_norm")?;
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::invalid(format!("gating exponent must be positive, got {p}")));
        }
        let av = &self.nodes[a.id].value;
        let mut norms = vec![0.0; adj.num_entries()];
        let mut out = Matrix::zeros(adj.num_nodes(), 1);
        let mut argmax = Vec::new();
        if mode == Aggregation::Max {
            argmax = vec![usize::MAX; adj.num_nodes()];
        }
        let mut events = 0;
        for i in 0..adj.num_nodes() {
            let xi = av.row(i);
            let mut acc = 0.0;
            for e in adj.range(i) {
                let s: f64 = av.row(adj.source(e)).iter().zip(xi).map(|(a, b)| abs_pow_scalar(a - b, p)).sum();
                let n = s.powf(1.0 / p);
                norms[e] = n;
                if n == 0.0 {
                    events += 1;
                }
                match mode {
                    Aggregation::Sum | Aggregation::Mean => acc += n,
                    Aggregation::Max => {
                        if argmax[i] == usize::MAX || n > acc {
                            acc = n;
                            argmax[i] = e;
                        }
                    }
                }
            }
            if mode == Aggregation::Mean && adj.group_size(i) > 0 {
                acc /= adj.group_size(i) as f64;
            }
            out.set(i, 0, acc);
        }
        self.nondiff_events += events;
        Ok(self.push(Op::GateDiffNorm { a: a.id, adj: adj.clone(), p, mode, norms, argmax }, out))
    }

    pub fn concat_cols(&mut self, parts: &[Value]) -> Result<Value> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        for &p in parts {
            self.check(p);
            if p.rows != first.rows {
                return Err(mismatch("concat_cols", first.shape(), p.shape()));
            }
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Matrix::zeros(first.rows, cols);
        for i in 0..first.rows {
            let mut off = 0;
            for p in parts {
                out.row_mut(i)[off..off + p.cols].copy_from_slice(self.nodes[p.id].value.row(i));
                off += p.cols;
            }
        }
        Ok(self.push(Op::ConcatCols(parts.iter().map(|p| p.id).collect()), out))
    }

    pub fn sum(&mut self, a: Value) -> Value {
        self.check(a);
        let s = self.nodes[a.id].value.sum();
        self.push(Op::Sum(a.id), Matrix::filled(1, 1, s))
    }

    pub fn mean(&mut self, a: Value) -> Value {
        self.check(a);
        let n = (a.rows * a.cols).max(1) as f64;
        let s = self.nodes[a.id].value.sum() / n;
        self.push(Op::Mean(a.id), Matrix::filled(1, 1, s))
    }

    /// Inverted dropout. Returns `a` itself when not training or `rate == 0`.
    pub fn dropout(&mut self, a: Value, rate: f64, seed: u64, train: bool) -> Result<Value> {
        self.check(a);
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let mut rng = rng_for(seed, &[]);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> =
            (0..a.rows * a.cols).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let av = &self.nodes[a.id].value;
        let data: Vec<f64> = av.as_slice().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Matrix::from_vec(a.rows, a.cols, data)?;
        Ok(self.push(Op::Dropout { a: a.id, mask }, out))
    }

    /// `(1 − tau)⊙x + tau⊙s`; `tau` may be a column broadcast across channels.
    pub fn blend(&mut self, tau: Value, x: Value, s: Value) -> Result<Value> {
        self.check(tau);
        self.check(x);
        self.check(s);
        if x.shape() != s.shape() {
            return Err(mismatch("blend", x.shape(), s.shape()));
        }
        let col = tau.shape() == (x.rows, 1) && x.cols != 1;
        if tau.shape() != x.shape() && !col {
            return Err(mismatch("blend", tau.shape(), x.shape()));
        }
        let (tv, xv, sv) = (&self.nodes[tau.id].value, &self.nodes[x.id].value, &self.nodes[s.id].value);
        let out = Matrix::from_fn(x.rows, x.cols, |i, k| {
            let t = if col { tv.get(i, 0) } else { tv.get(i, k) };
            blend_scalar(t, xv.get(i, k), sv.get(i, k))
        });
        Ok(self.push(Op::Blend { tau: tau.id, x: x.id, s: s.id }, out))
    }

    /// Mean softmax cross-entropy over the rows listed in `idx`.
    pub fn cross_entropy(&mut self, logits: Value, labels: &Arc<Vec<usize>>, idx: &Arc<Vec<usize>>) -> Result<Value> {
        self.check(logits);
        if idx.is_empty() {
            return Err(Error::invalid("cross_entropy over an empty mask"));
        }
        if labels.len() != logits.rows {
            return Err(Error::invalid("one label per logit row required"));
        }
        let lv = &self.nodes[logits.id].value;
        let mut probs = Matrix::zeros(idx.len(), logits.cols);
        let mut total = 0.0;
        for (r, &i) in idx.iter().enumerate() {
            let row = lv.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            let y = labels[i];
            if y >= logits.cols {
                return Err(Error::invalid(format!("label {y} exceeds {} classes", logits.cols)));
            }
            total += lse - row[y];
            for (k, &x) in row.iter().enumerate() {
                probs.set(r, k, (x - lse).exp());
            }
        }
        let loss = total / idx.len() as f64;
        Ok(self.push(
            Op::CrossEntropy { logits: logits.id, labels: labels.clone(), idx: idx.clone(), probs },
            Matrix::filled(1, 1, loss),
        ))
    }

    /// `Σ(ŷ − y)² / Σ(y − ȳ)²` over the rows in `idx`, for a column of predictions.
    pub fn nmse(&mut self, pred: Value, targets: &Arc<Vec<f64>>, idx: &Arc<Vec<usize>>) -> Result<Value> {
        self.check(pred);
        if idx.is_empty() {
            return Err(Error::invalid("nmse over an empty mask"));
        }
        if pred.cols != 1 || targets.len() != pred.rows {
            return Err(Error::invalid("nmse expects a prediction column with one target per row"));
        }
        let mean = idx.iter().map(|&i| targets[i]).sum::<f64>() / idx.len() as f64;
        let denom: f64 = idx.iter().map(|&i| (targets[i] - mean).powi(2)).sum();
        if !(denom > 0.0) {
            return Err(Error::invalid("nmse undefined for constant targets"));
        }
        let pv = &self.nodes[pred.id].value;
        let num: f64 = idx.iter().map(|&i| (pv.get(i, 0) - targets[i]).powi(2)).sum();
        Ok(self.push(
            Op::Nmse { pred: pred.id, targets: targets.clone(), idx: idx.clone(), denom },
            Matrix::filled(1, 1, num / denom),
        ))
    }

    /// Reverse accumulation from a scalar `loss`. Gradients are kept for
    /// leaf nodes.
    pub fn backward(&self, loss: Value) -> Result<Gradients> {
        self.backward_masked(loss, None)
    }

    fn backward_masked(&self, loss: Value, wanted: Option<&[bool]>) -> Result<Gradients> {
        self.check(loss);
        if loss.shape() != (1, 1) {
            return Err(Error::invalid(format!("backward needs a scalar loss, got {:?}", loss.shape())));
        }
        let all = vec![true; loss.id + 1];
        let wanted = wanted.unwrap_or(&all);
        let mut grads: Vec<Option<Matrix>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Matrix::filled(1, 1, 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !wanted[id] {
                continue;
            }
            if let Op::Leaf { .. } = self.nodes[id].op {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads, wanted);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    /// Marks the nodes that depend on a parameter leaf.
    fn param_mask(&self, upto: usize) -> Vec<bool> {
        let mut wanted = vec![false; upto + 1];
        for id in 0..=upto {
            wanted[id] = match &self.nodes[id].op {
                Op::Leaf { param } => param.is_some(),
                op => op_inputs(op).iter().any(|&k| wanted[k]),
            };
        }
        wanted
    }

    /// Runs [`Tape::backward`] and adds the gradient of every parameter leaf
    /// into `store`.
    pub fn backward_into(&self, loss: Value, store: &mut ParamStore) -> Result<()> {
        self.check(loss);
        let mask = self.param_mask(loss.id);
        let grads = self.backward_masked(loss, Some(&mask))?;
        for (id, g) in grads.grads.iter().enumerate() {
            if let (Op::Leaf { param: Some(pid) }, Some(g)) = (&self.nodes[id].op, g) {
                store.accumulate(*pid, g);
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>], wanted: &[bool]) {
        let node = &self.nodes[id];
        let val = |k: usize| &self.nodes[k].value;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wanted[*a] {
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    matmul_into(g, &bv.transpose(), &mut ga);
                    accumulate(grads, *a, ga);
                }
                if wanted[*b] {
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    matmul_into(&av.transpose(), g, &mut gb);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Binary { kind, a, b, bcast } => {
                let (av, bv) = (val(*a), val(*b));
                let bget = |i: usize, j: usize| match bcast {
                    Bcast::Same => bv.get(i, j),
                    Bcast::Row => bv.get(0, j),
                    Bcast::Col => bv.get(i, 0),
                    Bcast::Scalar => bv.get(0, 0),
                };
                let ga = match kind {
                    BinKind::Add | BinKind::Sub => g.clone(),
                    BinKind::Mul => Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * bget(i, j)),
                };
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        let d = match kind {
                            BinKind::Add => g.get(i, j),
                            BinKind::Sub => -g.get(i, j),
                            BinKind::Mul => g.get(i, j) * av.get(i, j),
                        };
                        let (r, c) = match bcast {
                            Bcast::Same => (i, j),
                            Bcast::Row => (0, j),
                            Bcast::Col => (i, 0),
                            Bcast::Scalar => (0, 0),
                        };
                        gb.set(r, c, gb.get(r, c) + d);
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Unary { kind, a } => {
                let (av, out) = (val(*a), &node.value);
                let d = match *kind {
                    UnaryKind::Relu => av.zip_map(g, |x, g| if x > 0.0 { g } else { 0.0 }),
                    UnaryKind::LeakyRelu(s) => av.zip_map(g, |x, g| if x > 0.0 { g } else { s * g }),
                    UnaryKind::Tanh => out.zip_map(g, |y, g| (1.0 - y * y) * g),
                    UnaryKind::Sigmoid => out.zip_map(g, |y, g| y * (1.0 - y) * g),
                    UnaryKind::AbsPow(p) => av.zip_map(g, |x, g| abs_pow_deriv(x, p) * g),
                    UnaryKind::Scale(c) => g.map(|g| c * g),
                };
                accumulate(grads, *a, d);
            }
            Op::Gather { a, adj, end } => {
                let mut ga = Matrix::zeros(adj.num_nodes(), g.cols());
                for e in 0..adj.num_entries() {
                    let n = match end {
                        Endpoint::Source => adj.source(e),
                        Endpoint::Target => adj.target(e),
                    };
                    for (o, x) in ga.row_mut(n).iter_mut().zip(g.row(e)) {
                        *o += x;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SegmentSum { a, adj } => {
                let mut ga = Matrix::zeros(adj.num_entries(), g.cols());
                for e in 0..adj.num_entries() {
                    ga.row_mut(e).copy_from_slice(g.row(adj.target(e)));
                }
                accumulate(grads, *a, ga);
            }
            Op::NeighborAggregate { a, adj, mode, argmax } => {
                let m = g.cols();
                let mut ga = Matrix::zeros(adj.num_nodes(), m);
                match mode {
                    Aggregation::Sum | Aggregation::Mean => {
                        for i in 0..adj.num_nodes() {
                            let scale =
                                if *mode == Aggregation::Mean { 1.0 / adj.group_size(i).max(1) as f64 } else { 1.0 };
                            for e in adj.range(i) {
                                for (o, x) in ga.row_mut(adj.source(e)).iter_mut().zip(g.row(i)) {
                                    *o += scale * x;
                                }
                            }
                        }
                    }
                    Aggregation::Max => {
                        for i in 0..adj.num_nodes() {
                            for k in 0..m {
                                let j = argmax[i * m + k];
                                if j != usize::MAX {
                                    ga.set(j, k, ga.get(j, k) + g.get(i, k));
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SegmentSoftmax { a, adj } => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), 1);
                for i in 0..adj.num_nodes() {
                    let dot: f64 = adj.range(i).map(|e| y.get(e, 0) * g.get(e, 0)).sum();
                    for e in adj.range(i) {
                        ga.set(e, 0, y.get(e, 0) * (g.get(e, 0) - dot));
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::EdgeWeighted { alpha, h, adj } => {
                let (al, hv) = (val(*alpha), val(*h));
                let mut galpha = Matrix::zeros(al.rows(), 1);
                let mut gh = Matrix::zeros(hv.rows(), hv.cols());
                for i in 0..adj.num_nodes() {
                    let gi = g.row(i);
                    for e in adj.range(i) {
                        let j = adj.source(e);
                        let w = al.get(e, 0);
                        galpha.set(e, 0, gi.iter().zip(hv.row(j)).map(|(a, b)| a * b).sum());
                        for (o, x) in gh.row_mut(j).iter_mut().zip(gi) {
                            *o += w * x;
                        }
                    }
                }
                accumulate(grads, *alpha, galpha);
                accumulate(grads, *h, gh);
            }
            Op::SpMM { a, adj, weights } => {
                let mut ga = Matrix::zeros(adj.num_nodes(), g.cols());
                for i in 0..adj.num_nodes() {
                    for e in adj.range(i) {
                        let w = weights[e];
                        for (o, x) in ga.row_mut(adj.source(e)).iter_mut().zip(g.row(i)) {
                            *o += w * x;
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::GateDiff { a, adj, p, mode, argmax } => {
                let av = val(*a);
                let m = av.cols();
                let mut ga = Matrix::zeros(av.rows(), m);
                for i in 0..adj.num_nodes() {
                    let scale = if *mode == Aggregation::Mean { 1.0 / adj.group_size(i).max(1) as f64 } else { 1.0 };
                    for e in adj.range(i) {
                        let j = adj.source(e);
                        for k in 0..m {
                            if *mode == Aggregation::Max && argmax[i * m + k] != j {
                                continue;
                            }
                            let d = av.get(j, k) - av.get(i, k);
                            let c = scale * g.get(i, k) * abs_pow_deriv(d, *p);
                            ga.set(j, k, ga.get(j, k) + c);
                            ga.set(i, k, ga.get(i, k) - c);
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::GateDiffNorm { a, adj, p, mode, norms, argmax } => {
                let av = val(*a);
                let m = av.cols();
                let mut ga = Matrix::zeros(av.rows(), m);
                for i in 0..adj.num_nodes() {
                    let scale = if *mode == Aggregation::Mean { 1.0 / adj.group_size(i).max(1) as f64 } else { 1.0 };
                    for e in adj.range(i) {
                        if *mode == Aggregation::Max && argmax[i] != e {
                            continue;
                        }
                        let n = norms[e];
                        if n == 0.0 {
                            continue;
                        }
                        let j = adj.source(e);
                        let gi = scale * g.get(i, 0) * pow_nonneg(n, 1.0 - p);
                        for k in 0..m {
                            let d = av.get(j, k) - av.get(i, k);
                            let c = if d == 0.0 { 0.0 } else { gi * pow_nonneg(d.abs(), p - 1.0) * d.signum() };
                            ga.set(j, k, ga.get(j, k) + c);
                            ga.set(i, k, ga.get(i, k) - c);
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.nodes[p].value.cols();
                    let gp = Matrix::from_fn(g.rows(), c, |i, k| g.get(i, off + k));
                    off += c;
                    accumulate(grads, p, gp);
                }
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                let n = (r * c).max(1) as f64;
                accumulate(grads, *a, Matrix::filled(r, c, g.get(0, 0) / n));
            }
            Op::Dropout { a, mask } => {
                let data: Vec<f64> = g.as_slice().iter().zip(mask).map(|(g, m)| g * m).collect();
                let ga = Matrix::from_vec(g.rows(), g.cols(), data).expect("dropout shape");
                accumulate(grads, *a, ga);
            }
            Op::Blend { tau, x, s } => {
                let (tv, xv, sv) = (val(*tau), val(*x), val(*s));
                let col = tv.cols() == 1 && xv.cols() != 1;
                let mut gt = Matrix::zeros(tv.rows(), tv.cols());
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                let mut gs = Matrix::zeros(sv.rows(), sv.cols());
                for i in 0..xv.rows() {
                    for k in 0..xv.cols() {
                        let (tr, tc) = if col { (i, 0) } else { (i, k) };
                        let t = tv.get(tr, tc);
                        let gik = g.get(i, k);
                        gx.set(i, k, (1.0 - t) * gik);
                        gs.set(i, k, t * gik);
                        gt.set(tr, tc, gt.get(tr, tc) + (sv.get(i, k) - xv.get(i, k)) * gik);
                    }
                }
                accumulate(grads, *tau, gt);
                accumulate(grads, *x, gx);
                accumulate(grads, *s, gs);
            }
            Op::CrossEntropy { logits, labels, idx, probs } => {
                let lv = val(*logits);
                let scale = g.get(0, 0) / idx.len() as f64;
                let mut gl = Matrix::zeros(lv.rows(), lv.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..lv.cols() {
                        let onehot = if labels[i] == k { 1.0 } else { 0.0 };
                        gl.set(i, k, gl.get(i, k) + scale * (probs.get(r, k) - onehot));
                    }
                }
                accumulate(grads, *logits, gl);
            }
            Op::Nmse { pred, targets, idx, denom } => {
                let pv = val(*pred);
                let scale = g.get(0, 0) * 2.0 / denom;
                let mut gp = Matrix::zeros(pv.rows(), 1);
                for &i in idx.iter() {
                    gp.set(i, 0, gp.get(i, 0) + scale * (pv.get(i, 0) - targets[i]));
                }
                accumulate(grads, *pred, gp);
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::MatMul(a, b) | Op::Binary { a, b, .. } => vec![*a, *b],
        Op::Unary { a, .. }
        | Op::Gather { a, .. }
        | Op::SegmentSum { a, .. }
        | Op::NeighborAggregate { a, .. }
        | Op::SegmentSoftmax { a, .. }
        | Op::SpMM { a, .. }
        | Op::GateDiff { a, .. }
        | Op::GateDiffNorm { a, .. }
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Dropout { a, .. } => vec![*a],
        Op::EdgeWeighted { alpha, h, .. } => vec![*alpha, *h],
        Op::ConcatCols(parts) => parts.clone(),
        Op::Blend { tau, x, s } => vec![*tau, *x, *s],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::Nmse { pred, .. } => vec![*pred],
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: usize, g: Matrix) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{complete_graph, Graph};

    fn tri() -> Arc<Adjacency> {
        Arc::new(Adjacency::new(&complete_graph(3).unwrap(), false))
    }

    #[test]
    fn tanh_and_abs_pow_at_points() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::filled(1, 1, 0.0));
        let y = t.tanh(x);
        assert_eq!(t.value(y).get(0, 0), 0.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().get(0, 0), 1.0);

        let mut t = Tape::new();
        let x = t.constant(Matrix::filled(1, 1, -3.0));
        let y = t.abs_pow(x, 2.0).unwrap();
        assert_eq!(t.value(y).get(0, 0), 9.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().get(0, 0), -6.0);
    }

    #[test]
    fn neighbor_sum_on_triangle() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::column(vec![1.0, 2.0, 3.0]));
        let y = t.neighbor_aggregate(x, &tri(), Aggregation::Sum).unwrap();
        assert_eq!(t.value(y).as_slice(), &[5.0, 4.0, 3.0]);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut store = ParamStore::new();
        let w0 = Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let w = store.add("w", w0.clone());
        let mut t = Tape::new();
        let wv = t.param(&store, w);
        let s = t.sum(wv);
        t.backward_into(s, &mut store).unwrap();
        assert_eq!(store.grad(w).as_slice(), &[1.0; 4]);

        store.zero_grads();
        let mut t = Tape::new();
        let wv = t.param(&store, w);
        let sq = t.hadamard(wv, wv).unwrap();
        let s = t.sum(sq);
        t.backward_into(s, &mut store).unwrap();
        assert_eq!(store.grad(w).as_slice(), w0.map(|x| 2.0 * x).as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::zeros(2, 1));
        assert!(matches!(t.backward(x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        assert!(t.matmul(a, b).is_err());
        let c = t.constant(Matrix::zeros(3, 2));
        assert!(t.add(a, c).is_err());
        let r = t.constant(Matrix::zeros(1, 3));
        assert!(t.add(a, r).is_ok());
        let g = Arc::new(Adjacency::new(&Graph::from_edges(4, &[(0, 1)]).unwrap(), false));
        assert!(t.neighbor_aggregate(a, &g, Aggregation::Sum).is_err());
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::column(vec![0.0, 2.0, 2.0]));
        let y = t.neighbor_aggregate(x, &tri(), Aggregation::Max).unwrap();
        assert_eq!(t.value(y).as_slice(), &[2.0, 2.0, 2.0]);
        assert!(t.nondiff_events() > 0);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        // node 0 takes from 1 (tie with 2), node 1 from 2, node 2 from 1
        assert_eq!(g.get(x).unwrap().as_slice(), &[0.0, 2.0, 1.0]);
    }

    #[test]
    fn dropout_is_seeded_and_identity_in_eval() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::filled(4, 4, 1.0));
        let a = t.dropout(x, 0.5, 9, true).unwrap();
        let b = t.dropout(x, 0.5, 9, true).unwrap();
        assert!(t.value(a).bitwise_eq(t.value(b)));
        assert_eq!(t.dropout(x, 0.5, 9, false).unwrap(), x);
        assert!(t.value(a).as_slice().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn loss_values() {
        let mut t = Tape::new();
        let logits = t.constant(Matrix::zeros(3, 2));
        let labels = Arc::new(vec![0, 1, 1]);
        let idx = Arc::new(vec![0, 2]);
        let ce = t.cross_entropy(logits, &labels, &idx).unwrap();
        assert!((t.value(ce).get(0, 0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(t.cross_entropy(logits, &labels, &Arc::new(vec![])).is_err());

        let y = Arc::new(vec![1.0, 2.0, 4.0]);
        let all = Arc::new(vec![0, 1, 2]);
        let perfect = t.constant(Matrix::column(y.to_vec()));
        let n = t.nmse(perfect, &y, &all).unwrap();
        assert_eq!(t.value(n).get(0, 0), 0.0);
        let mean = t.constant(Matrix::filled(3, 1, 7.0 / 3.0));
        let n = t.nmse(mean, &y, &all).unwrap();
        assert!((t.value(n).get(0, 0) - 1.0).abs() < 1e-15);
    }
}
