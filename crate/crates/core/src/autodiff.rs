//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of a forward pass into flat arenas
//! (values, parent links, gather indices). Trainable tensors live in a
//! [`ParamStore`] outside the tape; the tape only references them by
//! [`ParamId`], so clearing the tape drops intermediates and leaves the
//! parameters untouched. [`Tape::backward`] walks the nodes in reverse
//! creation order (a valid reverse topological order) and accumulates
//! parameter gradients into a [`Gradients`] buffer.
//!
//! Besides the usual elementwise and linear-algebra primitives, the tape
//! offers a handful of fused soft-logic operations (affine sigmoid, noisy-or,
//! counting and nested sigmoids, log-sum-exp, softmax mixtures). They keep the
//! node count of a parse chart small without giving up exact gradients.

use std::fmt;

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Shape::Scalar => write!(f, "scalar"),
            Shape::Vector(n) => write!(f, "[{n}]"),
            Shape::Matrix(r, c) => write!(f, "[{r}x{c}]"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op} expects {expected}, got {got}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Shape,
    },
    #[error("index {index} out of bounds for parameter `{param}` of length {len}")]
    IndexOutOfBounds { param: String, index: usize, len: usize },
    #[error("{op} needs at least one input")]
    Empty { op: &'static str },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named, shaped block of trainable values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; `data.len()` must equal the product of `shape`.
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match its shape"
        );
        self.tensors.push(Tensor {
            name: name.into(),
            shape,
            data,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// A zeroed gradient buffer laid out like this store.
    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            bufs: self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }
}

/// Dense gradient buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    bufs: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.bufs[id.0]
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|g| *g *= c);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.bufs.iter().enumerate().map(|(i, b)| (ParamId(i), b.as_slice()))
    }

    pub fn max_abs(&self) -> f64 {
        self.bufs
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0f64, |m, g| m.max(g.abs()))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Constant,
    Gather(ParamId),
    GatherSum(ParamId),
    Add,
    Sub,
    Mul,
    Sigmoid,
    Exp,
    Log,
    Neg,
    Scale(f64),
    Clamp(f64, f64),
    Sum,
    Element(usize),
    Dot,
    MatVec,
    Softmax,
    LogSoftmax,
    AddN,
    LogSumExp,
    SoftmaxMix,
    AffineSigmoid { off: usize },
    NoisyOr,
    CountSigmoid { off: usize },
    NestedSigmoid { off: usize },
}

#[derive(Clone, Copy, Debug)]
struct Node {
    op: Op,
    shape: Shape,
    off: usize,
    links: (usize, usize),
    aux: (usize, usize),
}

/// Per-node adjoints produced by [`Tape::backward`].
pub struct Adjoints {
    adj: Vec<f64>,
    spans: Vec<(usize, usize)>,
}

impl Adjoints {
    pub fn get(&self, v: Var) -> &[f64] {
        let (off, len) = self.spans[v.index()];
        &self.adj[off..off + len]
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    links: Vec<Var>,
    aux: Vec<usize>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node. Parameters are unaffected.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.vals.clear();
        self.links.clear();
        self.aux.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.index()];
        &self.vals[n.off..n.off + n.shape.len()]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.index()].shape
    }

    fn push(
        &mut self,
        op: Op,
        shape: Shape,
        parents: &[Var],
        aux: &[usize],
        value: impl IntoIterator<Item = f64>,
    ) -> Var {
        let off = self.vals.len();
        self.vals.extend(value);
        debug_assert_eq!(self.vals.len() - off, shape.len());
        let links = (self.links.len(), parents.len());
        self.links.extend_from_slice(parents);
        let auxr = (self.aux.len(), aux.len());
        self.aux.extend_from_slice(aux);
        self.nodes.push(Node {
            op,
            shape,
            off,
            links,
            aux: auxr,
        });
        Var((self.nodes.len() - 1) as u32)
    }

    fn slot(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.index()];
        (n.off, n.shape.len())
    }

    pub fn constant(&mut self, shape: Shape, data: &[f64]) -> Result<Var> {
        if data.len() != shape.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "constant",
                left: shape,
                right: Shape::Vector(data.len()),
            });
        }
        Ok(self.push(Op::Constant, shape, &[], &[], data.iter().copied()))
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(Op::Constant, Shape::Scalar, &[], &[], [x])
    }

    pub fn vector(&mut self, data: &[f64]) -> Var {
        self.push(Op::Constant, Shape::Vector(data.len()), &[], &[], data.iter().copied())
    }

    fn check_indices(params: &ParamStore, id: ParamId, indices: &[usize]) -> Result<()> {
        let t = params.get(id);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.data.len()) {
            return Err(AutodiffError::IndexOutOfBounds {
                param: t.name.clone(),
                index: bad,
                len: t.data.len(),
            });
        }
        Ok(())
    }

    /// Reads selected elements of a parameter tensor into a node of `shape`.
    pub fn gather(&mut self, params: &ParamStore, id: ParamId, indices: &[usize], shape: Shape) -> Result<Var> {
        if indices.len() != shape.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather",
                left: shape,
                right: Shape::Vector(indices.len()),
            });
        }
        Self::check_indices(params, id, indices)?;
        let data = &params.get(id).data;
        Ok(self.push(Op::Gather(id), shape, &[], indices, indices.iter().map(|&i| data[i])))
    }

    /// Contiguous row `row` of a 2-D parameter tensor.
    pub fn param_row(&mut self, params: &ParamStore, id: ParamId, row: usize) -> Result<Var> {
        let width = *params.get(id).shape.last().unwrap_or(&1);
        let idx: Vec<usize> = (row * width..(row + 1) * width).collect();
        self.gather(params, id, &idx, Shape::Vector(width))
    }

    /// Scalar sum of selected parameter elements (repeats count repeatedly).
    pub fn gather_sum(&mut self, params: &ParamStore, id: ParamId, indices: &[usize]) -> Result<Var> {
        Self::check_indices(params, id, indices)?;
        let data = &params.get(id).data;
        let s: f64 = indices.iter().map(|&i| data[i]).sum();
        Ok(self.push(Op::GatherSum(id), Shape::Scalar, &[], indices, [s]))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || sb == Shape::Scalar {
            Ok(sa)
        } else if sa == Shape::Scalar {
            Ok(sb)
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            })
        }
    }

    fn binary(&mut self, op: Op, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let shape = self.broadcast(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<f64> = (0..shape.len())
            .map(|i| {
                f(
                    av[if av.len() == 1 { 0 } else { i }],
                    bv[if bv.len() == 1 { 0 } else { i }],
                )
            })
            .collect();
        Ok(self.push(op, shape, &[a, b], &[], out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let shape = self.shape(a);
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(op, shape, &[a], &[], out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid, a, sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Op::Log, a, f64::ln)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::Scale(c), a, |x| c * x)
    }

    /// Elementwise clamp into `[lo, hi]`; no gradient flows where clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp(lo, hi), a, |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        self.push(Op::Sum, Shape::Scalar, &[a], &[], [s])
    }

    /// Component `i` of `a` as a scalar.
    pub fn element(&mut self, a: Var, i: usize) -> Result<Var> {
        let len = self.shape(a).len();
        if i >= len {
            return Err(AutodiffError::IndexOutOfBounds {
                param: "element".into(),
                index: i,
                len,
            });
        }
        let x = self.value(a)[i];
        Ok(self.push(Op::Element(i), Shape::Scalar, &[a], &[], [x]))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || matches!(sa, Shape::Matrix(..)) || matches!(sb, Shape::Matrix(..)) {
            return Err(AutodiffError::ShapeMismatch {
                op: "dot",
                left: sa,
                right: sb,
            });
        }
        let s: f64 = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        Ok(self.push(Op::Dot, Shape::Scalar, &[a, b], &[], [s]))
    }

    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var> {
        let (sm, sx) = (self.shape(m), self.shape(x));
        let (r, c) = match sm {
            Shape::Matrix(r, c) if sx.len() == c && !matches!(sx, Shape::Matrix(..)) => (r, c),
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matvec",
                    left: sm,
                    right: sx,
                })
            }
        };
        let (mv, xv) = (self.value(m), self.value(x));
        let out: Vec<f64> = (0..r)
            .map(|i| mv[i * c..(i + 1) * c].iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        Ok(self.push(Op::MatVec, Shape::Vector(r), &[m, x], &[], out))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let lse = log_sum_exp(v.iter().copied());
        let out: Vec<f64> = v.iter().map(|x| (x - lse).exp()).collect();
        let shape = self.shape(a);
        self.push(Op::Softmax, shape, &[a], &[], out)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let lse = log_sum_exp(v.iter().copied());
        let out: Vec<f64> = v.iter().map(|x| x - lse).collect();
        let shape = self.shape(a);
        self.push(Op::LogSoftmax, shape, &[a], &[], out)
    }

    /// Sum of same-shaped nodes.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(AutodiffError::Empty { op: "add_n" })?;
        let shape = self.shape(first);
        let mut out = vec![0.0; shape.len()];
        for &x in xs {
            if self.shape(x) != shape {
                return Err(AutodiffError::ShapeMismatch {
                    op: "add_n",
                    left: shape,
                    right: self.shape(x),
                });
            }
            for (o, v) in out.iter_mut().zip(self.value(x)) {
                *o += v;
            }
        }
        Ok(self.push(Op::AddN, shape, xs, &[], out))
    }

    /// `log Σ_k exp(s_k)` over scalar nodes.
    pub fn log_sum_exp(&mut self, scores: &[Var]) -> Result<Var> {
        if scores.is_empty() {
            return Err(AutodiffError::Empty { op: "log_sum_exp" });
        }
        for &s in scores {
            if self.shape(s) != Shape::Scalar {
                return Err(AutodiffError::BadShape {
                    op: "log_sum_exp",
                    expected: "scalar inputs",
                    got: self.shape(s),
                });
            }
        }
        let v = log_sum_exp(scores.iter().map(|&s| self.scalar_value(s)));
        Ok(self.push(Op::LogSumExp, Shape::Scalar, scores, &[], [v]))
    }

    /// `Σ_k softmax(s)_k · y_k` for scalar scores and same-shaped items.
    pub fn softmax_mix(&mut self, scores: &[Var], items: &[Var]) -> Result<Var> {
        if scores.is_empty() {
            return Err(AutodiffError::Empty { op: "softmax_mix" });
        }
        if scores.len() != items.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_mix",
                left: Shape::Vector(scores.len()),
                right: Shape::Vector(items.len()),
            });
        }
        let shape = self.shape(items[0]);
        for &y in items {
            if self.shape(y) != shape {
                return Err(AutodiffError::ShapeMismatch {
                    op: "softmax_mix",
                    left: shape,
                    right: self.shape(y),
                });
            }
        }
        let w = self.mix_weights(scores);
        let mut out = vec![0.0; shape.len()];
        for (wk, &y) in w.iter().zip(items) {
            for (o, v) in out.iter_mut().zip(self.value(y)) {
                *o += wk * v;
            }
        }
        let mut parents = Vec::with_capacity(scores.len() * 2);
        parents.extend_from_slice(scores);
        parents.extend_from_slice(items);
        Ok(self.push(Op::SoftmaxMix, shape, &parents, &[], out))
    }

    fn mix_weights(&self, scores: &[Var]) -> Vec<f64> {
        let s: Vec<f64> = scores.iter().map(|&v| self.scalar_value(v)).collect();
        let lse = log_sum_exp(s.iter().copied());
        s.iter().map(|x| (x - lse).exp()).collect()
    }

    /// `σ(Σ_k c[off+k]·x_k + c[off+K])` elementwise, for `K = xs.len()` same-shaped inputs.
    pub fn affine_sigmoid(&mut self, coef: Var, off: usize, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(AutodiffError::Empty { op: "affine_sigmoid" })?;
        let shape = self.shape(first);
        for &x in xs {
            if self.shape(x) != shape {
                return Err(AutodiffError::ShapeMismatch {
                    op: "affine_sigmoid",
                    left: shape,
                    right: self.shape(x),
                });
            }
        }
        self.check_coef("affine_sigmoid", coef, off + xs.len() + 1)?;
        let c = &self.value(coef)[off..off + xs.len() + 1];
        let vals: Vec<&[f64]> = xs.iter().map(|&x| self.value(x)).collect();
        let out = kernels::affine_sigmoid(c, &vals);
        let mut parents = vec![coef];
        parents.extend_from_slice(xs);
        Ok(self.push(Op::AffineSigmoid { off }, shape, &parents, &[], out))
    }

    fn check_coef(&self, op: &'static str, coef: Var, need: usize) -> Result<()> {
        if self.shape(coef).len() < need {
            return Err(AutodiffError::BadShape {
                op,
                expected: "a longer coefficient vector",
                got: self.shape(coef),
            });
        }
        Ok(())
    }

    /// `1 − Π_j (1 − A_ij·p_j)` for a square matrix `A` (or its row-major
    /// flattening) and a vector `p`.
    pub fn noisy_or(&mut self, a: Var, p: Var) -> Result<Var> {
        let (sa, sp) = (self.shape(a), self.shape(p));
        let n = sp.len();
        let square = match sa {
            Shape::Matrix(r, c) => r == n && c == n,
            Shape::Vector(l) => l == n * n,
            Shape::Scalar => n == 1,
        };
        let n = match square && !matches!(sp, Shape::Matrix(..)) {
            true => n,
            false => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "noisy_or",
                    left: sa,
                    right: sp,
                })
            }
        };
        let out = kernels::noisy_or(self.value(a), self.value(p), n);
        Ok(self.push(Op::NoisyOr, Shape::Vector(n), &[a, p], &[], out))
    }

    /// `σ(c0·Σp + c1·Σ(1−p) + c2·|p| + c3)` with `c = coef[off..off+4]`.
    pub fn count_sigmoid(&mut self, coef: Var, off: usize, p: Var) -> Result<Var> {
        self.check_coef("count_sigmoid", coef, off + 4)?;
        let v = kernels::count_sigmoid(&self.value(coef)[off..off + 4], self.value(p));
        Ok(self.push(Op::CountSigmoid { off }, Shape::Scalar, &[coef, p], &[], [v]))
    }

    /// `σ(c3·Σ_i σ(c0·l_i + c1·r_i + c2) + c4)` with `c = coef[off..off+5]`.
    pub fn nested_sigmoid(&mut self, coef: Var, off: usize, l: Var, r: Var) -> Result<Var> {
        if self.shape(l) != self.shape(r) {
            return Err(AutodiffError::ShapeMismatch {
                op: "nested_sigmoid",
                left: self.shape(l),
                right: self.shape(r),
            });
        }
        self.check_coef("nested_sigmoid", coef, off + 5)?;
        let v = kernels::nested_sigmoid(&self.value(coef)[off..off + 5], self.value(l), self.value(r));
        Ok(self.push(Op::NestedSigmoid { off }, Shape::Scalar, &[coef, l, r], &[], [v]))
    }

    /// Backpropagates from the scalar `root`, accumulating parameter
    /// gradients into `grads` and returning the adjoint of every node.
    pub fn backward(&self, root: Var, grads: &mut Gradients) -> Result<Adjoints> {
        if self.shape(root) != Shape::Scalar {
            return Err(AutodiffError::BadShape {
                op: "backward",
                expected: "a scalar root",
                got: self.shape(root),
            });
        }
        let mut adj = vec![0.0; self.vals.len()];
        adj[self.nodes[root.index()].off] = 1.0;
        for idx in (0..=root.index()).rev() {
            let node = self.nodes[idx];
            let (off, len) = (node.off, node.shape.len());
            if adj[off..off + len].iter().all(|&g| g == 0.0) {
                continue;
            }
            self.backward_node(&node, &mut adj, grads);
        }
        Ok(Adjoints {
            adj,
            spans: self.nodes.iter().map(|n| (n.off, n.shape.len())).collect(),
        })
    }

    fn backward_node(&self, node: &Node, adj: &mut [f64], grads: &mut Gradients) {
        let (off, len) = (node.off, node.shape.len());
        let parents = &self.links[node.links.0..node.links.0 + node.links.1];
        let aux = &self.aux[node.aux.0..node.aux.0 + node.aux.1];
        let g: Vec<f64> = adj[off..off + len].to_vec();
        let out = &self.vals[off..off + len];
        match node.op {
            Op::Constant => {}
            Op::Gather(id) => {
                let buf = grads.get_mut(id);
                for (&i, gi) in aux.iter().zip(&g) {
                    buf[i] += gi;
                }
            }
            Op::GatherSum(id) => {
                let buf = grads.get_mut(id);
                for &i in aux {
                    buf[i] += g[0];
                }
            }
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (parents[0], parents[1]);
                let (ao, al) = self.slot(a);
                let (bo, bl) = self.slot(b);
                for (i, &gi) in g.iter().enumerate().take(len) {
                    let ia = ao + if al == 1 { 0 } else { i };
                    let ib = bo + if bl == 1 { 0 } else { i };
                    let (ga, gb) = match node.op {
                        Op::Add => (gi, gi),
                        Op::Sub => (gi, -gi),
                        _ => (gi * self.vals[ib], gi * self.vals[ia]),
                    };
                    adj[ia] += ga;
                    adj[ib] += gb;
                }
            }
            Op::Element(i) => {
                let (ao, _) = self.slot(parents[0]);
                adj[ao + i] += g[0];
            }
            Op::Sigmoid => {
                let (ao, _) = self.slot(parents[0]);
                for i in 0..len {
                    adj[ao + i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }
            Op::Exp => {
                let (ao, _) = self.slot(parents[0]);
                for i in 0..len {
                    adj[ao + i] += g[i] * out[i];
                }
            }
            Op::Log => {
                let (ao, _) = self.slot(parents[0]);
                for i in 0..len {
                    adj[ao + i] += g[i] / self.vals[ao + i];
                }
            }
            Op::Neg => {
                let (ao, _) = self.slot(parents[0]);
                for i in 0..len {
                    adj[ao + i] -= g[i];
                }
            }
            Op::Scale(c) => {
                let (ao, _) = self.slot(parents[0]);
                for i in 0..len {
                    adj[ao + i] += c * g[i];
                }
            }
            Op::Clamp(lo, hi) => {
                let (ao, _) = self.slot(parents[0]);
                for i in 0..len {
                    let x = self.vals[ao + i];
                    if x >= lo && x <= hi {
                        adj[ao + i] += g[i];
                    }
                }
            }
            Op::Sum => {
                let (ao, al) = self.slot(parents[0]);
                for i in 0..al {
                    adj[ao + i] += g[0];
                }
            }
            Op::Dot => {
                let (ao, al) = self.slot(parents[0]);
                let (bo, _) = self.slot(parents[1]);
                for i in 0..al {
                    let (x, y) = (self.vals[ao + i], self.vals[bo + i]);
                    adj[ao + i] += g[0] * y;
                    adj[bo + i] += g[0] * x;
                }
            }
            Op::MatVec => {
                let (mo, _) = self.slot(parents[0]);
                let (xo, c) = self.slot(parents[1]);
                for (r, gr) in g.iter().enumerate() {
                    for k in 0..c {
                        adj[mo + r * c + k] += gr * self.vals[xo + k];
                        adj[xo + k] += gr * self.vals[mo + r * c + k];
                    }
                }
            }
            Op::Softmax => {
                let (ao, _) = self.slot(parents[0]);
                let gy: f64 = g.iter().zip(out).map(|(a, b)| a * b).sum();
                for i in 0..len {
                    adj[ao + i] += out[i] * (g[i] - gy);
                }
            }
            Op::LogSoftmax => {
                let (ao, _) = self.slot(parents[0]);
                let gs: f64 = g.iter().sum();
                for i in 0..len {
                    adj[ao + i] += g[i] - out[i].exp() * gs;
                }
            }
            Op::AddN => {
                for &p in parents {
                    let (po, _) = self.slot(p);
                    for i in 0..len {
                        adj[po + i] += g[i];
                    }
                }
            }
            Op::LogSumExp => {
                for &p in parents {
                    let (po, _) = self.slot(p);
                    adj[po] += g[0] * (self.vals[po] - out[0]).exp();
                }
            }
            Op::SoftmaxMix => {
                let k = parents.len() / 2;
                let (scores, items) = parents.split_at(k);
                let w = self.mix_weights(scores);
                let g_out: f64 = g.iter().zip(out).map(|(a, b)| a * b).sum();
                for ((&s, &y), wk) in scores.iter().zip(items).zip(&w) {
                    let (so, _) = self.slot(s);
                    let (yo, _) = self.slot(y);
                    let mut gy = 0.0;
                    for i in 0..len {
                        gy += g[i] * self.vals[yo + i];
                        adj[yo + i] += wk * g[i];
                    }
                    adj[so] += wk * (gy - g_out);
                }
            }
            Op::AffineSigmoid { off: coff } => {
                let (co, _) = self.slot(parents[0]);
                let xs = &parents[1..];
                let k = xs.len();
                let mut dc = vec![0.0; k + 1];
                for i in 0..len {
                    let s = g[i] * out[i] * (1.0 - out[i]);
                    if s == 0.0 {
                        continue;
                    }
                    for (j, &x) in xs.iter().enumerate() {
                        let (xo, _) = self.slot(x);
                        dc[j] += s * self.vals[xo + i];
                        adj[xo + i] += s * self.vals[co + coff + j];
                    }
                    dc[k] += s;
                }
                for (j, d) in dc.iter().enumerate() {
                    adj[co + coff + j] += d;
                }
            }
            Op::NoisyOr => {
                let (ao, _) = self.slot(parents[0]);
                let (po, n) = self.slot(parents[1]);
                let a = &self.vals[ao..ao + n * n];
                let p = &self.vals[po..po + n];
                let mut da = vec![0.0; n * n];
                let mut dp = vec![0.0; n];
                kernels::noisy_or_backward(a, p, n, &g, &mut da, &mut dp);
                for (i, d) in da.iter().enumerate() {
                    adj[ao + i] += d;
                }
                for (i, d) in dp.iter().enumerate() {
                    adj[po + i] += d;
                }
            }
            Op::CountSigmoid { off: coff } => {
                let (co, _) = self.slot(parents[0]);
                let (po, n) = self.slot(parents[1]);
                let c: Vec<f64> = self.vals[co + coff..co + coff + 4].to_vec();
                let d = g[0] * out[0] * (1.0 - out[0]);
                let sp: f64 = self.vals[po..po + n].iter().sum();
                adj[co + coff] += d * sp;
                adj[co + coff + 1] += d * (n as f64 - sp);
                adj[co + coff + 2] += d * n as f64;
                adj[co + coff + 3] += d;
                for i in 0..n {
                    adj[po + i] += d * (c[0] - c[1]);
                }
            }
            Op::NestedSigmoid { off: coff } => {
                let (co, _) = self.slot(parents[0]);
                let (lo, n) = self.slot(parents[1]);
                let (ro, _) = self.slot(parents[2]);
                let c: Vec<f64> = self.vals[co + coff..co + coff + 5].to_vec();
                let d = g[0] * out[0] * (1.0 - out[0]);
                let mut total = 0.0;
                let mut dc = [0.0; 3];
                for i in 0..n {
                    let (l, r) = (self.vals[lo + i], self.vals[ro + i]);
                    let inner = sigmoid(c[0] * l + c[1] * r + c[2]);
                    total += inner;
                    let di = d * c[3] * inner * (1.0 - inner);
                    dc[0] += di * l;
                    dc[1] += di * r;
                    dc[2] += di;
                    adj[lo + i] += di * c[0];
                    adj[ro + i] += di * c[1];
                }
                for (j, v) in dc.iter().enumerate() {
                    adj[co + coff + j] += v;
                }
                adj[co + coff + 3] += d * total;
                adj[co + coff + 4] += d;
            }
        }
    }
}

/// Plain forward kernels behind the fused tape operations, usable without a tape.
pub mod kernels {
    pub use super::sigmoid;

    pub fn affine_sigmoid(c: &[f64], xs: &[&[f64]]) -> Vec<f64> {
        let k = xs.len();
        let n = xs[0].len();
        (0..n)
            .map(|i| {
                let z: f64 = xs.iter().enumerate().map(|(j, x)| c[j] * x[i]).sum::<f64>() + c[k];
                sigmoid(z)
            })
            .collect()
    }

    pub fn noisy_or(a: &[f64], p: &[f64], n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| 1.0 - (0..n).map(|j| 1.0 - a[i * n + j] * p[j]).product::<f64>())
            .collect()
    }

    pub(super) fn noisy_or_backward(a: &[f64], p: &[f64], n: usize, g: &[f64], da: &mut [f64], dp: &mut [f64]) {
        let mut prefix = vec![1.0; n + 1];
        let mut suffix = vec![1.0; n + 1];
        for i in 0..n {
            if g[i] == 0.0 {
                continue;
            }
            let row = &a[i * n..(i + 1) * n];
            for j in 0..n {
                prefix[j + 1] = prefix[j] * (1.0 - row[j] * p[j]);
            }
            for j in (0..n).rev() {
                suffix[j] = suffix[j + 1] * (1.0 - row[j] * p[j]);
            }
            for j in 0..n {
                let others = prefix[j] * suffix[j + 1];
                da[i * n + j] += g[i] * p[j] * others;
                dp[j] += g[i] * row[j] * others;
            }
        }
    }

    pub fn count_sigmoid(c: &[f64], p: &[f64]) -> f64 {
        let sp: f64 = p.iter().sum();
        let n = p.len() as f64;
        sigmoid(c[0] * sp + c[1] * (n - sp) + c[2] * n + c[3])
    }

    pub fn nested_sigmoid(c: &[f64], l: &[f64], r: &[f64]) -> f64 {
        let total: f64 = l.iter().zip(r).map(|(x, y)| sigmoid(c[0] * x + c[1] * y + c[2])).sum();
        sigmoid(c[3] * total + c[4])
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error used by [`gradient_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(GRAD_FLOOR)
}

/// Below this magnitude a central difference with h around 1e-5 is dominated
/// by round-off (eps * |f| / h reaches ~1e-10 for a loss of size 10), so tiny
/// gradients are compared against this floor instead of their own size.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Compares analytic gradients against central differences with step `h`.
///
/// `f(params, grads)` must return the scalar objective and, when `grads` is
/// `Some`, accumulate its analytic gradient there. Every scalar of every
/// parameter tensor is perturbed.
pub fn gradient_check<F>(params: &mut ParamStore, h: f64, mut f: F) -> GradCheckReport
where
    F: FnMut(&ParamStore, Option<&mut Gradients>) -> f64,
{
    let mut analytic = params.zero_grads();
    f(params, Some(&mut analytic));
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        for i in 0..params.get(id).data.len() {
            let orig = params.get(id).data[i];
            params.get_mut(id).data[i] = orig + h;
            let up = f(params, None);
            params.get_mut(id).data[i] = orig - h;
            let down = f(params, None);
            params.get_mut(id).data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id)[i];
            let err = relative_error(a, numeric);
            if report.checked == 0 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = params.get(id).name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
            report.checked += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = t.scalar(0.0);
        let y = t.sigmoid(x);
        assert_eq!(t.scalar_value(y), 0.5);
        let mut g = ParamStore::new().zero_grads();
        let adj = t.backward(y, &mut g).unwrap();
        assert_eq!(adj.get(x)[0], 0.25);
    }

    #[test]
    fn log_at_one() {
        let mut t = Tape::new();
        let x = t.scalar(1.0);
        let y = t.log(x);
        assert_eq!(t.scalar_value(y), 0.0);
        let mut g = ParamStore::new().zero_grads();
        let adj = t.backward(y, &mut g).unwrap();
        assert_eq!(adj.get(x)[0], 1.0);
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let a = t.vector(&[2.0, 3.0]);
        let b = t.vector(&[4.0, 5.0]);
        let c = t.mul(a, b).unwrap();
        assert_eq!(t.value(c), &[8.0, 15.0]);
        let s = t.sum(c);
        let mut g = ParamStore::new().zero_grads();
        let adj = t.backward(s, &mut g).unwrap();
        assert_eq!(adj.get(a), &[4.0, 5.0]);
        assert_eq!(adj.get(b), &[2.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.vector(&[1.0, 2.0]);
        let b = t.vector(&[1.0, 2.0, 3.0]);
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
        let m = t.constant(Shape::Matrix(2, 2), &[1.0; 4]).unwrap();
        assert!(t.matvec(m, b).is_err());
        assert!(t.dot(a, b).is_err());
    }

    #[test]
    fn scalar_broadcast() {
        let mut t = Tape::new();
        let a = t.vector(&[1.0, 2.0, 3.0]);
        let s = t.scalar(2.0);
        let m = t.mul(s, a).unwrap();
        assert_eq!(t.value(m), &[2.0, 4.0, 6.0]);
        let total = t.sum(m);
        let mut g = ParamStore::new().zero_grads();
        let adj = t.backward(total, &mut g).unwrap();
        assert_eq!(adj.get(s), &[6.0]);
    }

    #[test]
    fn softmax_symmetric_and_dot() {
        let mut t = Tape::new();
        let x = t.vector(&[0.0, 0.0]);
        let y = t.softmax(x);
        assert_eq!(t.value(y), &[0.5, 0.5]);
        let a = t.vector(&[1.0, 2.0]);
        let b = t.vector(&[3.0, 4.0]);
        let d = t.dot(a, b).unwrap();
        assert_eq!(t.scalar_value(d), 11.0);
    }

    #[test]
    fn gather_accumulates_into_params() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", vec![3], vec![1.0, 2.0, 3.0]);
        let mut t = Tape::new();
        let v = t.gather(&ps, id, &[2, 0, 2], Shape::Vector(3)).unwrap();
        assert_eq!(t.value(v), &[3.0, 1.0, 3.0]);
        let s = t.sum(v);
        let mut g = ps.zero_grads();
        t.backward(s, &mut g).unwrap();
        assert_eq!(g.get(id), &[1.0, 0.0, 2.0]);
        assert!(t.gather(&ps, id, &[3], Shape::Scalar).is_err());
    }

    #[test]
    fn clear_keeps_params() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", vec![2], vec![1.0, 2.0]);
        let mut t = Tape::new();
        let v = t.gather(&ps, id, &[0, 1], Shape::Vector(2)).unwrap();
        t.exp(v);
        assert_eq!(t.len(), 2);
        t.clear();
        assert!(t.is_empty());
        assert_eq!(ps.get(id).data, vec![1.0, 2.0]);
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let mut ps = ParamStore::new();
        ps.add("w", vec![3], vec![0.3, -0.2, 0.1]);
        let r = gradient_check(&mut ps, 1e-5, |_, _| 4.2);
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn fused_kernels_match_hand_values() {
        let mut t = Tape::new();
        let c = t.vector(&[10.0, 10.0, -15.0]);
        let l = t.vector(&[1.0, 0.0, 1.0]);
        let r = t.vector(&[1.0, 1.0, 0.0]);
        let o = t.affine_sigmoid(c, 0, &[l, r]).unwrap();
        let v = t.value(o).to_vec();
        assert!(close(v[0], sigmoid(5.0), 1e-15));
        assert!(close(v[1], sigmoid(-5.0), 1e-15));
        let a = t
            .constant(Shape::Matrix(3, 3), &[0., 1., 1., 0., 0., 0., 0., 0., 0.])
            .unwrap();
        let p = t.vector(&[0.0, 0.5, 0.5]);
        let n = t.noisy_or(a, p).unwrap();
        assert!(close(t.value(n)[0], 0.75, 1e-15));
        assert_eq!(&t.value(n)[1..], &[0.0, 0.0]);
    }
}
