//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on a [`Tape`] is a 2-D matrix (scalars are `1 x 1`). The
//! backward pass can either produce plain matrices ([`Tape::gradients`]) or
//! be recorded onto the tape itself ([`Tape::grad`]), in which case the
//! returned gradients are ordinary tape values and can be differentiated
//! again. Second input derivatives are obtained this way (double backward).
//!
//! Node ids grow monotonically, so id order is a topological order and
//! gradient accumulation is deterministic.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};
use thiserror::Error;

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite value produced by node {node} ({op})")]
    NumericFailure { node: usize, op: &'static str },
    #[error("{op} domain error: argument {value} is outside the domain")]
    Domain { op: &'static str, value: f64 },
}

/// Elementwise functions whose derivatives of every order are known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryFn {
    Tanh,
    Sigmoid,
    Swish,
    /// ELU with alpha = 1.
    Elu,
    Relu,
    Exp,
    Log,
    /// `x^p` for a fixed real exponent.
    Pow(f64),
}

impl UnaryFn {
    fn name(self) -> &'static str {
        match self {
            UnaryFn::Tanh => "tanh",
            UnaryFn::Sigmoid => "sigmoid",
            UnaryFn::Swish => "swish",
            UnaryFn::Elu => "elu",
            UnaryFn::Relu => "relu",
            UnaryFn::Exp => "exp",
            UnaryFn::Log => "log",
            UnaryFn::Pow(_) => "pow",
        }
    }

    /// Evaluate the `order`-th derivative of the function over a matrix.
    pub fn eval(self, order: u32, x: &Mat) -> Mat {
        let base = self.base(x);
        self.eval_with_base(order, x, base.as_ref())
    }

    /// Shared transcendental part (sigma or tanh of the input), if any.
    fn base(self, x: &Mat) -> Option<Mat> {
        match self {
            UnaryFn::Tanh => Some(x.mapv(f64::tanh)),
            UnaryFn::Sigmoid | UnaryFn::Swish => Some(x.mapv(sigmoid)),
            _ => None,
        }
    }

    fn eval_with_base(self, order: u32, x: &Mat, base: Option<&Mat>) -> Mat {
        match self {
            UnaryFn::Tanh | UnaryFn::Sigmoid => {
                let poly = if self == UnaryFn::Tanh { tanh_poly(order) } else { sigmoid_poly(order) };
                base.expect("base values").mapv(|t| horner(&poly, t))
            }
            UnaryFn::Swish => {
                // d^n (x s) = n s^(n-1) + x s^(n)
                let p_n = sigmoid_poly(order);
                let p_prev = if order > 0 { sigmoid_poly(order - 1) } else { Vec::new() };
                let n = order as f64;
                let mut out = x.clone();
                ndarray::Zip::from(&mut out).and(base.expect("base values")).for_each(|v, &s| {
                    *v = *v * horner(&p_n, s) + n * horner(&p_prev, s);
                });
                out
            }
            UnaryFn::Elu => x.mapv(|v| match (order, v > 0.0) {
                (0, true) => v,
                (0, false) => v.exp_m1(),
                (1, true) => 1.0,
                (_, true) => 0.0,
                (_, false) => v.exp(),
            }),
            UnaryFn::Relu => x.mapv(|v| match (order, v > 0.0) {
                (0, true) => v,
                (1, true) => 1.0,
                _ => 0.0,
            }),
            UnaryFn::Exp => x.mapv(f64::exp),
            UnaryFn::Log => {
                if order == 0 {
                    x.mapv(f64::ln)
                } else {
                    // (-1)^(n-1) (n-1)! x^-n
                    let n = order as i32;
                    let mut c = 1.0;
                    for k in 1..n {
                        c *= k as f64;
                    }
                    if n % 2 == 0 {
                        c = -c;
                    }
                    x.mapv(|v| c * v.powi(-n))
                }
            }
            UnaryFn::Pow(p) => {
                let mut c = 1.0;
                for k in 0..order {
                    c *= p - k as f64;
                }
                let e = p - order as f64;
                x.mapv(|v| if c == 0.0 { 0.0 } else { c * v.powf(e) })
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Coefficients (ascending powers) of p_n with p_0(s) = s and
/// p_{n+1}(s) = p_n'(s) * s(1 - s), so that sigma^(n) = p_n(sigma).
fn sigmoid_poly(order: u32) -> Vec<f64> {
    let mut p = vec![0.0, 1.0];
    for _ in 0..order {
        p = chain_poly(&p, &[0.0, 1.0, -1.0]);
    }
    p
}

/// Same recurrence for tanh: q_{n+1}(t) = q_n'(t) * (1 - t^2).
fn tanh_poly(order: u32) -> Vec<f64> {
    let mut p = vec![0.0, 1.0];
    for _ in 0..order {
        p = chain_poly(&p, &[1.0, 0.0, -1.0]);
    }
    p
}

fn chain_poly(p: &[f64], inner: &[f64]) -> Vec<f64> {
    let deriv: Vec<f64> = p.iter().enumerate().skip(1).map(|(k, c)| k as f64 * c).collect();
    let mut out = vec![0.0; deriv.len() + inner.len()];
    for (i, a) in deriv.iter().enumerate() {
        for (j, b) in inner.iter().enumerate() {
            out[i + j] += a * b;
        }
    }
    while out.len() > 1 && *out.last().unwrap() == 0.0 {
        out.pop();
    }
    out
}

fn horner(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var, f64),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    /// n x m -> 1 x m
    ReduceRows(Var),
    /// 1 x m -> n x m
    RepeatRows(Var, usize),
    /// n x m -> n x 1
    ReduceCols(Var),
    /// n x 1 -> n x m
    RepeatCols(Var, usize),
    SumAll(Var),
    BroadcastAll(Var, usize, usize),
    SliceCols { a: Var, start: usize, len: usize },
    PadCols { a: Var, start: usize, total: usize },
    ConcatCols(Var, Var),
    Unary(UnaryFn, u32, Var),
    Softmax(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul { .. } => "matmul",
            Op::ReduceRows(_) => "reduce_rows",
            Op::RepeatRows(..) => "repeat_rows",
            Op::ReduceCols(_) => "reduce_cols",
            Op::RepeatCols(..) => "repeat_cols",
            Op::SumAll(_) => "sum_all",
            Op::BroadcastAll(..) => "broadcast_all",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Unary(f, _, _) => f.name(),
            Op::Softmax(_) => "softmax",
        }
    }

    fn inputs(&self) -> [Option<Var>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatCols(a, b) => [Some(a), Some(b)],
            Op::MatMul { a, b, .. } => [Some(a), Some(b)],
            Op::Scale(a, _)
            | Op::Shift(a, _)
            | Op::ReduceRows(a)
            | Op::RepeatRows(a, _)
            | Op::ReduceCols(a)
            | Op::RepeatCols(a, _)
            | Op::SumAll(a)
            | Op::BroadcastAll(a, _, _)
            | Op::SliceCols { a, .. }
            | Op::PadCols { a, .. }
            | Op::Unary(_, _, a)
            | Op::Softmax(a) => [Some(a), None],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Result of a recorded ([`Tape::grad`]) or plain ([`Tape::gradients`])
/// backward pass. `detached` lists positions in `wrt` that are not ancestors
/// of the differentiated output; their gradient is zero.
#[derive(Debug, Clone)]
pub struct GradOutput<T> {
    pub grads: Vec<T>,
    pub detached: Vec<usize>,
}

/// A single-threaded computation tape.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
    /// Existing unary nodes keyed by function, order and input.
    unary_nodes: HashMap<(UnaryKey, u32, usize), Var>,
    /// Sigma or tanh of unary inputs, shared by all derivative orders.
    unary_base: HashMap<(UnaryKey, usize), Mat>,
}

type UnaryKey = (u8, u64);

fn unary_key(f: UnaryFn) -> UnaryKey {
    match f {
        UnaryFn::Tanh => (0, 0),
        UnaryFn::Sigmoid => (1, 0),
        UnaryFn::Swish => (1, 1),
        UnaryFn::Elu => (2, 0),
        UnaryFn::Relu => (3, 0),
        UnaryFn::Exp => (4, 0),
        UnaryFn::Log => (5, 0),
        UnaryFn::Pow(p) => (6, p.to_bits()),
    }
}

/// Key of the cached base values: sigmoid and swish share sigma.
fn base_key(f: UnaryFn) -> UnaryKey {
    (unary_key(f).0, 0)
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar_value on a {:?} node", m.dim());
        m[(0, 0)]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that gradients can be taken with respect to.
    pub fn variable(&mut self, value: Mat) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push_leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.variable(Array2::from_elem((1, 1), value))
    }

    /// Replace the value of a leaf. Call [`Tape::replay`] to propagate it.
    pub fn set_value(&mut self, leaf: Var, value: Mat) {
        let node = &mut self.nodes[leaf.0];
        assert!(matches!(node.op, Op::Leaf), "set_value on a non-leaf node");
        assert_eq!(node.value.dim(), value.dim(), "set_value shape change");
        node.value = value;
    }

    /// Recompute every derived node from the current leaf values.
    pub fn replay(&mut self) {
        self.first_non_finite = None;
        self.unary_base.clear();
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op;
            let value = if matches!(op, Op::Leaf) {
                continue;
            } else {
                self.eval_node(&op)
            };
            if self.first_non_finite.is_none() && !all_finite(&value) {
                self.first_non_finite = Some(i);
            }
            self.nodes[i].value = value;
        }
    }

    /// Error naming the first node whose value became non-finite, if any.
    pub fn check_finite(&self) -> Result<(), AutodiffError> {
        match self.first_non_finite {
            None => Ok(()),
            Some(node) => Err(AutodiffError::NumericFailure {
                node,
                op: self.nodes[node].op.name(),
            }),
        }
    }

    fn push_leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.first_non_finite.is_none() && !all_finite(&value) {
            self.first_non_finite = Some(id);
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(id)
    }

    fn push(&mut self, op: Op) -> Var {
        if let Op::Unary(f, order, a) = op {
            if let Some(&v) = self.unary_nodes.get(&(unary_key(f), order, a.0)) {
                return v;
            }
        }
        let value = self.eval_node(&op);
        let requires_grad = op
            .inputs()
            .iter()
            .flatten()
            .any(|v| self.nodes[v.0].requires_grad);
        let id = self.nodes.len();
        if self.first_non_finite.is_none() && !all_finite(&value) {
            self.first_non_finite = Some(id);
        }
        self.nodes.push(Node { value, op, requires_grad });
        if let Op::Unary(f, order, a) = op {
            self.unary_nodes.insert((unary_key(f), order, a.0), Var(id));
        }
        Var(id)
    }

    fn eval_node(&mut self, op: &Op) -> Mat {
        match *op {
            Op::Unary(f, order, a) => {
                let key = (base_key(f), a.0);
                if !self.unary_base.contains_key(&key) {
                    if let Some(b) = f.base(&self.nodes[a.0].value) {
                        self.unary_base.insert(key, b);
                    }
                }
                f.eval_with_base(order, &self.nodes[a.0].value, self.unary_base.get(&key))
            }
            _ => self.eval(op),
        }
    }

    /// `order`-th derivative of `f` at node `a` without modifying the tape.
    fn unary_derivative(&self, f: UnaryFn, order: u32, a: Var) -> std::borrow::Cow<'_, Mat> {
        use std::borrow::Cow;
        if let Some(v) = self.unary_nodes.get(&(unary_key(f), order, a.0)) {
            return Cow::Borrowed(&self.nodes[v.0].value);
        }
        let x = &self.nodes[a.0].value;
        Cow::Owned(match self.unary_base.get(&(base_key(f), a.0)) {
            Some(b) => f.eval_with_base(order, x, Some(b)),
            None => f.eval(order, x),
        })
    }

    fn eval(&self, op: &Op) -> Mat {
        let val = |v: Var| &self.nodes[v.0].value;
        match *op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::Add(a, b) => {
                same_shape("add", val(a), val(b));
                val(a) + val(b)
            }
            Op::Sub(a, b) => {
                same_shape("sub", val(a), val(b));
                val(a) - val(b)
            }
            Op::Mul(a, b) => {
                same_shape("mul", val(a), val(b));
                val(a) * val(b)
            }
            Op::Scale(a, c) => val(a) * c,
            Op::Shift(a, c) => val(a) + c,
            Op::MatMul { a, b, ta, tb } => matmul(val(a), val(b), ta, tb),
            Op::ReduceRows(a) => val(a).sum_axis(Axis(0)).insert_axis(Axis(0)),
            Op::RepeatRows(a, n) => {
                let m = val(a);
                assert_eq!(m.nrows(), 1, "repeat_rows expects a single row");
                m.broadcast((n, m.ncols())).unwrap().to_owned()
            }
            Op::ReduceCols(a) => val(a).sum_axis(Axis(1)).insert_axis(Axis(1)),
            Op::RepeatCols(a, k) => {
                let m = val(a);
                assert_eq!(m.ncols(), 1, "repeat_cols expects a single column");
                m.broadcast((m.nrows(), k)).unwrap().to_owned()
            }
            Op::SumAll(a) => Array2::from_elem((1, 1), val(a).sum()),
            Op::BroadcastAll(a, r, c) => Array2::from_elem((r, c), val(a)[(0, 0)]),
            Op::SliceCols { a, start, len } => val(a).slice(s![.., start..start + len]).to_owned(),
            Op::PadCols { a, start, total } => {
                let m = val(a);
                let mut out = Array2::zeros((m.nrows(), total));
                out.slice_mut(s![.., start..start + m.ncols()]).assign(m);
                out
            }
            Op::ConcatCols(a, b) => {
                ndarray::concatenate(Axis(1), &[val(a).view(), val(b).view()]).expect("concat_cols row mismatch")
            }
            Op::Unary(f, order, a) => f.eval(order, val(a)),
            Op::Softmax(a) => softmax_rows(val(a)),
        }
    }

    // ---- primitive operations -------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + c` elementwise.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Shift(a, c))
    }

    /// `op(a) . op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        self.push(Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn reduce_rows(&mut self, a: Var) -> Var {
        self.push(Op::ReduceRows(a))
    }

    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        self.push(Op::RepeatRows(a, n))
    }

    pub fn reduce_cols(&mut self, a: Var) -> Var {
        self.push(Op::ReduceCols(a))
    }

    pub fn repeat_cols(&mut self, a: Var, k: usize) -> Var {
        self.push(Op::RepeatCols(a, k))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.push(Op::SumAll(a))
    }

    pub fn broadcast_all(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        self.push(Op::BroadcastAll(a, rows, cols))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.value(a).ncols(), "slice_cols out of range");
        self.push(Op::SliceCols { a, start, len })
    }

    pub fn column(&mut self, a: Var, j: usize) -> Var {
        self.slice_cols(a, j, 1)
    }

    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        assert!(start + self.value(a).ncols() <= total, "pad_cols out of range");
        self.push(Op::PadCols { a, start, total })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::ConcatCols(a, b))
    }

    pub fn unary(&mut self, f: UnaryFn, a: Var) -> Var {
        self.push(Op::Unary(f, 0, a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryFn::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryFn::Sigmoid, a)
    }

    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(UnaryFn::Swish, a)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(UnaryFn::Elu, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryFn::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryFn::Exp, a)
    }

    /// Natural logarithm; every entry must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        if let Some(&bad) = self.value(a).iter().find(|v| !(**v > 0.0)) {
            return Err(AutodiffError::Domain { op: "log", value: bad });
        }
        Ok(self.unary(UnaryFn::Log, a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(UnaryFn::Pow(p), a)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.push(Op::Softmax(a))
    }

    // ---- composites ------------------------------------------------------

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `a + bias` with `bias` a `1 x m` row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let n = self.value(a).nrows();
        let b = self.repeat_rows(bias, n);
        self.add(a, b)
    }

    /// `a * col` with `col` an `n x 1` column broadcast over the columns of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let k = self.value(a).ncols();
        let c = self.repeat_cols(col, k);
        self.mul(a, c)
    }

    /// `a * row` with `row` a `1 x m` row broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let n = self.value(a).nrows();
        let r = self.repeat_rows(row, n);
        self.mul(a, r)
    }

    // ---- backward --------------------------------------------------------

    /// For every node up to `f`, whether it depends on one of `wrt`.
    fn dependency_mask(&self, f: Var, wrt: &[Var]) -> Vec<bool> {
        let mut dep = vec![false; f.0 + 1];
        for w in wrt {
            if w.0 <= f.0 && self.nodes[w.0].requires_grad {
                dep[w.0] = true;
            }
        }
        for i in 0..=f.0 {
            if dep[i] || !self.nodes[i].requires_grad {
                continue;
            }
            dep[i] = self.nodes[i].op.inputs().iter().flatten().any(|v| dep[v.0]);
        }
        dep
    }

    /// Gradient of `sum(f)` with respect to each of `wrt`, as plain matrices.
    pub fn gradients(&self, f: Var, wrt: &[Var]) -> Result<GradOutput<Mat>, AutodiffError> {
        self.check_finite()?;
        let dep = self.dependency_mask(f, wrt);
        let mut grads: Vec<Option<Mat>> = vec![None; f.0 + 1];
        if dep[f.0] {
            grads[f.0] = Some(Array2::ones(self.value(f).dim()));
        }
        let mut contrib = Vec::with_capacity(2);
        for i in (0..=f.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            contrib.clear();
            self.vjp_values(i, &g, &dep, &mut contrib);
            for (input, gi) in contrib.drain(..) {
                match &mut grads[input] {
                    Some(acc) => *acc += &gi,
                    slot @ None => *slot = Some(gi),
                }
            }
            // leaves keep their gradient; interior nodes are consumed
        }
        let mut detached = Vec::new();
        let out = wrt
            .iter()
            .enumerate()
            .map(|(k, w)| {
                let slot = if w.0 <= f.0 { grads[w.0].take() } else { None };
                slot.unwrap_or_else(|| {
                    detached.push(k);
                    Array2::zeros(self.value(*w).dim())
                })
            })
            .collect();
        Ok(GradOutput { grads: out, detached })
    }

    /// Gradient of `sum(f)` with respect to each of `wrt`, recorded on the
    /// tape so the results can be differentiated again.
    pub fn grad(&mut self, f: Var, wrt: &[Var]) -> Result<GradOutput<Var>, AutodiffError> {
        self.check_finite()?;
        let dep = self.dependency_mask(f, wrt);
        let mut grads: Vec<Option<Var>> = vec![None; f.0 + 1];
        if dep[f.0] {
            let seed = self.constant(Array2::ones(self.value(f).dim()));
            grads[f.0] = Some(seed);
        }
        let mut contrib = Vec::with_capacity(2);
        for i in (0..=f.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            contrib.clear();
            self.vjp_record(i, g, &dep, &mut contrib);
            for (input, gi) in contrib.drain(..) {
                grads[input] = Some(match grads[input] {
                    Some(acc) => self.add(acc, gi),
                    None => gi,
                });
            }
        }
        let mut detached = Vec::new();
        let mut out = Vec::with_capacity(wrt.len());
        for (k, w) in wrt.iter().enumerate() {
            let slot = if w.0 <= f.0 { grads[w.0] } else { None };
            out.push(match slot {
                Some(g) => g,
                None => {
                    detached.push(k);
                    let zeros = Array2::zeros(self.value(*w).dim());
                    self.constant(zeros)
                }
            });
        }
        self.check_finite()?;
        Ok(GradOutput { grads: out, detached })
    }

    fn vjp_values(&self, node: usize, g: &Mat, dep: &[bool], out: &mut Vec<(usize, Mat)>) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| dep[v.0];
        match self.nodes[node].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(a) {
                    out.push((a.0, g.clone()));
                }
                if want(b) {
                    out.push((b.0, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    out.push((a.0, g.clone()));
                }
                if want(b) {
                    out.push((b.0, -g));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    out.push((a.0, g * val(b)));
                }
                if want(b) {
                    out.push((b.0, g * val(a)));
                }
            }
            Op::Scale(a, c) => {
                if want(a) {
                    out.push((a.0, g * c));
                }
            }
            Op::Shift(a, _) => {
                if want(a) {
                    out.push((a.0, g.clone()));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                if want(a) {
                    let ga = if !ta { matmul(g, val(b), false, !tb) } else { matmul(val(b), g, tb, true) };
                    out.push((a.0, ga));
                }
                if want(b) {
                    let gb = if !tb { matmul(val(a), g, !ta, false) } else { matmul(g, val(a), true, ta) };
                    out.push((b.0, gb));
                }
            }
            Op::ReduceRows(a) => {
                if want(a) {
                    let n = val(a).nrows();
                    out.push((a.0, g.broadcast((n, g.ncols())).unwrap().to_owned()));
                }
            }
            Op::RepeatRows(a, _) => {
                if want(a) {
                    out.push((a.0, g.sum_axis(Axis(0)).insert_axis(Axis(0))));
                }
            }
            Op::ReduceCols(a) => {
                if want(a) {
                    let k = val(a).ncols();
                    out.push((a.0, g.broadcast((g.nrows(), k)).unwrap().to_owned()));
                }
            }
            Op::RepeatCols(a, _) => {
                if want(a) {
                    out.push((a.0, g.sum_axis(Axis(1)).insert_axis(Axis(1))));
                }
            }
            Op::SumAll(a) => {
                if want(a) {
                    out.push((a.0, Array2::from_elem(val(a).dim(), g[(0, 0)])));
                }
            }
            Op::BroadcastAll(a, _, _) => {
                if want(a) {
                    out.push((a.0, Array2::from_elem((1, 1), g.sum())));
                }
            }
            Op::SliceCols { a, start, len } => {
                if want(a) {
                    let mut ga = Array2::zeros(val(a).dim());
                    ga.slice_mut(s![.., start..start + len]).assign(g);
                    out.push((a.0, ga));
                }
            }
            Op::PadCols { a, start, .. } => {
                if want(a) {
                    let k = val(a).ncols();
                    out.push((a.0, g.slice(s![.., start..start + k]).to_owned()));
                }
            }
            Op::ConcatCols(a, b) => {
                let na = val(a).ncols();
                if want(a) {
                    out.push((a.0, g.slice(s![.., ..na]).to_owned()));
                }
                if want(b) {
                    out.push((b.0, g.slice(s![.., na..]).to_owned()));
                }
            }
            Op::Unary(f, order, a) => {
                if want(a) {
                    out.push((a.0, &*self.unary_derivative(f, order + 1, a) * g));
                }
            }
            Op::Softmax(a) => {
                if want(a) {
                    let sm = &self.nodes[node].value;
                    let gs = g * sm;
                    let r = gs.sum_axis(Axis(1)).insert_axis(Axis(1));
                    out.push((a.0, sm * &(g - &r)));
                }
            }
        }
    }

    fn vjp_record(&mut self, node: usize, g: Var, dep: &[bool], out: &mut Vec<(usize, Var)>) {
        let want = |v: Var| dep[v.0];
        match self.nodes[node].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(a) {
                    out.push((a.0, g));
                }
                if want(b) {
                    out.push((b.0, g));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    out.push((a.0, g));
                }
                if want(b) {
                    let ng = self.neg(g);
                    out.push((b.0, ng));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    let ga = self.mul(g, b);
                    out.push((a.0, ga));
                }
                if want(b) {
                    let gb = self.mul(g, a);
                    out.push((b.0, gb));
                }
            }
            Op::Scale(a, c) => {
                if want(a) {
                    let ga = self.scale(g, c);
                    out.push((a.0, ga));
                }
            }
            Op::Shift(a, _) => {
                if want(a) {
                    out.push((a.0, g));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                if want(a) {
                    let ga = if !ta { self.matmul_t(g, b, false, !tb) } else { self.matmul_t(b, g, tb, true) };
                    out.push((a.0, ga));
                }
                if want(b) {
                    let gb = if !tb { self.matmul_t(a, g, !ta, false) } else { self.matmul_t(g, a, true, ta) };
                    out.push((b.0, gb));
                }
            }
            Op::ReduceRows(a) => {
                if want(a) {
                    let n = self.value(a).nrows();
                    let ga = self.repeat_rows(g, n);
                    out.push((a.0, ga));
                }
            }
            Op::RepeatRows(a, _) => {
                if want(a) {
                    let ga = self.reduce_rows(g);
                    out.push((a.0, ga));
                }
            }
            Op::ReduceCols(a) => {
                if want(a) {
                    let k = self.value(a).ncols();
                    let ga = self.repeat_cols(g, k);
                    out.push((a.0, ga));
                }
            }
            Op::RepeatCols(a, _) => {
                if want(a) {
                    let ga = self.reduce_cols(g);
                    out.push((a.0, ga));
                }
            }
            Op::SumAll(a) => {
                if want(a) {
                    let (r, c) = self.value(a).dim();
                    let ga = self.broadcast_all(g, r, c);
                    out.push((a.0, ga));
                }
            }
            Op::BroadcastAll(a, _, _) => {
                if want(a) {
                    let ga = self.sum_all(g);
                    out.push((a.0, ga));
                }
            }
            Op::SliceCols { a, start, .. } => {
                if want(a) {
                    let total = self.value(a).ncols();
                    let ga = self.pad_cols(g, start, total);
                    out.push((a.0, ga));
                }
            }
            Op::PadCols { a, start, .. } => {
                if want(a) {
                    let k = self.value(a).ncols();
                    let ga = self.slice_cols(g, start, k);
                    out.push((a.0, ga));
                }
            }
            Op::ConcatCols(a, b) => {
                let na = self.value(a).ncols();
                let nb = self.value(b).ncols();
                if want(a) {
                    let ga = self.slice_cols(g, 0, na);
                    out.push((a.0, ga));
                }
                if want(b) {
                    let gb = self.slice_cols(g, na, nb);
                    out.push((b.0, gb));
                }
            }
            Op::Unary(f, order, a) => {
                if want(a) {
                    let d = self.push(Op::Unary(f, order + 1, a));
                    let ga = self.mul(g, d);
                    out.push((a.0, ga));
                }
            }
            Op::Softmax(a) => {
                if want(a) {
                    let sm = Var(node);
                    let k = self.value(sm).ncols();
                    let gs = self.mul(g, sm);
                    let r = self.reduce_cols(gs);
                    let rb = self.repeat_cols(r, k);
                    let diff = self.sub(g, rb);
                    let ga = self.mul(sm, diff);
                    out.push((a.0, ga));
                }
            }
        }
    }
}

/// `x * 0` is NaN exactly for infinite or NaN `x`; summing keeps the loop
/// branch-free.
fn all_finite(m: &Mat) -> bool {
    match m.as_slice_memory_order() {
        Some(s) => s.iter().fold(0.0, |acc, &x| acc + x * 0.0) == 0.0,
        None => m.iter().all(|v| v.is_finite()),
    }
}

fn same_shape(op: &str, a: &Mat, b: &Mat) {
    assert_eq!(a.dim(), b.dim(), "{op}: shape mismatch {:?} vs {:?}", a.dim(), b.dim());
}

fn matmul(a: &Mat, b: &Mat, ta: bool, tb: bool) -> Mat {
    let av = if ta { a.t() } else { a.view() };
    let bv = if tb { b.t() } else { b.view() };
    assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dimensions {:?} x {:?}", av.dim(), bv.dim());
    av.dot(&bv)
}

fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// Outcome of comparing tape derivatives against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

const FD_EPS: f64 = 1e-8;

fn scalar_eval<F>(f: &F, point: &[f64]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|&p| tape.scalar(p)).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).sum()
}

fn rel_report(analytic: Vec<f64>, numeric: Vec<f64>) -> FdReport {
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + FD_EPS))
        .fold(0.0, f64::max);
    FdReport { max_rel_error, analytic, numeric }
}

/// Compare first derivatives of a scalar function against central differences
/// with step `h`. The function receives one `1 x 1` variable per coordinate.
pub fn finite_diff_check<F>(f: F, point: &[f64], h: f64) -> Result<FdReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|&p| tape.scalar(p)).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.gradients(out, &vars)?;
    let analytic: Vec<f64> = grads.grads.iter().map(|g| g[(0, 0)]).collect();
    let numeric = (0..point.len())
        .map(|i| {
            let mut hi = point.to_vec();
            let mut lo = point.to_vec();
            hi[i] += h;
            lo[i] -= h;
            (scalar_eval(&f, &hi) - scalar_eval(&f, &lo)) / (2.0 * h)
        })
        .collect();
    Ok(rel_report(analytic, numeric))
}

/// Compare diagonal second derivatives (grad of grad) against second-order
/// central differences with step `h`.
pub fn finite_diff_check_second<F>(f: F, point: &[f64], h: f64) -> Result<FdReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|&p| tape.scalar(p)).collect();
    let out = f(&mut tape, &vars);
    let first = tape.grad(out, &vars)?;
    let mut analytic = Vec::with_capacity(point.len());
    for (i, g) in first.grads.iter().enumerate() {
        let second = tape.gradients(*g, &vars[i..=i])?;
        analytic.push(second.grads[0][(0, 0)]);
    }
    let f0 = scalar_eval(&f, point);
    let numeric = (0..point.len())
        .map(|i| {
            let mut hi = point.to_vec();
            let mut lo = point.to_vec();
            hi[i] += h;
            lo[i] -= h;
            (scalar_eval(&f, &hi) - 2.0 * f0 + scalar_eval(&f, &lo)) / (h * h)
        })
        .collect();
    Ok(rel_report(analytic, numeric))
}
