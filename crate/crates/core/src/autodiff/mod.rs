//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! Every value on the tape is a dense `f64` matrix; scalars are `1x1`
//! matrices and row-batched inputs are `n x d`. The backward pass does not
//! compute detached numbers: it appends new nodes to the same tape, so the
//! gradient it returns is itself a recorded expression and can be
//! differentiated again. This is what lets a training loss contain
//! `|grad_x U|^2` terms (and points that depend on `grad_x U`) and still be
//! differentiated with respect to the network parameters.
//!
//! ```
//! use proxflow::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.scalar_leaf("x", 3.0);
//! let y = x * x * x;
//! let dy = tape.gradient(y, &[x]).unwrap()[0];
//! assert_eq!(dy.scalar(), 27.0);
//! let d2y = tape.gradient(dy, &[x]).unwrap()[0];
//! assert_eq!(d2y.scalar(), 18.0);
//! ```

mod grad;
mod kernels;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use ndarray::Array2;
use thiserror::Error;

pub use kernels::{sigmoid, softplus};

/// Dense row-major matrix used for every tape payload.
pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("gradient needs a scalar output, node {node} has shape {rows}x{cols}")]
    NonScalarOutput {
        node: usize,
        rows: usize,
        cols: usize,
    },
    #[error("no leaf labelled `{0}` on this tape")]
    UnknownLabel(String),
    #[error("leaf `{label}` has a non-finite entry")]
    NonFiniteLeaf { label: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Position of a node on its tape. Parents always have smaller ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Shift(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Recip(NodeId),
    Powi(NodeId, i32),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Sum(NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    Broadcast(NodeId, usize, usize),
    BroadcastRows(NodeId, usize),
    BroadcastCols(NodeId, usize),
    SliceCols(NodeId, usize, usize),
    PadCols(NodeId, usize, usize),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Recip(..) => "recip",
            Op::Powi(..) => "power",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "max0",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::Broadcast(..) => "broadcast",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::PadCols(..) => "pad_cols",
        }
    }

    pub(crate) fn parents(&self) -> ParentIter {
        let (a, b) = match *self {
            Op::Leaf | Op::Constant => (None, None),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => (Some(a), Some(b)),
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Shift(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Recip(a)
            | Op::Powi(a, _)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::Broadcast(a, ..)
            | Op::BroadcastRows(a, _)
            | Op::BroadcastCols(a, _)
            | Op::SliceCols(a, ..)
            | Op::PadCols(a, ..) => (Some(a), None),
        };
        ParentIter { a, b }
    }
}

pub(crate) struct ParentIter {
    a: Option<NodeId>,
    b: Option<NodeId>,
}

impl Iterator for ParentIter {
    type Item = NodeId;

    fn next(&mut self) -> Option<NodeId> {
        self.a.take().or_else(|| self.b.take())
    }
}

struct Node {
    op: Op,
    value: Rc<Matrix>,
}

/// Read-only snapshot of one recorded node.
#[derive(Debug, Clone)]
pub struct ComputeNode {
    pub id: NodeId,
    pub op: &'static str,
    pub parents: Vec<NodeId>,
    pub value: Matrix,
}

/// Append-only computation graph.
///
/// A tape has a single writer. It is intentionally `!Send`; concurrent
/// runs each own their tape.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    labels: RefCell<HashMap<String, NodeId>>,
    fault: Cell<Option<(&'static str, usize)>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("fault", &self.fault.get())
            .finish()
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
        self.len() == 0
    }

    /// First non-finite value recorded on this tape, if any.
    pub fn check(&self) -> Result<()> {
        match self.fault.get() {
            Some((op, node)) => Err(AutodiffError::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn push(&self, op: Op, value: Matrix) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.fault.get().is_none() && value.iter().any(|v| !v.is_finite()) {
            self.fault.set(Some((op.name(), id)));
        }
        nodes.push(Node {
            op,
            value: Rc::new(value),
        });
        Var {
            tape: self,
            id: NodeId(id),
        }
    }

    pub(crate) fn op(&self, id: NodeId) -> Op {
        self.nodes.borrow()[id.0].op
    }

    pub(crate) fn value_rc(&self, id: NodeId) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[id.0].value)
    }

    pub(crate) fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes.borrow()[id.0].value.dim()
    }

    pub fn var(&self, id: NodeId) -> Var<'_> {
        assert!(id.0 < self.len(), "node {} is not on this tape", id.0);
        Var { tape: self, id }
    }

    pub fn node(&self, id: NodeId) -> ComputeNode {
        let nodes = self.nodes.borrow();
        let node = &nodes[id.0];
        ComputeNode {
            id,
            op: node.op.name(),
            parents: node.op.parents().collect(),
            value: (*node.value).clone(),
        }
    }

    /// Unlabelled differentiable input.
    pub fn variable(&self, value: Matrix) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    /// Labelled differentiable input, retrievable with [`Tape::lookup`].
    pub fn leaf(&self, label: &str, value: Matrix) -> Var<'_> {
        let v = self.push(Op::Leaf, value);
        self.labels.borrow_mut().insert(label.to_owned(), v.id);
        v
    }

    pub fn scalar_leaf(&self, label: &str, value: f64) -> Var<'_> {
        self.leaf(label, Array2::from_elem((1, 1), value))
    }

    pub fn lookup(&self, label: &str) -> Option<Var<'_>> {
        self.labels.borrow().get(label).map(|&id| Var { tape: self, id })
    }

    /// Value that gradients never flow into.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var<'_> {
        self.constant(Array2::zeros((rows, cols)))
    }

    /// Records a labelled expression in one go: registers `leaves`, runs
    /// `build` on them and reports the first non-finite intermediate.
    pub fn record<'t, F>(&'t self, leaves: &[(&str, Matrix)], build: F) -> Result<Var<'t>>
    where
        F: FnOnce(&'t Tape, &[Var<'t>]) -> Var<'t>,
    {
        let mut vars = Vec::with_capacity(leaves.len());
        for (label, value) in leaves {
            if value.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFiniteLeaf {
                    label: (*label).to_owned(),
                });
            }
            vars.push(self.leaf(label, value.clone()));
        }
        let root = build(self, &vars);
        self.check()?;
        Ok(root)
    }

    /// Gradients of the labelled leaves; the result is keyed by label.
    pub fn gradient_by_label<'t>(
        &'t self,
        output: Var<'t>,
        labels: &[&str],
    ) -> Result<HashMap<String, Var<'t>>> {
        let wrt = labels
            .iter()
            .map(|l| self.lookup(l).ok_or_else(|| AutodiffError::UnknownLabel((*l).to_owned())))
            .collect::<Result<Vec<_>>>()?;
        let grads = self.gradient(output, &wrt)?;
        Ok(labels.iter().map(|l| (*l).to_owned()).zip(grads).collect())
    }

    /// Differentiates a scalar, feeds the inner gradients to `outer`, and
    /// differentiates the resulting scalar again.
    pub fn gradient_of_gradient<'t, F>(
        &'t self,
        output: Var<'t>,
        inner_wrt: &[Var<'t>],
        outer: F,
        outer_wrt: &[Var<'t>],
    ) -> Result<Vec<Var<'t>>>
    where
        F: FnOnce(&[Var<'t>]) -> Var<'t>,
    {
        let inner = self.gradient(output, inner_wrt)?;
        let scalar = outer(&inner);
        self.check()?;
        let grads = self.gradient(scalar, outer_wrt)?;
        self.check()?;
        Ok(grads)
    }

    /// Recomputes every node from the stored leaf and constant payloads.
    pub fn replay(&self) -> Vec<Matrix> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Matrix> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match node.op {
                Op::Leaf | Op::Constant => (*node.value).clone(),
                op => kernels::evaluate(op, |id| &values[id.0]),
            };
            values.push(v);
        }
        values
    }

    fn unary(&self, op: Op) -> Var<'_> {
        let a = op.parents().next().expect("unary op has a parent");
        let va = self.value_rc(a);
        let out = kernels::evaluate(op, |_| &va);
        self.push(op, out)
    }

    fn binary(&self, op: Op) -> Var<'_> {
        let mut it = op.parents();
        let (a, b) = (it.next().unwrap(), it.next().unwrap());
        let (va, vb) = (self.value_rc(a), self.value_rc(b));
        let out = kernels::evaluate(op, |id| if id == a { &va } else { &vb });
        self.push(op, out)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id.0, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Matrix {
        (*self.tape.value_rc(self.id)).clone()
    }

    pub fn value_rc(&self) -> Rc<Matrix> {
        self.tape.value_rc(self.id)
    }

    /// Value of a `1x1` node.
    pub fn scalar(&self) -> f64 {
        let v = self.tape.value_rc(self.id);
        assert_eq!(v.dim(), (1, 1), "node {} is not scalar", self.id.0);
        v[[0, 0]]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.shape(self.id)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands live on different tapes"
        );
    }

    fn same_shape(&self, other: &Var<'_>, what: &str) {
        self.same_tape(other);
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{what}: shape mismatch {a:?} vs {b:?}");
    }

    pub fn neg(self) -> Var<'t> {
        self.tape.unary(Op::Neg(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(Op::Scale(self.id, c))
    }

    pub fn shift(self, c: f64) -> Var<'t> {
        self.tape.unary(Op::Shift(self.id, c))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(Op::Log(self.id))
    }

    pub fn recip(self) -> Var<'t> {
        self.tape.unary(Op::Recip(self.id))
    }

    pub fn powi(self, n: i32) -> Var<'t> {
        match n {
            0 => {
                let (r, c) = self.shape();
                self.tape.constant(Array2::ones((r, c)))
            }
            1 => self,
            _ => self.tape.unary(Op::Powi(self.id, n)),
        }
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape.unary(Op::Softplus(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(Op::Tanh(self.id))
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(self) -> Var<'t> {
        self.tape.unary(Op::Relu(self.id))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let ((_, k), (k2, _)) = (self.shape(), rhs.shape());
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        self.tape.binary(Op::MatMul(self.id, rhs.id))
    }

    pub fn t(self) -> Var<'t> {
        self.tape.unary(Op::Transpose(self.id))
    }

    /// Sum of all entries, as a `1x1` node.
    pub fn sum(self) -> Var<'t> {
        self.tape.unary(Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum().scale(1.0 / (r * c) as f64)
    }

    /// Column sums, `r x c -> 1 x c`.
    pub fn sum_rows(self) -> Var<'t> {
        self.tape.unary(Op::SumRows(self.id))
    }

    /// Row sums, `r x c -> r x 1`.
    pub fn sum_cols(self) -> Var<'t> {
        self.tape.unary(Op::SumCols(self.id))
    }

    /// Repeats a `1x1` node to `rows x cols`.
    pub fn broadcast(self, rows: usize, cols: usize) -> Var<'t> {
        assert_eq!(self.shape(), (1, 1), "broadcast expects a scalar");
        self.tape.unary(Op::Broadcast(self.id, rows, cols))
    }

    /// Repeats a `1 x c` row `rows` times.
    pub fn broadcast_rows(self, rows: usize) -> Var<'t> {
        assert_eq!(self.shape().0, 1, "broadcast_rows expects a single row");
        self.tape.unary(Op::BroadcastRows(self.id, rows))
    }

    /// Repeats an `r x 1` column `cols` times.
    pub fn broadcast_cols(self, cols: usize) -> Var<'t> {
        assert_eq!(self.shape().1, 1, "broadcast_cols expects a single column");
        self.tape.unary(Op::BroadcastCols(self.id, cols))
    }

    /// Columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let (_, c) = self.shape();
        assert!(start < end && end <= c, "slice_cols {start}..{end} of {c}");
        self.tape.unary(Op::SliceCols(self.id, start, end))
    }

    /// Embeds the columns at offset `start` in a zero matrix `total` wide.
    pub fn pad_cols(self, start: usize, total: usize) -> Var<'t> {
        let (_, c) = self.shape();
        assert!(start + c <= total, "pad_cols {c} columns at {start} into {total}");
        self.tape.unary(Op::PadCols(self.id, start, total))
    }

    pub fn concat_cols(self, rhs: Var<'t>) -> Var<'t> {
        let (ra, ca) = self.shape();
        let (rb, cb) = rhs.shape();
        assert_eq!(ra, rb, "concat_cols: row mismatch");
        self.pad_cols(0, ca + cb) + rhs.pad_cols(ca, ca + cb)
    }

    /// Adds a `1 x c` bias to every row.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        let (r, _) = self.shape();
        self + bias.broadcast_rows(r)
    }

    /// Squared Euclidean norm of each row, `r x c -> r x 1`.
    pub fn row_norms_sq(self) -> Var<'t> {
        self.square().sum_cols()
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.same_shape(&rhs, "add");
        self.tape.binary(Op::Add(self.id, rhs.id))
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.same_shape(&rhs, "sub");
        self.tape.binary(Op::Sub(self.id, rhs.id))
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_shape(&rhs, "mul");
        self.tape.binary(Op::Mul(self.id, rhs.id))
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self * rhs.recip()
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs.scale(self)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.shift(rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.shift(-rhs)
    }
}
