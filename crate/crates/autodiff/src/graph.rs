use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{AutodiffError, Result};
use crate::Tensor;

/// Primitive operations. Parents are node ids, always smaller than the id of
/// the node that owns the op, so node order is a topological order.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Constant,
    StopGradient,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulNt(usize, usize),
    /// `aᵀ · b`
    MatMulTn(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Abs(usize),
    ClampMin(usize, f64),
    SoftmaxRows(usize),
    Sum(usize),
    /// `r×c → 1×c`
    SumRows(usize),
    /// `r×c → r×1`
    SumCols(usize),
    Broadcast(usize),
    Reshape(usize),
    RepeatRows(usize, usize),
    GroupSumRows(usize, usize),
    /// Per-row column selection: `out[i] = a[i, idx[i]]`.
    SelectIndex(usize, Rc<[usize]>),
    /// Adjoint of `SelectIndex`.
    ScatterIndex(usize, Rc<[usize]>),
    GatherRows(usize, Rc<[usize]>),
    ScatterRows(usize, Rc<[usize]>),
    /// Block-diagonal product with constant blocks (optionally transposed).
    BlockMatMul(usize, Rc<[Tensor]>, bool),
}

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// An append-only record of operations.
///
/// A graph is single-threaded; build one per thread or per batch.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: RefCell<Vec<Node>>,
    no_grad: Cell<bool>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.graph.nodes.borrow();
        let node = &nodes[self.id];
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &node.value.dim())
            .field("op", &node.op)
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (parameter or data).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, !self.no_grad.get())
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::from_elem((1, 1), value))
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var<'_> {
        self.constant(Tensor::zeros((rows, cols)))
    }

    pub(crate) fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Push a derived node; it requires grad iff any parent does and the
    /// graph is not in no-grad mode.
    pub(crate) fn push(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let requires = !self.no_grad.get() && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push_raw(value, op, requires)
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }

    /// Reverse-mode derivatives of a scalar `loss` with respect to `wrt`.
    ///
    /// Inputs that the loss does not depend on get an all-zero gradient.
    /// With `create_graph`, the returned gradients are recorded nodes and may
    /// be differentiated again; otherwise they are constants.
    pub fn gradient<'g>(
        &'g self,
        loss: Var<'g>,
        wrt: &[Var<'g>],
        create_graph: bool,
    ) -> Result<Vec<Var<'g>>> {
        if !std::ptr::eq(loss.graph, self) || wrt.iter().any(|w| !std::ptr::eq(w.graph, self)) {
            return Err(AutodiffError::ForeignVar);
        }
        let shape = loss.shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        let previous = self.no_grad.replace(!create_graph);
        let result = self.backward(loss, wrt);
        self.no_grad.set(previous);
        result
    }

    fn backward<'g>(&'g self, loss: Var<'g>, wrt: &[Var<'g>]) -> Result<Vec<Var<'g>>> {
        let end = loss.id + 1;
        let mut grads: Vec<Option<usize>> = vec![None; end];
        grads[loss.id] = Some(self.scalar(1.0).id);
        for id in (0..end).rev() {
            let Some(gid) = grads[id] else { continue };
            let op = {
                let nodes = self.nodes.borrow();
                if !nodes[id].requires_grad {
                    continue;
                }
                nodes[id].op.clone()
            };
            let upstream = self.var(gid);
            for (parent, contribution) in self.vjp(id, &op, upstream)? {
                grads[parent] = Some(match grads[parent] {
                    None => contribution.id,
                    Some(existing) => self.var(existing).add(contribution)?.id,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => self.var(g),
                None => {
                    let (r, c) = w.shape();
                    self.zeros(r, c)
                }
            })
            .collect())
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Forward value of this node.
    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    /// The `[0, 0]` entry; convenient for scalar nodes.
    pub fn item(&self) -> f64 {
        self.value()[[0, 0]]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }
}
