use std::rc::Rc;

use ndarray::{s, Axis, Zip};

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Op, Var};
use crate::Tensor;

fn broadcastable(from: (usize, usize), to: (usize, usize)) -> bool {
    (from.0 == to.0 || from.0 == 1) && (from.1 == to.1 || from.1 == 1)
}

fn row_major(t: &Tensor, rows: usize, cols: usize) -> Tensor {
    Tensor::from_shape_vec((rows, cols), t.iter().copied().collect())
        .expect("element count checked by caller")
}

impl<'g> Var<'g> {
    fn derive(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'g> {
        self.graph.push(value, op, parents)
    }

    fn same_graph(&self, other: &Var<'g>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignVar)
        }
    }

    /// Bring two operands to a common shape, broadcasting `1×1`, `1×c` or
    /// `r×1` operands as needed.
    fn align(self, other: Var<'g>, op: &'static str) -> Result<(Var<'g>, Var<'g>)> {
        self.same_graph(&other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            Ok((self, other))
        } else if broadcastable(sb, sa) {
            Ok((self, other.broadcast_to(sa.0, sa.1)?))
        } else if broadcastable(sa, sb) {
            Ok((self.broadcast_to(sb.0, sb.1)?, other))
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            })
        }
    }

    fn binary(
        self,
        other: Var<'g>,
        name: &'static str,
        make: fn(usize, usize) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        let (a, b) = self.align(other, name)?;
        let (va, vb) = (a.value(), b.value());
        let mut out = Tensor::zeros(va.raw_dim());
        Zip::from(&mut out)
            .and(&*va)
            .and(&*vb)
            .for_each(|o, &x, &y| *o = f(x, y));
        Ok(a.derive(out, make(a.id, b.id), &[a.id, b.id]))
    }

    fn map(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let out = self.value().mapv(f);
        self.derive(out, op, &[self.id])
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", Op::Sub, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", Op::Mul, |x, y| x * y)
    }

    /// Elementwise quotient.
    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "div", Op::Div, |x, y| x / y)
    }

    pub fn neg(self) -> Var<'g> {
        self.map(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(self, k: f64) -> Var<'g> {
        self.map(Op::Scale(self.id, k), |x| k * x)
    }

    /// Adds a constant to every entry.
    pub fn shift(self, k: f64) -> Var<'g> {
        self.map(Op::Shift(self.id), |x| x + k)
    }

    pub fn square(self) -> Var<'g> {
        self.mul(self).expect("same shape")
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.ncols() != b.nrows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: a.dim(),
                right: b.dim(),
            });
        }
        let out = a.dot(&*b);
        Ok(self.derive(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.ncols() != b.ncols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul_nt",
                left: a.dim(),
                right: b.dim(),
            });
        }
        let out = a.dot(&b.t());
        Ok(self.derive(out, Op::MatMulNt(self.id, other.id), &[self.id, other.id]))
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.nrows() != b.nrows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul_tn",
                left: a.dim(),
                right: b.dim(),
            });
        }
        let out = a.t().dot(&*b);
        Ok(self.derive(out, Op::MatMulTn(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(self) -> Var<'g> {
        let out = self.value().t().as_standard_layout().into_owned();
        self.derive(out, Op::Transpose(self.id), &[self.id])
    }

    pub fn tanh(self) -> Var<'g> {
        self.map(Op::Tanh(self.id), f64::tanh)
    }

    pub fn relu(self) -> Var<'g> {
        self.map(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn exp(self) -> Var<'g> {
        self.map(Op::Exp(self.id), f64::exp)
    }

    /// Natural logarithm.
    pub fn ln(self) -> Var<'g> {
        self.map(Op::Log(self.id), f64::ln)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.map(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn abs(self) -> Var<'g> {
        self.map(Op::Abs(self.id), f64::abs)
    }

    /// `max(x, lo)` elementwise; gradient is zero where clamped.
    pub fn clamp_min(self, lo: f64) -> Var<'g> {
        self.map(Op::ClampMin(self.id, lo), move |x| x.max(lo))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(self) -> Var<'g> {
        let mut out = (*self.value()).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let total = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        self.derive(out, Op::SoftmaxRows(self.id), &[self.id])
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(self) -> Var<'g> {
        let total = self.value().sum();
        self.derive(Tensor::from_elem((1, 1), total), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Column sums, `r×c → 1×c`.
    pub fn sum_rows(self) -> Var<'g> {
        let out = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        self.derive(out, Op::SumRows(self.id), &[self.id])
    }

    /// Row sums, `r×c → r×1`.
    pub fn sum_cols(self) -> Var<'g> {
        let out = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.derive(out, Op::SumCols(self.id), &[self.id])
    }

    pub fn broadcast_to(self, rows: usize, cols: usize) -> Result<Var<'g>> {
        let from = self.shape();
        if from == (rows, cols) {
            return Ok(self);
        }
        if !broadcastable(from, (rows, cols)) {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast",
                left: from,
                right: (rows, cols),
            });
        }
        let out = self
            .value()
            .broadcast((rows, cols))
            .expect("checked broadcastable")
            .to_owned();
        Ok(self.derive(out, Op::Broadcast(self.id), &[self.id]))
    }

    /// Row-major reshape.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Var<'g>> {
        let from = self.shape();
        if from.0 * from.1 != rows * cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                left: from,
                right: (rows, cols),
            });
        }
        if from == (rows, cols) {
            return Ok(self);
        }
        let out = row_major(&self.value(), rows, cols);
        Ok(self.derive(out, Op::Reshape(self.id), &[self.id]))
    }

    /// Repeat each row `k` times consecutively: `r×c → (r·k)×c`.
    pub fn repeat_rows(self, k: usize) -> Var<'g> {
        let v = self.value();
        let (r, c) = v.dim();
        let mut out = Tensor::zeros((r * k, c));
        for i in 0..r {
            for j in 0..k {
                out.row_mut(i * k + j).assign(&v.row(i));
            }
        }
        self.derive(out, Op::RepeatRows(self.id, k), &[self.id])
    }

    /// Sum consecutive groups of `k` rows: `(r·k)×c → r×c`.
    pub fn group_sum_rows(self, k: usize) -> Result<Var<'g>> {
        let v = self.value();
        let (rk, c) = v.dim();
        if k == 0 || rk % k != 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "group_sum_rows",
                left: (rk, c),
                right: (k, c),
            });
        }
        let mut out = Tensor::zeros((rk / k, c));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            row.assign(&v.slice(s![i * k..(i + 1) * k, ..]).sum_axis(Axis(0)));
        }
        Ok(self.derive(out, Op::GroupSumRows(self.id, k), &[self.id]))
    }

    /// Pick one column per row: `out[i, 0] = self[i, idx[i]]`.
    pub fn select_index(self, idx: Rc<[usize]>) -> Result<Var<'g>> {
        let v = self.value();
        let (r, c) = v.dim();
        if idx.len() != r {
            return Err(AutodiffError::ShapeMismatch {
                op: "select_index",
                left: (r, c),
                right: (idx.len(), 1),
            });
        }
        let mut out = Tensor::zeros((r, 1));
        for (i, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(AutodiffError::IndexOutOfBounds {
                    op: "select_index",
                    index: j,
                    extent: c,
                });
            }
            out[[i, 0]] = v[[i, j]];
        }
        Ok(self.derive(out, Op::SelectIndex(self.id, idx), &[self.id]))
    }

    /// Adjoint of [`Var::select_index`]: place `self[i]` at column `idx[i]`.
    pub fn scatter_index(self, idx: Rc<[usize]>, cols: usize) -> Result<Var<'g>> {
        let v = self.value();
        let (r, c) = v.dim();
        if c != 1 || idx.len() != r {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_index",
                left: (r, c),
                right: (idx.len(), 1),
            });
        }
        let mut out = Tensor::zeros((r, cols));
        for (i, &j) in idx.iter().enumerate() {
            if j >= cols {
                return Err(AutodiffError::IndexOutOfBounds {
                    op: "scatter_index",
                    index: j,
                    extent: cols,
                });
            }
            out[[i, j]] = v[[i, 0]];
        }
        Ok(self.derive(out, Op::ScatterIndex(self.id, idx), &[self.id]))
    }

    /// `out` row `i` is `self` row `idx[i]`.
    pub fn gather_rows(self, idx: Rc<[usize]>) -> Result<Var<'g>> {
        let v = self.value();
        let (r, c) = v.dim();
        let mut out = Tensor::zeros((idx.len(), c));
        for (i, &j) in idx.iter().enumerate() {
            if j >= r {
                return Err(AutodiffError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: j,
                    extent: r,
                });
            }
            out.row_mut(i).assign(&v.row(j));
        }
        Ok(self.derive(out, Op::GatherRows(self.id, idx), &[self.id]))
    }

    /// Adjoint of [`Var::gather_rows`]: accumulate row `i` into row `idx[i]`
    /// of an `rows×c` zero matrix.
    pub fn scatter_rows(self, idx: Rc<[usize]>, rows: usize) -> Result<Var<'g>> {
        let v = self.value();
        let (r, c) = v.dim();
        if idx.len() != r {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_rows",
                left: (r, c),
                right: (idx.len(), c),
            });
        }
        let mut out = Tensor::zeros((rows, c));
        for (i, &j) in idx.iter().enumerate() {
            if j >= rows {
                return Err(AutodiffError::IndexOutOfBounds {
                    op: "scatter_rows",
                    index: j,
                    extent: rows,
                });
            }
            let mut target = out.row_mut(j);
            target += &v.row(i);
        }
        Ok(self.derive(out, Op::ScatterRows(self.id, idx), &[self.id]))
    }

    /// Block-diagonal product with constant blocks: the rows of `self` are
    /// split into consecutive chunks, chunk `b` is multiplied by `blocks[b]`
    /// (or its transpose) and the results are stacked.
    pub fn block_matmul(self, blocks: Rc<[Tensor]>, transposed: bool) -> Result<Var<'g>> {
        let v = self.value();
        let (in_rows, out_rows) = blocks.iter().fold((0, 0), |(i, o), b| {
            if transposed {
                (i + b.nrows(), o + b.ncols())
            } else {
                (i + b.ncols(), o + b.nrows())
            }
        });
        if in_rows != v.nrows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "block_matmul",
                left: v.dim(),
                right: (in_rows, v.ncols()),
            });
        }
        let mut out = Tensor::zeros((out_rows, v.ncols()));
        let (mut i0, mut o0) = (0, 0);
        for b in blocks.iter() {
            let (bi, bo) = if transposed {
                (b.nrows(), b.ncols())
            } else {
                (b.ncols(), b.nrows())
            };
            let chunk = v.slice(s![i0..i0 + bi, ..]);
            let prod = if transposed { b.t().dot(&chunk) } else { b.dot(&chunk) };
            out.slice_mut(s![o0..o0 + bo, ..]).assign(&prod);
            i0 += bi;
            o0 += bo;
        }
        Ok(self.derive(out, Op::BlockMatMul(self.id, blocks, transposed), &[self.id]))
    }

    /// Same value, but no derivative flows through this node.
    pub fn stop_gradient(self) -> Var<'g> {
        let value = (*self.value()).clone();
        self.graph.push_raw(value, Op::StopGradient, false)
    }
}

fn mask_const<'g>(graph: &'g Graph, src: &Tensor, f: impl Fn(f64) -> f64) -> Var<'g> {
    graph.constant(src.mapv(f))
}

impl Graph {
    /// Vector-Jacobian products of node `id` for each parent that needs one.
    pub(crate) fn vjp<'g>(
        &'g self,
        id: usize,
        op: &Op,
        g: Var<'g>,
    ) -> Result<Vec<(usize, Var<'g>)>> {
        let out = self.var(id);
        let wants = |p: usize| self.requires_grad_of(p);
        let mut res = Vec::with_capacity(2);
        match op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    res.push((*a, g));
                }
                if wants(*b) {
                    res.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    res.push((*a, g));
                }
                if wants(*b) {
                    res.push((*b, g.neg()));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    res.push((*a, g.mul(self.var(*b))?));
                }
                if wants(*b) {
                    res.push((*b, g.mul(self.var(*a))?));
                }
            }
            Op::Div(a, b) => {
                let vb = self.var(*b);
                if wants(*a) {
                    res.push((*a, g.div(vb)?));
                }
                if wants(*b) {
                    res.push((*b, g.mul(out)?.div(vb)?.neg()));
                }
            }
            Op::Neg(a) => res.push((*a, g.neg())),
            Op::Scale(a, k) => res.push((*a, g.scale(*k))),
            Op::Shift(a) => res.push((*a, g)),
            Op::MatMul(a, b) => {
                if wants(*a) {
                    res.push((*a, g.matmul_nt(self.var(*b))?));
                }
                if wants(*b) {
                    res.push((*b, self.var(*a).matmul_tn(g)?));
                }
            }
            Op::MatMulNt(a, b) => {
                if wants(*a) {
                    res.push((*a, g.matmul(self.var(*b))?));
                }
                if wants(*b) {
                    res.push((*b, g.matmul_tn(self.var(*a))?));
                }
            }
            Op::MatMulTn(a, b) => {
                if wants(*a) {
                    res.push((*a, self.var(*b).matmul_nt(g)?));
                }
                if wants(*b) {
                    res.push((*b, self.var(*a).matmul(g)?));
                }
            }
            Op::Transpose(a) => res.push((*a, g.transpose())),
            Op::Tanh(a) => {
                let slope = out.square().neg().shift(1.0);
                res.push((*a, g.mul(slope)?));
            }
            Op::Relu(a) => {
                let m = mask_const(self, &self.value_of(*a), |x| if x > 0.0 { 1.0 } else { 0.0 });
                res.push((*a, g.mul(m)?));
            }
            Op::Exp(a) => res.push((*a, g.mul(out)?)),
            Op::Log(a) => res.push((*a, g.div(self.var(*a))?)),
            Op::Sqrt(a) => res.push((*a, g.scale(0.5).div(out)?)),
            Op::Abs(a) => {
                let m = mask_const(self, &self.value_of(*a), |x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                res.push((*a, g.mul(m)?));
            }
            Op::ClampMin(a, lo) => {
                let lo = *lo;
                let m = mask_const(self, &self.value_of(*a), |x| if x > lo { 1.0 } else { 0.0 });
                res.push((*a, g.mul(m)?));
            }
            Op::SoftmaxRows(a) => {
                let dot = g.mul(out)?.sum_cols();
                res.push((*a, out.mul(g.sub(dot)?)?));
            }
            Op::Sum(a) | Op::SumRows(a) | Op::SumCols(a) => {
                let (r, c) = self.value_of(*a).dim();
                res.push((*a, g.broadcast_to(r, c)?));
            }
            Op::Broadcast(a) => {
                let from = self.value_of(*a).dim();
                let to = out.shape();
                let mut reduced = g;
                if from.0 == 1 && to.0 != 1 {
                    reduced = reduced.sum_rows();
                }
                if from.1 == 1 && to.1 != 1 {
                    reduced = reduced.sum_cols();
                }
                res.push((*a, reduced));
            }
            Op::Reshape(a) => {
                let (r, c) = self.value_of(*a).dim();
                res.push((*a, g.reshape(r, c)?));
            }
            Op::RepeatRows(a, k) => res.push((*a, g.group_sum_rows(*k)?)),
            Op::GroupSumRows(a, k) => res.push((*a, g.repeat_rows(*k))),
            Op::SelectIndex(a, idx) => {
                let cols = self.value_of(*a).ncols();
                res.push((*a, g.scatter_index(Rc::clone(idx), cols)?));
            }
            Op::ScatterIndex(a, idx) => res.push((*a, g.select_index(Rc::clone(idx))?)),
            Op::GatherRows(a, idx) => {
                let rows = self.value_of(*a).nrows();
                res.push((*a, g.scatter_rows(Rc::clone(idx), rows)?));
            }
            Op::ScatterRows(a, idx) => res.push((*a, g.gather_rows(Rc::clone(idx))?)),
            Op::BlockMatMul(a, blocks, transposed) => {
                res.push((*a, g.block_matmul(Rc::clone(blocks), !*transposed)?));
            }
        }
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sum_of_vector() {
        let g = Graph::new();
        let x = g.constant(array![[1.0, 2.0, 3.0]]);
        assert_eq!(x.sum().item(), 6.0);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let g = Graph::new();
        let x = g.constant(array![[0.0, 0.0]]);
        let s = x.softmax_rows().value();
        assert_eq!(*s, array![[0.5, 0.5]]);
    }

    #[test]
    fn derivative_of_square() {
        let g = Graph::new();
        let x = g.leaf(array![[3.0]]);
        let y = x.square();
        let dx = g.gradient(y, &[x], false).unwrap();
        assert_eq!(dx[0].item(), 6.0);
    }

    #[test]
    fn hand_computed_two_layer_forward() {
        // h = tanh(x W1 + b1), y = h W2
        let g = Graph::new();
        let x = g.constant(array![[1.0, -1.0]]);
        let w1 = g.constant(array![[0.5, -0.25], [0.25, 0.5]]);
        let b1 = g.constant(array![[0.1, 0.0]]);
        let w2 = g.constant(array![[2.0], [-1.0]]);
        let h = x.matmul(w1).unwrap().add(b1).unwrap().tanh();
        let y = h.matmul(w2).unwrap();
        // x W1 = [0.25, -0.75]; + b1 = [0.35, -0.75]
        let expected = 2.0 * 0.35f64.tanh() - (-0.75f64).tanh();
        assert!((y.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_against_uniform_target_is_stationary_at_uniform_logits() {
        let g = Graph::new();
        let logits = g.leaf(Tensor::zeros((1, 4)));
        let target = g.constant(Tensor::from_elem((1, 4), 0.25));
        let loss = target.mul(logits.softmax_rows().ln()).unwrap().sum().neg();
        let d = g.gradient(loss, &[logits], false).unwrap();
        assert!(d[0].value().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn unreachable_input_gets_zero_gradient() {
        let g = Graph::new();
        let x = g.leaf(array![[1.0, 2.0]]);
        let y = g.leaf(array![[5.0]]);
        let loss = x.sum();
        let d = g.gradient(loss, &[y], false).unwrap();
        assert_eq!(*d[0].value(), array![[0.0]]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::new();
        let x = g.leaf(array![[1.0, 2.0]]);
        assert_eq!(
            g.gradient(x, &[x], false).unwrap_err(),
            AutodiffError::NonScalarLoss((1, 2))
        );
    }

    #[test]
    fn incompatible_shapes_are_a_structural_error() {
        let g = Graph::new();
        let a = g.leaf(Tensor::zeros((2, 3)));
        let b = g.leaf(Tensor::zeros((3, 2)));
        assert!(matches!(a.add(b), Err(AutodiffError::ShapeMismatch { .. })));
        assert!(matches!(a.matmul(a), Err(AutodiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn gradients_without_create_graph_are_constants() {
        let g = Graph::new();
        let x = g.leaf(array![[2.0]]);
        let y = x.square().mul(x).unwrap();
        let d = g.gradient(y, &[x], false).unwrap();
        assert!(!d[0].requires_grad());
        let d = g.gradient(y, &[x], true).unwrap();
        assert!(d[0].requires_grad());
        let dd = g.gradient(d[0], &[x], false).unwrap();
        assert!((dd[0].item() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn block_matmul_matches_dense_block_diagonal() {
        let g = Graph::new();
        let blocks: Rc<[Tensor]> = vec![array![[1.0, 2.0]], array![[3.0], [4.0]]].into();
        let y = g.leaf(array![[1.0], [1.0], [2.0]]);
        let out = y.block_matmul(Rc::clone(&blocks), false).unwrap();
        assert_eq!(*out.value(), array![[3.0], [6.0], [8.0]]);
        let d = g.gradient(out.sum(), &[y], false).unwrap();
        assert_eq!(*d[0].value(), array![[1.0], [2.0], [7.0]]);
    }
}
