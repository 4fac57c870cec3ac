//! Eager reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D array (scalars are `1×1`, vectors are `r×1` or
//! `1×c`). Operations compute their value immediately and record themselves
//! in a [`Graph`]; [`Graph::gradient`] walks the record backwards. When
//! called with `create_graph = true` the backward pass is itself recorded
//! with the same primitives, so gradients are ordinary [`Var`]s that can be
//! fed into further losses and differentiated again (e.g. `∇θ ‖∇x f‖₁`).

mod error;
pub mod gradcheck;
mod graph;
mod ops;

pub use error::{AutodiffError, Result};
pub use graph::{Graph, Var};

/// The dense value type carried by every node.
pub type Tensor = ndarray::Array2<f64>;

/// Central finite-difference gradient of a scalar function of a tensor.
///
/// Used as an independent oracle in tests throughout the workspace.
pub fn finite_difference<F>(x: &Tensor, h: f64, mut f: F) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut grad = Tensor::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let up = f(&probe);
        probe[[r, c]] = orig - h;
        let down = f(&probe);
        probe[[r, c]] = orig;
        grad[[r, c]] = (up - down) / (2.0 * h);
    }
    grad
}
