//! Small dense solves, delegated to nalgebra.

use nalgebra::DMatrix;
use ndarray::Array2;

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[[r, c]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(r, c)| m[(r, c)])
}

/// Solves `A X = B`; `None` when `A` is singular to working precision.
pub fn solve(a: &Array2<f64>, b: &Array2<f64>) -> Option<Array2<f64>> {
    let am = to_na(a);
    let scale = am.amax().max(f64::MIN_POSITIVE);
    let lu = am.lu();
    let u = lu.u();
    let min_pivot = (0..u.nrows()).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-12 * scale) {
        return None;
    }
    lu.solve(&to_na(b)).map(|x| from_na(&x))
}

/// Columns of `x` that are linearly independent of the earlier ones
/// (Gram–Schmidt with relative tolerance).
pub fn independent_columns(x: &Array2<f64>) -> Vec<usize> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    for j in 0..x.ncols() {
        let mut v: Vec<f64> = x.column(j).to_vec();
        let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for _ in 0..2 {
            for q in &basis {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm0 > 0.0 && norm > 1e-9 * norm0 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
            kept.push(j);
        }
    }
    kept
}

/// Ordinary least squares of `y` on `x` (no implicit intercept).
/// Returns the coefficients (zero for dropped collinear columns) and the
/// indices of the columns that were used.
pub fn ols(x: &Array2<f64>, y: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let kept = independent_columns(x);
    let mut coef = vec![0.0; x.ncols()];
    if kept.is_empty() {
        return (coef, kept);
    }
    let xs = DMatrix::from_fn(x.nrows(), kept.len(), |r, c| x[[r, kept[c]]]);
    let ys = DMatrix::from_column_slice(y.len(), 1, y);
    let xtx = xs.transpose() * &xs;
    let xty = xs.transpose() * ys;
    let sol = xtx
        .clone()
        .cholesky()
        .map(|c| c.solve(&xty))
        .or_else(|| xtx.lu().solve(&xty))
        .unwrap_or_else(|| DMatrix::zeros(kept.len(), 1));
    for (i, &j) in kept.iter().enumerate() {
        coef[j] = sol[(i, 0)];
    }
    (coef, kept)
}
