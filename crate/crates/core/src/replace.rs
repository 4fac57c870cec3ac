//! Replace functions: what a masked-out object row becomes.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReplaceKind {
    AllZeros,
    #[default]
    AllNegOnes,
    /// Original row plus zero-mean noise with the batch standard deviation.
    Gaussian,
    /// A row drawn from another instance of the batch.
    Marginal,
    /// Entries of the replaced rows permuted within the instance.
    Shuffle,
}

impl ReplaceKind {
    pub fn is_stochastic(self) -> bool {
        !matches!(self, ReplaceKind::AllZeros | ReplaceKind::AllNegOnes)
    }

    pub fn name(self) -> &'static str {
        match self {
            ReplaceKind::AllZeros => "all_zeros",
            ReplaceKind::AllNegOnes => "all_neg_ones",
            ReplaceKind::Gaussian => "gaussian",
            ReplaceKind::Marginal => "marginal",
            ReplaceKind::Shuffle => "shuffle",
        }
    }
}

/// The batch a stochastic replacement draws from: `(B·n) × d` rows.
#[derive(Debug, Clone)]
pub struct BatchContext<'a> {
    rows: ArrayView2<'a, f64>,
    n_objects: usize,
    std: f64,
}

impl<'a> BatchContext<'a> {
    pub fn new(rows: ArrayView2<'a, f64>, n_objects: usize) -> Result<Self> {
        if n_objects == 0 || !rows.nrows().is_multiple_of(n_objects) || rows.nrows() == 0 {
            return Err(contract("batch rows must be a positive multiple of n_objects"));
        }
        let len = rows.len() as f64;
        let mean = rows.sum() / len;
        let var = rows.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len;
        Ok(Self { rows, n_objects, std: var.sqrt() })
    }

    pub fn n_instances(&self) -> usize {
        self.rows.nrows() / self.n_objects
    }

    /// Standard deviation over every entry of the batch.
    pub fn std(&self) -> f64 {
        self.std
    }
}

/// Replaces the rows of `x` whose `keep` flag is false.
///
/// `batch` is the surrounding batch and the position of `x` in it; it is
/// required for the stochastic strategies.
pub fn replace<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    keep: &[bool],
    kind: ReplaceKind,
    batch: Option<(&BatchContext, usize)>,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let (n, d) = x.dim();
    if keep.len() != n {
        return Err(contract(format!("keep mask has {} entries for {n} objects", keep.len())));
    }
    let mut out = x.to_owned();
    if keep.iter().all(|&k| k) {
        return Ok(out);
    }
    let dropped: Vec<usize> = (0..n).filter(|&i| !keep[i]).collect();
    match kind {
        ReplaceKind::AllZeros | ReplaceKind::AllNegOnes => {
            let v = if kind == ReplaceKind::AllZeros { 0.0 } else { -1.0 };
            for &i in &dropped {
                out.row_mut(i).fill(v);
            }
            return Ok(out);
        }
        _ => {}
    }
    let Some((ctx, owner)) = batch else {
        return Err(contract(format!("{} replacement needs a batch context", kind.name())));
    };
    match kind {
        ReplaceKind::Gaussian => {
            for &i in &dropped {
                for v in out.row_mut(i) {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += ctx.std * z;
                }
            }
        }
        ReplaceKind::Marginal => {
            let others = ctx.n_instances();
            if others < 2 {
                return Err(contract("marginal replacement needs at least two batch instances"));
            }
            if ctx.rows.ncols() != d {
                return Err(contract("batch feature width differs from the instance"));
            }
            for &i in &dropped {
                let mut src = rng.random_range(0..others - 1);
                if src >= owner {
                    src += 1;
                }
                let row = src * ctx.n_objects + rng.random_range(0..ctx.n_objects);
                out.row_mut(i).assign(&ctx.rows.row(row));
            }
        }
        ReplaceKind::Shuffle => {
            let mut pool: Vec<f64> = dropped.iter().flat_map(|&i| x.row(i).to_vec()).collect();
            pool.shuffle(rng);
            for (k, &i) in dropped.iter().enumerate() {
                for j in 0..d {
                    out[[i, j]] = pool[k * d + j];
                }
            }
        }
        ReplaceKind::AllZeros | ReplaceKind::AllNegOnes => unreachable!(),
    }
    Ok(out)
}

/// Keep mask for `x_{e∪u}`: elementwise max.
pub fn union_mask(e: &[bool], u: &[bool]) -> Vec<bool> {
    e.iter().zip(u).map(|(a, b)| *a || *b).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use ndarray::array;

    #[test]
    fn neg_ones_replaces_dropped_row() {
        let x = array![[0.5, -0.2]];
        let mut rng = seeding::stream(0, "r");
        let y = replace(x.view(), &[false], ReplaceKind::AllNegOnes, None, &mut rng).unwrap();
        assert_eq!(y, array![[-1.0, -1.0]]);
    }

    #[test]
    fn stochastic_without_batch_is_an_error() {
        let x = array![[0.5, -0.2], [1.0, 2.0]];
        let mut rng = seeding::stream(0, "r");
        for kind in [ReplaceKind::Gaussian, ReplaceKind::Marginal, ReplaceKind::Shuffle] {
            let err = replace(x.view(), &[true, false], kind, None, &mut rng);
            assert!(matches!(err, Err(crate::Error::Contract(_))));
        }
    }

    #[test]
    fn marginal_draws_rows_of_other_instances() {
        let batch = array![[1.0, 1.0], [2.0, 2.0], [7.0, 7.0], [8.0, 8.0]];
        let ctx = BatchContext::new(batch.view(), 2).unwrap();
        let x = batch.slice(ndarray::s![0..2, ..]);
        let mut rng = seeding::stream(3, "r");
        for _ in 0..50 {
            let y = replace(x, &[false, true], ReplaceKind::Marginal, Some((&ctx, 0)), &mut rng).unwrap();
            assert!(y[[0, 0]] == 7.0 || y[[0, 0]] == 8.0);
            assert_eq!(y.row(1), x.row(1));
        }
    }

    #[test]
    fn batch_std_is_over_all_entries() {
        let batch = array![[1.0, -1.0], [1.0, -1.0]];
        let ctx = BatchContext::new(batch.view(), 1).unwrap();
        assert!((ctx.std() - 1.0).abs() < 1e-15);
    }
}
