//! Randomized gradient checks against central finite differences.
//!
//! The graphs built here are random compositions of every primitive with
//! well-scaled values, so that a central difference with `h ≈ 1e-4` is an
//! accurate oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{finite_difference, Graph, Tensor, Var};

/// Worst disagreement found by a check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub entries_checked: usize,
    pub scalars: usize,
}

impl GradCheck {
    fn merge(&mut self, analytic: &Tensor, numeric: &Tensor, floor: f64) {
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let scale = a.abs().max(n.abs());
            if scale > floor {
                self.max_rel_err = self.max_rel_err.max((a - n).abs() / scale);
                self.entries_checked += 1;
            }
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Tensor {
    Tensor::from_shape_fn(shape, |_| rng.random_range(-1.5..1.5))
}

const SHAPES: [(usize, usize); 5] = [(3, 4), (4, 2), (1, 4), (3, 1), (2, 3)];

/// Grows a random expression over `leaves` and reduces it to a scalar.
/// The same `seed` always produces the same expression structure.
fn random_expression<'g>(g: &'g Graph, leaves: &[Var<'g>], seed: u64) -> Var<'g> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut pool: Vec<Var<'g>> = leaves.to_vec();
    for _ in 0..10 {
        let a = pool[rng.random_range(0..pool.len())];
        let b = pool[rng.random_range(0..pool.len())];
        let (sa, sb) = (a.shape(), b.shape());
        let positive = |v: Var<'g>| v.square().shift(1.0);
        let next = match rng.random_range(0..20) {
            0 => a.add(b).ok(),
            1 => a.sub(b).ok(),
            2 => a.mul(b).ok(),
            3 => a.div(positive(b)).ok(),
            4 if sa.1 == sb.0 => a.matmul(b).ok(),
            5 if sa.1 == sb.1 => a.matmul_nt(b).ok(),
            6 if sa.0 == sb.0 => a.matmul_tn(b).ok(),
            7 => Some(a.tanh()),
            8 => Some(a.tanh().exp()),
            9 => Some(positive(a).ln()),
            10 => Some(positive(a).sqrt()),
            11 => Some(a.softmax_rows()),
            12 => Some(a.transpose()),
            13 => Some(a.sum_rows()),
            14 => Some(a.sum_cols()),
            15 => Some(a.repeat_rows(2)),
            16 if sa.0 % 2 == 0 => a.group_sum_rows(2).ok(),
            17 => a.reshape(sa.1, sa.0).ok(),
            18 => Some(a.abs().scale(0.5).shift(0.1)),
            19 => {
                let idx: Vec<usize> = (0..sa.0).map(|_| rng.random_range(0..sa.1)).collect();
                a.select_index(idx.into()).ok()
            }
            _ => None,
        };
        if let Some(v) = next {
            pool.push(v);
        }
    }
    // Weighted reduction over the last few nodes so every branch matters.
    let mut wrng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31));
    let mut loss = g.scalar(0.0);
    for v in pool.iter().rev().take(4) {
        let w = g.constant(random_tensor(&mut wrng, v.shape()));
        loss = loss.add(v.mul(w).unwrap().sum()).unwrap();
    }
    loss
}

fn random_leaves(seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=4);
    (0..k)
        .map(|_| {
            let shape = SHAPES[rng.random_range(0..SHAPES.len())];
            random_tensor(&mut rng, shape)
        })
        .collect()
}

fn eval_expression(leaves: &[Tensor], seed: u64) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.constant(t.clone())).collect();
    random_expression(&g, &vars, seed).item()
}

/// First-order check of a random graph.
pub fn random_graph_check(seed: u64, h: f64) -> GradCheck {
    let leaves = random_leaves(seed);
    let g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = random_expression(&g, &vars, seed);
    let grads = g.gradient(loss, &vars, false).expect("scalar loss");
    let mut report = GradCheck {
        max_rel_err: 0.0,
        entries_checked: 0,
        scalars: leaves.iter().map(|t| t.len()).sum(),
    };
    for (i, grad) in grads.iter().enumerate() {
        let numeric = finite_difference(&leaves[i], h, |probe| {
            let mut shifted = leaves.clone();
            shifted[i] = probe.clone();
            eval_expression(&shifted, seed)
        });
        report.merge(&grad.value(), &numeric, 1e-6);
    }
    report
}

/// Builds `‖∇ₓ E(x, θ)‖₁ + ½‖∇ₓ E(x, θ)‖²` for a random expression `E`
/// and returns it as a node of `g`.
fn input_gradient_loss<'g>(g: &'g Graph, x: Var<'g>, theta: &[Var<'g>], seed: u64) -> Var<'g> {
    let mut leaves = vec![x];
    leaves.extend_from_slice(theta);
    // Couple x with every θ so the mixed second derivative is nonzero.
    let summary = x.tanh().mean();
    let coupled: Vec<Var<'g>> = theta.iter().map(|t| t.mul(summary).unwrap().tanh()).collect();
    leaves.extend_from_slice(&coupled);
    let mut inner = random_expression(g, &leaves, seed);
    for c in &coupled {
        inner = inner.add(c.square().sum()).unwrap();
    }
    let dx = g.gradient(inner, &[x], true).expect("scalar")[0];
    dx.abs().sum().add(dx.square().sum().scale(0.5)).unwrap()
}

/// Second-order check: derivative w.r.t. `θ` of a loss that contains an
/// input gradient, against finite differences over `θ`.
pub fn second_order_check(seed: u64, h: f64) -> GradCheck {
    let leaves = random_leaves(seed);
    let (x0, theta0) = (leaves[0].clone(), leaves[1..].to_vec());
    let g = Graph::new();
    let x = g.leaf(x0.clone());
    let theta: Vec<Var> = theta0.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = input_gradient_loss(&g, x, &theta, seed);
    let grads = g.gradient(loss, &theta, false).expect("scalar loss");
    let mut report = GradCheck {
        max_rel_err: 0.0,
        entries_checked: 0,
        scalars: leaves.iter().map(|t| t.len()).sum(),
    };
    for (i, grad) in grads.iter().enumerate() {
        let numeric = finite_difference(&theta0[i], h, |probe| {
            let g = Graph::new();
            let x = g.leaf(x0.clone());
            let theta: Vec<Var> = theta0
                .iter()
                .enumerate()
                .map(|(j, t)| g.constant(if j == i { probe.clone() } else { t.clone() }))
                .collect();
            input_gradient_loss(&g, x, &theta, seed).item()
        });
        report.merge(&grad.value(), &numeric, 1e-6);
    }
    report
}
