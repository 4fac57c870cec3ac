use fisup_autodiff::gradcheck::{random_graph_check, second_order_check};
use fisup_autodiff::{finite_difference, Graph, Tensor};
use ndarray::array;
use proptest::prelude::*;

#[test]
fn random_graphs_match_central_differences() {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let r = random_graph_check(seed, 1e-4);
        assert!(r.scalars <= 200);
        worst = worst.max(r.max_rel_err);
        assert!(r.max_rel_err < 1e-4, "seed {seed}: {r:?}");
    }
    println!("worst relative error {worst:.2e}");
}

#[test]
fn second_order_paths_match_central_differences() {
    let mut checked = 0;
    for seed in 0..100 {
        let r = second_order_check(seed, 1e-4);
        checked += r.entries_checked;
        assert!(r.max_rel_err < 1e-3, "seed {seed}: {r:?}");
    }
    assert!(checked > 500, "only {checked} entries checked");
}

#[test]
fn gradient_of_l1_input_gradient_for_product() {
    // f(x) = x1 * x2, L(x) = |df/dx1| + |df/dx2| = |x2| + |x1|
    let loss_at = |x: &Tensor| {
        let g = Graph::new();
        let v = g.leaf(x.clone());
        let idx0 = v.select_index(vec![0].into()).unwrap();
        let idx1 = v.select_index(vec![1].into()).unwrap();
        let f = idx0.mul(idx1).unwrap().sum();
        let dx = g.gradient(f, &[v], true).unwrap()[0];
        let l = dx.abs().sum();
        let d = g.gradient(l, &[v], false).unwrap()[0];
        (l.item(), (*d.value()).clone())
    };
    let x = array![[2.0, 3.0]];
    let (_, analytic) = loss_at(&x);
    let numeric = finite_difference(&x, 1e-4, |p| loss_at(p).0);
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        assert!((a - n).abs() <= 1e-4 * n.abs().max(1e-12));
    }
    assert_eq!(analytic, array![[1.0, 1.0]]);
}

#[test]
fn stop_gradient_behaves_like_a_constant_leaf() {
    let x0 = array![[0.3, -0.7], [1.1, 0.4]];
    let w0 = array![[0.5], [-1.5]];
    let g = Graph::new();
    let x = g.leaf(x0.clone());
    let w = g.leaf(w0.clone());
    let h = x.matmul(w).unwrap().tanh();
    let frozen = h.stop_gradient();
    let loss = frozen.mul(h).unwrap().sum();
    let a = g.gradient(loss, &[x, w], false).unwrap();

    let g2 = Graph::new();
    let x2 = g2.leaf(x0);
    let w2 = g2.leaf(w0);
    let h2 = x2.matmul(w2).unwrap().tanh();
    let c = g2.constant((*h2.value()).clone());
    let loss2 = c.mul(h2).unwrap().sum();
    let b = g2.gradient(loss2, &[x2, w2], false).unwrap();
    for (ga, gb) in a.iter().zip(b.iter()) {
        assert_eq!(*ga.value(), *gb.value());
    }
}

fn small_matrix() -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-2.0f64..2.0, 6).prop_map(|v| Tensor::from_shape_vec((2, 3), v).unwrap())
}

proptest! {
    #[test]
    fn gradient_is_linear_in_the_loss(x0 in small_matrix(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let g = Graph::new();
        let x = g.leaf(x0);
        let l1 = x.tanh().sum();
        let l2 = x.square().softmax_rows().ln().sum();
        let combined = l1.scale(a).add(l2.scale(b)).unwrap();
        let d = g.gradient(combined, &[x], false).unwrap()[0].value();
        let d1 = g.gradient(l1, &[x], false).unwrap()[0].value();
        let d2 = g.gradient(l2, &[x], false).unwrap()[0].value();
        for ((c, p), q) in d.iter().zip(d1.iter()).zip(d2.iter()) {
            let expected = a * p + b * q;
            prop_assert!((c - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn gradients_are_finite_for_finite_inputs(x0 in small_matrix()) {
        let g = Graph::new();
        let x = g.leaf(x0);
        let loss = x.softmax_rows().clamp_min(1e-12).ln().sum().add(x.abs().sum()).unwrap();
        let d = g.gradient(loss, &[x], true).unwrap()[0];
        prop_assert!(d.value().iter().all(|v| v.is_finite()));
    }
}
