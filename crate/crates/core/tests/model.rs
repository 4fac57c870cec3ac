use fisup_core::autodiff::{finite_difference, Graph, Tensor};
use fisup_core::model::*;
use fisup_core::seeding;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::Rng;

fn net(seed: u64) -> AttentionClassifier {
    AttentionClassifier::new(ModelConfig { n_features: 5, question_dim: 4, n_classes: 6, hidden: 8 }, seed).unwrap()
}

fn random_input(rng: &mut seeding::Rng, n: usize) -> (Array2<f64>, Vec<f64>) {
    let x = Array2::from_shape_fn((n, 5), |_| rng.random_range(-2.0..2.0));
    let q = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    (x, q)
}

#[test]
fn hand_set_toy_model() {
    let cfg = ModelConfig { n_features: 2, question_dim: 1, n_classes: 2, hidden: 1 };
    let params = vec![
        array![[0.7], [-0.3]],
        array![[0.2]],
        array![[0.0]],
        array![[1.5]],
        array![[0.3]],
        array![[0.1]],
        array![[0.4], [0.2]],
        array![[-0.5]],
        array![[0.05]],
        array![[1.0, -2.0]],
        array![[0.0, 0.5]],
    ];
    let m = AttentionClassifier::from_params(cfg, params).unwrap();
    let (dist, att) = forward(&m, &array![[1.0, -0.5]], &[2.0]).unwrap();
    // One object: attention 1, pooled vector = the object.
    let qp = (2.0f64 * 0.3 + 0.1).tanh();
    let h = (1.0f64 * 0.4 - 0.5 * 0.2 - 0.5 * qp + 0.05).tanh();
    let logits = [h, -2.0 * h + 0.5];
    let z = logits[0].exp() + logits[1].exp();
    assert_eq!(att.unwrap(), vec![1.0]);
    assert!((dist.probs[0] - logits[0].exp() / z).abs() < 1e-12);
    assert!((dist.probs[1] - logits[1].exp() / z).abs() < 1e-12);
}

#[test]
fn outputs_are_distributions_and_predict_is_their_argmax() {
    let m = net(3);
    let mut rng = seeding::stream(3, "inputs");
    for _ in 0..1000 {
        let (x, q) = random_input(&mut rng, 4);
        let (dist, att) = forward(&m, &x, &q).unwrap();
        assert!((dist.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(dist.probs.iter().all(|&p| p >= 0.0));
        let att = att.unwrap();
        assert!(att.iter().all(|&a| a >= 0.0));
        assert!((att.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(predict(&m, &x, &q).unwrap(), argmax(&dist.probs));
    }
}

#[test]
fn wrong_shapes_are_rejected() {
    let cfg = ModelConfig { n_features: 5, question_dim: 4, n_classes: 6, hidden: 8 };
    assert!(AttentionClassifier::from_params(cfg, vec![Tensor::zeros((1, 1))]).is_err());
    assert!(AttentionClassifier::new(ModelConfig { n_classes: 1, ..cfg }, 0).is_err());
}

#[test]
fn cross_entropy_gradient_wrt_objects_matches_finite_differences() {
    let m = net(5);
    let (x, q) = random_input(&mut seeding::stream(5, "x"), 3);
    let qm = Array2::from_shape_vec((1, 4), q).unwrap();
    let label = 2;
    let loss_of = |x: &Tensor| {
        let (logits, _) = forward_values(&m, x, &qm, 3).unwrap();
        let d = AnswerDistribution::from_logits(logits.row(0).as_slice().unwrap());
        -d.probs[label].ln()
    };
    let g = Graph::new();
    let params = bind_params(&g, &m, false);
    let xv = g.leaf(x.clone());
    let out = m.forward(&params, xv, g.constant(qm.clone()), 3).unwrap();
    let logp = out.logits.softmax_rows().ln();
    let loss = logp.select_index(vec![label].into()).unwrap().sum().neg();
    let analytic = g.gradient(loss, &[xv], false).unwrap()[0].value().clone();
    let numeric = finite_difference(&x, 1e-5, loss_of);
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        assert!((a - n).abs() <= 1e-6 + 1e-4 * n.abs(), "{a} vs {n}");
    }
}

proptest! {
    #[test]
    fn object_order_does_not_matter(seed in 0u64..500, perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let m = net(seed);
        let (x, q) = random_input(&mut seeding::stream(seed, "perm"), 5);
        let px = x.select(ndarray::Axis(0), &perm);
        let (a, att_a) = forward(&m, &x, &q).unwrap();
        let (b, att_b) = forward(&m, &px, &q).unwrap();
        for (p, r) in a.probs.iter().zip(&b.probs) {
            prop_assert!((p - r).abs() < 1e-12);
        }
        let (att_a, att_b) = (att_a.unwrap(), att_b.unwrap());
        for (k, &src) in perm.iter().enumerate() {
            prop_assert!((att_b[k] - att_a[src]).abs() < 1e-12);
        }
    }
}
