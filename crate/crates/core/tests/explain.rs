use fisup_autodiff::{finite_difference, Graph, Tensor};
use fisup_core::batch::Batch;
use fisup_core::explain::*;
use fisup_core::model::*;
use fisup_core::seeding;
use fisup_core::synthdata::{Instance, Split};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

fn instance(n: usize, d: usize, q: usize, seed: u64) -> Instance {
    let mut rng = seeding::stream(seed, "inst");
    Instance {
        id: 0,
        objects: Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0)),
        question: (0..q).map(|_| rng.random_range(-1.0..1.0)).collect(),
        question_type: 0,
        label: 1,
        human_fi: vec![0.0; n],
        important: vec![false; n],
        split: Split::Train,
    }
}

fn model(d: usize, q: usize, seed: u64) -> AttentionClassifier {
    let mut m = AttentionClassifier::new(
        ModelConfig { n_features: d, question_dim: q, n_classes: 3, hidden: 8 },
        seed,
    )
    .unwrap();
    // Larger weights so the logit depends on many feature interactions.
    for p in m.params_mut() {
        p.mapv_inplace(|v| v * 2.0 + 0.1);
    }
    m
}

/// Brute-force Shapley values of `v(S) = logit(x_S)` over all subsets.
fn brute_force_shapley<N: Network>(net: &N, inst: &Instance, class: usize) -> Vec<f64> {
    let n = inst.n_objects();
    let value = |mask: usize| {
        let mut x = inst.objects.clone();
        for k in 0..n {
            if mask >> k & 1 == 0 {
                x.row_mut(k).fill(-1.0);
            }
        }
        forward(net, &x, &inst.question).unwrap().0.logits[class]
    };
    let values: Vec<f64> = (0..1usize << n).map(value).collect();
    let fact = |m: usize| (1..=m).map(|v| v as f64).product::<f64>();
    (0..n)
        .map(|j| {
            let mut phi = 0.0;
            for s in 0..1usize << n {
                if s >> j & 1 == 1 {
                    continue;
                }
                let size = s.count_ones() as usize;
                let w = fact(size) * fact(n - size - 1) / fact(n);
                phi += w * (values[s | 1 << j] - values[s]);
            }
            phi
        })
        .collect()
}

fn explain_one<N: Network>(net: &N, inst: &Instance, cfg: &ExplainConfig, seed: u64) -> ExplanationVector {
    let batch = Batch::from_instances(&[inst]).unwrap();
    let mut rng = seeding::stream(seed, "explain");
    explain_values(net, &batch, cfg, &mut rng).unwrap().remove(0)
}

#[test]
fn exhaustive_shap_equals_brute_force_shapley() {
    for (n, seed) in [(2, 1), (4, 2), (6, 3), (8, 4)] {
        let m = model(4, 3, seed);
        let inst = instance(n, 4, 3, seed);
        let cfg = ExplainConfig::new(FiMethod::Shap, 1 << n, ClassMode::Gt);
        let e = explain_one(&m, &inst, &cfg, 0);
        let oracle = brute_force_shapley(&m, &inst, 1);
        for (a, b) in e.scores.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6, "n={n}: {a} vs {b}");
        }
    }
}

#[test]
fn shap_is_additive() {
    let m = model(4, 3, 9);
    let inst = instance(6, 4, 3, 9);
    let cfg = ExplainConfig::new(FiMethod::Shap, 6, ClassMode::Pred);
    let e = explain_one(&m, &inst, &cfg, 5);
    let full = forward(&m, &inst.objects, &inst.question).unwrap().0;
    let null = forward(&m, &Array2::from_elem((6, 4), -1.0), &inst.question).unwrap().0;
    let gap = full.logits[e.target_class] - null.logits[e.target_class];
    assert!((e.scores.iter().sum::<f64>() - gap).abs() < 1e-4);
}

#[test]
fn avg_effect_converges_to_shapley() {
    let m = model(4, 3, 11);
    let inst = instance(6, 4, 3, 11);
    let cfg = ExplainConfig::new(FiMethod::AvgEffect, 50_000 * 6, ClassMode::Gt);
    let e = explain_one(&m, &inst, &cfg, 1);
    let oracle = brute_force_shapley(&m, &inst, 1);
    let worst = e.scores.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 0.02, "max deviation {worst}");
}

#[test]
fn loo_koi_match_direct_definitions() {
    let m = model(4, 3, 5);
    let inst = instance(5, 4, 3, 5);
    let logit = |x: &Array2<f64>| forward(&m, x, &inst.question).unwrap().0.logits[1];
    let loo = explain_one(&m, &inst, &ExplainConfig::new(FiMethod::Loo, 5, ClassMode::Gt), 0);
    let koi = explain_one(&m, &inst, &ExplainConfig::new(FiMethod::Koi, 5, ClassMode::Gt), 0);
    let null = Array2::from_elem((5, 4), -1.0);
    for j in 0..5 {
        let mut dropped = inst.objects.clone();
        dropped.row_mut(j).fill(-1.0);
        assert!((loo.scores[j] - (logit(&inst.objects) - logit(&dropped))).abs() < 1e-12);
        let mut kept = null.clone();
        kept.row_mut(j).assign(&inst.objects.row(j));
        assert!((koi.scores[j] - (logit(&kept) - logit(&null))).abs() < 1e-12);
    }
}

#[test]
fn vanilla_grad_matches_finite_differences() {
    let m = model(4, 3, 21);
    let inst = instance(5, 4, 3, 21);
    let e = explain_one(&m, &inst, &ExplainConfig::new(FiMethod::VanillaGrad, 1, ClassMode::Gt), 0);
    let fd = finite_difference(&inst.objects, 1e-5, |x| forward(&m, x, &inst.question).unwrap().0.logits[1]);
    for k in 0..5 {
        let expected: f64 = fd.row(k).sum();
        assert!((e.scores[k] - expected).abs() <= 1e-4 * expected.abs().max(1e-3));
    }
}

fn linear_net(n: usize, d: usize, seed: u64) -> LinearNetwork {
    let mut rng = seeding::stream(seed, "linear");
    let w: Vec<Tensor> = (0..2).map(|_| Tensor::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))).collect();
    LinearNetwork::new(w, vec![0.3, -0.1]).unwrap()
}

#[test]
fn vanilla_grad_of_linear_map_sums_weights() {
    let net = linear_net(3, 4, 2);
    let mut inst = instance(3, 4, 1, 2);
    inst.objects.fill(1.0);
    inst.label = 0;
    let e = explain_one(&net, &inst, &ExplainConfig::new(FiMethod::VanillaGrad, 1, ClassMode::Gt), 0);
    for k in 0..3 {
        assert!((e.scores[k] - net.weight(0).row(k).sum()).abs() < 1e-12);
    }
}

#[test]
fn expected_grad_on_linear_model() {
    let net = linear_net(4, 3, 4);
    let mut inst = instance(4, 3, 1, 4);
    inst.label = 1;
    let cfg = ExplainConfig::new(FiMethod::ExpectedGrad, 10_000, ClassMode::Gt);
    let e = explain_one(&net, &inst, &cfg, 3);
    for k in 0..4 {
        let expected: f64 = (0..3).map(|j| (inst.objects[[k, j]] + 1.0) * net.weight(1)[[k, j]]).sum();
        assert!((e.scores[k] - expected).abs() <= 0.02 * expected.abs(), "{} vs {expected}", e.scores[k]);
    }
    inst.objects.fill(-1.0);
    let e = explain_one(&net, &inst, &cfg, 3);
    assert!(e.scores.iter().all(|&s| s == 0.0));
}

#[test]
fn expected_grad_is_deterministic_and_rejects_zero_samples() {
    let m = model(4, 3, 8);
    let inst = instance(4, 4, 3, 8);
    let cfg = ExplainConfig::new(FiMethod::ExpectedGrad, 20, ClassMode::Pred);
    assert_eq!(explain_one(&m, &inst, &cfg, 4), explain_one(&m, &inst, &cfg, 4));
    let batch = Batch::from_instances(&[&inst]).unwrap();
    let zero = ExplainConfig::new(FiMethod::ExpectedGrad, 0, ClassMode::Pred);
    assert!(explain_values(&m, &batch, &zero, &mut seeding::stream(0, "x")).is_err());
}

#[test]
fn attention_scores() {
    let m = model(4, 3, 6);
    let single = instance(1, 4, 3, 6);
    let cfg = ExplainConfig::new(FiMethod::Attention, 1, ClassMode::Pred);
    assert!((explain_one(&m, &single, &cfg, 0).scores[0] - 1.0).abs() < 1e-15);
    let mut same = instance(4, 4, 3, 7);
    let row = same.objects.row(0).to_owned();
    for mut r in same.objects.rows_mut() {
        r.assign(&row);
    }
    let e = explain_one(&m, &same, &cfg, 0);
    assert!(e.scores.iter().all(|s| (s - 0.25).abs() < 1e-12));
}

#[test]
fn constant_model_gives_zero_scores_for_every_method() {
    let net = ConstantNetwork::new(vec![0.2, 1.5, -0.3]);
    let inst = instance(5, 4, 3, 1);
    for method in FiMethod::ALL {
        if method == FiMethod::Attention {
            continue;
        }
        let e = explain_one(&net, &inst, &ExplainConfig::new(method, 40, ClassMode::Pred), 2);
        assert!(e.scores.iter().all(|&s| s == 0.0), "{method:?}: {:?}", e.scores);
    }
}

#[test]
fn budgeted_explanations_score_exactly_k_features() {
    let m = model(4, 3, 3);
    let inst = instance(7, 4, 3, 3);
    for method in [FiMethod::Loo, FiMethod::Koi, FiMethod::Shap, FiMethod::AvgEffect] {
        let e = explain_one(&m, &inst, &ExplainConfig::new(method, 3, ClassMode::Pred), 9);
        assert_eq!(e.explained_mask.iter().filter(|&&x| x).count(), 3, "{method:?}");
        for (s, on) in e.scores.iter().zip(&e.explained_mask) {
            if !on {
                assert_eq!(*s, 0.0);
            }
        }
    }
}

/// `Σ_b cos(e_b, ẽ_b + shift_b)`.
fn cos_loss<'g>(
    net: &AttentionClassifier,
    g: &'g Graph,
    trainable: bool,
    shift: Option<&Tensor>,
    batch: &Batch,
    human: &Tensor,
    cfg: &ExplainConfig,
) -> (fisup_autodiff::Var<'g>, Vec<fisup_autodiff::Var<'g>>) {
    let params = bind_params(g, net, trainable);
    let base = BaseForward::new(net, &params, g, batch, false).unwrap();
    let ex = Explainer { net, params: &params, batch, base: &base, differentiable: true };
    let mut rng = seeding::stream(0, "loo");
    let e = ex.run(cfg, &mut rng).unwrap().scores;
    let e = match shift {
        Some(r) => e.add(g.constant(r.clone())).unwrap(),
        None => e,
    };
    let h = g.constant(human.clone());
    let dot = e.mul(h).unwrap().sum_cols();
    let norms = e.square().sum_cols().sqrt().mul(h.square().sum_cols().sqrt()).unwrap();
    (dot.div(norms).unwrap().sum(), params)
}

/// ∇θ of cos(e, ẽ) with LOO scores, against finite differences over θ.
#[test]
fn loo_cosine_gradient_matches_finite_differences() {
    let m = model(3, 2, 17);
    let insts: Vec<Instance> = (0..2).map(|s| instance(4, 3, 2, 40 + s)).collect();
    let refs: Vec<&Instance> = insts.iter().collect();
    let batch = Batch::from_instances(&refs).unwrap();
    let human = Tensor::from_shape_fn((2, 4), |(b, k)| if (b + k) % 3 == 0 { 1.0 } else { 0.1 });
    let cfg = ExplainConfig::new(FiMethod::Loo, 4, ClassMode::Gt);
    let g = Graph::new();
    let (l, params) = cos_loss(&m, &g, true, None, &batch, &human, &cfg);
    let grads = g.gradient(l, &params, false).unwrap();
    // LOO = f(x) − f(x_{-j}); with f(x) frozen the θ-dependence is −f(x_{-j}).
    let base_logit = |net: &AttentionClassifier| {
        let (logits, _) = forward_values(net, &batch.objects, &batch.questions, 4).unwrap();
        Tensor::from_shape_fn((2, 4), |(b, _)| logits[[b, 1]])
    };
    let frozen = base_logit(&m);
    for (i, grad) in grads.iter().enumerate() {
        let fd = finite_difference(&m.params()[i], 1e-5, |p| {
            let mut probe = m.clone();
            probe.params_mut()[i] = p.clone();
            let g = Graph::new();
            let shift = &frozen - &base_logit(&probe);
            cos_loss(&probe, &g, false, Some(&shift), &batch, &human, &cfg).0.item()
        });
        for (a, b) in grad.value().iter().zip(fd.iter()) {
            let scale = a.abs().max(b.abs());
            if scale > 1e-6 {
                assert!((a - b).abs() / scale < 1e-3, "param {i}: {a} vs {b}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn loo_and_koi_are_repeatable(seed in 0u64..1000) {
        let m = model(4, 3, seed);
        let inst = instance(5, 4, 3, seed);
        for method in [FiMethod::Loo, FiMethod::Koi] {
            let cfg = ExplainConfig::new(method, 5, ClassMode::Pred);
            prop_assert_eq!(explain_one(&m, &inst, &cfg, 1), explain_one(&m, &inst, &cfg, 2));
        }
    }

    #[test]
    fn attention_sums_to_one(seed in 0u64..1000, n in 1usize..8) {
        let m = model(4, 3, seed);
        let inst = instance(n, 4, 3, seed);
        let e = explain_one(&m, &inst, &ExplainConfig::new(FiMethod::Attention, 1, ClassMode::Pred), 0);
        prop_assert!((e.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(e.scores.iter().all(|&s| s >= 0.0));
    }
}
