use icl_meanshift::dynamics::{DynamicsParams, LayerParams};
use icl_meanshift::fingerprints::{average_ranks, fd_jacobians, fingerprint, pearson, spearman, FiniteDifference, Predictor};
use icl_meanshift::rng;
use icl_meanshift::task_gen::sample_linear_task;
use icl_meanshift::transformer::{self, embed_abstraction, AbstractedWeights, TransformerWeights};
use proptest::prelude::*;
use rand::Rng;

fn random_weights(d: usize, k: usize, layers: usize, seed: u64) -> TransformerWeights {
    let mut r = rng::rng(seed);
    let mut w = TransformerWeights::zeros(d, k, layers);
    let flat: Vec<f64> = (0..w.num_params()).map(|_| r.random_range(-0.6..0.6)).collect();
    w.unflatten_into(&flat);
    w
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![-50.0f64..50.0, (-3i32..3).prop_map(f64::from)], 2..40)
}

/// Largest FD error against the closed-form query and context Jacobians.
fn fd_error(w: &TransformerWeights, prompt: &icl_meanshift::task_gen::Prompt, rel: f64) -> f64 {
    let exact = fingerprint(w, prompt).unwrap();
    let (q, ctx) = fd_jacobians(w, prompt, rel).unwrap();
    let (_, grads) = w.input_gradients(prompt).unwrap().unwrap();
    let mut err = q.max_abs_diff(&exact.query_jacobian);
    for (i, j) in ctx.iter().enumerate() {
        for c in 0..prompt.k() {
            for a in 0..prompt.d() {
                err = err.max((j[(c, a)] - grads[c][(i, a)]).abs());
            }
        }
    }
    err
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn spearman_is_invariant_to_monotone_maps(a in values(), seed in any::<u64>()) {
        let mut r = rng::rng(seed);
        let b: Vec<f64> = a.iter().map(|v| v + r.random_range(-20.0..20.0)).collect();
        let rho = spearman(&a, &b);
        let warped: Vec<f64> = a.iter().map(|v| v.powi(3) + 2.0 * v).collect();
        let squashed: Vec<f64> = b.iter().map(|v| (v / 10.0).tanh()).collect();
        prop_assert_eq!(rho.map(|x| (x * 1e12).round()), spearman(&warped, &squashed).map(|x| (x * 1e12).round()));
        if let Some(rho) = rho {
            prop_assert!((-1.0..=1.0).contains(&rho));
            let neg: Vec<f64> = b.iter().map(|v| -v).collect();
            prop_assert!((spearman(&a, &neg).unwrap() + rho).abs() < 1e-12);
        }
    }

    #[test]
    fn ranks_sum_like_a_permutation(a in values()) {
        let n = a.len() as f64;
        let ranks = average_ranks(&a);
        prop_assert!((ranks.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        for i in 0..a.len() {
            for j in 0..a.len() {
                if a[i] < a[j] {
                    prop_assert!(ranks[i] < ranks[j]);
                } else if a[i] == a[j] {
                    prop_assert_eq!(ranks[i], ranks[j]);
                }
            }
        }
    }

    #[test]
    fn pearson_is_affine_invariant(a in values(), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let b: Vec<f64> = a.iter().map(|v| scale * v + shift).collect();
        if let Some(r) = pearson(&a, &b) {
            prop_assert!((r - 1.0).abs() < 1e-9);
        } else {
            prop_assert!(a.iter().all(|v| *v == a[0]));
        }
    }

    #[test]
    fn finite_differences_converge_at_second_order(seed in any::<u64>(), d in 1usize..4, k in 2usize..4, n in 2usize..6) {
        let w = random_weights(d, k, 2, seed);
        let (_, p) = sample_linear_task(d, k, n, seed).unwrap();
        let coarse = fd_error(&w, &p, 4e-2);
        let fine = fd_error(&w, &p, 2e-2);
        // Only the truncation-dominated regime carries the order information.
        prop_assume!(coarse > 1e-8);
        prop_assert!(coarse / fine > 3.0 && coarse / fine < 5.0, "ratio {}", coarse / fine);
    }

    #[test]
    fn closed_form_and_fd_fingerprints_agree(seed in any::<u64>(), d in 1usize..4, k in 2usize..4, n in 2usize..8) {
        let w = random_weights(d, k, 2, seed);
        let (_, p) = sample_linear_task(d, k, n, seed).unwrap();
        let a = fingerprint(&w, &p).unwrap();
        let b = fingerprint(&FiniteDifference(&w), &p).unwrap();
        prop_assert!(a.query_jacobian.max_abs_diff(&b.query_jacobian) < 1e-6);
        prop_assert!(a.context_influence.max_abs_diff(&b.context_influence) < 1e-6);
        prop_assert_eq!(a.p_true, b.p_true);
    }

    #[test]
    fn transformer_ignores_context_order(seed in any::<u64>(), d in 1usize..5, k in 2usize..4, n in 1usize..12) {
        let w = random_weights(d, k, 3, seed);
        let (_, p) = sample_linear_task(d, k, n, seed).unwrap();
        let q = p.permute_context(&rng::permutation(&mut rng::rng(seed ^ 1), n));
        let a = transformer::forward(&p, &w, None).unwrap().logits;
        let b = transformer::forward(&q, &w, None).unwrap().logits;
        prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-10));
    }

    #[test]
    fn abstracted_weights_commute_with_sandwiches(seed in any::<u64>(), d in 1usize..5, k in 2usize..4, n in 1usize..12, alpha in 0.0f64..2.0) {
        let params = DynamicsParams::constant(LayerParams::new(alpha, 2.0, 0.1, 0.5), 3);
        let w = embed_abstraction(&AbstractedWeights::from_dynamics(&params, k), d, k);
        let (_, p) = sample_linear_task(d, k, n, seed).unwrap();
        let a = transformer::forward(&p, &w, None).unwrap().logits;
        let b = transformer::forward(&p, &w, Some(seed)).unwrap().logits;
        prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn weights_round_trip(seed in any::<u64>(), d in 1usize..5, k in 2usize..4, layers in 1usize..4) {
        let w = random_weights(d, k, layers, seed);
        prop_assert_eq!(TransformerWeights::from_json(&w.to_json().unwrap()).unwrap(), w.clone());
        prop_assert_eq!(TransformerWeights::from_bytes(&w.to_bytes()).unwrap(), w);
    }
}
