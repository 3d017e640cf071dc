use icl_meanshift::dynamics::{self, Centering, DynamicsParams, LayerParams, Mode, State, StepContext};
use icl_meanshift::linalg::Mat;
use icl_meanshift::rng;
use icl_meanshift::task_gen::{make_semisupervised, sample_linear_task, Prompt, SemiSupervisedOptions};
use proptest::prelude::*;

fn layer() -> impl Strategy<Value = LayerParams> {
    (0.0f64..2.0, 0.0f64..4.0, 0.0f64..0.3, 0.0f64..1.0).prop_map(|(a, g, ap, gp)| LayerParams::new(a, g, ap, gp))
}

fn params() -> impl Strategy<Value = DynamicsParams> {
    (prop::collection::vec(layer(), 1..5), any::<bool>(), any::<bool>()).prop_map(|(s, dominated, centered)| {
        DynamicsParams::new(s)
            .with_mode(if dominated { Mode::LabelDominated } else { Mode::FullSoftmax })
            .with_centering(if centered { Centering::Centered } else { Centering::Uncentered })
    })
}

/// A partially labeled linear-task prompt.
fn prompt() -> impl Strategy<Value = Prompt> {
    (1usize..6, 2usize..5, 2usize..20, any::<u64>(), 0.0f64..=1.0).prop_map(|(d, k, n, seed, frac)| {
        let (task, p) = sample_linear_task(d, k, n, seed).unwrap();
        let n_lab = ((frac * n as f64) as usize).max(1);
        make_semisupervised(&p, &task, SemiSupervisedOptions::new(0.3, n_lab), seed).unwrap()
    })
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

/// Random orthogonal `d x d` matrix by Gram-Schmidt.
fn orthogonal(d: usize, seed: u64) -> Mat {
    let mut r = rng::rng(seed);
    let mut rows: Vec<Vec<f64>> = vec![];
    while rows.len() < d {
        let mut v = rng::normal_vec(&mut r, d);
        for u in &rows {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Mat::from_rows(&rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_is_row_stochastic(p in prompt(), params in params()) {
        let traj = dynamics::run(&p, &params).unwrap();
        for a in &traj.attention {
            prop_assert_eq!(a.shape(), (p.n() + 1, p.n()));
            for i in 0..a.rows() {
                prop_assert!(a.row(i).iter().all(|&v| v >= 0.0));
                prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn context_permutation_leaves_prediction_unchanged(p in prompt(), params in params(), seed in any::<u64>()) {
        let perm = rng::permutation(&mut rng::rng(seed), p.n());
        let q = p.permute_context(&perm);
        let a = dynamics::run(&p, &params).unwrap();
        let b = dynamics::run(&q, &params).unwrap();
        prop_assert!(close(a.final_state().query_y(), b.final_state().query_y(), 1e-9));
        prop_assert!(close(a.final_state().query_x(), b.final_state().query_x(), 1e-9));
        let (fa, fb) = (a.final_state(), b.final_state());
        for (new, &old) in perm.iter().enumerate() {
            prop_assert!(close(fb.x.row(new), fa.x.row(old), 1e-9));
            prop_assert!(close(fb.y.row(new), fa.y.row(old), 1e-9));
        }
    }

    #[test]
    fn rotations_commute_with_the_feature_flow(p in prompt(), params in params(), seed in any::<u64>()) {
        let q = orthogonal(p.d(), seed);
        let mut r = p.clone();
        r.x = p.x.matmul_t(&q);
        r.x_test = Mat::from_vec(1, p.d(), p.x_test.clone()).matmul_t(&q).into_vec();
        let a = dynamics::run_final(&p, &params).unwrap();
        let b = dynamics::run_final(&r, &params).unwrap();
        prop_assert!(close(a.query_y(), b.query_y(), 1e-8));
        prop_assert!(a.x.matmul_t(&q).max_abs_diff(&b.x) <= 1e-8 * (1.0 + a.x.max_abs()));
    }

    #[test]
    fn class_relabeling_permutes_logits(p in prompt(), params in params(), seed in any::<u64>()) {
        let sigma = rng::permutation(&mut rng::rng(seed), p.k());
        let classes: Vec<Option<usize>> = p.classes().into_iter().map(|c| c.map(|c| sigma[c])).collect();
        let r = Prompt::from_classes(p.x.clone(), &classes, p.k(), p.x_test.clone(), sigma[p.c_test]).unwrap();
        let a = dynamics::predict_prompt(&p, &params).unwrap().1;
        let b = dynamics::predict_prompt(&r, &params).unwrap().1;
        for c in 0..p.k() {
            prop_assert!((a[c] - b[sigma[c]]).abs() <= 1e-9 * (1.0 + a[c].abs()));
        }
    }

    #[test]
    fn centered_logits_sum_to_zero(p in prompt(), params in params()) {
        let params = params.with_centering(Centering::Centered);
        let logits = dynamics::predict_prompt(&p, &params).unwrap().1;
        let scale = logits.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(logits.iter().sum::<f64>().abs() <= 1e-10 * scale);
    }

    #[test]
    fn zero_value_steps_are_identity(p in prompt(), alpha in 0.0f64..3.0, gamma in 0.0f64..3.0, layers in 1usize..4) {
        let params = DynamicsParams::constant(LayerParams::new(alpha, gamma, 0.0, 0.0), layers);
        prop_assert_eq!(dynamics::run_final(&p, &params).unwrap(), State::from_prompt(&p));
    }

    #[test]
    fn label_dominated_rows_stay_in_class(p in prompt(), l in layer()) {
        let params = DynamicsParams::constant(l, 1).with_mode(Mode::LabelDominated);
        let state = State::from_prompt(&p);
        let ctx = StepContext::for_prompt(&params, &p);
        let a = dynamics::attention(&state, &l, &ctx);
        let classes = p.classes();
        for (i, c) in classes.iter().enumerate() {
            if let Some(c) = c {
                for (j, cj) in classes.iter().enumerate() {
                    if cj.as_ref() != Some(c) {
                        prop_assert_eq!(a[(i, j)], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn run_final_matches_trajectory(p in prompt(), params in params()) {
        let traj = dynamics::run(&p, &params).unwrap();
        prop_assert_eq!(traj.states.len(), params.layers() + 1);
        prop_assert_eq!(traj.final_state(), &dynamics::run_final(&p, &params).unwrap());
    }
}
