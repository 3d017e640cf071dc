use icl_meanshift::dynamics::{LayerParams, State};
use icl_meanshift::linalg::Mat;
use icl_meanshift::task_gen::{sample_linear_task, Prompt};
use icl_meanshift::theory::{self, burn_in, burn_in_raw, Check, InstanceConfig, Status};
use proptest::prelude::*;

/// Instance families inside the theorem's regime.
fn config() -> impl Strategy<Value = InstanceConfig> {
    (2usize..4, 0usize..3, 1usize..8, 5.0f64..15.0, 0.02f64..0.15, 0.02f64..0.3).prop_map(|(k, extra, per, alpha, ap, gp)| {
        InstanceConfig { d: k + extra, k, n: k * per, steps: 6, layer: LayerParams::new(alpha, 5.0, ap, gp), ..InstanceConfig::default() }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn recursions_hold_whenever_preconditions_do(config in config(), seed in any::<u64>()) {
        let inst = config.sample(seed);
        prop_assume!(inst.is_ok());
        let inst = inst.unwrap();
        let v = theory::verify_prompt(&inst.prompt, Some(&inst.directions), &config.params(), seed).unwrap();
        prop_assert_eq!(v.status, Status::Checked);
        for verdict in v.verdicts.iter().filter(|v| v.check != Check::LabelGrowth) {
            prop_assert!(verdict.holds, "{:?} at step {}: {} < {}", verdict.check, verdict.step, verdict.lhs, verdict.rhs);
        }
    }

    #[test]
    fn leakage_never_exceeds_its_bound(
        d in 1usize..6, k in 2usize..4, n in 2usize..30, seed in any::<u64>(),
        alpha in 0.0f64..3.0, gamma in 0.0f64..30.0, label_scale in 0.2f64..3.0,
    ) {
        let (_, p) = sample_linear_task(d, k, n, seed).unwrap();
        let mut state = State::from_prompt(&p);
        state.y = state.y.scale(label_scale);
        for row in theory::leakage_bound(&state, &LayerParams::new(alpha, gamma, 0.0, 0.0)).unwrap() {
            prop_assert!(row.holds(), "row {}: {} > {}", row.row, row.measured, row.bound);
        }
    }

    #[test]
    fn burn_in_shrinks_with_margin_and_step(alpha in 0.1f64..20.0, ap in 0.01f64..1.0, delta in 1e-3f64..1.0, k in 2usize..10) {
        prop_assert!(burn_in(alpha, ap, 2.0 * delta, k) <= burn_in(alpha, ap, delta, k));
        prop_assert!(burn_in(alpha, 2.0 * ap, delta, k) <= burn_in(alpha, ap, delta, k));
        let raw = burn_in_raw(alpha, ap, delta, k);
        prop_assert_eq!(burn_in(alpha, ap, delta, k), if raw <= 0.0 { 0 } else { raw.ceil() as usize });
    }
}

#[test]
fn unaligned_labels_are_rejected() {
    let x = Mat::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
    let p = Prompt::from_classes(x, &[Some(0), Some(1)], 2, vec![0.5], 0).unwrap();
    let mut state = State::from_prompt(&p);
    state.y[(0, 1)] = 0.25;
    assert!(theory::leakage_bound(&state, &LayerParams::new(1.0, 1.0, 0.0, 0.0)).is_err());
}

#[test]
fn unbalanced_prompts_are_out_of_regime() {
    let config = InstanceConfig::default();
    let inst = config.sample(5).unwrap();
    let p = inst.prompt.select_context(&(1..inst.prompt.n()).collect::<Vec<_>>());
    let v = theory::verify_prompt(&p, Some(&inst.directions), &config.params(), 5).unwrap();
    assert_eq!(v.status, Status::OutOfRegime);
    assert!(v.certificates.is_empty());
}
