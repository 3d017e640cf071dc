//! Acceptance suite: one pass/fail line per criterion.
//!
//! `cargo test --test acceptance` runs everything; numeric arguments select
//! criteria (`-- 3 7`). Failing criteria are reported, and the process exits
//! non-zero only with `--strict` or `ICL_MEANSHIFT_STRICT=1`, so a known
//! failure does not stop the rest of the workspace tests.

use icl_meanshift::dynamics::{self, DynamicsParams, LayerParams, State};
use icl_meanshift::experiment::{self, Preset, Summary};
use icl_meanshift::fingerprints::{alignment_suite, SuiteConfig};
use icl_meanshift::rng;
use icl_meanshift::task_gen::{sample_linear_task, Prompt};
use icl_meanshift::theory::{self, Check, InstanceConfig, RowLeakage};
use icl_meanshift::training::{self, loss_and_grad_with, TrainConfig, TrainOutput};
use icl_meanshift::transformer::{self, embed_abstraction, AbstractedWeights, AbstractionForm, TransformerWeights};
use rand::Rng;
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn(&mut Shared) -> Outcome,
}

/// Trained models reused by criteria 10 and 11.
#[derive(Default)]
struct Shared {
    trained: Option<(TrainOutput, TrainOutput)>,
}

impl Shared {
    fn trained(&mut self) -> &(TrainOutput, TrainOutput) {
        self.trained.get_or_insert_with(|| {
            let u = training::train(&TrainConfig::desk()).expect("unconstrained training");
            let s = training::train(&TrainConfig { symmetrized: true, ..TrainConfig::desk() }).expect("symmetrized training");
            (u, s)
        })
    }
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let strict = args.iter().any(|a| a == "--strict") || std::env::var("ICL_MEANSHIFT_STRICT").is_ok_and(|v| v == "1");
    let selected: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let criteria = [
        Criterion { id: 1, name: "theorem verification", budget: minutes(1), run: c1_theorem },
        Criterion { id: 2, name: "dynamics-transformer equivalence", budget: minutes(1), run: c2_equivalence },
        Criterion { id: 3, name: "fig4 directional margin", budget: Duration::from_secs(10), run: c3_fig4 },
        Criterion { id: 4, name: "voronoi accuracy", budget: minutes(1), run: c4_voronoi },
        Criterion { id: 5, name: "semi-supervised gain", budget: minutes(2), run: c5_ssl_gain },
        Criterion { id: 6, name: "noise ablation", budget: minutes(2), run: c6_noise_ablation },
        Criterion { id: 7, name: "label noise robustness", budget: minutes(2), run: c7_label_noise },
        Criterion { id: 8, name: "spiral failure mode", budget: minutes(1), run: c8_spirals },
        Criterion { id: 9, name: "gradient correctness", budget: Duration::from_secs(10), run: c9_gradients },
        Criterion { id: 10, name: "desk-scale training", budget: minutes(30), run: c10_training },
        Criterion { id: 11, name: "fingerprint sanity", budget: minutes(5), run: c11_fingerprints },
        Criterion { id: 12, name: "leakage bound", budget: Duration::from_secs(10), run: c12_leakage },
    ];
    let mut shared = Shared::default();
    let mut failed = vec![];
    let mut ran = 0;
    for c in criteria.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let mut o = (c.run)(&mut shared);
        let took = start.elapsed();
        if took > c.budget {
            o.pass = false;
            o.detail.push_str(&format!("; over the {} s budget", c.budget.as_secs()));
        }
        ran += 1;
        if !o.pass {
            failed.push(c.id);
        }
        println!("[{}] {:>2} {:<34} {} ({:.1} s)", if o.pass { "PASS" } else { "FAIL" }, c.id, c.name, o.detail, took.as_secs_f64());
    }
    println!("acceptance: {}/{ran} criteria passed{}", ran - failed.len(), if failed.is_empty() {
        String::new()
    } else {
        format!("; failing: {failed:?}")
    });
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}

fn c1_theorem(_: &mut Shared) -> Outcome {
    let config = InstanceConfig::default();
    let s = match theory::verify_many(&config, 200, 0) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let per: Vec<String> = Check::ALL.iter().map(|&c| format!("{}={}", c.name(), s.violations_of(c))).collect();
    outcome(
        s.checked == 200 && s.violations == 0,
        format!("{}/{} instances checked, violations: {}", s.checked, s.instances, per.join(" ")),
    )
}

fn c2_equivalence(_: &mut Shared) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for d in [2, 5, 7] {
        for k in [2, 3] {
            for n in [4, 16, 64] {
                for layers in [1, 3, 5] {
                    for t in 0..20u64 {
                        let seed = rng::derive_from_bytes(0, format!("{d}/{k}/{n}/{layers}/{t}").as_bytes());
                        let (_, prompt) = sample_linear_task(d, k, n, seed).unwrap();
                        let mut r = rng::rng(rng::derive(seed, rng::stream::INIT));
                        let schedule = (0..layers)
                            .map(|_| {
                                LayerParams::new(
                                    r.random_range(0.0..1.5),
                                    r.random_range(0.0..3.0),
                                    r.random_range(0.0..0.5),
                                    r.random_range(0.0..1.0),
                                )
                            })
                            .collect();
                        let params = DynamicsParams::new(schedule);
                        let w = embed_abstraction(&AbstractedWeights::from_dynamics(&params, k), d, k);
                        let a = transformer::forward(&prompt, &w, None).unwrap().logits;
                        let b = dynamics::predict_prompt(&prompt, &params).unwrap().1;
                        worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
                        cases += 1;
                    }
                }
            }
        }
    }
    outcome(worst <= 1e-9, format!("{cases} prompts, max |logit difference| = {worst:.2e} (tolerance 1e-9)"))
}

fn c3_fig4(_: &mut Shared) -> Outcome {
    let c = Preset::Fig4.config();
    let params = c.dynamics.clone().unwrap();
    let (mut monotone, mut correct_pos) = (0, 0);
    for i in 0..100 {
        let inst = c.task.sample(c.task_seed(i)).unwrap();
        let traj = dynamics::run(&inst.prompt, &params).unwrap();
        let rep = theory::instrument_with(&traj, inst.prompt.c_test, inst.directions.as_ref()).unwrap();
        let m: Vec<f64> = rep.steps.iter().map(|s| s.directional_margin.unwrap_or(f64::NAN)).collect();
        monotone += usize::from(m.len() == 16 && m.windows(2).all(|w| w[1] > w[0]));
        let correct = dynamics::predict(&traj).0 == inst.prompt.c_test;
        correct_pos += usize::from(correct && rep.initial().delta > 0.0);
    }
    outcome(
        monotone == 100 && correct_pos >= 90,
        format!("M_t strictly increasing on {monotone}/100; correct with delta_0 > 0 on {correct_pos}/100 (need 100 and 90)"),
    )
}

fn run_preset(p: Preset) -> Summary {
    let c = p.config();
    let cells = experiment::sweep(&c).expect("preset runs");
    Summary { name: c.name.clone(), config_sha256: c.sha256(), cells }
}

fn metric(s: &Summary, cell: &[(&str, f64)], m: &str) -> f64 {
    s.cell(cell).and_then(|c| c.metrics.get(m).copied()).unwrap_or(f64::NAN)
}

fn c4_voronoi(_: &mut Shared) -> Outcome {
    let s = run_preset(Preset::Fig5);
    let dynamics = metric(&s, &[], "dynamics");
    let knn = metric(&s, &[], "knn");
    let gap = metric(&s, &[], "dynamics@gap");
    let oracle = metric(&s, &[], "oracle@gap");
    let subset = s.cells[0].subset_tasks.unwrap_or(0);
    outcome(
        dynamics >= knn - 0.01 && (gap - oracle).abs() <= 0.05,
        format!(
            "dynamics {:.1}% vs 1-NN {:.1}% (need >= 1-NN - 1); gap subset ({subset} tasks) dynamics {:.1}% vs oracle {:.1}% (need within 5)",
            100.0 * dynamics,
            100.0 * knn,
            100.0 * gap,
            100.0 * oracle
        ),
    )
}

fn ssl_summary() -> &'static Summary {
    static S: std::sync::OnceLock<Summary> = std::sync::OnceLock::new();
    S.get_or_init(|| run_preset(Preset::Ssl))
}

fn c5_ssl_gain(_: &mut Shared) -> Outcome {
    let s = ssl_summary();
    let at = |m: f64, name: &str| metric(s, &[("n_unlabeled", m)], name);
    let curve: Vec<String> = [0.0, 8.0, 24.0, 120.0].iter().map(|&m| format!("{:.1}", 100.0 * at(m, "dynamics"))).collect();
    let gain = at(120.0, "dynamics") - at(0.0, "dynamics");
    let lr: Vec<f64> = [0.0, 8.0, 24.0, 120.0].iter().map(|&m| at(m, "logreg")).collect();
    let spread = lr.iter().copied().fold(f64::NEG_INFINITY, f64::max) - lr.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        gain >= 0.05 && spread <= 0.02,
        format!(
            "dynamics over n_unlab 0/8/24/120: {} % (gain {:.1}, need >= 5); logreg spread {:.1} (need <= 2)",
            curve.join("/"),
            100.0 * gain,
            100.0 * spread
        ),
    )
}

fn c6_noise_ablation(_: &mut Shared) -> Outcome {
    let s = ssl_summary();
    let noise = metric(s, &[("n_unlabeled", 120.0)], "dynamics/noise");
    let lr = metric(s, &[("n_unlabeled", 120.0)], "logreg");
    outcome(
        (noise - lr).abs() <= 0.03,
        format!("dynamics with noise rows {:.1}% vs logreg {:.1}% (need within 3)", 100.0 * noise, 100.0 * lr),
    )
}

fn c7_label_noise(_: &mut Shared) -> Outcome {
    let s = run_preset(Preset::Noise);
    let clean = metric(&s, &[], "dynamics/clean");
    let noisy = metric(&s, &[], "dynamics");
    outcome(
        clean - noisy < 0.15,
        format!("clean {:.1}%, noisy {:.1}%, drop {:.1} (need < 15)", 100.0 * clean, 100.0 * noisy, 100.0 * (clean - noisy)),
    )
}

fn c8_spirals(_: &mut Shared) -> Outcome {
    let s = run_preset(Preset::Spirals);
    let best = s.best("dynamics").unwrap_or(f64::NAN);
    let knn = s.best("knn").unwrap_or(f64::NAN);
    outcome(best <= 0.65, format!("best over {} grid cells {:.1}% (need <= 65); 1-NN {:.1}%", s.cells.len(), 100.0 * best, 100.0 * knn))
}

fn c9_gradients(_: &mut Shared) -> Outcome {
    let mut r = rng::rng(99);
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let layers = r.random_range(1..=2);
        let n = r.random_range(1..=4);
        let d = r.random_range(1..=3);
        let k = r.random_range(2..=3);
        let mut w = TransformerWeights::zeros(d, k, layers);
        let flat: Vec<f64> = (0..w.num_params()).map(|_| r.random_range(-0.8..0.8)).collect();
        w.unflatten_into(&flat);
        let batch: Vec<Prompt> = (0..2).map(|b| sample_linear_task(d, k, n, case * 10 + b).unwrap().1).collect();
        let g = loss_and_grad_with(&w, &batch, None).unwrap().1.flatten();
        let h = 1e-5;
        for i in 0..flat.len() {
            let eval = |delta: f64| {
                let mut v = flat.clone();
                v[i] += delta;
                let mut p = w.clone();
                p.unflatten_into(&v);
                loss_and_grad_with(&p, &batch, None).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6));
        }
    }
    outcome(worst < 1e-4, format!("20 instances, max relative error {worst:.2e} (need < 1e-4)"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn c10_training(shared: &mut Shared) -> Outcome {
    let (u, s) = shared.trained();
    let chance = 1.0 / 3.0;
    let (au, as_) = (u.final_accuracy(), s.final_accuracy());
    let ru = transformer::project_weights(&u.weights, AbstractionForm::TwoParameter).1.residual_fraction;
    let rs = transformer::project_weights(&s.weights, AbstractionForm::TwoParameter).1.residual_fraction;
    let delta = median(transformer::project_weights(&s.weights, AbstractionForm::ThreeParameter).1.deltas());
    let pass = au >= chance + 0.25 && as_ >= chance + 0.25 && rs <= ru - 0.05 && (delta + chance).abs() <= 0.15;
    outcome(
        pass,
        format!(
            "accuracy U {au:.3} S {as_:.3} (need >= {:.3}); residual fraction U {ru:.3} S {rs:.3} (need S <= U - 0.05); median delta {delta:.3} (need within 0.15 of {:.3})",
            chance + 0.25,
            -chance
        ),
    )
}

fn c11_fingerprints(shared: &mut Shared) -> Outcome {
    let (u, s) = shared.trained();
    let c = TrainConfig::desk();
    let config = SuiteConfig { d: c.d, k: c.k, n: c.n, n_tasks: 512, seed: 11 };
    let r = match alignment_suite(&u.weights, &s.weights, None, config) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let dq = r.same_prompt.spearman_q.mean - r.control.spearman_q.mean;
    let dc = r.same_prompt.spearman_c.mean - r.control.spearman_c.mean;
    outcome(
        dq >= 0.3 && dc >= 0.3,
        format!(
            "spearman same/control: query {:.3}/{:.3}, context {:.3}/{:.3} (need both margins >= 0.3); R^2 p_true {}",
            r.same_prompt.spearman_q.mean,
            r.control.spearman_q.mean,
            r.same_prompt.spearman_c.mean,
            r.control.spearman_c.mean,
            r.same_prompt.r2_p_true.map_or("undefined".into(), |v| format!("{v:.3}"))
        ),
    )
}

fn c12_leakage(_: &mut Shared) -> Outcome {
    let mut rows = 0;
    let mut violations = 0;
    let mut mean_leak = [0.0; 3];
    let kappas = [1.0, 5.0, 25.0];
    let alpha = 1.0;
    for i in 0..100u64 {
        let (_, prompt) = sample_linear_task(5, 3, 30, rng::derive_indexed(12, rng::stream::DATA, i)).unwrap();
        let state = State::from_prompt(&prompt);
        for (j, kappa) in kappas.iter().enumerate() {
            let layer = LayerParams::new(alpha, kappa * alpha, 0.1, 0.1);
            let leak: Vec<RowLeakage> = theory::leakage_bound(&state, &layer).unwrap();
            rows += leak.len();
            violations += leak.iter().filter(|l| !l.holds()).count();
            mean_leak[j] += leak.iter().map(|l| l.measured).fold(0.0, f64::max) / 100.0;
        }
    }
    outcome(
        violations == 0,
        format!(
            "{rows} row checks, {violations} violations; mean max leakage at kappa 1/5/25: {:.2e}/{:.2e}/{:.2e}",
            mean_leak[0], mean_leak[1], mean_leak[2]
        ),
    )
}
