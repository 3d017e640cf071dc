//! Coupled mean-shift recursion over features and labels.
//!
//! Each layer computes
//! `A = rowsoftmax(alpha * X~ X^T + gamma * Y~^c (Y^c)^T)` over the `n`
//! context columns, then updates `X~ += alpha' A X` and `Y~ += gamma' A V`,
//! where `V` is the centered (`Y C`, `C = I - 11^T/K`) or raw label block.
//! The score always uses centered labels; only the value path changes with
//! [`Centering`].

use crate::error::{Error, Result};
use crate::linalg::{argmax, dot, softmax_into, Mat};
use crate::task_gen::Prompt;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Entries above this magnitude abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerParams {
    pub alpha: f64,
    pub gamma: f64,
    pub alpha_prime: f64,
    pub gamma_prime: f64,
}

impl LayerParams {
    pub const fn new(alpha: f64, gamma: f64, alpha_prime: f64, gamma_prime: f64) -> Self {
        Self { alpha, gamma, alpha_prime, gamma_prime }
    }

    pub fn is_finite(&self) -> bool {
        [self.alpha, self.gamma, self.alpha_prime, self.gamma_prime].iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    FullSoftmax,
    /// Labeled context rows attend only to labeled columns of their own class.
    LabelDominated,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    #[default]
    Centered,
    Uncentered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsParams {
    pub schedule: Vec<LayerParams>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub centering: Centering,
    /// Score weight on label agreement for the query row in label-dominated
    /// mode; `None` uses each layer's `gamma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_gamma: Option<f64>,
}

impl DynamicsParams {
    pub fn new(schedule: Vec<LayerParams>) -> Self {
        Self { schedule, mode: Mode::FullSoftmax, centering: Centering::Centered, query_gamma: None }
    }

    pub fn constant(layer: LayerParams, layers: usize) -> Self {
        Self::new(vec![layer; layers])
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_centering(mut self, centering: Centering) -> Self {
        self.centering = centering;
        self
    }

    pub fn layers(&self) -> usize {
        self.schedule.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::arg("dynamics schedule needs at least one layer"));
        }
        if let Some(i) = self.schedule.iter().position(|l| !l.is_finite()) {
            return Err(Error::arg(format!("layer {i} has non-finite parameters")));
        }
        if self.query_gamma.is_some_and(|g| !g.is_finite()) {
            return Err(Error::arg("query_gamma must be finite"));
        }
        Ok(())
    }
}

/// Token representations at one depth: `n` context rows followed by the query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub x: Mat,
    pub y: Mat,
}

impl State {
    /// Prompt encoding with a zero query label row.
    pub fn from_prompt(prompt: &Prompt) -> Self {
        let (n, d, k) = (prompt.n(), prompt.d(), prompt.k());
        let mut x = Mat::zeros(n + 1, d);
        let mut y = Mat::zeros(n + 1, k);
        for i in 0..n {
            x.row_mut(i).copy_from_slice(prompt.x.row(i));
            y.row_mut(i).copy_from_slice(prompt.y.row(i));
        }
        x.row_mut(n).copy_from_slice(&prompt.x_test);
        Self { x, y }
    }

    pub fn n(&self) -> usize {
        self.x.rows() - 1
    }

    pub fn query_x(&self) -> &[f64] {
        self.x.row(self.n())
    }

    pub fn query_y(&self) -> &[f64] {
        self.y.row(self.n())
    }

    fn check(&self, step: usize) -> Result<()> {
        for (name, m) in [("features", &self.x), ("labels", &self.y)] {
            if let Some(v) = m.as_slice().iter().find(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
                return Err(Error::numeric("dynamics", step, format!("{name} entry {v} out of range")));
            }
        }
        Ok(())
    }
}

/// Static per-run inputs to [`step`].
#[derive(Clone, Debug)]
pub struct StepContext {
    pub mode: Mode,
    pub centering: Centering,
    pub query_gamma: Option<f64>,
    /// Class of each context row, `None` when unlabeled.
    pub classes: Vec<Option<usize>>,
}

impl StepContext {
    pub fn new(params: &DynamicsParams, classes: Vec<Option<usize>>) -> Self {
        Self { mode: params.mode, centering: params.centering, query_gamma: params.query_gamma, classes }
    }

    pub fn for_prompt(params: &DynamicsParams, prompt: &Prompt) -> Self {
        Self::new(params, prompt.classes())
    }
}

/// `Y C` with `C = I - 11^T / K`.
pub fn center_rows(y: &Mat) -> Mat {
    let k = y.cols() as f64;
    let mut out = y.clone();
    for i in 0..y.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / k;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    out
}

/// Attention matrix `(n+1) x n` for `state` under `layer`.
pub fn attention(state: &State, layer: &LayerParams, ctx: &StepContext) -> Mat {
    let n = state.n();
    let yc = center_rows(&state.y);
    let mut a = Mat::zeros(n + 1, n);
    let mut scores = vec![0.0; n];
    for i in 0..=n {
        let xi = state.x.row(i);
        let restrict = match ctx.mode {
            Mode::LabelDominated if i < n => ctx.classes[i],
            _ => None,
        };
        let gamma = match (ctx.mode, ctx.query_gamma) {
            (Mode::LabelDominated, Some(g)) if i == n => g,
            _ => layer.gamma,
        };
        let yci = yc.row(i);
        for (k, s) in scores.iter_mut().enumerate() {
            *s = match restrict {
                Some(c) if ctx.classes[k] != Some(c) => f64::NEG_INFINITY,
                Some(_) => layer.alpha * dot(xi, state.x.row(k)),
                None => {
                    let mut v = layer.alpha * dot(xi, state.x.row(k));
                    if gamma != 0.0 {
                        v += gamma * dot(yci, yc.row(k));
                    }
                    v
                }
            };
        }
        if n > 0 {
            softmax_into(&scores, a.row_mut(i));
        }
    }
    a
}

/// One layer of the recursion. Returns the new state and the attention used.
pub fn step(state: &State, layer: &LayerParams, ctx: &StepContext, index: usize) -> Result<(State, Mat)> {
    state.check(index)?;
    let n = state.n();
    if ctx.classes.len() != n {
        return Err(Error::arg("step context does not match state size"));
    }
    let a = attention(state, layer, ctx);
    if !a.is_finite() {
        return Err(Error::numeric("dynamics", index, "attention scores overflowed"));
    }
    let xc = state.x.slice_rows(0, n);
    let yv = match ctx.centering {
        Centering::Centered => center_rows(&state.y.slice_rows(0, n)),
        Centering::Uncentered => state.y.slice_rows(0, n),
    };
    let mut next = state.clone();
    if layer.alpha_prime != 0.0 {
        next.x.add_scaled(&a.matmul(&xc), layer.alpha_prime);
    }
    if layer.gamma_prime != 0.0 {
        next.y.add_scaled(&a.matmul(&yv), layer.gamma_prime);
    }
    next.check(index + 1)?;
    Ok((next, a))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub params: DynamicsParams,
    /// `L + 1` states; `states[0]` is the prompt encoding.
    pub states: Vec<State>,
    /// `attention[l]` maps `states[l]` to `states[l + 1]`.
    pub attention: Vec<Mat>,
    pub classes: Vec<Option<usize>>,
}

pub fn run(prompt: &Prompt, params: &DynamicsParams) -> Result<Trajectory> {
    params.validate()?;
    prompt.validate()?;
    let ctx = StepContext::for_prompt(params, prompt);
    let mut states = vec![State::from_prompt(prompt)];
    let mut attention = Vec::with_capacity(params.layers());
    for (l, layer) in params.schedule.iter().enumerate() {
        let (next, a) = step(states.last().unwrap(), layer, &ctx, l)?;
        states.push(next);
        attention.push(a);
    }
    Ok(Trajectory { params: params.clone(), states, attention, classes: ctx.classes })
}

/// Runs the recursion keeping only the final state.
pub fn run_final(prompt: &Prompt, params: &DynamicsParams) -> Result<State> {
    params.validate()?;
    prompt.validate()?;
    let ctx = StepContext::for_prompt(params, prompt);
    let mut state = State::from_prompt(prompt);
    for (l, layer) in params.schedule.iter().enumerate() {
        state = step(&state, layer, &ctx, l)?.0;
    }
    Ok(state)
}

/// Final query label row as logits, with its argmax (lowest index on ties).
pub fn predict(traj: &Trajectory) -> (usize, Vec<f64>) {
    predict_state(traj.states.last().expect("trajectory has at least one state"))
}

pub fn predict_state(state: &State) -> (usize, Vec<f64>) {
    let logits = state.query_y().to_vec();
    (argmax(&logits), logits)
}

pub fn predict_prompt(prompt: &Prompt, params: &DynamicsParams) -> Result<(usize, Vec<f64>)> {
    run_final(prompt, params).map(|s| predict_state(&s))
}

/// Class of a row that is a positive multiple of a one-hot vector.
fn aligned_class(row: &[f64]) -> Option<usize> {
    let c = argmax(row);
    let top = row[c];
    (top > 0.0 && row.iter().enumerate().all(|(j, &v)| j == c || v.abs() <= 1e-12 * top)).then_some(c)
}

/// Largest attention mass any context row places on context columns of a
/// different class. Classes are read off the current label rows, which
/// must all be positive multiples of one-hot vectors.
pub fn attention_leakage(state: &State, layer: &LayerParams, mode: Mode) -> Result<f64> {
    let n = state.n();
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        match aligned_class(state.y.row(i)) {
            Some(c) => classes.push(Some(c)),
            None => return Err(Error::Precondition(format!("context label row {i} is not class-aligned"))),
        }
    }
    let ctx = StepContext { mode, centering: Centering::Uncentered, query_gamma: None, classes };
    let a = attention(state, layer, &ctx);
    let mut worst: f64 = 0.0;
    for j in 0..n {
        let mass: f64 = (0..n).filter(|&k| ctx.classes[k] != ctx.classes[j]).map(|k| a[(j, k)]).sum();
        worst = worst.max(mass);
    }
    Ok(worst)
}

impl Trajectory {
    pub fn layers(&self) -> usize {
        self.states.len() - 1
    }

    pub fn final_state(&self) -> &State {
        self.states.last().unwrap()
    }

    fn role(&self, i: usize) -> &'static str {
        match self.classes.get(i) {
            None => "query",
            Some(Some(_)) => "labeled",
            Some(None) => "unlabeled",
        }
    }

    /// `step, token, role, x_0.., y_0..` with one row per token per depth.
    pub fn to_csv(&self) -> String {
        let s0 = &self.states[0];
        let (d, k) = (s0.x.cols(), s0.y.cols());
        let mut out = String::from("step,token,role");
        (0..d).for_each(|j| write!(out, ",x_{j}").unwrap());
        (0..k).for_each(|j| write!(out, ",y_{j}").unwrap());
        out.push('\n');
        for (l, s) in self.states.iter().enumerate() {
            for i in 0..s.x.rows() {
                write!(out, "{l},{i},{}", self.role(i)).unwrap();
                s.x.row(i).iter().chain(s.y.row(i)).for_each(|v| write!(out, ",{v}").unwrap());
                out.push('\n');
            }
        }
        out
    }

    /// Dense attention dump: `step, row, a_0..a_{n-1}`.
    pub fn attention_csv(&self) -> String {
        let n = self.classes.len();
        let mut out = String::from("step,row");
        (0..n).for_each(|j| write!(out, ",a_{j}").unwrap());
        out.push('\n');
        for (l, a) in self.attention.iter().enumerate() {
            for i in 0..a.rows() {
                write!(out, "{l},{i}").unwrap();
                a.row(i).iter().for_each(|v| write!(out, ",{v}").unwrap());
                out.push('\n');
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_gen::{sample_linear_task, Prompt};

    fn tiny_prompt() -> Prompt {
        let x = Mat::from_rows(&[vec![0.5], vec![-1.0]]).unwrap();
        Prompt::from_classes(x, &[Some(0), Some(1)], 2, vec![0.25], 0).unwrap()
    }

    #[test]
    fn two_token_step_matches_scalar_oracle() {
        let p = tiny_prompt();
        let layer = LayerParams::new(0.7, 1.3, 0.2, 0.4);
        let traj = run(&p, &DynamicsParams::constant(layer, 1)).unwrap();
        // centered labels: class 0 -> (0.5, -0.5), class 1 -> (-0.5, 0.5)
        let xs = [0.5f64, -1.0, 0.25];
        let ys = [[0.5, -0.5], [-0.5, 0.5], [0.0, 0.0]];
        for i in 0..3 {
            let s: Vec<f64> = (0..2)
                .map(|k| 0.7 * xs[i] * xs[k] + 1.3 * (ys[i][0] * ys[k][0] + ys[i][1] * ys[k][1]))
                .collect();
            let e0 = s[0].exp();
            let e1 = s[1].exp();
            let a0 = e0 / (e0 + e1);
            let a1 = e1 / (e0 + e1);
            assert!((traj.attention[0][(i, 0)] - a0).abs() < 1e-12);
            let x_new = xs[i] + 0.2 * (a0 * xs[0] + a1 * xs[1]);
            assert!((traj.states[1].x[(i, 0)] - x_new).abs() < 1e-12);
            let y0 = if i < 2 { [1.0, 0.0][i] } else { 0.0 };
            let y_new = y0 + 0.4 * (a0 * ys[0][0] + a1 * ys[1][0]);
            assert!((traj.states[1].y[(i, 0)] - y_new).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_step_sizes_leave_state_unchanged() {
        let (_, p) = sample_linear_task(3, 3, 9, 1).unwrap();
        let traj = run(&p, &DynamicsParams::constant(LayerParams::new(2.0, 3.0, 0.0, 0.0), 3)).unwrap();
        assert!(traj.states.iter().all(|s| *s == traj.states[0]));
    }

    #[test]
    fn uniform_attention_adds_global_mean() {
        let x = Mat::from_fn(6, 2, |i, j| (i as f64) - 2.0 * j as f64);
        let classes: Vec<Option<usize>> = (0..6).map(|i| Some(i % 3)).collect();
        let p = Prompt::from_classes(x.clone(), &classes, 3, vec![1.0, 1.0], 0).unwrap();
        let traj = run(&p, &DynamicsParams::constant(LayerParams::new(0.0, 0.0, 0.5, 1.0), 1)).unwrap();
        let mean: Vec<f64> = (0..2).map(|j| (0..6).map(|i| x[(i, j)]).sum::<f64>() / 6.0).collect();
        for i in 0..7 {
            for k in 0..6 {
                assert!((traj.attention[0][(i, k)] - 1.0 / 6.0).abs() < 1e-15);
            }
            for j in 0..2 {
                let before = traj.states[0].x[(i, j)];
                assert!((traj.states[1].x[(i, j)] - before - 0.5 * mean[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn step_zero_is_prompt_encoding() {
        let (_, p) = sample_linear_task(4, 3, 5, 2).unwrap();
        let traj = run(&p, &DynamicsParams::constant(LayerParams::new(1.0, 1.0, 0.1, 0.1), 2)).unwrap();
        let s = &traj.states[0];
        assert_eq!(s.query_y(), &[0.0, 0.0, 0.0]);
        assert_eq!(s.query_x(), &p.x_test[..]);
        assert_eq!(s.x.slice_rows(0, 5), p.x);
    }

    #[test]
    fn label_dominated_uncentered_labels_grow_exactly() {
        let (_, p) = sample_linear_task(3, 3, 12, 4).unwrap();
        let params = DynamicsParams::constant(LayerParams::new(1.0, 5.0, 0.1, 0.3), 6)
            .with_mode(Mode::LabelDominated)
            .with_centering(Centering::Uncentered);
        let traj = run(&p, &params).unwrap();
        for (l, s) in traj.states.iter().enumerate() {
            let g = 1.3f64.powi(l as i32);
            for i in 0..12 {
                for c in 0..3 {
                    let want = p.y[(i, c)] * g;
                    assert!((s.y[(i, c)] - want).abs() <= 1e-12 * g);
                }
            }
        }
    }

    #[test]
    fn label_dominated_alpha_zero_keeps_query_fixed() {
        // balanced classes placed symmetrically: the query is pulled equally
        // towards every class
        let rows = vec![vec![1.0, 0.2], vec![1.0, -0.2], vec![-1.0, 0.2], vec![-1.0, -0.2]];
        let x = Mat::from_rows(&rows).unwrap();
        let p = Prompt::from_classes(x, &[Some(0), Some(0), Some(1), Some(1)], 2, vec![0.3, 0.7], 0).unwrap();
        let params = DynamicsParams::constant(LayerParams::new(0.0, 5.0, 0.2, 0.3), 5).with_mode(Mode::LabelDominated);
        let traj = run(&p, &params).unwrap();
        for s in &traj.states {
            for (a, b) in s.query_x().iter().zip(&p.x_test) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn leakage_is_zero_in_label_dominated_mode() {
        let (_, p) = sample_linear_task(3, 3, 12, 4).unwrap();
        let s = State::from_prompt(&p);
        let layer = LayerParams::new(1.0, 5.0, 0.1, 0.1);
        assert_eq!(attention_leakage(&s, &layer, Mode::LabelDominated).unwrap(), 0.0);
        let full = attention_leakage(&s, &layer, Mode::FullSoftmax).unwrap();
        assert!(full > 0.0 && full < 1.0);
        let mut bad = s.clone();
        bad.y[(0, 1)] = 0.5;
        assert!(matches!(attention_leakage(&bad, &layer, Mode::FullSoftmax), Err(Error::Precondition(_))));
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let x = Mat::from_rows(&[vec![10.0], vec![10.0]]).unwrap();
        let p = Prompt::from_classes(x, &[Some(0), Some(0)], 2, vec![10.0], 0).unwrap();
        let err = run(&p, &DynamicsParams::constant(LayerParams::new(0.0, 0.0, 1e30, 0.0), 10)).unwrap_err();
        match err {
            Error::Numeric { step, .. } => assert!((1..=10).contains(&step)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_class_context_predicts_that_class() {
        let x = Mat::from_fn(5, 2, |i, j| (i + j) as f64 * 0.1);
        let p = Prompt::from_classes(x, &[Some(2); 5], 3, vec![0.3, -0.2], 0).unwrap();
        let (c, _) = predict_prompt(&p, &DynamicsParams::constant(LayerParams::new(1.0, 5.0, 0.1, 0.2), 3)).unwrap();
        assert_eq!(c, 2);
    }

    #[test]
    fn csv_export_has_one_row_per_token_per_state() {
        let (_, p) = sample_linear_task(2, 2, 4, 4).unwrap();
        let traj = run(&p, &DynamicsParams::constant(LayerParams::new(1.0, 1.0, 0.1, 0.1), 3)).unwrap();
        let csv = traj.to_csv();
        assert_eq!(csv.lines().count(), 1 + 4 * 5);
        assert!(csv.starts_with("step,token,role,x_0,x_1,y_0,y_1\n"));
        assert_eq!(traj.attention_csv().lines().count(), 1 + 3 * 5);
        let back: Trajectory = serde_json::from_str(&traj.to_json().unwrap()).unwrap();
        assert_eq!(back.states.len(), 4);
    }

    #[test]
    fn empty_schedule_rejected() {
        let (_, p) = sample_linear_task(2, 2, 4, 4).unwrap();
        assert!(run(&p, &DynamicsParams::new(vec![])).is_err());
    }
}
