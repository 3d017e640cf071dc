//! Margin instrumentation and inequality checks for label-dominated runs.
//!
//! For a query of class `c*`, with `S` the context rows of class `c*` and
//! `S'` the labeled rows of every other class:
//!
//! * `R = min_{j in S} <x, x_j>`, `L = max_{j in S'} <x, x_j>`, `Delta = R - L`
//! * `rho = min_{i,j in S} <x_i, x_j>`, `Lambda = max_{i in S, j in S'} <x_i, x_j>`,
//!   `Gamma = rho - Lambda`, `Delta~ = min(Delta, Gamma)`
//! * `p_c = softmax_c(log Z_c + gamma * lambda_t * y_c)` with
//!   `Z_c = sum_{j in S_c} exp(alpha <x, x_j>)`
//! * `Delta_y = min_{c != c*} (y_{c*} - y_c)` on the query label row.
//!
//! Empty extrema use `-inf` / `+inf` and mark the report non-conforming.

use crate::dynamics::{self, Centering, DynamicsParams, LayerParams, Mode, State, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::{dot, log_sum_exp, norm, softmax, Mat};
use crate::par;
use crate::rng;
use crate::task_gen::{Prompt, PromptFile};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Slack allowed on every inequality to absorb rounding.
pub const TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMargins {
    pub step: usize,
    pub r: f64,
    pub l: f64,
    pub delta: f64,
    pub rho: f64,
    #[serde(rename = "Lambda")]
    pub lambda_cross: f64,
    #[serde(rename = "Gamma")]
    pub gamma_margin: f64,
    pub delta_tilde: f64,
    pub p_star: f64,
    pub delta_y: f64,
    /// Largest context feature norm within any class.
    pub norm: f64,
    /// Common norm of the context label rows, `lambda_t`.
    pub label_scale: f64,
    /// Directional margin `M_t`, when class directions are supplied.
    pub directional_margin: Option<f64>,
    pub state_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginReport {
    pub c_star: usize,
    pub k: usize,
    pub class_counts: Vec<usize>,
    pub balanced: bool,
    /// False when a class set is empty, a context row is unlabeled, or the
    /// run is outside the label-dominated uncentered regime.
    pub conforming: bool,
    pub in_regime: bool,
    /// Every labeled context point lies in its class cone at step 0.
    pub in_cones: Option<bool>,
    pub steps: Vec<StepMargins>,
}

impl MarginReport {
    pub fn initial(&self) -> &StepMargins {
        &self.steps[0]
    }
}

/// SHA-256 over the little-endian bytes of the features then the labels.
pub fn state_hash(state: &State) -> String {
    let mut h = Sha256::new();
    for v in state.x.as_slice().iter().chain(state.y.as_slice()) {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// `sum_{c != c'} <w_c - w_c', mu_c - mu_c'>` over labeled context rows.
/// Classes without points are skipped.
pub fn directional_margin(state: &State, classes: &[Option<usize>], directions: &Mat) -> f64 {
    let k = directions.rows();
    let d = state.x.cols();
    let mut mu = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (i, c) in classes.iter().enumerate() {
        if let Some(c) = *c {
            counts[c] += 1;
            mu[c].iter_mut().zip(state.x.row(i)).for_each(|(m, v)| *m += v);
        }
    }
    for (m, &n) in mu.iter_mut().zip(&counts) {
        if n > 0 {
            m.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let mut total = 0.0;
    for c in 0..k {
        for c2 in 0..k {
            if c == c2 || counts[c] == 0 || counts[c2] == 0 {
                continue;
            }
            let w: Vec<f64> = directions.row(c).iter().zip(directions.row(c2)).map(|(a, b)| a - b).collect();
            let m: Vec<f64> = mu[c].iter().zip(&mu[c2]).map(|(a, b)| a - b).collect();
            total += dot(&w, &m);
        }
    }
    total
}

pub fn in_cones(state: &State, classes: &[Option<usize>], directions: &Mat) -> bool {
    classes.iter().enumerate().all(|(i, c)| match *c {
        None => true,
        Some(c) => (0..directions.rows())
            .filter(|&c2| c2 != c)
            .all(|c2| directions.row(c).iter().zip(directions.row(c2)).zip(state.x.row(i)).map(|((a, b), x)| (a - b) * x).sum::<f64>() > 0.0),
    })
}

pub fn instrument(traj: &Trajectory, c_star: usize) -> Result<MarginReport> {
    instrument_with(traj, c_star, None)
}

/// [`instrument`], also recording the directional margin against `directions`
/// (`K x d`).
pub fn instrument_with(traj: &Trajectory, c_star: usize, directions: Option<&Mat>) -> Result<MarginReport> {
    let s0 = &traj.states[0];
    let k = s0.y.cols();
    if c_star >= k {
        return Err(Error::arg(format!("c_star {c_star} out of range for K = {k}")));
    }
    if let Some(w) = directions {
        if w.rows() != k || w.cols() != s0.x.cols() {
            return Err(Error::arg("directions must be K x d"));
        }
    }
    let mut class_counts = vec![0usize; k];
    traj.classes.iter().flatten().for_each(|&c| class_counts[c] += 1);
    let balanced = class_counts.iter().all(|&c| c == class_counts[0]);
    let all_labeled = traj.classes.iter().all(Option::is_some);
    let in_regime = traj.params.mode == Mode::LabelDominated && traj.params.centering == Centering::Uncentered;
    let nonempty = class_counts.iter().all(|&c| c > 0);

    let own: Vec<usize> = (0..traj.classes.len()).filter(|&i| traj.classes[i] == Some(c_star)).collect();
    let other: Vec<usize> = (0..traj.classes.len()).filter(|&i| matches!(traj.classes[i], Some(c) if c != c_star)).collect();

    let mut steps = Vec::with_capacity(traj.states.len());
    let mut label_scale: f64 = 1.0;
    for (t, s) in traj.states.iter().enumerate() {
        let q = s.query_x();
        let r = own.iter().map(|&j| dot(q, s.x.row(j))).fold(f64::INFINITY, f64::min);
        let l = other.iter().map(|&j| dot(q, s.x.row(j))).fold(f64::NEG_INFINITY, f64::max);
        let mut rho = f64::INFINITY;
        let mut lambda_cross = f64::NEG_INFINITY;
        for &i in &own {
            for &j in &own {
                rho = rho.min(dot(s.x.row(i), s.x.row(j)));
            }
            for &j in &other {
                lambda_cross = lambda_cross.max(dot(s.x.row(i), s.x.row(j)));
            }
        }
        let delta = r - l;
        let gamma_margin = rho - lambda_cross;
        let norm_max =
            traj.classes.iter().enumerate().filter(|(_, c)| c.is_some()).map(|(i, _)| norm(s.x.row(i))).fold(0.0, f64::max);
        if let Some(i) = traj.classes.iter().position(Option::is_some) {
            label_scale = norm(s.y.row(i));
        }
        let y = s.query_y();
        let delta_y = (0..k).filter(|&c| c != c_star).map(|c| y[c_star] - y[c]).fold(f64::INFINITY, f64::min);
        // the last state uses the last layer's parameters
        let layer = traj.params.schedule.get(t).or(traj.params.schedule.last());
        let p_star = layer.map_or(f64::NAN, |l| class_mass(s, &traj.classes, l, traj.params.query_gamma, label_scale)[c_star]);
        steps.push(StepMargins {
            step: t,
            r,
            l,
            delta,
            rho,
            lambda_cross,
            gamma_margin,
            delta_tilde: delta.min(gamma_margin),
            p_star,
            delta_y,
            norm: norm_max,
            label_scale,
            directional_margin: directions.map(|w| directional_margin(s, &traj.classes, w)),
            state_hash: state_hash(s),
        });
    }
    Ok(MarginReport {
        c_star,
        k,
        class_counts,
        balanced,
        conforming: in_regime && all_labeled && nonempty,
        in_regime,
        in_cones: directions.map(|w| in_cones(s0, &traj.classes, w)),
        steps,
    })
}

/// Query attention mass per class via `s_c = log Z_c + gamma lambda y_c`.
/// Classes with no context point get mass 0.
pub fn class_mass(state: &State, classes: &[Option<usize>], layer: &LayerParams, query_gamma: Option<f64>, label_scale: f64) -> Vec<f64> {
    let k = state.y.cols();
    let q = state.query_x();
    let y = state.query_y();
    let gamma = query_gamma.unwrap_or(layer.gamma);
    let mut exps: Vec<Vec<f64>> = vec![Vec::new(); k];
    for (j, c) in classes.iter().enumerate() {
        if let Some(c) = *c {
            exps[c].push(layer.alpha * dot(q, state.x.row(j)));
        }
    }
    let s: Vec<f64> = (0..k)
        .map(|c| if exps[c].is_empty() { f64::NEG_INFINITY } else { log_sum_exp(&exps[c]) + gamma * label_scale * y[c] })
        .collect();
    softmax(&s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Preconditions {
    pub holds: bool,
    pub delta_tilde_positive: bool,
    /// `alpha Delta_0 - log K - log(1 + 2 / Delta~_0)`; `-inf` when `Delta~_0 <= 0`.
    pub slack: f64,
}

pub fn check_preconditions(initial: &StepMargins, alpha: f64, k: usize) -> Preconditions {
    let dt = initial.delta_tilde;
    let positive = dt > 0.0 && initial.delta.is_finite();
    let slack = if positive { alpha * initial.delta - (k as f64).ln() - (1.0 + 2.0 / dt).ln() } else { f64::NEG_INFINITY };
    Preconditions { holds: positive && slack > 0.0, delta_tilde_positive: positive, slack }
}

/// `max(0, ceil(log(log(4K) / (alpha Delta_0)) / alpha'))`; saturates at
/// `usize::MAX` when `alpha' = 0` and the log is positive.
pub fn burn_in(alpha: f64, alpha_prime: f64, delta_0: f64, k: usize) -> usize {
    let pre = burn_in_raw(alpha, alpha_prime, delta_0, k);
    if pre.is_nan() || pre <= 0.0 {
        0
    } else if pre.is_infinite() || pre >= usize::MAX as f64 {
        usize::MAX
    } else {
        pre.ceil() as usize
    }
}

/// The unclamped expression inside the ceiling.
pub fn burn_in_raw(alpha: f64, alpha_prime: f64, delta_0: f64, k: usize) -> f64 {
    let log_arg = (4.0 * k as f64).ln() / (alpha * delta_0);
    let l = log_arg.ln();
    if l <= 0.0 {
        return l / alpha_prime.max(f64::MIN_POSITIVE);
    }
    l / alpha_prime
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    /// `max_{j in S_c} ||x_j|| <= (1 + alpha')^t`.
    NormBound,
    /// `Gamma_{t+1} >= (1 + alpha')^2 Gamma_t`.
    TrainingMargin,
    /// `Delta_{t+1} >= (1+a')Delta_t + a'(1+a') p Gamma_t - 2a'(1-p)(1+a')^{2t+1}`.
    TestMargin,
    /// `Delta~_{t+1} >= (1 + a' + a'(1+a') p) Delta~_t - 2a'(1-p)(1+a')^{2t+1}`.
    EffectiveMargin,
    /// `Delta_t >= Delta_0 (1 + alpha')^t`.
    GeometricGrowth,
    /// `Delta_y^{t+1} >= Delta_y^t`.
    LabelMonotone,
    /// `Delta_y^t >= (1 + gamma')^t / 2` for `t >= burn_in`.
    LabelGrowth,
    /// `M_{t+1} > M_t`.
    DirectionalMargin,
}

impl Check {
    pub const ALL: [Check; 8] = [
        Check::NormBound,
        Check::TrainingMargin,
        Check::TestMargin,
        Check::EffectiveMargin,
        Check::GeometricGrowth,
        Check::LabelMonotone,
        Check::LabelGrowth,
        Check::DirectionalMargin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::NormBound => "norm_bound",
            Check::TrainingMargin => "training_margin",
            Check::TestMargin => "test_margin",
            Check::EffectiveMargin => "effective_margin",
            Check::GeometricGrowth => "geometric_growth",
            Check::LabelMonotone => "label_monotone",
            Check::LabelGrowth => "label_growth",
            Check::DirectionalMargin => "directional_margin",
        }
    }
}

/// One inequality `lhs >= rhs` at one step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub check: Check,
    pub step: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// A violated inequality with the hash of the state it was evaluated on.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Certificate {
    pub check: Check,
    pub step: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub state_hash: String,
}

fn verdict(check: Check, step: usize, lhs: f64, rhs: f64, strict: bool) -> Verdict {
    // infinite margins come from empty class sets; they cannot witness a violation
    let holds = if lhs.is_infinite() || rhs.is_infinite() {
        !(lhs == f64::NEG_INFINITY && rhs == f64::INFINITY)
    } else if strict {
        lhs - rhs > -TOLERANCE && lhs.is_finite()
    } else {
        lhs - rhs >= -TOLERANCE
    };
    Verdict { check, step, lhs, rhs, holds }
}

/// Per-step verdicts for the geometric recursions, the label-margin
/// monotonicity and, when recorded, the directional margin.
pub fn verify_recursions(report: &MarginReport, alpha_prime: f64) -> Vec<Verdict> {
    let a = alpha_prime;
    let g = 1.0 + a;
    let s = &report.steps;
    let mut out = Vec::new();
    for (t, m) in s.iter().enumerate() {
        out.push(verdict(Check::NormBound, t, g.powi(t as i32), m.norm, false));
        if t > 0 {
            out.push(verdict(Check::GeometricGrowth, t, m.delta, s[0].delta * g.powi(t as i32), false));
        }
    }
    for t in 0..s.len().saturating_sub(1) {
        let (m, next) = (&s[t], &s[t + 1]);
        let p = m.p_star;
        let leak = 2.0 * a * (1.0 - p) * g.powi(2 * t as i32 + 1);
        out.push(verdict(Check::TrainingMargin, t, next.gamma_margin, g * g * m.gamma_margin, false));
        out.push(verdict(Check::TestMargin, t, next.delta, g * m.delta + a * g * p * m.gamma_margin - leak, false));
        out.push(verdict(Check::EffectiveMargin, t, next.delta_tilde, (1.0 + a + a * g * p) * m.delta_tilde - leak, false));
        out.push(verdict(Check::LabelMonotone, t, next.delta_y, m.delta_y, false));
        if let (Some(x), Some(y)) = (m.directional_margin, next.directional_margin) {
            out.push(verdict(Check::DirectionalMargin, t, y, x, true));
        }
    }
    out
}

/// `Delta_y^t >= (1 + gamma')^t / 2` for every recorded `t >= burn_in`.
pub fn verify_label_growth(report: &MarginReport, alpha: f64, alpha_prime: f64, gamma_prime: f64) -> Vec<Verdict> {
    let start = burn_in(alpha, alpha_prime, report.initial().delta, report.k);
    report
        .steps
        .iter()
        .filter(|m| m.step >= start)
        .map(|m| verdict(Check::LabelGrowth, m.step, m.delta_y, (1.0 + gamma_prime).powi(m.step as i32) / 2.0, false))
        .collect()
}

pub fn certificates(report: &MarginReport, verdicts: &[Verdict]) -> Vec<Certificate> {
    verdicts
        .iter()
        .filter(|v| !v.holds)
        .map(|v| Certificate { check: v.check, step: v.step, lhs: v.lhs, rhs: v.rhs, state_hash: report.steps[v.step].state_hash.clone() })
        .collect()
}

/// Largest cross-class attention mass of context row `row` and the bound
/// `sum_{k not in S} exp(-(gamma eta)) exp(alpha <x_j, x_k>) / Z_in`, where
/// `gamma eta` is the gap between the smallest same-class and largest
/// cross-class label score of that row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RowLeakage {
    pub row: usize,
    pub measured: f64,
    pub bound: f64,
}

impl RowLeakage {
    pub fn holds(&self) -> bool {
        self.measured <= self.bound * (1.0 + TOLERANCE) + TOLERANCE * 1e-3
    }
}

/// Leakage bound per context row under the full softmax. Label rows must be
/// class-aligned.
pub fn leakage_bound(state: &State, layer: &LayerParams) -> Result<Vec<RowLeakage>> {
    let n = state.n();
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let row = state.y.row(i);
        let c = crate::linalg::argmax(row);
        if !(row[c] > 0.0) || row.iter().enumerate().any(|(j, &v)| j != c && v.abs() > 1e-12 * row[c]) {
            return Err(Error::Precondition(format!("context label row {i} is not class-aligned")));
        }
        classes.push(Some(c));
    }
    let ctx = dynamics::StepContext { mode: Mode::FullSoftmax, centering: Centering::Centered, query_gamma: None, classes: classes.clone() };
    let a = dynamics::attention(state, layer, &ctx);
    let yc = dynamics::center_rows(&state.y);
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let same: Vec<usize> = (0..n).filter(|&k| classes[k] == classes[j]).collect();
        let cross: Vec<usize> = (0..n).filter(|&k| classes[k] != classes[j]).collect();
        let measured: f64 = cross.iter().map(|&k| a[(j, k)]).sum();
        if cross.is_empty() {
            out.push(RowLeakage { row: j, measured, bound: 0.0 });
            continue;
        }
        let label = |k: usize| layer.gamma * dot(yc.row(j), yc.row(k));
        let geo = |k: usize| layer.alpha * dot(state.x.row(j), state.x.row(k));
        let gap = same.iter().map(|&k| label(k)).fold(f64::INFINITY, f64::min) - cross.iter().map(|&k| label(k)).fold(f64::NEG_INFINITY, f64::max);
        let log_zin = log_sum_exp(&same.iter().map(|&k| geo(k)).collect::<Vec<_>>());
        let bound: f64 = cross.iter().map(|&k| (geo(k) - gap - log_zin).exp()).sum();
        out.push(RowLeakage { row: j, measured, bound });
    }
    Ok(out)
}

/// Generator for balanced, cone-consistent, unit-ball instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceConfig {
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub n: usize,
    pub steps: usize,
    pub layer: LayerParams,
    /// Norm of each class prototype.
    pub radius: f64,
    /// Per-coordinate Gaussian spread around the prototype.
    pub spread: f64,
    /// Rejection attempts before giving up on a seed.
    pub max_attempts: usize,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self { d: 5, k: 3, n: 30, steps: 10, layer: LayerParams::new(10.0, 5.0, 0.08, 0.1), radius: 0.8, spread: 0.08, max_attempts: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub prompt: Prompt,
    /// Orthonormal class prototypes, `K x d`.
    pub directions: Mat,
    pub attempts: usize,
}

impl InstanceConfig {
    pub fn params(&self) -> DynamicsParams {
        DynamicsParams::constant(self.layer, self.steps).with_mode(Mode::LabelDominated).with_centering(Centering::Uncentered)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < self.k || self.k < 2 || self.n < self.k || !self.n.is_multiple_of(self.k) {
            return Err(Error::Config("theory instances need K >= 2, d >= K and n a positive multiple of K".into()));
        }
        if !(self.radius > 0.0 && self.radius <= 1.0 && self.spread >= 0.0) {
            return Err(Error::Config("radius must be in (0, 1] and spread >= 0".into()));
        }
        self.params().validate()
    }

    /// One candidate draw: no rejection.
    pub fn draw(&self, seed: u64) -> Result<Instance> {
        self.validate()?;
        let mut r = rng::rng(seed);
        let directions = orthonormal_rows(&mut r, self.k, self.d);
        let per = self.n / self.k;
        let mut rows = Vec::with_capacity(self.n);
        let mut classes = Vec::with_capacity(self.n);
        for c in 0..self.k {
            for _ in 0..per {
                rows.push(self.point(&mut r, &directions, c));
                classes.push(Some(c));
            }
        }
        let c_test = r.random_range(0..self.k);
        let x_test = self.point(&mut r, &directions, c_test);
        let prompt = Prompt::from_classes(Mat::from_rows(&rows).unwrap(), &classes, self.k, x_test, c_test)?;
        Ok(Instance { prompt, directions, attempts: 1 })
    }

    fn point(&self, r: &mut rng::StreamRng, directions: &Mat, c: usize) -> Vec<f64> {
        loop {
            let x: Vec<f64> = (0..self.d).map(|j| self.radius * directions[(c, j)] + self.spread * rng::normal(r)).collect();
            if norm(&x) <= 1.0 {
                return x;
            }
        }
    }

    /// Rejection-samples until the preconditions hold with every point in
    /// its class cone.
    pub fn sample(&self, seed: u64) -> Result<Instance> {
        let params = self.params();
        for attempt in 0..self.max_attempts {
            let mut inst = self.draw(rng::derive(seed, attempt as u64))?;
            let s0 = State::from_prompt(&inst.prompt);
            if !in_cones(&s0, &inst.prompt.classes(), &inst.directions) {
                continue;
            }
            let traj0 = Trajectory { params: params.clone(), states: vec![s0], attention: vec![], classes: inst.prompt.classes() };
            let report = instrument(&traj0, inst.prompt.c_test)?;
            if check_preconditions(report.initial(), self.layer.alpha, self.k).holds {
                inst.attempts = attempt + 1;
                return Ok(inst);
            }
        }
        Err(Error::Precondition(format!("no instance met the preconditions in {} attempts", self.max_attempts)))
    }
}

fn orthonormal_rows(r: &mut rng::StreamRng, k: usize, d: usize) -> Mat {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v = rng::normal_vec(r, d);
        for u in &rows {
            let p = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = norm(&v);
        if n > 1e-6 {
            rows.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Mat::from_rows(&rows).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    /// Preconditions hold; verdicts are assertions.
    Checked,
    PreconditionsUnmet,
    /// Not label-dominated uncentered, or classes unbalanced or empty.
    OutOfRegime,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceVerdict {
    pub seed: u64,
    pub status: Status,
    pub preconditions: Preconditions,
    pub burn_in: usize,
    pub verdicts: Vec<Verdict>,
    pub certificates: Vec<Certificate>,
    /// Serialized prompt for replay, present when a certificate exists.
    pub prompt: Option<PromptFile>,
}

/// Runs the dynamics on `prompt` and checks every inequality.
pub fn verify_prompt(prompt: &Prompt, directions: Option<&Mat>, params: &DynamicsParams, seed: u64) -> Result<InstanceVerdict> {
    let traj = dynamics::run(prompt, params)?;
    let report = instrument_with(&traj, prompt.c_test, directions)?;
    let layer = params.schedule.first().copied().unwrap_or(LayerParams::new(0.0, 0.0, 0.0, 0.0));
    let constant = params.schedule.iter().all(|l| *l == layer);
    let pre = check_preconditions(report.initial(), layer.alpha, report.k);
    let status = if !(report.conforming && report.balanced && constant) {
        Status::OutOfRegime
    } else if !pre.holds {
        Status::PreconditionsUnmet
    } else {
        Status::Checked
    };
    let mut verdicts = verify_recursions(&report, layer.alpha_prime);
    if report.in_cones != Some(true) {
        verdicts.retain(|v| v.check != Check::DirectionalMargin);
    }
    verdicts.extend(verify_label_growth(&report, layer.alpha, layer.alpha_prime, layer.gamma_prime));
    let certs = if status == Status::Checked { certificates(&report, &verdicts) } else { Vec::new() };
    Ok(InstanceVerdict {
        seed,
        status,
        preconditions: pre,
        burn_in: burn_in(layer.alpha, layer.alpha_prime, report.initial().delta, report.k),
        verdicts,
        prompt: (!certs.is_empty()).then(|| PromptFile::from(prompt)),
        certificates: certs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckSummary {
    pub check: Check,
    pub evaluated: usize,
    pub violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationSummary {
    pub instances: usize,
    pub checked: usize,
    pub config: InstanceConfig,
    pub seed: u64,
    pub per_check: Vec<CheckSummary>,
    pub violations: usize,
    pub results: Vec<InstanceVerdict>,
}

impl VerificationSummary {
    pub fn violations_of(&self, check: Check) -> usize {
        self.per_check.iter().find(|c| c.check == check).map_or(0, |c| c.violations)
    }
}

/// Samples `instances` prompts from `config` and verifies each in parallel.
pub fn verify_many(config: &InstanceConfig, instances: usize, seed: u64) -> Result<VerificationSummary> {
    config.validate()?;
    let params = config.params();
    let results = par::map(instances, |i| {
        let s = rng::derive_indexed(seed, rng::stream::DATA, i as u64);
        let inst = config.sample(s)?;
        verify_prompt(&inst.prompt, Some(&inst.directions), &params, s)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let checked: Vec<&InstanceVerdict> = results.iter().filter(|r| r.status == Status::Checked).collect();
    let per_check: Vec<CheckSummary> = Check::ALL
        .iter()
        .map(|&check| {
            let vs = checked.iter().flat_map(|r| r.verdicts.iter()).filter(|v| v.check == check);
            let (evaluated, violations) = vs.fold((0, 0), |(e, v), x| (e + 1, v + usize::from(!x.holds)));
            CheckSummary { check, evaluated, violations }
        })
        .collect();
    let violations = per_check.iter().map(|c| c.violations).sum();
    Ok(VerificationSummary { instances, checked: checked.len(), config: config.clone(), seed, per_check, violations, results })
}
