//! Behavioral fingerprints of prompt-to-logit maps and their agreement
//! statistics.
//!
//! A fingerprint holds the query Jacobian `d s / d x_test` (`K x d`), the
//! context influence `S[c][i] = ||d s_c / d x_i||_2` (`K x n`) and the
//! probability given to the true query class.

use crate::dynamics::{self, DynamicsParams};
use crate::error::{Error, Result};
use crate::linalg::{norm, softmax, Mat};
use crate::par;
use crate::rng::{self, stream};
use crate::task_gen::{sample_linear_task, Prompt};
use crate::training::logit_input_gradients;
use crate::transformer::{self, TransformerWeights};
use serde::Serialize;

/// Relative central-difference step: `h = FD_STEP * max(1, ||x||_inf)`.
pub const FD_STEP: f64 = 1e-4;

/// Any map from prompts to `K` logits.
pub trait Predictor: Sync {
    fn logits(&self, prompt: &Prompt) -> Result<Vec<f64>>;

    /// Logits and per-class gradients with respect to the encoded prompt
    /// (`(n+1) x (d+K)`, query last), when available in closed form.
    fn input_gradients(&self, _prompt: &Prompt) -> Option<Result<(Vec<f64>, Vec<Mat>)>> {
        None
    }
}

/// The transformer evaluated without any sandwich.
impl Predictor for TransformerWeights {
    fn logits(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        Ok(transformer::forward(prompt, self, None)?.logits)
    }

    fn input_gradients(&self, prompt: &Prompt) -> Option<Result<(Vec<f64>, Vec<Mat>)>> {
        Some(logit_input_gradients(self, prompt))
    }
}

/// The dynamics' final query label row.
impl Predictor for DynamicsParams {
    fn logits(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        Ok(dynamics::predict_prompt(prompt, self)?.1)
    }
}

/// Forces finite differences on a predictor that has closed-form gradients.
pub struct FiniteDifference<'a, P: ?Sized>(pub &'a P);

impl<P: Predictor + ?Sized> Predictor for FiniteDifference<'_, P> {
    fn logits(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        self.0.logits(prompt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fingerprint {
    pub query_jacobian: Mat,
    pub context_influence: Mat,
    pub p_true: f64,
}

fn checked_logits<P: Predictor + ?Sized>(p: &P, prompt: &Prompt) -> Result<Vec<f64>> {
    let s = p.logits(prompt)?;
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("fingerprints", 0, "non-finite logits"));
    }
    Ok(s)
}

/// Central-difference Jacobians with step `rel * max(1, ||x_token||_inf)`.
/// Returns the query Jacobian and one `K x d` Jacobian per context row.
pub fn fd_jacobians<P: Predictor + ?Sized>(p: &P, prompt: &Prompt, rel: f64) -> Result<(Mat, Vec<Mat>)> {
    let (n, d) = (prompt.n(), prompt.d());
    let k = prompt.k();
    let mut jac = vec![Mat::zeros(k, d); n + 1];
    for (tok, j) in jac.iter_mut().enumerate() {
        let row: Vec<f64> = if tok < n { prompt.x.row(tok).to_vec() } else { prompt.x_test.clone() };
        let h = rel * row.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for a in 0..d {
            let eval = |delta: f64| -> Result<Vec<f64>> {
                let mut q = prompt.clone();
                if tok < n {
                    q.x[(tok, a)] += delta;
                } else {
                    q.x_test[a] += delta;
                }
                checked_logits(p, &q)
            };
            let plus = eval(h)?;
            let minus = eval(-h)?;
            for c in 0..k {
                j[(c, a)] = (plus[c] - minus[c]) / (2.0 * h);
            }
        }
    }
    let query = jac.pop().unwrap();
    Ok((query, jac))
}

fn from_jacobians(logits: &[f64], query: Mat, context: &[Mat], c_test: usize) -> Fingerprint {
    let k = query.rows();
    let influence = Mat::from_fn(k, context.len(), |c, i| norm(context[i].row(c)));
    Fingerprint { query_jacobian: query, context_influence: influence, p_true: softmax(logits)[c_test] }
}

pub fn fingerprint<P: Predictor + ?Sized>(p: &P, prompt: &Prompt) -> Result<Fingerprint> {
    prompt.validate()?;
    let (n, d) = (prompt.n(), prompt.d());
    if let Some(res) = p.input_gradients(prompt) {
        let (logits, grads) = res?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("fingerprints", 0, "non-finite logits"));
        }
        let k = logits.len();
        let query = Mat::from_fn(k, d, |c, a| grads[c][(n, a)]);
        let context: Vec<Mat> = (0..n).map(|i| Mat::from_fn(k, d, |c, a| grads[c][(i, a)])).collect();
        return Ok(from_jacobians(&logits, query, &context, prompt.c_test));
    }
    let logits = checked_logits(p, prompt)?;
    let (query, context) = fd_jacobians(p, prompt, FD_STEP)?;
    Ok(from_jacobians(&logits, query, &context, prompt.c_test))
}

/// `1 + ` the average 0-based position of each value among ties.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        idx[i..=j].iter().for_each(|&t| ranks[t] = r);
        i = j + 1;
    }
    ranks
}

/// `None` when either side has zero variance or fewer than two entries.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub spearman_q: Option<f64>,
    pub pearson_q: Option<f64>,
    pub spearman_c: Option<f64>,
    pub pearson_c: Option<f64>,
    pub sq_pred_diff: f64,
}

pub fn compare(a: &Fingerprint, b: &Fingerprint) -> Result<Comparison> {
    if a.query_jacobian.shape() != b.query_jacobian.shape() || a.context_influence.shape() != b.context_influence.shape() {
        return Err(Error::arg("fingerprint shapes differ"));
    }
    let (qa, qb) = (a.query_jacobian.as_slice(), b.query_jacobian.as_slice());
    let (ca, cb) = (a.context_influence.as_slice(), b.context_influence.as_slice());
    Ok(Comparison {
        spearman_q: spearman(qa, qb),
        pearson_q: pearson(qa, qb),
        spearman_c: spearman(ca, cb),
        pearson_c: pearson(ca, cb),
        sq_pred_diff: (a.p_true - b.p_true).powi(2),
    })
}

/// Mean and sample standard deviation over the defined values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Stat {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        let count = v.len();
        if count == 0 {
            return Stat { mean: f64::NAN, sd: f64::NAN, count };
        }
        let mean = v.iter().sum::<f64>() / count as f64;
        let sd = if count > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt() } else { 0.0 };
        Stat { mean, sd, count }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonSummary {
    pub spearman_q: Stat,
    pub pearson_q: Stat,
    pub spearman_c: Stat,
    pub pearson_c: Stat,
    pub sq_pred_diff: Stat,
    /// Squared Pearson correlation of the two `p_true` series.
    pub r2_p_true: Option<f64>,
    /// `(p_true_a, p_true_b)` per task.
    pub p_true_pairs: Vec<(f64, f64)>,
}

impl ComparisonSummary {
    fn new(rows: &[(Comparison, f64, f64)]) -> Self {
        let pa: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let pb: Vec<f64> = rows.iter().map(|r| r.2).collect();
        ComparisonSummary {
            spearman_q: Stat::of(rows.iter().map(|r| r.0.spearman_q)),
            pearson_q: Stat::of(rows.iter().map(|r| r.0.pearson_q)),
            spearman_c: Stat::of(rows.iter().map(|r| r.0.spearman_c)),
            pearson_c: Stat::of(rows.iter().map(|r| r.0.pearson_c)),
            sq_pred_diff: Stat::of(rows.iter().map(|r| Some(r.0.sq_pred_diff))),
            r2_p_true: pearson(&pa, &pb).map(|r| r * r),
            p_true_pairs: pa.into_iter().zip(pb).collect(),
        }
    }

    /// Mean of the query and context Spearman means.
    pub fn mean_spearman(&self) -> f64 {
        (self.spearman_q.mean + self.spearman_c.mean) / 2.0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,p_true_a,p_true_b\n");
        for (i, (a, b)) in self.p_true_pairs.iter().enumerate() {
            out.push_str(&format!("{i},{a},{b}\n"));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SuiteConfig {
    pub d: usize,
    pub k: usize,
    pub n: usize,
    pub n_tasks: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub config: SuiteConfig,
    /// A and B on the same prompt.
    pub same_prompt: ComparisonSummary,
    /// A and a second member of A's family on the same prompt.
    pub baseline: Option<ComparisonSummary>,
    /// A on one prompt, B on an independent prompt.
    pub control: ComparisonSummary,
}

/// Runs the three comparisons over `n_tasks` linear-classification prompts.
pub fn alignment_suite(
    a: &dyn Predictor,
    b: &dyn Predictor,
    a2: Option<&dyn Predictor>,
    config: SuiteConfig,
) -> Result<AlignmentReport> {
    if config.n_tasks < 2 {
        return Err(Error::arg("alignment_suite needs n_tasks >= 2"));
    }
    type Row = ((Comparison, f64, f64), Option<(Comparison, f64, f64)>, (Comparison, f64, f64));
    let rows: Vec<Result<Row>> = par::map(config.n_tasks, |i| {
        let s = rng::derive_indexed(config.seed, stream::DATA, i as u64);
        let p = sample_linear_task(config.d, config.k, config.n, s)?.1;
        let q = sample_linear_task(config.d, config.k, config.n, rng::derive(s, stream::HOLDOUT))?.1;
        let fa = fingerprint(a, &p)?;
        let fb = fingerprint(b, &p)?;
        let fbq = fingerprint(b, &q)?;
        let same = (compare(&fa, &fb)?, fa.p_true, fb.p_true);
        let base = match a2 {
            Some(a2) => {
                let f2 = fingerprint(a2, &p)?;
                Some((compare(&fa, &f2)?, fa.p_true, f2.p_true))
            }
            None => None,
        };
        let control = (compare(&fa, &fbq)?, fa.p_true, fbq.p_true);
        Ok((same, base, control))
    });
    let rows = rows.into_iter().collect::<Result<Vec<Row>>>()?;
    let same: Vec<_> = rows.iter().map(|r| r.0).collect();
    let control: Vec<_> = rows.iter().map(|r| r.2).collect();
    let baseline = a2.map(|_| ComparisonSummary::new(&rows.iter().map(|r| r.1.unwrap()).collect::<Vec<_>>()));
    Ok(AlignmentReport { config, same_prompt: ComparisonSummary::new(&same), baseline, control: ComparisonSummary::new(&control) })
}
