//! Reference classifiers fitted on a single prompt.
//!
//! Supervised kinds see only the labeled context rows. Label spreading is
//! transductive: its graph holds every context row plus the query.

use crate::error::{Error, Result};
use crate::linalg::{argmax, dot, log_sum_exp, Mat};
use crate::task_gen::Prompt;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Logreg,
    Svm,
    Knn,
    NearestCentroid,
    LabelSpreading,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] =
        [BaselineKind::Logreg, BaselineKind::Svm, BaselineKind::Knn, BaselineKind::NearestCentroid, BaselineKind::LabelSpreading];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Logreg => "logreg",
            BaselineKind::Svm => "svm",
            BaselineKind::Knn => "knn",
            BaselineKind::NearestCentroid => "nearest_centroid",
            BaselineKind::LabelSpreading => "label_spreading",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name).ok_or_else(|| Error::arg(format!("unknown baseline {name:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    /// Initial gradient-descent step for logreg, halved on loss increase.
    pub logreg_step: f64,
    pub logreg_max_iter: usize,
    /// Stop once the largest gradient entry falls below this.
    pub logreg_tol: f64,
    pub svm_lambda: f64,
    pub svm_steps: usize,
    /// Neighbors for the k-NN classifier.
    pub knn_k: usize,
    /// Graph degree for label spreading; `None` uses `max(5, floor(sqrt(n)))`.
    pub spread_k: Option<usize>,
    pub spread_alpha: f64,
    pub spread_max_iter: usize,
    pub spread_tol: f64,
    /// True class centroids for the nearest-centroid oracle.
    pub centroids: Option<Mat>,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            logreg_step: 0.1,
            logreg_max_iter: 1000,
            logreg_tol: 1e-6,
            svm_lambda: 1e-3,
            svm_steps: 5000,
            knn_k: 1,
            spread_k: None,
            spread_alpha: 0.2,
            spread_max_iter: 1000,
            spread_tol: 1e-4,
            centroids: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Params {
    /// `K x (d+1)` score rows, bias last.
    Linear { w: Mat },
    Neighbors { x: Mat, classes: Vec<usize>, k: usize },
    Centroids { centroids: Mat },
    /// Node features and the spread label scores.
    Spreading { nodes: Mat, scores: Mat, iterations: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub params: Params,
    pub hyper: Hyper,
    pub k: usize,
    pub d: usize,
    /// Logreg loss per accepted iteration, starting at the zero model.
    pub loss_history: Vec<f64>,
    /// Label spreading: max-abs change between successive iterates.
    pub step_sizes: Vec<f64>,
}

fn labeled(prompt: &Prompt) -> Result<(Mat, Vec<usize>)> {
    let classes = prompt.classes();
    let idx: Vec<usize> = (0..prompt.n()).filter(|&i| classes[i].is_some()).collect();
    if idx.is_empty() {
        return Err(Error::arg("baseline needs at least one labeled example"));
    }
    let x = Mat::from_fn(idx.len(), prompt.d(), |r, c| prompt.x[(idx[r], c)]);
    Ok((x, idx.iter().map(|&i| classes[i].unwrap()).collect()))
}

fn scores(w: &Mat, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..w.rows()).map(|c| dot(&w.row(c)[..d], x) + w[(c, d)]).collect()
}

fn logreg_loss(w: &Mat, x: &Mat, y: &[usize]) -> f64 {
    (0..x.rows()).map(|i| {
        let s = scores(w, x.row(i));
        log_sum_exp(&s) - s[y[i]]
    }).sum::<f64>()
        / x.rows() as f64
}

fn logreg_grad(w: &Mat, x: &Mat, y: &[usize]) -> Mat {
    let d = x.cols();
    let mut g = Mat::zeros(w.rows(), d + 1);
    let scale = 1.0 / x.rows() as f64;
    for i in 0..x.rows() {
        let s = scores(w, x.row(i));
        let lse = log_sum_exp(&s);
        for c in 0..w.rows() {
            let r = ((s[c] - lse).exp() - f64::from(u8::from(c == y[i]))) * scale;
            for (j, v) in x.row(i).iter().enumerate() {
                g[(c, j)] += r * v;
            }
            g[(c, d)] += r;
        }
    }
    g
}

fn fit_logreg(x: &Mat, y: &[usize], k: usize, h: &Hyper) -> (Mat, Vec<f64>) {
    let mut w = Mat::zeros(k, x.cols() + 1);
    let mut loss = logreg_loss(&w, x, y);
    let mut history = vec![loss];
    for _ in 0..h.logreg_max_iter {
        let g = logreg_grad(&w, x, y);
        if g.max_abs() < h.logreg_tol {
            break;
        }
        let mut step = h.logreg_step;
        let mut accepted = false;
        for _ in 0..60 {
            let mut trial = w.clone();
            trial.add_scaled(&g, -step);
            let l = logreg_loss(&trial, x, y);
            if l <= loss {
                w = trial;
                loss = l;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        history.push(loss);
    }
    (w, history)
}

/// One-vs-rest hinge loss with L2 penalty, full-batch subgradient steps of
/// size `1 / (lambda t)` and projection onto the `1/sqrt(lambda)` ball.
fn fit_svm(x: &Mat, y: &[usize], k: usize, h: &Hyper) -> Mat {
    let d = x.cols();
    let lambda = h.svm_lambda;
    let radius = 1.0 / lambda.sqrt();
    let mut w = Mat::zeros(k, d + 1);
    let m = x.rows() as f64;
    for c in 0..k {
        let mut v = vec![0.0; d + 1];
        for t in 1..=h.svm_steps {
            let eta = 1.0 / (lambda * t as f64);
            let mut g: Vec<f64> = v.iter().map(|a| lambda * a).collect();
            for i in 0..x.rows() {
                let target = if y[i] == c { 1.0 } else { -1.0 };
                let s = dot(&v[..d], x.row(i)) + v[d];
                if target * s < 1.0 {
                    x.row(i).iter().enumerate().for_each(|(j, xv)| g[j] -= target * xv / m);
                    g[d] -= target / m;
                }
            }
            v.iter_mut().zip(&g).for_each(|(a, b)| *a -= eta * b);
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > radius {
                v.iter_mut().for_each(|a| *a *= radius / norm);
            }
        }
        w.row_mut(c).copy_from_slice(&v);
    }
    w
}

/// `max(5, floor(sqrt(n)))`.
pub fn spreading_degree(n: usize) -> usize {
    5.max((n as f64).sqrt().floor() as usize)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest rows of `x` to `q` (Euclidean, ties by index),
/// skipping `skip`.
fn nearest(x: &Mat, q: &[f64], k: usize, skip: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = (0..x.rows()).filter(|&i| Some(i) != skip).map(|i| (sq_dist(x.row(i), q), i)).collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    idx.into_iter().take(k).map(|(_, i)| i).collect()
}

fn fit_spreading(prompt: &Prompt, h: &Hyper) -> (Mat, Mat, Vec<f64>) {
    let (n, d, k) = (prompt.n(), prompt.d(), prompt.k());
    let nodes = Mat::from_fn(n + 1, d, |i, j| if i < n { prompt.x[(i, j)] } else { prompt.x_test[j] });
    let m = n + 1;
    let deg = h.spread_k.unwrap_or_else(|| spreading_degree(n)).min(m - 1);
    let mut w = Mat::zeros(m, m);
    for i in 0..m {
        for j in nearest(&nodes, nodes.row(i), deg, Some(i)) {
            w[(i, j)] = 1.0;
            w[(j, i)] = 1.0;
        }
    }
    let dinv: Vec<f64> = (0..m).map(|i| {
        let s: f64 = w.row(i).iter().sum();
        if s > 0.0 { 1.0 / s.sqrt() } else { 0.0 }
    }).collect();
    let s = Mat::from_fn(m, m, |i, j| dinv[i] * w[(i, j)] * dinv[j]);
    let classes = prompt.classes();
    let y0 = Mat::from_fn(m, k, |i, c| f64::from(u8::from(i < n && classes[i] == Some(c))));
    let a = h.spread_alpha;
    let mut f = y0.clone();
    let mut steps = Vec::new();
    for _ in 0..h.spread_max_iter {
        let mut next = s.matmul(&f).scale(a);
        next.add_scaled(&y0, 1.0 - a);
        let change = next.max_abs_diff(&f);
        f = next;
        steps.push(change);
        if change < h.spread_tol {
            break;
        }
    }
    (nodes, f, steps)
}

pub fn fit(kind: BaselineKind, prompt: &Prompt, hyper: &Hyper) -> Result<BaselineModel> {
    prompt.validate()?;
    let (d, k) = (prompt.d(), prompt.k());
    let (x, y) = labeled(prompt)?;
    let mut loss_history = Vec::new();
    let mut step_sizes = Vec::new();
    let params = match kind {
        BaselineKind::Logreg => {
            let (w, hist) = fit_logreg(&x, &y, k, hyper);
            loss_history = hist;
            Params::Linear { w }
        }
        BaselineKind::Svm => Params::Linear { w: fit_svm(&x, &y, k, hyper) },
        BaselineKind::Knn => {
            if hyper.knn_k == 0 {
                return Err(Error::arg("knn_k must be >= 1"));
            }
            Params::Neighbors { x, classes: y, k: hyper.knn_k }
        }
        BaselineKind::NearestCentroid => match &hyper.centroids {
            Some(c) => {
                if c.rows() != k || c.cols() != d {
                    return Err(Error::arg("supplied centroids must be K x d"));
                }
                Params::Centroids { centroids: c.clone() }
            }
            None => {
                // classes without labeled points get an unreachable centroid
                let mut sums = Mat::zeros(k, d);
                let mut counts = vec![0usize; k];
                for (i, &c) in y.iter().enumerate() {
                    counts[c] += 1;
                    x.row(i).iter().enumerate().for_each(|(j, v)| sums[(c, j)] += v);
                }
                let centroids = Mat::from_fn(k, d, |c, j| if counts[c] > 0 { sums[(c, j)] / counts[c] as f64 } else { f64::INFINITY });
                Params::Centroids { centroids }
            }
        },
        BaselineKind::LabelSpreading => {
            let (nodes, scores, steps) = fit_spreading(prompt, hyper);
            step_sizes = steps;
            Params::Spreading { nodes, scores, iterations: step_sizes.len() }
        }
    };
    Ok(BaselineModel { kind, params, hyper: hyper.clone(), k, d, loss_history, step_sizes })
}

impl BaselineModel {
    /// Per-class scores at `x`; argmax with lowest-index ties is the prediction.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d {
            return Err(Error::arg(format!("expected a {}-dimensional point, got {}", self.d, x.len())));
        }
        Ok(match &self.params {
            Params::Linear { w } => scores(w, x),
            Params::Neighbors { x: pts, classes, k } => {
                let mut votes = vec![0.0; self.k];
                nearest(pts, x, *k, None).into_iter().for_each(|i| votes[classes[i]] += 1.0);
                votes
            }
            Params::Centroids { centroids } => (0..self.k).map(|c| -sq_dist(centroids.row(c), x)).collect(),
            // transductive: the score row of the nearest graph node
            Params::Spreading { nodes, scores, .. } => scores.row(nearest(nodes, x, 1, None)[0]).to_vec(),
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let s = self.scores(x)?;
        if s.iter().all(|v| v.is_nan()) {
            return Err(Error::numeric("baselines", 0, "all scores undefined"));
        }
        Ok(argmax(&s))
    }
}

pub fn predict(model: &BaselineModel, x: &[f64]) -> Result<usize> {
    model.predict(x)
}

/// Fits on `prompt` and reports whether the query is classified correctly.
pub fn query_correct(kind: BaselineKind, prompt: &Prompt, hyper: &Hyper) -> Result<bool> {
    Ok(fit(kind, prompt, hyper)?.predict(&prompt.x_test)? == prompt.c_test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt(rows: &[[f64; 2]], classes: &[Option<usize>], k: usize, q: [f64; 2], c: usize) -> Prompt {
        let x = Mat::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        Prompt::from_classes(x, classes, k, q.to_vec(), c).unwrap()
    }

    fn separable() -> Prompt {
        prompt(
            &[[-2.0, 0.1], [-1.5, -0.3], [-1.0, 0.4], [1.0, 0.2], [1.7, -0.1], [2.2, 0.3]],
            &[Some(0), Some(0), Some(0), Some(1), Some(1), Some(1)],
            2,
            [0.8, 0.0],
            1,
        )
    }

    #[test]
    fn logreg_separates_and_loss_never_increases() {
        let p = separable();
        let m = fit(BaselineKind::Logreg, &p, &Hyper::default()).unwrap();
        for i in 0..p.n() {
            assert_eq!(m.predict(p.x.row(i)).unwrap(), p.classes()[i].unwrap());
        }
        assert!(m.loss_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn svm_separates() {
        let p = separable();
        let m = fit(BaselineKind::Svm, &p, &Hyper::default()).unwrap();
        for i in 0..p.n() {
            assert_eq!(m.predict(p.x.row(i)).unwrap(), p.classes()[i].unwrap());
        }
    }

    #[test]
    fn linear_argmax_matches_enumeration() {
        let w = Mat::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![-1.0, -1.0, 0.5]]).unwrap();
        let m = BaselineModel { kind: BaselineKind::Logreg, params: Params::Linear { w: w.clone() }, hyper: Hyper::default(), k: 3, d: 2, loss_history: vec![], step_sizes: vec![] };
        for x in [[0.3, 0.1], [-0.2, 0.6], [-1.0, -1.0], [0.0, 0.0]] {
            let s: Vec<f64> = (0..3).map(|c| w[(c, 0)] * x[0] + w[(c, 1)] * x[1] + w[(c, 2)]).collect();
            let mut best = 0;
            for c in 1..3 {
                if s[c] > s[best] {
                    best = c;
                }
            }
            assert_eq!(m.predict(&x).unwrap(), best);
        }
    }

    #[test]
    fn one_nn_returns_training_label() {
        let p = separable();
        let m = fit(BaselineKind::Knn, &p, &Hyper::default()).unwrap();
        for i in 0..p.n() {
            assert_eq!(m.predict(p.x.row(i)).unwrap(), p.classes()[i].unwrap());
        }
        assert!(m.predict(&[1.0]).is_err());
    }

    #[test]
    fn spreading_follows_components() {
        let mut rows = vec![];
        let mut classes = vec![];
        for i in 0..6 {
            rows.push([i as f64 * 0.01, 0.0]);
            classes.push(if i == 0 { Some(0) } else { None });
        }
        for i in 0..6 {
            rows.push([100.0 + i as f64 * 0.01, 0.0]);
            classes.push(if i == 0 { Some(1) } else { None });
        }
        let p = prompt(&rows, &classes, 2, [100.03, 0.0], 1);
        let h = Hyper { spread_k: Some(5), ..Hyper::default() };
        let m = fit(BaselineKind::LabelSpreading, &p, &h).unwrap();
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(m.predict(r).unwrap(), usize::from(i >= 6));
        }
        assert!(m.step_sizes.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        assert_eq!(spreading_degree(64), 8);
    }

    #[test]
    fn empty_labeled_set_is_an_error() {
        let p = prompt(&[[0.0, 0.0]], &[None], 2, [0.0, 0.0], 0);
        assert!(fit(BaselineKind::Logreg, &p, &Hyper::default()).is_err());
        let single = prompt(&[[0.0, 0.0], [1.0, 1.0]], &[Some(1), None], 3, [0.0, 0.0], 1);
        assert_eq!(fit(BaselineKind::NearestCentroid, &single, &Hyper::default()).unwrap().predict(&[5.0, 5.0]).unwrap(), 1);
    }
}
