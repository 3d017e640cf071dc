//! Seeded task generators and the prompt representation.
//!
//! A [`Prompt`] holds `n` context tokens `(x_i, y_i)` and a query `x_test`
//! whose label block is zero. Labeled rows carry a one-hot `y_i`; unlabeled
//! rows carry the zero vector. Class indices are 0-based throughout.

use crate::error::{Error, Result};
use crate::linalg::{argmax, dot, Mat};
use crate::rng::{self, stream};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Linear classification instance: `c(x) = argmax_k <w_k, x>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearTask {
    /// `K x d`, unit-norm rows.
    pub directions: Mat,
}

impl LinearTask {
    pub fn new(directions: Mat) -> Result<Self> {
        if directions.rows() < 2 || directions.cols() < 1 {
            return Err(Error::arg("linear task needs K >= 2 directions of dimension >= 1"));
        }
        for k in 0..directions.rows() {
            let n = crate::linalg::norm(directions.row(k));
            if (n - 1.0).abs() > 1e-12 {
                return Err(Error::arg(format!("direction {k} has norm {n}, expected 1")));
            }
        }
        Ok(Self { directions })
    }

    pub fn k(&self) -> usize {
        self.directions.rows()
    }

    pub fn d(&self) -> usize {
        self.directions.cols()
    }

    pub fn label(&self, x: &[f64]) -> usize {
        let scores: Vec<f64> = (0..self.k()).map(|k| dot(self.directions.row(k), x)).collect();
        argmax(&scores)
    }
}

/// Nearest-centroid instance: `c(x) = argmin_k ||x - c_k||`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoronoiTask {
    /// `K x d`.
    pub centroids: Mat,
}

impl VoronoiTask {
    pub fn new(centroids: Mat) -> Result<Self> {
        if centroids.rows() < 2 {
            return Err(Error::arg("voronoi task needs K >= 2 centroids"));
        }
        if min_pairwise_distance(&centroids) <= 1e-9 {
            return Err(Error::arg("voronoi centroids must be pairwise distinct"));
        }
        Ok(Self { centroids })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn label(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.k() {
            let d = sq_dist(self.centroids.row(k), x);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    pub fn min_centroid_gap(&self) -> f64 {
        min_pairwise_distance(&self.centroids)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn min_pairwise_distance(m: &Mat) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..m.rows() {
        for j in i + 1..m.rows() {
            best = best.min(sq_dist(m.row(i), m.row(j)).sqrt());
        }
    }
    best
}

/// One in-context instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    /// `n x d` context features.
    pub x: Mat,
    /// `n x K` label block; one-hot for labeled rows, zero otherwise.
    pub y: Mat,
    pub x_test: Vec<f64>,
    /// Ground-truth class of the query, never seen by the predictors.
    pub c_test: usize,
    pub labeled: Vec<bool>,
}

impl Prompt {
    /// Builds a prompt from features and per-row classes (`None` = unlabeled).
    pub fn from_classes(x: Mat, classes: &[Option<usize>], k: usize, x_test: Vec<f64>, c_test: usize) -> Result<Self> {
        if classes.len() != x.rows() {
            return Err(Error::arg("one class entry per context row required"));
        }
        let mut y = Mat::zeros(x.rows(), k);
        let mut labeled = vec![false; x.rows()];
        for (i, c) in classes.iter().enumerate() {
            if let Some(c) = *c {
                if c >= k {
                    return Err(Error::arg(format!("class {c} out of range for K={k}")));
                }
                y[(i, c)] = 1.0;
                labeled[i] = true;
            }
        }
        let p = Self { x, y, x_test, c_test, labeled };
        p.validate()?;
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn k(&self) -> usize {
        self.y.cols()
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled.iter().filter(|&&l| l).count()
    }

    /// Class of each context row, `None` for unlabeled rows.
    pub fn classes(&self) -> Vec<Option<usize>> {
        (0..self.n()).map(|i| self.labeled[i].then(|| argmax(self.y.row(i)))).collect()
    }

    /// Checks the structural invariants: dimensions agree, labeled rows are
    /// one-hot, unlabeled rows are zero, `c_test < K`.
    pub fn validate(&self) -> Result<()> {
        let (n, d, k) = (self.n(), self.d(), self.k());
        if self.y.rows() != n || self.labeled.len() != n {
            return Err(Error::arg("prompt row counts disagree"));
        }
        if self.x_test.len() != d {
            return Err(Error::arg(format!("query has dimension {}, expected {d}", self.x_test.len())));
        }
        if k < 2 {
            return Err(Error::arg("prompt needs K >= 2"));
        }
        if self.c_test >= k {
            return Err(Error::arg(format!("c_test {} out of range for K={k}", self.c_test)));
        }
        if !self.x.is_finite() || self.x_test.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("prompt features must be finite"));
        }
        for i in 0..n {
            let row = self.y.row(i);
            if self.labeled[i] {
                let ones = row.iter().filter(|&&v| v == 1.0).count();
                let zeros = row.iter().filter(|&&v| v == 0.0).count();
                if ones != 1 || zeros != k - 1 {
                    return Err(Error::arg(format!("labeled row {i} is not one-hot")));
                }
            } else if row.iter().any(|&v| v != 0.0) {
                return Err(Error::arg(format!("unlabeled row {i} has a nonzero label")));
            }
        }
        Ok(())
    }

    /// Reorders context rows: new row `i` is old row `perm[i]`.
    pub fn permute_context(&self, perm: &[usize]) -> Prompt {
        self.select_context(perm)
    }

    /// Context made of old rows `rows[0], rows[1], ...`; the query is kept.
    pub fn select_context(&self, rows: &[usize]) -> Prompt {
        let x = Mat::from_fn(rows.len(), self.d(), |i, j| self.x[(rows[i], j)]);
        let y = Mat::from_fn(rows.len(), self.k(), |i, j| self.y[(rows[i], j)]);
        let labeled = rows.iter().map(|&p| self.labeled[p]).collect();
        Prompt { x, y, x_test: self.x_test.clone(), c_test: self.c_test, labeled }
    }

    /// Keeps every labeled row and the first `m` unlabeled rows, in order.
    pub fn keep_unlabeled(&self, m: usize) -> Result<Prompt> {
        let unlabeled = self.labeled.iter().filter(|&&l| !l).count();
        if m > unlabeled {
            return Err(Error::arg(format!("asked for {m} unlabeled rows, prompt has {unlabeled}")));
        }
        let mut seen = 0;
        let rows: Vec<usize> = (0..self.n())
            .filter(|&i| {
                if self.labeled[i] {
                    return true;
                }
                seen += 1;
                seen <= m
            })
            .collect();
        Ok(self.select_context(&rows))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&PromptFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Prompt> {
        let file: PromptFile = serde_json::from_str(text)?;
        file.into_prompt()
    }

    /// One row per token: `x_0..x_{d-1}, y_0..y_{K-1}, labeled, is_query`.
    /// The query is the last row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.d()).map(|j| format!("x_{j}")).collect();
        header.extend((0..self.k()).map(|j| format!("y_{j}")));
        header.push("labeled".into());
        header.push("is_query".into());
        w.write_record(&header)?;
        for i in 0..=self.n() {
            let is_query = i == self.n();
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            let xs = if is_query { &self.x_test[..] } else { self.x.row(i) };
            rec.extend(xs.iter().map(|v| v.to_string()));
            if is_query {
                rec.extend((0..self.k()).map(|_| "0".to_string()));
                rec.push("0".into());
                rec.push("1".into());
            } else {
                rec.extend(self.y.row(i).iter().map(|v| v.to_string()));
                rec.push(u8::from(self.labeled[i]).to_string());
                rec.push("0".into());
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Parses the CSV layout of [`Prompt::to_csv`]. The format does not carry
    /// the query's ground truth, so it is supplied by the caller.
    pub fn from_csv(text: &str, c_test: usize) -> Result<Prompt> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.clone();
        let d = header.iter().filter(|h| h.starts_with("x_")).count();
        let k = header.iter().filter(|h| h.starts_with("y_")).count();
        if header.len() != d + k + 2 {
            return Err(Error::Parse("unexpected prompt CSV header".into()));
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut labeled = Vec::new();
        let mut x_test = None;
        for rec in r.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{v:?}: {e}"))))
                .collect::<Result<_>>()?;
            let feat = vals[..d].to_vec();
            if vals[d + k + 1] != 0.0 {
                x_test = Some(feat);
            } else {
                xs.push(feat);
                ys.push(vals[d..d + k].to_vec());
                labeled.push(vals[d + k] != 0.0);
            }
        }
        let x_test = x_test.ok_or_else(|| Error::Parse("prompt CSV has no query row".into()))?;
        let x = Mat::from_rows(&xs).ok_or_else(|| Error::Parse("ragged features".into()))?;
        let y = Mat::from_rows(&ys).ok_or_else(|| Error::Parse("ragged labels".into()))?;
        let x = if xs.is_empty() { Mat::zeros(0, d) } else { x };
        let y = if ys.is_empty() { Mat::zeros(0, k) } else { y };
        let p = Prompt { x, y, x_test, c_test, labeled };
        p.validate()?;
        Ok(p)
    }
}

pub const PROMPT_FORMAT: &str = "icl-meanshift/prompt";

/// On-disk JSON layout of a prompt: explicit shape header followed by
/// row-major arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptFile {
    pub format: String,
    pub version: u32,
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub n: usize,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub x_test: Vec<f64>,
    pub c_test: usize,
    pub labeled: Vec<bool>,
}

impl From<&Prompt> for PromptFile {
    fn from(p: &Prompt) -> Self {
        Self {
            format: PROMPT_FORMAT.into(),
            version: 1,
            d: p.d(),
            k: p.k(),
            n: p.n(),
            x: p.x.to_rows(),
            y: p.y.to_rows(),
            x_test: p.x_test.clone(),
            c_test: p.c_test,
            labeled: p.labeled.clone(),
        }
    }
}

impl PromptFile {
    pub fn into_prompt(self) -> Result<Prompt> {
        if self.format != PROMPT_FORMAT {
            return Err(Error::Parse(format!("unknown prompt format {:?}", self.format)));
        }
        if self.x.len() != self.n || self.y.len() != self.n {
            return Err(Error::Parse("row count does not match header n".into()));
        }
        if self.x.iter().any(|r| r.len() != self.d) || self.y.iter().any(|r| r.len() != self.k) {
            return Err(Error::Parse("row width does not match header d/K".into()));
        }
        let x = if self.n == 0 { Mat::zeros(0, self.d) } else { Mat::from_rows(&self.x).unwrap() };
        let y = if self.n == 0 { Mat::zeros(0, self.k) } else { Mat::from_rows(&self.y).unwrap() };
        let p = Prompt { x, y, x_test: self.x_test, c_test: self.c_test, labeled: self.labeled };
        p.validate()?;
        Ok(p)
    }
}

fn check_dims(d: usize, k: usize, n: usize) -> Result<()> {
    if d < 1 {
        return Err(Error::arg("d must be >= 1"));
    }
    if k < 2 {
        return Err(Error::arg("K must be >= 2"));
    }
    if n < 1 {
        return Err(Error::arg("n must be >= 1"));
    }
    Ok(())
}

fn gaussian_rows<R: Rng>(rng: &mut R, rows: usize, d: usize) -> Mat {
    Mat::from_vec(rows, d, rng::normal_vec(rng, rows * d))
}

/// Samples `K` directions uniformly on the sphere, `n + 1` standard-normal
/// points (the last one is the query) and labels every point by its most
/// aligned direction.
pub fn sample_linear_task(d: usize, k: usize, n: usize, seed: u64) -> Result<(LinearTask, Prompt)> {
    check_dims(d, k, n)?;
    let mut r = rng::rng(seed);
    let rows: Vec<Vec<f64>> = (0..k).map(|_| rng::unit_sphere(&mut r, d)).collect();
    let task = LinearTask { directions: Mat::from_rows(&rows).unwrap() };
    let x = gaussian_rows(&mut r, n, d);
    let x_test = rng::normal_vec(&mut r, d);
    let classes: Vec<Option<usize>> = (0..n).map(|i| Some(task.label(x.row(i)))).collect();
    let c_test = task.label(&x_test);
    let prompt = Prompt::from_classes(x, &classes, k, x_test, c_test)?;
    Ok((task, prompt))
}

/// Samples centroids and points from `N(0, I_d)` and labels by nearest
/// centroid (lowest index on ties).
pub fn sample_voronoi_task(d: usize, k: usize, n: usize, seed: u64) -> Result<(VoronoiTask, Prompt)> {
    check_dims(d, k, n)?;
    let mut r = rng::rng(seed);
    let centroids = loop {
        let c = gaussian_rows(&mut r, k, d);
        if min_pairwise_distance(&c) > 1e-9 {
            break c;
        }
    };
    let task = VoronoiTask { centroids };
    let x = gaussian_rows(&mut r, n, d);
    let x_test = rng::normal_vec(&mut r, d);
    let classes: Vec<Option<usize>> = (0..n).map(|i| Some(task.label(x.row(i)))).collect();
    let c_test = task.label(&x_test);
    let prompt = Prompt::from_classes(x, &classes, k, x_test, c_test)?;
    Ok((task, prompt))
}

/// Labels a prompt's points by an arbitrary rule; used for hand-built tasks.
pub fn relabel(prompt: &Prompt, label: impl Fn(&[f64]) -> usize) -> Result<Prompt> {
    let classes: Vec<Option<usize>> =
        (0..prompt.n()).map(|i| prompt.labeled[i].then(|| label(prompt.x.row(i)))).collect();
    let c_test = label(&prompt.x_test);
    Prompt::from_classes(prompt.x.clone(), &classes, prompt.k(), prompt.x_test.clone(), c_test)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiSupervisedOptions {
    pub eta: f64,
    pub n_labeled: usize,
    /// Also shift the query by `eta * w_{c_test}`.
    pub shift_query: bool,
}

impl SemiSupervisedOptions {
    pub fn new(eta: f64, n_labeled: usize) -> Self {
        Self { eta, n_labeled, shift_query: true }
    }
}

/// Shifts every point towards its class direction and hides all but
/// `n_labeled` labels, chosen uniformly at random.
pub fn make_semisupervised(prompt: &Prompt, task: &LinearTask, opts: SemiSupervisedOptions, seed: u64) -> Result<Prompt> {
    let n = prompt.n();
    if opts.n_labeled > n {
        return Err(Error::arg(format!("n_lab = {} exceeds n = {n}", opts.n_labeled)));
    }
    if !(opts.eta >= 0.0) || !opts.eta.is_finite() {
        return Err(Error::arg("eta must be finite and >= 0"));
    }
    if task.d() != prompt.d() || task.k() != prompt.k() {
        return Err(Error::arg("task and prompt dimensions differ"));
    }
    let mut x = prompt.x.clone();
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let c = task.label(prompt.x.row(i));
        classes.push(c);
        if opts.eta != 0.0 {
            let w = task.directions.row(c);
            for (xi, wi) in x.row_mut(i).iter_mut().zip(w) {
                *xi += opts.eta * wi;
            }
        }
    }
    let mut x_test = prompt.x_test.clone();
    if opts.shift_query && opts.eta != 0.0 {
        let w = task.directions.row(prompt.c_test);
        for (xi, wi) in x_test.iter_mut().zip(w) {
            *xi += opts.eta * wi;
        }
    }
    let mut r = rng::rng(rng::derive(seed, stream::LABELS));
    let order = rng::permutation(&mut r, n);
    let mut keep = vec![false; n];
    for &i in &order[..opts.n_labeled] {
        keep[i] = true;
    }
    let labels: Vec<Option<usize>> = (0..n).map(|i| keep[i].then_some(classes[i])).collect();
    Prompt::from_classes(x, &labels, prompt.k(), x_test, prompt.c_test)
}

/// Flips each labeled row, with probability `p`, to a class drawn uniformly
/// from the `K - 1` incorrect ones.
pub fn apply_label_noise(prompt: &Prompt, p: f64, seed: u64) -> Result<Prompt> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::arg(format!("flip probability {p} outside [0, 1]")));
    }
    let k = prompt.k();
    let mut r = rng::rng(rng::derive(seed, stream::LABELS));
    let mut out = prompt.clone();
    for (i, c) in prompt.classes().into_iter().enumerate() {
        let Some(c) = c else { continue };
        let u: f64 = r.random();
        if u < p {
            let pick = r.random_range(0..k - 1);
            let new = if pick >= c { pick + 1 } else { pick };
            out.y.row_mut(i).fill(0.0);
            out.y[(i, new)] = 1.0;
        }
    }
    Ok(out)
}

/// Replaces every unlabeled feature row with a fresh `N(0, I_d)` draw.
pub fn replace_unlabeled_with_noise(prompt: &Prompt, seed: u64) -> Prompt {
    let mut r = rng::rng(rng::derive(seed, stream::NOISE));
    let mut out = prompt.clone();
    for i in 0..prompt.n() {
        if !prompt.labeled[i] {
            let v = rng::normal_vec(&mut r, prompt.d());
            out.x.row_mut(i).copy_from_slice(&v);
        }
    }
    out
}

/// Two-dimensional benchmark distributions. Every point (query included)
/// draws its class uniformly at random.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dataset2d {
    /// Two anisotropic Gaussians with means `(-s, -s)` and `(s, s)`;
    /// covariance `sigma^2 * cov`.
    Ellipses {
        separation: f64,
        sigma: f64,
        #[serde(default = "default_ellipse_cov")]
        cov: [[f64; 2]; 2],
    },
    /// Centroids and points uniform in `[-bound, bound]^2`, nearest-centroid labels.
    #[serde(rename = "voronoi2d")]
    Voronoi2d { classes: usize, bound: f64 },
    /// Rings of radius `1 + k` with isotropic noise.
    Circles { classes: usize, sigma: f64 },
    /// Arms `theta * (cos(theta + phi_k), sin(theta + phi_k))`, `theta ~ U[0, 4 pi]`,
    /// `phi_k = 2 pi k / K`.
    Spirals { classes: usize, sigma: f64 },
    /// Isotropic Gaussian blobs centred at `radius * (cos(2 pi k / K), sin(2 pi k / K))`.
    Blobs { classes: usize, radius: f64, sigma: f64 },
}

/// `diag(1, 0.1)` rotated by 45 degrees.
pub fn default_ellipse_cov() -> [[f64; 2]; 2] {
    let (a, b) = (1.0, 0.1);
    [[(a + b) / 2.0, (a - b) / 2.0], [(a - b) / 2.0, (a + b) / 2.0]]
}

impl Dataset2d {
    pub fn classes(&self) -> usize {
        match *self {
            Dataset2d::Ellipses { .. } => 2,
            Dataset2d::Voronoi2d { classes, .. }
            | Dataset2d::Circles { classes, .. }
            | Dataset2d::Spirals { classes, .. }
            | Dataset2d::Blobs { classes, .. } => classes,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Dataset2d::Ellipses { .. } => "ellipses",
            Dataset2d::Voronoi2d { .. } => "voronoi2d",
            Dataset2d::Circles { .. } => "circles",
            Dataset2d::Spirals { .. } => "spirals",
            Dataset2d::Blobs { .. } => "blobs",
        }
    }

    /// Parses a kind name with default parameters.
    pub fn from_name(name: &str, classes: usize, sigma: f64) -> Result<Self> {
        Ok(match name {
            "ellipses" => Dataset2d::Ellipses { separation: 3.0, sigma, cov: default_ellipse_cov() },
            "voronoi2d" => Dataset2d::Voronoi2d { classes, bound: 3.0 },
            "circles" => Dataset2d::Circles { classes, sigma },
            "spirals" => Dataset2d::Spirals { classes, sigma },
            "blobs" => Dataset2d::Blobs { classes, radius: 2.0, sigma },
            other => return Err(Error::arg(format!("unknown 2-D dataset kind {other:?}"))),
        })
    }
}

/// A 2-D prompt together with the geometry that generated it.
#[derive(Clone, Debug)]
pub struct Sample2d {
    pub prompt: Prompt,
    /// Voronoi sites, when the dataset has them.
    pub centroids: Option<Mat>,
    /// Unit class directions, when the classes are linearly arranged around
    /// the origin (blobs).
    pub directions: Option<Mat>,
}

pub fn sample_2d_dataset(kind: &Dataset2d, n: usize, seed: u64) -> Result<Prompt> {
    sample_2d(kind, n, seed).map(|s| s.prompt)
}

pub fn sample_2d(kind: &Dataset2d, n: usize, seed: u64) -> Result<Sample2d> {
    let k = kind.classes();
    check_dims(2, k, n)?;
    let mut r = rng::rng(seed);
    let mut centroids = None;
    let mut directions = None;
    let mut points: Vec<(Vec<f64>, usize)> = Vec::with_capacity(n + 1);
    match *kind {
        Dataset2d::Ellipses { separation, sigma, cov } => {
            let chol = cholesky_2x2(cov)?;
            for _ in 0..=n {
                let c = r.random_range(0..2);
                let mu = if c == 0 { -separation } else { separation };
                let (z0, z1) = (rng::normal(&mut r), rng::normal(&mut r));
                let x = vec![mu + sigma * chol[0][0] * z0, mu + sigma * (chol[1][0] * z0 + chol[1][1] * z1)];
                points.push((x, c));
            }
        }
        Dataset2d::Voronoi2d { bound, .. } => {
            if !(bound > 0.0) {
                return Err(Error::arg("voronoi2d bound must be > 0"));
            }
            let sites = loop {
                let c = Mat::from_fn(k, 2, |_, _| r.random_range(-bound..bound));
                if min_pairwise_distance(&c) > 1e-9 {
                    break c;
                }
            };
            let task = VoronoiTask { centroids: sites };
            for _ in 0..=n {
                let x = vec![r.random_range(-bound..bound), r.random_range(-bound..bound)];
                let c = task.label(&x);
                points.push((x, c));
            }
            centroids = Some(task.centroids);
        }
        Dataset2d::Circles { sigma, .. } => {
            for _ in 0..=n {
                let c = r.random_range(0..k);
                let radius = 1.0 + c as f64;
                let theta = r.random_range(0.0..2.0 * PI);
                let x = vec![
                    radius * theta.cos() + sigma * rng::normal(&mut r),
                    radius * theta.sin() + sigma * rng::normal(&mut r),
                ];
                points.push((x, c));
            }
        }
        Dataset2d::Spirals { sigma, .. } => {
            for _ in 0..=n {
                let c = r.random_range(0..k);
                let phase = 2.0 * PI * c as f64 / k as f64;
                let theta = r.random_range(0.0..=4.0 * PI);
                let x = vec![
                    theta * (theta + phase).cos() + sigma * rng::normal(&mut r),
                    theta * (theta + phase).sin() + sigma * rng::normal(&mut r),
                ];
                points.push((x, c));
            }
        }
        Dataset2d::Blobs { radius, sigma, .. } => {
            let dirs = blob_directions(k);
            for _ in 0..=n {
                let c = r.random_range(0..k);
                let x = vec![
                    radius * dirs[(c, 0)] + sigma * rng::normal(&mut r),
                    radius * dirs[(c, 1)] + sigma * rng::normal(&mut r),
                ];
                points.push((x, c));
            }
            directions = Some(dirs);
        }
    }
    let (query, c_test) = points.pop().unwrap();
    let rows: Vec<Vec<f64>> = points.iter().map(|(x, _)| x.clone()).collect();
    let classes: Vec<Option<usize>> = points.iter().map(|&(_, c)| Some(c)).collect();
    let prompt = Prompt::from_classes(Mat::from_rows(&rows).unwrap(), &classes, k, query, c_test)?;
    Ok(Sample2d { prompt, centroids, directions })
}

/// Unit vectors at angles `2 pi k / K`.
pub fn blob_directions(k: usize) -> Mat {
    Mat::from_fn(k, 2, |c, j| {
        let a = 2.0 * PI * c as f64 / k as f64;
        if j == 0 {
            a.cos()
        } else {
            a.sin()
        }
    })
}

fn cholesky_2x2(c: [[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
    let a = c[0][0];
    if !(a > 0.0) || (c[0][1] - c[1][0]).abs() > 1e-12 {
        return Err(Error::arg("ellipse covariance must be symmetric positive definite"));
    }
    let l00 = a.sqrt();
    let l10 = c[1][0] / l00;
    let rem = c[1][1] - l10 * l10;
    if !(rem > 0.0) {
        return Err(Error::arg("ellipse covariance must be symmetric positive definite"));
    }
    Ok([[l00, 0.0], [l10, rem.sqrt()]])
}
