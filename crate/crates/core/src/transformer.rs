//! Single-head attention-only transformer on the `[X Y]` prompt encoding.
//!
//! A layer computes `Z += softmax(Z W_Q W_K^T Z^T / sqrt(D) + M) Z W_V W_P`
//! with `D = d + K` and a mask `M` that hides the query column, so every
//! token attends to the `n` context tokens only. Internally a layer is
//! evaluated through its two products `W_QK = W_Q W_K^T / sqrt(D)` and
//! `W_VP = W_V W_P`.

use crate::dynamics::{Centering, DynamicsParams};
use crate::error::{Error, Result};
use crate::linalg::{argmax, softmax_into, Mat};
use crate::rng::{self, stream};
use crate::task_gen::Prompt;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wp: Mat,
}

impl LayerWeights {
    pub fn zeros(dim: usize) -> Self {
        Self { wq: Mat::zeros(dim, dim), wk: Mat::zeros(dim, dim), wv: Mat::zeros(dim, dim), wp: Mat::zeros(dim, dim) }
    }

    pub fn matrices(&self) -> [&Mat; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wp]
    }

    pub fn matrices_mut(&mut self) -> [&mut Mat; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wp]
    }

    /// `(W_Q W_K^T / sqrt(D), W_V W_P)`.
    pub fn products(&self) -> (Mat, Mat) {
        let s = (self.wq.rows() as f64).sqrt();
        (self.wq.matmul_t(&self.wk).scale(1.0 / s), self.wv.matmul(&self.wp))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerWeights {
    pub d: usize,
    pub k: usize,
    pub layers: Vec<LayerWeights>,
}

impl TransformerWeights {
    pub fn zeros(d: usize, k: usize, layers: usize) -> Self {
        Self { d, k, layers: (0..layers).map(|_| LayerWeights::zeros(d + k)).collect() }
    }

    pub fn dim(&self) -> usize {
        self.d + self.k
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if self.k < 2 || self.d < 1 {
            return Err(Error::arg("weights need d >= 1 and K >= 2"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for m in layer.matrices() {
                if m.shape() != (dim, dim) {
                    return Err(Error::arg(format!("layer {l} matrix is {:?}, expected {dim}x{dim}", m.shape())));
                }
                if !m.is_finite() {
                    return Err(Error::numeric("transformer", l, "non-finite weight"));
                }
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.len() * 4 * self.dim() * self.dim()
    }

    /// All weights flattened in layer order, `W_Q, W_K, W_V, W_P` within a layer.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.matrices().into_iter().flat_map(|m| m.as_slice().iter().copied())).collect()
    }

    pub fn unflatten_into(&mut self, flat: &[f64]) {
        let mut off = 0;
        for layer in &mut self.layers {
            for m in layer.matrices_mut() {
                let len = m.as_slice().len();
                m.as_mut_slice().copy_from_slice(&flat[off..off + len]);
                off += len;
            }
        }
    }
}

/// Block permutation `P = diag(P_x, P_y)` acting on columns:
/// `(Z P)[:, j] = Z[:, perm[j]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPerm {
    pub perm: Vec<usize>,
}

impl BlockPerm {
    pub fn identity(dim: usize) -> Self {
        Self { perm: (0..dim).collect() }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, d: usize, k: usize) -> Self {
        let px = rng::permutation(rng, d);
        let py = rng::permutation(rng, k);
        Self { perm: px.into_iter().chain(py.into_iter().map(|j| d + j)).collect() }
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (j, &p) in self.perm.iter().enumerate() {
            inv[p] = j;
        }
        inv
    }

    /// `P M P^T`, i.e. `out[a][b] = M[q[a]][q[b]]` with `q = perm^{-1}`.
    pub fn conjugate(&self, m: &Mat) -> Mat {
        let q = self.inverse();
        Mat::from_fn(m.rows(), m.cols(), |a, b| m[(q[a], q[b])])
    }

    /// Adjoint of [`BlockPerm::conjugate`]: `P^T G P`.
    pub fn conjugate_adjoint(&self, g: &Mat) -> Mat {
        let p = &self.perm;
        Mat::from_fn(g.rows(), g.cols(), |i, j| g[(p[i], p[j])])
    }

    /// `Z P`.
    pub fn apply_cols(&self, z: &Mat) -> Mat {
        Mat::from_fn(z.rows(), z.cols(), |i, j| z[(i, self.perm[j])])
    }
}

/// `(n+1) x (d+K)` encoding: context rows `[x_i y_i]`, then `[x_test 0]`.
pub fn encode(prompt: &Prompt) -> Mat {
    let (n, d, k) = (prompt.n(), prompt.d(), prompt.k());
    let mut z = Mat::zeros(n + 1, d + k);
    for i in 0..n {
        let row = z.row_mut(i);
        row[..d].copy_from_slice(prompt.x.row(i));
        row[d..].copy_from_slice(prompt.y.row(i));
    }
    z.row_mut(n)[..d].copy_from_slice(&prompt.x_test);
    z
}

/// Masked attention `(n+1) x n` for scores `Z M Z_c^T`.
pub fn masked_attention(z: &Mat, m: &Mat) -> Mat {
    let n = z.rows() - 1;
    let zc = z.slice_rows(0, n);
    let q = z.matmul(m);
    let s = q.matmul_t(&zc);
    let mut a = Mat::zeros(n + 1, n);
    for i in 0..=n {
        if n > 0 {
            softmax_into(s.row(i), a.row_mut(i));
        }
    }
    a
}

/// One residual layer given its products; returns the next state and the attention.
pub fn layer_forward(z: &Mat, m: &Mat, nv: &Mat) -> (Mat, Mat) {
    let n = z.rows() - 1;
    let a = masked_attention(z, m);
    let h = z.slice_rows(0, n).matmul(nv);
    let mut next = z.clone();
    next.add_scaled(&a.matmul(&h), 1.0);
    (next, a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    /// `L + 1` states, `states[0]` the encoding.
    pub states: Vec<Mat>,
    pub attention: Vec<Mat>,
}

impl ForwardOutput {
    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }
}

/// Forward pass. With `permute = Some(seed)` every layer is sandwiched by a
/// fresh block permutation: `Z += Attn(Z P) P^T`.
pub fn forward(prompt: &Prompt, weights: &TransformerWeights, permute: Option<u64>) -> Result<ForwardOutput> {
    weights.validate()?;
    prompt.validate()?;
    if prompt.d() != weights.d || prompt.k() != weights.k {
        return Err(Error::arg(format!(
            "prompt has d={}, K={} but weights expect d={}, K={}",
            prompt.d(),
            prompt.k(),
            weights.d,
            weights.k
        )));
    }
    let mut z = encode(prompt);
    let mut states = Vec::with_capacity(weights.layers.len() + 1);
    let mut attention = Vec::with_capacity(weights.layers.len());
    states.push(z.clone());
    for (l, layer) in weights.layers.iter().enumerate() {
        let (mut m, mut nv) = layer.products();
        if let Some(seed) = permute {
            let mut r = rng::rng(rng::derive_indexed(seed, stream::PERMUTATION, l as u64));
            let p = BlockPerm::sample(&mut r, weights.d, weights.k);
            m = p.conjugate(&m);
            nv = p.conjugate(&nv);
        }
        let (next, a) = layer_forward(&z, &m, &nv);
        if !next.is_finite() {
            return Err(Error::numeric("transformer", l + 1, "non-finite activation"));
        }
        z = next;
        states.push(z.clone());
        attention.push(a);
    }
    let n = prompt.n();
    let logits = z.row(n)[weights.d..].to_vec();
    Ok(ForwardOutput { logits, states, attention })
}

/// Fraction of prompts whose query is classified correctly.
pub fn accuracy(weights: &TransformerWeights, prompts: &[Prompt]) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::arg("accuracy needs at least one prompt"));
    }
    let mut correct = 0usize;
    for p in prompts {
        correct += usize::from(forward(p, weights, None)?.predicted() == p.c_test);
    }
    Ok(correct as f64 / prompts.len() as f64)
}

/// `alpha * I_d` and `gamma * (I_K + delta * 11^T)` blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockParams {
    pub alpha: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl BlockParams {
    pub fn matrix(&self, d: usize, k: usize) -> Mat {
        let f = Mat::identity(d).scale(self.alpha);
        let l = Mat::from_fn(k, k, |i, j| self.gamma * (f64::from(u8::from(i == j)) + self.delta));
        Mat::block_diag(&f, &l)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbstractionForm {
    /// `delta = -1/K`.
    TwoParameter,
    ThreeParameter,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbstractLayer {
    pub qk: BlockParams,
    pub vp: BlockParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbstractedWeights {
    pub form: AbstractionForm,
    pub layers: Vec<AbstractLayer>,
}

impl AbstractedWeights {
    /// Abstraction reproducing a dynamics schedule: centered scores, and a
    /// value label block that is centered or identity per `centering`.
    pub fn from_dynamics(params: &DynamicsParams, k: usize) -> Self {
        let c = -1.0 / k as f64;
        let dv = match params.centering {
            Centering::Centered => c,
            Centering::Uncentered => 0.0,
        };
        let form = if dv == c { AbstractionForm::TwoParameter } else { AbstractionForm::ThreeParameter };
        let layers = params
            .schedule
            .iter()
            .map(|l| AbstractLayer {
                qk: BlockParams { alpha: l.alpha, gamma: l.gamma, delta: c },
                vp: BlockParams { alpha: l.alpha_prime, gamma: l.gamma_prime, delta: dv },
            })
            .collect();
        Self { form, layers }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            for b in [l.qk, l.vp] {
                if ![b.alpha, b.gamma, b.delta].iter().all(|v| v.is_finite()) {
                    return Err(Error::arg(format!("abstraction layer {i} has non-finite scalars")));
                }
                if self.form == AbstractionForm::TwoParameter && (b.delta + 1.0 / k as f64).abs() > 1e-12 {
                    return Err(Error::arg("two-parameter form requires delta = -1/K"));
                }
            }
        }
        Ok(())
    }
}

/// `W_Q = sqrt(D) * blockdiag(alpha I, gamma (I + delta 11^T))`, `W_K = I`,
/// `W_V = blockdiag(alpha' I, gamma' (I + delta' 11^T))`, `W_P = I`.
pub fn embed_abstraction(abstracted: &AbstractedWeights, d: usize, k: usize) -> TransformerWeights {
    let dim = d + k;
    let s = (dim as f64).sqrt();
    let layers = abstracted
        .layers
        .iter()
        .map(|l| LayerWeights {
            wq: l.qk.matrix(d, k).scale(s),
            wk: Mat::identity(dim),
            wv: l.vp.matrix(d, k),
            wp: Mat::identity(dim),
        })
        .collect();
    TransformerWeights { d, k, layers }
}

/// Least-squares fit of one product matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockFit {
    pub params: BlockParams,
    pub residual_norm: f64,
    pub total_norm: f64,
}

impl BlockFit {
    /// `||R||_F^2 / ||W||_F^2`, zero for an all-zero matrix.
    pub fn residual_fraction(&self) -> f64 {
        if self.total_norm == 0.0 {
            0.0
        } else {
            (self.residual_norm / self.total_norm).powi(2)
        }
    }
}

pub fn fit_block(w: &Mat, d: usize, k: usize, form: AbstractionForm) -> BlockFit {
    let mean = |vals: &mut dyn Iterator<Item = f64>| {
        let (s, c) = vals.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
        if c == 0 {
            0.0
        } else {
            s / c as f64
        }
    };
    let alpha = mean(&mut (0..d).map(|i| w[(i, i)]));
    let params = match form {
        AbstractionForm::ThreeParameter => {
            let b = mean(&mut (d..d + k).map(|i| w[(i, i)]));
            let c = mean(&mut (d..d + k).flat_map(|i| (d..d + k).filter(move |&j| j != i).map(move |j| (i, j))).map(|ij| w[ij]));
            let gamma = b - c;
            let scale = b.abs().max(c.abs());
            let delta = if gamma.abs() <= 1e-14 * scale || gamma == 0.0 { 0.0 } else { c / gamma };
            BlockParams { alpha, gamma, delta }
        }
        AbstractionForm::TwoParameter => {
            let kf = k as f64;
            let mut inner = 0.0;
            for i in 0..k {
                for j in 0..k {
                    let cij = f64::from(u8::from(i == j)) - 1.0 / kf;
                    inner += w[(d + i, d + j)] * cij;
                }
            }
            BlockParams { alpha, gamma: inner / (kf - 1.0), delta: -1.0 / kf }
        }
    };
    let residual = w.sub(&params.matrix(d, k));
    BlockFit { params, residual_norm: residual.frobenius(), total_norm: w.frobenius() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFit {
    pub qk: BlockFit,
    pub vp: BlockFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub layers: Vec<LayerFit>,
    /// `sum ||R||^2 / sum ||W||^2` over every product matrix.
    pub residual_fraction: f64,
}

impl ProjectionReport {
    pub fn deltas(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| [l.qk.params.delta, l.vp.params.delta]).collect()
    }
}

pub fn project_weights(weights: &TransformerWeights, form: AbstractionForm) -> (AbstractedWeights, ProjectionReport) {
    let (d, k) = (weights.d, weights.k);
    let mut layers = Vec::with_capacity(weights.layers.len());
    let mut fits = Vec::with_capacity(weights.layers.len());
    let (mut res, mut tot) = (0.0, 0.0);
    for layer in &weights.layers {
        let (m, nv) = layer.products();
        let qk = fit_block(&m, d, k, form);
        let vp = fit_block(&nv, d, k, form);
        for f in [&qk, &vp] {
            res += f.residual_norm.powi(2);
            tot += f.total_norm.powi(2);
        }
        layers.push(AbstractLayer { qk: qk.params, vp: vp.params });
        fits.push(LayerFit { qk, vp });
    }
    let residual_fraction = if tot == 0.0 { 0.0 } else { res / tot };
    (AbstractedWeights { form, layers }, ProjectionReport { layers: fits, residual_fraction })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub accuracy_original: f64,
    pub accuracy_clustered: f64,
}

impl ClusterReport {
    pub fn accuracy_drop(&self) -> f64 {
        self.accuracy_original - self.accuracy_clustered
    }
}

/// 1-D k-means with k-means++ seeding; returns the value assigned to each
/// input. Lowest within-cluster sum of squares over `restarts` wins.
pub fn kmeans_1d(values: &[f64], k: usize, seed: u64, restarts: usize, iters: usize) -> Vec<f64> {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if k >= distinct.len() {
        return values.to_vec();
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for restart in 0..restarts.max(1) {
        let mut r = rng::rng(rng::derive_indexed(seed, stream::INIT, restart as u64));
        let mut centers = vec![distinct[r.random_range(0..distinct.len())]];
        while centers.len() < k {
            let d2: Vec<f64> = distinct
                .iter()
                .map(|v| centers.iter().map(|c| (v - c).powi(2)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d2.iter().sum();
            if total == 0.0 {
                break;
            }
            let mut u = r.random::<f64>() * total;
            let mut pick = distinct.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            centers.push(distinct[pick]);
        }
        let mut assign = vec![0usize; values.len()];
        for _ in 0..iters {
            let mut changed = false;
            for (a, v) in assign.iter_mut().zip(values) {
                let c = nearest(&centers, *v);
                changed |= c != *a;
                *a = c;
            }
            let mut sums = vec![(0.0, 0usize); centers.len()];
            for (a, v) in assign.iter().zip(values) {
                sums[*a].0 += v;
                sums[*a].1 += 1;
            }
            for (c, (s, m)) in centers.iter_mut().zip(&sums) {
                if *m > 0 {
                    *c = s / *m as f64;
                }
            }
            if !changed {
                break;
            }
        }
        for (a, v) in assign.iter_mut().zip(values) {
            *a = nearest(&centers, *v);
        }
        let mut sums = vec![(0.0, 0usize); centers.len()];
        for (a, v) in assign.iter().zip(values) {
            sums[*a].0 += v;
            sums[*a].1 += 1;
        }
        let means: Vec<f64> = sums.iter().zip(&centers).map(|((s, m), c)| if *m > 0 { s / *m as f64 } else { *c }).collect();
        let out: Vec<f64> = assign.iter().map(|&a| means[a]).collect();
        let sse: f64 = out.iter().zip(values).map(|(a, b)| (a - b).powi(2)).sum();
        if best.as_ref().is_none_or(|(s, _)| sse < *s) {
            best = Some((sse, out));
        }
    }
    best.unwrap().1
}

fn nearest(centers: &[f64], v: f64) -> usize {
    let mut best = 0;
    for (i, c) in centers.iter().enumerate() {
        if (v - c).abs() < (v - centers[best]).abs() {
            best = i;
        }
    }
    best
}

/// Clusters the entries of each product matrix `W_QK`, `W_VP` into `k`
/// values and re-embeds them with `W_K = W_P = I`.
pub fn cluster_weights(
    weights: &TransformerWeights,
    k: usize,
    heldout: &[Prompt],
    seed: u64,
) -> Result<(TransformerWeights, ClusterReport)> {
    if k < 1 {
        return Err(Error::arg("cluster count must be >= 1"));
    }
    weights.validate()?;
    let dim = weights.dim();
    let s = (dim as f64).sqrt();
    let mut out = weights.clone();
    for (l, layer) in weights.layers.iter().enumerate() {
        let (m, nv) = layer.products();
        let seed_l = rng::derive_indexed(seed, stream::INIT, l as u64);
        let mc = Mat::from_vec(dim, dim, kmeans_1d(m.as_slice(), k, seed_l, 10, 100));
        let nc = Mat::from_vec(dim, dim, kmeans_1d(nv.as_slice(), k, seed_l ^ 1, 10, 100));
        out.layers[l] = LayerWeights { wq: mc.scale(s), wk: Mat::identity(dim), wv: nc, wp: Mat::identity(dim) };
    }
    let report = if heldout.is_empty() {
        ClusterReport { k, accuracy_original: f64::NAN, accuracy_clustered: f64::NAN }
    } else {
        ClusterReport { k, accuracy_original: accuracy(weights, heldout)?, accuracy_clustered: accuracy(&out, heldout)? }
    };
    Ok((out, report))
}

pub const WEIGHTS_FORMAT: &str = "icl-meanshift/weights";
const BINARY_MAGIC: &[u8; 8] = b"ICLMSW01";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsFile {
    format: String,
    version: u32,
    d: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "L")]
    l: usize,
    layers: Vec<LayerWeights>,
}

impl TransformerWeights {
    pub fn to_json(&self) -> Result<String> {
        let file = WeightsFile {
            format: WEIGHTS_FORMAT.into(),
            version: 1,
            d: self.d,
            k: self.k,
            l: self.layers.len(),
            layers: self.layers.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: WeightsFile = serde_json::from_str(text)?;
        if f.format != WEIGHTS_FORMAT {
            return Err(Error::Parse(format!("unknown weights format {:?}", f.format)));
        }
        if f.layers.len() != f.l {
            return Err(Error::Parse(format!("header says L={} but {} layers present", f.l, f.layers.len())));
        }
        let w = Self { d: f.d, k: f.k, layers: f.layers };
        w.validate().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(w)
    }

    /// Binary layout: 8-byte magic `ICLMSW01`, then `d`, `K`, `L` as
    /// little-endian `u64`, then for each layer `W_Q, W_K, W_V, W_P`
    /// row-major as little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.num_params() * 8);
        out.extend_from_slice(BINARY_MAGIC);
        for v in [self.d, self.k, self.layers.len()] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for v in self.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 || &bytes[..8] != BINARY_MAGIC {
            return Err(Error::Parse("not an icl-meanshift binary checkpoint".into()));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize;
        let (d, k, l) = (word(0), word(1), word(2));
        let mut w = Self::zeros(d, k, l);
        let count = w.num_params();
        if bytes.len() != 32 + count * 8 {
            return Err(Error::Parse(format!("expected {} payload bytes, found {}", count * 8, bytes.len() - 32)));
        }
        let flat: Vec<f64> =
            bytes[32..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        w.unflatten_into(&flat);
        w.validate().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{self, LayerParams};
    use crate::task_gen::sample_linear_task;

    fn random_weights(d: usize, k: usize, l: usize, seed: u64) -> TransformerWeights {
        let mut r = rng::rng(seed);
        let mut w = TransformerWeights::zeros(d, k, l);
        let flat: Vec<f64> = (0..w.num_params()).map(|_| r.random_range(-0.5..0.5)).collect();
        w.unflatten_into(&flat);
        w
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let (_, p) = sample_linear_task(3, 3, 5, 1).unwrap();
        let out = forward(&p, &TransformerWeights::zeros(3, 3, 2), None).unwrap();
        assert_eq!(out.logits, vec![0.0; 3]);
    }

    #[test]
    fn embedding_matches_dynamics() {
        let (_, p) = sample_linear_task(4, 3, 10, 2).unwrap();
        let params = DynamicsParams::new(vec![LayerParams::new(1.0, 5.0, 0.1, 0.3), LayerParams::new(0.5, 2.0, -0.2, 0.7)]);
        let w = embed_abstraction(&AbstractedWeights::from_dynamics(&params, 3), 4, 3);
        let out = forward(&p, &w, None).unwrap();
        let (_, logits) = dynamics::predict_prompt(&p, &params).unwrap();
        for (a, b) in out.logits.iter().zip(&logits) {
            assert!((a - b).abs() < 1e-12);
        }
        let unc = params.clone().with_centering(Centering::Uncentered);
        let w = embed_abstraction(&AbstractedWeights::from_dynamics(&unc, 3), 4, 3);
        let (_, logits) = dynamics::predict_prompt(&p, &unc).unwrap();
        for (a, b) in forward(&p, &w, None).unwrap().logits.iter().zip(&logits) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_label_block_is_scaled_projector() {
        let a = AbstractedWeights {
            form: AbstractionForm::TwoParameter,
            layers: vec![AbstractLayer {
                qk: BlockParams { alpha: 1.0, gamma: 5.0, delta: -1.0 / 3.0 },
                vp: BlockParams { alpha: 0.0, gamma: 0.0, delta: -1.0 / 3.0 },
            }],
        };
        let w = embed_abstraction(&a, 2, 3);
        let (m, _) = w.layers[0].products();
        for i in 0..3 {
            for j in 0..3 {
                let want = 5.0 * (f64::from(u8::from(i == j)) - 1.0 / 3.0);
                assert!((m[(2 + i, 2 + j)] - want).abs() < 1e-12);
            }
        }
        assert!((m[(0, 0)] - 1.0).abs() < 1e-12 && m[(0, 1)] == 0.0 && m[(0, 2)] == 0.0);
    }

    #[test]
    fn mask_hides_query() {
        let (_, p) = sample_linear_task(3, 2, 6, 3).unwrap();
        let w = random_weights(3, 2, 2, 4);
        let out = forward(&p, &w, None).unwrap();
        let mut q = p.clone();
        q.x_test = vec![5.0, -3.0, 2.0];
        let out2 = forward(&q, &w, None).unwrap();
        for (s1, s2) in out.states.iter().zip(&out2.states) {
            assert!(s1.slice_rows(0, 6).max_abs_diff(&s2.slice_rows(0, 6)) < 1e-12);
        }
        for a in &out.attention {
            assert_eq!(a.cols(), 6);
        }
    }

    #[test]
    fn projection_round_trip_and_noise() {
        let a = AbstractedWeights {
            form: AbstractionForm::ThreeParameter,
            layers: vec![AbstractLayer {
                qk: BlockParams { alpha: 0.7, gamma: 2.0, delta: -0.2 },
                vp: BlockParams { alpha: 0.1, gamma: 0.4, delta: 0.3 },
            }],
        };
        let w = embed_abstraction(&a, 3, 3);
        let (fit, rep) = project_weights(&w, AbstractionForm::ThreeParameter);
        assert!(rep.residual_fraction < 1e-24);
        for (x, y) in [(fit.layers[0].qk, a.layers[0].qk), (fit.layers[0].vp, a.layers[0].vp)] {
            assert!((x.alpha - y.alpha).abs() < 1e-12);
            assert!((x.gamma - y.gamma).abs() < 1e-12);
            assert!((x.delta - y.delta).abs() < 1e-12);
        }
        let mut noisy = w.clone();
        let mut r = rng::rng(3);
        for m in noisy.layers[0].matrices_mut().into_iter().step_by(2) {
            for v in m.as_mut_slice() {
                *v += 1e-3 * (r.random::<f64>() - 0.5) / 3.0;
            }
        }
        let (fit, _) = project_weights(&noisy, AbstractionForm::ThreeParameter);
        assert!((fit.layers[0].qk.alpha - 0.7).abs() < 1e-2);
        assert!((fit.layers[0].qk.gamma - 2.0).abs() < 1e-2);
        assert!((fit.layers[0].qk.delta + 0.2).abs() < 1e-2);
    }

    #[test]
    fn kmeans_recovers_four_regions() {
        let a = AbstractedWeights {
            form: AbstractionForm::ThreeParameter,
            layers: vec![AbstractLayer {
                qk: BlockParams { alpha: 1.0, gamma: 3.0, delta: -0.5 },
                vp: BlockParams { alpha: 0.2, gamma: 0.6, delta: -0.25 },
            }],
        };
        let w = embed_abstraction(&a, 3, 3);
        let (c, rep) = cluster_weights(&w, 4, &[], 0).unwrap();
        assert!(rep.accuracy_original.is_nan());
        let (m0, n0) = w.layers[0].products();
        let (m1, n1) = c.layers[0].products();
        assert!(m0.max_abs_diff(&m1) < 1e-12 && n0.max_abs_diff(&n1) < 1e-12);
        let vals = [1.0, 1.0, 5.0, 5.0, 5.0, 9.0, -2.0];
        assert_eq!(kmeans_1d(&vals, 7, 0, 10, 100), vals.to_vec());
    }

    #[test]
    fn checkpoints_round_trip() {
        let w = random_weights(2, 3, 2, 5);
        assert_eq!(TransformerWeights::from_json(&w.to_json().unwrap()).unwrap(), w);
        let bytes = w.to_bytes();
        assert_eq!(bytes.len(), 32 + 2 * 4 * 25 * 8);
        assert_eq!(TransformerWeights::from_bytes(&bytes).unwrap(), w);
        assert!(TransformerWeights::from_bytes(&bytes[..40]).is_err());
    }

    #[test]
    fn permutation_conjugation_round_trips() {
        let mut r = rng::rng(1);
        let p = BlockPerm::sample(&mut r, 4, 3);
        let m = Mat::from_fn(7, 7, |i, j| (i * 7 + j) as f64);
        let c = p.conjugate(&m);
        assert_eq!(p.conjugate_adjoint(&c), m);
        let z = Mat::from_fn(3, 7, |i, j| (i * 10 + j) as f64);
        // (Z P) M' (Z P)^T with M' = P^T...: check Z P (P^T M P) P^T Z^T = Z M Z^T
        let zp = p.apply_cols(&z);
        let lhs = zp.matmul(&p.conjugate_adjoint(&m)).matmul_t(&zp);
        let rhs = z.matmul(&m).matmul_t(&z);
        assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }
}
