//! Cross-entropy training of the attention-only transformer with a
//! hand-written backward pass and Adam.
//!
//! For a layer with products `M = W_Q W_K^T / s`, `N = W_V W_P`, state `Z`,
//! context rows `Z_c`, attention `A = softmax(Z M Z_c^T)` and values
//! `H = Z_c N`, an upstream gradient `G` on `Z + A H` gives
//!
//! ```text
//! dA  = G H^T                  dH  = A^T G
//! dN += Z_c^T dH               dZ_c += dH N^T
//! dS  = A * (dA - rowdot(dA, A))
//! dM += Z^T dS Z_c             dZ  += dS Z_c M^T      dZ_c += dS^T Z M
//! dZ += G
//! ```
//!
//! and the weight gradients follow from `dW_Q = dM W_K / s`,
//! `dW_K = dM^T W_Q / s`, `dW_V = dN W_P^T`, `dW_P = W_V^T dN`. Under the
//! symmetrization sandwich the per-element products are `P M P^T` and
//! `P N P^T`, and their gradients are pulled back by `P^T (.) P`.

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, Mat};
use crate::par;
use crate::rng::{self, stream};
use crate::task_gen::{sample_linear_task, Prompt};
use crate::transformer::{self, encode, BlockPerm, LayerWeights, TransformerWeights};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub n: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub symmetrized: bool,
    pub seed: u64,
    /// Entries start in `[-init_scale/(d+K), init_scale/(d+K)]`.
    pub init_scale: f64,
    pub eval_every: usize,
    pub holdout_size: usize,
    /// `0` disables checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Reduced scale that trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            d: 5,
            k: 3,
            n: 24,
            layers: 3,
            batch_size: 512,
            steps: 3000,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            symmetrized: false,
            seed: 0,
            init_scale: 1.0,
            eval_every: 100,
            holdout_size: 2048,
            checkpoint_every: 0,
        }
    }

    /// Full-size configuration; runnable but far beyond a desk budget.
    pub fn full(layers: usize) -> Self {
        Self {
            d: 7,
            k: 3,
            n: 64,
            layers,
            batch_size: 8192,
            steps: 20_000,
            lr: 1e-3,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [("d", self.d), ("n", self.n), ("L", self.layers), ("batch_size", self.batch_size)];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.k < 2 {
            return Err(Error::Config("K must be >= 2".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be finite and >= 0".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.eps_adam > 0.0) {
            return Err(Error::Config("eps_adam must be > 0".into()));
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return Err(Error::Config("init_scale must be finite and >= 0".into()));
        }
        if self.eval_every == 0 || self.holdout_size == 0 {
            return Err(Error::Config("eval_every and holdout_size must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_weights(config: &TrainConfig) -> TransformerWeights {
    let dim = config.d + config.k;
    let bound = config.init_scale / dim as f64;
    let mut w = TransformerWeights::zeros(config.d, config.k, config.layers);
    if bound > 0.0 {
        let mut r = rng::rng(rng::derive(config.seed, stream::INIT));
        let flat: Vec<f64> = (0..w.num_params()).map(|_| r.random_range(-bound..=bound)).collect();
        w.unflatten_into(&flat);
    }
    w
}

/// One permutation per layer for one batch element.
pub fn sample_perms(seed: u64, element: u64, d: usize, k: usize, layers: usize) -> Vec<BlockPerm> {
    let mut r = rng::rng(rng::derive(seed, element));
    (0..layers).map(|_| BlockPerm::sample(&mut r, d, k)).collect()
}

struct Products {
    m: Vec<Mat>,
    n: Vec<Mat>,
}

fn products(weights: &TransformerWeights) -> Products {
    let (m, n) = weights.layers.iter().map(LayerWeights::products).unzip();
    Products { m, n }
}

/// Activations kept for the backward pass.
struct Cache {
    zs: Vec<Mat>,
    attn: Vec<Mat>,
    hs: Vec<Mat>,
}

fn forward_cache(z0: Mat, m: &[Mat], nv: &[Mat]) -> Cache {
    let layers = m.len();
    let n = z0.rows() - 1;
    let mut zs = Vec::with_capacity(layers + 1);
    let mut attn = Vec::with_capacity(layers);
    let mut hs = Vec::with_capacity(layers);
    zs.push(z0);
    for l in 0..layers {
        let z = &zs[l];
        let a = transformer::masked_attention(z, &m[l]);
        let h = z.slice_rows(0, n).matmul(&nv[l]);
        let mut next = z.clone();
        next.add_scaled(&a.matmul(&h), 1.0);
        zs.push(next);
        attn.push(a);
        hs.push(h);
    }
    Cache { zs, attn, hs }
}

/// Pulls the output gradient `g` back through every layer. Returns the
/// product gradients and the gradient on the encoded prompt.
fn backward(cache: &Cache, m: &[Mat], nv: &[Mat], mut g: Mat) -> (Vec<Mat>, Vec<Mat>, Mat) {
    let layers = m.len();
    let rows = g.rows();
    let n = rows - 1;
    let dim = g.cols();
    let mut dm: Vec<Mat> = vec![Mat::zeros(dim, dim); layers];
    let mut dnv: Vec<Mat> = vec![Mat::zeros(dim, dim); layers];
    for l in (0..layers).rev() {
        let z = &cache.zs[l];
        let zc = z.slice_rows(0, n);
        let a = &cache.attn[l];
        let h = &cache.hs[l];
        let da = g.matmul_t(h);
        let dh = a.t_matmul(&g);
        dnv[l] = zc.t_matmul(&dh);
        let mut dzc = dh.matmul_t(&nv[l]);
        let mut ds = Mat::zeros(rows, n);
        for i in 0..rows {
            let ar = a.row(i);
            let dr = da.row(i);
            let dot: f64 = ar.iter().zip(dr).map(|(x, y)| x * y).sum();
            for (o, (x, y)) in ds.row_mut(i).iter_mut().zip(ar.iter().zip(dr)) {
                *o = x * (y - dot);
            }
        }
        let ds_zc = ds.matmul(&zc);
        dm[l] = z.t_matmul(&ds_zc);
        // residual path plus the query-side score path
        let mut dz = g;
        dz.add_scaled(&ds_zc.matmul_t(&m[l]), 1.0);
        dzc.add_scaled(&ds.t_matmul(&z.matmul(&m[l])), 1.0);
        for i in 0..n {
            for (o, v) in dz.row_mut(i).iter_mut().zip(dzc.row(i)) {
                *o += v;
            }
        }
        g = dz;
    }
    (dm, dnv, g)
}

/// Loss and gradients with respect to the products for one prompt.
fn element_grad(z0: Mat, c_test: usize, d: usize, m: &[Mat], nv: &[Mat]) -> (f64, Vec<Mat>, Vec<Mat>) {
    let cache = forward_cache(z0, m, nv);
    let out = cache.zs.last().unwrap();
    let n = out.rows() - 1;
    let logits = &out.row(n)[d..];
    let lse = log_sum_exp(logits);
    let loss = lse - logits[c_test];
    let mut g = Mat::zeros(out.rows(), out.cols());
    for (j, v) in logits.iter().enumerate() {
        g[(n, d + j)] = (v - lse).exp() - f64::from(u8::from(j == c_test));
    }
    let (dm, dnv, _) = backward(&cache, m, nv, g);
    (loss, dm, dnv)
}

/// Logits and, for each class `c`, the gradient of logit `c` with respect to
/// the encoded prompt (`(n+1) x (d+K)`), without any sandwich.
pub fn logit_input_gradients(weights: &TransformerWeights, prompt: &Prompt) -> Result<(Vec<f64>, Vec<Mat>)> {
    weights.validate()?;
    prompt.validate()?;
    if prompt.d() != weights.d || prompt.k() != weights.k {
        return Err(Error::arg("prompt dimensions do not match weights"));
    }
    let prod = products(weights);
    let cache = forward_cache(encode(prompt), &prod.m, &prod.n);
    let out = cache.zs.last().unwrap();
    let n = out.rows() - 1;
    let d = weights.d;
    let logits = out.row(n)[d..].to_vec();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("transformer", weights.layers.len(), "non-finite logits"));
    }
    let grads = (0..weights.k)
        .map(|c| {
            let mut g = Mat::zeros(out.rows(), out.cols());
            g[(n, d + c)] = 1.0;
            backward(&cache, &prod.m, &prod.n, g).2
        })
        .collect();
    Ok((logits, grads))
}

fn weight_grads(weights: &TransformerWeights, dm: &[Mat], dnv: &[Mat]) -> TransformerWeights {
    let s = (weights.dim() as f64).sqrt();
    let layers = weights
        .layers
        .iter()
        .zip(dm.iter().zip(dnv))
        .map(|(w, (dm, dn))| LayerWeights {
            wq: dm.matmul(&w.wk).scale(1.0 / s),
            wk: dm.t_matmul(&w.wq).scale(1.0 / s),
            wv: dn.matmul_t(&w.wp),
            wp: w.wv.t_matmul(dn),
        })
        .collect();
    TransformerWeights { d: weights.d, k: weights.k, layers }
}

/// Mean cross-entropy and its gradient. `perms[b][l]` sandwiches layer `l`
/// of batch element `b`; `None` runs unconstrained.
pub fn loss_and_grad_with(
    weights: &TransformerWeights,
    prompts: &[Prompt],
    perms: Option<&[Vec<BlockPerm>]>,
) -> Result<(f64, TransformerWeights)> {
    if prompts.is_empty() {
        return Err(Error::arg("loss_and_grad needs a nonempty batch"));
    }
    weights.validate()?;
    let dim = weights.dim();
    let layers = weights.layers.len();
    if let Some(p) = perms {
        if p.len() != prompts.len() || p.iter().any(|v| v.len() != layers) {
            return Err(Error::arg("one permutation per layer per batch element required"));
        }
    }
    for p in prompts {
        if p.d() != weights.d || p.k() != weights.k {
            return Err(Error::arg("prompt dimensions do not match weights"));
        }
    }
    let prod = products(weights);
    let results = par::map(prompts.len(), |b| {
        let p = &prompts[b];
        match perms {
            None => element_grad(encode(p), p.c_test, weights.d, &prod.m, &prod.n),
            Some(all) => {
                let ps = &all[b];
                let m: Vec<Mat> = ps.iter().zip(&prod.m).map(|(q, m)| q.conjugate(m)).collect();
                let nv: Vec<Mat> = ps.iter().zip(&prod.n).map(|(q, n)| q.conjugate(n)).collect();
                let (loss, dm, dn) = element_grad(encode(p), p.c_test, weights.d, &m, &nv);
                let dm = ps.iter().zip(&dm).map(|(q, g)| q.conjugate_adjoint(g)).collect();
                let dn = ps.iter().zip(&dn).map(|(q, g)| q.conjugate_adjoint(g)).collect();
                (loss, dm, dn)
            }
        }
    });
    let scale = 1.0 / prompts.len() as f64;
    let mut loss = 0.0;
    let mut dm = vec![Mat::zeros(dim, dim); layers];
    let mut dn = vec![Mat::zeros(dim, dim); layers];
    for (b, (l, gm, gn)) in results.into_iter().enumerate() {
        if !l.is_finite() {
            return Err(Error::numeric("training", b, format!("non-finite loss for batch element {b}")));
        }
        loss += l * scale;
        for i in 0..layers {
            dm[i].add_scaled(&gm[i], scale);
            dn[i].add_scaled(&gn[i], scale);
        }
    }
    Ok((loss, weight_grads(weights, &dm, &dn)))
}

/// Loss and gradient; in symmetrized mode the permutations come from `seed`.
pub fn loss_and_grad(
    weights: &TransformerWeights,
    prompts: &[Prompt],
    symmetrized: bool,
    seed: u64,
) -> Result<(f64, TransformerWeights)> {
    if symmetrized {
        let perms: Vec<Vec<BlockPerm>> = (0..prompts.len())
            .map(|b| sample_perms(seed, b as u64, weights.d, weights.k, weights.layers.len()))
            .collect();
        loss_and_grad_with(weights, prompts, Some(&perms))
    } else {
        loss_and_grad_with(weights, prompts, None)
    }
}

/// Mean cross-entropy without gradients.
pub fn loss(weights: &TransformerWeights, prompts: &[Prompt]) -> Result<f64> {
    let mut total = 0.0;
    for p in prompts {
        let out = transformer::forward(p, weights, None)?;
        total += log_sum_exp(&out.logits) - out.logits[p.c_test];
    }
    Ok(total / prompts.len() as f64)
}

#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let update = lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            if update != 0.0 {
                *p -= update;
            }
        }
    }
}

/// Fresh linear-classification prompts for one optimizer step.
pub fn training_batch(config: &TrainConfig, step: usize) -> Result<Vec<Prompt>> {
    let base = rng::derive_indexed(config.seed, stream::DATA, step as u64);
    (0..config.batch_size)
        .map(|b| sample_linear_task(config.d, config.k, config.n, rng::derive(base, b as u64)).map(|(_, p)| p))
        .collect()
}

/// Fixed evaluation prompts, disjoint from the training stream.
pub fn holdout_set(config: &TrainConfig) -> Result<Vec<Prompt>> {
    let base = rng::derive(config.seed, stream::HOLDOUT);
    (0..config.holdout_size)
        .map(|i| sample_linear_task(config.d, config.k, config.n, rng::derive(base, i as u64)).map(|(_, p)| p))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub holdout_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub weights: TransformerWeights,
    pub metrics: Vec<MetricRow>,
}

impl TrainOutput {
    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.holdout_accuracy)
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("step,loss,holdout_accuracy\n");
        for m in &self.metrics {
            s.push_str(&format!("{},{},{}\n", m.step, m.loss, m.holdout_accuracy));
        }
        s
    }
}

/// How permutations are drawn during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sandwich {
    Off,
    Random,
    /// Runs the symmetrized code path with every `P = I`.
    Identity,
}

pub fn train(config: &TrainConfig) -> Result<TrainOutput> {
    let sandwich = if config.symmetrized { Sandwich::Random } else { Sandwich::Off };
    train_with(config, sandwich, |_, _| Ok(()))
}

/// Trains with an explicit sandwich source and a checkpoint callback that
/// fires every `checkpoint_every` steps.
pub fn train_with(
    config: &TrainConfig,
    sandwich: Sandwich,
    mut checkpoint: impl FnMut(usize, &TransformerWeights) -> Result<()>,
) -> Result<TrainOutput> {
    config.validate()?;
    let mut weights = init_weights(config);
    let holdout = holdout_set(config)?;
    let mut flat = weights.flatten();
    let mut adam = Adam::new(flat.len(), config.beta1, config.beta2, config.eps_adam);
    let mut metrics = Vec::new();
    let dim = config.d + config.k;
    for step in 0..config.steps {
        let batch = training_batch(config, step)?;
        let perm_seed = rng::derive_indexed(config.seed, stream::PERMUTATION, step as u64);
        let perms: Option<Vec<Vec<BlockPerm>>> = match sandwich {
            Sandwich::Off => None,
            Sandwich::Random => Some(
                (0..batch.len()).map(|b| sample_perms(perm_seed, b as u64, config.d, config.k, config.layers)).collect(),
            ),
            Sandwich::Identity => Some(vec![vec![BlockPerm::identity(dim); config.layers]; batch.len()]),
        };
        let (loss, grad) = loss_and_grad_with(&weights, &batch, perms.as_deref()).map_err(|e| match e {
            Error::Numeric { detail, .. } => Error::numeric("training", step, detail),
            other => other,
        })?;
        adam.step(&mut flat, &grad.flatten(), config.lr);
        weights.unflatten_into(&flat);
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("training", step, "weights became non-finite"));
        }
        let done = step + 1;
        if done % config.eval_every == 0 || done == config.steps {
            let acc = transformer::accuracy(&weights, &holdout)?;
            metrics.push(MetricRow { step: done, loss, holdout_accuracy: acc });
        }
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
            checkpoint(done, &weights)?;
        }
    }
    if config.steps == 0 {
        metrics.push(MetricRow { step: 0, loss: loss(&weights, &holdout)?, holdout_accuracy: transformer::accuracy(&weights, &holdout)? });
    }
    Ok(TrainOutput { weights, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        TrainConfig { d: 2, k: 2, n: 3, layers: 1, batch_size: 4, steps: 3, eval_every: 1, holdout_size: 8, ..TrainConfig::desk() }
    }

    #[test]
    fn init_bounds_and_determinism() {
        let c = TrainConfig { d: 7, k: 3, ..TrainConfig::desk() };
        let w = init_weights(&c);
        assert!(w.flatten().iter().all(|v| v.abs() <= 0.1));
        assert!(w.flatten().iter().any(|v| v.abs() > 0.05));
        assert_eq!(w, init_weights(&c));
        let z = init_weights(&TrainConfig { init_scale: 0.0, ..c });
        assert!(z.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_logits_give_log_k() {
        let (_, p) = sample_linear_task(3, 4, 5, 1).unwrap();
        let (l, _) = loss_and_grad(&TransformerWeights::zeros(3, 4, 2), &[p], false, 0).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut a = Adam::new(3, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, -2.0, 3.0];
        for _ in 0..5 {
            a.step(&mut p, &[0.0; 3], 0.1);
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let c = TrainConfig { lr: 0.0, ..tiny_config() };
        let out = train(&c).unwrap();
        assert_eq!(out.weights, init_weights(&c));
        assert_eq!(out.metrics.len(), 3);
    }

    #[test]
    fn identity_sandwich_matches_unconstrained_bitwise() {
        let c = tiny_config();
        let a = train_with(&c, Sandwich::Off, |_, _| Ok(())).unwrap();
        let b = train_with(&c, Sandwich::Identity, |_, _| Ok(())).unwrap();
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn checkpoints_fire_on_schedule() {
        let c = TrainConfig { checkpoint_every: 2, steps: 5, ..tiny_config() };
        let mut seen = vec![];
        train_with(&c, Sandwich::Off, |s, _| {
            seen.push(s);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![2, 4]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        for l in [2, 4, 8] {
            assert!(TrainConfig::full(l).validate().is_ok());
        }
        assert!(TrainConfig { beta1: 1.0, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { k: 1, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..TrainConfig::desk() }.validate().is_err());
    }
}
