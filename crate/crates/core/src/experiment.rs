//! Config-driven experiments: task specifications, named presets, sweeps and
//! the artifact tree they write.

use crate::baselines::{self, BaselineKind, Hyper};
use crate::dynamics::{self, Centering, DynamicsParams, LayerParams, Mode, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::par;
use crate::plot::{self, Marker, Point, Series};
use crate::rng::{self, stream};
use crate::task_gen::{
    apply_label_noise, make_semisupervised, replace_unlabeled_with_noise, sample_2d, sample_linear_task, sample_voronoi_task,
    Dataset2d, Prompt, SemiSupervisedOptions,
};
use crate::theory::{self, MarginReport};
use crate::transformer::{self, TransformerWeights};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

pub const MANIFEST_FORMAT: &str = "icl-meanshift/manifest";
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable naming the root under which default output directories are created.
pub const OUT_ENV: &str = "ICL_MEANSHIFT_OUT";

fn default_true() -> bool {
    true
}

fn default_gap() -> f64 {
    1.0
}

/// Distribution of prompts an experiment draws from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Linear {
        d: usize,
        #[serde(rename = "K")]
        k: usize,
        n: usize,
    },
    /// Gaussian sites and points; accuracy is also reported on tasks whose
    /// closest pair of sites is at least `min_gap` apart.
    Voronoi {
        d: usize,
        #[serde(rename = "K")]
        k: usize,
        n: usize,
        #[serde(default = "default_gap")]
        min_gap: f64,
    },
    Dataset2d {
        dataset: Dataset2d,
        n: usize,
    },
    /// A pool of `pool` unlabeled rows is drawn once per task and the first
    /// `n_unlabeled` are kept, so sweeping `n_unlabeled` nests the prompts.
    SemiSupervised {
        d: usize,
        #[serde(rename = "K")]
        k: usize,
        n_labeled: usize,
        n_unlabeled: usize,
        pool: usize,
        eta: f64,
        #[serde(default = "default_true")]
        shift_query: bool,
        /// Also evaluate every predictor with the unlabeled rows replaced by
        /// standard-normal noise.
        #[serde(default)]
        noise_ablation: bool,
    },
    /// Labels flipped with probability `p`; the clean prompt is evaluated too.
    LabelNoise {
        d: usize,
        #[serde(rename = "K")]
        k: usize,
        n: usize,
        p: f64,
    },
}

/// One sampled task with the geometry that generated it.
#[derive(Clone, Debug)]
pub struct TaskInstance {
    pub prompt: Prompt,
    /// Alternative views of the same task, evaluated with the same predictors.
    pub variants: Vec<(&'static str, Prompt)>,
    pub centroids: Option<Mat>,
    pub directions: Option<Mat>,
    /// Membership in the reported subset (Voronoi gap filter).
    pub in_subset: Option<bool>,
}

impl TaskInstance {
    fn plain(prompt: Prompt) -> Self {
        Self { prompt, variants: vec![], centroids: None, directions: None, in_subset: None }
    }
}

impl TaskSpec {
    pub fn d(&self) -> usize {
        match *self {
            TaskSpec::Linear { d, .. }
            | TaskSpec::Voronoi { d, .. }
            | TaskSpec::SemiSupervised { d, .. }
            | TaskSpec::LabelNoise { d, .. } => d,
            TaskSpec::Dataset2d { .. } => 2,
        }
    }

    pub fn k(&self) -> usize {
        match self {
            TaskSpec::Linear { k, .. }
            | TaskSpec::Voronoi { k, .. }
            | TaskSpec::SemiSupervised { k, .. }
            | TaskSpec::LabelNoise { k, .. } => *k,
            TaskSpec::Dataset2d { dataset, .. } => dataset.classes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d() == 0 || self.k() < 2 {
            return bad(format!("task needs d >= 1 and K >= 2, got d = {}, K = {}", self.d(), self.k()));
        }
        match *self {
            TaskSpec::Linear { n, .. } | TaskSpec::Voronoi { n, .. } | TaskSpec::Dataset2d { n, .. } | TaskSpec::LabelNoise { n, .. }
                if n == 0 =>
            {
                bad("task needs n >= 1".into())
            }
            TaskSpec::LabelNoise { p, .. } if !(0.0..=1.0).contains(&p) => bad(format!("label-noise p = {p} outside [0, 1]")),
            TaskSpec::SemiSupervised { n_labeled, n_unlabeled, pool, eta, .. } => {
                if n_unlabeled > pool {
                    bad(format!("n_unlabeled = {n_unlabeled} exceeds pool = {pool}"))
                } else if n_labeled + pool == 0 {
                    bad("semi-supervised task needs at least one context row".into())
                } else if !(eta >= 0.0) || !eta.is_finite() {
                    bad(format!("eta = {eta} must be finite and >= 0"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn sample(&self, seed: u64) -> Result<TaskInstance> {
        match self {
            &TaskSpec::Linear { d, k, n } => Ok(TaskInstance::plain(sample_linear_task(d, k, n, seed)?.1)),
            &TaskSpec::Voronoi { d, k, n, min_gap } => {
                let (t, p) = sample_voronoi_task(d, k, n, seed)?;
                let gap = t.min_centroid_gap();
                Ok(TaskInstance { in_subset: Some(gap >= min_gap), centroids: Some(t.centroids), ..TaskInstance::plain(p) })
            }
            TaskSpec::Dataset2d { dataset, n } => {
                let s = sample_2d(dataset, *n, seed)?;
                Ok(TaskInstance { centroids: s.centroids, directions: s.directions, ..TaskInstance::plain(s.prompt) })
            }
            &TaskSpec::SemiSupervised { d, k, n_labeled, n_unlabeled, pool, eta, shift_query, noise_ablation } => {
                let (t, p) = sample_linear_task(d, k, n_labeled + pool, rng::derive(seed, stream::DATA))?;
                let opts = SemiSupervisedOptions { eta, n_labeled, shift_query };
                let prompt = make_semisupervised(&p, &t, opts, rng::derive(seed, stream::LABELS))?.keep_unlabeled(n_unlabeled)?;
                let mut inst = TaskInstance { directions: Some(t.directions), ..TaskInstance::plain(prompt) };
                if noise_ablation {
                    inst.variants.push(("noise", replace_unlabeled_with_noise(&inst.prompt, rng::derive(seed, stream::NOISE))));
                }
                Ok(inst)
            }
            &TaskSpec::LabelNoise { d, k, n, p } => {
                let (t, clean) = sample_linear_task(d, k, n, rng::derive(seed, stream::DATA))?;
                let noisy = apply_label_noise(&clean, p, rng::derive(seed, stream::LABELS))?;
                Ok(TaskInstance { variants: vec![("clean", clean)], directions: Some(t.directions), ..TaskInstance::plain(noisy) })
            }
        }
    }
}

/// A full experiment description, loadable from TOML or JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub tasks: usize,
    pub task: TaskSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamics: Option<DynamicsParams>,
    /// Weight checkpoint (JSON) of a transformer to evaluate alongside.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transformer: Option<PathBuf>,
    #[serde(default)]
    pub baselines: Vec<BaselineKind>,
    #[serde(default)]
    pub hyper: Hyper,
    /// Nearest-centroid classifier with the true generating centroids.
    #[serde(default)]
    pub oracle: bool,
    /// Sweep axes; the cartesian product of their values is executed.
    #[serde(default)]
    pub sweep: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub emit_plots: bool,
}

/// Axes that change the prompt distribution; only these enter a cell's seed,
/// so cells that differ in model or view axes see the same prompts.
pub const DATA_AXES: [&str; 11] = ["d", "K", "n", "eta", "n_labeled", "pool", "p", "sigma", "radius", "separation", "bound"];
/// Axes that change the predictor or select a view of the same prompts.
pub const VIEW_AXES: [&str; 6] = ["alpha", "gamma", "alpha_prime", "gamma_prime", "layers", "n_unlabeled"];

fn as_count(axis: &str, v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e12 {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("axis {axis} needs a non-negative integer, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a TOML config, a JSON config, or the config embedded in a manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            if v.get("format").and_then(|f| f.as_str()) == Some(MANIFEST_FORMAT) {
                let m: Manifest = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
                m.config.validate()?;
                return Ok(m.config);
            }
            return Self::from_json(&text);
        }
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || self.name.starts_with('.')
        {
            return Err(Error::Config(format!("name {:?} must be a plain file name of [A-Za-z0-9._-]", self.name)));
        }
        if self.tasks == 0 {
            return Err(Error::Config("tasks must be >= 1".into()));
        }
        if self.dynamics.is_none() && self.transformer.is_none() && self.baselines.is_empty() && !self.oracle {
            return Err(Error::Config("no predictor: set dynamics, transformer, baselines or oracle".into()));
        }
        for (axis, values) in &self.sweep {
            if !DATA_AXES.contains(&axis.as_str()) && !VIEW_AXES.contains(&axis.as_str()) {
                return Err(Error::Config(format!("unknown sweep axis {axis:?}")));
            }
            if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("sweep axis {axis:?} needs finite values")));
            }
        }
        for cell in self.cells() {
            let c = self.for_cell(&cell)?;
            c.task.validate()?;
            if let Some(d) = &c.dynamics {
                d.validate().map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Canonical JSON, the input of the config hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        hex(&Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = vec![BTreeMap::new()];
        for (axis, values) in &self.sweep {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |&v| {
                        let mut c = c.clone();
                        c.insert(axis.clone(), v);
                        c
                    })
                })
                .collect();
        }
        let mut out: Vec<Cell> = cells.into_iter().map(|values| Cell::new(self.seed, values)).collect();
        // numeric order per axis; independent of how the axes were listed
        out.sort_by(|a, b| a.values.values().zip(b.values.values()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
        out.dedup_by(|a, b| a.key == b.key);
        out
    }

    /// This config with the cell's axis values substituted.
    pub fn for_cell(&self, cell: &Cell) -> Result<ExperimentConfig> {
        let mut c = self.clone();
        c.sweep.clear();
        for (axis, &v) in &cell.values {
            c.set_axis(axis, v)?;
        }
        Ok(c)
    }

    fn set_axis(&mut self, axis: &str, v: f64) -> Result<()> {
        let missing = || Error::Config(format!("axis {axis:?} does not apply to this experiment"));
        if let Some(i) = ["alpha", "gamma", "alpha_prime", "gamma_prime"].iter().position(|a| *a == axis) {
            let d = self.dynamics.as_mut().ok_or_else(missing)?;
            for l in &mut d.schedule {
                *[&mut l.alpha, &mut l.gamma, &mut l.alpha_prime, &mut l.gamma_prime][i] = v;
            }
            return Ok(());
        }
        if axis == "layers" {
            let d = self.dynamics.as_mut().ok_or_else(missing)?;
            let first = *d.schedule.first().ok_or_else(missing)?;
            if d.schedule.iter().any(|l| *l != first) {
                return Err(Error::Config("axis \"layers\" needs a constant schedule".into()));
            }
            d.schedule = vec![first; as_count(axis, v)?];
            return Ok(());
        }
        match (&mut self.task, axis) {
            (TaskSpec::Linear { d, .. } | TaskSpec::Voronoi { d, .. } | TaskSpec::SemiSupervised { d, .. } | TaskSpec::LabelNoise { d, .. }, "d") => {
                *d = as_count(axis, v)?
            }
            (TaskSpec::Linear { k, .. } | TaskSpec::Voronoi { k, .. } | TaskSpec::SemiSupervised { k, .. } | TaskSpec::LabelNoise { k, .. }, "K") => {
                *k = as_count(axis, v)?
            }
            (TaskSpec::Linear { n, .. } | TaskSpec::Voronoi { n, .. } | TaskSpec::Dataset2d { n, .. } | TaskSpec::LabelNoise { n, .. }, "n") => {
                *n = as_count(axis, v)?
            }
            (TaskSpec::LabelNoise { p, .. }, "p") => *p = v,
            (TaskSpec::SemiSupervised { eta, .. }, "eta") => *eta = v,
            (TaskSpec::SemiSupervised { n_labeled, .. }, "n_labeled") => *n_labeled = as_count(axis, v)?,
            (TaskSpec::SemiSupervised { n_unlabeled, .. }, "n_unlabeled") => *n_unlabeled = as_count(axis, v)?,
            (TaskSpec::SemiSupervised { pool, .. }, "pool") => *pool = as_count(axis, v)?,
            (TaskSpec::Dataset2d { dataset, .. }, _) => match (dataset, axis) {
                (
                    Dataset2d::Voronoi2d { classes, .. }
                    | Dataset2d::Circles { classes, .. }
                    | Dataset2d::Spirals { classes, .. }
                    | Dataset2d::Blobs { classes, .. },
                    "K",
                ) => *classes = as_count(axis, v)?,
                (
                    Dataset2d::Ellipses { sigma, .. }
                    | Dataset2d::Circles { sigma, .. }
                    | Dataset2d::Spirals { sigma, .. }
                    | Dataset2d::Blobs { sigma, .. },
                    "sigma",
                ) => *sigma = v,
                (Dataset2d::Blobs { radius, .. }, "radius") => *radius = v,
                (Dataset2d::Ellipses { separation, .. }, "separation") => *separation = v,
                (Dataset2d::Voronoi2d { bound, .. }, "bound") => *bound = v,
                _ => return Err(missing()),
            },
            _ => return Err(missing()),
        }
        Ok(())
    }

    /// Seed of task `i` in a config without sweep axes.
    pub fn task_seed(&self, i: usize) -> u64 {
        Cell::new(self.seed, BTreeMap::new()).task_seed(i)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One point of the sweep grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    /// `axis=value` pairs joined by `;`, axes in sorted order.
    pub key: String,
    pub values: BTreeMap<String, f64>,
    pub seed: u64,
}

impl Cell {
    fn new(master: u64, values: BTreeMap<String, f64>) -> Self {
        let join = |data_only: bool| {
            values
                .iter()
                .filter(|(a, _)| !data_only || DATA_AXES.contains(&a.as_str()))
                .map(|(a, v)| format!("{a}={v}"))
                .collect::<Vec<_>>()
                .join(";")
        };
        let seed = rng::derive_from_bytes(master, join(true).as_bytes());
        Self { key: join(false), values, seed }
    }

    pub fn task_seed(&self, i: usize) -> u64 {
        rng::derive_indexed(self.seed, stream::DATA, i as u64)
    }
}

/// Accuracy of every predictor on one cell, as fractions in `[0, 1]`.
///
/// Metric names are `predictor`, `predictor/variant` for alternative views
/// of the same tasks, and `predictor@subset` for the reported subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: String,
    pub values: BTreeMap<String, f64>,
    pub seed: u64,
    pub tasks: usize,
    pub subset_tasks: Option<usize>,
    pub metrics: BTreeMap<String, f64>,
    /// Predictor evaluations that failed numerically; counted as incorrect.
    pub failures: usize,
    pub error: Option<String>,
}

enum Pred<'a> {
    Dynamics(&'a DynamicsParams),
    Transformer(&'a TransformerWeights),
    Baseline(BaselineKind),
    Oracle,
}

impl Pred<'_> {
    fn name(&self) -> &'static str {
        match self {
            Pred::Dynamics(_) => "dynamics",
            Pred::Transformer(_) => "transformer",
            Pred::Baseline(k) => k.name(),
            Pred::Oracle => "oracle",
        }
    }

    /// `None` when the predictor does not apply to this task.
    fn correct(&self, prompt: &Prompt, inst: &TaskInstance, hyper: &Hyper) -> Option<Result<bool>> {
        let hit = |c: usize| c == prompt.c_test;
        Some(match self {
            Pred::Dynamics(p) => dynamics::predict_prompt(prompt, p).map(|r| hit(r.0)),
            Pred::Transformer(w) => transformer::forward(prompt, w, None).map(|o| hit(o.predicted())),
            Pred::Baseline(k) => baselines::query_correct(*k, prompt, hyper),
            Pred::Oracle => {
                let centroids = inst.centroids.clone()?;
                baselines::query_correct(BaselineKind::NearestCentroid, prompt, &Hyper { centroids: Some(centroids), ..hyper.clone() })
            }
        })
    }
}

fn evaluate_cell(config: &ExperimentConfig, cell: &Cell, weights: Option<&TransformerWeights>) -> Result<CellResult> {
    let c = config.for_cell(cell)?;
    let mut preds: Vec<Pred> = vec![];
    if let Some(d) = &c.dynamics {
        preds.push(Pred::Dynamics(d));
    }
    if let Some(w) = weights {
        preds.push(Pred::Transformer(w));
    }
    preds.extend(c.baselines.iter().map(|&k| Pred::Baseline(k)));
    if c.oracle {
        preds.push(Pred::Oracle);
    }
    // per task: (metric name, correct) pairs, failure count, subset flag
    type Row = (Vec<(String, bool)>, usize, Option<bool>);
    let rows: Vec<Result<Row>> = par::map(c.tasks, |i| {
        let inst = c.task.sample(cell.task_seed(i))?;
        let mut out = vec![];
        let mut failures = 0;
        let views = std::iter::once(("", &inst.prompt)).chain(inst.variants.iter().map(|(v, p)| (*v, p)));
        for (view, prompt) in views {
            for p in &preds {
                let Some(res) = p.correct(prompt, &inst, &c.hyper) else { continue };
                let ok = match res {
                    Ok(b) => b,
                    Err(Error::Numeric { .. }) => {
                        failures += 1;
                        false
                    }
                    Err(e) => return Err(e),
                };
                let base = if view.is_empty() { p.name().to_string() } else { format!("{}/{view}", p.name()) };
                if inst.in_subset == Some(true) {
                    out.push((format!("{base}@gap"), ok));
                }
                out.push((base, ok));
            }
        }
        Ok((out, failures, inst.in_subset))
    });
    let mut totals: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut failures = 0;
    let mut subset = None;
    for row in rows {
        let (hits, f, s) = row?;
        failures += f;
        if let Some(s) = s {
            *subset.get_or_insert(0) += usize::from(s);
        }
        for (name, ok) in hits {
            let t = totals.entry(name).or_default();
            t.0 += usize::from(ok);
            t.1 += 1;
        }
    }
    let metrics = totals.into_iter().map(|(k, (h, n))| (k, h as f64 / n as f64)).collect();
    Ok(CellResult {
        key: cell.key.clone(),
        values: cell.values.clone(),
        seed: cell.seed,
        tasks: c.tasks,
        subset_tasks: subset,
        metrics,
        failures,
        error: None,
    })
}

fn load_weights(config: &ExperimentConfig) -> Result<Option<TransformerWeights>> {
    let Some(path) = &config.transformer else { return Ok(None) };
    let w = TransformerWeights::from_json(&std::fs::read_to_string(path)?)?;
    if w.dim() != config.task.d() + config.task.k() {
        return Err(Error::Config(format!(
            "transformer width {} does not match task d + K = {}",
            w.dim(),
            config.task.d() + config.task.k()
        )));
    }
    Ok(Some(w))
}

/// Runs every cell. A cell that fails is recorded with its error and the
/// sweep continues.
pub fn sweep(config: &ExperimentConfig) -> Result<Vec<CellResult>> {
    config.validate()?;
    let weights = load_weights(config)?;
    Ok(config
        .cells()
        .iter()
        .map(|cell| {
            evaluate_cell(config, cell, weights.as_ref()).unwrap_or_else(|e| CellResult {
                key: cell.key.clone(),
                values: cell.values.clone(),
                seed: cell.seed,
                tasks: config.tasks,
                subset_tasks: None,
                metrics: BTreeMap::new(),
                failures: 0,
                error: Some(e.to_string()),
            })
        })
        .collect())
}

/// One row per cell: key, axis values, seed, counts, metrics, error.
pub fn results_csv(config: &ExperimentConfig, results: &[CellResult]) -> Result<String> {
    let metrics: BTreeSet<&String> = results.iter().flat_map(|r| r.metrics.keys()).collect();
    let mut w = csv::Writer::from_writer(vec![]);
    let mut head: Vec<String> = vec!["key".into()];
    head.extend(config.sweep.keys().cloned());
    head.extend(["seed", "tasks", "subset_tasks", "failures"].map(String::from));
    head.extend(metrics.iter().map(|m| m.to_string()));
    head.push("error".into());
    w.write_record(&head)?;
    for r in results {
        let mut row = vec![r.key.clone()];
        row.extend(config.sweep.keys().map(|a| r.values.get(a).map_or(String::new(), |v| v.to_string())));
        row.push(r.seed.to_string());
        row.push(r.tasks.to_string());
        row.push(r.subset_tasks.map_or(String::new(), |s| s.to_string()));
        row.push(r.failures.to_string());
        row.extend(metrics.iter().map(|m| r.metrics.get(*m).map_or(String::new(), |v| v.to_string())));
        row.push(r.error.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Parse(e.to_string()))?).map_err(|e| Error::Parse(e.to_string()))
}

/// Provenance record written next to every experiment's results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub code_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub threads: usize,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            code_version: CODE_VERSION.into(),
            config_sha256: config.sha256(),
            seed: config.seed,
            threads: par::threads(),
            config: config.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub config_sha256: String,
    pub cells: Vec<CellResult>,
}

impl Summary {
    /// Largest value of `metric` over the cells that report it.
    pub fn best(&self, metric: &str) -> Option<f64> {
        self.cells.iter().filter_map(|c| c.metrics.get(metric).copied()).reduce(f64::max)
    }

    /// The cell whose axis values equal `values` exactly.
    pub fn cell(&self, values: &[(&str, f64)]) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.values.len() == values.len() && values.iter().all(|(a, v)| c.values.get(*a) == Some(v)))
    }
}

/// A directory that experiment artifacts are confined to: every write goes
/// to a plain file name directly inside it.
#[derive(Clone, Debug)]
pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    /// `explicit` if given, else `$ICL_MEANSHIFT_OUT/name`, else `out/name`.
    pub fn default_for(explicit: Option<PathBuf>, name: &str) -> PathBuf {
        explicit.unwrap_or_else(|| std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("out"), PathBuf::from).join(name))
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let plain = !name.is_empty()
            && !name.starts_with('.')
            && name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
        if !plain {
            return Err(Error::arg(format!("artifact name {name:?} must be a plain file name")));
        }
        let path = self.root.join(name);
        std::fs::write(&path, contents)?;
        Ok(path)
    }
}

/// Runs a config and writes `manifest.json`, `results.csv`, `summary.json`
/// and, when `emit_plots` is set, `accuracy.svg`.
pub fn run_experiment(config: &ExperimentConfig, out: &OutputDir) -> Result<Summary> {
    let results = sweep(config)?;
    let summary = Summary { name: config.name.clone(), config_sha256: config.sha256(), cells: results };
    out.write("manifest.json", serde_json::to_string_pretty(&Manifest::new(config))?)?;
    out.write("results.csv", results_csv(config, &summary.cells)?)?;
    out.write("summary.json", serde_json::to_string_pretty(&summary)?)?;
    if config.emit_plots {
        if let Some(svg) = accuracy_plot(config, &summary) {
            out.write("accuracy.svg", svg)?;
        }
    }
    Ok(summary)
}

/// Accuracy against the first sweep axis, one line per metric; needs exactly one axis.
pub fn accuracy_plot(config: &ExperimentConfig, summary: &Summary) -> Option<String> {
    let axis = config.sweep.keys().next()?;
    if config.sweep.len() != 1 {
        return None;
    }
    let names: BTreeSet<&String> = summary.cells.iter().flat_map(|c| c.metrics.keys()).collect();
    let series: Vec<Series> = names
        .iter()
        .map(|m| Series {
            name: m.as_str(),
            points: summary.cells.iter().filter_map(|c| Some((*c.values.get(axis)?, *c.metrics.get(*m)?))).collect(),
        })
        .collect();
    Some(plot::line_chart(&config.name, axis, "accuracy", &series))
}

/// A single dynamics run on task `index` of a config, with its theory
/// instrumentation when the task carries class directions.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub prompt: Prompt,
    pub trajectory: Trajectory,
    pub report: MarginReport,
    pub predicted: usize,
}

pub fn simulate(config: &ExperimentConfig, index: usize) -> Result<Simulation> {
    config.validate()?;
    let params = config.dynamics.as_ref().ok_or_else(|| Error::Config("simulate needs a dynamics section".into()))?;
    let inst = config.task.sample(config.task_seed(index))?;
    let trajectory = dynamics::run(&inst.prompt, params)?;
    let report = theory::instrument_with(&trajectory, inst.prompt.c_test, inst.directions.as_ref())?;
    let predicted = dynamics::predict(&trajectory).0;
    Ok(Simulation { prompt: inst.prompt, trajectory, report, predicted })
}

impl Simulation {
    /// Per-class mean feature of the labeled context rows at every step.
    pub fn centroids(&self) -> Vec<Vec<Option<Vec<f64>>>> {
        let k = self.prompt.k();
        let classes = &self.trajectory.classes;
        self.trajectory
            .states
            .iter()
            .map(|s| {
                (0..k)
                    .map(|c| {
                        let rows: Vec<&[f64]> =
                            (0..classes.len()).filter(|&i| classes[i] == Some(c)).map(|i| s.x.row(i)).collect();
                        (!rows.is_empty()).then(|| {
                            (0..s.x.cols()).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
                        })
                    })
                    .collect()
            })
            .collect()
    }

    /// `step, class, x_0..` for every class centroid and the query (`class = query`).
    pub fn centroid_csv(&self) -> String {
        let d = self.prompt.d();
        let mut out = String::from("step,class");
        for j in 0..d {
            out.push_str(&format!(",x_{j}"));
        }
        out.push('\n');
        for (t, (cs, s)) in self.centroids().iter().zip(&self.trajectory.states).enumerate() {
            for (c, m) in cs.iter().enumerate() {
                if let Some(m) = m {
                    out.push_str(&format!("{t},{c}"));
                    m.iter().for_each(|v| out.push_str(&format!(",{v}")));
                    out.push('\n');
                }
            }
            out.push_str(&format!("{t},query"));
            s.query_x().iter().for_each(|v| out.push_str(&format!(",{v}")));
            out.push('\n');
        }
        out
    }

    /// Per-step margins from the theory instrumentation.
    pub fn margins_csv(&self) -> String {
        let mut out = String::from("step,delta,gamma_margin,delta_tilde,p_star,delta_y,norm,directional_margin\n");
        for s in &self.report.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.step,
                s.delta,
                s.gamma_margin,
                s.delta_tilde,
                s.p_star,
                s.delta_y,
                s.norm,
                s.directional_margin.map_or(String::new(), |m| m.to_string())
            ));
        }
        out
    }

    /// Scatter of the first two feature coordinates at every step; later
    /// steps are drawn more opaque and the query as a triangle.
    pub fn svg(&self, title: &str) -> String {
        let steps = self.trajectory.states.len();
        let mut pts = vec![];
        for (t, s) in self.trajectory.states.iter().enumerate() {
            let o = 0.15 + 0.85 * t as f64 / (steps.max(2) - 1) as f64;
            for (i, c) in self.trajectory.classes.iter().enumerate() {
                let r = s.x.row(i);
                let (marker, group) = match c {
                    Some(c) => (Marker::Dot, *c),
                    None => (Marker::Hollow, 0),
                };
                pts.push(Point { x: r[0], y: r.get(1).copied().unwrap_or(0.0), group, opacity: o, marker });
            }
            let q = s.query_x();
            pts.push(Point { x: q[0], y: q.get(1).copied().unwrap_or(0.0), group: 0, opacity: o, marker: Marker::Star });
        }
        let groups: Vec<String> = (0..self.prompt.k()).map(|c| format!("class {c}")).collect();
        plot::scatter(title, "x_0", "x_1", &pts, &groups.iter().map(String::as_str).collect::<Vec<_>>())
    }
}

/// Named configurations for the standard experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Fig4,
    Fig5,
    Ssl,
    Noise,
    Voronoi,
    Spirals,
}

impl Preset {
    pub const ALL: [Preset; 6] = [Preset::Fig4, Preset::Fig5, Preset::Ssl, Preset::Noise, Preset::Voronoi, Preset::Spirals];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Fig4 => "fig4",
            Preset::Fig5 => "fig5",
            Preset::Ssl => "ssl",
            Preset::Noise => "noise",
            Preset::Voronoi => "voronoi",
            Preset::Spirals => "spirals",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|p| p.name()).collect();
            Error::Config(format!("unknown preset {name:?}; expected one of {}", names.join(", ")))
        })
    }

    pub fn config(self) -> ExperimentConfig {
        let base = |name: &str, tasks: usize, task: TaskSpec| ExperimentConfig {
            name: name.into(),
            seed: 0,
            tasks,
            task,
            dynamics: None,
            transformer: None,
            baselines: vec![],
            hyper: Hyper::default(),
            oracle: false,
            sweep: BTreeMap::new(),
            emit_plots: true,
        };
        let constant = |a, g, ap, gp, l| Some(DynamicsParams::constant(LayerParams::new(a, g, ap, gp), l));
        match self {
            Preset::Fig4 => ExperimentConfig {
                dynamics: constant(1.0, 5.0, 0.08, 0.1, 15),
                ..base("fig4", 100, TaskSpec::Dataset2d { dataset: Dataset2d::Blobs { classes: 3, radius: 2.0, sigma: 0.3 }, n: 30 })
            },
            Preset::Fig5 => ExperimentConfig {
                dynamics: constant(1.0, 5.0, 0.05, 0.2, 5),
                baselines: vec![BaselineKind::Knn, BaselineKind::NearestCentroid],
                oracle: true,
                ..base("fig5", 500, TaskSpec::Voronoi { d: 2, k: 5, n: 64, min_gap: 1.0 })
            },
            Preset::Voronoi => ExperimentConfig {
                dynamics: constant(1.0, 5.0, 0.05, 0.2, 5),
                baselines: vec![BaselineKind::Knn, BaselineKind::NearestCentroid],
                oracle: true,
                ..base("voronoi", 500, TaskSpec::Dataset2d { dataset: Dataset2d::Voronoi2d { classes: 5, bound: 3.0 }, n: 64 })
            },
            Preset::Ssl => ExperimentConfig {
                dynamics: Some(ssl_dynamics()),
                baselines: vec![BaselineKind::Logreg, BaselineKind::LabelSpreading],
                sweep: BTreeMap::from([("n_unlabeled".into(), vec![0.0, 8.0, 24.0, 120.0])]),
                ..base(
                    "ssl",
                    2000,
                    TaskSpec::SemiSupervised {
                        d: 7,
                        k: 3,
                        n_labeled: 8,
                        n_unlabeled: 120,
                        pool: 120,
                        eta: 0.5,
                        shift_query: true,
                        noise_ablation: true,
                    },
                )
            },
            Preset::Noise => ExperimentConfig {
                dynamics: constant(0.5, 5.0, 0.08, 1.0, 5),
                baselines: vec![BaselineKind::Logreg],
                ..base("noise", 2000, TaskSpec::LabelNoise { d: 7, k: 3, n: 64, p: 0.3 })
            },
            Preset::Spirals => ExperimentConfig {
                dynamics: constant(1.0, 5.0, 0.05, 0.2, 5),
                baselines: vec![BaselineKind::Knn],
                sweep: BTreeMap::from([
                    ("alpha".into(), vec![0.1, 1.0, 5.0]),
                    ("gamma".into(), vec![1.0, 5.0]),
                    ("alpha_prime".into(), vec![0.05, 0.2]),
                    ("layers".into(), vec![5.0, 20.0]),
                ]),
                ..base("spirals", 500, TaskSpec::Dataset2d { dataset: Dataset2d::Spirals { classes: 2, sigma: 0.1 }, n: 64 })
            },
        }
    }
}

/// Schedule used by the semi-supervised preset.
pub fn ssl_dynamics() -> DynamicsParams {
    DynamicsParams::new(vec![LayerParams::new(0.0, 0.0, 4.0, 0.0), LayerParams::new(2.0, 1.0, 0.0, 1.0)])
        .with_mode(Mode::LabelDominated)
        .with_centering(Centering::Uncentered)
}
