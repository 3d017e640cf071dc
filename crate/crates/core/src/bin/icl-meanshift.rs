use clap::{Args, Parser, Subcommand, ValueEnum};
use icl_meanshift::baselines::BaselineKind;
use icl_meanshift::dynamics::DynamicsParams;
use icl_meanshift::experiment::{self, ExperimentConfig, OutputDir, Preset, Summary, CODE_VERSION};
use icl_meanshift::fingerprints::{alignment_suite, Predictor, SuiteConfig};
use icl_meanshift::plot;
use icl_meanshift::theory::{self, Check, InstanceConfig};
use icl_meanshift::training::{self, Sandwich, TrainConfig};
use icl_meanshift::transformer::{self, AbstractionForm, TransformerWeights};
use icl_meanshift::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Coupled feature-label mean-shift dynamics and the attention-only
/// transformer they come from.
#[derive(Parser)]
#[command(name = "icl-meanshift", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write sampled prompts as JSON or CSV.
    Generate(GenerateArgs),
    /// Run the dynamics on one prompt and export its trajectory.
    Simulate(SimulateArgs),
    /// Train a transformer at desk scale and project its weights.
    Train(TrainArgs),
    /// Compare the behavioral fingerprints of two predictors.
    Fingerprint(FingerprintArgs),
    /// Check the margin-growth lemmas on random label-dominated instances.
    VerifyTheory(VerifyArgs),
    /// Accuracy of the reference classifiers on an experiment's tasks.
    Baseline(BaselineArgs),
    /// Run an experiment config over its sweep grid.
    Sweep(SweepArgs),
    /// Summarize a finished experiment directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct Source {
    /// Named preset.
    #[arg(long, conflicts_with = "config", value_parser = preset_names())]
    preset: Option<String>,
    /// Experiment config (TOML, JSON, or a manifest.json to replay).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of tasks.
    #[arg(long)]
    tasks: Option<usize>,
    /// Output directory; defaults to $ICL_MEANSHIFT_OUT/<name> or out/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn preset_names() -> clap::builder::PossibleValuesParser {
    clap::builder::PossibleValuesParser::new(Preset::ALL.map(|p| p.name()))
}

impl Source {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut c = match (&self.preset, &self.config) {
            (Some(p), _) => Preset::from_name(p)?.config(),
            (None, Some(path)) => ExperimentConfig::load(path)?,
            (None, None) => return Err(Error::Config("pass --preset or --config".into())),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(t) = self.tasks {
            c.tasks = t;
        }
        c.validate()?;
        Ok(c)
    }

    fn out(&self, name: &str) -> Result<OutputDir> {
        OutputDir::create(OutputDir::default_for(self.out.clone(), name))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    source: Source,
    /// Number of prompts to write.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    source: Source,
    /// Task index within the config's seed stream.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Also export every attention matrix (size grows as L * n^2).
    #[arg(long)]
    attention: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config (TOML); defaults to the desk configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the full-size configuration with this many layers.
    #[arg(long, conflicts_with = "config")]
    full: Option<usize>,
    /// Sandwich every layer with a random block permutation.
    #[arg(long)]
    symmetrized: bool,
    /// Override the number of optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Override the number of prompts per step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Validate the config and exit without training.
    #[arg(long)]
    check: bool,
    /// Output directory; defaults to $ICL_MEANSHIFT_OUT/train-<variant> or out/train-<variant>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FingerprintArgs {
    /// First predictor: a weights JSON or a dynamics schedule (TOML or JSON).
    #[arg(long)]
    a: PathBuf,
    /// Second predictor.
    #[arg(long)]
    b: PathBuf,
    /// A second member of A's family for the A-A' baseline comparison.
    #[arg(long)]
    a2: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    tasks: usize,
    /// Context length of the linear tasks.
    #[arg(long, default_value_t = 24)]
    n: usize,
    /// Feature dimension, required when no predictor is a transformer.
    #[arg(long)]
    d: Option<usize>,
    /// Class count, required when no predictor is a transformer.
    #[arg(long = "classes")]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Instance generator config (TOML); defaults apply otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    instances: usize,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    source: Source,
    /// Classifiers to run (comma separated); all by default.
    #[arg(long, value_delimiter = ',')]
    kinds: Vec<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    source: Source,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding summary.json.
    #[arg(long)]
    dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Fingerprint(a) => fingerprint(a),
        Command::VerifyTheory(a) => verify(a),
        Command::Baseline(a) => baseline(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numeric { .. } => 3,
                _ => 2,
            })
        }
    }
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Manifest for commands whose config is not an experiment config.
fn side_manifest<T: Serialize>(out: &OutputDir, command: &str, seed: u64, config: &T) -> Result<()> {
    let text = serde_json::to_string(config)?;
    let m = serde_json::json!({
        "format": "icl-meanshift/run",
        "command": command,
        "code_version": CODE_VERSION,
        "config_sha256": sha256_hex(text.as_bytes()),
        "seed": seed,
        "config": config,
    });
    out.write("manifest.json", json(&m)?)?;
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let c = a.source.load()?;
    let out = a.source.out(&c.name)?;
    for i in 0..a.count {
        let p = c.task.sample(c.task_seed(i))?.prompt;
        match a.format {
            Format::Json => out.write(&format!("prompt_{i:04}.json"), p.to_json()?)?,
            Format::Csv => out.write(&format!("prompt_{i:04}.csv"), p.to_csv()?)?,
        };
    }
    out.write("manifest.json", json(&experiment::Manifest::new(&c))?)?;
    println!("wrote {} prompts to {}", a.count, out.path().display());
    Ok(ExitCode::SUCCESS)
}

fn simulate(a: SimulateArgs) -> Result<ExitCode> {
    let c = a.source.load()?;
    let out = a.source.out(&c.name)?;
    let sim = experiment::simulate(&c, a.index)?;
    out.write("trajectory.csv", sim.trajectory.to_csv())?;
    out.write("centroids.csv", sim.centroid_csv())?;
    out.write("margins.csv", sim.margins_csv())?;
    if a.attention {
        out.write("attention.csv", sim.trajectory.attention_csv())?;
    }
    let summary = serde_json::json!({
        "name": c.name,
        "index": a.index,
        "c_test": sim.prompt.c_test,
        "predicted": sim.predicted,
        "report": sim.report,
    });
    out.write("summary.json", json(&summary)?)?;
    out.write("manifest.json", json(&experiment::Manifest::new(&c))?)?;
    if c.emit_plots {
        out.write("trajectory.svg", sim.svg(&format!("{} task {}", c.name, a.index)))?;
        let m: Vec<(f64, f64)> =
            sim.report.steps.iter().filter_map(|s| Some((s.step as f64, s.directional_margin?))).collect();
        if !m.is_empty() {
            let series = [plot::Series { name: "directional margin", points: m }];
            out.write("margin.svg", plot::line_chart("directional margin", "step", "M_t", &series))?;
        }
    }
    println!(
        "{}: predicted class {} (true {}), {} steps, output in {}",
        c.name,
        sim.predicted,
        sim.prompt.c_test,
        sim.trajectory.layers(),
        out.path().display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut c = match (&a.config, a.full) {
        (Some(path), _) => toml::from_str::<TrainConfig>(&std::fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))?,
        (None, Some(l)) => TrainConfig::full(l),
        (None, None) => TrainConfig::desk(),
    };
    c.symmetrized |= a.symmetrized;
    c.steps = a.steps.unwrap_or(c.steps);
    c.seed = a.seed.unwrap_or(c.seed);
    c.lr = a.lr.unwrap_or(c.lr);
    c.batch_size = a.batch_size.unwrap_or(c.batch_size);
    c.validate()?;
    if a.check {
        println!("config ok: {}", serde_json::to_string(&c)?);
        return Ok(ExitCode::SUCCESS);
    }
    let name = if c.symmetrized { "train-symmetrized" } else { "train-unconstrained" };
    let out = OutputDir::create(OutputDir::default_for(a.out, name))?;
    side_manifest(&out, "train", c.seed, &c)?;
    let sandwich = if c.symmetrized { Sandwich::Random } else { Sandwich::Off };
    let result = training::train_with(&c, sandwich, |step, w| {
        out.write(&format!("checkpoint_{step:06}.json"), w.to_json()?)?;
        Ok(())
    })?;
    let w = &result.weights;
    out.write("weights.json", w.to_json()?)?;
    out.write("weights.bin", w.to_bytes())?;
    out.write("metrics.csv", result.metrics_csv())?;
    let (two, two_report) = transformer::project_weights(w, AbstractionForm::TwoParameter);
    let (three, three_report) = transformer::project_weights(w, AbstractionForm::ThreeParameter);
    let holdout = training::holdout_set(&c)?;
    let (_, cluster) = transformer::cluster_weights(w, 4, &holdout, c.seed)?;
    let projection = serde_json::json!({
        "two_parameter": { "abstracted": two, "report": two_report },
        "three_parameter": { "abstracted": three, "report": three_report },
        "cluster_k4": cluster,
    });
    out.write("projection.json", json(&projection)?)?;
    for (l, layer) in w.layers.iter().enumerate() {
        let (m, nv) = layer.products();
        out.write(&format!("layer{l}_qk.svg"), plot::heatmap(&format!("layer {l} W_Q W_K^T / sqrt(D)"), &m))?;
        out.write(&format!("layer{l}_vp.svg"), plot::heatmap(&format!("layer {l} W_V W_P"), &nv))?;
    }
    let curve: Vec<(f64, f64)> = result.metrics.iter().map(|m| (m.step as f64, m.holdout_accuracy)).collect();
    out.write("accuracy.svg", plot::line_chart(name, "step", "held-out accuracy", &[plot::Series { name, points: curve }]))?;
    println!(
        "held-out accuracy {:.4}, residual fraction {:.4} (two-parameter), output in {}",
        result.final_accuracy(),
        two_report.residual_fraction,
        out.path().display()
    );
    Ok(ExitCode::SUCCESS)
}

enum Loaded {
    Transformer(TransformerWeights),
    Dynamics(DynamicsParams),
}

impl Loaded {
    fn open(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if let Ok(w) = TransformerWeights::from_json(&text) {
            return Ok(Loaded::Transformer(w));
        }
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str::<DynamicsParams>(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str::<DynamicsParams>(&text).map_err(|e| e.to_string())
        };
        let p = parsed.map_err(|e| Error::Config(format!("{}: neither weights nor a dynamics schedule ({e})", path.display())))?;
        p.validate()?;
        Ok(Loaded::Dynamics(p))
    }

    fn predictor(&self) -> &dyn Predictor {
        match self {
            Loaded::Transformer(w) => w,
            Loaded::Dynamics(p) => p,
        }
    }

    fn dims(&self) -> Option<(usize, usize)> {
        match self {
            Loaded::Transformer(w) => Some((w.d, w.k)),
            Loaded::Dynamics(_) => None,
        }
    }
}

fn fingerprint(a: FingerprintArgs) -> Result<ExitCode> {
    let pa = Loaded::open(&a.a)?;
    let pb = Loaded::open(&a.b)?;
    let pa2 = a.a2.as_deref().map(Loaded::open).transpose()?;
    let dims: Vec<(usize, usize)> = [Some(&pa), Some(&pb), pa2.as_ref()].into_iter().flatten().filter_map(Loaded::dims).collect();
    if dims.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Config("predictors disagree on (d, K)".into()));
    }
    let (d, k) = match (dims.first(), a.d, a.k) {
        (Some(&(d, k)), None, None) => (d, k),
        (Some(&(d, k)), ad, ak) if ad.unwrap_or(d) == d && ak.unwrap_or(k) == k => (d, k),
        (Some(_), _, _) => return Err(Error::Config("--d/--classes disagree with the transformer weights".into())),
        (None, Some(d), Some(k)) => (d, k),
        (None, _, _) => return Err(Error::Config("pass --d and --classes when no predictor is a transformer".into())),
    };
    let config = SuiteConfig { d, k, n: a.n, n_tasks: a.tasks, seed: a.seed };
    let report = alignment_suite(pa.predictor(), pb.predictor(), pa2.as_ref().map(Loaded::predictor), config)?;
    let out = OutputDir::create(OutputDir::default_for(a.out, "fingerprint"))?;
    side_manifest(&out, "fingerprint", a.seed, &config)?;
    out.write("alignment.json", json(&report)?)?;
    out.write("same_prompt.csv", report.same_prompt.to_csv())?;
    out.write("control.csv", report.control.to_csv())?;
    let pts: Vec<plot::Point> = report
        .same_prompt
        .p_true_pairs
        .iter()
        .map(|&(x, y)| plot::Point { x, y, group: 0, opacity: 0.6, marker: plot::Marker::Dot })
        .collect();
    out.write("p_true.svg", plot::scatter("p_true: A vs B (same prompt)", "A", "B", &pts, &["tasks"]))?;
    println!(
        "same-prompt spearman q {:.3} c {:.3}; control q {:.3} c {:.3}; R^2 {}",
        report.same_prompt.spearman_q.mean,
        report.same_prompt.spearman_c.mean,
        report.control.spearman_q.mean,
        report.control.spearman_c.mean,
        report.same_prompt.r2_p_true.map_or("undefined".into(), |r| format!("{r:.3}"))
    );
    Ok(ExitCode::SUCCESS)
}

fn verify(a: VerifyArgs) -> Result<ExitCode> {
    let mut c = match &a.config {
        Some(path) => toml::from_str::<InstanceConfig>(&std::fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))?,
        None => InstanceConfig::default(),
    };
    if let Some(s) = a.steps {
        c.steps = s;
    }
    c.validate()?;
    let summary = theory::verify_many(&c, a.instances, a.seed)?;
    let out = OutputDir::create(OutputDir::default_for(a.out, "verify-theory"))?;
    side_manifest(&out, "verify-theory", a.seed, &c)?;
    out.write("verdicts.json", json(&summary)?)?;
    println!("{} instances, {} checked", summary.instances, summary.checked);
    for s in &summary.per_check {
        println!("  {:<20} {:>6} evaluated {:>6} violations", s.check.name(), s.evaluated, s.violations);
    }
    let failed = summary.violations > 0 || summary.checked == 0;
    if summary.violations_of(Check::LabelGrowth) > 0 {
        println!("  note: label-growth violations carry certificates in verdicts.json");
    }
    Ok(if failed { ExitCode::from(4) } else { ExitCode::SUCCESS })
}

fn baseline(a: BaselineArgs) -> Result<ExitCode> {
    let mut c = a.source.load()?;
    c.dynamics = None;
    c.transformer = None;
    c.baselines = if a.kinds.is_empty() {
        BaselineKind::ALL.to_vec()
    } else {
        a.kinds.iter().map(|k| BaselineKind::from_name(k)).collect::<Result<_>>()?
    };
    c.sweep.retain(|axis, _| !["alpha", "gamma", "alpha_prime", "gamma_prime", "layers"].contains(&axis.as_str()));
    c.name = format!("{}-baselines", c.name);
    c.validate()?;
    let out = a.source.out(&c.name)?;
    let summary = experiment::run_experiment(&c, &out)?;
    print_summary(&summary);
    Ok(ExitCode::SUCCESS)
}

fn sweep(a: SweepArgs) -> Result<ExitCode> {
    let c = a.source.load()?;
    let out = a.source.out(&c.name)?;
    let summary = experiment::run_experiment(&c, &out)?;
    print_summary(&summary);
    println!("output in {}", out.path().display());
    Ok(if summary.cells.iter().any(|c| c.error.is_some()) { ExitCode::from(3) } else { ExitCode::SUCCESS })
}

fn print_summary(s: &Summary) {
    let metrics: std::collections::BTreeSet<&String> = s.cells.iter().flat_map(|c| c.metrics.keys()).collect();
    let width = s.cells.iter().map(|c| c.key.len()).max().unwrap_or(0).max(4);
    print!("{:<width$}", "cell");
    for m in &metrics {
        print!("  {m:>w$}", w = m.len().max(7));
    }
    println!();
    for c in &s.cells {
        print!("{:<width$}", if c.key.is_empty() { "-" } else { &c.key });
        for m in &metrics {
            let v = c.metrics.get(*m).map_or("-".into(), |v| format!("{:.4}", v));
            print!("  {v:>w$}", w = m.len().max(7));
        }
        if let Some(e) = &c.error {
            print!("  error: {e}");
        }
        println!();
    }
}

fn report(a: ReportArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(a.dir.join("summary.json"))?;
    let summary: Summary = serde_json::from_str(&text)?;
    print_summary(&summary);
    let out = OutputDir::create(&a.dir)?;
    let manifest = a.dir.join("manifest.json");
    if manifest.exists() {
        let c = ExperimentConfig::load(&manifest)?;
        if let Some(svg) = experiment::accuracy_plot(&c, &summary) {
            out.write("accuracy.svg", svg)?;
        }
    }
    let mut md = format!("# {}\n\nconfig sha256 `{}`\n\n| cell | metric | accuracy |\n|---|---|---|\n", summary.name, summary.config_sha256);
    for c in &summary.cells {
        for (m, v) in &c.metrics {
            md.push_str(&format!("| {} | {m} | {v:.4} |\n", if c.key.is_empty() { "-" } else { &c.key }));
        }
    }
    out.write("report.md", md)?;
    Ok(ExitCode::SUCCESS)
}
