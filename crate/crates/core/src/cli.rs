//! Command-line front end. Every subcommand reads an optional JSON config,
//! applies flag overrides and writes under `DPMTL_OUTPUT_ROOT` (default:
//! the working directory). Exit codes: 0 success, 1 configuration error,
//! 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::experiment::{run_sparsity_ablation, run_sweep, SweepConfig, SweepReport};
use crate::gradcheck::{run_case, standard_cases, DEFAULT_STEP};
use crate::ingest::{
    apply_sparsity_mask, load_dataset, split_dataset, split_users, top_n_filter, write_interactions, write_scores,
    DatasetSplit, SplitSpec, SplitUnit,
};
use crate::models::{Checkpoint, History, Model, ModelFamily};
use crate::sp::{sp_evaluate, write_predictions_csv, Extrapolation};
use crate::synth::{bayes_optimal_metrics, emit, generate_dataset, GenConfig};
use crate::train::{evaluate, train, Selection, TrainConfig};

pub const OUTPUT_ROOT_ENV: &str = "DPMTL_OUTPUT_ROOT";
/// Gradient checks above this relative error fail the `gradcheck` command.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "dpmtl", about = "Knowledge and option tracing with a mixed objective", version)]
struct Cli {
    /// Root for relative output paths.
    #[arg(long, env = OUTPUT_ROOT_ENV, global = true, default_value = ".")]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate an interaction file and write a cleaned copy.
    Ingest(IngestArgs),
    /// Train one model and report validation and test metrics.
    Train(RunArgs),
    /// Evaluate a checkpoint on one part of a dataset.
    Evaluate(EvalArgs),
    /// Lambda sweep over a hyper-parameter grid.
    Sweep(SweepArgs),
    /// Sweep repeated over sparsity levels.
    Ablate(SweepArgs),
    /// Score prediction from a checkpoint's user representations.
    Sp(SpArgs),
    /// Generate a synthetic dataset with its ground truth.
    Synth(SynthArgs),
    /// Finite-difference check of every model family's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    interactions: PathBuf,
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Keep this fraction of the most active items.
    #[arg(long)]
    top_items: Option<f64>,
    /// Keep this fraction of the most active users.
    #[arg(long)]
    top_users: Option<f64>,
    /// Fraction of interactions to drop at random.
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "ingest")]
    out: PathBuf,
}

/// Settings shared by `train`, `evaluate` and `sp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub interactions: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    /// Train, validation and test fractions of each user's interactions.
    pub split: [f64; 3],
    /// Train, validation and test fractions of users for score prediction.
    pub sp_split: [f64; 3],
    pub split_seed: u64,
    pub train: TrainConfig,
    pub extrapolation: Extrapolation,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            interactions: None,
            scores: None,
            split: [0.8, 0.1, 0.1],
            sp_split: [0.8, 0.1, 0.1],
            split_seed: 0,
            train: TrainConfig::default(),
            extrapolation: Extrapolation::default(),
            output: PathBuf::from("run"),
        }
    }
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    interactions: Option<PathBuf>,
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    family: Option<ModelFamily>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// loss, auc or acc.
    #[arg(long)]
    selection: Option<Selection>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    part: String,
}

#[derive(Args, Debug)]
struct SpArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// hold_offset or clamp.
    #[arg(long)]
    extrapolation: Option<String>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    families: Option<Vec<ModelFamily>>,
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    sparsity: Option<Vec<f64>>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    options: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    discrimination: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    distractor_temperature: Option<f64>,
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "synth")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// One family, or every family when omitted.
    #[arg(long)]
    family: Option<ModelFamily>,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// 1 for configuration problems, 2 for everything that fails while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))
        }
    }
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path.display(), e))
}

fn dispatch(cli: Cli) -> Result<()> {
    let root = cli.output_root;
    match cli.command {
        Command::Ingest(a) => ingest(&root, a),
        Command::Train(a) => train_cmd(&root, a),
        Command::Evaluate(a) => evaluate_cmd(&root, a),
        Command::Sweep(a) => sweep_cmd(&root, a, false),
        Command::Ablate(a) => sweep_cmd(&root, a, true),
        Command::Sp(a) => sp_cmd(&root, a),
        Command::Synth(a) => synth_cmd(&root, a),
        Command::Gradcheck(a) => gradcheck_cmd(&root, a),
    }
}

#[derive(Serialize)]
struct DatasetSummary {
    users: usize,
    items: usize,
    interactions: usize,
    sparsity: f64,
    correct_rate: f64,
    scored_users: usize,
}

fn summary(d: &Dataset) -> DatasetSummary {
    DatasetSummary {
        users: d.num_users(),
        items: d.num_items(),
        interactions: d.len(),
        sparsity: d.sparsity(),
        correct_rate: d.correct_rate(),
        scored_users: d.scores().map_or(0, |s| s.len()),
    }
}

fn ingest(root: &Path, a: IngestArgs) -> Result<()> {
    let mut d = load_dataset(&a.interactions, a.scores.as_deref())?;
    if a.top_items.is_some() || a.top_users.is_some() {
        d = top_n_filter(&d, a.top_items.unwrap_or(1.0), a.top_users.unwrap_or(1.0))?;
    }
    if let Some(s) = a.sparsity {
        d = apply_sparsity_mask(&d, s, a.seed)?;
    }
    let dir = resolve(root, &a.out);
    create_dir(&dir)?;
    let path = dir.join("interactions.csv");
    let f = std::fs::File::create(&path).map_err(|e| Error::io(path.display(), e))?;
    write_interactions(&d, std::io::BufWriter::new(f)).map_err(|e| Error::io(path.display(), e))?;
    if let Some(s) = d.scores() {
        let path = dir.join("scores.csv");
        let f = std::fs::File::create(&path).map_err(|e| Error::io(path.display(), e))?;
        write_scores(s, std::io::BufWriter::new(f)).map_err(|e| Error::io(path.display(), e))?;
    }
    let s = summary(&d);
    write_json(&dir.join("summary.json"), &s)?;
    println!(
        "{} users, {} items, {} interactions (sparsity {:.4}, correct rate {:.4}) -> {}",
        s.users,
        s.items,
        s.interactions,
        s.sparsity,
        s.correct_rate,
        dir.display()
    );
    Ok(())
}

/// Config file plus flag overrides, validated.
fn run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut c: RunConfig = read_config(a.config.as_deref())?;
    if let Some(v) = &a.interactions {
        c.interactions = Some(v.clone());
    }
    if let Some(v) = &a.scores {
        c.scores = Some(v.clone());
    }
    let t = &mut c.train;
    t.family = a.family.unwrap_or(t.family);
    t.dim = a.dim.unwrap_or(t.dim);
    t.layers = a.layers.unwrap_or(t.layers);
    t.lambda = a.lambda.unwrap_or(t.lambda);
    t.learning_rate = a.lr.unwrap_or(t.learning_rate);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.max_epochs = a.max_epochs.unwrap_or(t.max_epochs);
    t.patience = a.patience.unwrap_or(t.patience);
    t.seed = a.seed.unwrap_or(t.seed);
    t.selection = a.selection.unwrap_or(t.selection);
    c.split_seed = a.split_seed.unwrap_or(c.split_seed);
    if let Some(o) = &a.out {
        c.output = o.clone();
    }
    c.train.validate()?;
    if c.interactions.is_none() {
        return Err(config_err("no interaction file given (--interactions or \"interactions\" in the config)"));
    }
    let [x, y, z] = c.split;
    SplitSpec::new(x, y, z, SplitUnit::ByInteraction, 0).map_err(config_err)?;
    let [x, y, z] = c.sp_split;
    SplitSpec::new(x, y, z, SplitUnit::ByUser, 0).map_err(config_err)?;
    Ok(c)
}

fn load_split(c: &RunConfig) -> Result<(Dataset, DatasetSplit)> {
    let path = c.interactions.as_ref().expect("checked by run_config");
    let d = load_dataset(path, c.scores.as_deref()).map_err(|e| match e {
        Error::Io { .. } => config_err(e),
        other => other,
    })?;
    let [x, y, z] = c.split;
    let split = split_dataset(&d, &SplitSpec::new(x, y, z, SplitUnit::ByInteraction, c.split_seed)?)?;
    Ok((d, split))
}

#[derive(Serialize)]
struct RunMetrics {
    val: Option<crate::metrics::MetricBundle>,
    test: Option<crate::metrics::MetricBundle>,
}

fn describe(name: &str, m: &crate::metrics::MetricBundle) {
    let auc = m.kt_auc.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
    println!("{name}: KT-AUC {auc}  OT-ACC {:.4}  loss {:.4}  n {}", m.ot_acc, m.loss, m.n);
}

fn train_cmd(root: &Path, a: RunArgs) -> Result<()> {
    let c = run_config(&a)?;
    let (_, split) = load_split(&c)?;
    let out = train(&split, &c.train)?;
    let dir = resolve(root, &c.output);
    create_dir(&dir)?;
    let metrics = RunMetrics {
        val: (!split.val.is_empty())
            .then(|| evaluate(&out.model, &out.history, &split.val, c.train.lambda))
            .transpose()?,
        test: (!split.test.is_empty())
            .then(|| evaluate(&out.model, &out.history, &split.test, c.train.lambda))
            .transpose()?,
    };
    write_json(&dir.join("config.json"), &c)?;
    write_json(&dir.join("train_report.json"), &out.report)?;
    out.report.checkpoint.save(&dir.join("checkpoint.json"))?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    println!(
        "{} d={} layers={} lambda={}: best epoch {} of {}",
        c.train.family,
        c.train.dim,
        c.train.layers,
        c.train.lambda,
        out.report.best_epoch,
        out.report.epochs.len()
    );
    if let Some(m) = &metrics.val {
        describe("val", m);
    }
    if let Some(m) = &metrics.test {
        describe("test", m);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn load_model(path: &Path, d: &Dataset) -> Result<Model> {
    let m = Checkpoint::load(path)
        .map_err(|e| match e {
            Error::Io { .. } | Error::Json(_) => config_err(e),
            other => other,
        })?
        .into_model()?;
    if m.num_users() != d.num_users() || m.layout().counts() != d.options_per_item() {
        return Err(config_err(format!(
            "checkpoint covers {} users and {} items, data has {} and {}",
            m.num_users(),
            m.layout().num_items(),
            d.num_users(),
            d.num_items()
        )));
    }
    Ok(m)
}

fn evaluate_cmd(root: &Path, a: EvalArgs) -> Result<()> {
    let c = run_config(&a.run)?;
    let (d, split) = load_split(&c)?;
    let model = load_model(&a.checkpoint, &d)?;
    let part = match a.part.as_str() {
        "train" => &split.train,
        "val" => &split.val,
        "test" => &split.test,
        "all" => &d,
        other => return Err(config_err(format!("unknown part {other:?} (train, val, test, all)"))),
    };
    let history = History::from_dataset(&split.train);
    let m = evaluate(&model, &history, part, c.train.lambda)?;
    describe(&a.part, &m);
    let dir = resolve(root, &c.output);
    create_dir(&dir)?;
    write_json(&dir.join(format!("evaluate_{}.json", a.part)), &m)
}

fn sp_cmd(root: &Path, a: SpArgs) -> Result<()> {
    let mut c = run_config(&a.run)?;
    if let Some(e) = &a.extrapolation {
        c.extrapolation = serde_json::from_value(serde_json::Value::String(e.clone()))
            .map_err(|_| config_err(format!("unknown extrapolation {e:?} (hold_offset, clamp)")))?;
    }
    let (d, split) = load_split(&c)?;
    let scores = d.scores().ok_or_else(|| config_err("score prediction needs a score file"))?;
    let model = load_model(&a.checkpoint, &d)?;
    let reps = model.user_representations(&History::from_dataset(&split.train))?;
    let [x, y, z] = c.sp_split;
    let (tr, _, te) = split_users(d.num_users(), &SplitSpec::new(x, y, z, SplitUnit::ByUser, c.split_seed)?)?;
    let report = sp_evaluate(&reps, scores, &tr, &te, c.extrapolation)?;
    let dir = resolve(root, &c.output);
    create_dir(&dir)?;
    report.model.save(&dir.join("sp_model.json"))?;
    let path = dir.join("sp_predictions.csv");
    let f = std::fs::File::create(&path).map_err(|e| Error::io(path.display(), e))?;
    write_predictions_csv(&report.predictions, std::io::BufWriter::new(f)).map_err(|e| Error::io(path.display(), e))?;
    write_json(&dir.join("sp_report.json"), &report)?;
    println!("SP-MAE {:.4} on {} test users ({} train)", report.mae, report.test_users, report.train_users);
    Ok(())
}

fn sweep_cmd(root: &Path, a: SweepArgs, ablate: bool) -> Result<()> {
    let mut c: SweepConfig = read_config(Some(&a.config))?;
    c.workers = a.workers.or(c.workers);
    if let Some(v) = a.seeds {
        c.seeds = v;
    }
    if let Some(v) = a.lambdas {
        c.lambdas = v;
    }
    if let Some(v) = a.families {
        c.families = v;
    }
    if let Some(v) = a.dims {
        c.dims = v;
    }
    if let Some(v) = a.layers {
        c.layers = v;
    }
    if let Some(v) = a.sparsity {
        c.sparsity = Some(v);
    }
    if let Some(v) = a.max_epochs {
        c.training.max_epochs = v;
    }
    if let Some(o) = a.out {
        c.output = o;
    }
    c.output = resolve(root, &c.output);
    let report: SweepReport = if ablate { run_sparsity_ablation(&c)? } else { run_sweep(&c)? };
    let resumed = report.cells.iter().filter(|x| x.resumed).count();
    println!(
        "{} cells ({} resumed, {} failed) -> {}",
        report.cells.len(),
        resumed,
        report.failed(),
        report.dir.display()
    );
    for avg in &report.summary.rank_average {
        let best = avg.mean_ranks.iter().enumerate().fold(0, |b, (k, v)| if *v < avg.mean_ranks[b] { k } else { b });
        println!(
            "{:>3}: best mean rank {:.2} at lambda {:.1} over {} rows",
            avg.task.map_or("all", |t| t.name()),
            avg.mean_ranks[best],
            report.summary.lambdas[best],
            avg.rows
        );
    }
    for cell in report.cells.iter().filter(|x| x.error.is_some()) {
        eprintln!("failed {:?}: {}", cell.key, cell.error.as_deref().unwrap_or(""));
    }
    if report.failed() > 0 {
        return Err(Error::Contract(format!("{} cells failed; reports are marked incomplete", report.failed())));
    }
    Ok(())
}

fn synth_cmd(root: &Path, a: SynthArgs) -> Result<()> {
    let mut g: GenConfig = read_config(a.config.as_deref())?;
    g.users = a.users.unwrap_or(g.users);
    g.items = a.items.unwrap_or(g.items);
    g.options = a.options.unwrap_or(g.options);
    g.dim = a.dim.unwrap_or(g.dim);
    g.discrimination = a.discrimination.unwrap_or(g.discrimination);
    g.temperature = a.temperature.unwrap_or(g.temperature);
    g.distractor_temperature = a.distractor_temperature.or(g.distractor_temperature);
    g.density = a.density.unwrap_or(g.density);
    g.seed = a.seed.unwrap_or(g.seed);
    if let (Some(sigma), Some(link)) = (a.noise_sigma, g.score.as_mut()) {
        link.noise_sigma = sigma;
    }
    g.validate()?;
    let s = generate_dataset(&g)?;
    let dir = resolve(root, &a.out);
    emit(&s, &dir, g.seed)?;
    let ceilings = bayes_optimal_metrics(&s.dataset, &s.truth)?;
    write_json(&dir.join("config.json"), &g)?;
    write_json(&dir.join("ceilings.json"), &ceilings)?;
    println!(
        "{} interactions; ceilings KT-AUC {} OT-ACC {:.4} -> {}",
        s.dataset.len(),
        ceilings.kt_auc.map_or_else(|| "undefined".into(), |v| format!("{v:.4}")),
        ceilings.ot_acc,
        dir.display()
    );
    Ok(())
}

fn gradcheck_cmd(root: &Path, a: GradcheckArgs) -> Result<()> {
    if !(a.step.is_finite() && a.step > 0.0) || a.count == 0 {
        return Err(config_err("step must be positive and count non-zero"));
    }
    let families: Vec<ModelFamily> = a.family.map_or_else(|| ModelFamily::ALL.to_vec(), |f| vec![f]);
    let mut outcomes = Vec::new();
    let mut failures = 0;
    for family in families {
        let mut worst: f64 = 0.0;
        let mut failed = 0;
        for case in standard_cases(family, a.count, a.seed) {
            let o = run_case(&case, a.step)?;
            worst = worst.max(o.max_relative_error);
            if o.max_relative_error >= GRADCHECK_TOLERANCE {
                failed += 1;
            }
            outcomes.push(o);
        }
        println!(
            "{family}: {} cases, worst relative error {worst:.3e}, {failed} above {GRADCHECK_TOLERANCE:e}",
            a.count
        );
        failures += failed;
    }
    if let Some(out) = a.out {
        let dir = resolve(root, &out);
        create_dir(&dir)?;
        write_json(&dir.join("gradcheck.json"), &outcomes)?;
    }
    if failures > 0 {
        return Err(Error::Contract(format!("{failures} gradient checks failed")));
    }
    Ok(())
}
