//! Grid experiments: lambda sweeps, sparsity ablations and their reports.
//!
//! A sweep trains one model per cell of dataset x family x sparsity x seed x
//! lambda x dim x layers. For every (dataset, family, sparsity, seed,
//! lambda) the (dim, layers) cell with the best validation metric is kept,
//! and its test metrics are averaged over seeds. Lambdas are then ranked
//! per task, and the best lambda is chosen on validation and reported on
//! test.
//!
//! Each finished cell is written to `cells/<hash>.json`, where the hash
//! covers everything that determines the cell's result. Re-running a sweep
//! skips cells whose file already exists. Aggregate CSVs contain no timing
//! and are byte-identical across identical runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ingest::{
    apply_sparsity_mask, load_dataset, split_dataset, split_users, write_interactions, DatasetSplit, SplitSpec,
    SplitUnit,
};
use crate::metrics::{
    default_lambda_grid, write_rank_average_csv, MetricBundle, RankAverage, RankRow, RankTable, Task,
};
use crate::models::ModelFamily;
use crate::sp::{sp_evaluate, Extrapolation};
use crate::synth::{generate_dataset, GenConfig};
use crate::train::{evaluate, train, Selection, TrainConfig};

/// Bumped whenever a change alters cell results, so stale cell files are
/// not reused.
const CELL_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Files {
        interactions: PathBuf,
        #[serde(default)]
        scores: Option<PathBuf>,
    },
    Synthetic(GenConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub source: DataSource,
}

/// Optimizer and stopping settings shared by every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainTemplate {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub selection: Selection,
}

impl Default for TrainTemplate {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainTemplate {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            selection: t.selection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub datasets: Vec<DatasetSpec>,
    pub families: Vec<ModelFamily>,
    pub lambdas: Vec<f64>,
    pub dims: Vec<usize>,
    /// Depths tried for DP-NMF and DP-BiDKT; DP-IRT always uses one.
    pub layers: Vec<usize>,
    /// Fractions of training and validation interactions hidden. `None`
    /// means `[0]` for a sweep and [`ablation_sparsity_grid`] for an
    /// ablation.
    pub sparsity: Option<Vec<f64>>,
    pub seeds: Vec<u64>,
    /// Train, validation and test fractions of each user's interactions.
    pub split: [f64; 3],
    /// Train, validation and test fractions of users for score prediction.
    pub sp_split: [f64; 3],
    pub training: TrainTemplate,
    pub extrapolation: Extrapolation,
    /// Worker threads; `None` uses one per core.
    pub workers: Option<usize>,
    pub output: PathBuf,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            datasets: Vec::new(),
            families: ModelFamily::ALL.to_vec(),
            lambdas: default_lambda_grid(),
            dims: vec![1, 4, 8, 16, 32, 64],
            layers: vec![1, 2, 3, 4],
            sparsity: None,
            seeds: vec![0],
            split: [0.8, 0.1, 0.1],
            sp_split: [0.8, 0.1, 0.1],
            training: TrainTemplate::default(),
            extrapolation: Extrapolation::default(),
            workers: None,
            output: PathBuf::from("sweep"),
        }
    }
}

/// 0%, 10%, ..., 70%.
pub fn ablation_sparsity_grid() -> Vec<f64> {
    (0..=7).map(|k| k as f64 / 10.0).collect()
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.datasets.is_empty() {
            return bad("no datasets configured".into());
        }
        let mut names: Vec<&str> = self.datasets.iter().map(|d| d.name.as_str()).collect();
        if let Some(n) = names.iter().find(|n| n.is_empty() || n.contains([',', '\n', '"'])) {
            return bad(format!("dataset name {n:?} must be non-empty without commas, quotes or newlines"));
        }
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("dataset names must be unique".into());
        }
        if self.families.is_empty() || self.lambdas.is_empty() || self.dims.is_empty() || self.seeds.is_empty() {
            return bad("families, lambdas, dims and seeds must be non-empty".into());
        }
        if self.families.iter().any(|f| f.uses_layers()) && self.layers.is_empty() {
            return bad("layer grid must be non-empty".into());
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return bad(format!("lambda {l} outside [0, 1]"));
        }
        if self.dims.contains(&0) {
            return bad("dims must be positive".into());
        }
        if let Some(l) = self.layers.iter().find(|l| !(1..=4).contains(*l)) {
            return bad(format!("layer count {l} outside 1..=4"));
        }
        if let Some(s) = self.sparsity.iter().flatten().find(|s| !(0.0..1.0).contains(*s)) {
            return bad(format!("sparsity {s} outside [0, 1)"));
        }
        if self.sparsity.as_ref().is_some_and(Vec::is_empty) {
            return bad("sparsity grid must be non-empty".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be positive".into());
        }
        let [a, b, c] = self.split;
        SplitSpec::new(a, b, c, SplitUnit::ByInteraction, 0).map_err(|e| Error::Config(e.to_string()))?;
        let [a, b, c] = self.sp_split;
        SplitSpec::new(a, b, c, SplitUnit::ByUser, 0).map_err(|e| Error::Config(e.to_string()))?;
        TrainConfig {
            learning_rate: self.training.learning_rate,
            batch_size: self.training.batch_size,
            max_epochs: self.training.max_epochs,
            ..TrainConfig::default()
        }
        .validate()
    }

    fn sparsity_grid(&self) -> Vec<f64> {
        self.sparsity.clone().unwrap_or_else(|| vec![0.0])
    }

    fn layer_grid(&self, family: ModelFamily) -> Vec<usize> {
        if family.uses_layers() {
            self.layers.clone()
        } else {
            vec![1]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub dataset: String,
    pub family: ModelFamily,
    pub sparsity: f64,
    pub seed: u64,
    pub lambda: f64,
    pub dim: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub key: CellKey,
    pub hash: String,
    pub val: Option<MetricBundle>,
    pub test: MetricBundle,
    pub sp_val_mae: Option<f64>,
    pub sp_test_mae: Option<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// Validation value of the selection metric at the best epoch.
    pub selection_value: f64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub key: CellKey,
    pub hash: String,
    pub record: Option<CellRecord>,
    pub error: Option<String>,
    /// Whether the record came from an earlier run's cell file.
    pub resumed: bool,
}

/// Test metrics of the selected cell for one lambda, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub kt_auc: Option<f64>,
    pub ot_acc: Option<f64>,
    pub sp_mae: Option<f64>,
    pub val_kt_auc: Option<f64>,
    pub val_ot_acc: Option<f64>,
    pub val_sp_mae: Option<f64>,
    /// Selected (dim, layers) per seed.
    pub selected: Vec<(u64, usize, usize)>,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestLambda {
    pub task: Task,
    pub lambda: Option<f64>,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub dataset: String,
    pub family: ModelFamily,
    pub sparsity: f64,
    pub points: Vec<LambdaPoint>,
    pub best: Vec<BestLambda>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub lambdas: Vec<f64>,
    pub groups: Vec<GroupSummary>,
    pub rank_table: RankTable,
    /// Rank rows left out of the averages because a cell is missing.
    pub incomplete_rows: usize,
    pub rank_average: Vec<RankAverage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub dir: PathBuf,
    pub cells: Vec<CellOutcome>,
    pub summary: SweepSummary,
}

impl SweepReport {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.record.is_none()).count()
    }
}

struct Loaded {
    name: String,
    data: Dataset,
    fingerprint: String,
}

fn load(spec: &DatasetSpec) -> Result<Loaded> {
    let data = match &spec.source {
        DataSource::Files { interactions, scores } => load_dataset(interactions, scores.as_deref())
            .map_err(|e| Error::Config(format!("dataset {}: {e}", spec.name)))?,
        DataSource::Synthetic(g) => generate_dataset(g)?.dataset,
    };
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    write_interactions(&data, &mut buf).expect("write to memory");
    h.update(&buf);
    for (u, s) in data.scores().into_iter().flatten() {
        h.update(format!("{u}:{s:e};").as_bytes());
    }
    Ok(Loaded { name: spec.name.clone(), data, fingerprint: hex::encode(h.finalize()) })
}

/// The parts one cell trains and evaluates on.
struct Prepared {
    split: DatasetSplit,
    sp_users: (Vec<usize>, Vec<usize>, Vec<usize>),
}

fn prepare(c: &SweepConfig, d: &Dataset, seed: u64, sparsity: f64) -> Result<Prepared> {
    let [a, b, t] = c.split;
    let split = split_dataset(d, &SplitSpec::new(a, b, t, SplitUnit::ByInteraction, seed)?)?;
    // the test part is fixed before masking
    let split = DatasetSplit {
        train: apply_sparsity_mask(&split.train, sparsity, seed)?,
        val: apply_sparsity_mask(&split.val, sparsity, seed ^ 0x9e37_79b9_7f4a_7c15)?,
        test: split.test,
    };
    let [a, b, t] = c.sp_split;
    let sp_users = split_users(d.num_users(), &SplitSpec::new(a, b, t, SplitUnit::ByUser, seed)?)?;
    Ok(Prepared { split, sp_users })
}

fn cell_hash(c: &SweepConfig, key: &CellKey, fingerprint: &str) -> String {
    let material = serde_json::json!({
        "format": CELL_FORMAT,
        "key": key,
        "data": fingerprint,
        "training": c.training,
        "split": c.split,
        "sp_split": c.sp_split,
        "extrapolation": c.extrapolation,
    });
    hex::encode(Sha256::digest(material.to_string().as_bytes()))
}

fn run_cell(c: &SweepConfig, key: &CellKey, hash: &str, data: &Dataset, p: &Prepared) -> Result<CellRecord> {
    let cfg = TrainConfig {
        family: key.family,
        dim: key.dim,
        layers: key.layers,
        lambda: key.lambda,
        learning_rate: c.training.learning_rate,
        batch_size: c.training.batch_size,
        max_epochs: c.training.max_epochs,
        patience: c.training.patience,
        seed: key.seed,
        selection: c.training.selection,
    };
    let out = train(&p.split, &cfg)?;
    let val =
        if p.split.val.is_empty() { None } else { Some(evaluate(&out.model, &out.history, &p.split.val, key.lambda)?) };
    let test = evaluate(&out.model, &out.history, &p.split.test, key.lambda)?;
    let (mut sp_val_mae, mut sp_test_mae) = (None, None);
    if let Some(scores) = data.scores() {
        let reps = out.model.user_representations(&out.history)?;
        let (tr, va, te) = &p.sp_users;
        let scored = |us: &[usize]| us.iter().any(|u| scores.contains_key(u));
        if scored(tr) && scored(va) {
            sp_val_mae = Some(sp_evaluate(&reps, scores, tr, va, c.extrapolation)?.mae);
        }
        if scored(tr) && scored(te) {
            sp_test_mae = Some(sp_evaluate(&reps, scores, tr, te, c.extrapolation)?.mae);
        }
    }
    Ok(CellRecord {
        key: key.clone(),
        hash: hash.to_string(),
        val,
        test,
        sp_val_mae,
        sp_test_mae,
        best_epoch: out.report.best_epoch,
        epochs_run: out.report.epochs.len(),
        stopped_early: out.report.stopped_early,
        selection_value: out.report.best_value,
        wall_clock_secs: out.report.wall_clock_secs,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display(), e))
}

/// Trains every cell not already on disk and writes the reports.
pub fn run_sweep(c: &SweepConfig) -> Result<SweepReport> {
    c.validate()?;
    let loaded: Vec<Loaded> = c.datasets.iter().map(load).collect::<Result<_>>()?;
    let sparsity = c.sparsity_grid();

    let mut prepared: BTreeMap<(usize, u64, usize), Prepared> = BTreeMap::new();
    for (di, l) in loaded.iter().enumerate() {
        for &seed in &c.seeds {
            for (si, &s) in sparsity.iter().enumerate() {
                prepared.insert((di, seed, si), prepare(c, &l.data, seed, s)?);
            }
        }
    }

    let mut jobs = Vec::new();
    for (di, l) in loaded.iter().enumerate() {
        for &family in &c.families {
            for (si, &s) in sparsity.iter().enumerate() {
                for &seed in &c.seeds {
                    for &lambda in &c.lambdas {
                        for &dim in &c.dims {
                            for layers in c.layer_grid(family) {
                                let key =
                                    CellKey { dataset: l.name.clone(), family, sparsity: s, seed, lambda, dim, layers };
                                let hash = cell_hash(c, &key, &l.fingerprint);
                                jobs.push((di, si, key, hash));
                            }
                        }
                    }
                }
            }
        }
    }

    let cell_dir = c.output.join("cells");
    std::fs::create_dir_all(&cell_dir).map_err(|e| Error::io(cell_dir.display(), e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(c.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let cells: Vec<CellOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|(di, si, key, hash)| {
                let path = cell_dir.join(format!("{hash}.json"));
                let previous = std::fs::read_to_string(&path)
                    .ok()
                    .and_then(|t| serde_json::from_str::<CellRecord>(&t).ok())
                    .filter(|r| &r.hash == hash);
                if let Some(record) = previous {
                    return CellOutcome {
                        key: key.clone(),
                        hash: hash.clone(),
                        record: Some(record),
                        error: None,
                        resumed: true,
                    };
                }
                let p = &prepared[&(*di, key.seed, *si)];
                let result = run_cell(c, key, hash, &loaded[*di].data, p).and_then(|r| {
                    write_file(&path, serde_json::to_string_pretty(&r)?.as_bytes())?;
                    Ok(r)
                });
                match result {
                    Ok(r) => CellOutcome {
                        key: key.clone(),
                        hash: hash.clone(),
                        record: Some(r),
                        error: None,
                        resumed: false,
                    },
                    Err(e) => CellOutcome {
                        key: key.clone(),
                        hash: hash.clone(),
                        record: None,
                        error: Some(e.to_string()),
                        resumed: false,
                    },
                }
            })
            .collect()
    });

    let has_scores: BTreeMap<String, bool> =
        loaded.iter().map(|l| (l.name.clone(), l.data.scores().is_some())).collect();
    let summary = summarize(c, &cells, &has_scores)?;
    emit_report(&c.output, &cells, &summary)?;
    Ok(SweepReport { dir: c.output.clone(), cells, summary })
}

/// A sweep over the sparsity grid (default 0% to 70%); every level shares
/// the unmasked test split of its seed.
pub fn run_sparsity_ablation(c: &SweepConfig) -> Result<SweepReport> {
    let mut c = c.clone();
    if c.sparsity.is_none() {
        c.sparsity = Some(ablation_sparsity_grid());
    }
    run_sweep(&c)
}

fn mean(xs: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let mut n = 0usize;
    let mut s = 0.0;
    for x in xs {
        s += x?;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn better(selection: Selection, a: f64, b: f64) -> bool {
    match selection {
        Selection::Loss => a < b,
        Selection::Auc | Selection::Acc => a > b,
    }
}

/// Aggregates cell outcomes: selection over (dim, layers), seed averages,
/// rank table and best lambdas.
pub fn summarize(c: &SweepConfig, cells: &[CellOutcome], has_scores: &BTreeMap<String, bool>) -> Result<SweepSummary> {
    let lambdas = c.lambdas.clone();
    // (dataset, family, sparsity index, lambda index) -> seed -> outcomes
    type GroupKey = (String, ModelFamily, usize, usize);
    let sparsity = c.sparsity_grid();
    let index = |v: f64, grid: &[f64]| grid.iter().position(|g| *g == v).expect("value from the grid");
    let mut groups: BTreeMap<GroupKey, BTreeMap<u64, Vec<&CellOutcome>>> = BTreeMap::new();
    let mut order: Vec<(String, ModelFamily, usize)> = Vec::new();
    for cell in cells {
        let k = &cell.key;
        let g = (k.dataset.clone(), k.family, index(k.sparsity, &sparsity));
        if !order.contains(&g) {
            order.push(g.clone());
        }
        groups.entry((g.0, g.1, g.2, index(k.lambda, &lambdas))).or_default().entry(k.seed).or_default().push(cell);
    }

    let mut table = RankTable::new(lambdas.clone());
    let mut summaries = Vec::new();
    for (dataset, family, si) in order {
        let mut points = Vec::new();
        for (li, &lambda) in lambdas.iter().enumerate() {
            let per_seed = groups.get(&(dataset.clone(), family, si, li)).cloned().unwrap_or_default();
            let mut complete = per_seed.len() == c.seeds.len();
            let mut chosen = Vec::new();
            for (seed, outcomes) in &per_seed {
                complete &= outcomes.iter().all(|o| o.record.is_some());
                let best =
                    outcomes.iter().filter_map(|o| o.record.as_ref()).fold(None::<&CellRecord>, |best, r| match best {
                        Some(b) if !better(c.training.selection, r.selection_value, b.selection_value) => Some(b),
                        _ => Some(r),
                    });
                if let Some(r) = best {
                    chosen.push((*seed, r));
                }
            }
            complete &= chosen.len() == c.seeds.len();
            let avg = |f: &dyn Fn(&CellRecord) -> Option<f64>| {
                if complete {
                    mean(chosen.iter().map(|(_, r)| f(r)))
                } else {
                    None
                }
            };
            points.push(LambdaPoint {
                lambda,
                kt_auc: avg(&|r| r.test.kt_auc),
                ot_acc: avg(&|r| Some(r.test.ot_acc)),
                sp_mae: avg(&|r| r.sp_test_mae),
                val_kt_auc: avg(&|r| r.val.as_ref().and_then(|v| v.kt_auc)),
                val_ot_acc: avg(&|r| r.val.as_ref().map(|v| v.ot_acc)),
                val_sp_mae: avg(&|r| r.sp_val_mae),
                selected: chosen.iter().map(|(s, r)| (*s, r.key.dim, r.key.layers)).collect(),
                complete,
            });
        }
        let tasks: Vec<Task> = Task::ALL
            .into_iter()
            .filter(|t| *t != Task::Sp || has_scores.get(&dataset).copied().unwrap_or(false))
            .collect();
        let mut best = Vec::new();
        for task in tasks {
            let (test, val): (Vec<Option<f64>>, Vec<Option<f64>>) = points
                .iter()
                .map(|p| match task {
                    Task::Kt => (p.kt_auc, p.val_kt_auc),
                    Task::Ot => (p.ot_acc, p.val_ot_acc),
                    Task::Sp => (p.sp_mae, p.val_sp_mae),
                })
                .unzip();
            table.push(RankRow {
                task,
                dataset: dataset.clone(),
                model: family.name().to_string(),
                sparsity: sparsity[si],
                values: test.clone(),
            });
            let higher = task != Task::Sp;
            let pick = val.iter().enumerate().fold(None::<usize>, |b, (k, v)| match (b, v) {
                (_, None) => b,
                (None, Some(_)) => Some(k),
                (Some(j), Some(x)) => {
                    let y = val[j].unwrap();
                    if (higher && *x > y) || (!higher && *x < y) {
                        Some(k)
                    } else {
                        Some(j)
                    }
                }
            });
            best.push(BestLambda { task, lambda: pick.map(|k| lambdas[k]), value: pick.and_then(|k| test[k]) });
        }
        summaries.push(GroupSummary { dataset, family, sparsity: sparsity[si], points, best });
    }

    let complete_rows: Vec<RankRow> =
        table.rows.iter().filter(|r| r.values.iter().all(|v| v.is_some_and(f64::is_finite))).cloned().collect();
    let incomplete_rows = table.rows.len() - complete_rows.len();
    let rank_average = RankTable { lambdas: lambdas.clone(), rows: complete_rows }.rank_average()?;
    Ok(SweepSummary { lambdas, groups: summaries, rank_table: table, incomplete_rows, rank_average })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.4}"))
}

fn status(ok: bool) -> &'static str {
    if ok {
        "complete"
    } else {
        "incomplete"
    }
}

/// Writes `results.csv`, `selected.csv`, `rank_table.csv`,
/// `rank_average.csv`, `lambda_series.csv`, `best_lambda.csv` and
/// `summary.json` into `dir`.
pub fn emit_report(dir: &Path, cells: &[CellOutcome], summary: &SweepSummary) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display(), e))?;
    let save = |name: &str, bytes: Vec<u8>| write_file(&dir.join(name), &bytes);

    let mut s = String::from(
        "dataset,model,sparsity,seed,lambda,dim,layers,best_epoch,val_loss,val_kt_auc,val_ot_acc,val_sp_mae,test_loss,test_kt_auc,test_ot_acc,test_sp_mae,status\n",
    );
    for cell in cells {
        let k = &cell.key;
        write!(
            s,
            "{},{},{:.4},{},{:.4},{},{},",
            k.dataset,
            k.family.name(),
            k.sparsity,
            k.seed,
            k.lambda,
            k.dim,
            k.layers
        )
        .unwrap();
        match &cell.record {
            Some(r) => {
                let v = r.val.as_ref();
                writeln!(
                    s,
                    "{},{},{},{},{},{:.4},{},{:.4},{},complete",
                    r.best_epoch,
                    opt(v.map(|v| v.loss)),
                    opt(v.and_then(|v| v.kt_auc)),
                    opt(v.map(|v| v.ot_acc)),
                    opt(r.sp_val_mae),
                    r.test.loss,
                    opt(r.test.kt_auc),
                    r.test.ot_acc,
                    opt(r.sp_test_mae),
                )
                .unwrap();
            }
            None => s.push_str(",,,,,,,,,incomplete\n"),
        }
    }
    save("results.csv", s.into_bytes())?;

    let mut s = String::from("dataset,model,sparsity,lambda,seed,dim,layers\n");
    let mut series = String::from("dataset,model,sparsity,lambda,kt_auc,ot_acc,sp_mae,status\n");
    let mut best = String::from("dataset,model,sparsity,kt_auc,kt_lambda,ot_acc,ot_lambda,sp_mae,sp_lambda,status\n");
    for g in &summary.groups {
        let head = format!("{},{},{:.4}", g.dataset, g.family.name(), g.sparsity);
        for p in &g.points {
            for (seed, dim, layers) in &p.selected {
                writeln!(s, "{head},{:.4},{seed},{dim},{layers}", p.lambda).unwrap();
            }
            writeln!(
                series,
                "{head},{:.4},{},{},{},{}",
                p.lambda,
                opt(p.kt_auc),
                opt(p.ot_acc),
                opt(p.sp_mae),
                status(p.complete)
            )
            .unwrap();
        }
        let find = |t: Task| g.best.iter().find(|b| b.task == t);
        let mut line = head.clone();
        for t in Task::ALL {
            let b = find(t);
            write!(line, ",{},{}", opt(b.and_then(|b| b.value)), opt(b.and_then(|b| b.lambda))).unwrap();
        }
        writeln!(best, "{line},{}", status(g.points.iter().all(|p| p.complete))).unwrap();
    }
    save("selected.csv", s.into_bytes())?;
    save("lambda_series.csv", series.into_bytes())?;
    save("best_lambda.csv", best.into_bytes())?;

    let mut buf = Vec::new();
    summary.rank_table.write_csv(&mut buf).map_err(|e| Error::io("rank_table.csv", e))?;
    save("rank_table.csv", buf)?;
    let mut buf = Vec::new();
    write_rank_average_csv(&summary.lambdas, &summary.rank_average, &mut buf)
        .map_err(|e| Error::io("rank_average.csv", e))?;
    save("rank_average.csv", buf)?;
    let mut json = serde_json::to_vec_pretty(summary)?;
    json.push(b'\n');
    save("summary.json", json)
}

/// Names of the aggregate files written by [`emit_report`].
pub const AGGREGATE_FILES: [&str; 7] = [
    "results.csv",
    "selected.csv",
    "lambda_series.csv",
    "best_lambda.csv",
    "rank_table.csv",
    "rank_average.csv",
    "summary.json",
];

/// Concatenated aggregate files, for comparing runs.
pub fn aggregate_bytes(dir: &Path) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for name in AGGREGATE_FILES {
        let path = dir.join(name);
        out.extend(std::fs::read(&path).map_err(|e| Error::io(path.display(), e))?);
    }
    Ok(out)
}

/// Writes a sweep config as pretty JSON.
pub fn save_config<W: Write>(c: &SweepConfig, mut w: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, c)?;
    writeln!(w).map_err(|e| Error::io("config", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::write_rank_average_csv;

    fn tiny(dir: &Path) -> SweepConfig {
        SweepConfig {
            datasets: vec![DatasetSpec {
                name: "toy".into(),
                source: DataSource::Synthetic(GenConfig {
                    users: 60,
                    items: 8,
                    options: 3,
                    dim: 2,
                    seed: 4,
                    ..GenConfig::default()
                }),
            }],
            families: vec![ModelFamily::DpIrt],
            lambdas: vec![0.0, 0.5, 1.0],
            dims: vec![2],
            layers: vec![1],
            training: TrainTemplate { learning_rate: 0.05, max_epochs: 4, patience: 2, ..TrainTemplate::default() },
            workers: Some(2),
            output: dir.to_path_buf(),
            ..SweepConfig::default()
        }
    }

    #[test]
    fn defaults_match_the_hyperparameter_grid() {
        let c = SweepConfig::default();
        assert_eq!(c.lambdas, (0..=10).map(|k| k as f64 / 10.0).collect::<Vec<_>>());
        assert_eq!(c.dims, vec![1, 4, 8, 16, 32, 64]);
        assert_eq!(c.layers, vec![1, 2, 3, 4]);
        assert_eq!(ablation_sparsity_grid().len(), 8);
    }

    #[test]
    fn invalid_grids_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let base = tiny(dir.path());
        let cases = [
            SweepConfig { datasets: vec![], ..base.clone() },
            SweepConfig { lambdas: vec![], ..base.clone() },
            SweepConfig { lambdas: vec![1.2], ..base.clone() },
            SweepConfig { layers: vec![5], families: vec![ModelFamily::DpNmf], ..base.clone() },
            SweepConfig { sparsity: Some(vec![1.0]), ..base.clone() },
            SweepConfig { split: [0.5, 0.1, 0.1], ..base.clone() },
            SweepConfig {
                datasets: vec![DatasetSpec {
                    name: "missing".into(),
                    source: DataSource::Files { interactions: dir.path().join("nope.csv"), scores: None },
                }],
                ..base.clone()
            },
        ];
        for c in cases {
            assert!(matches!(run_sweep(&c), Err(Error::Config(_))), "{c:?}");
        }
        // nothing was trained
        assert!(!dir.path().join("cells").exists());
    }

    #[test]
    fn one_cell_gives_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let c = SweepConfig { lambdas: vec![0.5], ..tiny(dir.path()) };
        let r = run_sweep(&c).unwrap();
        assert_eq!(r.cells.len(), 1);
        let results = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(results.lines().count(), 2);
        assert!(results.lines().nth(1).unwrap().ends_with(",complete"));
        assert_eq!(std::fs::read_dir(dir.path().join("cells")).unwrap().count(), 1);
    }

    #[test]
    fn reruns_resume_and_match() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        let first = run_sweep(&c).unwrap();
        assert!(first.cells.iter().all(|x| !x.resumed));
        let bytes = aggregate_bytes(dir.path()).unwrap();
        let second = run_sweep(&c).unwrap();
        assert!(second.cells.iter().all(|x| x.resumed));
        assert_eq!(aggregate_bytes(dir.path()).unwrap(), bytes);

        // an interrupted run: drop one cell file and finish it
        let victim = dir.path().join("cells").join(format!("{}.json", first.cells[1].hash));
        std::fs::remove_file(victim).unwrap();
        let third = run_sweep(&c).unwrap();
        assert_eq!(third.cells.iter().filter(|x| !x.resumed).count(), 1);
        assert_eq!(aggregate_bytes(dir.path()).unwrap(), bytes);
    }

    #[test]
    fn fresh_runs_are_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_sweep(&tiny(a.path())).unwrap();
        let mut c = tiny(b.path());
        c.workers = Some(1);
        run_sweep(&c).unwrap();
        assert_eq!(aggregate_bytes(a.path()).unwrap(), aggregate_bytes(b.path()).unwrap());
    }

    #[test]
    fn zero_sparsity_matches_the_plain_sweep() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let plain = run_sweep(&tiny(a.path())).unwrap();
        let ablation =
            run_sparsity_ablation(&SweepConfig { sparsity: Some(vec![0.0, 0.4]), ..tiny(b.path()) }).unwrap();
        let at_zero: Vec<&CellOutcome> = ablation.cells.iter().filter(|x| x.key.sparsity == 0.0).collect();
        assert_eq!(at_zero.len(), plain.cells.len());
        for (x, y) in plain.cells.iter().zip(at_zero) {
            let (mut x, mut y) = (x.record.clone().unwrap(), y.record.clone().unwrap());
            x.wall_clock_secs = 0.0;
            y.wall_clock_secs = 0.0;
            assert_eq!(x, y);
        }
        let masked = ablation.cells.iter().find(|x| x.key.sparsity == 0.4).unwrap();
        assert_eq!(masked.record.as_ref().unwrap().test.n, plain.cells[0].record.as_ref().unwrap().test.n);
    }

    #[test]
    fn endpoint_cells_equal_direct_runs() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        let r = run_sweep(&c).unwrap();
        let loaded = load(&c.datasets[0]).unwrap();
        let p = prepare(&c, &loaded.data, 0, 0.0).unwrap();
        for lambda in [0.0, 1.0] {
            let cfg = TrainConfig {
                family: ModelFamily::DpIrt,
                dim: 2,
                layers: 1,
                lambda,
                learning_rate: 0.05,
                max_epochs: 4,
                patience: 2,
                seed: 0,
                ..TrainConfig::default()
            };
            let out = train(&p.split, &cfg).unwrap();
            let direct = evaluate(&out.model, &out.history, &p.split.test, lambda).unwrap();
            let cell = r.cells.iter().find(|x| x.key.lambda == lambda).unwrap();
            assert_eq!(cell.record.as_ref().unwrap().test, direct);
        }
    }

    #[test]
    fn empty_sweep_writes_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        let summary = summarize(&c, &[], &BTreeMap::new()).unwrap();
        emit_report(dir.path(), &[], &summary).unwrap();
        for name in [
            "results.csv",
            "selected.csv",
            "lambda_series.csv",
            "best_lambda.csv",
            "rank_table.csv",
            "rank_average.csv",
        ] {
            let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
            assert_eq!(text.lines().count(), 1, "{name}");
        }
    }

    #[test]
    fn failed_cells_are_marked_incomplete() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        let mut r = run_sweep(&c).unwrap();
        r.cells[1].record = None;
        r.cells[1].error = Some("diverged".into());
        let has = BTreeMap::from([("toy".to_string(), true)]);
        let summary = summarize(&c, &r.cells, &has).unwrap();
        assert_eq!(summary.incomplete_rows, 3);
        assert!(summary.rank_average.is_empty());
        emit_report(dir.path(), &r.cells, &summary).unwrap();
        let results = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(results.lines().filter(|l| l.ends_with(",incomplete")).count(), 1);
        let best = std::fs::read_to_string(dir.path().join("best_lambda.csv")).unwrap();
        assert!(best.lines().nth(1).unwrap().ends_with(",incomplete"));
    }

    #[test]
    fn single_row_rank_file_matches_the_metric_example() {
        // one KT row with AUC increasing in lambda ranks lambda 1.0 first
        let lambdas = default_lambda_grid();
        let mut table = RankTable::new(lambdas.clone());
        table.push(RankRow {
            task: Task::Kt,
            dataset: "d".into(),
            model: "m".into(),
            sparsity: 0.0,
            values: lambdas.iter().map(|l| Some(0.5 + l / 10.0)).collect(),
        });
        let summary = SweepSummary {
            lambdas: lambdas.clone(),
            groups: vec![],
            rank_average: table.rank_average().unwrap(),
            rank_table: table,
            incomplete_rows: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        emit_report(dir.path(), &[], &summary).unwrap();
        let text = std::fs::read_to_string(dir.path().join("rank_average.csv")).unwrap();
        let mut expect = Vec::new();
        write_rank_average_csv(&lambdas, &summary.rank_average, &mut expect).unwrap();
        assert_eq!(text.as_bytes(), expect.as_slice());
        assert!(text.contains("kt,0.0,11.0000,1"));
        assert!(text.contains("kt,1.0,1.0000,1"));
        assert!(text.contains("all,0.5,6.0000,1"));
    }

    #[test]
    fn config_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        let mut buf = Vec::new();
        save_config(&c, &mut buf).unwrap();
        let back: SweepConfig = serde_json::from_slice(&buf).unwrap();
        assert_eq!(back, c);
        let sparse: SweepConfig =
            serde_json::from_str(r#"{"datasets": [{"name": "x", "source": {"files": {"interactions": "a.csv"}}}]}"#)
                .unwrap();
        assert_eq!(sparse.dims, vec![1, 4, 8, 16, 32, 64]);
    }
}
