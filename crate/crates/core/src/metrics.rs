//! Evaluation metrics and the rank-averaging analysis over the lambda grid.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::OptionPrediction;
use crate::error::{Error, Result};

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, ties counting one half.
///
/// Computed from average ranks, so the numerator is a sum of half-integers
/// and matches the pairwise count exactly.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!("AUC needs both classes, got {pos} positive and {neg} negative")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1..=end share their mean
        let avg = (start + 1 + end) as f64 / 2.0;
        let positives = order[start..end].iter().filter(|&&k| labels[k]).count();
        rank_sum += avg * positives as f64;
        start = end;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Fraction of predictions whose most probable option (lowest index on
/// ties) is the chosen one.
pub fn ot_accuracy(predictions: &[OptionPrediction], chosen: &[usize]) -> Result<f64> {
    if predictions.len() != chosen.len() {
        return Err(Error::Argument(format!("{} predictions but {} choices", predictions.len(), chosen.len())));
    }
    if predictions.is_empty() {
        return Err(Error::Argument("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(chosen).filter(|(p, &c)| p.argmax() == c).count();
    Ok(hits as f64 / predictions.len() as f64)
}

pub fn mae(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::Argument(format!("{} predictions but {} targets", predicted.len(), actual.len())));
    }
    if predicted.is_empty() {
        return Err(Error::Argument("MAE of an empty set".into()));
    }
    let total: f64 = predicted.iter().zip(actual).map(|(p, a)| (p - a).abs()).sum();
    Ok(total / predicted.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Kt,
    Ot,
    Sp,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Kt, Task::Ot, Task::Sp];

    pub fn name(self) -> &'static str {
        match self {
            Task::Kt => "kt",
            Task::Ot => "ot",
            Task::Sp => "sp",
        }
    }

    /// KT is scored by AUC and OT by accuracy (higher is better); SP by MAE.
    pub fn orientation(self) -> Orientation {
        match self {
            Task::Kt | Task::Ot => Orientation::HigherIsBetter,
            Task::Sp => Orientation::LowerIsBetter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherIsBetter,
    LowerIsBetter,
}

/// Ranks `values` (1 = best) with tied values sharing their mean rank.
pub fn rank_values(values: &[f64], orientation: Orientation) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| match orientation {
        Orientation::HigherIsBetter => values[b].total_cmp(&values[a]),
        Orientation::LowerIsBetter => values[a].total_cmp(&values[b]),
    });
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + 1 + end) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    ranks
}

/// One configuration's metric across the lambda grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub task: Task,
    pub dataset: String,
    pub model: String,
    pub sparsity: f64,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub lambdas: Vec<f64>,
    pub rows: Vec<RankRow>,
}

/// The eleven mixing ratios 0.0, 0.1, ..., 1.0.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAverage {
    /// `None` for the average over every task.
    pub task: Option<Task>,
    pub rows: usize,
    pub mean_ranks: Vec<f64>,
}

impl RankTable {
    pub fn new(lambdas: Vec<f64>) -> Self {
        RankTable { lambdas, rows: Vec::new() }
    }

    pub fn push(&mut self, row: RankRow) {
        self.rows.push(row);
    }

    fn complete_row(&self, row: &RankRow) -> Result<Vec<f64>> {
        if row.values.len() != self.lambdas.len() {
            return Err(Error::IncompleteTable(format!(
                "{} {} {} sparsity {}: {} cells for {} lambdas",
                row.task.name(),
                row.dataset,
                row.model,
                row.sparsity,
                row.values.len(),
                self.lambdas.len()
            )));
        }
        row.values
            .iter()
            .zip(&self.lambdas)
            .map(|(v, lambda)| {
                v.filter(|x| x.is_finite()).ok_or_else(|| {
                    Error::IncompleteTable(format!(
                        "missing cell: task {} dataset {} model {} sparsity {} lambda {lambda}",
                        row.task.name(),
                        row.dataset,
                        row.model,
                        row.sparsity
                    ))
                })
            })
            .collect()
    }

    /// Ranks of every row, in row order.
    pub fn ranks(&self) -> Result<Vec<Vec<f64>>> {
        self.rows.iter().map(|r| Ok(rank_values(&self.complete_row(r)?, r.task.orientation()))).collect()
    }

    /// Mean rank per lambda for each task present, followed by the mean
    /// over all rows.
    pub fn rank_average(&self) -> Result<Vec<RankAverage>> {
        let ranks = self.ranks()?;
        let mean = |select: &dyn Fn(&RankRow) -> bool| -> (usize, Vec<f64>) {
            let mut sums = vec![0.0; self.lambdas.len()];
            let mut n = 0;
            for (row, r) in self.rows.iter().zip(&ranks) {
                if select(row) {
                    n += 1;
                    for (s, v) in sums.iter_mut().zip(r) {
                        *s += v;
                    }
                }
            }
            (n, sums.into_iter().map(|s| s / n.max(1) as f64).collect())
        };
        let mut out = Vec::new();
        for task in Task::ALL {
            let (rows, mean_ranks) = mean(&|r: &RankRow| r.task == task);
            if rows > 0 {
                out.push(RankAverage { task: Some(task), rows, mean_ranks });
            }
        }
        let (rows, mean_ranks) = mean(&|_| true);
        if rows > 0 {
            out.push(RankAverage { task: None, rows, mean_ranks });
        }
        Ok(out)
    }

    /// The lambda of the best cell in every row (first on ties).
    pub fn best_lambdas(&self) -> Result<Vec<f64>> {
        let ranks = self.ranks()?;
        Ok(ranks
            .iter()
            .map(|r| {
                let k = r.iter().enumerate().fold(0, |best, (k, v)| if *v < r[best] { k } else { best });
                self.lambdas[k]
            })
            .collect())
    }

    /// `task,dataset,model,sparsity,lambda_0.0,...`; missing cells are empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = String::from("task,dataset,model,sparsity");
        for l in &self.lambdas {
            write!(header, ",lambda_{l:.1}").unwrap();
        }
        writeln!(w, "{header}")?;
        for r in &self.rows {
            let mut line = format!("{},{},{},{:.4}", r.task.name(), r.dataset, r.model, r.sparsity);
            for v in &r.values {
                match v {
                    Some(x) => write!(line, ",{x:.4}").unwrap(),
                    None => line.push(','),
                }
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// `task,lambda,mean_rank,rows`, one line per (task, lambda).
pub fn write_rank_average_csv<W: Write>(lambdas: &[f64], averages: &[RankAverage], mut w: W) -> std::io::Result<()> {
    writeln!(w, "task,lambda,mean_rank,rows")?;
    for a in averages {
        let task = a.task.map_or("all", Task::name);
        for (l, m) in lambdas.iter().zip(&a.mean_ranks) {
            writeln!(w, "{task},{l:.1},{m:.4},{}", a.rows)?;
        }
    }
    Ok(())
}

/// KT-AUC, OT-ACC and mean loss over one part of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    /// Absent when the part holds a single correctness class.
    pub kt_auc: Option<f64>,
    pub ot_acc: f64,
    pub loss: f64,
    pub n: usize,
}
