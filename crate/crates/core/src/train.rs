//! Minibatch training under the mixed loss, with early stopping on a
//! validation metric.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{Dataset, Interaction};
use crate::error::{Error, Result};
use crate::ingest::DatasetSplit;
use crate::loss::{dp_loss, dp_loss_node};
use crate::metrics::{ot_accuracy, roc_auc, MetricBundle};
use crate::models::{Checkpoint, History, Model, ModelConfig, ModelFamily};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moments, one pair per parameter tensor, and the step
/// count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.rows(), t.cols());
        AdamState { m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect(), t: 0 }
    }
}

/// One bias-corrected adaptive-moment update. Parameters are left untouched
/// when any gradient is non-finite.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, hyper: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[k].shape() {
            return Err(Error::shape("adam_step", format!("param {k}: {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        if !g.is_finite() {
            let bad = g.data().iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(Error::NonFinite(format!("gradient of parameter {k} at entry {bad}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (idx, w) in p.data_mut().iter_mut().enumerate() {
            m[idx] = hyper.beta1 * m[idx] + (1.0 - hyper.beta1) * g[idx];
            v[idx] = hyper.beta2 * v[idx] + (1.0 - hyper.beta2) * g[idx] * g[idx];
            let m_hat = m[idx] / c1;
            let v_hat = v[idx] / c2;
            *w -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Loss,
    Auc,
    Acc,
}

impl Selection {
    fn value(self, m: &MetricBundle) -> Option<f64> {
        match self {
            Selection::Loss => Some(m.loss),
            Selection::Auc => m.kt_auc,
            Selection::Acc => Some(m.ot_acc),
        }
    }

    fn better(self, a: f64, b: f64) -> bool {
        match self {
            Selection::Loss => a < b,
            Selection::Auc | Selection::Acc => a > b,
        }
    }
}

impl std::str::FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(Selection::Loss),
            "auc" => Ok(Selection::Auc),
            "acc" => Ok(Selection::Acc),
            _ => Err(Error::Config(format!("unknown selection metric {s:?} (loss, auc, acc)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub family: ModelFamily,
    pub dim: usize,
    pub layers: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub selection: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            family: ModelFamily::DpIrt,
            dim: 8,
            layers: 1,
            lambda: 0.5,
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 500,
            patience: 10,
            seed: 0,
            selection: Selection::Loss,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.family, self.dim, self.layers)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and max epochs must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, ..AdamConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Option<MetricBundle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    /// Selection metric actually used; falls back to loss when the
    /// validation part has no usable AUC, or when there is no validation
    /// part (then the training loss decides).
    pub selection: Selection,
    pub best_value: f64,
    pub stopped_early: bool,
    pub checkpoint: Checkpoint,
    /// The only field that differs between identical runs.
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub struct TrainOutcome {
    pub model: Model,
    /// Training-set sequences, which sequential models read as context when
    /// scoring any part.
    pub history: History,
    pub report: TrainReport,
}

/// Groups training queries into minibatches. Sequential models take whole
/// users (every position of a user is a target) until a batch holds at
/// least `batch_size` targets.
fn batches(train: &Dataset, family: ModelFamily, batch_size: usize, r: &mut rng::Rng) -> Vec<Vec<Interaction>> {
    if family.is_sequential() {
        let mut users: Vec<Vec<Interaction>> = train.sequences().into_iter().filter(|s| !s.is_empty()).collect();
        users.shuffle(r);
        let mut out = Vec::new();
        let mut cur: Vec<Interaction> = Vec::new();
        for seq in users {
            cur.extend(seq);
            if cur.len() >= batch_size {
                out.push(std::mem::take(&mut cur));
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    } else {
        let mut xs = train.interactions().to_vec();
        xs.shuffle(r);
        xs.chunks(batch_size).map(<[Interaction]>::to_vec).collect()
    }
}

/// KT-AUC, OT-ACC and mean loss of `model` on `part`.
pub fn evaluate(model: &Model, history: &History, part: &Dataset, lambda: f64) -> Result<MetricBundle> {
    if part.is_empty() {
        return Err(Error::Argument("cannot evaluate on an empty part".into()));
    }
    let xs = part.interactions();
    let logits = model.logits(history, xs)?;
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(xs.len());
    for (z, x) in logits.iter().zip(xs) {
        loss += dp_loss(z, x.chosen, x.correct, lambda)?;
        preds.push(crate::models::option_probabilities(z, x.correct)?);
    }
    let scores: Vec<f64> = preds.iter().map(|p| p.correct_probability()).collect();
    let labels: Vec<bool> = xs.iter().map(Interaction::is_correct).collect();
    let chosen: Vec<usize> = xs.iter().map(|x| x.chosen).collect();
    let kt_auc = match roc_auc(&scores, &labels) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricBundle { kt_auc, ot_acc: ot_accuracy(&preds, &chosen)?, loss: loss / xs.len() as f64, n: xs.len() })
}

pub fn train(split: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::for_dataset(cfg.model_config(), &split.train, cfg.seed)?;
    train_model(model, split, cfg)
}

/// Continues training an existing model; its configuration must match
/// `cfg`'s family, dimension and depth.
pub fn train_model(mut model: Model, split: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let expected = cfg.model_config();
    let got = model.config();
    if (got.family, got.dim, got.layers) != (expected.family, expected.dim, expected.layers) {
        return Err(Error::Config(format!("model {got:?} does not match training config {expected:?}")));
    }
    if split.train.is_empty() {
        return Err(Error::Argument("training part is empty".into()));
    }
    let started = Instant::now();
    let history = History::from_dataset(&split.train);
    let has_val = !split.val.is_empty();
    let single_class = {
        let xs = split.val.interactions();
        xs.iter().all(|x| x.is_correct() == xs[0].is_correct())
    };
    let selection = match cfg.selection {
        _ if !has_val => Selection::Loss,
        Selection::Auc if single_class => Selection::Loss,
        s => s,
    };

    let hyper = cfg.adam();
    let mut state = AdamState::new(model.params().tensors());
    let mut shuffle = rng::substream(cfg.seed, "shuffle");
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let mut total = 0.0;
        let mut count = 0usize;
        for (b, batch) in batches(&split.train, cfg.family, cfg.batch_size, &mut shuffle).iter().enumerate() {
            let (loss, grads) = {
                let mut tape = Tape::new();
                let vars = model.params().bind(&mut tape);
                let f = model.forward(&mut tape, &vars, &history, batch)?;
                let loss = dp_loss_node(&mut tape, f.logits, &f.targets, cfg.lambda)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Divergence { epoch, batch: b, message: format!("loss is {value}") });
                }
                let mut g = tape.backward(loss)?;
                (value, vars.iter().map(|&v| g.take(v)).collect::<Vec<_>>())
            };
            adam_step(model.params_mut().tensors_mut(), &grads, &mut state, &hyper).map_err(|e| Error::Divergence {
                epoch,
                batch: b,
                message: e.to_string(),
            })?;
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        let train_loss = total / count as f64;
        let val = if has_val { Some(evaluate(&model, &history, &split.val, cfg.lambda)?) } else { None };
        let score = match &val {
            Some(m) => selection.value(m).unwrap_or(m.loss),
            None => train_loss,
        };
        epochs.push(EpochStats { epoch, train_loss, val });
        let improved = match &best {
            None => true,
            Some((_, v, _)) => selection.better(score, *v),
        };
        if improved {
            best = Some((epoch, score, model.params().tensors().to_vec()));
        } else if epoch - best.as_ref().map_or(0, |b| b.0) >= cfg.patience.max(1) {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_value, tensors) = best.expect("at least one epoch ran");
    for (dst, src) in model.params_mut().tensors_mut().iter_mut().zip(tensors) {
        *dst = src;
    }
    let report = TrainReport {
        config: cfg.clone(),
        epochs,
        best_epoch,
        selection,
        best_value,
        stopped_early,
        checkpoint: model.checkpoint(cfg.seed),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { model, history, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{split_dataset, SplitSpec, SplitUnit};
    use crate::models::option_probabilities;
    use crate::synth::{generate_dataset, GenConfig};

    fn hyper(lr: f64) -> AdamConfig {
        AdamConfig { learning_rate: lr, ..AdamConfig::default() }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::column(vec![1.0, -2.0])];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(2, 1)], &mut s, &hyper(0.1)).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        adam_step(&mut p, &[Tensor::column(vec![0.3, -0.1])], &mut s, &hyper(0.1)).unwrap();
        let (m, v) = (s.m[0].clone(), s.v[0].clone());
        adam_step(&mut p, &[Tensor::zeros(2, 1)], &mut s, &hyper(0.1)).unwrap();
        for k in 0..2 {
            assert_eq!(s.m[0].data()[k], 0.9 * m.data()[k]);
            assert_eq!(s.v[0].data()[k], 0.999 * v.data()[k]);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::scalar(3.0)];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(0.5)], &mut s, &hyper(0.01)).unwrap();
        let expect = 3.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((p[0].item() - expect).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_tends_to_learning_rate() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p[0].item();
            adam_step(&mut p, &[Tensor::scalar(2.0)], &mut s, &hyper(0.01)).unwrap();
            last = before - p[0].item();
        }
        assert!((last - 0.01).abs() < 1e-9, "{last}");
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut s, &hyper(0.1)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p[0].item(), 1.0);
        assert_eq!(s.t, 0);
    }

    fn single_record() -> DatasetSplit {
        let d = Dataset::new(1, 1, vec![2], vec![Interaction::new(0, 0, 1, 1)], None).unwrap();
        DatasetSplit { train: d.clone(), val: d.with_interactions(vec![]), test: d.with_interactions(vec![]) }
    }

    #[test]
    fn single_correct_record_is_fit() {
        for family in ModelFamily::ALL {
            let cfg = TrainConfig {
                family,
                dim: 2,
                lambda: 1.0,
                learning_rate: 0.05,
                max_epochs: 200,
                patience: 200,
                ..TrainConfig::default()
            };
            let out = train(&single_record(), &cfg).unwrap();
            let losses: Vec<f64> = out.report.epochs.iter().map(|e| e.train_loss).collect();
            assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{family}: {losses:?}");
            assert!(losses.last().unwrap() < &0.01, "{family}: {}", losses.last().unwrap());
        }
    }

    fn synthetic_split(users: usize, items: usize, seed: u64) -> DatasetSplit {
        let g = GenConfig { users, items, options: 4, dim: 2, discrimination: 2.0, seed, ..GenConfig::default() };
        let s = generate_dataset(&g).unwrap();
        split_dataset(&s.dataset, &SplitSpec::new(0.8, 0.1, 0.1, SplitUnit::ByInteraction, seed).unwrap()).unwrap()
    }

    fn quick(family: ModelFamily, lambda: f64) -> TrainConfig {
        TrainConfig {
            family,
            dim: 2,
            layers: 1,
            lambda,
            learning_rate: 0.02,
            batch_size: 128,
            max_epochs: 6,
            patience: 3,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn identical_runs_give_identical_reports() {
        let split = synthetic_split(60, 10, 1);
        for family in ModelFamily::ALL {
            let mut a = train(&split, &quick(family, 0.3)).unwrap().report;
            let mut b = train(&split, &quick(family, 0.3)).unwrap().report;
            a.wall_clock_secs = 0.0;
            b.wall_clock_secs = 0.0;
            assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        }
    }

    #[test]
    fn lambda_is_irrelevant_without_wrong_answers() {
        let split = synthetic_split(50, 8, 2);
        let only_correct =
            |d: &Dataset| d.with_interactions(d.interactions().iter().filter(|x| x.is_correct()).copied().collect());
        let split = DatasetSplit {
            train: only_correct(&split.train),
            val: only_correct(&split.val),
            test: only_correct(&split.test),
        };
        for family in ModelFamily::ALL {
            let a = train(&split, &quick(family, 0.0)).unwrap();
            let b = train(&split, &quick(family, 1.0)).unwrap();
            assert_eq!(a.model.params(), b.model.params(), "{family}");
            let la: Vec<f64> = a.report.epochs.iter().map(|e| e.train_loss).collect();
            let lb: Vec<f64> = b.report.epochs.iter().map(|e| e.train_loss).collect();
            assert_eq!(la, lb);
        }
    }

    #[test]
    fn best_epoch_is_optimal_and_restored() {
        let split = synthetic_split(80, 10, 3);
        let cfg = TrainConfig { max_epochs: 40, learning_rate: 0.1, patience: 2, ..quick(ModelFamily::DpNmf, 0.5) };
        let out = train(&split, &cfg).unwrap();
        let r = &out.report;
        let vals: Vec<f64> = r.epochs.iter().map(|e| e.val.as_ref().unwrap().loss).collect();
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(vals[r.best_epoch - 1], min);
        assert_eq!(r.best_value, min);
        let now = evaluate(&out.model, &out.history, &split.val, 0.5).unwrap();
        assert_eq!(now.loss, min);
        if r.stopped_early {
            assert_eq!(r.epochs.len(), r.best_epoch + 2);
        }
    }

    #[test]
    fn selection_by_accuracy_and_auc() {
        let split = synthetic_split(80, 10, 4);
        for sel in [Selection::Auc, Selection::Acc] {
            let cfg = TrainConfig { selection: sel, max_epochs: 8, ..quick(ModelFamily::DpIrt, 0.5) };
            let r = train(&split, &cfg).unwrap().report;
            assert_eq!(r.selection, sel);
            let vals: Vec<f64> = r.epochs.iter().map(|e| sel.value(e.val.as_ref().unwrap()).unwrap()).collect();
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(r.best_value, max);
        }
    }

    #[test]
    fn learning_beats_the_permutation_null() {
        // val AUC of a trained model against the spread of AUCs of the same
        // scores under shuffled labels
        let split = synthetic_split(200, 50, 5);
        let cfg = TrainConfig { max_epochs: 30, ..quick(ModelFamily::DpIrt, 0.5) };
        let out = train(&split, &cfg).unwrap();
        let preds = out.model.predict(&out.history, split.val.interactions()).unwrap();
        let scores: Vec<f64> = preds.iter().map(|p| p.correct_probability()).collect();
        let mut labels: Vec<bool> = split.val.interactions().iter().map(Interaction::is_correct).collect();
        let auc = roc_auc(&scores, &labels).unwrap();
        let mut r = rng::seeded(0);
        let null: Vec<f64> = (0..200)
            .map(|_| {
                labels.shuffle(&mut r);
                roc_auc(&scores, &labels).unwrap()
            })
            .collect();
        let mean = null.iter().sum::<f64>() / 200.0;
        let sd = (null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 199.0).sqrt();
        assert!(auc > 0.5 + 5.0 * sd, "{auc} vs sd {sd}");
    }

    #[test]
    fn evaluation_examples() {
        let d = Dataset::new(
            2,
            2,
            vec![2, 3],
            vec![
                Interaction::new(0, 0, 0, 0),
                Interaction::new(0, 1, 1, 2),
                Interaction::new(1, 0, 1, 0),
                Interaction::new(1, 1, 2, 2),
            ],
            None,
        )
        .unwrap();
        let mut model = Model::for_dataset(ModelConfig::new(ModelFamily::DpIrt, 1, 1), &d, 0).unwrap();
        for t in model.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let h = History::empty(2);
        let m = evaluate(&model, &h, &d, 0.5).unwrap();
        // uniform predictions: ties go to option 0
        assert_eq!(m.ot_acc, 0.25);
        assert_eq!(m.kt_auc, Some(0.5));
        let expect = [0.0, 1.0, 1.0, 0.0]
            .iter()
            .zip(d.interactions())
            .map(|(_, x)| dp_loss(&vec![0.0; d.option_count(x.item)], x.chosen, x.correct, 0.5).unwrap())
            .sum::<f64>()
            / 4.0;
        assert!((m.loss - expect).abs() < 1e-15);
        let p = option_probabilities(&[0.0, 0.0, 0.0], 2).unwrap();
        assert!((p.correct_probability() - 1.0 / 3.0).abs() < 1e-15);
        assert!(evaluate(&model, &h, &d.with_interactions(vec![]), 0.5).is_err());
    }

    #[test]
    fn bad_config_rejected() {
        let split = single_record();
        for cfg in [
            TrainConfig { lambda: 1.5, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { family: ModelFamily::DpNmf, layers: 5, ..TrainConfig::default() },
        ] {
            assert!(matches!(train(&split, &cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }
}
