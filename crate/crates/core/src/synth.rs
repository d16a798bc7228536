//! Polytomous IRT simulator with known ground truth.
//!
//! Users get `theta ~ N(0, I_d)`, and every option gets `a ~ N(0, I_d)` scaled
//! by `discrimination / sqrt(d)`, so a logit `theta . a` has standard
//! deviation close to `discrimination`. Choices are drawn from
//! `softmax(theta . a_k / tau_k)`, where `tau_k` is `temperature` for the keyed
//! option and `distractor_temperature` for the others. The keyed option is
//! the one best aligned with the ability direction `1 / sqrt(d)`, so stronger
//! users answer correctly more often. The truth is itself a DP-IRT model
//! with option vectors `a_k / tau_k`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax, Tensor};
use crate::data::{Dataset, Interaction};
use crate::error::{Error, Result};
use crate::ingest::{write_interactions, write_scores};
use crate::metrics::{ot_accuracy, roc_auc};
use crate::models::irt::{OPTION_BIAS, OPTION_VECTORS, USER_VECTORS};
use crate::models::{History, Model, ModelConfig, ModelFamily, OptionLayout, ParameterStore};
use crate::rng;

/// Linear score link `intercept + scale * (w . theta) + N(0, noise_sigma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLink {
    pub intercept: f64,
    pub scale: f64,
    /// Defaults to the ability direction `1 / sqrt(d)`.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    pub noise_sigma: f64,
}

impl Default for ScoreLink {
    fn default() -> Self {
        ScoreLink { intercept: 500.0, scale: 100.0, weights: None, noise_sigma: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub users: usize,
    pub items: usize,
    /// Options per item; with `max_options` set, counts are drawn uniformly
    /// from `options..=max_options`.
    pub options: usize,
    pub max_options: Option<usize>,
    pub dim: usize,
    pub discrimination: f64,
    pub temperature: f64,
    /// Temperature of the distractors; `None` uses `temperature`. Large
    /// values make the choice among wrong options uninformative.
    pub distractor_temperature: Option<f64>,
    /// Standard deviation of per-option biases (option popularity).
    pub bias_scale: f64,
    /// Fraction of user-item pairs observed.
    pub density: f64,
    pub score: Option<ScoreLink>,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            users: 2000,
            items: 100,
            options: 5,
            max_options: None,
            dim: 8,
            discrimination: 1.5,
            temperature: 1.0,
            distractor_temperature: None,
            bias_scale: 0.5,
            density: 1.0,
            score: Some(ScoreLink::default()),
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.users == 0 || self.items == 0 || self.dim == 0 {
            return Err(Error::Config("users, items and dim must be positive".into()));
        }
        if self.options < 2 || self.max_options.is_some_and(|m| m < self.options) {
            return Err(Error::Config(format!(
                "option counts need 2 <= options <= max_options, got {} and {:?}",
                self.options, self.max_options
            )));
        }
        if !positive(self.discrimination)
            || !positive(self.temperature)
            || !self.distractor_temperature.is_none_or(positive)
        {
            return Err(Error::Config("discrimination and temperatures must be positive and finite".into()));
        }
        if !(self.bias_scale >= 0.0 && self.bias_scale.is_finite()) {
            return Err(Error::Config("bias scale must be non-negative".into()));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density must lie in (0, 1], got {}", self.density)));
        }
        if let Some(s) = &self.score {
            if s.noise_sigma.is_nan() || s.noise_sigma < 0.0 || !s.intercept.is_finite() || !s.scale.is_finite() {
                return Err(Error::Config("score link must be finite with non-negative noise".into()));
            }
            if s.weights.as_ref().is_some_and(|w| w.len() != self.dim) {
                return Err(Error::Config("score weights must have length dim".into()));
            }
        }
        Ok(())
    }

    fn score_weights(&self) -> Vec<f64> {
        self.score
            .as_ref()
            .and_then(|s| s.weights.clone())
            .unwrap_or_else(|| vec![1.0 / (self.dim as f64).sqrt(); self.dim])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// DP-IRT parameters (with option bias) that generated the choices.
    pub truth: ParameterStore,
    /// Noise-free scores `intercept + scale * (w . theta)`, when scores are
    /// generated.
    pub clean_scores: Option<BTreeMap<usize, f64>>,
}

impl Synthetic {
    pub fn truth_model(&self) -> Result<Model> {
        truth_model(&self.dataset, &self.truth)
    }

    /// Rows of the true user matrix.
    pub fn theta(&self) -> Vec<Vec<f64>> {
        let t = self.truth.get(USER_VECTORS).expect("truth has user vectors");
        (0..t.rows()).map(|u| t.row_slice(u).to_vec()).collect()
    }
}

pub fn generate_dataset(g: &GenConfig) -> Result<Synthetic> {
    g.validate()?;
    let d = g.dim;
    let mut r_theta = rng::substream(g.seed, "synth-theta");
    let mut r_items = rng::substream(g.seed, "synth-items");
    let mut r_resp = rng::substream(g.seed, "synth-responses");
    let mut r_score = rng::substream(g.seed, "synth-scores");

    let theta = Tensor::new(g.users, d, (0..g.users * d).map(|_| gauss(&mut r_theta)).collect())?;
    let counts: Vec<usize> = (0..g.items)
        .map(|_| match g.max_options {
            Some(m) => r_items.random_range(g.options..=m),
            None => g.options,
        })
        .collect();
    let layout = OptionLayout::new(&counts);
    let a_scale = g.discrimination / (d as f64).sqrt();
    let ability = vec![1.0 / (d as f64).sqrt(); d];
    let tau_d = g.distractor_temperature.unwrap_or(g.temperature);

    let mut vectors = Tensor::zeros(layout.total(), d);
    let mut bias = Tensor::zeros(layout.total(), 1);
    let mut key = Vec::with_capacity(g.items);
    for (i, &j) in counts.iter().enumerate() {
        let raw: Vec<Vec<f64>> = (0..j).map(|_| (0..d).map(|_| a_scale * gauss(&mut r_items)).collect()).collect();
        let b: Vec<f64> = (0..j).map(|_| g.bias_scale * gauss(&mut r_items)).collect();
        let align = |v: &Vec<f64>| v.iter().zip(&ability).map(|(x, w)| x * w).sum::<f64>();
        let c = (0..j)
            .max_by(|&x, &y| align(&raw[x]).total_cmp(&align(&raw[y])).then(y.cmp(&x)))
            .expect("at least two options");
        key.push(c);
        for k in 0..j {
            let tau = if k == c { g.temperature } else { tau_d };
            let row = layout.global(i, k);
            for (dst, src) in vectors.row_slice_mut(row).iter_mut().zip(&raw[k]) {
                *dst = src / tau;
            }
            bias.row_slice_mut(row)[0] = b[k] / tau;
        }
    }

    let mut interactions = Vec::with_capacity(g.users * g.items);
    let mut order: Vec<usize> = (0..g.items).collect();
    for u in 0..g.users {
        order.shuffle(&mut r_resp);
        let mut position = 0u64;
        for &i in &order {
            if g.density < 1.0 && r_resp.random::<f64>() >= g.density {
                continue;
            }
            let logits: Vec<f64> = (0..counts[i])
                .map(|k| {
                    let row = layout.global(i, k);
                    dot(theta.row_slice(u), vectors.row_slice(row)) + bias.row_slice(row)[0]
                })
                .collect();
            let chosen = sample_categorical(&logits, r_resp.random::<f64>());
            interactions.push(Interaction::new(u, i, chosen, key[i]).with_position(position));
            position += 1;
        }
    }
    interactions.sort_by_key(|x| (x.user, x.position));

    let (scores, clean_scores) = match &g.score {
        None => (None, None),
        Some(link) => {
            let w = g.score_weights();
            let noise = Normal::new(0.0, link.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
            let mut noisy = BTreeMap::new();
            let mut clean = BTreeMap::new();
            for u in 0..g.users {
                let s = link.intercept + link.scale * dot(theta.row_slice(u), &w);
                let e = if link.noise_sigma > 0.0 { noise.sample(&mut r_score) } else { 0.0 };
                clean.insert(u, s);
                noisy.insert(u, s + e);
            }
            (Some(noisy), Some(clean))
        }
    };

    let dataset = Dataset::new(g.users, g.items, counts, interactions, scores)?;
    let mut truth = ParameterStore::new();
    truth.push(USER_VECTORS, theta);
    truth.push(OPTION_VECTORS, vectors);
    truth.push(OPTION_BIAS, bias);
    Ok(Synthetic { dataset, truth, clean_scores })
}

fn gauss(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Inverse-CDF draw from `softmax(logits)` with a uniform `u` in `[0, 1)`.
fn sample_categorical(logits: &[f64], u: f64) -> usize {
    let lp = log_softmax(logits);
    let mut acc = 0.0;
    for (k, l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return k;
        }
    }
    // rounding left the cumulative sum just below one
    lp.iter().enumerate().rev().find(|(_, l)| l.exp() > 0.0).map_or(logits.len() - 1, |(k, _)| k)
}

/// The truth as a DP-IRT model over `d`'s index space.
pub fn truth_model(d: &Dataset, truth: &ParameterStore) -> Result<Model> {
    let users = truth.get(USER_VECTORS).ok_or_else(|| Error::Contract("truth lacks user vectors".into()))?;
    let mut config = ModelConfig::new(ModelFamily::DpIrt, users.cols(), 1);
    config.option_bias = truth.get(OPTION_BIAS).is_some();
    Model::from_parts(config, d.num_users(), d.options_per_item(), truth.clone())
}

/// Performance ceilings: KT-AUC and OT-ACC of the generating
/// probabilities on `d`. The AUC is absent when `d` has one correctness
/// class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ceilings {
    pub kt_auc: Option<f64>,
    pub ot_acc: f64,
}

pub fn bayes_optimal_metrics(d: &Dataset, truth: &ParameterStore) -> Result<Ceilings> {
    let model = truth_model(d, truth)?;
    let preds = model.predict(&History::empty(d.num_users()), d.interactions())?;
    let scores: Vec<f64> = preds.iter().map(|p| p.correct_probability()).collect();
    let labels: Vec<bool> = d.interactions().iter().map(Interaction::is_correct).collect();
    let chosen: Vec<usize> = d.interactions().iter().map(|x| x.chosen).collect();
    let kt_auc = match roc_auc(&scores, &labels) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Ceilings { kt_auc, ot_acc: ot_accuracy(&preds, &chosen)? })
}

/// Writes `interactions.csv`, `scores.csv` (when present) and the truth as a
/// model checkpoint `truth.json` into `dir`.
pub fn emit(s: &Synthetic, dir: &Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display(), e))?;
    let path = dir.join("interactions.csv");
    let f = std::fs::File::create(&path).map_err(|e| Error::io(path.display(), e))?;
    write_interactions(&s.dataset, std::io::BufWriter::new(f)).map_err(|e| Error::io(path.display(), e))?;
    if let Some(scores) = s.dataset.scores() {
        let path = dir.join("scores.csv");
        let f = std::fs::File::create(&path).map_err(|e| Error::io(path.display(), e))?;
        write_scores(scores, std::io::BufWriter::new(f)).map_err(|e| Error::io(path.display(), e))?;
    }
    s.truth_model()?.checkpoint(seed).save(&dir.join("truth.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_dataset;
    use crate::ingest::load_dataset;

    fn small(seed: u64) -> GenConfig {
        GenConfig { users: 300, items: 20, options: 4, dim: 3, seed, ..GenConfig::default() }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let a = generate_dataset(&small(5)).unwrap();
        let b = generate_dataset(&small(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.dataset, generate_dataset(&small(6)).unwrap().dataset);
    }

    #[test]
    fn generated_data_validates() {
        let g = GenConfig { max_options: Some(6), density: 0.6, ..small(1) };
        let s = generate_dataset(&g).unwrap();
        assert!(validate_dataset(&s.dataset).is_empty());
        assert!(s.dataset.options_per_item().iter().all(|&j| (4..=6).contains(&j)));
        let frac = s.dataset.len() as f64 / (300.0 * 20.0);
        assert!((frac - 0.6).abs() < 0.05, "{frac}");
    }

    #[test]
    fn hot_choices_are_uniform() {
        let g = GenConfig { users: 2000, items: 5, temperature: 1e9, ..small(2) };
        let s = generate_dataset(&g).unwrap();
        for item in 0..5 {
            let mut freq = [0usize; 4];
            for x in s.dataset.interactions().iter().filter(|x| x.item == item) {
                freq[x.chosen] += 1;
            }
            // binomial(2000, 1/4) three-sigma band
            let sd = (2000.0f64 * 0.25 * 0.75).sqrt();
            for f in freq {
                assert!((f as f64 - 500.0).abs() < 3.0 * sd + 1.0, "{freq:?}");
            }
        }
        let c = bayes_optimal_metrics(&s.dataset, &s.truth).unwrap();
        assert!((c.ot_acc - 0.25).abs() < 0.03, "{c:?}");
        assert!((c.kt_auc.unwrap() - 0.5).abs() < 0.05, "{c:?}");
    }

    #[test]
    fn cold_choices_are_deterministic() {
        let g = GenConfig { temperature: 1e-6, ..small(3) };
        let s = generate_dataset(&g).unwrap();
        let model = s.truth_model().unwrap();
        let logits = model.logits(&History::empty(300), s.dataset.interactions()).unwrap();
        for (z, x) in logits.iter().zip(s.dataset.interactions()) {
            let best = (0..z.len()).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
            assert_eq!(best, x.chosen);
        }
        let c = bayes_optimal_metrics(&s.dataset, &s.truth).unwrap();
        assert_eq!(c.ot_acc, 1.0);
        assert_eq!(c.kt_auc, Some(1.0));
    }

    #[test]
    fn ceilings_grow_with_discrimination() {
        let mut prev = (0.0, 0.0);
        for disc in [0.5, 1.5, 3.0] {
            let g = GenConfig { users: 1000, discrimination: disc, ..small(4) };
            let s = generate_dataset(&g).unwrap();
            let c = bayes_optimal_metrics(&s.dataset, &s.truth).unwrap();
            let auc = c.kt_auc.unwrap();
            assert!(auc > prev.0 && c.ot_acc > prev.1, "{disc}: {c:?}");
            prev = (auc, c.ot_acc);
        }
    }

    #[test]
    fn stronger_users_answer_correctly_more_often() {
        let s = generate_dataset(&small(7)).unwrap();
        let theta = s.theta();
        let ability = |u: usize| theta[u].iter().sum::<f64>();
        let mut rate = vec![(0.0, 0.0); 300];
        for x in s.dataset.interactions() {
            rate[x.user].0 += f64::from(u8::from(x.is_correct()));
            rate[x.user].1 += 1.0;
        }
        let mut users: Vec<usize> = (0..300).collect();
        users.sort_by(|&a, &b| ability(a).total_cmp(&ability(b)));
        let mean = |us: &[usize]| us.iter().map(|&u| rate[u].0 / rate[u].1).sum::<f64>() / us.len() as f64;
        assert!(mean(&users[200..]) > mean(&users[..100]) + 0.1);
    }

    #[test]
    fn noise_free_scores_are_linear_in_theta() {
        let g = GenConfig { score: Some(ScoreLink { noise_sigma: 0.0, ..ScoreLink::default() }), ..small(8) };
        let s = generate_dataset(&g).unwrap();
        let w = g.score_weights();
        for (u, t) in s.theta().iter().enumerate() {
            let expect = 500.0 + 100.0 * dot(t, &w);
            assert_eq!(s.dataset.scores().unwrap()[&u], expect);
        }
    }

    #[test]
    fn emitted_files_load_back() {
        let s = generate_dataset(&small(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit(&s, dir.path(), 9).unwrap();
        let back = load_dataset(&dir.path().join("interactions.csv"), Some(&dir.path().join("scores.csv"))).unwrap();
        assert_eq!(back.interactions(), s.dataset.interactions());
        assert_eq!(back.options_per_item(), s.dataset.options_per_item());
        let model = crate::models::Checkpoint::load(&dir.path().join("truth.json")).unwrap().into_model().unwrap();
        assert_eq!(model.params(), &s.truth);
    }

    #[test]
    fn invalid_configs_rejected() {
        for g in [
            GenConfig { options: 1, ..small(0) },
            GenConfig { temperature: 0.0, ..small(0) },
            GenConfig { density: 0.0, ..small(0) },
            GenConfig { max_options: Some(2), ..small(0) },
        ] {
            assert!(matches!(generate_dataset(&g), Err(Error::Config(_))));
        }
    }
}
