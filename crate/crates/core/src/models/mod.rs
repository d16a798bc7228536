//! The three model families. Each maps a (user, item) query to one logit
//! per option of the item, scoring every option with the same function of
//! its own embedding, so relabelling an item's options relabels the output
//! the same way and items may have different option counts.
//!
//! * [`ModelFamily::DpIrt`]: dot product of a user vector and a per-option
//!   vector, plus an optional per-option bias.
//! * [`ModelFamily::DpNmf`]: a shared multilayer scorer over
//!   `[user embedding; option embedding]`.
//! * [`ModelFamily::DpBidkt`]: forward and backward LSTM summaries of the
//!   user's other responses, combined with the candidate option embedding.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Tape, Tensor, Var};
use crate::data::{Dataset, Interaction, OptionPrediction};
use crate::error::{Error, Result};
use crate::loss::Target;
use crate::rng::{self, Rng};

pub mod bidkt;
pub mod irt;
pub mod nmf;

pub use bidkt::dp_bidkt_forward;
pub use irt::dp_irt_forward;
pub use nmf::dp_nmf_forward;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    DpIrt,
    DpNmf,
    DpBidkt,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 3] = [ModelFamily::DpIrt, ModelFamily::DpNmf, ModelFamily::DpBidkt];

    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::DpIrt => "dp-irt",
            ModelFamily::DpNmf => "dp-nmf",
            ModelFamily::DpBidkt => "dp-bidkt",
        }
    }

    /// Whether predictions depend on the user's other responses.
    pub fn is_sequential(self) -> bool {
        matches!(self, ModelFamily::DpBidkt)
    }

    /// Whether the layer count is a hyperparameter of the family.
    pub fn uses_layers(self) -> bool {
        !matches!(self, ModelFamily::DpIrt)
    }
}

impl std::str::FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "dp-irt" | "irt" => Ok(ModelFamily::DpIrt),
            "dp-nmf" | "nmf" => Ok(ModelFamily::DpNmf),
            "dp-bidkt" | "bidkt" => Ok(ModelFamily::DpBidkt),
            other => Err(Error::Config(format!("unknown model family {other:?}"))),
        }
    }
}

impl std::fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: ModelFamily,
    /// Embedding dimension; also the hidden width of scorers and LSTMs.
    pub dim: usize,
    /// Scorer depth (NMF) or LSTM stack depth (BiDKT), 1 to 4.
    pub layers: usize,
    /// Per-option bias for DP-IRT.
    #[serde(default = "default_true")]
    pub option_bias: bool,
}

impl ModelConfig {
    pub fn new(family: ModelFamily, dim: usize, layers: usize) -> Self {
        ModelConfig { family, dim, layers, option_bias: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if self.family.uses_layers() && !(1..=4).contains(&self.layers) {
            return Err(Error::Config(format!(
                "layer count must be within 1..=4 for {}, got {}",
                self.family, self.layers
            )));
        }
        Ok(())
    }
}

/// Global numbering of (item, option) pairs: item `i`'s options occupy rows
/// `offset(i)..offset(i) + count(i)` of every per-option table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionLayout {
    counts: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
}

impl OptionLayout {
    pub fn new(counts: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(counts.len());
        let mut total = 0;
        for &c in counts {
            offsets.push(total);
            total += c;
        }
        OptionLayout { counts: counts.to_vec(), offsets, total }
    }

    pub fn num_items(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, item: usize) -> usize {
        self.counts[item]
    }

    pub fn offset(&self, item: usize) -> usize {
        self.offsets[item]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn global(&self, item: usize, option: usize) -> usize {
        self.offsets[item] + option
    }

    /// Flat query segments plus, for every logit row, the query it belongs
    /// to and the global option it scores.
    pub(crate) fn expand(&self, queries: &[Interaction]) -> Result<Expanded> {
        let mut targets = Vec::with_capacity(queries.len());
        let mut query_of_row = Vec::new();
        let mut option_rows = Vec::new();
        for (q, x) in queries.iter().enumerate() {
            if x.item >= self.counts.len() {
                return Err(Error::shape("query", format!("item {} of {}", x.item, self.counts.len())));
            }
            let count = self.counts[x.item];
            targets.push(Target { offset: option_rows.len(), options: count, chosen: x.chosen, correct: x.correct });
            for k in 0..count {
                query_of_row.push(q);
                option_rows.push(self.offsets[x.item] + k);
            }
        }
        Ok(Expanded { targets, query_of_row, option_rows })
    }
}

pub(crate) struct Expanded {
    pub targets: Vec<Target>,
    pub query_of_row: Vec<usize>,
    pub option_rows: Vec<usize>,
}

/// Parameter tables with one row per (item, option) pair are named with
/// this prefix.
pub const OPTION_TABLE_PREFIX: &str = "option_";

/// Named trainable tensors in a fixed order. The order is the order in
/// which they are registered on a tape and updated by the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|k| &self.tensors[k])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |k| &mut self.tensors[k])
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor on a tape, in order.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t)).collect()
    }
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-user response sequences a sequential model reads as context.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    seqs: Vec<Vec<Interaction>>,
}

impl History {
    pub fn from_dataset(d: &Dataset) -> Self {
        History { seqs: d.sequences() }
    }

    pub fn empty(num_users: usize) -> Self {
        History { seqs: vec![Vec::new(); num_users] }
    }

    pub fn sequence(&self, user: usize) -> &[Interaction] {
        self.seqs.get(user).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn num_users(&self) -> usize {
        self.seqs.len()
    }
}

/// Logits for a batch of queries as a flat `K x 1` column, with the segment
/// of every query.
pub struct Forward {
    pub logits: Var,
    pub targets: Vec<Target>,
    /// Per-query context vectors (BiDKT only), one row per query.
    pub contexts: Option<Var>,
}

/// Softmax over an item's option logits.
pub fn option_probabilities(logits: &[f64], correct_index: usize) -> Result<OptionPrediction> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("option logits".into()));
    }
    if correct_index >= logits.len() {
        return Err(Error::Argument(format!(
            "correct index {correct_index} out of range for {} options",
            logits.len()
        )));
    }
    Ok(OptionPrediction { probs: softmax(logits), correct_index })
}

/// A model of one family with its parameters and option layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    num_users: usize,
    layout: OptionLayout,
    params: ParameterStore,
}

pub(crate) fn uniform(rows: usize, cols: usize, bound: f64, r: &mut Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| r.random_range(-bound..=bound)).collect();
    Tensor::new(rows, cols, data).expect("shape")
}

/// Orthogonal `d x d` matrix from the QR factorization of a Gaussian one.
pub(crate) fn orthogonal(d: usize, r: &mut Rng) -> Vec<f64> {
    let m = nalgebra::DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(r));
    let qr = m.qr();
    let (q, rmat) = (qr.q(), qr.r());
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let sign = if rmat[(j, j)] < 0.0 { -1.0 } else { 1.0 };
            out[i * d + j] = q[(i, j)] * sign;
        }
    }
    out
}

impl Model {
    /// Fresh model with seeded initialization.
    pub fn new(config: ModelConfig, num_users: usize, options_per_item: &[usize], seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = OptionLayout::new(options_per_item);
        let mut r = rng::substream(seed, "init");
        let params = match config.family {
            ModelFamily::DpIrt => irt::init(&config, num_users, &layout, &mut r),
            ModelFamily::DpNmf => nmf::init(&config, num_users, &layout, &mut r),
            ModelFamily::DpBidkt => bidkt::init(&config, &layout, &mut r),
        };
        Ok(Model { config, num_users, layout, params })
    }

    /// Model sized for a dataset's index space.
    pub fn for_dataset(config: ModelConfig, d: &Dataset, seed: u64) -> Result<Self> {
        Model::new(config, d.num_users(), d.options_per_item(), seed)
    }

    /// Wraps existing parameters, checking names and shapes against a fresh
    /// model of the same configuration.
    pub fn from_parts(
        config: ModelConfig,
        num_users: usize,
        options_per_item: &[usize],
        params: ParameterStore,
    ) -> Result<Self> {
        let reference = Model::new(config, num_users, options_per_item, 0)?;
        if reference.params.names != params.names {
            return Err(Error::Config(format!(
                "parameter names {:?} do not match expected {:?}",
                params.names, reference.params.names
            )));
        }
        for (k, (a, b)) in reference.params.tensors.iter().zip(&params.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    "parameters",
                    format!("{}: {:?} vs expected {:?}", params.names[k], b.shape(), a.shape()),
                ));
            }
        }
        Ok(Model { params, ..reference })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn family(&self) -> ModelFamily {
        self.config.family
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn layout(&self) -> &OptionLayout {
        &self.layout
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParameterStore) {
        self.params = params;
    }

    /// Builds the logit column for `queries`. `vars` are this model's
    /// parameters (or stand-ins of the same shapes) registered on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        vars: &[Var],
        history: &History,
        queries: &[Interaction],
    ) -> Result<Forward> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        for x in queries {
            if x.user >= self.num_users && !self.family().is_sequential() {
                return Err(Error::shape("query", format!("user {} of {}", x.user, self.num_users)));
            }
        }
        match self.config.family {
            ModelFamily::DpIrt => irt::forward(&self.config, &self.layout, tape, vars, queries),
            ModelFamily::DpNmf => nmf::forward(&self.config, &self.layout, tape, vars, queries),
            ModelFamily::DpBidkt => bidkt::forward(&self.config, &self.layout, tape, vars, history, queries),
        }
    }

    /// Logits of every query, one vector per query.
    pub fn logits(&self, history: &History, queries: &[Interaction]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(queries.len());
        for chunk in self.chunks(queries) {
            let mut tape = Tape::new();
            let vars = self.params.bind(&mut tape);
            let fwd = self.forward(&mut tape, &vars, history, &chunk)?;
            let flat = tape.value(fwd.logits).data();
            for t in &fwd.targets {
                out.push(flat[t.offset..t.offset + t.options].to_vec());
            }
        }
        Ok(reorder(out, queries, self.family()))
    }

    /// Option probabilities of every query, in query order.
    pub fn predict(&self, history: &History, queries: &[Interaction]) -> Result<Vec<OptionPrediction>> {
        self.logits(history, queries)?.iter().zip(queries).map(|(z, x)| option_probabilities(z, x.correct)).collect()
    }

    /// Splits queries into evaluation chunks. Sequential models get whole
    /// users per chunk so each history is encoded once.
    fn chunks(&self, queries: &[Interaction]) -> Vec<Vec<Interaction>> {
        const CHUNK: usize = 4096;
        if !self.family().is_sequential() {
            return queries.chunks(CHUNK).map(<[Interaction]>::to_vec).collect();
        }
        let mut by_user: BTreeMap<usize, Vec<Interaction>> = BTreeMap::new();
        for x in queries {
            by_user.entry(x.user).or_default().push(*x);
        }
        let mut chunks = Vec::new();
        let mut cur = Vec::new();
        for (_, qs) in by_user {
            cur.extend(qs);
            if cur.len() >= CHUNK {
                chunks.push(std::mem::take(&mut cur));
            }
        }
        if !cur.is_empty() {
            chunks.push(cur);
        }
        chunks
    }

    /// Student representation used for score prediction: the user vector
    /// (DP-IRT, DP-NMF) or the mean context vector over the user's own
    /// history positions (DP-BiDKT). Users without history get zeros.
    pub fn user_representations(&self, history: &History) -> Result<Vec<Vec<f64>>> {
        match self.config.family {
            ModelFamily::DpIrt | ModelFamily::DpNmf => {
                let users = &self.params.tensors[0];
                Ok((0..self.num_users).map(|u| users.row_slice(u).to_vec()).collect())
            }
            ModelFamily::DpBidkt => bidkt::user_representations(self, history),
        }
    }

    /// Applies `perm` to item `item`'s options in every per-option table:
    /// new option `k` takes the parameters of old option `perm[k]`.
    pub fn permute_item_options(&mut self, item: usize, perm: &[usize]) -> Result<()> {
        let count = self.layout.count(item);
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..count).collect::<Vec<_>>() {
            return Err(Error::Argument(format!("{perm:?} is not a permutation of 0..{count}")));
        }
        let offset = self.layout.offset(item);
        let tables = self
            .params
            .names
            .iter()
            .zip(self.params.tensors.iter_mut())
            .filter(|(name, _)| name.starts_with(OPTION_TABLE_PREFIX));
        for (_, t) in tables {
            let old: Vec<Vec<f64>> = (0..count).map(|k| t.row_slice(offset + k).to_vec()).collect();
            for (k, &src) in perm.iter().enumerate() {
                t.row_slice_mut(offset + k).copy_from_slice(&old[src]);
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            seed,
            num_users: self.num_users,
            options_per_item: self.layout.counts().to_vec(),
            tensors: self
                .params
                .names
                .iter()
                .zip(&self.params.tensors)
                .map(|(name, t)| NamedTensor { name: name.clone(), shape: t.shape(), values: t.data().to_vec() })
                .collect(),
        }
    }
}

// Sequential chunks are grouped by user; restore the caller's order.
fn reorder(out: Vec<Vec<f64>>, queries: &[Interaction], family: ModelFamily) -> Vec<Vec<f64>> {
    if !family.is_sequential() {
        return out;
    }
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.sort_by_key(|&k| queries[k].user);
    let mut result = vec![Vec::new(); queries.len()];
    for (z, k) in out.into_iter().zip(order) {
        result[k] = z;
    }
    result
}

pub const CHECKPOINT_FORMAT: &str = "dpmtl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

/// Versioned JSON container for a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub num_users: usize,
    pub options_per_item: Vec<usize>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn into_model(self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint {} v{}", self.format, self.version)));
        }
        let mut params = ParameterStore::new();
        for t in self.tensors {
            params.push(t.name, Tensor::new(t.shape[0], t.shape[1], t.values)?);
        }
        Model::from_parts(self.config, self.num_users, &self.options_per_item, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_uniform_probs() {
        let p = option_probabilities(&[0.0; 5], 3).unwrap();
        for v in &p.probs {
            assert!((v - 0.2).abs() < 1e-15);
        }
        assert!((p.correct_probability() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn two_option_probabilities() {
        let p = option_probabilities(&[2.0, 0.0], 0).unwrap();
        let e2 = 2f64.exp();
        assert!((p.probs[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p.probs[0] - 0.8808).abs() < 1e-4);
        assert!((p.probs[1] - 0.1192).abs() < 1e-4);
        assert!(option_probabilities(&[f64::NAN, 0.0], 0).is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let p = option_probabilities(&[3.0, -2.0, 0.5, 0.1], 1).unwrap();
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.probs.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn layout_offsets() {
        let l = OptionLayout::new(&[4, 2, 5]);
        assert_eq!(l.total(), 11);
        assert_eq!(l.global(2, 1), 7);
    }

    #[test]
    fn orthogonal_init_is_orthogonal() {
        let mut r = rng::seeded(4);
        let d = 5;
        let q = orthogonal(d, &mut r);
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|k| q[k * d + i] * q[k * d + j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        for family in ModelFamily::ALL {
            let m = Model::new(ModelConfig::new(family, 3, 2), 4, &[3, 4, 2], 17).unwrap();
            let text = serde_json::to_string(&m.checkpoint(17)).unwrap();
            let back: Checkpoint = serde_json::from_str(&text).unwrap();
            let m2 = back.into_model().unwrap();
            for (a, b) in m.params().tensors().iter().zip(m2.params().tensors()) {
                let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(ab, bb);
            }
        }
    }

    #[test]
    fn family_parse() {
        assert_eq!("dp-irt".parse::<ModelFamily>().unwrap(), ModelFamily::DpIrt);
        assert_eq!("DP_BiDKT".parse::<ModelFamily>().unwrap(), ModelFamily::DpBidkt);
        assert!("lstm".parse::<ModelFamily>().is_err());
    }

    #[test]
    fn layer_bounds() {
        assert!(Model::new(ModelConfig::new(ModelFamily::DpNmf, 4, 5), 2, &[2], 0).is_err());
        assert!(Model::new(ModelConfig::new(ModelFamily::DpIrt, 4, 0), 2, &[2], 0).is_ok());
        assert!(Model::new(ModelConfig::new(ModelFamily::DpIrt, 0, 1), 2, &[2], 0).is_err());
    }
}
