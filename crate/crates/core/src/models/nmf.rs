//! Neural matrix factorization with option embeddings as input: every
//! option of an item is scored by the same network applied to
//! `[user embedding; option embedding]`.
//!
//! With `L` layers the scorer is `L - 1` rectified layers of width `d`
//! followed by a linear map to one logit. The final layer has no bias
//! since a shared offset cancels in the softmax.

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Interaction;
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{uniform, Forward, Model, ModelConfig, OptionLayout, ParameterStore};

pub const USER_EMBEDDINGS: &str = "user_embeddings";
pub const OPTION_EMBEDDINGS: &str = "option_embeddings";

pub(crate) fn init(cfg: &ModelConfig, num_users: usize, layout: &OptionLayout, r: &mut Rng) -> ParameterStore {
    let d = cfg.dim;
    let bound = 1.0 / (d as f64).sqrt();
    let mut p = ParameterStore::new();
    p.push(USER_EMBEDDINGS, uniform(num_users, d, bound, r));
    p.push(OPTION_EMBEDDINGS, uniform(layout.total(), d, bound, r));
    let mut fan_in = 2 * d;
    for l in 1..cfg.layers {
        p.push(format!("scorer_w{l}"), uniform(fan_in, d, 1.0 / (fan_in as f64).sqrt(), r));
        p.push(format!("scorer_b{l}"), Tensor::zeros(1, d));
        fan_in = d;
    }
    p.push(format!("scorer_w{}", cfg.layers), uniform(fan_in, 1, 1.0 / (fan_in as f64).sqrt(), r));
    p
}

/// Applies the scorer stack to the rows of `x`. `layers` holds
/// `(weight, bias)` handles; only the last layer may lack a bias.
pub(crate) fn score_rows(tape: &mut Tape<'_>, x: Var, layers: &[(Var, Option<Var>)]) -> Result<Var> {
    let mut h = x;
    for (k, (w, b)) in layers.iter().enumerate() {
        h = tape.matmul(h, *w)?;
        if let Some(b) = b {
            h = tape.add_row(h, *b)?;
        }
        if k + 1 < layers.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

fn scorer_handles(vars: &[Var], layers: usize) -> Vec<(Var, Option<Var>)> {
    let mut out = Vec::with_capacity(layers);
    let mut k = 2;
    for _ in 1..layers {
        out.push((vars[k], Some(vars[k + 1])));
        k += 2;
    }
    out.push((vars[k], None));
    out
}

pub(crate) fn forward(
    cfg: &ModelConfig,
    layout: &OptionLayout,
    tape: &mut Tape<'_>,
    vars: &[Var],
    queries: &[Interaction],
) -> Result<Forward> {
    let e = layout.expand(queries)?;
    let users: Vec<usize> = e.query_of_row.iter().map(|&q| queries[q].user).collect();
    let u = tape.gather_rows(vars[0], &users)?;
    let o = tape.gather_rows(vars[1], &e.option_rows)?;
    let x = tape.concat_cols(&[u, o])?;
    let logits = score_rows(tape, x, &scorer_handles(vars, cfg.layers))?;
    Ok(Forward { logits, targets: e.targets, contexts: None })
}

/// The shared option scorer: `(weight, bias)` per layer, input width `2d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    pub layers: Vec<(Tensor, Option<Tensor>)>,
}

impl Scorer {
    /// Copies the scorer out of a DP-NMF model.
    pub fn from_model(m: &Model) -> Result<Scorer> {
        let cfg = m.config();
        if cfg.family != super::ModelFamily::DpNmf {
            return Err(Error::Argument(format!("{} has no option scorer", cfg.family)));
        }
        let p = m.params();
        let mut layers = Vec::new();
        for l in 1..=cfg.layers {
            let w = p.get(&format!("scorer_w{l}")).cloned().expect("scorer weight");
            let b = p.get(&format!("scorer_b{l}")).cloned();
            layers.push((w, b));
        }
        Ok(Scorer { layers })
    }
}

/// Option logits for one user embedding against one item's option
/// embeddings (`j x d`).
pub fn dp_nmf_forward(user: &[f64], option_embeddings: &Tensor, scorer: &Scorer) -> Result<Vec<f64>> {
    let [j, d] = option_embeddings.shape();
    if user.len() != d {
        return Err(Error::shape("dp_nmf_forward", format!("user {} vs options {j}x{d}", user.len())));
    }
    if !(1..=4).contains(&scorer.layers.len()) {
        return Err(Error::Argument(format!("scorer depth must be within 1..=4, got {}", scorer.layers.len())));
    }
    let mut tape = Tape::new();
    let mut rows = Vec::with_capacity(j * 2 * d);
    for k in 0..j {
        rows.extend_from_slice(user);
        rows.extend_from_slice(option_embeddings.row_slice(k));
    }
    let x = tape.constant(Tensor::new(j, 2 * d, rows)?);
    let handles: Vec<(Var, Option<Var>)> = scorer
        .layers
        .iter()
        .map(|(w, b)| (tape.constant(w.clone()), b.as_ref().map(|b| tape.constant(b.clone()))))
        .collect();
    let z = score_rows(&mut tape, x, &handles)?;
    Ok(tape.value(z).data().to_vec())
}
