//! The mixed correctness/option objective, as a negative log-likelihood.
//!
//! For a response with keyed option `c` and chosen option `o`:
//!
//! * correct (`o == c`): `-ln p_c`, whatever the mixing weight;
//! * incorrect: `-(lambda * ln(sum_{k != c} p_k) + (1 - lambda) * ln p_o)`.
//!
//! `lambda = 1` is plain correctness (binary) cross-entropy and `lambda = 0`
//! is option-choice (categorical) cross-entropy. Everything is evaluated in
//! log space: the incorrect mass is `lse(incorrect logits) - lse(all logits)`
//! and never `1 - p_c`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Mixing weight between the correctness and option-choice objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpLossSpec {
    lambda: f64,
}

impl DpLossSpec {
    pub fn new(lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(DpLossSpec { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Argument(format!("lambda must lie in [0, 1], got {lambda}")))
    }
}

fn check_indices(n: usize, chosen: usize, correct: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Argument(format!("need at least 2 options, got {n}")));
    }
    if chosen >= n || correct >= n {
        return Err(Error::Argument(format!(
            "option index out of range: chosen {chosen}, correct {correct}, {n} options"
        )));
    }
    Ok(())
}

/// Loss of one response given the item's option logits.
pub fn dp_loss(logits: &[f64], chosen: usize, correct: usize, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    check_indices(logits.len(), chosen, correct)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let z = log_sum_exp(logits);
    if chosen == correct {
        return Ok(z - logits[correct]);
    }
    let incorrect: Vec<f64> = logits.iter().enumerate().filter(|&(k, _)| k != correct).map(|(_, &v)| v).collect();
    let log_wrong = log_sum_exp(&incorrect) - z;
    let log_chosen = logits[chosen] - z;
    Ok(-(lambda * log_wrong + (1.0 - lambda) * log_chosen))
}

/// One scored record: logits plus chosen and keyed option.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub logits: Vec<f64>,
    pub chosen: usize,
    pub correct: usize,
}

/// Mean of [`dp_loss`] over a non-empty batch.
pub fn batch_loss(batch: &[Record], lambda: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let mut total = 0.0;
    for r in batch {
        total += dp_loss(&r.logits, r.chosen, r.correct, lambda)?;
    }
    Ok(total / batch.len() as f64)
}

/// Where one query's logits live inside a flat `K x 1` logit column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub offset: usize,
    pub options: usize,
    pub chosen: usize,
    pub correct: usize,
}

/// Tape version of [`batch_loss`] over ragged option segments.
pub fn dp_loss_node(tape: &mut Tape<'_>, logits: Var, targets: &[Target], lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    if targets.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let mut all = Vec::with_capacity(targets.len());
    let mut wrong = Vec::with_capacity(targets.len());
    let mut picks = Vec::with_capacity(targets.len());
    let mut w_pick = Vec::with_capacity(targets.len());
    let mut w_wrong = Vec::with_capacity(targets.len());
    for t in targets {
        check_indices(t.options, t.chosen, t.correct)?;
        all.push((t.offset..t.offset + t.options).collect());
        wrong.push((0..t.options).filter(|&k| k != t.correct).map(|k| t.offset + k).collect());
        picks.push(t.offset + t.chosen);
        if t.chosen == t.correct {
            w_pick.push(1.0);
            w_wrong.push(0.0);
        } else {
            w_pick.push(1.0 - lambda);
            w_wrong.push(lambda);
        }
    }
    let norm = tape.log_sum_exp(logits, all)?;
    let lse_wrong = tape.log_sum_exp(logits, wrong)?;
    let picked = tape.gather_rows(logits, &picks)?;
    let wp = tape.constant(Tensor::column(w_pick));
    let ww = tape.constant(Tensor::column(w_wrong));
    let a = tape.mul(wp, picked)?;
    let b = tape.mul(ww, lse_wrong)?;
    let ll = tape.add(a, b)?;
    let per_record = tape.sub(norm, ll)?;
    tape.mean(per_record)
}
