//! Bidirectional knowledge tracing with option-level inputs and outputs.
//!
//! A response is embedded as the row of the option the user chose, in the
//! same option table the candidates are scored with. For a target response
//! at sequence position `t`, a stacked LSTM reads positions `..t` forwards
//! and another reads positions `t+1..` backwards; the target itself is in
//! neither direction. A direction with nothing to read contributes a
//! learned empty state. Each candidate option `k` is then scored by
//! `w2 . relu(W1 [fwd; bwd; e_k] + b1)`.
//!
//! Batches hold several users. Both chains run left-aligned over every
//! user's sequence (the backward chain over the reversed sequence), padded
//! at the end, so the state after `n` inputs of user `b` sits at row
//! `(n - 1) * B + b` of the stacked step outputs.

use std::collections::HashMap;

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Interaction;
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{orthogonal, uniform, Forward, History, Model, ModelConfig, OptionLayout, ParameterStore};

pub const OPTION_EMBEDDINGS: &str = "option_embeddings";
pub const FWD_EMPTY: &str = "fwd_empty";
pub const BWD_EMPTY: &str = "bwd_empty";

pub(crate) fn init(cfg: &ModelConfig, layout: &OptionLayout, r: &mut Rng) -> ParameterStore {
    let d = cfg.dim;
    let bound = 1.0 / (d as f64).sqrt();
    let mut p = ParameterStore::new();
    p.push(OPTION_EMBEDDINGS, uniform(layout.total(), d, bound, r));
    for dir in ["fwd", "bwd"] {
        for l in 1..=cfg.layers {
            // rows 0..d act on the input, rows d..2d on the previous state;
            // column blocks are the input, forget, cell and output gates
            let mut w = uniform(2 * d, 4 * d, bound, r);
            for gate in 0..4 {
                let q = orthogonal(d, r);
                for i in 0..d {
                    for j in 0..d {
                        w.row_slice_mut(d + i)[gate * d + j] = q[i * d + j];
                    }
                }
            }
            p.push(format!("lstm_{dir}_w{l}"), w);
            p.push(format!("lstm_{dir}_b{l}"), Tensor::zeros(1, 4 * d));
        }
    }
    p.push(FWD_EMPTY, Tensor::zeros(1, d));
    p.push(BWD_EMPTY, Tensor::zeros(1, d));
    p.push("head_w1", uniform(3 * d, d, 1.0 / ((3 * d) as f64).sqrt(), r));
    p.push("head_b1", Tensor::zeros(1, d));
    p.push("head_w2", uniform(d, 1, bound, r));
    p
}

struct Handles {
    emb: Var,
    fwd: Vec<(Var, Var)>,
    bwd: Vec<(Var, Var)>,
    fwd_empty: Var,
    bwd_empty: Var,
    w1: Var,
    b1: Var,
    w2: Var,
}

impl Handles {
    fn new(layers: usize, vars: &[Var]) -> Handles {
        let chain = |start: usize| (0..layers).map(|l| (vars[start + 2 * l], vars[start + 2 * l + 1])).collect();
        let k = 1 + 4 * layers;
        Handles {
            emb: vars[0],
            fwd: chain(1),
            bwd: chain(1 + 2 * layers),
            fwd_empty: vars[k],
            bwd_empty: vars[k + 1],
            w1: vars[k + 2],
            b1: vars[k + 3],
            w2: vars[k + 4],
        }
    }
}

/// One LSTM step. `x` is `B x d`, `w` is `2d x 4d`.
fn lstm_step(tape: &mut Tape<'_>, d: usize, (w, b): (Var, Var), x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let xh = tape.concat_cols(&[x, h])?;
    let z = tape.matmul(xh, w)?;
    let z = tape.add_row(z, b)?;
    let i = tape.slice_cols(z, 0, d)?;
    let i = tape.sigmoid(i)?;
    let f = tape.slice_cols(z, d, 2 * d)?;
    let f = tape.sigmoid(f)?;
    let g = tape.slice_cols(z, 2 * d, 3 * d)?;
    let g = tape.tanh(g)?;
    let o = tape.slice_cols(z, 3 * d, 4 * d)?;
    let o = tape.sigmoid(o)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Runs a stacked chain over `steps`, each a list of option-table rows (one
/// per batch member). Returns the top layer's output at every step.
fn run_chain(tape: &mut Tape<'_>, d: usize, emb: Var, layers: &[(Var, Var)], steps: &[Vec<usize>]) -> Result<Vec<Var>> {
    let Some(first) = steps.first() else {
        return Ok(Vec::new());
    };
    let batch = first.len();
    let mut inputs = Vec::with_capacity(steps.len());
    for rows in steps {
        inputs.push(tape.gather_rows(emb, rows)?);
    }
    for &layer in layers {
        let mut h = tape.constant(Tensor::zeros(batch, d));
        let mut c = tape.constant(Tensor::zeros(batch, d));
        for x in inputs.iter_mut() {
            (h, c) = lstm_step(tape, d, layer, *x, h, c)?;
            *x = h;
        }
    }
    Ok(inputs)
}

fn option_row(layout: &OptionLayout, x: &Interaction) -> Result<usize> {
    if x.item >= layout.num_items() || x.chosen >= layout.count(x.item) {
        return Err(Error::shape("history", format!("item {} option {} outside the option layout", x.item, x.chosen)));
    }
    Ok(layout.global(x.item, x.chosen))
}

/// Per-query contexts `[fwd; bwd]`, `Q x 2d`, in query order.
fn contexts(
    cfg: &ModelConfig,
    layout: &OptionLayout,
    tape: &mut Tape<'_>,
    h: &Handles,
    history: &History,
    queries: &[Interaction],
) -> Result<Var> {
    let d = cfg.dim;
    let mut users: Vec<usize> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for x in queries {
        slot.entry(x.user).or_insert_with(|| {
            users.push(x.user);
            users.len() - 1
        });
    }
    let batch = users.len();
    let seqs: Vec<&[Interaction]> = users.iter().map(|&u| history.sequence(u)).collect();
    let longest = seqs.iter().map(|s| s.len()).max().unwrap_or(0);

    let mut fwd_steps = vec![vec![0; batch]; longest];
    let mut bwd_steps = vec![vec![0; batch]; longest];
    for (b, seq) in seqs.iter().enumerate() {
        for (s, x) in seq.iter().enumerate() {
            let row = option_row(layout, x)?;
            fwd_steps[s][b] = row;
            bwd_steps[seq.len() - 1 - s][b] = row;
        }
    }
    let fwd_out = run_chain(tape, d, h.emb, &h.fwd, &fwd_steps)?;
    let bwd_out = run_chain(tape, d, h.emb, &h.bwd, &bwd_steps)?;
    let empty_row = longest * batch;
    let mut fwd_parts = fwd_out;
    fwd_parts.push(h.fwd_empty);
    let mut bwd_parts = bwd_out;
    bwd_parts.push(h.bwd_empty);
    let fwd_table = tape.concat_rows(&fwd_parts)?;
    let bwd_table = tape.concat_rows(&bwd_parts)?;

    let mut fwd_rows = Vec::with_capacity(queries.len());
    let mut bwd_rows = Vec::with_capacity(queries.len());
    for x in queries {
        let b = slot[&x.user];
        let key = x.sequence_key();
        let seq = seqs[b];
        let before = seq.partition_point(|e| e.sequence_key() < key);
        let after = seq.len() - seq.partition_point(|e| e.sequence_key() <= key);
        fwd_rows.push(if before == 0 { empty_row } else { (before - 1) * batch + b });
        bwd_rows.push(if after == 0 { empty_row } else { (after - 1) * batch + b });
    }
    let f = tape.gather_rows(fwd_table, &fwd_rows)?;
    let bk = tape.gather_rows(bwd_table, &bwd_rows)?;
    tape.concat_cols(&[f, bk])
}

fn head(tape: &mut Tape<'_>, h: &Handles, ctx_rows: Var, candidates: Var) -> Result<Var> {
    let x = tape.concat_cols(&[ctx_rows, candidates])?;
    let z = tape.matmul(x, h.w1)?;
    let z = tape.add_row(z, h.b1)?;
    let z = tape.relu(z)?;
    tape.matmul(z, h.w2)
}

pub(crate) fn forward(
    cfg: &ModelConfig,
    layout: &OptionLayout,
    tape: &mut Tape<'_>,
    vars: &[Var],
    history: &History,
    queries: &[Interaction],
) -> Result<Forward> {
    let h = Handles::new(cfg.layers, vars);
    let e = layout.expand(queries)?;
    let ctx = contexts(cfg, layout, tape, &h, history, queries)?;
    let ctx_rows = tape.gather_rows(ctx, &e.query_of_row)?;
    let cand = tape.gather_rows(h.emb, &e.option_rows)?;
    let logits = head(tape, &h, ctx_rows, cand)?;
    Ok(Forward { logits, targets: e.targets, contexts: Some(ctx) })
}

/// Mean context over each user's own history positions; zeros for users
/// without history.
pub(crate) fn user_representations(model: &Model, history: &History) -> Result<Vec<Vec<f64>>> {
    const USERS_PER_CHUNK: usize = 256;
    let cfg = model.config();
    let width = 2 * cfg.dim;
    let n = model.num_users().max(history.num_users());
    let mut out = vec![vec![0.0; width]; n];
    let users: Vec<usize> = (0..n).filter(|&u| !history.sequence(u).is_empty()).collect();
    for chunk in users.chunks(USERS_PER_CHUNK) {
        let queries: Vec<Interaction> = chunk.iter().flat_map(|&u| history.sequence(u).iter().copied()).collect();
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape);
        let h = Handles::new(cfg.layers, &vars);
        let ctx = contexts(cfg, model.layout(), &mut tape, &h, history, &queries)?;
        let ctx = tape.value(ctx);
        for (q, x) in queries.iter().enumerate() {
            for (acc, v) in out[x.user].iter_mut().zip(ctx.row_slice(q)) {
                *acc += v;
            }
        }
        for &u in chunk {
            let len = history.sequence(u).len() as f64;
            out[u].iter_mut().for_each(|v| *v /= len);
        }
    }
    Ok(out)
}

/// Context `[fwd; bwd]` for position `t` of one user's ordered sequence:
/// the forward chain reads `sequence[..t]`, the backward chain reads
/// `sequence[t+1..]` from the end.
pub fn context(model: &Model, sequence: &[Interaction], t: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let ctx = single_context(model, &mut tape, sequence, t)?;
    Ok(tape.value(ctx).data().to_vec())
}

fn single_context<'p>(model: &'p Model, tape: &mut Tape<'p>, sequence: &[Interaction], t: usize) -> Result<Var> {
    if t >= sequence.len() {
        return Err(Error::Argument(format!("target position {t} outside a sequence of length {}", sequence.len())));
    }
    if model.family() != super::ModelFamily::DpBidkt {
        return Err(Error::Argument(format!("{} has no sequence context", model.family())));
    }
    let cfg = model.config();
    let vars = model.params().bind(tape);
    let h = Handles::new(cfg.layers, &vars);
    let rows = |xs: &[Interaction]| -> Result<Vec<Vec<usize>>> {
        xs.iter().map(|x| Ok(vec![option_row(model.layout(), x)?])).collect()
    };
    let before = rows(&sequence[..t])?;
    let mut after = rows(&sequence[t + 1..])?;
    after.reverse();
    let f = run_chain(tape, cfg.dim, h.emb, &h.fwd, &before)?.pop().unwrap_or(h.fwd_empty);
    let b = run_chain(tape, cfg.dim, h.emb, &h.bwd, &after)?.pop().unwrap_or(h.bwd_empty);
    tape.concat_cols(&[f, b])
}

/// Logits of the candidates (`j x d` option embeddings) for the target at
/// position `t` of one user's ordered sequence.
pub fn dp_bidkt_forward(model: &Model, sequence: &[Interaction], t: usize, candidates: &Tensor) -> Result<Vec<f64>> {
    let d = model.config().dim;
    if candidates.cols() != d || candidates.rows() == 0 {
        return Err(Error::shape(
            "dp_bidkt_forward",
            format!("candidates {:?} vs embedding dim {d}", candidates.shape()),
        ));
    }
    let mut tape = Tape::new();
    let ctx = single_context(model, &mut tape, sequence, t)?;
    let vars = model.params().bind(&mut tape);
    let h = Handles::new(model.config().layers, &vars);
    let ctx_rows = tape.gather_rows(ctx, &vec![0; candidates.rows()])?;
    let cand = tape.constant(candidates.clone());
    let z = head(&mut tape, &h, ctx_rows, cand)?;
    Ok(tape.value(z).data().to_vec())
}

/// The item's own candidate embeddings, `j x d`.
pub fn candidate_embeddings(model: &Model, item: usize) -> Tensor {
    let emb = model.params().get(OPTION_EMBEDDINGS).expect("option embeddings");
    let (off, j, d) = (model.layout().offset(item), model.layout().count(item), emb.cols());
    Tensor::new(j, d, emb.data()[off * d..(off + j) * d].to_vec()).expect("shape")
}
