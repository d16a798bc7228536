//! Finite-difference verification of whole-model loss gradients at random
//! points.
//!
//! Two properties of the models shape how the check is run:
//!
//! * Softmax is shift invariant, so coordinates that move every logit of an
//!   item equally (a one-layer scorer's user weights, a rectified unit that
//!   is active for every candidate) have an exactly zero gradient. Their
//!   central difference is pure rounding, about one ulp of the loss over
//!   `2 * step`, which must stay below the `1e-8` floor of the relative
//!   error. That rules out steps much below `1e-4`.
//! * Rectifiers are not differentiable at zero. Points are redrawn until no
//!   rectifier input lies within `KINK_MARGIN * step` of its kink.
//!
//! The default step balances this rounding against the `O(step^2)`
//! truncation error of central differences.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{check_gradients, Tape};
use crate::data::{Dataset, Interaction};
use crate::error::{Error, Result};
use crate::loss::dp_loss_node;
use crate::models::{History, Model, ModelConfig, ModelFamily};
use crate::rng;

pub const DEFAULT_STEP: f64 = 5e-4;
pub const KINK_MARGIN: f64 = 10.0;
/// Parameters are drawn uniformly from `[-PARAM_SCALE, PARAM_SCALE]`.
pub const PARAM_SCALE: f64 = 0.5;
const MAX_DRAWS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub family: ModelFamily,
    pub dim: usize,
    pub layers: usize,
    /// Largest option count; items get between 2 and this many.
    pub max_options: usize,
    pub users: usize,
    /// Responses per user (the sequence length for DP-BiDKT).
    pub responses: usize,
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOutcome {
    pub case: GradcheckCase,
    pub max_relative_error: f64,
    /// Random points drawn before one was far enough from every kink.
    pub draws: usize,
    pub parameters: usize,
}

/// Size grid for `count` seeds of one family, cycling through the sizes
/// the acceptance bounds allow.
pub fn standard_cases(family: ModelFamily, count: usize, base_seed: u64) -> Vec<GradcheckCase> {
    (0..count)
        .map(|k| {
            let seed = base_seed + k as u64;
            let (dim, layers, max_options, responses) = match family {
                ModelFamily::DpIrt => (1 + k % 8, 1, 2 + k % 5, 4),
                ModelFamily::DpNmf => (2 + k % 7, 1 + k % 4, 2 + k % 5, 4),
                ModelFamily::DpBidkt => (1 + k % 8, 1 + k % 2, 2 + k % 4, 2 + k % 5),
            };
            GradcheckCase {
                family,
                dim,
                layers,
                max_options,
                users: 2,
                responses,
                lambda: ((k * 7) % 11) as f64 / 10.0,
                seed,
            }
        })
        .collect()
}

/// Draws a model and data for `case`, then compares reverse-mode and
/// central-difference gradients of the mean loss over all responses.
pub fn run_case(case: &GradcheckCase, step: f64) -> Result<GradcheckOutcome> {
    if case.max_options < 2 || case.users == 0 || case.responses == 0 {
        return Err(Error::Argument(format!("degenerate gradient check case {case:?}")));
    }
    let items = case.responses;
    let mut r = rng::substream(case.seed, "gradcheck");
    let options: Vec<usize> = (0..items).map(|_| r.random_range(2..=case.max_options)).collect();
    let config = ModelConfig::new(case.family, case.dim, case.layers);
    let mut model = Model::new(config, case.users, &options, case.seed)?;

    for draw in 1..=MAX_DRAWS {
        for t in model.params_mut().tensors_mut() {
            for v in t.data_mut() {
                *v = r.random_range(-PARAM_SCALE..PARAM_SCALE);
            }
        }
        let key: Vec<usize> = options.iter().map(|&j| r.random_range(0..j)).collect();
        let mut records = Vec::with_capacity(case.users * items);
        for u in 0..case.users {
            for (i, &j) in options.iter().enumerate() {
                records.push(Interaction::new(u, i, r.random_range(0..j), key[i]));
            }
        }
        let data = Dataset::new(case.users, items, options.clone(), records.clone(), None)?;
        let history = History::from_dataset(&data);

        let clear = {
            let mut tape = Tape::new();
            let vars = model.params().bind(&mut tape);
            model.forward(&mut tape, &vars, &history, &records)?;
            tape.kink_distance().is_none_or(|k| k > KINK_MARGIN * step)
        };
        if !clear {
            continue;
        }
        let err = check_gradients(
            |tape, vars| {
                let f = model.forward(tape, vars, &history, &records)?;
                dp_loss_node(tape, f.logits, &f.targets, case.lambda)
            },
            model.params().tensors(),
            step,
        )?;
        return Ok(GradcheckOutcome {
            case: case.clone(),
            max_relative_error: err,
            draws: draw,
            parameters: model.params().num_scalars(),
        });
    }
    Err(Error::Argument(format!("no point clear of rectifier kinks after {MAX_DRAWS} draws for {case:?}")))
}
