//! Multidimensional polytomous IRT: `logit_k = theta_u . a_{i,k} + b_{i,k}`.

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Interaction;
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{uniform, Forward, ModelConfig, OptionLayout, ParameterStore};

pub const USER_VECTORS: &str = "user_vectors";
pub const OPTION_VECTORS: &str = "option_vectors";
pub const OPTION_BIAS: &str = "option_bias";

pub(crate) fn init(cfg: &ModelConfig, num_users: usize, layout: &OptionLayout, r: &mut Rng) -> ParameterStore {
    let bound = 1.0 / (cfg.dim as f64).sqrt();
    let mut p = ParameterStore::new();
    p.push(USER_VECTORS, uniform(num_users, cfg.dim, bound, r));
    p.push(OPTION_VECTORS, uniform(layout.total(), cfg.dim, bound, r));
    if cfg.option_bias {
        p.push(OPTION_BIAS, Tensor::zeros(layout.total(), 1));
    }
    p
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
    let theta = tape.gather_rows(vars[0], &users)?;
    let a = tape.gather_rows(vars[1], &e.option_rows)?;
    let prod = tape.mul(theta, a)?;
    let mut logits = tape.row_sum(prod)?;
    if cfg.option_bias {
        let b = tape.gather_rows(vars[2], &e.option_rows)?;
        logits = tape.add(logits, b)?;
    }
    Ok(Forward { logits, targets: e.targets, contexts: None })
}

/// Option logits for one user vector against one item's option vectors
/// (`j x d`) and biases (`j`).
pub fn dp_irt_forward(theta: &[f64], option_vectors: &Tensor, bias: &[f64]) -> Result<Vec<f64>> {
    let [j, d] = option_vectors.shape();
    if theta.len() != d || bias.len() != j {
        return Err(Error::shape(
            "dp_irt_forward",
            format!("theta {}, options {j}x{d}, bias {}", theta.len(), bias.len()),
        ));
    }
    Ok((0..j)
        .map(|k| {
            let dot: f64 = option_vectors.row_slice(k).iter().zip(theta).map(|(a, t)| a * t).sum();
            dot + bias[k]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softmax;
    use crate::models::{History, Model, ModelFamily};

    #[test]
    fn hand_computed_logits() {
        let a = Tensor::new(2, 2, vec![2.0, 1.0, 0.0, 3.0]).unwrap();
        let z = dp_irt_forward(&[1.0, 0.0], &a, &[0.0, 0.0]).unwrap();
        assert_eq!(z, vec![2.0, 0.0]);
        let p = softmax(&z);
        assert!((p[0] - 0.8808).abs() < 1e-4);
        assert!((p[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn zero_user_gives_uniform() {
        let a = Tensor::new(3, 2, vec![2.0, 1.0, 0.0, 3.0, -1.0, 4.0]).unwrap();
        let p = softmax(&dp_irt_forward(&[0.0, 0.0], &a, &[0.0; 3]).unwrap());
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn swapping_options_swaps_logits() {
        let a = Tensor::new(2, 2, vec![2.0, 1.0, 0.0, 3.0]).unwrap();
        let swapped = Tensor::new(2, 2, vec![0.0, 3.0, 2.0, 1.0]).unwrap();
        let z = dp_irt_forward(&[0.7, -0.2], &a, &[0.1, 0.3]).unwrap();
        let zs = dp_irt_forward(&[0.7, -0.2], &swapped, &[0.3, 0.1]).unwrap();
        assert_eq!(z, vec![zs[1], zs[0]]);
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::zeros(3, 2);
        assert!(dp_irt_forward(&[0.0; 3], &a, &[0.0; 3]).is_err());
        assert!(dp_irt_forward(&[0.0; 2], &a, &[0.0; 2]).is_err());
    }

    #[test]
    fn batched_forward_matches_single_query_forward() {
        let m = Model::new(super::super::ModelConfig::new(ModelFamily::DpIrt, 3, 1), 3, &[4, 2], 5).unwrap();
        let mut m = m;
        m.params_mut().get_mut(OPTION_BIAS).unwrap().data_mut()[1] = 0.4;
        let qs = [Interaction::new(2, 0, 1, 0), Interaction::new(0, 1, 1, 1)];
        let z = m.logits(&History::empty(3), &qs).unwrap();
        let users = m.params().get(USER_VECTORS).unwrap();
        let opts = m.params().get(OPTION_VECTORS).unwrap();
        let bias = m.params().get(OPTION_BIAS).unwrap();
        for (q, x) in qs.iter().enumerate() {
            let off = m.layout().offset(x.item);
            let j = m.layout().count(x.item);
            let a = Tensor::new(j, 3, opts.data()[off * 3..(off + j) * 3].to_vec()).unwrap();
            let expected = dp_irt_forward(users.row_slice(x.user), &a, &bias.data()[off..off + j]).unwrap();
            assert_eq!(z[q], expected);
        }
    }

    #[test]
    fn bias_shift_leaves_probabilities_unchanged() {
        let mut m = Model::new(super::super::ModelConfig::new(ModelFamily::DpIrt, 2, 1), 2, &[3], 1).unwrap();
        let q = [Interaction::new(1, 0, 0, 2)];
        let before = m.predict(&History::empty(2), &q).unwrap();
        for v in m.params_mut().get_mut(OPTION_BIAS).unwrap().data_mut() {
            *v += 2.5;
        }
        let after = m.predict(&History::empty(2), &q).unwrap();
        for (a, b) in before[0].probs.iter().zip(&after[0].probs) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
