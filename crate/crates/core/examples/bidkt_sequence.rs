//! DP-BiDKT reads a user's other responses, before and after the target,
//! but never the target itself.

use dpmtl::data::Interaction;
use dpmtl::ingest::{split_dataset, SplitSpec, SplitUnit};
use dpmtl::models::History;
use dpmtl::synth::{generate_dataset, GenConfig};
use dpmtl::train::{evaluate, train, TrainConfig};

fn main() -> dpmtl::Result<()> {
    let s =
        generate_dataset(&GenConfig { users: 300, items: 20, options: 4, dim: 3, seed: 5, ..GenConfig::default() })?;
    let split = split_dataset(&s.dataset, &SplitSpec::new(0.8, 0.1, 0.1, SplitUnit::ByInteraction, 5)?)?;
    let cfg = TrainConfig {
        family: dpmtl::models::ModelFamily::DpBidkt,
        dim: 8,
        layers: 1,
        learning_rate: 0.01,
        max_epochs: 60,
        ..TrainConfig::default()
    };
    let out = train(&split, &cfg)?;
    let test = evaluate(&out.model, &out.history, &split.test, cfg.lambda)?;
    println!("test KT-AUC {:.4}  OT-ACC {:.4}", test.kt_auc.unwrap_or(f64::NAN), test.ot_acc);

    // the same query scored against a history where every other answer is
    // right, then one where every other answer is wrong
    let key = s.dataset.answer_key();
    let user = 0;
    let target = out.history.sequence(user)[0];
    let rewrite = |right: bool| -> Vec<Interaction> {
        out.history
            .sequence(user)
            .iter()
            .map(|x| {
                let k = key[x.item].unwrap_or(0);
                let mut y = *x;
                y.chosen = if right { k } else { (k + 1) % s.dataset.option_count(x.item) };
                y
            })
            .collect()
    };
    for right in [true, false] {
        let mut rows: Vec<Interaction> = s.dataset.interactions().iter().filter(|x| x.user != user).copied().collect();
        rows.extend(rewrite(right));
        let d = s.dataset.with_interactions(rows);
        let p = out.model.predict(&History::from_dataset(&d), &[target])?;
        let label = if right { "all others right" } else { "all others wrong" };
        println!("user {user}, item {}: {label:<16} P(correct) {:.4}", target.item, p[0].correct_probability());
    }
    Ok(())
}
