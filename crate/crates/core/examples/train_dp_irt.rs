//! Train DP-IRT on a simulated dataset and save the checkpoint.
//!
//!     cargo run --release --example train_dp_irt [lambda]

use dpmtl::ingest::{split_dataset, SplitSpec, SplitUnit};
use dpmtl::synth::{generate_dataset, GenConfig};
use dpmtl::train::{evaluate, train, Selection, TrainConfig};

fn main() -> dpmtl::Result<()> {
    let lambda = std::env::args().nth(1).map_or(0.5, |a| a.parse().expect("lambda"));
    let s =
        generate_dataset(&GenConfig { users: 600, items: 40, options: 4, dim: 4, seed: 3, ..GenConfig::default() })?;
    let split = split_dataset(&s.dataset, &SplitSpec::new(0.8, 0.1, 0.1, SplitUnit::ByInteraction, 3)?)?;
    let cfg = TrainConfig { dim: 4, lambda, learning_rate: 0.01, selection: Selection::Auc, ..TrainConfig::default() };
    let out = train(&split, &cfg)?;
    for e in out.report.epochs.iter().step_by(5) {
        let auc = e.val.as_ref().and_then(|m| m.kt_auc).unwrap_or(f64::NAN);
        println!("epoch {:>3}  train loss {:.4}  val AUC {auc:.4}", e.epoch, e.train_loss);
    }
    println!("kept epoch {} (early stop: {})", out.report.best_epoch, out.report.stopped_early);
    let test = evaluate(&out.model, &out.history, &split.test, lambda)?;
    println!("test KT-AUC {:.4}  OT-ACC {:.4}", test.kt_auc.unwrap_or(f64::NAN), test.ot_acc);
    let path = std::env::temp_dir().join("dp_irt_checkpoint.json");
    out.report.checkpoint.save(&path)?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}
