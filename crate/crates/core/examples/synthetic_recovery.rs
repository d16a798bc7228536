//! How close a trained DP-IRT gets to the generating model's own accuracy
//! on 2000 users × 100 items × 5 options, d = 8.

use dpmtl::ingest::{split_dataset, SplitSpec, SplitUnit};
use dpmtl::synth::{bayes_optimal_metrics, generate_dataset, GenConfig};
use dpmtl::train::{evaluate, train, TrainConfig};

fn main() -> dpmtl::Result<()> {
    let s = generate_dataset(&GenConfig { seed: 1, ..GenConfig::default() })?;
    let split = split_dataset(&s.dataset, &SplitSpec::new(0.8, 0.1, 0.1, SplitUnit::ByInteraction, 1)?)?;
    let ceiling = bayes_optimal_metrics(&split.test, &s.truth)?;
    println!("ceiling: KT-AUC {:.4}  OT-ACC {:.4}", ceiling.kt_auc.unwrap_or(f64::NAN), ceiling.ot_acc);
    for lambda in [0.0, 0.5, 1.0] {
        let cfg = TrainConfig { dim: 8, lambda, seed: 1, ..TrainConfig::default() };
        let out = train(&split, &cfg)?;
        let m = evaluate(&out.model, &out.history, &split.test, lambda)?;
        println!(
            "lambda {lambda:.1}: KT-AUC {:.4}  OT-ACC {:.4}  ({} epochs)",
            m.kt_auc.unwrap_or(f64::NAN),
            m.ot_acc,
            out.report.epochs.len()
        );
    }
    Ok(())
}
