//! Best lambda per task as interactions are masked away.

use dpmtl::experiment::{run_sparsity_ablation, DataSource, DatasetSpec, SweepConfig, TrainTemplate};
use dpmtl::models::ModelFamily;
use dpmtl::synth::GenConfig;

fn main() -> dpmtl::Result<()> {
    let c = SweepConfig {
        datasets: vec![DatasetSpec {
            name: "synth".into(),
            source: DataSource::Synthetic(GenConfig {
                users: 400,
                items: 40,
                options: 4,
                dim: 4,
                seed: 2,
                ..GenConfig::default()
            }),
        }],
        families: vec![ModelFamily::DpIrt],
        lambdas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        dims: vec![4],
        layers: vec![1],
        sparsity: Some(vec![0.0, 0.3, 0.6]),
        training: TrainTemplate { learning_rate: 0.01, ..TrainTemplate::default() },
        output: std::env::temp_dir().join(format!("sparsity_ablation_{}", std::process::id())),
        ..SweepConfig::default()
    };
    let r = run_sparsity_ablation(&c)?;
    for g in &r.summary.groups {
        let best: Vec<String> = g
            .best
            .iter()
            .map(|b| match (b.value, b.lambda) {
                (Some(v), Some(l)) => format!("{} {v:.4} at lambda {l:.2}", b.task.name()),
                _ => format!("{} undefined", b.task.name()),
            })
            .collect();
        println!("sparsity {:.1}: {}", g.sparsity, best.join(", "));
    }
    println!("reports in {}", r.dir.display());
    Ok(())
}
