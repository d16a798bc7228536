//! Mean rank of every lambda on simulated data, per task and overall.
//! The argument sets how informative wrong-option choices are: a low
//! distractor temperature makes them informative, a high one makes them noise.
//!
//!     cargo run --release --example lambda_sweep -- 2
//!     cargo run --release --example lambda_sweep -- 20

use dpmtl::experiment::{run_sweep, DataSource, DatasetSpec, SweepConfig, TrainTemplate};
use dpmtl::models::ModelFamily;
use dpmtl::synth::GenConfig;

fn main() -> dpmtl::Result<()> {
    let distractor: f64 = std::env::args().nth(1).map_or(2.0, |a| a.parse().expect("temperature"));
    let datasets = (0..4u64)
        .map(|k| DatasetSpec {
            name: format!("synth{k}"),
            source: DataSource::Synthetic(GenConfig {
                users: 500,
                items: 50,
                options: 4,
                dim: 4,
                distractor_temperature: Some(distractor),
                density: 0.5,
                seed: k,
                ..GenConfig::default()
            }),
        })
        .collect();
    let dir = tempfile_dir();
    let c = SweepConfig {
        datasets,
        families: vec![ModelFamily::DpIrt],
        dims: vec![4],
        layers: vec![1],
        seeds: vec![0, 1],
        training: TrainTemplate { learning_rate: 0.01, ..TrainTemplate::default() },
        output: dir.clone(),
        ..SweepConfig::default()
    };
    let r = run_sweep(&c)?;
    let header: Vec<String> = r.summary.lambdas.iter().map(|l| format!("{l:5.1}")).collect();
    println!("     {}", header.join(" "));
    for a in &r.summary.rank_average {
        let ranks: Vec<String> = a.mean_ranks.iter().map(|v| format!("{v:5.2}")).collect();
        println!("{:>3}  {}", a.task.map_or("all", |t| t.name()), ranks.join(" "));
    }
    println!("reports in {}", dir.display());
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    std::env::temp_dir().join(format!("lambda_sweep_{}", std::process::id()))
}
