use std::process::Command;

use dpmtl::ingest::{load_dataset, parse_interactions, split_dataset, write_interactions, SplitSpec, SplitUnit};
use dpmtl::models::{Checkpoint, History};
use dpmtl::synth::{emit, generate_dataset, GenConfig};
use dpmtl::train::{evaluate, train, TrainConfig};

fn small() -> dpmtl::synth::Synthetic {
    generate_dataset(&GenConfig { users: 80, items: 10, options: 4, dim: 2, seed: 21, ..GenConfig::default() }).unwrap()
}

#[test]
fn csv_round_trip_preserves_the_dataset() {
    let s = small();
    let mut buf = Vec::new();
    write_interactions(&s.dataset, &mut buf).unwrap();
    let back = parse_interactions(std::io::Cursor::new(buf)).unwrap();
    assert_eq!(back.interactions(), s.dataset.interactions());
    assert_eq!(back.options_per_item(), s.dataset.options_per_item());
}

#[test]
fn emitted_files_reload_and_checkpoints_reproduce_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let s = small();
    emit(&s, dir.path(), 21).unwrap();
    let d = load_dataset(&dir.path().join("interactions.csv"), Some(&dir.path().join("scores.csv"))).unwrap();
    assert_eq!(d.len(), s.dataset.len());
    assert_eq!(d.scores().unwrap().len(), 80);

    for family in dpmtl::models::ModelFamily::ALL {
        let split = split_dataset(&d, &SplitSpec::new(0.8, 0.1, 0.1, SplitUnit::ByInteraction, 2).unwrap()).unwrap();
        let cfg =
            TrainConfig { family, dim: 3, layers: 1, max_epochs: 4, learning_rate: 0.01, ..TrainConfig::default() };
        let out = train(&split, &cfg).unwrap();
        let path = dir.path().join(format!("{family}.json"));
        out.report.checkpoint.save(&path).unwrap();
        let model = Checkpoint::load(&path).unwrap().into_model().unwrap();
        let history = History::from_dataset(&split.train);
        let a = out.model.predict(&history, split.test.interactions()).unwrap();
        let b = model.predict(&history, split.test.interactions()).unwrap();
        assert_eq!(a, b, "{family}");
        let m = evaluate(&model, &history, &split.test, cfg.lambda).unwrap();
        assert_eq!(m.n, split.test.len());
    }
}

#[test]
fn training_is_reproducible_from_the_seed() {
    let s = small();
    let split =
        split_dataset(&s.dataset, &SplitSpec::new(0.8, 0.1, 0.1, SplitUnit::ByInteraction, 4).unwrap()).unwrap();
    let cfg = TrainConfig { dim: 2, max_epochs: 5, learning_rate: 0.02, seed: 9, ..TrainConfig::default() };
    let a = train(&split, &cfg).unwrap();
    let b = train(&split, &cfg).unwrap();
    assert_eq!(a.report.checkpoint, b.report.checkpoint);
    assert_eq!(a.report.epochs, b.report.epochs);
}

fn dpmtl(root: &std::path::Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dpmtl"));
    c.env("DPMTL_OUTPUT_ROOT", root);
    c
}

#[test]
fn binary_writes_under_the_output_root_and_reports_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let status = dpmtl(root.path())
        .args(["synth", "--users", "40", "--items", "6", "--dim", "2", "--out", "data"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let data = root.path().join("data/interactions.csv");
    assert!(data.exists());

    let cfg = root.path().join("train.json");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "interactions": data,
            "train": {"family": "dp-nmf", "dim": 2, "layers": 2, "max_epochs": 3},
            "output": "nmf"
        })
        .to_string(),
    )
    .unwrap();
    let out = dpmtl(root.path()).args(["train", "--config"]).arg(&cfg).args(["--lambda", "0.3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.path().join("nmf/config.json")).unwrap()).unwrap();
    assert_eq!(saved["train"]["lambda"], 0.3);
    assert_eq!(saved["train"]["layers"], 2);

    let bad = dpmtl(root.path()).args(["train", "--config"]).arg(&cfg).args(["--dim", "0"]).status().unwrap();
    assert_eq!(bad.code(), Some(1));
    let unknown = dpmtl(root.path()).arg("frobnicate").status().unwrap();
    assert_eq!(unknown.code(), Some(1));
}
