//! End-to-end command tests on a micro budget: synth -> train -> propagate ->
//! eval, plus the error paths the commands promise.

use memtrack::cli::{
    resolve_config, run_eval, run_propagate, run_synth, run_train, EvalArgs, PropagateArgs,
    SynthArgs, TrainArgs,
};
use memtrack::error::Error;
use std::path::Path;

fn synth(out: &Path, preset: &str, seed: u64, count: usize) {
    run_synth(&SynthArgs {
        out: out.to_path_buf(),
        spec: None,
        preset: Some(preset.into()),
        seed,
        count,
    })
    .unwrap();
}

fn micro_overrides() -> Vec<(String, String)> {
    [
        ("phase1_steps", "20"),
        ("phase2_steps", "5"),
        ("batch_size", "4"),
        ("phase2_batch_size", "1"),
        ("widths", "8,12,16"),
        ("frame_size", "0"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

#[test]
fn full_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "corpus", 3, 3);
    assert!(data.join("seq_000/frames/00000.png").is_file());
    assert!(data.join("seq_000/masks/00000.png").is_file());
    assert!(data.join("seq_000/truth.json").is_file());
    assert!(data.join("spec.json").is_file());
    assert!(data.join("run_manifest.json").is_file());

    let train_out = dir.path().join("train");
    run_train(&TrainArgs {
        data: data.clone(),
        out: train_out.clone(),
        config: None,
        overrides: micro_overrides(),
        seed: Some(5),
    })
    .unwrap();
    assert!(train_out.join("checkpoint.bin").is_file());
    assert!(train_out.join("checkpoint_phase1.bin").is_file());
    let loss = std::fs::read_to_string(train_out.join("loss.csv")).unwrap();
    assert!(loss.starts_with("step,phase,lr,loss\n"));
    assert_eq!(loss.lines().count(), 1 + 20 + 5);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(train_out.join("run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["seed"], 5);

    let eval_data = dir.path().join("eval_data");
    synth(&eval_data, "translation", 9, 1);
    let pred = dir.path().join("pred");
    run_propagate(&PropagateArgs {
        checkpoint: train_out.join("checkpoint.bin"),
        frames: eval_data.join("seq_000/frames"),
        mask0: eval_data.join("seq_000/masks/00000.png"),
        out: pred.join("seq_000"),
        size: 0,
        mode: None,
        memory: None,
        radius: None,
    })
    .unwrap();
    for i in 0..6 {
        assert!(pred.join(format!("seq_000/{i:05}.png")).is_file());
    }

    let eval_out = dir.path().join("eval");
    run_eval(&EvalArgs {
        pred: pred.clone(),
        gt: eval_data.clone(),
        out: eval_out.clone(),
        split: None,
        tolerance: None,
    })
    .unwrap();
    let csv = std::fs::read_to_string(eval_out.join("scores.csv")).unwrap();
    assert!(csv.starts_with("sequence,object,J_mean,F_mean\n"));
    assert!(csv.contains("seq_000,1,"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_out.join("summary.json")).unwrap())
            .unwrap();
    assert!(summary["j_overall"].as_f64().unwrap() >= 0.0);
    assert!(summary.get("split").is_none());
}

#[test]
fn propagate_reports_missing_first_frame_mask() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "translation", 1, 1);
    let train_out = dir.path().join("train");
    run_train(&TrainArgs {
        data: data.clone(),
        out: train_out.clone(),
        config: None,
        overrides: {
            let mut o = micro_overrides();
            o.retain(|(k, _)| k != "phase1_steps" && k != "phase2_steps");
            o.push(("phase1_steps".into(), "0".into()));
            o.push(("phase2_steps".into(), "0".into()));
            o
        },
        seed: Some(1),
    })
    .unwrap();
    let missing = data.join("seq_000/masks/99999.png");
    let err = run_propagate(&PropagateArgs {
        checkpoint: train_out.join("checkpoint.bin"),
        frames: data.join("seq_000/frames"),
        mask0: missing.clone(),
        out: dir.path().join("pred"),
        size: 0,
        mode: None,
        memory: None,
        radius: None,
    })
    .unwrap_err();
    match err {
        Error::MissingFile(p) => assert_eq!(p, missing),
        other => panic!("unexpected error: {other}"),
    }
}

#[test]
fn eval_with_identical_seen_and_unseen_scores_reports_zero_gap() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    synth(&gt, "translation", 21, 2);
    // Predictions equal to ground truth: copy the mask directories.
    let pred = dir.path().join("pred");
    for seq in ["seq_000", "seq_001"] {
        let dst = pred.join(seq);
        std::fs::create_dir_all(&dst).unwrap();
        for entry in std::fs::read_dir(gt.join(seq).join("masks")).unwrap() {
            let p = entry.unwrap().path();
            std::fs::copy(&p, dst.join(p.file_name().unwrap())).unwrap();
        }
    }
    let split = dir.path().join("split.txt");
    std::fs::write(&split, "seq_000 seen\nseq_001 unseen\n").unwrap();
    let out = dir.path().join("eval");
    run_eval(&EvalArgs {
        pred,
        gt,
        out: out.clone(),
        split: Some(split),
        tolerance: None,
    })
    .unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["split"]["gen_gap"].as_f64().unwrap(), 0.0);
    assert_eq!(summary["j_overall"].as_f64().unwrap(), 1.0);
}

#[test]
fn eval_rejects_unmatched_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    synth(&gt, "translation", 33, 1);
    let pred = dir.path().join("pred");
    std::fs::create_dir_all(&pred).unwrap();
    let err = run_eval(&EvalArgs {
        pred,
        gt,
        out: dir.path().join("eval"),
        split: None,
        tolerance: None,
    })
    .unwrap_err();
    assert!(err.to_string().contains("seq_000"));
}

#[test]
fn config_file_and_overrides_resolve_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(&cfg_path, "phase1_steps = 50\nlr = 0.002\nmemory = only_short\n").unwrap();
    let cfg = resolve_config(
        Some(&cfg_path),
        &[("lr".to_string(), "0.004".to_string())],
        Some(99),
    )
    .unwrap();
    assert_eq!(cfg.phase1_steps, 50);
    assert_eq!(cfg.lr, 0.004); // override wins over the file
    assert_eq!(cfg.seed, 99);
    assert_eq!(cfg.memory, memtrack::BankPolicy::only_short());

    let err = resolve_config(Some(&cfg_path), &[("bogus".into(), "1".into())], None).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn synth_accepts_a_json_spec_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = serde_json::json!({
        "height": 32, "width": 32, "frames": 3, "seed": 4,
        "shapes": [{"kind": "disk", "radius": 5, "start": [16, 16], "velocity": [0, 0]}],
        "texture_cell": 6, "texture_amplitude": 0.3
    });
    let spec_path = dir.path().join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    let out = dir.path().join("out");
    run_synth(&SynthArgs {
        out: out.clone(),
        spec: Some(spec_path),
        preset: None,
        seed: 0,
        count: 1,
    })
    .unwrap();
    assert!(out.join("seq_000/frames/00002.png").is_file());
}
