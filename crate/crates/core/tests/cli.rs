//! End-to-end exercises of the command-line surface: the full
//! gen -> train -> eval -> ablate -> export flow on a miniature corpus,
//! output schemas, and the error exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn emofuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emofuse"))
        .args(args)
        .output()
        .expect("spawn emofuse")
}

fn write_tiny_spec(path: &Path) {
    let spec = serde_json::json!({
        "n_train_utterances": 6,
        "n_devel_utterances": 2,
        "frames_per_utterance": 8,
        "widths": {"egemaps": 8, "mfcc": 5, "boaw_e": 6, "boaw_m": 6, "deep_spectrum": 9}
    });
    std::fs::write(path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
}

fn tiny_config(manifest: &Path, out_dir: &Path, strategy: &str) -> serde_json::Value {
    serde_json::json!({
        "seed": 11,
        "k": 4,
        "d_e": 3,
        "d_k": 3,
        "k_nn": 2,
        "encoder_hidden": [5, 4],
        "head_hidden": [5, 4],
        "epochs": 2,
        "batch_size": 3,
        "targets": ["arousal", "valence", "liking"],
        "strategy": strategy,
        "manifest": manifest.to_str().unwrap(),
        "out_dir": out_dir.to_str().unwrap(),
    })
}

#[test]
fn full_command_flow_on_tiny_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("spec.json");
    write_tiny_spec(&spec_path);
    let corpus = dir.path().join("corpus");

    // gen
    let out = emofuse(&[
        "gen",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        corpus.to_str().unwrap(),
        "--seed",
        "21",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(corpus.join("manifest.json").exists());

    // train
    let manifest = corpus.join("manifest.json");
    let run_dir = dir.path().join("run");
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        serde_json::to_string_pretty(&tiny_config(&manifest, &run_dir, "ttf_amef")).unwrap(),
    )
    .unwrap();
    let out = emofuse(&["train", "--config", cfg_path.to_str().unwrap(), "--quiet"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for artifact in ["checkpoint.json", "metrics.json", "config.json", "history.jsonl"] {
        assert!(run_dir.join(artifact).exists(), "{artifact} missing");
    }

    // history is append-only: a second run adds a line.
    let lines_before = std::fs::read_to_string(run_dir.join("history.jsonl"))
        .unwrap()
        .lines()
        .count();
    let out = emofuse(&["train", "--config", cfg_path.to_str().unwrap(), "--quiet"]);
    assert!(out.status.success());
    let lines_after = std::fs::read_to_string(run_dir.join("history.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(lines_after, lines_before + 1);

    // eval
    let out = emofuse(&[
        "eval",
        "--checkpoint",
        run_dir.join("checkpoint.json").to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--cultures",
        "DE,HU",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("# schema: emofuse-eval-v1"));
    for t in ["arousal", "valence", "liking"] {
        assert!(text.contains(t), "missing {t} in eval table:\n{text}");
    }

    // export-embeddings
    let emb_path = dir.path().join("embeddings.txt");
    let out = emofuse(&[
        "export-embeddings",
        "--checkpoint",
        run_dir.join("checkpoint.json").to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        emb_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let emb = std::fs::read_to_string(&emb_path).unwrap();
    let mut lines = emb.lines();
    assert_eq!(lines.next().unwrap(), "# schema: emofuse-embeddings-v1");
    let header: Vec<usize> = lines
        .next()
        .unwrap()
        .split_whitespace()
        .map(|v| v.parse().unwrap())
        .collect();
    let (n_frames, dim) = (header[0], header[1]);
    assert_eq!(n_frames, 8 * 8, "all utterances' frames exported");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), n_frames);
    for row in rows {
        let vals: Vec<f64> = row
            .split_whitespace()
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(vals.len(), dim + 3, "fused vector plus three labels");
        // Appended labels are in range.
        assert!(vals[dim..].iter().all(|v| v.abs() <= 1.0));
    }
}

#[test]
fn ablate_emits_one_row_per_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("spec.json");
    write_tiny_spec(&spec_path);
    let corpus = dir.path().join("corpus");
    let out = emofuse(&[
        "gen",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        corpus.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    let cfg_path = dir.path().join("cfg.json");
    let mut cfg = tiny_config(&corpus.join("manifest.json"), &dir.path().join("ablate"), "ttf_amef");
    cfg["epochs"] = serde_json::json!(1);
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    let out = emofuse(&[
        "ablate",
        "--config",
        cfg_path.to_str().unwrap(),
        "--strategies",
        "ave,fc,ttf_amef",
        "--quiet",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# schema: emofuse-ablation-v1");
    assert_eq!(lines[1], "strategy\tarousal\tvalence\tliking");
    assert_eq!(lines.len(), 2 + 3, "3 strategies -> 3 rows:\n{text}");
    for (row, name) in lines[2..].iter().zip(["ave", "fc", "ttf_amef"]) {
        let cells: Vec<&str> = row.split('\t').collect();
        assert_eq!(cells[0], name);
        assert_eq!(cells.len(), 4, "strategy + 3 targets");
    }
    assert!(dir.path().join("ablate").join("ablation.tsv").exists());
}

#[test]
fn exit_codes_distinguish_error_classes() {
    let dir = tempfile::tempdir().unwrap();

    // Config error (unknown keys) -> 2.
    let bad_cfg = dir.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{"seed": 1, "bogus_key": true}"#).unwrap();
    let out = emofuse(&["train", "--config", bad_cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));

    // Data error (missing manifest) -> 3.
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "manifest": dir.path().join("nope/manifest.json").to_str().unwrap(),
            "out_dir": dir.path().join("out").to_str().unwrap(),
        })
        .to_string(),
    )
    .unwrap();
    let out = emofuse(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));

    // Usage error (unknown flag) -> 4.
    let out = emofuse(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(4));

    // Gradcheck with an invalid config file -> config error.
    let out = emofuse(&["gradcheck", "--config", bad_cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_command_reports_per_layer_rows() {
    let dir = tempfile::tempdir().unwrap();
    // Shrink the harness further so this integration test stays quick.
    let cfg = serde_json::json!({
        "gradcheck": {
            "k": 3, "d_e": 2, "d_k": 2, "k_nn": 2,
            "encoder_hidden": [4, 3], "head_hidden": [4, 3],
            "stream_widths": [4, 3, 3, 3, 5],
            "frames": 2, "utterances": 2
        }
    });
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = emofuse(&["gradcheck", "--config", cfg_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("# schema: emofuse-gradcheck-v1"));
    for layer in [
        "lstm_encoder",
        "gru_backbone",
        "ttf_refine",
        "avcr_attention",
        "avvr_attention",
        "edge_fc",
        "edge_gcn",
        "readout_head",
        "ccc_loss",
    ] {
        assert!(text.contains(layer), "missing {layer} row:\n{text}");
    }
    assert!(!text.contains("FAIL"), "{text}");
}
