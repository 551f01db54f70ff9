use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use colabel::train::RunHistory;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_colabel"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn small_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/small").join(name)
}

fn pipeline(out: &Path, extra: &[&str]) -> Output {
    let config = small_config("pipeline.json");
    let mut args = vec!["pipeline", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_prints_usage() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("Usage"));
    for sub in ["generate", "integrate", "train-member", "train", "eval", "ablate", "correct", "report", "pipeline"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn unknown_subcommand_and_flag_are_validation_errors() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    let o = run(&["train", "--bogus", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(run(&[]).status.code(), Some(1));
}

#[test]
fn bad_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    assert_eq!(run(&["generate", "--out", out]).status.code(), Some(1));
    assert_eq!(run(&["generate", "--config", "/nonexistent.json", "--out", out]).status.code(), Some(1));
    let gen = small_config("generate.json");
    assert_eq!(run(&["generate", "--config", gen.to_str().unwrap(), "--out", out, "--stage", "x"]).status.code(), Some(1));
    let o = run(&["train", "--config", gen.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert_eq!(run(&["train", "--variant", "Bogus"]).status.code(), Some(1));
    let o = bin().args(["generate", "--config", gen.to_str().unwrap(), "--out", out]).env("COLABEL_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_pipeline_stage_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = pipeline(dir.path(), &["--stage", "nope"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("generate").exists());
}

fn read_history(path: &Path) -> RunHistory {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn bundled_pipeline_runs_end_to_end_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = pipeline(&a, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    for name in ["compcars", "boxcars", "cars196", "vcolors", "veri", "crawled"] {
        assert!(a.join("generate").join(name).join("manifest.jsonl").exists());
        assert!(a.join("integrate").join(name).join("manifest.jsonl").exists());
    }
    for f in ["integrate/coverage_report.json", "integrate/stages.json", "member/early_stop.json", "correct/corrections.jsonl"] {
        assert!(a.join(f).exists(), "{f}");
    }
    for variant in ["CoLabel", "FusionOnly", "TwoStageCascade"] {
        let run = a.join("ablate").join(variant).join("seed0");
        for f in ["history.csv", "history.json", "run_manifest.json", "params.bin", "model_config.json"] {
            assert!(run.join(f).exists(), "{variant}/{f}");
        }
    }
    assert!(a.join("ablate/TwoStageCascade/seed0/cascade_params.bin").exists());

    // Table cells are the final accuracies in the history files; absent variants read n/a.
    let report = std::fs::read_to_string(a.join("report/report.md")).unwrap();
    let csv = std::fs::read_to_string(a.join("report/variants.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let model_row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    for variant in ["CoLabel", "FusionOnly", "TwoStageCascade"] {
        let h = read_history(&a.join("ablate").join(variant).join("seed0/history.json"));
        let col = header.iter().position(|c| *c == variant).unwrap();
        assert_eq!(model_row[col], format!("{:.4}", h.final_accuracy("model").unwrap()));
    }
    let col = header.iter().position(|c| *c == "NoAtt").unwrap();
    assert_eq!(model_row[col], "n/a");
    for stage in ["Initial", "+EarlyStop", "+Compression(90,70,50)", "+Team", "+Agreement", "AVA", "2SC-Match"] {
        assert!(report.contains(stage), "{stage}");
    }

    let o = pipeline(&b, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["report/report.md", "report/variants.csv", "integrate/coverage_report.json", "correct/corrections.jsonl", "ablate/CoLabel/seed0/history.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let ha = read_history(&a.join("ablate/CoLabel/seed0/history.json"));
    let hb = read_history(&b.join("ablate/CoLabel/seed0/history.json"));
    assert_eq!(ha.epochs, hb.epochs);

    // A corrupt weight file is a runtime failure.
    std::fs::write(a.join("ablate/CoLabel/seed0/params.bin"), b"garbage").unwrap();
    let o = pipeline(&a, &["--stage", "eval-colabel"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn single_stage_and_partial_reports() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let o = pipeline(root, &["--stage", "generate"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(root.join("generate/compcars").exists());
    assert!(!root.join("integrate").exists());

    let config = root.join("train.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "train": root.join("generate/compcars"),
            "validation": root.join("generate/boxcars"),
            "model": { "shared_width": 4, "branch_widths": [4, 8], "feature_dim": 8, "image_size": 16 },
            "training": { "epochs": 1, "batch_size": 32 }
        })
        .to_string(),
    )
    .unwrap();
    let run_dir = root.join("run");
    let o = run(&["train", "--config", config.to_str().unwrap(), "--out", run_dir.to_str().unwrap(), "--variant", "NoAtt", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let h = read_history(&run_dir.join("history.json"));
    assert_eq!((h.variant.as_str(), h.seed), ("NoAtt", 3));

    let report_config = root.join("report.json");
    std::fs::write(&report_config, serde_json::json!({ "runs": [run_dir] }).to_string()).unwrap();
    let o = run(&["report", "--config", report_config.to_str().unwrap(), "--out", root.join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(root.join("r/variants.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "head,NoAtt");

    std::fs::write(&report_config, serde_json::json!({ "runs": [run_dir, root.join("absent")] }).to_string()).unwrap();
    let o = run(&["report", "--config", report_config.to_str().unwrap(), "--out", root.join("r2").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let md = std::fs::read_to_string(root.join("r2/report.md")).unwrap();
    assert!(md.contains("Missing inputs") && md.contains("absent"));
}
