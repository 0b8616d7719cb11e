//! End-to-end tests driving the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

use autospikformer::energy::{flops_catalog, uniform_trace, write_fr_trace};
use autospikformer::space::{ArchSpec, Candidate, FixedBackbone};

const BASELINE: &str = "(1.0, 1.0, 1.0, 1.0, 2, 2, 2, 2, 4)";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_autospikformer"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_toy_config(dir: &Path) -> std::path::PathBuf {
    let config = serde_json::json!({
        "space": "s_s",
        "backbone": { "depth": 4, "embed_dim": 16, "mlp_ratio": 1.0, "head_num": 2 },
        "data": { "kind": "synthetic", "classes": 2, "size": 8, "per_class": 6, "sigma": 0.1 },
        "train": { "epochs": 1, "batch_size": 4, "learning_rate": 0.002, "weight_decay": 0.01, "seed": 7 },
        "evo": {
            "population_size": 4, "generations": 2, "parent_count": 2,
            "mutation_prob": 0.2, "crossover_prob": 0.5, "alpha": 0.5, "seed": 7,
            "total_sample_budget": 5, "elitist": true
        },
        "checkpoint_dir": dir.join("ckpt"),
        "results_path": dir.join("results.jsonl"),
        "report_dir": dir.join("report"),
        "seed": 7
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn usage_errors_exit_1() {
    assert_code(&run(&[]), 1);
    assert_code(&run(&["train"]), 1); // --config is required
    assert_code(&run(&["--help"]), 0);
}

#[test]
fn unknown_config_key_exits_1_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_toy_config(dir.path());
    let text = std::fs::read_to_string(&path).unwrap().replacen("\"seed\"", "\"sead\"", 1);
    std::fs::write(&path, text).unwrap();
    let out = run(&["train", "--config", path.to_str().unwrap()]);
    assert_code(&out, 1);
    assert!(!dir.path().join("ckpt").exists(), "no compute on invalid config");
}

#[test]
fn train_search_evaluate_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_toy_config(dir.path());
    let config = config.to_str().unwrap();

    let out = run(&["train", "--config", config]);
    assert_code(&out, 0);
    assert!(dir.path().join("ckpt/manifest.json").exists());
    assert!(dir.path().join("ckpt/loss_history.csv").exists());

    let out = run(&["search", "--config", config, "--budget", "5"]);
    assert_code(&out, 0);
    assert!(dir.path().join("results.jsonl").exists());
    assert!(dir.path().join("report/front.csv").exists());

    // The Table-2-style baseline tuple evaluates, twice identically.
    let json_a = dir.path().join("a.json");
    let json_b = dir.path().join("b.json");
    let out = run(&[
        "evaluate", "--config", config, BASELINE, "--out", json_a.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(stdout.contains("accuracy"), "prints accuracy: {stdout}");
    assert!(stdout.contains("fr "), "prints per-layer fr: {stdout}");
    assert!(stdout.contains("energy"), "prints energy: {stdout}");
    let out = run(&[
        "evaluate", "--config", config, BASELINE, "--out", json_b.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert_eq!(
        std::fs::read(&json_a).unwrap(),
        std::fs::read(&json_b).unwrap(),
        "evaluation is deterministic"
    );

    let results = dir.path().join("results.jsonl");
    let report_dir = dir.path().join("report");
    let out = run(&[
        "report",
        results.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("kendall tau"));
    let svg = std::fs::read_to_string(report_dir.join("scatter.svg")).unwrap();
    let records = std::fs::read_to_string(&results).unwrap().lines().count();
    assert_eq!(svg.matches("<circle").count(), records);
}

#[test]
fn malformed_candidate_exits_1_naming_the_gene() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_toy_config(dir.path());
    let out = run(&[
        "evaluate",
        "--config",
        config.to_str().unwrap(),
        "(1.0, 1.0, oops, 1.0, 2, 2, 2, 2, 4)",
    ]);
    assert_code(&out, 1);
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(stderr.contains("gene 3"), "names the offending gene: {stderr}");
}

#[test]
fn energy_audit_runs_without_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let baseline: Candidate = BASELINE.parse().unwrap();
    let spec = ArchSpec::resolve(&baseline, Some(&FixedBackbone::spikformer_4_384())).unwrap();
    let catalog = flops_catalog(&spec, (32, 32), 3, 10).unwrap();
    let trace_path = dir.path().join("trace.csv");
    write_fr_trace(&trace_path, &uniform_trace(&catalog, 0.35)).unwrap();

    let csv_path = dir.path().join("energy.csv");
    let out = run(&[
        "energy", BASELINE,
        trace_path.to_str().unwrap(),
        "--time-step", "4",
        "--out", csv_path.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("layer_id,kind,flops,fr,sops,joules"));
    assert_eq!(csv.lines().count(), catalog.len() + 1);

    // t outside the 2..4 grid is a config error.
    let out = run(&["energy", BASELINE, trace_path.to_str().unwrap(), "--time-step", "0"]);
    assert_code(&out, 1);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    // Energy audit with a missing trace file.
    let out = run(&["energy", BASELINE, dir.path().join("nope.csv").to_str().unwrap()]);
    assert_code(&out, 2);
    // Report over a single record.
    let results = dir.path().join("one.jsonl");
    std::fs::write(
        &results,
        "{\"candidate\":\"(1, 1, 1, 1, 2, 2, 2, 2, 4)\",\"accuracy\":0.5,\"energy_joules\":1e-4,\
         \"scaled_acc\":0.5,\"scaled_energy\":0.5,\"fitness\":0.5,\"generation\":0,\"seed\":0}\n",
    )
    .unwrap();
    let out = run(&[
        "report",
        results.to_str().unwrap(),
        "--out",
        dir.path().join("report").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
}
