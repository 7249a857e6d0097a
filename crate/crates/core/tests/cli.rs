use std::path::Path;
use std::process::{Command, Output};

use moe_surgery::checkpoint::{resolve_mlp, LayerMlp};
use moe_surgery::cli::{settings_path, PipelineConfig, VerifyOutcome};
use moe_surgery::engine::{build_toy_model, ToyModelConfig};
use moe_surgery::report::{Report, VariantResult};
use moe_surgery::{load_checkpoint, save_checkpoint};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moe-surgery"))
        .current_dir(dir)
        .env("MLPMOE_THREADS", "2")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["build-toy", "--output", "toy.st"]);
    dir
}

#[test]
fn convert_writes_branch_checkpoint_and_sidecar() {
    let dir = setup();
    let d = dir.path();
    let stdout = ok(d, &["convert", "--input", "toy.st", "--output", "moe.st", "--branches", "16", "--json-out", "convert.json"]);
    assert!(stdout.contains("+32"), "{stdout}");
    let moe = load_checkpoint(d.join("moe.st")).unwrap();
    for layer in 0..2 {
        match resolve_mlp(&moe, layer).unwrap() {
            LayerMlp::Moe(m) => assert_eq!(m.branches.len(), 16),
            LayerMlp::Dense(_) => panic!("layer {layer} still dense"),
        }
    }
    assert!(settings_path(&d.join("moe.st")).exists());
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("convert.json")).unwrap()).unwrap();
    assert_eq!(summary["param_delta"], 32);
}

#[test]
fn single_branch_output_verifies_exactly() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["convert", "--input", "toy.st", "--output", "b1.st", "--branches", "1"]);
    ok(d, &["verify", "--input", "toy.st", "--candidate", "b1.st", "--json-out", "v.json"]);
    let v: VerifyOutcome = serde_json::from_slice(&std::fs::read(d.join("v.json")).unwrap()).unwrap();
    assert!(v.passed);
    assert_eq!(v.logits_max_dev, 0.0);
    assert!(v.per_layer_mlp_max_dev.iter().all(|&x| x == 0.0));
}

#[test]
fn too_many_branches_fails_naming_the_layer() {
    let dir = setup();
    let out = run(dir.path(), &["convert", "--input", "toy.st", "--output", "x.st", "--branches", "257"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("layer 0"), "{err}");
    assert!(!dir.path().join("x.st").exists());
}

#[test]
fn verify_passes_on_conversion_and_fails_on_fade() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["convert", "--input", "toy.st", "--output", "moe.st", "--branches", "8"]);
    let stdout = ok(d, &["verify", "--input", "toy.st", "--candidate", "moe.st", "--json-out", "v.json"]);
    assert!(stdout.contains("PASS"));
    let v: VerifyOutcome = serde_json::from_slice(&std::fs::read(d.join("v.json")).unwrap()).unwrap();
    assert!(v.logits_max_dev <= 1e-4);

    ok(d, &["sparsify", "--input", "moe.st", "--output", "fade.st"]);
    let out = run(d, &["verify", "--input", "toy.st", "--candidate", "fade.st"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn verify_rejects_mismatched_architecture() {
    let dir = setup();
    let d = dir.path();
    let cfg = ToyModelConfig { d_model: 32, d_inter: 128, ..Default::default() };
    std::fs::write(d.join("small.json"), serde_json::to_vec(&cfg).unwrap()).unwrap();
    ok(d, &["build-toy", "--config", "small.json", "--output", "small.st"]);
    let out = run(d, &["verify", "--input", "toy.st", "--candidate", "small.st"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("architecture mismatch"));
}

#[test]
fn sparsify_reports_fade_fraction() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["convert", "--input", "toy.st", "--output", "moe.st", "--branches", "16"]);
    ok(d, &["sparsify", "--input", "moe.st", "--output", "fade.st", "--json-out", "s.json"]);
    let s: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("s.json")).unwrap()).unwrap();
    let frac = s["gate_up_nonzero_fraction"].as_f64().unwrap();
    assert!((frac - 0.578125).abs() <= 0.01, "{frac}");
}

#[test]
fn prune_sets_compensated_gates() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["convert", "--input", "toy.st", "--output", "moe.st", "--branches", "16"]);
    ok(d, &["prune", "--input", "moe.st", "--output", "p.st", "--prune-k", "4", "--json-out", "p.json"]);
    let p: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("p.json")).unwrap()).unwrap();
    let alphas: Vec<f64> = p["alphas"]["0"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(&alphas[..4], &[2.0; 4]);
    assert!(alphas[4..].iter().all(|&a| a == 0.0));
    assert_eq!(alphas.len(), 16);

    let out = run(d, &["prune", "--input", "moe.st", "--output", "q.st", "--prune-k", "17"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(d, &["prune", "--input", "toy.st", "--output", "q.st", "--prune-k", "2"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_and_report_two_rows() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["convert", "--input", "toy.st", "--output", "moe.st", "--branches", "16"]);
    ok(d, &["eval", "--input", "toy.st", "--label", "Dense-Original", "--gen-tokens", "16", "--json-out", "dense.json"]);
    ok(d, &["eval", "--input", "moe.st", "--label", "MLPMoE-All-16", "--gen-tokens", "16", "--json-out", "moe.json"]);
    assert!(settings_path(&d.join("dense.json")).exists());
    let text = ok(d, &["report", "--input", "dense.json", "--input", "moe.json", "--output", "report.json"]);
    assert_eq!(text.lines().count(), 4, "{text}");
    assert!(text.starts_with("Variant"));
    assert!(text.contains("Non-zero Params"));

    let report: Report = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 2);
    let (a, b) = (&report.rows[0], &report.rows[1]);
    assert_eq!(b.total_params, a.total_params + 32);
    assert!((b.proxy_ppl - a.proxy_ppl).abs() / a.proxy_ppl <= 1e-3);

    let dense: VariantResult = serde_json::from_slice(&std::fs::read(d.join("dense.json")).unwrap()).unwrap();
    assert_eq!(dense.eval.tokens_generated, 16);
    assert!(dense.eval.generation_seconds.unwrap() > 0.0);
}

#[test]
fn eval_reads_token_id_files() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("c.ids"), "1 2 3 4 5\n6 7 8 9 10\n").unwrap();
    ok(d, &["eval", "--input", "toy.st", "--corpus", "c.ids", "--gen-tokens", "2", "--json-out", "e.json"]);
    let r: VariantResult = serde_json::from_slice(&std::fs::read(d.join("e.json")).unwrap()).unwrap();
    assert_eq!(r.eval.token_count, 9);
    std::fs::write(d.join("bad.ids"), "1 999").unwrap();
    assert_eq!(run(d, &["eval", "--input", "toy.st", "--corpus", "bad.ids"]).status.code(), Some(1));
}

#[test]
fn report_without_inputs_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["report"]);
    assert!(!out.status.success());
}

#[test]
fn pipeline_matches_step_by_step_and_in_process() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["convert", "--input", "toy.st", "--output", "m.st", "--branches", "16"]);
    ok(d, &["sparsify", "--input", "m.st", "--output", "f.st"]);
    ok(d, &["prune", "--input", "f.st", "--output", "p.st", "--prune-k", "4", "--drop-dead"]);
    ok(d, &[
        "pipeline", "--input", "toy.st", "--output", "all.st", "--branches", "16",
        "--fade-max-ratio", "0.9", "--prune-k", "4", "--drop-dead",
    ]);
    let steps = std::fs::read(d.join("p.st")).unwrap();
    assert_eq!(steps, std::fs::read(d.join("all.st")).unwrap());

    let cfg = PipelineConfig {
        input: d.join("toy.st"),
        output: d.join("x.st"),
        branches: 16,
        fade_max_ratio: Some(0.9),
        prune_k: Some(4),
        drop_dead: true,
        corpus: None,
        seed: 42,
        variant: "x".into(),
    };
    let in_process = cfg.apply(&load_checkpoint(d.join("toy.st")).unwrap()).unwrap();
    assert_eq!(in_process.to_bytes().unwrap(), steps);
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["convert", "--input", "toy.st", "--output", "a.st", "--branches", "8"]);
    let out = Command::new(env!("CARGO_BIN_EXE_moe-surgery"))
        .current_dir(d)
        .env("MLPMOE_THREADS", "1")
        .args(["convert", "--input", "toy.st", "--output", "b.st", "--branches", "8"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(d.join("a.st")).unwrap(), std::fs::read(d.join("b.st")).unwrap());
}

#[test]
fn io_and_format_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = run(d, &["convert", "--input", "missing.st", "--output", "o.st", "--branches", "2"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(d.join("junk.st"), b"\x10\x00\x00\x00\x00\x00\x00\x00{not json at all").unwrap();
    let out = run(d, &["convert", "--input", "junk.st", "--output", "o.st", "--branches", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format error at byte"));
}

#[test]
fn inspect_counts_from_header() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    save_checkpoint(&build_toy_model(&ToyModelConfig::default()).unwrap(), d.join("t.st")).unwrap();
    let stdout = ok(d, &["inspect", "--input", "t.st", "--branches", "16"]);
    assert!(stdout.contains("164160 params"), "{stdout}");
    assert!(stdout.contains("164192 params (+32)"), "{stdout}");
}

#[test]
fn build_toy_seed_flag_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["build-toy", "--output", "a.st"]);
    ok(d, &["build-toy", "--output", "b.st", "--seed", "42"]);
    ok(d, &["build-toy", "--output", "c.st", "--seed", "7"]);
    let read = |n: &str| std::fs::read(d.join(n)).unwrap();
    assert_eq!(read("a.st"), read("b.st"));
    assert_ne!(read("a.st"), read("c.st"));
}
