//! The `sentreason` binary on the bundled fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sentreason_cli::{mock_answer, MockPolicy};
use sentreason_core::corpus::load_canonical;
use sentreason_core::gateway::mock::MockAnswer;
use sentreason_core::{DatasetName, Split};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// A small-model config over `data` (TOML `[data]` body) in `dir`.
fn config(dir: &Path, data: &str, extra: &str) -> PathBuf {
    let body = format!(
        "output_dir = \"runs\"\nseed = 5\n\n[data]\nname = \"restaurant\"\n{data}\n\
         [train]\nepochs = 2\nbatch_size = 4\nlearning_rate = 0.005\nd_model = 32\nff_dim = 64\n\
         max_positions = 160\nmax_input_tokens = 150\nmax_target_tokens = 90\n\n{extra}"
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let data = format!("canonical = {:?}\n", fixtures().join("small/dataset.jsonl"));
    config(dir, &data, extra)
}

fn run(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sentreason"))
        .arg("--config")
        .arg(config)
        .args(["--run-id", "t"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "stdout:\n{stdout}\nstderr:\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

#[test]
fn ingest_semeval_with_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let sem = fixtures().join("semeval");
    let data = format!(
        "[[data.semeval]]\nxml = {:?}\nimplicit_tags = {:?}\nsplit = \"train\"\n\
         [[data.semeval]]\nxml = {:?}\nimplicit_tags = {:?}\nsplit = \"test\"\n",
        sem.join("train.xml"),
        sem.join("train.implicit.jsonl"),
        sem.join("test.xml"),
        sem.join("test.implicit.jsonl"),
    );
    let cfg = config(dir.path(), &data, "");
    let stdout = ok(run(&cfg, &["ingest"]));
    assert!(stdout.contains("8 examples"), "{stdout}");
    assert!(stdout.contains("dropped 1 conflict"), "{stdout}");
    let ds = load_canonical(&dir.path().join("runs/t/ingest/dataset.jsonl"), DatasetName::Restaurant).unwrap();
    assert_eq!(ds.len(), 8);
    assert!(ds.get("1001:1").unwrap().implicit);
    assert!(ds.get("1002:0").unwrap().implicit);
    assert!(!ds.get("1001:0").unwrap().implicit);
    assert!(ds.get("2001:0").unwrap().implicit);
    // No validation split in the source, so one is held out from train.
    assert_eq!(ds.count(Split::Validation), 1);
}

#[test]
fn ingest_missing_file_and_validate_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "canonical = \"nowhere.jsonl\"\n", "");
    let out = run(&cfg, &["ingest"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.jsonl"));

    let cfg = small_config(dir.path(), "");
    let stdout = ok(run(&cfg, &["ingest", "--validate-only"]));
    assert!(stdout.contains("20 examples"));
    assert!(!dir.path().join("runs").exists());

    let out = run(&dir.path().join("absent.toml"), &["ingest"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_data_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\":\"a\",\"sentence\":\"x\",\"aspect_term\":\"y\",\"polarity\":\"positive\",\"implicit\":false,\"split\":\"train\"}\n").unwrap();
    let cfg = config(dir.path(), &format!("canonical = {bad:?}\n"), "");
    assert_eq!(run(&cfg, &["ingest"]).status.code(), Some(2));
}

#[test]
fn missing_upstream_artifacts_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    for (cmd, artifact) in [
        ("generate", "ingest/dataset.jsonl"),
        ("build", "ingest/dataset.jsonl"),
        ("train", "ingest/dataset.jsonl"),
        ("eval", "ingest/dataset.jsonl"),
        ("report", "ingest/dataset.jsonl"),
    ] {
        let out = run(&cfg, &[cmd]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stderr).contains(artifact), "{cmd}");
    }
    ok(run(&cfg, &["ingest"]));
    let out = run(&cfg, &["build"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("generate/rationales.jsonl"));
    let out = run(&cfg, &["train"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("build/taskset.jsonl"));
}

#[test]
fn generation_is_cached_and_tolerates_a_refusal() {
    let dir = tempfile::tempdir().unwrap();
    let ds = load_canonical(&fixtures().join("small/dataset.jsonl"), DatasetName::Restaurant).unwrap();
    let five: Vec<_> = ds.examples().iter().take(5).cloned().map(|mut e| {
        e.split = Split::Train;
        e
    }).collect();
    let path = dir.path().join("five.jsonl");
    let text: String = five.iter().map(|e| serde_json::to_string(e).unwrap() + "\n").collect();
    std::fs::write(&path, text).unwrap();

    // Find a seed under which exactly one of the five is refused.
    let policy = MockPolicy { wrong_rate: 0.0, ambiguous_rate: 0.0, no_label_rate: 0.0, refuse_rate: 0.2 };
    let seed = (0..1000u64)
        .find(|&s| five.iter().filter(|e| mock_answer(&policy, s, e) == MockAnswer::Refuse).count() == 1)
        .unwrap();
    let extra = "[generation]\nfailure_threshold = 0.5\n[generation.mock]\nwrong_rate = 0.0\nambiguous_rate = 0.0\nno_label_rate = 0.0\nrefuse_rate = 0.2\n";
    let cfg = config(dir.path(), &format!("canonical = {path:?}\nvalidation_fraction = 0.0\n"), extra);
    let seed = seed.to_string();
    ok(run(&cfg, &["--seed", &seed, "ingest"]));
    let first = ok(run(&cfg, &["--seed", &seed, "generate"]));
    assert!(first.contains("4 of 5 generations succeeded"), "{first}");
    assert!(first.contains("backend calls: 5"), "{first}");
    assert_eq!(first.matches("failed ").count(), 1, "{first}");
    let store = dir.path().join("runs/t/generate/rationales.jsonl");
    let rows = std::fs::read_to_string(&store).unwrap();
    assert_eq!(rows.lines().count(), 4);
    assert!(rows.lines().all(|l| l.contains("\"reason\":\"match\"")));

    // Refusals are not cached, so only the refused prompt goes out again.
    let second = ok(run(&cfg, &["--seed", &seed, "generate"]));
    assert!(second.contains("backend calls: 1"), "{second}");
    assert_eq!(std::fs::read_to_string(&store).unwrap(), rows);

    let strict = config(dir.path(), &format!("canonical = {path:?}\nvalidation_fraction = 0.0\n"),
        &extra.replace("0.5", "0.1"));
    assert_eq!(run(&strict, &["--seed", &seed, "generate"]).status.code(), Some(1));
}

#[test]
fn rerun_with_warm_cache_makes_no_calls() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "[generation.mock]\nrefuse_rate = 0.0\n");
    ok(run(&cfg, &["ingest"]));
    let first = ok(run(&cfg, &["generate"]));
    assert!(!first.contains("backend calls: 0"));
    let second = ok(run(&cfg, &["generate"]));
    assert!(second.contains("backend calls: 0"), "{second}");
}

fn read(dir: &Path, rel: &str) -> String {
    std::fs::read_to_string(dir.join("runs/t").join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn full_chain_on_the_small_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "[search]\nepochs = 1\n");
    for cmd in ["ingest", "generate", "build", "train", "eval", "report"] {
        let stdout = ok(run(&cfg, &[cmd]));
        assert!(stdout.contains("wrote "), "{cmd} printed no artifact paths");
    }
    let report: serde_json::Value = serde_json::from_str(&read(dir.path(), "report/report.json")).unwrap();
    assert_eq!(report["slices"]["all"]["n"], 5);
    assert_eq!(report["ambiguity"]["total"], 12);
    assert!(read(dir.path(), "train/train_log.csv").starts_with("step,l_exp,l_ver,l_pre,l_combined,lr\n"));
    assert!(dir.path().join("runs/t/train/epoch_1/weights.safetensors").exists());
    assert!(dir.path().join("runs/t/train/epoch_2/weights.safetensors").exists());

    // Rerunning leaves every non-manifest artifact byte-identical.
    let stable = ["ingest/dataset.jsonl", "generate/rationales.jsonl", "build/taskset.jsonl",
        "train/train_log.csv", "eval/report.json", "eval/results.csv", "report/report.json", "report/errors.csv"];
    let before: Vec<String> = stable.iter().map(|r| read(dir.path(), r)).collect();
    for cmd in ["ingest", "generate", "build", "train", "eval", "report"] {
        ok(run(&cfg, &[cmd]));
    }
    for (rel, old) in stable.iter().zip(&before) {
        assert_eq!(&read(dir.path(), rel), old, "{rel} changed on rerun");
    }

    ok(run(&cfg, &["eval", "--slice", "isa"]));
    let csv = read(dir.path(), "eval/results.csv");
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("restaurant,isa,"));

    let stdout = ok(run(&cfg, &["search"]));
    let table = read(dir.path(), "search/search.csv");
    assert_eq!(table.lines().next(), Some("alpha,gamma,val_macro_f1,error"));
    assert_eq!(table.lines().count(), 1 + 15);
    assert!(stdout.contains("best alpha"));
}

#[test]
fn gamma_without_verification_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "[taskset]\nwith_verification = false\n");
    for cmd in ["ingest", "generate", "build"] {
        ok(run(&cfg, &[cmd]));
    }
    let out = run(&cfg, &["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma"));
}
