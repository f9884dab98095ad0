//! End-to-end runs of the `memgym` binary on the scripted backend.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn memgym(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memgym"))
        .args(args)
        .env_remove("RUST_LOG")
        .env_remove("AMEMGYM_API_KEY")
        .env_remove("AMEMGYM_BASE_URL")
        .output()
        .expect("spawn memgym")
}

fn ok(args: &[&str]) -> String {
    let out = memgym(args);
    assert!(
        out.status.success(),
        "memgym {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the parsed structured error line from stderr.
fn fails(args: &[&str]) -> (i32, Value) {
    let out = memgym(args);
    assert!(!out.status.success(), "memgym {args:?} succeeded");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .rev()
        .find(|l| l.starts_with("{\"error\""))
        .unwrap_or_else(|| panic!("no structured error in {stderr}"));
    (out.status.code().unwrap(), serde_json::from_str(line).unwrap())
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

/// Two blueprints generated with seed 3.
fn generated() -> (TempDir, PathBuf) {
    let tmp = TempDir::new().unwrap();
    let bp = tmp.path().join("bp");
    ok(&["--seed", "3", "gen", "--num-users", "2", "--out", &s(&bp)]);
    (tmp, bp)
}

#[test]
fn gen_writes_blueprints_and_manifest() {
    let (_tmp, bp) = generated();
    assert_eq!(
        listing(&bp),
        ["manifest.json", "user_000.blueprint.json", "user_001.blueprint.json"]
    );
    let doc: Value = serde_json::from_str(&fs::read_to_string(bp.join("user_000.blueprint.json")).unwrap()).unwrap();
    assert_eq!(doc["amemgym_version"], "1");
    assert_eq!(doc["questions"].as_array().unwrap().len(), 10);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(bp.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["seeds"]["base"], 3);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn run_eval_diagnose_report_flow() {
    let (tmp, bp) = generated();
    let runs = tmp.path().join("runs");
    ok(&[
        "run",
        "--blueprints",
        &s(&bp),
        "--agent",
        "oracle,awe",
        "--dump-memory",
        "--out",
        &s(&runs),
    ]);
    assert_eq!(listing(&runs), ["awe-2-4-30", "manifest.json", "oracle"]);
    assert!(listing(&runs.join("awe-2-4-30")).contains(&"user_001.memory.json".to_string()));

    let reports = tmp.path().join("reports");
    for agent in ["oracle", "awe-2-4-30"] {
        let out = ok(&[
            "eval",
            "--blueprints",
            &s(&bp),
            "--traces",
            &s(&runs.join(agent)),
            "--out",
            &s(&reports),
        ]);
        assert_eq!(out.lines().count(), 2, "{out}");
    }
    let oracle_csv = fs::read_to_string(reports.join("oracle.user_000.report.csv")).unwrap();
    assert_eq!(oracle_csv.lines().count(), 12);
    assert!(
        oracle_csv
            .lines()
            .skip(1)
            .all(|l| l.split(',').nth(4) == Some("1.000000")),
        "{oracle_csv}"
    );

    let diag = tmp.path().join("diag");
    ok(&[
        "diagnose",
        "--blueprints",
        &s(&bp),
        "--traces",
        &s(&runs.join("awe-2-4-30")),
        "--out",
        &s(&diag),
    ]);
    let labels = fs::read_to_string(diag.join("awe-2-4-30.user_000.labels.csv")).unwrap();
    assert_eq!(labels.lines().next(), Some("position,question_id,label"));
    assert_eq!(labels.lines().count(), 1 + 11 * 10);

    let summary = tmp.path().join("summary");
    let out = ok(&[
        "report",
        "--repeat-dirs",
        &s(&reports),
        &s(&reports),
        "--out",
        &s(&summary),
    ]);
    assert!(
        out.contains("oracle: 2 run(s), 2 user(s), memory score 1.000 ± 0.000"),
        "{out}"
    );
    assert_eq!(
        listing(&summary),
        [
            "awe-2-4-30.summary.csv",
            "manifest.json",
            "oracle.summary.csv",
            "summary.json"
        ]
    );
}

#[test]
fn offpolicy_replay_reuses_transcripts() {
    let (tmp, bp) = generated();
    let runs = tmp.path().join("runs");
    ok(&["run", "--blueprints", &s(&bp), "--agent", "llm", "--out", &s(&runs)]);
    let source = runs.join("llm");
    let replayed = tmp.path().join("replayed");
    ok(&[
        "run",
        "--blueprints",
        &s(&bp),
        "--agent",
        "awi",
        "--mode",
        "offpolicy",
        "--replay",
        &s(&source),
        "--out",
        &s(&replayed),
    ]);
    let read = |p: PathBuf| -> Value { serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap() };
    let original = read(source.join("user_000.trace.json"));
    let trace = read(replayed.join("awi-2-4-30").join("user_000.trace.json"));
    assert_eq!(trace["mode"], "offpolicy");
    for (a, b) in original["periods"]
        .as_array()
        .unwrap()
        .iter()
        .zip(trace["periods"].as_array().unwrap())
    {
        assert_eq!(a["sessions"], b["sessions"]);
    }
}

#[test]
fn evolve_writes_one_prompt_per_cycle() {
    let (tmp, bp) = generated();
    let evo = tmp.path().join("evo");
    let out = ok(&["evolve", "--blueprints", &s(&bp), "--cycles", "3", "--out", &s(&evo)]);
    assert_eq!(out.lines().filter(|l| l.starts_with("cycle ")).count(), 3);
    let files = listing(&evo);
    for k in 0..3 {
        for name in [
            format!("feedback_v{k}.json"),
            format!("report_v{k}.json"),
            format!("recall_v{k}.json"),
        ] {
            assert!(files.contains(&name), "{name} missing from {files:?}");
        }
    }
    for k in 0..=3 {
        assert!(files.contains(&format!("prompt_v{k}.txt")));
    }
    let curve = fs::read_to_string(evo.join("evolution.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
    assert!(fs::read_to_string(evo.join("prompt_v0.txt"))
        .unwrap()
        .contains("Types of Information to Remember:"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let emit = |tmp: &Path| {
        let bp = tmp.join("bp");
        let runs = tmp.join("runs");
        ok(&["--seed", "9", "gen", "--num-users", "1", "--out", &s(&bp)]);
        ok(&[
            "--seed",
            "9",
            "--jobs",
            "2",
            "run",
            "--blueprints",
            &s(&bp),
            "--agent",
            "rag,random",
            "--out",
            &s(&runs),
        ]);
        [
            bp.join("user_000.blueprint.json"),
            runs.join("rag-2-4-30").join("user_000.trace.json"),
            runs.join("random").join("user_000.trace.json"),
        ]
        .map(|p| fs::read(p).unwrap())
    };
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    assert_eq!(emit(a.path()), emit(b.path()));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let (code, err) = fails(&["gen", "--bogus"]);
    assert_eq!(code, 2);
    assert_eq!(err["error"]["kind"], "usage");
}

#[test]
fn empty_report_dirs_are_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let (code, err) = fails(&[
        "report",
        "--repeat-dirs",
        &s(tmp.path()),
        "--out",
        &s(&tmp.path().join("o")),
    ]);
    assert_eq!(code, 2);
    assert_eq!(err["error"]["exit_code"], 2);
}

#[test]
fn unknown_agent_is_a_usage_error() {
    let (_tmp, bp) = generated();
    let (code, _) = fails(&["run", "--blueprints", &s(&bp), "--agent", "gpt"]);
    assert_eq!(code, 2);
}

#[test]
fn corrupt_blueprint_is_a_validation_error() {
    let (tmp, bp) = generated();
    let path = bp.join("user_001.blueprint.json");
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace("\"amemgym_version\": \"1\"", "\"amemgym_version\": \"9\"");
    fs::write(&path, text).unwrap();
    let (code, err) = fails(&[
        "run",
        "--blueprints",
        &s(&bp),
        "--agent",
        "oracle",
        "--out",
        &s(&tmp.path().join("r")),
    ]);
    assert_eq!(code, 5, "{err}");
}

#[test]
fn unwritable_output_is_an_io_error() {
    let (tmp, bp) = generated();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let (code, err) = fails(&[
        "run",
        "--blueprints",
        &s(&bp),
        "--agent",
        "oracle",
        "--out",
        &s(&blocker.join("sub")),
    ]);
    assert_eq!(code, 3, "{err}");
}

#[test]
fn unreachable_provider_is_a_backend_error() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("cfg.toml");
    fs::write(
        &config,
        "[retry]\nmax_attempts = 1\nbase_delay_ms = 0\nmax_delay_ms = 0\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_memgym"))
        .args([
            "--config",
            &s(&config),
            "--backend",
            "live",
            "gen",
            "--out",
            &s(&tmp.path().join("bp")),
        ])
        .env("AMEMGYM_BASE_URL", "http://127.0.0.1:9")
        .env_remove("AMEMGYM_API_KEY")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("cfg.toml");
    fs::write(&config, "preset = \"base\"\nseed = 3\nnum_users = 1\n").unwrap();
    let from_file = tmp.path().join("a");
    ok(&["--config", &s(&config), "gen", "--out", &s(&from_file)]);
    let (_g, flags) = generated();
    assert_eq!(
        fs::read(from_file.join("user_000.blueprint.json")).unwrap(),
        fs::read(flags.join("user_000.blueprint.json")).unwrap()
    );
    fs::write(&config, "sede = 3\n").unwrap();
    let (code, _) = fails(&["--config", &s(&config), "gen", "--out", &s(&tmp.path().join("b"))]);
    assert_eq!(code, 2);
}
