//! Runs the `aspm` binary against the handbook fixtures.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/gitlab")
}

pub fn fixture(name: &str) -> String {
    fixtures().join(name).display().to_string()
}

pub fn aspm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aspm"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

/// Builds and assembles the handbook model in `dir`, returning its path.
pub fn assembled(dir: &Path) -> String {
    let config = fixture("pipeline.toml");
    let embeddings = fixture("embeddings.json");
    let built = path(dir, "built.json");
    let model = path(dir, "assembled.json");
    ok(aspm(&[
        "build",
        "--config",
        &config,
        "--input",
        &fixture("handbook"),
        "--fixtures",
        &fixture("completions"),
        "--embeddings",
        &embeddings,
        "-o",
        &built,
    ]));
    ok(aspm(&[
        "assemble",
        "--config",
        &config,
        "--model",
        &built,
        "--embeddings",
        &embeddings,
        "-o",
        &model,
    ]));
    model
}

/// Runs build, optimize, assemble, train and verify in `dir` and returns
/// the verify output together with the verdict file's bytes.
pub fn full_pipeline(dir: &Path) -> (Output, Vec<u8>) {
    let config = fixture("pipeline.toml");
    let embeddings = fixture("embeddings.json");
    let built = path(dir, "built.json");
    let optimized = path(dir, "optimized.json");
    let model = path(dir, "assembled.json");
    let trained = path(dir, "trained.json");
    let verdict = path(dir, "verdict.json");
    ok(aspm(&[
        "build",
        "--config",
        &config,
        "--input",
        &fixture("handbook"),
        "--fixtures",
        &fixture("completions"),
        "--embeddings",
        &embeddings,
        "-o",
        &built,
    ]));
    ok(aspm(&[
        "optimize",
        "--config",
        &config,
        "--model",
        &built,
        "--embeddings",
        &embeddings,
        "-o",
        &optimized,
    ]));
    ok(aspm(&[
        "assemble",
        "--config",
        &config,
        "--model",
        &optimized,
        "--embeddings",
        &embeddings,
        "-o",
        &model,
    ]));
    ok(aspm(&[
        "train",
        "--config",
        &config,
        "--model",
        &model,
        "--data",
        &fixture("train.jsonl"),
        "-o",
        &trained,
    ]));
    let out = aspm(&[
        "verify",
        "--config",
        &config,
        "--model",
        &trained,
        "--trajectory",
        &fixture("unauthorized.jsonl"),
        "--tools",
        &fixture("tools.json"),
        "-o",
        &verdict,
    ]);
    let bytes = std::fs::read(&verdict).expect("verdict written");
    (out, bytes)
}

pub fn verify(model: &str, trajectory: &str, tools: &str, extra: &[&str]) -> Output {
    let mut args = vec!["verify", "--model", model, "--trajectory", trajectory, "--tools", tools];
    args.extend_from_slice(extra);
    aspm(&args)
}
