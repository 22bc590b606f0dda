// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fknn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fknn")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = fknn(args);
    assert!(
        out.status.success(),
        "fknn {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err(args: &[&str]) -> String {
    let out = fknn(args);
    assert!(!out.status.success(), "fknn {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the toy corpus and builds its cache and indexes.
fn toy_cache(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("toy");
    let cache = root.join("cache");
    ok(&["write-toy", "--out", s(&data)]);
    ok(&[
        "build-cache",
        "--src",
        s(&data.join("train.src")),
        "--tgt",
        s(&data.join("train.tgt")),
        "--align",
        s(&data.join("train.align")),
        "--src-repr",
        s(&data.join("train.src.repr")),
        "--tgt-repr",
        s(&data.join("train.tgt.repr")),
        "--out",
        s(&cache),
    ]);
    ok(&["build-index", "--cache", s(&cache)]);
    (data, cache)
}

fn manifest_hash(cache: &Path) -> String {
    let m: Value = serde_json::from_str(&std::fs::read_to_string(cache.join("manifest.json")).unwrap()).unwrap();
    m["config_hash"].as_str().unwrap().to_string()
}

#[test]
fn toy_pipeline_produces_walkthrough_datastore() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cache) = toy_cache(dir.path());
    let out = dir.path().join("ds");
    ok(&[
        "make-datastore",
        "--cache",
        s(&cache),
        "--input",
        s(&data.join("test.src")),
        "--input-repr",
        s(&data.join("test.src.repr")),
        "--c",
        "2",
        "--out",
        s(&out),
    ]);
    let text = std::fs::read_to_string(out.join("datastores.jsonl")).unwrap();
    let rec: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let locs: Vec<(u64, u64)> = rec["locs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| (l[0].as_u64().unwrap(), l[1].as_u64().unwrap()))
        .collect();
    assert_eq!(locs, [(0, 0), (1, 3), (0, 1), (1, 0), (2, 4), (4, 1)]);
    assert_eq!(rec["tokens"], serde_json::json!(["b", "b", "c", "c", "e", "e"]));
    assert_eq!(rec["size"], 6);
    assert!(out.join("0.tds").exists());
}

#[test]
fn inspect_reports_cache_sizes_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cache) = toy_cache(dir.path());
    let stats = ok(&["inspect", "--cache", s(&cache)]);
    for row in ["B\t4\tflat\t0", "C\t2\tflat\t0", "E\t3\tflat\t0"] {
        assert!(stats.lines().any(|l| l == row), "missing `{row}` in\n{stats}");
    }
    let dump = ok(&[
        "inspect",
        "--cache",
        s(&cache),
        "--input",
        s(&data.join("test.src")),
        "--line",
        "0",
        "--input-repr",
        s(&data.join("test.src.repr")),
        "--c",
        "2",
    ]);
    assert!(dump.contains("target datastore: 6 entries"), "{dump}");
    assert!(dump.contains("tgt 0:0 b\tfrom pos 0 B via src 0:1"), "{dump}");
    assert!(dump.contains("tgt 4:1 e\tfrom pos 2 E via src 4:1"), "{dump}");
}

#[test]
fn lambda_zero_matches_base_decoding() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cache) = toy_cache(dir.path());
    let (input, input_repr) = (data.join("test.src"), data.join("test.src.repr"));
    let common = [
        "decode",
        "--cache",
        s(&cache),
        "--input",
        s(&input),
        "--input-repr",
        s(&input_repr),
        "--lambda",
        "0",
    ];
    let base = ok(&[&common[..], &["--mode", "base"]].concat());
    let fast = ok(&[&common[..], &["--mode", "fast", "--c", "2", "--k", "4"]].concat());
    assert_eq!(base, fast);
    assert_eq!(base.lines().count(), 1);

    let metrics = dir.path().join("m.jsonl");
    let hyp = dir.path().join("hyp.txt");
    ok(&[&common[..], &["--mode", "vanilla", "--output", s(&hyp), "--metrics", s(&metrics)]].concat());
    assert_eq!(std::fs::read_to_string(&hyp).unwrap(), base);
    let rec: Value = serde_json::from_str(std::fs::read_to_string(&metrics).unwrap().lines().next().unwrap()).unwrap();
    // Vanilla scans every target position of the corpus at every step.
    assert_eq!(rec["max_scanned_per_step"], 19);
}

#[test]
fn missing_stages_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cache) = toy_cache(dir.path());
    let empty = dir.path().join("nothing");
    let e = err(&["build-index", "--cache", s(&empty)]);
    assert!(e.contains("run `fknn build-cache"), "{e}");

    std::fs::remove_dir_all(cache.join("index")).unwrap();
    let e = err(&[
        "decode",
        "--cache",
        s(&cache),
        "--input",
        s(&data.join("test.src")),
        "--input-repr",
        s(&data.join("test.src.repr")),
    ]);
    assert!(e.contains("run `fknn build-index"), "{e}");

    let e = err(&["decode", "--cache", s(&cache), "--input", s(&data.join("test.src"))]);
    assert!(e.contains("build-index") || e.contains("--input-repr"), "{e}");
}

#[test]
fn synthetic_pipeline_with_quantization_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy");
    let cache = dir.path().join("cache");
    ok(&["write-toy", "--out", s(&data)]);
    let build = |metric: &str| {
        ok(&[
            "build-cache",
            "--src",
            s(&data.join("train.src")),
            "--tgt",
            s(&data.join("train.tgt")),
            "--align",
            s(&data.join("train.align")),
            "--synthetic-dim",
            "8",
            "--metric",
            metric,
            "--out",
            s(&cache),
        ])
    };
    build("cosine");
    let h1 = manifest_hash(&cache);
    build("cosine");
    assert_eq!(manifest_hash(&cache), h1);
    build("l2");
    let h2 = manifest_hash(&cache);
    assert_ne!(h2, h1);

    ok(&["build-index", "--cache", s(&cache)]);
    let cfg = dir.path().join("decode.cfg");
    std::fs::write(&cfg, "# toy settings\nmode = fast\nc = 2\nk = 999\nlambda = 0.5\n").unwrap();
    let input = data.join("test.src");
    let decode = |extra: &[&str]| {
        let mut args = vec!["decode", "--cache", s(&cache), "--input", s(&input)];
        args.extend_from_slice(extra);
        ok(&args)
    };
    let from_file = decode(&["--config", s(&cfg), "--k", "4"]);
    let from_flags = decode(&["--c", "2", "--k", "4"]);
    assert_eq!(from_file, from_flags);
    assert_eq!(decode(&["--threads", "1", "--c", "2", "--k", "4"]), from_flags);

    ok(&["train-pq", "--cache", s(&cache), "--pq-m", "2", "--pq-codewords", "4", "--quantize-target"]);
    assert_ne!(manifest_hash(&cache), h2);
    let e = err(&["decode", "--cache", s(&cache), "--input", s(&data.join("test.src"))]);
    assert!(e.contains("stale"), "{e}");
    ok(&["build-index", "--cache", s(&cache)]);
    assert_eq!(decode(&["--c", "2", "--k", "4"]).lines().count(), 1);
    let stats = ok(&["inspect", "--cache", s(&cache)]);
    assert!(stats.contains("quantized yes"), "{stats}");
}

#[test]
fn bench_on_a_small_synthetic_task() {
    let dir = tempfile::tempdir().unwrap();
    let jsonl = dir.path().join("r.jsonl");
    let csv = dir.path().join("r.csv");
    let table = ok(&[
        "bench",
        "--task",
        "disambiguation",
        "--train-sentences",
        "300",
        "--test-sentences",
        "10",
        "--modes",
        "base,fast",
        "--c-values",
        "8,64",
        "--k-values",
        "8",
        "--flat-lexicon",
        "--jsonl",
        s(&jsonl),
        "--csv",
        s(&csv),
    ]);
    assert!(table.contains("fast"), "{table}");
    let rows: Vec<Value> = std::fs::read_to_string(&jsonl)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);
}
