use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use disas_core::corpus::{load_meta, parse_mntp, SampleMeta};
use disas_core::{PipelineConfig, Sample};
use serde_json::Value;

fn disas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disas"))
        .args(args)
        .env_remove("DISAS_CLASSIFIER_URL")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = disas(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates sample `seed` into `dir` and returns its (bin, json) paths.
fn sample(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    ok(&[
        "gen",
        "--seed",
        &seed.to_string(),
        "--blocks",
        "20",
        "--out-dir",
        s(dir),
    ]);
    (
        dir.join(format!("sample-{seed:04}.bin")),
        dir.join(format!("sample-{seed:04}.json")),
    )
}

fn hex_lines(text: &str) -> BTreeSet<u64> {
    text.lines()
        .map(|l| u64::from_str_radix(l.trim_start_matches("0x"), 16).unwrap())
        .collect()
}

#[test]
fn gen_is_reproducible_and_valid() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&[
        "gen",
        "--seed",
        "9",
        "--count",
        "20",
        "--out-dir",
        s(a.path()),
    ]);
    ok(&[
        "gen",
        "--seed",
        "9",
        "--count",
        "20",
        "--out-dir",
        s(b.path()),
    ]);
    let names: Vec<_> = std::fs::read_dir(a.path()).unwrap().collect();
    assert_eq!(names.len(), 40);
    for seed in 9..29 {
        let bin = format!("sample-{seed:04}.bin");
        let json = format!("sample-{seed:04}.json");
        assert_eq!(
            std::fs::read(a.path().join(&bin)).unwrap(),
            std::fs::read(b.path().join(&bin)).unwrap()
        );
        let loaded = Sample::load(&a.path().join(&bin), &a.path().join(&json)).unwrap();
        loaded.truth.validate(&loaded.region).unwrap();
    }
}

#[test]
fn oracle_disasm_reproduces_truth() {
    let dir = tempfile::tempdir().unwrap();
    let (bin, json) = sample(dir.path(), 1);
    let out = dir.path().join("out.json");
    let addrs = dir.path().join("addrs.txt");
    let graph = dir.path().join("g.json");
    ok(&[
        "disasm",
        "--input",
        s(&bin),
        "--meta",
        s(&json),
        "--classifier",
        "oracle",
        "--out",
        s(&out),
        "--addresses",
        s(&addrs),
        "--dump-graph",
        s(&graph),
    ]);
    let meta: SampleMeta = load_meta(&json).unwrap();
    let listing: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let got: BTreeSet<u64> = listing["instructions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["address"].as_u64().unwrap())
        .collect();
    let want: BTreeSet<u64> = meta.instruction_starts.iter().copied().collect();
    assert_eq!(got, want);
    assert_eq!(hex_lines(&std::fs::read_to_string(&addrs).unwrap()), want);

    let g: Value = serde_json::from_str(&std::fs::read_to_string(&graph).unwrap()).unwrap();
    assert!(!g["blocks"].as_array().unwrap().is_empty());
    assert!(g["edges"].is_array());

    let table = ok(&[
        "score",
        "--input",
        s(&bin),
        "--meta",
        s(&json),
        "--predictions",
        s(&addrs),
    ]);
    assert!(
        table.contains("1.000   1.000  1.000 |     1.000   1.000  1.000"),
        "{table}"
    );
}

#[test]
fn score_csv_and_empty_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let (bin, json) = sample(dir.path(), 2);
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    let csv = ok(&[
        "score",
        "--input",
        s(&bin),
        "--meta",
        s(&json),
        "--predictions",
        s(&empty),
        "--format",
        "csv",
    ]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "scope,precision,recall,f1,tp,fp,fn");
    assert!(lines[1].starts_with("all,0.000000,0.000000,"));
    assert!(lines[2].starts_with("junk,0.000000,0.000000,"));
}

#[test]
fn print_config_echoes_defaults() {
    let text = ok(&["disasm", "--print-config"]);
    assert_eq!(
        PipelineConfig::from_toml(&text).unwrap(),
        PipelineConfig::default()
    );
    let text = ok(&["disasm", "--print-config", "--batch-size", "1"]);
    assert_eq!(PipelineConfig::from_toml(&text).unwrap().batch_size, 1);
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "N = 8\nhi = 0.9\n").unwrap();
    let text = ok(&[
        "disasm",
        "--print-config",
        "--config",
        s(&cfg),
        "--hi",
        "0.99",
    ]);
    let c = PipelineConfig::from_toml(&text).unwrap();
    assert_eq!((c.window, c.hi), (8, 0.99));
}

#[test]
fn exit_codes() {
    assert_eq!(disas(&["disasm", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(
        disas(&["disasm", "--classifier", "noisy:2"]).status.code(),
        Some(1)
    );
    assert_eq!(disas(&[]).status.code(), Some(1));
    assert_eq!(disas(&["--help"]).status.code(), Some(0));
    assert_eq!(
        disas(&["disasm", "--input", "/nonexistent/x.bin"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        disas(&["disasm", "--print-config", "--lo", "0.7"])
            .status
            .code(),
        Some(2)
    );

    let dir = tempfile::tempdir().unwrap();
    let (bin, _) = sample(dir.path(), 3);
    let out = disas(&["disasm", "--input", s(&bin), "--classifier", "oracle"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--meta"));
    // nothing listens on port 9 of localhost
    let out = disas(&[
        "disasm",
        "--input",
        s(&bin),
        "--classifier",
        "remote",
        "--endpoint",
        "http://127.0.0.1:9",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        disas(&["disasm", "--input", s(&bin), "--classifier", "remote"])
            .status
            .code()
            == Some(2)
    );
}

#[test]
fn raw_input_without_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("x.bin");
    // mov eax, 1; ret
    std::fs::write(&bin, [0xb8, 1, 0, 0, 0, 0xc3]).unwrap();
    let text = ok(&["disasm", "--input", s(&bin), "--base", "0x1000"]);
    assert_eq!(text, "0x1000:\nmov eax, 0x1\nret\n; 0x1006\n");
}

#[test]
fn emit_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let (bin, json) = sample(dir.path(), 4);
    let mntp = ok(&[
        "emit-dataset",
        "--input",
        s(&bin),
        "--meta",
        s(&json),
        "--format",
        "mntp",
    ]);
    assert!(!parse_mntp(&mntp).unwrap().is_empty());

    let out = dir.path().join("sup.jsonl");
    ok(&[
        "emit-dataset",
        "--input",
        s(&bin),
        "--meta",
        s(&json),
        "--format",
        "supervised",
        "--out",
        s(&out),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().count() > 0);
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(
            v["words"].as_array().unwrap().len(),
            v["labels"].as_array().unwrap().len()
        );
    }
}

/// Answers every span from the ground truth over the classify protocol.
fn oracle_stub(truth: BTreeSet<u64>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h.trim().is_empty() {
                    break;
                }
                if let Some(v) = h.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let req: Value = serde_json::from_slice(&body).unwrap();
            let results: Vec<Value> = req["requests"]
                .as_array()
                .unwrap()
                .iter()
                .map(|r| {
                    let p: Vec<f64> = r["spans"]
                        .as_array()
                        .unwrap()
                        .iter()
                        .map(|s| {
                            f64::from(u8::from(truth.contains(&s["address"].as_u64().unwrap())))
                        })
                        .collect();
                    serde_json::json!({ "probabilities": p })
                })
                .collect();
            let reply = serde_json::json!({ "results": results }).to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    url
}

#[test]
fn remote_classifier_matches_local_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let (bin, json) = sample(dir.path(), 5);
    let meta = load_meta(&json).unwrap();
    let url = oracle_stub(meta.instruction_starts.iter().copied().collect());
    let local = dir.path().join("local.json");
    let remote = dir.path().join("remote.json");
    ok(&[
        "disasm",
        "--input",
        s(&bin),
        "--meta",
        s(&json),
        "--classifier",
        "oracle",
        "--out",
        s(&local),
    ]);
    ok(&[
        "disasm",
        "--input",
        s(&bin),
        "--meta",
        s(&json),
        "--classifier",
        "remote",
        "--endpoint",
        &url,
        "--out",
        s(&remote),
    ]);
    assert_eq!(
        std::fs::read_to_string(local).unwrap(),
        std::fs::read_to_string(remote).unwrap()
    );
}
