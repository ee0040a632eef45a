use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pagescribe"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(cwd: &Path) {
    ok(
        &[
            "synth",
            "--pages",
            "8",
            "--validate-pages",
            "2",
            "--test-pages",
            "2",
            "--lines",
            "2",
            "--chars",
            "4",
            "--seed",
            "3",
            "--out",
            "pages",
        ],
        cwd,
    );
}

#[test]
fn synth_writes_manifests_and_symbols() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path());
    for f in [
        "manifest.jsonl",
        "manifest.train.jsonl",
        "manifest.validate.jsonl",
        "manifest.test.jsonl",
        "symbols.json",
        "images/page_00007.png",
    ] {
        assert!(d.path().join("pages").join(f).exists(), "{f}");
    }
    let text = std::fs::read_to_string(d.path().join("pages/manifest.jsonl")).unwrap();
    assert!(text.starts_with("{\"format\":\"pagescribe-manifest\",\"version\":1}"));
    assert_eq!(text.lines().count(), 9);
}

#[test]
fn line_then_page_curriculum_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    synth(p);
    ok(
        &[
            "prep",
            "--manifest",
            "pages/manifest.jsonl",
            "--out",
            "prep",
            "--segment-lines",
        ],
        p,
    );
    ok(
        &[
            "train",
            "--manifest",
            "prep/lines/manifest.jsonl",
            "--symbols",
            "pages/symbols.json",
            "--out",
            "line",
            "--epochs",
            "1",
            "--batch",
            "4",
        ],
        p,
    );
    for f in ["last", "config.toml", "symbols.json", "metrics.jsonl"] {
        assert!(p.join("line").join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(p.join("line/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 1);

    let cer = ok(
        &[
            "eval",
            "--ckpt",
            "line/last",
            "--manifest",
            "prep/lines/manifest.jsonl",
            "--split",
            "test",
            "--dump",
            "dump.jsonl",
        ],
        p,
    );
    assert!(cer.contains("CER"), "{cer}");
    assert_eq!(
        std::fs::read_to_string(p.join("dump.jsonl")).unwrap().lines().count(),
        4
    );

    ok(
        &[
            "train",
            "--manifest",
            "pages/manifest.jsonl",
            "--out",
            "page",
            "--L",
            "4",
            "--epochs",
            "1",
            "--curriculum",
            "line/last",
        ],
        p,
    );
    ok(
        &[
            "decode",
            "--ckpt",
            "page/last",
            "--image",
            "pages/images/page_00000.png",
        ],
        p,
    );
}

#[test]
fn curriculum_with_other_alphabet_is_refused() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    synth(p);
    ok(
        &[
            "prep",
            "--manifest",
            "pages/manifest.jsonl",
            "--out",
            "prep",
            "--segment-lines",
        ],
        p,
    );
    // line transcripts have no space, so this table cannot cover the pages
    ok(
        &[
            "train",
            "--manifest",
            "prep/lines/manifest.jsonl",
            "--out",
            "line",
            "--epochs",
            "0",
        ],
        p,
    );
    let out = run(
        &[
            "train",
            "--manifest",
            "pages/manifest.jsonl",
            "--out",
            "page",
            "--L",
            "4",
            "--epochs",
            "1",
            "--curriculum",
            "line/last",
        ],
        p,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("outside the symbol table"));
}

#[test]
fn eval_refuses_characters_outside_the_checkpoint_table() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    synth(p);
    ok(
        &[
            "train",
            "--manifest",
            "pages/manifest.jsonl",
            "--out",
            "page",
            "--L",
            "4",
            "--epochs",
            "0",
        ],
        p,
    );
    let text = std::fs::read_to_string(p.join("pages/manifest.test.jsonl")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut v: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    v["transcript"] = serde_json::Value::String("xyz".into());
    v.as_object_mut().unwrap().remove("boxes");
    v.as_object_mut().unwrap().remove("line_transcripts");
    lines[1] = v.to_string();
    std::fs::write(p.join("pages/bad.jsonl"), lines.join("\n") + "\n").unwrap();
    let out = run(&["eval", "--ckpt", "page/last", "--manifest", "pages/bad.jsonl"], p);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lacks"));
}

#[test]
fn derived_corpora_and_sweep() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    synth(p);
    ok(
        &["clean-pages", "--manifest", "pages/manifest.jsonl", "--out", "clean"],
        p,
    );
    ok(
        &["flatten-1d", "--manifest", "pages/manifest.jsonl", "--out", "flat"],
        p,
    );
    assert!(p.join("clean/manifest.test.jsonl").exists());
    let flat = std::fs::read_to_string(p.join("flat/manifest.jsonl")).unwrap();
    assert!(flat.contains("\"kind\":\"line\""));

    let table = ok(
        &[
            "sweep",
            "--manifest",
            "pages/manifest.jsonl",
            "--out",
            "sweep",
            "--L",
            "1",
            "--epochs",
            "1",
        ],
        p,
    );
    let mut rows = table.lines();
    assert_eq!(rows.next(), Some("L\tHeight\terr[%]"));
    assert!(rows.next().unwrap().starts_with("1\t64\t"));
    assert!(p.join("sweep/sweep.json").exists());
}

#[test]
fn bad_arguments_fail_cleanly() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert!(!run(&["train", "--manifest", "missing.jsonl", "--out", "x"], p)
        .status
        .success());
    assert!(!run(&["synth", "--pages", "3", "--out", "x"], p).status.success());
    assert!(!run(&["gradcheck", "--cases", "0"], p).status.success());
    assert!(!run(&["decode", "--ckpt", "nope", "--image", "nope.png"], p)
        .status
        .success());
}

#[test]
fn gradcheck_reports_every_op() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--cases", "1"], d.path());
    assert!(out.lines().filter(|l| l.ends_with("ok")).count() >= 25);
    assert!(out.contains("ctc_loss") && out.contains("conv2d"));
}
