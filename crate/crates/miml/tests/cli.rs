use std::path::Path;
use std::process::{Command, Output};

use miml::manifest::validate_manifest;

fn miml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_miml")).args(args).env("MIML_WEIGHTS_DIR", "").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = miml(args);
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "{args:?} failed: {}\n{stdout}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: [&str; 8] = ["--desk", "--iterations", "3", "--batch-size", "2", "--input-side", "64", "--seed"];

#[test]
fn end_to_end_at_toy_scale() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |name: &str| tmp.path().join(name);
    ok(&["synth-pairs", "--synthetic", "6", "--side", "64", "--count", "8", "--out", p(&d("pairs")), "--seed", "1"]);

    let train = |cmd: &str, data: &str, out: &str, extra: &[&str]| {
        let (data, out) = (d(data), d(out));
        let mut args = vec![cmd, "--data", p(&data), "--out", p(&out)];
        args.extend(TINY);
        args.push("1");
        args.extend(extra);
        ok(&args)
    };
    train("train-classifier", "pairs", "clf", &["--width", "4", "--classifier-side", "32"]);
    train("train-dass", "pairs", "dass", &["--small"]);
    let corr = ["--aggregation-channels", "4", "--sr-channels", "4", "--denoiser-width", "4", "--branch-width", "2"];
    train("train-corrdino", "pairs", "corr", &corr);

    let stdout = ok(&[
        "annotate",
        "--pairs", p(&d("pairs")),
        "--classifier", p(&d("clf/classifier.ckpt")),
        "--dass", p(&d("dass/dass.ckpt")),
        "--corrdino", p(&d("corr/corrdino.ckpt")),
        "--out", p(&d("annotated")),
        "--jobs", "2",
    ]);
    assert!(stdout.contains("annotated 8 pairs"), "{stdout}");
    let manifest = d("annotated/manifest.jsonl");
    ok(&["manifest-validate", p(&manifest)]);

    let filtered = d("filtered/manifest.jsonl");
    ok(&["qes-filter", "--manifest", p(&manifest), "--out", p(&filtered), "--keep-threshold", "0.2", "--retained-only"]);
    let (header, records) = validate_manifest(&filtered).unwrap();
    assert_eq!(header.keep_threshold, 0.2);
    assert!(records.iter().all(|r| r.retained));

    let report = ok(&["evaluate", "--model", p(&d("dass/dass.ckpt")), "--data", p(&d("pairs")), "--perturb", "jpeg=70"]);
    assert!(report.contains("iou"), "{report}");
    let routing = ok(&["evaluate", "--model", p(&d("clf/classifier.ckpt")), "--data", p(&d("pairs"))]);
    assert!(!routing.is_empty());

    ok(&["jitter", "--synthetic", "3", "--side", "64", "--count", "3", "--out", p(&d("jitter")), "--seed", "2"]);
    train("train-webiml", "jitter", "web", &["--width", "4", "--cnn-channels", "4,4,4,4"]);
    ok(&["evaluate", "--model", p(&d("web/webiml.ckpt")), "--data", p(&d("jitter")), "--perturb", "resize=0.75"]);
    let bad = miml(&["train-webiml", "--data", p(&d("jitter")), "--out", p(&d("web2")), "--cnn-channels", "4,4"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn exit_codes_follow_error_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(miml(&[]).status.code(), Some(1));
    assert_eq!(miml(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(miml(&["--help"]).status.code(), Some(0));
    assert_eq!(miml(&["evaluate", "--model", "m.ckpt", "--data", "d", "--perturb", "sharpen=3"]).status.code(), Some(1));
    let missing = tmp.path().join("absent");
    assert_eq!(miml(&["manifest-validate", p(&missing)]).status.code(), Some(2));
    assert_eq!(miml(&["evaluate", "--model", p(&missing), "--data", p(tmp.path())]).status.code(), Some(3));
    std::fs::write(tmp.path().join("bad.jsonl"), "{\"schema\": \"other\"}\n").unwrap();
    assert_eq!(miml(&["manifest-validate", p(&tmp.path().join("bad.jsonl"))]).status.code(), Some(2));
}
