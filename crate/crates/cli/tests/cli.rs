use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fgrect(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fgrect")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = fgrect(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

fn code(args: &[&str]) -> i32 {
    fgrect(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_dataset(dir: &Path, name: &str) -> PathBuf {
    let cfg = dir.join("small.cfg");
    fs::write(&cfg, "# tiny samples\ncount=2\nsize=96\nfield_size=104\n").unwrap();
    let out = dir.join(name);
    ok(&["gen-dataset", "--seed", "4", "--config", s(&cfg), "--out", s(&out)]);
    out
}

#[test]
fn gen_dataset_is_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let a = small_dataset(d.path(), "a");
    let b = small_dataset(d.path(), "b");
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa, fb);
    assert_eq!(fa.iter().filter(|(p, _)| p.ends_with("meta.json")).count(), 2);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 2);
    // rerun reuses everything
    let again = ok(&["gen-dataset", "--seed", "4", "--config", s(&d.path().join("small.cfg")), "--out", s(&a)]);
    assert_eq!(again["generated"], 0);
}

#[test]
fn argument_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.cfg");
    fs::write(&cfg, "count=2\nbogus=1\n").unwrap();
    assert_eq!(code(&["gen-dataset", "--config", s(&cfg), "--out", s(&d.path().join("x"))]), 2);
    let missing = d.path().join("missing.png");
    assert_eq!(
        code(&["enhance", "--image", s(&missing), "--mask", s(&missing), "--out", s(&d.path().join("o.png"))]),
        2
    );
    assert_eq!(code(&["bias-report", "--dataset", s(d.path()), "--ratios", "0.4,0.1", "--out", "b.csv"]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
}

#[test]
fn data_errors_exit_3() {
    let d = tempfile::tempdir().unwrap();
    let ds = small_dataset(d.path(), "ds");
    let weights = d.path().join("w.bin");
    fs::write(&weights, b"WBND garbage").unwrap();
    let img = ds.join("sample_000000/distorted.png");
    let field = d.path().join("f.dfld");
    assert_eq!(code(&["forward", "--image", s(&img), "--weights", s(&weights), "--out-field", s(&field)]), 3);
    // dataset without predictions
    let empty = d.path().join("preds");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&["eval", "--pred-dir", s(&empty), "--gt-dir", s(&ds), "--out", s(&d.path().join("r.json"))]), 3);
}

#[test]
fn enhance_and_extract_on_dataset_sample() {
    let d = tempfile::tempdir().unwrap();
    let ds = small_dataset(d.path(), "ds");
    let sample = ds.join("sample_000001");
    let out = d.path().join("enh.png");
    ok(&[
        "enhance",
        "--image",
        s(&sample.join("distorted.png")),
        "--mask",
        s(&sample.join("mask.png")),
        "--out",
        s(&out),
    ]);
    assert!(out.is_file());
    let lines = d.path().join("lines.jsonl");
    let overlay = d.path().join("overlay.png");
    let summary = ok(&[
        "extract-lines",
        "--image",
        s(&sample.join("distorted.png")),
        "--out",
        s(&lines),
        "--overlay",
        s(&overlay),
    ]);
    assert!(summary["kept"].as_u64().unwrap() <= summary["detected"].as_u64().unwrap());
    assert!(lines.is_file() && overlay.is_file());
}

#[test]
fn forward_eval_bias_and_demo() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("one.cfg");
    fs::write(&cfg, "count=1\n").unwrap();
    let ds = d.path().join("ds");
    ok(&["gen-dataset", "--seed", "1", "--config", s(&cfg), "--out", s(&ds)]);

    let preds = d.path().join("preds");
    fs::create_dir(&preds).unwrap();
    let field = preds.join("sample_000000.dfld");
    let attn = d.path().join("attn.png");
    let weights = d.path().join("w.bin");
    let summary = ok(&[
        "forward",
        "--image",
        s(&ds.join("sample_000000/distorted.png")),
        "--out-field",
        s(&field),
        "--out-mask",
        s(&preds.join("sample_000000.mask.png")),
        "--dump-attn",
        s(&attn),
        "--save-weights",
        s(&weights),
    ]);
    assert!(summary["max_attention_row_sum_error"].as_f64().unwrap() < 1e-6);
    assert!(attn.is_file());
    // reloading the saved weights reproduces the field bit for bit
    let field2 = d.path().join("again.dfld");
    ok(&[
        "forward",
        "--image",
        s(&ds.join("sample_000000/distorted.png")),
        "--weights",
        s(&weights),
        "--out",
        s(&field2),
    ]);
    assert_eq!(fs::read(&field).unwrap(), fs::read(&field2).unwrap());

    let report = d.path().join("report.json");
    let r = ok(&["eval", "--pred-dir", s(&preds), "--gt-dir", s(&ds), "--out", s(&report)]);
    assert_eq!(r["samples"], 1);
    let full: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    for key in ["ms_ssim", "ld", "ad", "l_map", "l_seg", "l_k"] {
        assert!(full["samples"][0][key].is_number(), "{key}");
    }

    let csv = d.path().join("bias.csv");
    let plot = d.path().join("bias.png");
    ok(&["bias-report", "--dataset", s(&ds), "--ratios", "0.1,0.4", "--out", s(&csv), "--plot", s(&plot)]);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 3);
    assert!(plot.is_file());

    let curve = d.path().join("curve.csv");
    let demo =
        ok(&["optimize-demo", "--sample", s(&ds.join("sample_000000")), "--iterations", "15", "--out", s(&curve)]);
    assert_eq!(demo["iterations_run"], 15);
    assert!(demo["final_map_loss"].as_f64().unwrap() < demo["initial_map_loss"].as_f64().unwrap());
    assert_eq!(fs::read_to_string(&curve).unwrap().lines().count(), 17);
}
