use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sketchkd::config::{tiny_profile, Hyperparameters};

fn sketchkd<S: AsRef<str>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sketchkd"))
        .args(args.iter().map(|a| a.as_ref()))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok<S: AsRef<str>>(args: &[S]) -> String {
    let out = sketchkd(args);
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        args.iter().map(|a| a.as_ref()).collect::<Vec<_>>(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails<S: AsRef<str>>(args: &[S]) -> String {
    let out = sketchkd(args);
    assert!(!out.status.success(), "{:?} should fail", args.iter().map(|a| a.as_ref()).collect::<Vec<_>>());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim().lines().count(), 1, "diagnostic is one line: {err}");
    err
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "png") {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn manifest(dir: &Path) -> BTreeMap<String, String> {
    fs::read_to_string(dir.join("manifest.txt"))
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn gen_data_counts_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        ok(&["gen-data", "--out", d.to_str().unwrap(), "--instances", "16", "--classes", "4", "--sketches-per", "2", "--seed", "7"]);
    }
    let ta = tree(&a);
    assert_eq!(ta.keys().filter(|k| k.contains("photos")).count(), 16);
    assert_eq!(ta.keys().filter(|k| k.contains("sketches")).count(), 32);
    assert_eq!(ta, tree(&b));
    assert_eq!(manifest(&a)["command"], "gen-data");
}

#[test]
fn gen_data_rejects_single_sketch() {
    let tmp = tempfile::tempdir().unwrap();
    let err = fails(&["gen-data", "--out", tmp.path().to_str().unwrap(), "--sketches-per", "1"]);
    assert!(err.contains("sketch"), "{err}");
}

#[test]
fn full_kd_needs_a_teacher() {
    let tmp = tempfile::tempdir().unwrap();
    let err = fails(&["train-student", "--mode", "full_kd", "--out", tmp.path().to_str().unwrap()]);
    assert!(err.contains("--teacher"), "{err}");
}

#[test]
fn missing_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    fails(&["train-student", "--mode", "strong_baseline", "--data", "/nonexistent/data", "--out", out]);
    fails(&["evaluate", "--student", "/nonexistent/student.ckpt", "--out", out]);
    fails(&["ablate", "--suite", "nope", "--out", out]);
    fails(&["train-student", "--mode", "type_v", "--out", out]);
}

#[test]
fn random_student_scores_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&["evaluate", "--seed", "3", "--out", tmp.path().to_str().unwrap()]);
    let csv = fs::read_to_string(tmp.path().join("eval.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let (queries, gallery): (f64, f64) = (row[0].parse().unwrap(), row[1].parse().unwrap());
    let acc1: f64 = row[2].parse().unwrap();
    assert_eq!((queries, gallery), (32.0, 16.0));
    let p = 1.0 / gallery;
    let sigma = (p * (1.0 - p) / queries).sqrt();
    assert!((acc1 - p).abs() <= 3.0 * sigma, "acc@1 {acc1} vs chance {p} (sigma {sigma}): {text}");
}

#[test]
fn teacher_student_evaluate_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = s(&root.join("data"));
    let cfg = root.join("tiny.cfg");
    Hyperparameters { epochs: 2, ..tiny_profile() }.save(&cfg).unwrap();
    let cfg = s(&cfg);
    ok(&["gen-data", "--out", &data, "--instances", "12", "--classes", "2", "--image-size", "8", "--labelled", "8"]);
    let common = ["--config", &cfg, "--data", &data, "--holdout-frac", "0.25"];

    let teacher = root.join("teacher");
    ok(&[&["pretrain-teacher", "--out", &s(&teacher)][..], &common].concat());
    for f in ["teacher.ckpt", "bank.bin", "config.txt", "manifest.txt"] {
        assert!(teacher.join(f).exists(), "{f}");
    }
    let m = manifest(&teacher);
    let stored = Hyperparameters::from_config_str(&fs::read_to_string(teacher.join("config.txt")).unwrap()).unwrap();
    assert_eq!(m["config_hash"], stored.config_hash());

    let student = root.join("student");
    let text = ok(&[
        &["train-student", "--mode", "full_kd", "--teacher", &s(&teacher), "--out", &s(&student)][..],
        &common,
    ]
    .concat());
    assert!(text.contains("acc@1"), "{text}");
    for f in ["student.ckpt", "metrics.csv", "manifest.txt"] {
        assert!(student.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(student.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,loss_total,loss_cm,loss_im_p,loss_im_s,loss_tri_u,loss_kl_pl,loss_kl_sl,loss_kl_pu,acc1_raw"));

    let eval = root.join("eval");
    let ckpt = s(&student.join("student.ckpt"));
    ok(&["evaluate", "--student", &ckpt, "--out", &s(&eval), "--data", &data, "--holdout-frac", "0.25"]);
    let csv = fs::read_to_string(eval.join("eval.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("4,2,"), "{csv}");

    // a two-epoch run is too short for a stability window
    let metrics = s(&student.join("metrics.csv"));
    fails(&["study", "--kind", "stability", "--metrics", &metrics, "--out", &s(&root.join("stab"))]);
}

#[test]
fn token_design_ablation_writes_three_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = s(&root.join("data"));
    let cfg = root.join("tiny.cfg");
    tiny_profile().save(&cfg).unwrap();
    ok(&["gen-data", "--out", &data, "--instances", "12", "--classes", "2", "--image-size", "8", "--labelled", "8"]);
    let out = root.join("abl");
    ok(&["ablate", "--suite", "token_design", "--config", &s(&cfg), "--data", &data, "--seeds", "0,1", "--out", &s(&out)]);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,mode,seeds,acc1_mean,acc1_std");
    let variants: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["A", "B", "ours"]);
    assert!(lines[1..].iter().all(|l| l.split(',').nth(2) == Some("2")));
}
