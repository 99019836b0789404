use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tellscan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tellscan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = tellscan(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic dataset plus a one-epoch checkpoint.
fn trained(dir: &Path) -> PathBuf {
    ok(&[
        "synth",
        "--tiles",
        "24",
        "--positive",
        "10",
        "--resolution",
        "32",
        "--seed",
        "5",
        "--out",
        s(dir),
    ]);
    let cfg = dir.join("run.toml");
    fs::write(&cfg, "seed = 5\n[window]\nresolution = 32\n[train]\nmax_epochs = 1\n").unwrap();
    ok(&["--config", s(&cfg), "--out", s(dir), "train"]);
    dir.join("Synthetic.tell")
}

#[test]
fn synth_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&[
            "synth",
            "--tiles",
            "208",
            "--positive",
            "88",
            "--seed",
            "7",
            "--out",
            s(d.path()),
        ]);
    }
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.len() > 208 * 3);
    assert_eq!(ta, tb);

    let manifest = String::from_utf8(ta[Path::new("manifest.tsv")].clone()).unwrap();
    let header = manifest.lines().next().unwrap();
    assert!(header.contains("seed=7") && header.contains("config="), "{header}");
    let rows: Vec<&str> = manifest.lines().skip(2).collect();
    assert_eq!(rows.len(), 208);
    let count = |split: &str| rows.iter().filter(|r| r.split('\t').nth(1) == Some(split)).count();
    assert_eq!((count("TRAIN"), count("VAL"), count("TEST")), (156, 32, 20));
    assert_eq!(rows.iter().filter(|r| r.split('\t').nth(2) == Some("1")).count(), 88);
}

#[test]
fn predict_without_model_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let out = tellscan(&["predict", "--out", s(d.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error kind=usage message="), "{err}");
}

#[test]
fn config_errors_exit_two_and_data_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\nbogus = true\n").unwrap();
    assert_eq!(tellscan(&["--config", s(&cfg), "synth"]).status.code(), Some(2));
    assert_eq!(
        tellscan(&["synth", "--flavor", "nope", "--out", s(d.path())])
            .status
            .code(),
        Some(2)
    );

    let garbage = d.path().join("garbage.tell");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    ok(&[
        "synth",
        "--tiles",
        "10",
        "--positive",
        "4",
        "--resolution",
        "32",
        "--out",
        s(d.path()),
    ]);
    let out = tellscan(&["evaluate", "--checkpoint", s(&garbage), "--out", s(d.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error kind=format"));
}

#[test]
fn evaluate_and_report() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let ckpt = trained(dir);
    let cfg = s(&dir.join("run.toml")).to_string();

    ok(&["--config", &cfg, "--out", s(dir), "evaluate", "--checkpoint", s(&ckpt)]);
    let kv = fs::read_to_string(dir.join("eval/Synthetic_r01.txt")).unwrap();
    assert!(kv.starts_with("# tellscan seed=5 config="));
    for key in ["Accuracy=", "Recall=", "TP=", "TN=", "FP=", "FN="] {
        assert!(kv.lines().any(|l| l.starts_with(key)), "{key} missing");
    }
    let summary = fs::read_to_string(dir.join("eval/Synthetic_summary.txt")).unwrap();
    assert!(summary.contains("Model\tAccuracy\tRecall\tTP\tTN\tFP\tFN\n"));

    ok(&["--config", &cfg, "--out", s(dir), "report"]);
    let single = fs::read_to_string(dir.join("report.txt")).unwrap();
    assert!(single.contains("notice: single evaluation run for Synthetic"));
    assert!(!single.contains("St.d."));
    assert!(single.contains("seed=5\n") && single.contains("config="));
    assert!(single.contains("lineage Synthetic: Synthetic"));
    assert!(single.contains("Model\tIoU\tMCC\tbIoU\tEpoch\n"));

    ok(&[
        "--config",
        &cfg,
        "--out",
        s(dir),
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--repeats",
        "3",
    ]);
    ok(&["--config", &cfg, "--out", s(dir), "report"]);
    let first = fs::read(dir.join("report.txt")).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    assert!(text.contains("Model\tIoU\tSt.d.\tMCC\tSt.d.\tbIoU\tSt.d.\n"));
    assert!(text.contains("runs: Synthetic=3"));
    assert!(!text.contains("notice: single"));
    ok(&["--config", &cfg, "--out", s(dir), "report"]);
    assert_eq!(fs::read(dir.join("report.txt")).unwrap(), first);

    let empty = tempfile::tempdir().unwrap();
    assert_eq!(tellscan(&["report", "--out", s(empty.path())]).status.code(), Some(1));
}

fn pipeline(dir: &Path) {
    let ckpt = trained(dir);
    let cfg = dir.join("run.toml");
    let c = s(&cfg);
    ok(&[
        "--config",
        c,
        "--out",
        s(dir),
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--repeats",
        "2",
    ]);
    ok(&["--config", c, "--out", s(dir), "predict", "--checkpoint", s(&ckpt)]);
    ok(&[
        "--config",
        c,
        "--out",
        s(dir),
        "sites",
        "--threshold",
        "0.2",
        "--min-area",
        "0",
        "--timestamp",
        "0",
    ]);
    ok(&["--config", c, "--out", s(dir), "augment-preview", "--count", "3"]);
}

#[test]
fn full_pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(tb[k] == *v, "{} differs", k.display());
    }
    for name in [
        "registry.tsv",
        "registry_audit.log",
        "preview/traces.log",
        "Synthetic_history.txt",
    ] {
        let text = String::from_utf8(ta[Path::new(name)].clone()).unwrap();
        assert!(text.starts_with("# tellscan seed=5 config="), "{name}");
    }
    let heat = ta.keys().filter(|k| k.starts_with("heatmaps")).count();
    assert_eq!(heat, 4 * 2, "heat ppm, prob pgm and their world files per test tile");
}

#[test]
fn registry_updates_from_cli() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let heat = dir.join("heat");
    fs::create_dir_all(&heat).unwrap();
    // a 4×4 map with one hot 2×2 block, 31.25 m pixels
    let mut pgm = b"P5\n4 4\n255\n".to_vec();
    for r in 0..4 {
        for c in 0..4 {
            pgm.push(if r < 2 && c < 2 { 230 } else { 10 });
        }
    }
    fs::write(heat.join("T1_prob.pgm"), &pgm).unwrap();
    fs::write(heat.join("T1_prob.pgw"), "31.25\n0\n0\n-31.25\n4910000\n3932000\n").unwrap();
    ok(&[
        "sites",
        "--out",
        s(dir),
        "--heatmaps",
        s(&heat),
        "--min-area",
        "0",
        "--timestamp",
        "0",
    ]);
    ok(&["sites", "--out", s(dir), "--confirm", "T1.C01", "--timestamp", "60"]);
    let reg = fs::read_to_string(dir.join("registry.tsv")).unwrap();
    let row = reg.lines().find(|l| l.starts_with("T1.C01")).unwrap();
    assert!(row.ends_with("\tCONFIRMED\tAI"), "{row}");
    let audit = fs::read_to_string(dir.join("registry_audit.log")).unwrap();
    assert!(audit.contains("1970-01-01T00:01:00Z\tUPDATE\tT1.C01\tPREDICTED->CONFIRMED"));

    let again = tellscan(&["sites", "--out", s(dir), "--reject", "T1.C01", "--timestamp", "90"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).starts_with("error kind=state"));
    let unknown = tellscan(&["sites", "--out", s(dir), "--confirm", "NOPE", "--timestamp", "90"]);
    assert!(String::from_utf8_lossy(&unknown.stderr).starts_with("error kind=lookup"));
}
