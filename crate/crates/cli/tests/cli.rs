use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use selene_core::trainer::{poly_lr, read_csv};

fn selene(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selene"))
        .args(args)
        .env_remove("SELENE_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = selene(args);
    assert!(
        out.status.success(),
        "selene {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir` with its bytes, sorted by relative path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const TINY: &[&str] = &[
    "--set", "crop=32",
    "--set", "num_layers=1",
    "--set", "base_channels=2",
    "--set", "num_classes=3",
    "--set", "num_permutations=4",
    "--set", "batch_labeled=2",
    "--set", "batch_unlabeled=2",
];

fn tiny_data(root: &Path) -> PathBuf {
    let d = root.join("data");
    ok(&["gen-data", "--out", p(&d), "--count", "6", "--classes", "3", "--size", "32", "--val-count", "2", "--seed", "5"]);
    d
}

fn train(root: &Path, data: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let dir = root.join(out);
    let val = data.join("val");
    let mut args = vec!["train", "--out", p(&dir), "--data", p(data), "--val", p(&val), "--fraction", "1/3"];
    args.extend(TINY);
    args.extend(extra);
    ok(&args);
    dir
}

#[test]
fn gen_data_writes_pairs_and_splits_reproducibly() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-data", "--out", p(d), "--count", "64", "--classes", "4", "--size", "96", "--seed", "7", "--fraction", "1/8"]);
    }
    assert_eq!(fs::read_dir(a.join("images")).unwrap().count(), 64);
    assert_eq!(fs::read_dir(a.join("masks")).unwrap().count(), 64);
    assert_eq!(snapshot(&a), snapshot(&b));

    let split = fs::read_to_string(a.join("split_0.125_7.txt")).unwrap();
    let (lab, unl) = split.split_once("unlabeled:").unwrap();
    assert_eq!(lab.lines().filter(|l| l.starts_with("img_")).count(), 8);
    assert_eq!(unl.lines().filter(|l| l.starts_with("img_")).count(), 56);
}

#[test]
fn seed_falls_back_to_the_environment() {
    let root = tempfile::tempdir().unwrap();
    let run = |dir: &Path, env: Option<&str>, seed: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_selene"));
        c.args(["gen-data", "--out", p(dir), "--count", "2", "--size", "32"]);
        c.env_remove("SELENE_SEED");
        if let Some(e) = env {
            c.env("SELENE_SEED", e);
        }
        if let Some(s) = seed {
            c.args(["--seed", s]);
        }
        assert!(c.output().unwrap().status.success());
        snapshot(dir)
    };
    let r = root.path();
    let env9 = run(&r.join("env9"), Some("9"), None);
    assert_eq!(env9, run(&r.join("flag9"), None, Some("9")));
    assert_ne!(env9, run(&r.join("default"), None, None));
    assert_eq!(run(&r.join("flag_wins"), Some("3"), Some("9")), env9);
}

#[test]
fn invalid_flags_exit_nonzero_without_output() {
    let root = tempfile::tempdir().unwrap();
    let data = tiny_data(root.path());
    let out = root.path().join("never");
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--out", p(&out), "--bogus"],
        vec!["train", "--out", p(&out), "--data", p(&data), "--method", "nope"],
        vec!["train", "--out", p(&out), "--data", p(&data), "--set", "epochs=-1"],
        vec!["train", "--out", p(&out), "--data", p(&data), "--set", "crop=33"],
        vec!["train", "--out", p(&out), "--data", "/no/such/dir"],
        vec!["train", "--out", p(&out), "--data", p(&data), "--fraction", "0"],
        vec!["gen-data", "--out", p(&out), "--classes", "1"],
        vec!["gen-data", "--out", p(&out), "--fraction", "3/2"],
        vec!["flops", "--out", p(&out), "--input", "30x32"],
        vec!["eval", "--out", p(&out), "--checkpoint", "/no/such.seln", "--data", p(&data)],
        vec!["gradcheck", "--out", p(&out), "--inject-fault", "no_such_op"],
        vec!["gen-data", "--out", p(&out), "--threads", "0"],
    ];
    for args in cases {
        let r = selene(&args);
        assert!(!r.status.success(), "{args:?} should fail");
        assert!(!String::from_utf8_lossy(&r.stderr).trim().is_empty(), "{args:?} printed no diagnostic");
        assert!(!out.exists(), "{args:?} left {}", out.display());
    }
    let usage = selene(&["train", "--bogus"]);
    assert_eq!(usage.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&usage.stderr).contains("Usage"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let root = tempfile::tempdir().unwrap();
    let data = tiny_data(root.path());
    let cfg = root.path().join("run.cfg");
    fs::write(&cfg, "# tiny run\nmethod = mean_teacher\nepochs = 5 # overridden\nlambda2 = 3\n").unwrap();
    let dir = root.path().join("run");
    let mut args = vec!["train", "--config", p(&cfg), "--out", p(&dir), "--data", p(&data), "--epochs", "1"];
    args.extend(TINY);
    ok(&args);
    let resolved = fs::read_to_string(dir.join("config.txt")).unwrap();
    for line in ["method = mean_teacher", "epochs = 1", "lambda2 = 3", "crop = 32"] {
        assert!(resolved.lines().any(|l| l == line), "missing {line:?} in\n{resolved}");
    }
}

#[test]
fn single_thread_runs_are_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let data = tiny_data(root.path());
    let extra = ["--method", "full", "--epochs", "2", "--threads", "1", "--seed", "4", "--set", "lambda2=10"];
    let a = train(root.path(), &data, "a", &extra);
    let b = train(root.path(), &data, "b", &extra);
    let det = train(root.path(), &data, "c", &["--method", "full", "--epochs", "2", "--threads", "3", "--deterministic", "--seed", "4", "--set", "lambda2=10"]);
    let sa = snapshot(&a);
    assert!(sa.iter().any(|(n, _)| n == Path::new("metrics.csv")));
    assert!(sa.iter().any(|(n, _)| n == Path::new("checkpoint_last.seln")));
    assert_eq!(sa, snapshot(&b));
    assert_eq!(sa, snapshot(&det));
}

#[test]
fn resume_continues_the_schedule() {
    let root = tempfile::tempdir().unwrap();
    let data = tiny_data(root.path());
    let whole = train(root.path(), &data, "whole", &["--method", "mean_teacher", "--epochs", "2"]);
    let ck = whole.join("checkpoint_epoch001.seln");
    let part = train(root.path(), &data, "part", &["--method", "mean_teacher", "--epochs", "2", "--resume", p(&ck)]);

    let a = read_csv(&whole.join("metrics.csv")).unwrap();
    let b = read_csv(&part.join("metrics.csv")).unwrap();
    assert_eq!(a.len(), 8);
    assert_eq!(b[..], a[4..]);
    for r in &b {
        assert_eq!(r.lr, poly_lr(r.iter, 8, 0.02, 0.9));
    }
    assert_eq!(
        fs::read(whole.join("checkpoint_last.seln")).unwrap(),
        fs::read(part.join("checkpoint_last.seln")).unwrap()
    );

    let again = selene(&["train", "--out", p(&part), "--data", p(&data)]);
    assert!(!again.status.success(), "an existing run is not overwritten");
}

#[test]
fn eval_is_repeatable_and_matches_training_log() {
    let root = tempfile::tempdir().unwrap();
    let data = tiny_data(root.path());
    let run = train(root.path(), &data, "run", &["--epochs", "1"]);
    let ck = run.join("checkpoint_last.seln");
    let val = data.join("val");
    let out = root.path().join("eval");
    let first = ok(&["eval", "--checkpoint", p(&ck), "--data", p(&val), "--out", p(&out)]);
    let second = ok(&["eval", "--checkpoint", p(&ck), "--data", p(&val), "--out", p(&out)]);
    assert_eq!(first, second);

    let rows = fs::read_to_string(out.join("eval.csv")).unwrap();
    let rows: Vec<&str> = rows.lines().collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1], rows[2]);
    let miou: f64 = rows[1].rsplit(',').next().unwrap().parse().unwrap();
    let logged = read_csv(&run.join("metrics.csv")).unwrap();
    assert_eq!(logged.last().unwrap().miou_val, Some(miou));
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("gc");
    let text = ok(&["gradcheck", "--out", p(&out)]);
    assert!(text.contains("12 of 12 checks passed"), "{text}");
    let csv = fs::read_to_string(out.join("gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    for row in csv.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        let err: f64 = cols[2].parse().unwrap();
        assert!(err < 1e-4 && cols[3] == "true", "{row}");
    }

    let bad = selene(&["gradcheck", "--inject-fault", "conv2d"]);
    assert!(!bad.status.success());
    let text = String::from_utf8(bad.stdout).unwrap();
    let line = text.lines().find(|l| l.starts_with("conv2d ")).unwrap();
    assert!(line.ends_with("FAIL"), "{line}");
    assert!(text.contains("11 of 12 checks passed"), "{text}");
}

#[test]
fn flops_are_monotone_and_stable() {
    let root = tempfile::tempdir().unwrap();
    let data = tiny_data(root.path());
    let run = train(root.path(), &data, "run", &["--epochs", "1"]);
    let ck = run.join("checkpoint_last.seln");
    let out = root.path().join("flops");
    let args = ["flops", "--checkpoint", p(&ck), "--input", "64x64", "--tau", "0", "--tau", "0.3", "--tau", "0.5", "--out", p(&out)];
    let first = ok(&args);
    assert_eq!(first, ok(&args));
    let csv = fs::read_to_string(out.join("flops.csv")).unwrap();
    let macs: Vec<u64> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(macs.len(), 3);
    assert!(macs.windows(2).all(|w| w[1] <= w[0]), "{macs:?}");

    let fresh = ok(&["flops", "--layers", "2", "--channels", "4", "--input", "32x32"]);
    assert!(fresh.starts_with("tau 0: "), "{fresh}");
}
