use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scatterlm"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn corpus(dir: &Path) {
    let words = ["red", "green", "blue", "cyan", "magenta", "yellow", "black", "white"];
    let mut text = String::new();
    for s in 0..200 {
        for t in 0..8 {
            text.push_str(words[(s * 3 + t * 5) % words.len()]);
            text.push(' ');
        }
        text.push('\n');
    }
    fs::write(dir.join("data.txt"), text).unwrap();
}

const SMALL: &[&str] = &["--dim", "6", "--hidden", "4", "--max-updates", "60", "--eval-interval", "20"];

fn train_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["train", "--corpus", "data.txt", "--batch-size", "16", "--seed", "42", "--out", out];
    v.extend_from_slice(SMALL);
    v.extend_from_slice(extra);
    v
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    for out in ["run1/", "run2/"] {
        let o = run(&train_args(out, &["--strategy", "sortseg"]), dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let r1 = dir.path().join("run1");
    let r2 = dir.path().join("run2");
    for f in [
        "checkpoint/manifest.txt",
        "checkpoint/embeddings.txt",
        "checkpoint/hidden_weights.txt",
        "checkpoint/vocab.txt",
        "embeddings.txt",
    ] {
        assert_eq!(fs::read(r1.join(f)).unwrap(), fs::read(r2.join(f)).unwrap(), "{f} differs");
    }
    let csv = fs::read_to_string(r1.join("convergence.csv")).unwrap();
    assert!(csv.starts_with("updates,examples,wall_s,error\n"));
    assert_eq!(csv.lines().count(), 4);
    // no temp files left behind
    assert!(fs::read_dir(&r1)
        .unwrap()
        .all(|e| !e.unwrap().file_name().to_string_lossy().starts_with('.')));

    let o = run(
        &["export-embeddings", "--checkpoint", "run1/checkpoint", "--out", "emb.txt"],
        dir.path(),
    );
    assert!(o.status.success());
    assert_eq!(
        fs::read(dir.path().join("emb.txt")).unwrap(),
        fs::read(r1.join("embeddings.txt")).unwrap()
    );
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    fs::write(
        dir.path().join("run.cfg"),
        "# overrides\ncorpus=data.txt\ndim=5\nhidden=3\nmax_updates=10\nseed=7\nbatch_size=4\n",
    )
    .unwrap();
    let o = run(
        &["train", "--config", "run.cfg", "--hidden", "2", "--out", "out"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(dir.path().join("out/checkpoint/manifest.txt")).unwrap();
    for want in ["dim=5", "hidden=2", "max_updates=10", "seed=7", "batch_size=4", "window=5"] {
        assert!(manifest.lines().any(|l| l == want), "missing {want} in\n{manifest}");
    }
}

#[test]
fn missing_seed_is_logged() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let mut args = vec!["train", "--corpus", "data.txt", "--out", "o"];
    args.extend_from_slice(SMALL);
    let o = run(&args, dir.path());
    assert!(o.status.success());
    let log = String::from_utf8_lossy(&o.stderr);
    let seed_line = log.lines().find(|l| l.contains("using seed")).expect("seed logged");
    let seed = seed_line.rsplit(' ').next().unwrap();
    let manifest = fs::read_to_string(dir.path().join("o/checkpoint/manifest.txt")).unwrap();
    assert!(manifest.contains(&format!("seed={seed}\n")));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let o = run(&["train", "--unknown-flag", "3", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let o = run(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));

    let o = run(&train_args("x", &["--strategy", "quantum"]), dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let o = run(&["train", "--out", "x", "--seed", "1"], dir.path());
    assert_eq!(o.status.code(), Some(1), "corpus is required");

    fs::write(dir.path().join("bad.cfg"), "colour=blue\n").unwrap();
    let o = run(&["train", "--config", "bad.cfg", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1), "unknown config keys are rejected");

    let o = run(&["train", "--corpus", "absent.txt", "--seed", "1", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["export-embeddings", "--checkpoint", "nowhere", "--out", "e.txt"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn help_lists_flags_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let help = |sub: &str| String::from_utf8(run(&[sub, "--help"], dir.path()).stdout).unwrap();
    let train_defaults = [
        ("--batch-size", "16"),
        ("--window", "5"),
        ("--dim", "64"),
        ("--hidden", "32"),
        ("--lr", "0.1"),
        ("--max-updates", "500000"),
        ("--threshold", "0.05"),
        ("--eval-interval", "100"),
        ("--strategy", "sortseg"),
    ];
    for sub in ["train", "sweep", "profile", "compare-backends"] {
        let text = help(sub);
        for (flag, default) in train_defaults {
            let line = text
                .lines()
                .find(|l| l.trim_start().starts_with(flag))
                .unwrap_or_else(|| panic!("{sub} lacks {flag}"));
            assert!(line.contains(&format!("[default: {default}]")), "{sub}: {line}");
        }
        for flag in ["--corpus", "--seed", "--threads", "--config"] {
            assert!(text.contains(flag), "{sub} lacks {flag}");
        }
    }
    assert!(help("sweep").contains("[default: 16,32,64,128,256,512]"));
    let bench = help("bench-scatter");
    for (flag, default) in [
        ("--rows", "100000"),
        ("--cols", "64"),
        ("--indexed", "1000000"),
        ("--dup-frac", "0.5"),
        ("--strategy", "all"),
        ("--reps", "5"),
    ] {
        assert!(
            bench
                .lines()
                .any(|l| l.trim_start().starts_with(flag) && l.contains(&format!("[default: {default}]"))),
            "bench-scatter {flag}"
        );
    }
    let export = help("export-embeddings");
    assert!(export.contains("--checkpoint") && export.contains("--out"));
}

#[test]
fn bench_scatter_one_row_per_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &[
            "bench-scatter", "--rows", "500", "--cols", "8", "--indexed", "4000", "--strategy", "all", "--reps",
            "3", "--seed", "5", "--threads", "2", "--out", "b.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("b.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    for (line, name) in lines[1..].iter().zip(["serial", "atomic", "sortseg"]) {
        assert!(line.starts_with(name), "{line}");
    }
    let o = run(&["bench-scatter", "--reps", "2"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_profile_and_compare_outputs() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let mut base = vec!["--corpus", "data.txt", "--seed", "3", "--threads", "2"];
    base.extend_from_slice(SMALL);

    let mut args = vec!["sweep", "--sizes", "4,8", "--out", "sweep.csv"];
    args.extend_from_slice(&base);
    let o = run(&args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert!(csv.starts_with("batch_size,mean_rate,rate_sigma,examples_to_converge,wall_s_to_converge,converged\n"));
    assert_eq!(csv.lines().count(), 3);

    let mut args = vec!["sweep", "--sizes", "8,4"];
    args.extend_from_slice(&base);
    assert_eq!(run(&args, dir.path()).status.code(), Some(1));

    let mut args = vec!["profile", "--out", "hot.json"];
    args.extend_from_slice(&base);
    let o = run(&args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json = fs::read_to_string(dir.path().join("hot.json")).unwrap();
    for key in ["\"op\"", "\"calls\"", "\"total_s\"", "\"fraction\"", "\"per_call_s\"", "\"unattributed_s\""] {
        assert!(json.contains(key), "{key}");
    }
    assert!(json.contains("index_add"));

    let mut args = vec!["compare-backends", "--out", "cmp.csv"];
    args.extend_from_slice(&base);
    let o = run(&args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("cmp.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().nth(1).unwrap().starts_with("serial,1,"));
}
