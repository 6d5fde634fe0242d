//! End-to-end runs of the `bsed` binary.

use std::path::Path;
use std::process::{Command, Output};

fn bsed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsed"))
        .args(args)
        .env_remove("BSED_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bsed(args);
    assert!(
        out.status.success(),
        "bsed {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    bsed(args).status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path, n: usize, n_eval: usize, seed: u64) {
    ok(&[
        "generate",
        "--out",
        p(dir),
        "--n",
        &n.to_string(),
        "--n-eval",
        &n_eval.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn split_counts(dir: &Path) -> [usize; 3] {
    let text = std::fs::read_to_string(dir.join("manifest.tsv")).unwrap();
    let mut n = [0; 3];
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.starts_with("clip\t")) {
        match line.split('\t').nth(1).unwrap() {
            "train" => n[0] += 1,
            "validation" => n[1] += 1,
            "eval" => n[2] += 1,
            other => panic!("split {other}"),
        }
    }
    n
}

#[test]
fn generate_is_deterministic_and_independent_of_jobs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&a, 30, 10, 7);
    ok(&["--jobs", "1", "generate", "--out", p(&b), "--n", "30", "--n-eval", "10", "--seed", "7"]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let c = tmp.path().join("c");
    generate(&c, 30, 10, 8);
    assert_ne!(dir_bytes(&a), dir_bytes(&c));
}

#[test]
fn generate_splits_80_20() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    ok(&["generate", "--out", p(&d), "--n", "1000", "--n-eval", "0"]);
    let [tr, va, ev] = split_counts(&d);
    assert!(tr.abs_diff(800) <= 1 && va.abs_diff(200) <= 1 && ev == 0, "{tr}/{va}/{ev}");
}

#[test]
fn seed_precedence_flag_config_env() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str, pre: &[&str], post: &[&str], env: Option<&str>| {
        let out = tmp.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_bsed"));
        cmd.env_remove("BSED_SEED");
        if let Some(s) = env {
            cmd.env("BSED_SEED", s);
        }
        cmd.args(pre).args(["generate", "--out", p(&out), "--n", "5", "--n-eval", "0"]).args(post);
        assert!(cmd.output().unwrap().status.success());
        dir_bytes(&out)
    };
    let cfg = tmp.path().join("gen.cfg");
    std::fs::write(&cfg, "# generator defaults\nseed = 11\n").unwrap();
    let seed11 = run("explicit", &[], &["--seed", "11"], None);
    assert_eq!(run("env", &[], &[], Some("11")), seed11, "environment fallback");
    assert_eq!(run("cfg", &["--config", p(&cfg)], &[], Some("3")), seed11, "config beats environment");
    assert_ne!(run("flag", &["--config", p(&cfg)], &["--seed", "2"], None), seed11, "flag beats config");
    assert_eq!(run("flag2", &[], &["--seed", "2"], None), run("flag2b", &["--config", p(&cfg)], &["--seed", "2"], None));
    assert_ne!(run("default", &[], &[], None), seed11);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["generate"]), 2);
    assert_eq!(code(&["train", "--data", "x", "--out", "y", "--mode", "nonsense"]), 2);
    let missing = tmp.path().join("missing");
    assert_eq!(code(&["eval", "--data", p(&missing), "--predictions", "p.tsv"]), 3);

    let d = tmp.path().join("d");
    generate(&d, 10, 5, 1);
    assert_eq!(code(&["generate", "--out", p(&d), "--n", "10"]), 2, "refuses to overwrite");
    ok(&["generate", "--out", p(&d), "--n", "10", "--n-eval", "5", "--seed", "1", "--force"]);

    let bad = tmp.path().join("bad.tsv");
    std::fs::write(&bad, "filename\tonset\toffset\tevent_label\nclip00000\t2.0\tone\tclass0\n").unwrap();
    assert_eq!(code(&["eval", "--data", p(&d), "--predictions", p(&bad)]), 3);
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(code(&["--config", p(&cfg), "generate", "--out", p(&tmp.path().join("e"))]), 2);
    assert_eq!(code(&["--jobs", "0", "generate", "--out", p(&tmp.path().join("f"))]), 2);
}

/// Lines of a kv report as (key, value) pairs.
fn kv(text: &str) -> Vec<(String, f64)> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.trim().to_string(), v.trim().parse().unwrap()))
        .collect()
}

#[test]
fn train_infer_eval_compare_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("data");
    generate(&d, 40, 12, 3);
    let (ours, base) = (tmp.path().join("ours"), tmp.path().join("base"));
    for (dir, mode) in [(&ours, "red-ool-epn"), (&base, "bce-mf")] {
        ok(&[
            "train", "--data", p(&d), "--out", p(dir), "--mode", mode, "--epochs", "1", "--epn-hidden", "8", "--seed", "5",
        ]);
        for f in ["params.bsp", "model.cfg", "train_log.csv"] {
            assert!(dir.join(f).exists(), "{mode} wrote {f}");
        }
    }
    assert!(base.join("mf.cfg").exists());
    assert!(!ours.join("mf.cfg").exists());
    assert_eq!(code(&["train", "--data", p(&d), "--out", p(&ours), "--epochs", "1"]), 2);

    assert_eq!(
        code(&["infer", "--data", p(&d), "--checkpoint", p(&ours), "--out", p(&tmp.path().join("x.tsv")), "--k", "0"]),
        2
    );
    let pred = tmp.path().join("pred.tsv");
    let probs = tmp.path().join("probs");
    ok(&[
        "infer", "--data", p(&d), "--checkpoint", p(&ours), "--out", p(&pred), "--probs-dir", p(&probs),
    ]);
    assert_eq!(std::fs::read_dir(&probs).unwrap().count(), 12);
    let csv = tmp.path().join("report.csv");
    let report = kv(&ok(&["eval", "--data", p(&d), "--predictions", p(&pred), "--csv", p(&csv)]));
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("class,metric,value\n"));

    let cmp_csv = tmp.path().join("cmp.csv");
    let cmp = ok(&["compare", "--data", p(&d), "--ours", p(&ours), "--baseline", p(&base), "--csv", p(&cmp_csv)]);
    assert!(cmp.contains("P1") && cmp.contains("F1"), "{cmp}");
    let rows = std::fs::read_to_string(&cmp_csv).unwrap();
    let ours_row: Vec<f64> = rows
        .lines()
        .find(|l| l.starts_with("ours,"))
        .unwrap()
        .split(',')
        .skip(2)
        .map(|v| v.parse().unwrap())
        .collect();
    let psds = report.iter().find(|(k, _)| k == "psds1").unwrap().1;
    let f1 = report.iter().find(|(k, _)| k == "f1_macro").unwrap().1;
    assert!((ours_row[0] - psds).abs() < 0.01, "file round trip {psds} vs in-memory {}", ours_row[0]);
    assert!((ours_row[1] - f1).abs() < 0.01, "file round trip {f1} vs in-memory {}", ours_row[1]);

    let same = ok(&["compare", "--data", p(&d), "--ours", p(&base), "--baseline", p(&base)]);
    let delta = same.lines().find(|l| l.starts_with("delta")).unwrap();
    let vals: Vec<f64> = delta.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect();
    assert_eq!(vals, vec![0.0, 0.0]);

    let empty = tmp.path().join("empty.tsv");
    std::fs::write(&empty, "").unwrap();
    let r = kv(&ok(&["eval", "--data", p(&d), "--predictions", p(&empty)]));
    assert_eq!(r.iter().find(|(k, _)| k == "psds1").unwrap().1, 0.0);

    let m1 = tmp.path().join("m1.tsv");
    ok(&["infer", "--data", p(&d), "--checkpoint", p(&ours), "--out", p(&m1), "--m", "1"]);
    let text = std::fs::read_to_string(&m1).unwrap();
    let mut classes: std::collections::HashMap<&str, std::collections::HashSet<&str>> = Default::default();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        classes.entry(f[0]).or_default().insert(f[3]);
    }
    assert!(classes.values().all(|c| c.len() <= 1));
}

#[test]
fn eval_without_ground_truth_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    ok(&["generate", "--out", p(&d), "--n", "10", "--n-eval", "0"]);
    let empty = tmp.path().join("e.tsv");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(code(&["eval", "--data", p(&d), "--predictions", p(&empty)]), 3);
}

/// The median-filter tuning sees only train and validation data: with every
/// eval feature file destroyed, training writes the same checkpoint.
#[test]
fn mf_tuning_never_reads_eval_clips() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    generate(&d, 30, 10, 4);
    let train = |out: &Path| {
        ok(&["train", "--data", p(&d), "--out", p(out), "--mode", "bce-mf", "--epochs", "1", "--seed", "1"]);
        dir_bytes(out).into_iter().filter(|(n, _)| n != "train_log.csv").collect::<Vec<_>>()
    };
    let before = train(&tmp.path().join("a"));
    let manifest = std::fs::read_to_string(d.join("manifest.tsv")).unwrap();
    let mut destroyed = 0;
    for line in manifest.lines() {
        if let Some((id, "eval")) = line.split_once('\t') {
            std::fs::write(d.join("features").join(format!("{id}.ffb")), b"garbage").unwrap();
            destroyed += 1;
        }
    }
    assert_eq!(destroyed, 10);
    let after = train(&tmp.path().join("b"));
    assert_eq!(before, after);
    assert_eq!(code(&["infer", "--data", p(&d), "--checkpoint", p(&tmp.path().join("a")), "--out", p(&tmp.path().join("p.tsv"))]), 3);
}

/// Two epochs of red-ool-epn at the benchmark EPN width on a reference-sized dataset.
#[test]
fn two_epoch_smoke_run_under_a_minute() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    generate(&d, 2000, 0, 9);
    let start = std::time::Instant::now();
    ok(&["train", "--data", p(&d), "--out", p(&tmp.path().join("ck")), "--epochs", "2", "--epn-hidden", "16"]);
    let secs = start.elapsed().as_secs_f64();
    let log = std::fs::read_to_string(tmp.path().join("ck/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(secs < 60.0, "smoke run took {secs:.1} s");
}
