use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn lama(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lama")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = lama(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 12] = ["--d", "16", "--heads", "2", "--layers", "1", "--ff", "32", "--epochs", "1", "--batch", "64"];

struct Corpus {
    dir: TempDir,
    sessions: PathBuf,
    labels: PathBuf,
}

impl Corpus {
    fn new(count: usize) -> Corpus {
        let dir = tempfile::tempdir().unwrap();
        let sessions = dir.path().join("s.tsv");
        let labels = dir.path().join("l.tsv");
        ok(&[
            "synth",
            "--sessions",
            s(&sessions),
            "--labels",
            s(&labels),
            "--count",
            &count.to_string(),
            "--seed",
            "3",
        ]);
        Corpus { dir, sessions, labels }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &Path, extra: &[&str]) {
        let mut args = vec!["train", "--sessions", s(&self.sessions), "--labels", s(&self.labels), "--out", s(out)];
        args.extend_from_slice(extra);
        ok(&args);
    }
}

fn flagged(report: &Path) -> HashSet<String> {
    fs::read_to_string(report)
        .unwrap()
        .lines()
        .filter(|l| !l.contains("\tnormal\t"))
        .map(|l| l.split('\t').next().unwrap().to_string())
        .collect()
}

#[test]
fn missing_labels_file_exits_2_and_names_it() {
    let c = Corpus::new(50);
    let missing = c.path("nowhere.tsv");
    let out = lama(&["train", "--sessions", s(&c.sessions), "--labels", s(&missing), "--out", s(&c.path("m"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn usage_errors_exit_2() {
    let c = Corpus::new(50);
    let bad = c.path("bad.toml");
    fs::write(&bad, "d = 16\nwidth = 3\n").unwrap();
    let base = ["train", "--sessions", s(&c.sessions), "--labels", s(&c.labels), "--out", "/dev/null"];
    let with = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend_from_slice(extra);
        lama(&a).status.code()
    };
    assert_eq!(with(&["--config", s(&bad)]), Some(2));
    assert_eq!(with(&["--d", "15", "--heads", "2"]), Some(2));
    assert_eq!(with(&["--d", "sixteen"]), Some(2));
    assert_eq!(lama(&["frobnicate"]).status.code(), Some(2));
    let unlabeled = c.path("partial.tsv");
    fs::write(&unlabeled, "s000000\t0\n").unwrap();
    let out = lama(&["train", "--sessions", s(&c.sessions), "--labels", s(&unlabeled), "--out", "/dev/null"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let c = Corpus::new(200);
    let again = c.path("again.tsv");
    ok(&["synth", "--sessions", s(&again), "--labels", s(&c.path("again-l.tsv")), "--count", "200", "--seed", "3"]);
    assert_eq!(fs::read(&again).unwrap(), fs::read(&c.sessions).unwrap());

    let (a, b) = (c.path("a.ckpt"), c.path("b.ckpt"));
    let mut flags = TINY.to_vec();
    flags.extend(["--seed", "7"]);
    c.train(&a, &flags);
    c.train(&b, &flags);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let history = fs::read_to_string(c.path("a.ckpt.loss.tsv")).unwrap();
    assert_eq!(history.lines().count(), 2);
}

#[test]
fn detect_covers_every_session_and_larger_k_flags_a_subset() {
    let c = Corpus::new(300);
    let ck = c.path("m.ckpt");
    let (ts, tl) = (c.path("test.tsv"), c.path("test-l.tsv"));
    let mut flags = TINY.to_vec();
    flags.extend(["--test-sessions", s(&ts), "--test-labels", s(&tl)]);
    c.train(&ck, &flags);

    let (r4, r6) = (c.path("r4.tsv"), c.path("r6.tsv"));
    ok(&["detect", "--checkpoint", s(&ck), "--sessions", s(&ts), "--out", s(&r4)]);
    ok(&["detect", "--checkpoint", s(&ck), "--sessions", s(&ts), "--out", s(&r6), "--topk", "6"]);
    let sessions = fs::read_to_string(&ts).unwrap().lines().count();
    assert_eq!(fs::read_to_string(&r4).unwrap().lines().count(), sessions);
    assert!(flagged(&r6).is_subset(&flagged(&r4)));

    // model flags must agree with the checkpoint
    let out = lama(&["detect", "--checkpoint", s(&ck), "--sessions", s(&ts), "--out", s(&r6), "--d", "32"]);
    assert_eq!(out.status.code(), Some(2));
    let out = lama(&["detect", "--checkpoint", s(&ck), "--sessions", s(&ts), "--out", s(&r6), "--topk", "99"]);
    assert_eq!(out.status.code(), Some(2));
    let garbage = c.path("garbage.ckpt");
    fs::write(&garbage, b"LAMACKPT\x01").unwrap();
    let out = lama(&["detect", "--checkpoint", s(&garbage), "--sessions", s(&ts), "--out", s(&r6)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn well_fit_model_passes_its_training_sessions() {
    let c = Corpus::new(1600);
    let ck = c.path("m.ckpt");
    let (ts, tl) = (c.path("test.tsv"), c.path("test-l.tsv"));
    c.train(
        &ck,
        &[
            "--d", "32", "--heads", "4", "--layers", "2", "--ff", "128", "--batch", "32", "--seed", "1",
            "--test-sessions", s(&ts), "--test-labels", s(&tl),
        ],
    );
    let held: HashSet<String> = fs::read_to_string(&ts)
        .unwrap()
        .lines()
        .map(|l| l.split('\t').next().unwrap().to_string())
        .collect();
    let train_only = c.path("train.tsv");
    let text: String = fs::read_to_string(&c.sessions)
        .unwrap()
        .lines()
        .filter(|l| !held.contains(l.split('\t').next().unwrap()))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&train_only, text).unwrap();
    let report = c.path("train-report.tsv");
    ok(&["detect", "--checkpoint", s(&ck), "--sessions", s(&train_only), "--out", s(&report)]);
    let lines = fs::read_to_string(&report).unwrap();
    let total = lines.lines().count();
    let normal = lines.lines().filter(|l| l.contains("\tnormal\t")).count();
    assert!(total > 1000);
    assert!(normal as f64 >= 0.99 * total as f64, "{normal} of {total}");
}

#[test]
fn eval_counts_a_hand_built_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.tsv");
    let labels = dir.path().join("labels.tsv");
    fs::write(
        &report,
        "a\tsequence-anomaly\tat=2 truth=E1 topk=E2,E3\nb\toov-anomaly\toov_at=0\nc\tnormal\t-\nd\tsequence-anomaly\tat=1 truth=E4 topk=E1\n",
    )
    .unwrap();
    fs::write(&labels, "a\t1\nb\t1\nc\t1\nd\t0\n").unwrap();
    let out_dir = dir.path().join("metrics");
    ok(&["eval", "--report", s(&report), "--labels", s(&labels), "--out-dir", s(&out_dir)]);

    let with: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("metrics-with-oov.json")).unwrap()).unwrap();
    assert_eq!((with["tp"].as_u64(), with["fp"].as_u64(), with["fn"].as_u64(), with["tn"].as_u64()), (Some(2), Some(1), Some(1), Some(0)));
    let without: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("metrics-without-oov.json")).unwrap()).unwrap();
    assert_eq!(without["tp"].as_u64(), Some(1));
    assert_eq!(without["mode"], "without-oov");
    for f in ["metrics-with-oov.txt", "metrics-without-oov.txt"] {
        assert!(fs::read_to_string(out_dir.join(f)).unwrap().contains("f1: "));
    }

    fs::write(&labels, "a\t1\nb\t1\nc\t1\n").unwrap();
    let out = lama(&["eval", "--report", s(&report), "--labels", s(&labels), "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ngram_detector_round_trip() {
    let c = Corpus::new(300);
    let model = c.path("ngram.json");
    let (ts, tl) = (c.path("test.tsv"), c.path("test-l.tsv"));
    c.train(&model, &["--detector", "ngram", "--test-sessions", s(&ts), "--test-labels", s(&tl)]);
    let report = c.path("r.tsv");
    ok(&["detect", "--checkpoint", s(&model), "--sessions", s(&ts), "--out", s(&report)]);
    ok(&["eval", "--report", s(&report), "--labels", s(&tl)]);
    assert!(c.path("metrics-with-oov.json").exists());
    let out = lama(&["detect", "--checkpoint", s(&model), "--sessions", s(&ts), "--out", s(&report), "--detector", "lama"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_prints_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("ablation.tsv");
    let out = ok(&[
        "ablate", "--synthetic", "150", "--layers-grid", "2,4", "--heads-grid", "2,8", "--repeats", "3",
        "--d", "16", "--ff", "32", "--epochs", "1", "--out", s(&table),
    ]);
    let text = fs::read_to_string(&table).unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), text);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "b\th\tprecision\trecall\tf1");
    assert_eq!(lines.len(), 5);
    for (line, cell) in lines[1..].iter().zip(["2\t2", "2\t8", "4\t2", "4\t8"]) {
        assert!(line.starts_with(cell), "{line}");
        for col in line.split('\t').skip(2) {
            let parts: Vec<&str> = col.split(' ').collect();
            assert_eq!(parts.len(), 3, "{col}");
            assert!(parts[1].starts_with('+') && parts[2].starts_with('-'));
            let plus: f64 = parts[1][1..].parse().unwrap();
            let minus: f64 = parts[2][1..].parse().unwrap();
            assert!(plus >= 0.0 && minus >= 0.0);
        }
    }
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().last().unwrap().ends_with("PASS"), "{text}");
}
