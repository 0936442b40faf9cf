use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn umm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_umm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = umm(args);
    assert!(
        out.status.success(),
        "umm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: PathBuf) -> Vec<u8> {
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Small dataset plus one short pretraining run.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Self { dir };
        ok(&[
            "gen-data", "--seed", "3", "--out", p(&f.data()),
            "--set", "n=60", "--set", "d_r=2", "--set", "d_ur=4", "--set", "k=3",
        ]);
        f.pretrain("run");
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self) -> PathBuf {
        self.path("data")
    }

    fn pretrain(&self, name: &str) -> String {
        ok(&[
            "pretrain", "--seed", "3", "--out", p(&self.path(name)),
            "--set", &format!("data={}", p(&self.data())),
            "--set", "widths=8,6,4", "--set", "epochs=4", "--set", "every_k=2",
            "--set", "monitor_pairs=8", "--set", "batch_pairs=16", "--set", "knn=false",
        ])
    }

    fn umm(&self, name: &str, extra: &[&str]) -> String {
        let data = format!("data={}", p(&self.data()));
        let ckpt = format!("checkpoint={}", p(&self.path("run").join("final")));
        let out = self.path(name);
        let mut args = vec![
            "umm", "--seed", "3", "--out", p(&out),
            "--set", &data, "--set", &ckpt,
            "--set", "monitor_pairs=8", "--set", "batch_pairs=16",
        ];
        for e in extra {
            args.extend(["--set", e]);
        }
        ok(&args)
    }
}

#[test]
fn pipeline_is_deterministic_and_consistent() {
    let f = Fixture::new();
    f.pretrain("run_again");
    for file in ["curve.csv", "final.mlpc"] {
        assert_eq!(read(f.path("run").join(file)), read(f.path("run_again").join(file)), "{file}");
    }
    let ckpts = std::fs::read_dir(f.path("run").join("checkpoints")).unwrap().count();
    assert_eq!(ckpts, 2);

    f.umm("umm_a", &["epochs=2"]);
    f.umm("umm_b", &["epochs=2"]);
    assert_eq!(read(f.path("umm_a").join("metrics.csv")), read(f.path("umm_b").join("metrics.csv")));
    assert_eq!(read(f.path("umm_a").join("final.mlpc")), read(f.path("umm_b").join("final.mlpc")));

    // zero epochs hands the checkpoint back unchanged
    f.umm("umm_zero", &["epochs=0"]);
    assert_eq!(read(f.path("umm_zero").join("final.mlpc")), read(f.path("run").join("final.mlpc")));

    // with every extra term switched off the bi-level step is plain SSL descent
    f.umm("null", &["epochs=2", "alpha=0", "beta=0", "lambda=0"]);
    f.umm("baseline", &["epochs=2", "variant=baseline"]);
    assert_eq!(read(f.path("null").join("final.mlpc")), read(f.path("baseline").join("final.mlpc")));

    // two records cannot support a patience-3 peak test
    ok(&["report", "--out", p(&f.path("report")), "--set", &format!("run={}", p(&f.path("run")))]);
    let report: serde_json::Value = serde_json::from_slice(&read(f.path("report").join("report.json"))).unwrap();
    let note = report["peak"]["layers"]["last"]["note"].as_str().unwrap();
    assert!(note.starts_with("insufficient points"), "{note}");

    let summary = ok(&[
        "eval", "--seed", "3", "--out", p(&f.path("eval")),
        "--set", &format!("data={}", p(&f.data())),
        "--set", &format!("checkpoint={}", p(&f.path("run").join("final"))),
        "--set", "monitor_pairs=8",
    ]);
    assert!(summary.contains("crr"), "{summary}");
    let timings = String::from_utf8(read(f.path("eval").join("timings.csv"))).unwrap();
    assert_eq!(timings.lines().count(), 4);
}

#[test]
fn resolved_config_feeds_back_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    ok(&["gen-data", "--seed", "5", "--out", p(&first), "--set", "n=40", "--set", "k=2", "--set", "d_ur=3"]);
    let echoed = first.join("config.txt");
    let second = dir.path().join("second");
    ok(&["gen-data", "--config", p(&echoed), "--out", p(&second)]);
    let strip_out = |text: Vec<u8>| -> Vec<String> {
        String::from_utf8(text).unwrap().lines().filter(|l| !l.starts_with("out=")).map(String::from).collect()
    };
    assert_eq!(strip_out(read(echoed.clone())), strip_out(read(second.join("config.txt"))));
    assert_eq!(read(first.join("x.crrm")), read(second.join("x.crrm")));
}

#[test]
fn dry_run_prints_the_config_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let text = ok(&["umm", "--dry-run", "--out", p(&out), "--set", "alpha=0.5"]);
    assert!(text.lines().any(|l| l == "alpha=0.5"));
    assert!(text.lines().any(|l| l == "epochs=200"));
    assert!(!out.exists());
}

#[test]
fn bad_input_exits_with_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    let unknown = umm(&["gen-data", "--out", out, "--set", "sigma_A=1"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("sigma_A"));
    let small = umm(&["gen-data", "--out", out, "--set", "n=15"]);
    assert_eq!(small.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&small.stderr).contains("n = 15"));
    let missing = umm(&["report", "--out", out, "--set", "run=/nonexistent/run"]);
    assert_eq!(missing.status.code(), Some(1));
}
