use std::path::Path;
use std::process::{Command, Output};

use spotlight::hashers::{Checkpoint, MlpHasher};
use spotlight::synthkv::{cone_stats, read_dump};

fn spotlight(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spotlight"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = spotlight(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_dump(dir: &Path, name: &str, seed: &str) {
    ok(dir, &["generate", "--dim", "16", "--n-queries", "96", "--n-keys", "96", "--seed", seed, "--out", name]);
}

#[test]
fn generate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    small_dump(dir.path(), "a.splq", "3");
    small_dump(dir.path(), "b.splq", "3");
    small_dump(dir.path(), "c.splq", "4");
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.splq"), read("b.splq"));
    assert_ne!(read("a.splq"), read("c.splq"));
    let meta = read("a.splq.meta");
    small_dump(dir.path(), "a.splq", "3");
    assert_eq!(read("a.splq.meta"), meta);
}

#[test]
fn narrow_cones_are_nearly_collinear() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--dim", "32", "--n-queries", "200", "--n-keys", "200", "--spread", "0.01", "--out", "n.splq"]);
    let dump = read_dump(dir.path().join("n.splq")).unwrap();
    let stats = cone_stats(&dump.queries, &dump.keys, 5_000, 1);
    assert!(stats.intra_cos > 0.999, "{stats:?}");
}

#[test]
fn zero_iterations_leave_the_initialisation_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    small_dump(dir.path(), "a.splq", "1");
    ok(dir.path(), &["train", "--dump", "a.splq", "--iters", "0", "--hidden", "24", "--bits", "32", "--seed", "11", "--out", "h.splh"]);
    let trained = Checkpoint::load(dir.path().join("h.splh")).unwrap();
    let init = MlpHasher::<f32>::random(16, 24, 32, 64.0, 11).unwrap();
    assert_eq!(trained, Checkpoint::Mlp(init));
    let report = std::fs::read_to_string(dir.path().join("h.splh.report.jsonl")).unwrap();
    assert!(report.lines().next().unwrap().contains("\"config_hash\""));
}

#[test]
fn short_training_runs_write_reports_for_both_losses() {
    let dir = tempfile::tempdir().unwrap();
    small_dump(dir.path(), "a.splq", "1");
    for loss in ["ranking", "recon"] {
        let out = format!("{loss}.splh");
        ok(dir.path(), &[
            "train", "--dump", "a.splq", "--holdout", "a.splq", "--iters", "12", "--seq-len", "64",
            "--hidden", "16", "--bits", "32", "--loss", loss, "--log-every", "0", "--out", &out,
        ]);
        let report = std::fs::read_to_string(dir.path().join(format!("{out}.report.jsonl"))).unwrap();
        assert_eq!(report.lines().count(), 1 + 12, "{loss}");
        assert!(Checkpoint::load(dir.path().join(&out)).is_ok());
    }
}

#[test]
fn oracle_scores_perfect_iou_and_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    small_dump(dir.path(), "a.splq", "2");
    let args = ["eval", "--dump", "a.splq", "--methods", "oracle,lsh", "--budget", "40", "--out", "r.txt"];
    let stdout = ok(dir.path(), &args);
    let r1 = std::fs::read(dir.path().join("r.txt")).unwrap();
    ok(dir.path(), &args);
    assert_eq!(r1, std::fs::read(dir.path().join("r.txt")).unwrap());
    let text = String::from_utf8(r1).unwrap();
    let oracle = text.split("[method oracle]").nth(1).unwrap();
    assert!(oracle.contains("budget = 40"));
    assert!(oracle.contains("mean_iou = 1.000000"));
    assert!(stdout.contains("oracle"));
}

#[test]
fn budget_rates_apply_the_floor_of_twenty() {
    let dir = tempfile::tempdir().unwrap();
    small_dump(dir.path(), "a.splq", "2");
    ok(dir.path(), &["eval", "--dump", "a.splq", "--methods", "oracle", "--budget-rate", "0.01", "--out", "r.txt"]);
    let text = std::fs::read_to_string(dir.path().join("r.txt")).unwrap();
    assert!(text.contains("budget = 20"), "{text}");
}

#[test]
fn exit_codes_separate_usage_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    small_dump(dir.path(), "a.splq", "2");
    let missing = spotlight(dir.path(), &["eval", "--dump", "a.splq", "--checkpoint", "absent.splh", "--out", "r.txt"]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(spotlight(dir.path(), &["eval", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(spotlight(dir.path(), &["train", "--dump", "a.splq", "--hasher", "tree", "--out", "h"]).status.code(), Some(1));
    std::fs::write(dir.path().join("cut.splq"), &std::fs::read(dir.path().join("a.splq")).unwrap()[..40]).unwrap();
    assert_eq!(spotlight(dir.path(), &["eval", "--dump", "cut.splq", "--out", "r.txt"]).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.cfg"), "not_a_key = 3\n").unwrap();
    assert_eq!(spotlight(dir.path(), &["generate", "--config", "bad.cfg"]).status.code(), Some(1));
}

#[test]
fn config_files_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("g.cfg"), "# small\ndim = 8\nn_queries = 5\nn_keys = 7\nseed = 1\n").unwrap();
    ok(dir.path(), &["generate", "--config", "g.cfg", "--n-keys", "9", "--out", "g.splq"]);
    let dump = read_dump(dir.path().join("g.splq")).unwrap();
    assert_eq!((dump.dim(), dump.n_queries(), dump.n_keys()), (8, 5, 9));
}

#[test]
fn bench_writes_one_row_per_operation_and_size() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["bench", "--sizes", "4096,8192", "--trials", "3", "--warmup", "1", "--out", "b.csv"]);
    let csv = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "op,n,bits,k,trials,median_us,min_us,max_us");
    assert_eq!(rows.len(), 1 + 4);
    for row in &rows[1..] {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 8);
        let (med, lo, hi): (f64, f64, f64) = (cells[5].parse().unwrap(), cells[6].parse().unwrap(), cells[7].parse().unwrap());
        assert!(lo <= med && med <= hi, "{row}");
    }
}
