use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rolling-dfo"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_TASK: &str = r#"
[task]
kind = "mock_lm"
vocab_size = 60
width = 8
layers = 6
prompt_len = 3
label_words = ["bad/awful", "great/good"]
p0 = "select"
p0_pool_multiplier = 4

[task.synthetic]
train = 10
"#;

fn small_task(dir: &Path) -> PathBuf {
    let path = dir.join("task.toml");
    std::fs::write(&path, SMALL_TASK).unwrap();
    path
}

#[test]
fn run_writes_result_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = configs().join("separable.toml");
    let o = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--budget",
        "300",
        "--strategy",
        "all-in-time",
        "--seed",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("strategy=all-in-time"));
    for f in ["result.json", "trace.csv", "run_state.json", "timing.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let result = std::fs::read_to_string(out.join("result.json")).unwrap();
    assert!(result.contains("\"seed\": 4"));
    assert!(result.contains("\"budget\": 300"));
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 30);
}

#[test]
fn resume_extends_a_saved_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = configs().join("separable.toml");
    let cfg = cfg.to_str().unwrap();
    assert!(run(&["run", "--config", cfg, "--budget", "200", "--out", a.to_str().unwrap()]).status.success());
    let state = a.join("run_state.json");
    let o = run(&[
        "run",
        "--config",
        cfg,
        "--budget",
        "400",
        "--resume",
        state.to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("iterations=40"));
}

#[test]
fn invalid_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let base = std::fs::read_to_string(configs().join("separable.toml")).unwrap();
    std::fs::write(&cfg, format!("{base}n_unstable = 2\nn_testing = 2\nn_stable = 3\n")).unwrap();
    let out = dir.path().join("out");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error [config]"), "{}", stderr(&o));
    assert!(!out.exists());

    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--metric", "f1"]);
    assert!(!o.status.success());
    let missing = dir.path().join("missing.toml");
    let o = run(&["run", "--config", missing.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error ["));
}

#[test]
fn compare_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("separable.toml");
    let o = run(&[
        "compare",
        "--config",
        cfg.to_str().unwrap(),
        "--budget",
        "200",
        "--strategies",
        "divide-and-conquer,rolling",
        "--seeds",
        "0,1,2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 1 + 2 * 3 + 2);
    assert!(rows[0].starts_with("strategy,seed,best_error"));
    assert_eq!(rows.iter().filter(|r| r.contains(",median,")).count(), 2);
    assert!(dir.path().join("comparison_timing.csv").exists());
}

#[test]
fn select_p0_prints_one_token_per_slot() {
    let dir = tempfile::tempdir().unwrap();
    let task = small_task(dir.path());
    let cfg = configs().join("mock_lm.toml");
    let o = run(&["select-p0", "--config", cfg.to_str().unwrap(), "--task", task.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|l| l.split('\t').count() == 2));

    let sep = configs().join("separable.toml");
    let o = run(&["select-p0", "--config", sep.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn make_pseudo_masks_label_words() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    let labels = dir.path().join("labels.txt");
    let out = dir.path().join("pseudo.tsv");
    std::fs::write(&corpus, "the movie was great today\nnothing here\ngood but awful\n").unwrap();
    std::fs::write(&labels, "0: bad/awful\n1: great/good\n").unwrap();
    let o = run(&[
        "make-pseudo",
        "--corpus",
        corpus.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
        "--n-fake",
        "10",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.sort();
    assert_eq!(
        lines,
        ["0\tgood but <mask>", "1\t<mask> but awful", "1\tthe movie was <mask> today"]
    );
}

#[test]
fn predict_uses_the_saved_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let task = small_task(dir.path());
    let out = dir.path().join("run");
    let cfg = configs().join("mock_lm.toml");
    let o = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--task",
        task.to_str().unwrap(),
        "--budget",
        "300",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("vocab.txt").exists());

    let input = dir.path().join("test.tsv");
    std::fs::write(&input, "1\tthe film was superb and fun\n0\tthe plot was dull and boring\n0\tquite messy\n").unwrap();
    let preds = dir.path().join("preds.csv");
    let o = run(&[
        "predict",
        "--state",
        out.join("run_state.json").to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--out",
        preds.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&preds).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("id,fused_label,member_0"));
    for (i, row) in rows[1..].iter().enumerate() {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[0], i.to_string());
        assert!(fields[1] == "0" || fields[1] == "1");
    }
}
