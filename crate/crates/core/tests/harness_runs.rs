use std::path::Path;

use rolling_dfo::blackbox::load_dataset;
use rolling_dfo::harness::{
    compare_strategies, make_pseudo_labeled, predict, run_experiment, synthetic_examples, write_pseudo,
    CurriculumConfig, ExperimentResult, RunConfig, RunOptions, RunState,
};
use rolling_dfo::scheduler::StrategyKind;
use rolling_dfo::verbalizer::LabelWords;
use rolling_dfo::RngStream;

const SEPARABLE: &str = r#"
seed = 3
budget = 600

[task]
kind = "separable"
layers = 4
prompt_len = 3
width = 8

[optimizer]
dim = 4
population = 10
sigma0 = 0.5

[strategy]
name = "rolling"
"#;

const MOCK: &str = r#"
seed = 1
budget = 800

[task]
kind = "mock_lm"
vocab_size = 80
width = 8
layers = 4
prompt_len = 3
label_words = ["bad/awful", "great/good"]
p0 = "select"
p0_pool_multiplier = 4

[task.synthetic]
train = 12
dev = 6
test = 6

[optimizer]
dim = 6
population = 10
sigma0 = 0.3

[strategy]
name = "rolling"

[mtl]
update_period = 20
head_epochs = 40

[ensemble]
capacity = 2
dev_interval = 20
"#;

fn config(text: &str) -> RunConfig {
    RunConfig::from_toml(text).unwrap()
}

fn run_into(cfg: &RunConfig, dir: &Path) -> ExperimentResult {
    run_experiment(
        cfg,
        &RunOptions {
            out_dir: Some(dir.to_path_buf()),
            resume: None,
        },
    )
    .unwrap()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn repeated_runs_write_identical_files() {
    for text in [SEPARABLE, MOCK] {
        let cfg = config(text);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_into(&cfg, a.path());
        run_into(&cfg, b.path());
        for name in ["result.json", "trace.csv", "run_state.json"] {
            assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
        }
        assert!(a.path().join("timing.json").exists());
    }
}

#[test]
fn result_embeds_the_resolved_config() {
    let cfg = config(SEPARABLE);
    let dir = tempfile::tempdir().unwrap();
    run_into(&cfg, dir.path());
    let back: ExperimentResult = serde_json::from_slice(&read(dir.path(), "result.json")).unwrap();
    assert_eq!(back.config, cfg);
    assert_eq!(back.seed, 3);
    let state = RunState::load(&dir.path().join("run_state.json")).unwrap();
    assert_eq!(state.config, cfg);
}

fn resumed(text: &str, first_budget: usize) -> (ExperimentResult, ExperimentResult) {
    let full = config(text);
    let direct = run_experiment(&full, &RunOptions::default()).unwrap();

    let mut short = full.clone();
    short.budget = first_budget;
    let dir = tempfile::tempdir().unwrap();
    run_into(&short, dir.path());
    let state = RunState::load(&dir.path().join("run_state.json")).unwrap();
    let cont = run_experiment(
        &full,
        &RunOptions {
            out_dir: None,
            resume: Some(state),
        },
    )
    .unwrap();
    (direct, cont)
}

#[test]
fn resume_continues_the_same_trajectory() {
    let (direct, cont) = resumed(SEPARABLE, 300);
    assert_eq!(cont.trace, direct.trace);
    assert_eq!(cont.tell_counts, direct.tell_counts);
    assert_eq!(cont.best_error, direct.best_error);
    assert_eq!(cont.calls, direct.calls);

    let (direct, cont) = resumed(MOCK, 400);
    assert_eq!(cont.trace, direct.trace);
    assert_eq!(cont.head_bouts, direct.head_bouts);
    assert_eq!(cont.registry, direct.registry);
    assert_eq!(cont.metrics, direct.metrics);
}

#[test]
fn resume_rejects_a_different_seed() {
    let cfg = config(SEPARABLE);
    let dir = tempfile::tempdir().unwrap();
    run_into(&cfg, dir.path());
    let state = RunState::load(&dir.path().join("run_state.json")).unwrap();
    let mut other = cfg.clone();
    other.seed = 4;
    let err = run_experiment(
        &other,
        &RunOptions {
            out_dir: None,
            resume: Some(state),
        },
    )
    .unwrap_err();
    assert_eq!(err.category(), "config");
}

#[test]
fn invalid_configs_fail_before_touching_disk() {
    let base = tempfile::tempdir().unwrap();
    let out = base.path().join("never");
    let mut bad_counts = config(SEPARABLE);
    bad_counts.strategy.n_unstable = Some(3);
    bad_counts.strategy.n_testing = Some(2);
    bad_counts.strategy.n_stable = Some(1);
    let mut tiny_budget = config(SEPARABLE);
    tiny_budget.budget = 5;
    for cfg in [bad_counts, tiny_budget] {
        let err = run_experiment(
            &cfg,
            &RunOptions {
                out_dir: Some(out.clone()),
                resume: None,
            },
        )
        .unwrap_err();
        assert_eq!(err.category(), "config");
        assert!(!out.exists());
    }
    assert!(RunConfig::from_toml("seed = 1\nbudget = 10\nunknown = 3\n").is_err());
}

#[test]
fn comparison_rows_and_matched_calls() {
    let cfg = config(SEPARABLE);
    let one = compare_strategies(&cfg, &StrategyKind::ALL, &[0]).unwrap();
    assert_eq!(one.rows.len(), 3 + 3);
    let cmp = compare_strategies(&cfg, &StrategyKind::ALL, &[0, 1, 2, 3, 4]).unwrap();
    assert_eq!(cmp.rows.len(), 3 * 5 + 3);
    assert_eq!(cmp.timings.len(), 15);
    assert!(cmp.rows.iter().all(|r| r.calls == 600.0));
    let medians: Vec<&str> = cmp.rows[15..].iter().map(|r| r.strategy.as_str()).collect();
    assert_eq!(medians, ["divide-and-conquer", "all-in-time", "rolling"]);
    assert!(cmp.rows[15..].iter().all(|r| r.seed == "median"));
    // per-slot tells: B/(mL), B/m, then N_t/L of B/m
    let tells: Vec<f64> = cmp.rows[15..].iter().map(|r| r.mean_tells_per_slot).collect();
    assert_eq!(tells[0], 15.0);
    assert_eq!(tells[1], 60.0);
    assert!((tells[2] - 60.0 / 4.0).abs() <= 1.0, "{tells:?}");
    assert!(compare_strategies(&cfg, &[StrategyKind::Rolling], &[0]).is_err());
}

#[test]
fn curriculum_spends_its_phase_budget_first() {
    let mut cfg = config(MOCK);
    cfg.curriculum = Some(CurriculumConfig {
        corpus: None,
        synthetic_lines: 200,
        n_fake: 60,
        b_fake: 15,
    });
    let r = run_experiment(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(r.curriculum_calls, 150);
    assert_eq!(r.consumed, 800);
    // one scheduler carries over, so the trace covers both phases
    assert_eq!(r.iterations, 80);
    assert_eq!(r.trace[14].consumed, 150);
    assert_eq!(r.trace[15].consumed, 160);
}

#[test]
fn pseudo_labels_round_trip_through_a_dataset_file() {
    let words = LabelWords::parse("0: bad/awful\n1: great/good\n").unwrap();
    let lines = vec![
        "the movie was great today".to_string(),
        "good acting but awful plot".to_string(),
        "nothing to see".to_string(),
    ];
    let rows = make_pseudo_labeled(&lines, &words, 10, &mut RngStream::new(0, "pseudo"));
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().any(|r| r.label == 1 && r.text1 == "the movie was <mask> today"));
    assert!(rows.iter().any(|r| r.label == 1 && r.text1 == "<mask> acting but awful plot"));
    assert!(rows.iter().any(|r| r.label == 0 && r.text1 == "good acting but <mask> plot"));
    let again = make_pseudo_labeled(&lines, &words, 10, &mut RngStream::new(0, "pseudo"));
    assert_eq!(rows, again);
    assert_eq!(make_pseudo_labeled(&lines, &words, 2, &mut RngStream::new(0, "pseudo")).len(), 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pseudo.tsv");
    write_pseudo(&path, &rows).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), rows);
}

#[test]
fn predictions_come_from_the_saved_registry() {
    let cfg = config(MOCK);
    let dir = tempfile::tempdir().unwrap();
    let r = run_into(&cfg, dir.path());
    let state = RunState::load(&dir.path().join("run_state.json")).unwrap();
    let members = state.registry.as_ref().unwrap().len();
    assert_eq!(state.registry, r.registry);
    assert!(members >= 2 && members <= 4);

    let rows = synthetic_examples(8, &mut RngStream::new(9, "held-out"));
    let preds = predict(&state, &rows).unwrap();
    assert_eq!(preds.len(), 8);
    for (i, p) in preds.iter().enumerate() {
        assert_eq!(p.id, i);
        assert!(p.label < 2);
        assert_eq!(p.members.len(), members);
    }
    assert_eq!(predict(&state, &rows).unwrap(), preds);

    let sep = tempfile::tempdir().unwrap();
    run_into(&config(SEPARABLE), sep.path());
    let sep_state = RunState::load(&sep.path().join("run_state.json")).unwrap();
    assert_eq!(predict(&sep_state, &rows).unwrap_err().category(), "config");
}
