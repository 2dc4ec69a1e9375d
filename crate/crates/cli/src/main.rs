use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rolling_dfo::blackbox::load_dataset;
use rolling_dfo::harness::{
    build_mock_lm, compare_strategies, make_pseudo_labeled, predict, run_experiment, write_comparison,
    write_predictions, write_pseudo, P0Source, RunConfig, RunOptions, RunState, TaskConfig,
};
use rolling_dfo::scheduler::StrategyKind;
use rolling_dfo::verbalizer::{select_p0, LabelWords, LossMetric, P0SelectionConfig};
use rolling_dfo::{Error, Result, RngStream};

#[derive(Parser)]
#[command(name = "rolling-dfo", version, about = "Derivative-free deep prompt tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configured experiment and write its result files.
    Run(RunArgs),
    /// Run several strategies on the same task, budget and seeds.
    Compare(CompareArgs),
    /// Print the initial prompt tokens chosen by coverage selection.
    SelectP0(SelectArgs),
    /// Build a pseudo-labelled dataset from a text corpus.
    MakePseudo(PseudoArgs),
    /// Ensemble predictions of a finished run over a dataset file.
    Predict(PredictArgs),
}

#[derive(Args)]
struct Overrides {
    /// Config file (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    strategy: Option<StrategyKind>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file holding a replacement `[task]` table.
    #[arg(long)]
    task: Option<PathBuf>,
    /// Loss metric: cross_entropy, hinge or neg_accuracy.
    #[arg(long)]
    metric: Option<LossMetric>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Overrides,
    /// Continue from a saved run_state.json.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Overrides,
    /// Comma-separated strategy names.
    #[arg(long, value_delimiter = ',', default_value = "divide-and-conquer,all-in-time,rolling")]
    strategies: Vec<StrategyKind>,
    /// Comma-separated seeds; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    common: Overrides,
}

#[derive(Args)]
struct PseudoArgs {
    /// Corpus file, one text per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Label words file (`0: bad/awful` per line).
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    n_fake: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// run_state.json written by `run`.
    #[arg(long)]
    state: PathBuf,
    /// Dataset file (TSV: label, text1[, text2]).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&o.config)?;
    if let Some(s) = o.strategy {
        cfg.strategy.name = s;
    }
    if let Some(b) = o.budget {
        cfg.budget = b;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(path) = &o.task {
        cfg.task = TaskConfig::load(path)?;
    }
    if let Some(m) = &o.metric {
        cfg.loss.metric = *m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let resume = a.resume.as_deref().map(RunState::load).transpose()?;
    let r = run_experiment(
        &cfg,
        &RunOptions {
            out_dir: Some(a.out.clone()),
            resume,
        },
    )?;
    println!(
        "strategy={} iterations={} calls={} best_error={:.6e}",
        r.strategy, r.iterations, r.calls, r.best_error
    );
    if let Some(m) = &r.metrics {
        println!(
            "train_loss {:.4} -> {:.4}, ensemble train accuracy {:.4}",
            m.train_loss_first, m.train_loss_final, m.ensemble_train_accuracy
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let seeds = if a.seeds.is_empty() { vec![cfg.seed] } else { a.seeds.clone() };
    let cmp = compare_strategies(&cfg, &a.strategies, &seeds)?;
    write_comparison(&a.out, &cmp)?;
    println!("{:<20} {:>8} {:>14} {:>12} {:>8}", "strategy", "seed", "best_error", "total_tells", "calls");
    for r in &cmp.rows {
        println!(
            "{:<20} {:>8} {:>14.6e} {:>12} {:>8}",
            r.strategy, r.seed, r.best_error, r.total_tells, r.calls
        );
    }
    Ok(())
}

fn cmd_select(a: &SelectArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let TaskConfig::MockLm(task) = &cfg.task else {
        return Err(Error::config("select-p0 needs a mock_lm task"));
    };
    let setup = build_mock_lm(&cfg, None)?;
    let ids = match &task.p0 {
        P0Source::Select => select_p0(
            &setup.model,
            &setup.train,
            &P0SelectionConfig {
                prompt_len: task.prompt_len,
                pool_multiplier: task.p0_pool_multiplier,
                missing_prob: task.p0_missing_prob,
            },
        )?,
        _ => return Err(Error::config("select-p0 needs p0 = \"select\"")),
    };
    for id in ids {
        match setup.vocab.token(id) {
            Some(word) => println!("{id}\t{word}"),
            None => println!("{id}\t(model-only id)"),
        }
    }
    Ok(())
}

fn cmd_pseudo(a: &PseudoArgs) -> Result<()> {
    let words = LabelWords::load(&a.labels)?;
    let text = std::fs::read_to_string(&a.corpus).map_err(|e| Error::io(&a.corpus, e))?;
    let lines: Vec<String> = text.lines().map(str::to_string).collect();
    if lines.is_empty() {
        return Err(Error::Data("corpus is empty".into()));
    }
    let mut rng = RngStream::new(a.seed, "make-pseudo");
    let rows = make_pseudo_labeled(&lines, &words, a.n_fake, &mut rng);
    write_pseudo(&a.out, &rows)?;
    println!("wrote {} examples to {}", rows.len(), a.out.display());
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let state = RunState::load(&a.state)?;
    let rows = load_dataset(&a.input)?;
    let preds = predict(&state, &rows)?;
    write_predictions(&a.out, &preds)?;
    println!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" => 2,
        "contract" => 3,
        "numeric" => 4,
        "data" => 5,
        "objective" => 6,
        "io" => 7,
        _ => 8,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::SelectP0(a) => cmd_select(a),
        Command::MakePseudo(a) => cmd_pseudo(a),
        Command::Predict(a) => cmd_predict(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
