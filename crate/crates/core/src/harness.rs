//! Experiment harness: configuration, the optional pseudo-label warm-up
//! phase, budgeted runs, dev checkpoints, strategy comparison and the
//! output files.
//!
//! Output directory layout of a run:
//!
//! | file             | contents                                              |
//! |------------------|-------------------------------------------------------|
//! | `result.json`    | resolved config, seed, counters, metrics, best error  |
//! | `trace.csv`      | one row per iteration                                 |
//! | `run_state.json` | scheduler, head, registry and tokens for resume/predict |
//! | `vocab.txt`      | vocabulary (mock-LM tasks only)                        |
//! | `timing.json`    | wall-clock time; the only non-deterministic file       |

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::blackbox::{
    format_dataset, load_dataset, BlackBox, Example, LayerFunction, MockLmConfig, MockMaskedLM,
    ProjectedObjective, RawExample, SeparableObjective, Template, Vocab, PAD_ID,
};
use crate::ensemble::{accuracy, fuse_predict_detailed, Checkpoint, DevMetric, Registry};
use crate::error::{Error, Result};
use crate::mtl::{alternate_schedule, example_outputs, AdamConfig, BoutReport, MlpHead, MultiTaskLossConfig, TaskContext};
use crate::prompt::{compose_from_slices, make_projection, InitialPromptSet, ProjectionMatrix, PromptBlock, PromptSet};
use crate::rng::RngStream;
use crate::scheduler::{Scheduler, SchedulerConfig, StrategyKind, TestingPayload, TraceEntry};
use crate::verbalizer::{argmax, select_p0, LabelMap, LabelWords, LossConfig, LossMetric, P0SelectionConfig};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Total black-box calls (group evaluations).
    pub budget: usize,
    pub task: TaskConfig,
    pub optimizer: OptimizerConfig,
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub loss: LossSettings,
    #[serde(default)]
    pub mtl: Option<MtlSettings>,
    #[serde(default)]
    pub ensemble: EnsembleSettings,
    #[serde(default)]
    pub curriculum: Option<CurriculumConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    Separable(SeparableTask),
    MockLm(MockLmTask),
}

impl TaskConfig {
    /// Reads a file whose only table is `[task]`; relative paths are taken
    /// from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct TaskFile {
            task: TaskConfig,
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut file: TaskFile =
            toml::from_str(&text).map_err(|e| Error::config(format!("invalid task file: {e}")))?;
        if let Some(base) = path.parent() {
            file.task.resolve_paths(base);
        }
        Ok(file.task)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let TaskConfig::MockLm(t) = self {
            for p in [&mut t.label_map, &mut t.train, &mut t.dev, &mut t.test, &mut t.vocab] {
                resolve(p, base);
            }
        }
    }
}

fn resolve(p: &mut Option<PathBuf>, base: &Path) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparableTask {
    pub layers: usize,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_function")]
    pub function: LayerFunction,
    /// Planted intrinsic optima are drawn from `N(0, optimum_scale^2)`.
    #[serde(default = "one")]
    pub optimum_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockLmTask {
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    pub layers: usize,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    #[serde(default = "one")]
    pub weight_scale: f64,
    #[serde(default = "one")]
    pub embed_scale: f64,
    /// `single`, `pair`, `masked_text`, or a literal template.
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default)]
    pub label_map: Option<PathBuf>,
    /// Inline alternative to `label_map`, e.g. `["bad/awful", "great/good"]`.
    #[serde(default)]
    pub label_words: Option<Vec<String>>,
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticData>,
    #[serde(default)]
    pub p0: P0Source,
    #[serde(default = "default_pool_multiplier")]
    pub p0_pool_multiplier: usize,
    #[serde(default = "one")]
    pub p0_missing_prob: f64,
}

/// Generated two-class data used instead of dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub train: usize,
    #[serde(default)]
    pub dev: usize,
    #[serde(default)]
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum P0Source {
    /// Coverage-based selection over the training examples.
    #[default]
    Select,
    /// All-PAD prompt tokens.
    Pad,
    Tokens(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub dim: usize,
    pub population: usize,
    pub sigma0: f64,
    #[serde(default = "one")]
    pub projection_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub name: StrategyKind,
    #[serde(default)]
    pub n_unstable: Option<usize>,
    #[serde(default)]
    pub n_testing: Option<usize>,
    #[serde(default)]
    pub n_stable: Option<usize>,
    #[serde(default)]
    pub testing_payload: TestingPayload,
}

impl StrategyConfig {
    pub fn named(name: StrategyKind) -> Self {
        Self {
            name,
            n_unstable: None,
            n_testing: None,
            n_stable: None,
            testing_payload: TestingPayload::default(),
        }
    }

    fn counts(&self, layers: usize) -> Result<Option<(usize, usize, usize)>> {
        match (self.n_unstable, self.n_testing, self.n_stable) {
            (None, None, None) => Ok(None),
            (Some(u), Some(t), Some(s)) => Ok(Some((u, t, s))),
            _ => Err(Error::config(format!(
                "give all three of n_unstable/n_testing/n_stable or none (L = {layers})"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSettings {
    #[serde(default)]
    pub metric: LossMetric,
    #[serde(default = "one")]
    pub margin: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            metric: LossMetric::CrossEntropy,
            margin: 1.0,
        }
    }
}

impl LossSettings {
    fn loss_config(&self) -> LossConfig {
        LossConfig {
            metric: self.metric,
            margin: self.margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtlSettings {
    #[serde(default = "one")]
    pub lambda1: f64,
    #[serde(default = "one")]
    pub lambda2: f64,
    /// Iterations between head bouts; omit to never train the head.
    #[serde(default = "default_period")]
    pub update_period: Option<usize>,
    #[serde(default = "default_head_epochs")]
    pub head_epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "yes")]
    pub sigmoid: bool,
}

impl Default for MtlSettings {
    fn default() -> Self {
        let d = MultiTaskLossConfig::default();
        Self {
            lambda1: d.lambda1,
            lambda2: d.lambda2,
            update_period: d.update_period,
            head_epochs: d.head_epochs,
            lr: d.adam.lr,
            beta1: d.adam.beta1,
            beta2: d.adam.beta2,
            eps: d.adam.eps,
            sigmoid: d.sigmoid,
        }
    }
}

impl MtlSettings {
    pub fn to_config(&self) -> MultiTaskLossConfig {
        MultiTaskLossConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            update_period: self.update_period,
            head_epochs: self.head_epochs,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            sigmoid: self.sigmoid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSettings {
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    /// Iterations between dev evaluations.
    #[serde(default = "default_dev_interval")]
    pub dev_interval: usize,
    #[serde(default)]
    pub dev_metric: DevMetric,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        Self {
            capacity: default_capacity(),
            dev_interval: default_dev_interval(),
            dev_metric: DevMetric::default(),
        }
    }
}

/// Warm-up on pseudo-labelled text before the task data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    /// Corpus file, one text per line. Without it a synthetic corpus is used.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_corpus_lines")]
    pub synthetic_lines: usize,
    pub n_fake: usize,
    /// Phase-one length in iterations (`b_fake * m` black-box calls).
    pub b_fake: usize,
}

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_prompt_len() -> usize {
    5
}
fn default_width() -> usize {
    32
}
fn default_vocab_size() -> usize {
    500
}
fn default_function() -> LayerFunction {
    LayerFunction::Sphere
}
fn default_template() -> String {
    "single".into()
}
fn default_pool_multiplier() -> usize {
    100
}
fn default_period() -> Option<usize> {
    Some(100)
}
fn default_head_epochs() -> usize {
    200
}
fn default_lr() -> f64 {
    1e-2
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_capacity() -> usize {
    3
}
fn default_dev_interval() -> usize {
    20
}
fn default_corpus_lines() -> usize {
    2000
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    /// Loads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        self.task.resolve_paths(base);
        if let Some(c) = &mut self.curriculum {
            resolve(&mut c.corpus, base);
        }
    }

    pub fn layers(&self) -> usize {
        match &self.task {
            TaskConfig::Separable(t) => t.layers,
            TaskConfig::MockLm(t) => t.layers,
        }
    }

    pub fn scheduler_config(&self) -> Result<SchedulerConfig> {
        let layers = self.layers();
        let mut cfg = SchedulerConfig::new(
            layers,
            self.optimizer.dim,
            self.optimizer.population,
            self.optimizer.sigma0,
            self.strategy.name,
        );
        cfg.counts = self.strategy.counts(layers)?;
        cfg.testing_payload = self.strategy.testing_payload;
        Ok(cfg)
    }

    /// Checks every cross-field constraint before anything is built.
    pub fn validate(&self) -> Result<()> {
        self.scheduler_config()?.validate()?;
        if self.budget < self.optimizer.population {
            return Err(Error::config(format!(
                "budget {} is smaller than the population {}",
                self.budget, self.optimizer.population
            )));
        }
        if !(self.optimizer.projection_scale.is_finite() && self.optimizer.projection_scale > 0.0) {
            return Err(Error::config("projection_scale must be positive"));
        }
        if !(self.loss.margin.is_finite() && self.loss.margin >= 0.0) {
            return Err(Error::config("hinge margin must be non-negative"));
        }
        if self.ensemble.capacity == 0 || self.ensemble.dev_interval == 0 {
            return Err(Error::config("ensemble capacity and dev_interval must be positive"));
        }
        match &self.task {
            TaskConfig::Separable(t) => {
                if t.prompt_len == 0 || t.width == 0 {
                    return Err(Error::config("separable task needs positive prompt_len and width"));
                }
                if self.mtl.is_some() || self.curriculum.is_some() {
                    return Err(Error::config("mtl and curriculum apply to mock_lm tasks only"));
                }
            }
            TaskConfig::MockLm(t) => {
                if t.vocab_size < 3 || t.width == 0 || t.prompt_len == 0 {
                    return Err(Error::config("mock LM needs V >= 3 and positive width, prompt_len"));
                }
                if t.label_map.is_some() == t.label_words.is_some() {
                    return Err(Error::config("give exactly one of label_map or label_words"));
                }
                if t.train.is_some() == t.synthetic.is_some() {
                    return Err(Error::config("give exactly one of train or synthetic"));
                }
                if let Some(s) = &t.synthetic {
                    if s.train == 0 {
                        return Err(Error::config("synthetic.train must be positive"));
                    }
                }
                if let P0Source::Tokens(tokens) = &t.p0 {
                    if tokens.len() != t.prompt_len {
                        return Err(Error::config(format!(
                            "p0 lists {} tokens but prompt_len is {}",
                            tokens.len(),
                            t.prompt_len
                        )));
                    }
                }
                Template::parse(&t.template)?;
                if let Some(m) = &self.mtl {
                    m.to_config().validate()?;
                }
                if let Some(c) = &self.curriculum {
                    if c.b_fake.saturating_mul(self.optimizer.population) > self.budget {
                        log::warn!("curriculum phase is capped by the total budget");
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic data

const POSITIVE_CUES: [&str; 8] = ["superb", "lovely", "fun", "brilliant", "charming", "moving", "clever", "delightful"];
const NEGATIVE_CUES: [&str; 8] = ["dull", "boring", "poor", "weak", "clumsy", "tedious", "messy", "bland"];
const NEUTRAL: [&str; 24] = [
    "the", "film", "movie", "story", "cast", "plot", "was", "is", "really", "quite", "a", "an", "with", "and",
    "script", "scenes", "ending", "music", "actors", "director", "this", "very", "overall", "mostly",
];
const SYNTHETIC_LABEL_WORDS: [&str; 2] = ["bad/awful", "great/good"];

pub fn synthetic_label_words() -> LabelWords {
    LabelWords::parse(
        &SYNTHETIC_LABEL_WORDS
            .iter()
            .enumerate()
            .map(|(i, w)| format!("{i}: {w}\n"))
            .collect::<String>(),
    )
    .expect("static label words parse")
}

/// Balanced two-class sentiment-like examples: a few cue words of the class
/// mixed into neutral filler.
pub fn synthetic_examples(n: usize, rng: &mut RngStream) -> Vec<RawExample> {
    (0..n)
        .map(|i| {
            let label = i % 2;
            let cues: &[&str] = if label == 1 { &POSITIVE_CUES } else { &NEGATIVE_CUES };
            let len = 5 + rng.below(4);
            let mut words: Vec<&str> = (0..len - 2).map(|_| NEUTRAL[rng.below(NEUTRAL.len())]).collect();
            words.push(cues[rng.below(cues.len())]);
            words.push(cues[rng.below(cues.len())]);
            rng.shuffle(&mut words);
            RawExample {
                label,
                text1: words.join(" "),
                text2: None,
            }
        })
        .collect()
}

/// Corpus lines for the warm-up phase; roughly half carry a label word.
pub fn synthetic_corpus(lines: usize, words: &LabelWords, rng: &mut RngStream) -> Vec<String> {
    let label_words = words.all_words();
    (0..lines)
        .map(|_| {
            let len = 4 + rng.below(5);
            let mut ws: Vec<String> = (0..len).map(|_| NEUTRAL[rng.below(NEUTRAL.len())].to_string()).collect();
            if rng.uniform() < 0.5 {
                let at = rng.below(ws.len());
                ws[at] = label_words[rng.below(label_words.len())].clone();
            }
            ws.join(" ")
        })
        .collect()
}

/// Masks every label-word occurrence in the corpus: each occurrence yields
/// one example labelled with the word's class. At most `n_fake` examples are
/// kept, in an order fixed by `rng`.
pub fn make_pseudo_labeled(lines: &[String], words: &LabelWords, n_fake: usize, rng: &mut RngStream) -> Vec<RawExample> {
    let mut out = Vec::new();
    for line in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        for (i, tok) in tokens.iter().enumerate() {
            let bare = tok
                .to_lowercase()
                .trim_end_matches(['.', ',', '!', '?', ';', ':'])
                .to_string();
            if let Some(class) = words.class_of(&bare) {
                let mut masked: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
                let suffix = &tok[tok.to_lowercase().trim_end_matches(['.', ',', '!', '?', ';', ':']).len()..];
                masked[i] = format!("<mask>{}", if suffix.is_empty() { String::new() } else { format!(" {suffix}") });
                out.push(RawExample {
                    label: class,
                    text1: masked.join(" "),
                    text2: None,
                });
            }
        }
    }
    if out.is_empty() {
        log::warn!("no label-word occurrences found; pseudo-labelled set is empty");
    }
    rng.shuffle(&mut out);
    out.truncate(n_fake);
    out
}

// ---------------------------------------------------------------------------
// Results

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: RunConfig,
    pub seed: u64,
    pub strategy: StrategyKind,
    pub best_error: f64,
    pub first_iteration_best: f64,
    pub trace: Vec<TraceEntry>,
    pub tell_counts: Vec<usize>,
    pub calls: u64,
    pub consumed: usize,
    pub iterations: usize,
    pub curriculum_calls: u64,
    pub head_bouts: Vec<BoutReport>,
    pub metrics: Option<TaskMetrics>,
    #[serde(skip)]
    pub wall_seconds: f64,
    #[serde(skip)]
    pub registry: Option<Registry>,
}

/// Accuracy/metric summary for mock-LM tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub train_loss_first: f64,
    pub train_loss_final: f64,
    pub ensemble_train_accuracy: f64,
    pub member_train_accuracy: Vec<f64>,
    pub best_prompt_train_accuracy: f64,
    pub dev_metric: Option<f64>,
    pub test_metric: Option<f64>,
}

/// Everything needed to resume a run or predict with its ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config: RunConfig,
    pub scheduler: Scheduler,
    pub head: Option<MlpHead>,
    pub registry: Option<Registry>,
    pub p0_tokens: Vec<u32>,
    pub vocab: Option<Vec<String>>,
    pub curriculum_calls: u64,
    pub head_bouts: Vec<BoutReport>,
    pub offered: Vec<(usize, u64)>,
    pub first_iteration_best: Option<f64>,
}

impl RunState {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_trace(path: &Path, trace: &[TraceEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    for t in trace {
        w.serialize(t).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Task assembly

/// Frozen pieces shared by the optimizers of one run.
pub struct SeparableSetup {
    pub projections: Vec<ProjectionMatrix>,
    pub initial: InitialPromptSet,
    pub objective: SeparableObjective,
}

pub fn build_separable(task: &SeparableTask, opt: &OptimizerConfig, seed: u64) -> Result<SeparableSetup> {
    let root = RngStream::new(seed, "separable");
    let projections = build_projections(task.layers, opt, task.prompt_len, task.width, &root)?;
    let mut base_rng = root.fork("initial");
    let blocks = (0..task.layers)
        .map(|i| PromptBlock::new(i, task.prompt_len, task.width, base_rng.normal_vec(task.prompt_len * task.width)))
        .collect::<Result<Vec<_>>>()?;
    let initial = InitialPromptSet::new(blocks, vec![PAD_ID; task.prompt_len])?;
    let mut opt_rng = root.fork("optima");
    let planted: Vec<Vec<f64>> = (0..task.layers)
        .map(|_| opt_rng.normal_vec(opt.dim).into_iter().map(|v| v * task.optimum_scale).collect())
        .collect();
    let optima = compose_from_slices(&planted, &projections, &initial)?;
    let objective = SeparableObjective::new(optima.blocks().to_vec(), vec![task.function; task.layers])?;
    Ok(SeparableSetup {
        projections,
        initial,
        objective,
    })
}

fn build_projections(
    layers: usize,
    opt: &OptimizerConfig,
    prompt_len: usize,
    width: usize,
    root: &RngStream,
) -> Result<Vec<ProjectionMatrix>> {
    (0..layers)
        .map(|i| {
            let mut r = root.fork(&format!("projection-{i}"));
            make_projection(i, opt.dim, prompt_len, width, opt.projection_scale, &mut r)
        })
        .collect()
}

/// Tokenized data, vocabulary, model and label map of a mock-LM task.
pub struct MockLmSetup {
    pub vocab: Vocab,
    pub words: LabelWords,
    pub map: LabelMap,
    pub template: Template,
    pub model: MockMaskedLM,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub raw_test: Vec<RawExample>,
    pub projections: Vec<ProjectionMatrix>,
}

fn load_label_words(task: &MockLmTask) -> Result<LabelWords> {
    match (&task.label_map, &task.label_words) {
        (Some(path), None) => LabelWords::load(path),
        (None, Some(lines)) => LabelWords::parse(
            &lines
                .iter()
                .enumerate()
                .map(|(i, w)| format!("{i}: {w}\n"))
                .collect::<String>(),
        ),
        _ => Err(Error::config("give exactly one of label_map or label_words")),
    }
}

pub fn build_mock_lm(cfg: &RunConfig, vocab_override: Option<Vec<String>>) -> Result<MockLmSetup> {
    let TaskConfig::MockLm(task) = &cfg.task else {
        return Err(Error::config("not a mock_lm task"));
    };
    let words = load_label_words(task)?;
    let template = Template::parse(&task.template)?;
    let root = RngStream::new(cfg.seed, "mock-task");

    let (train_raw, dev_raw, test_raw) = match (&task.train, &task.synthetic) {
        (Some(train), None) => (
            load_dataset(train)?,
            task.dev.as_deref().map(load_dataset).transpose()?.unwrap_or_default(),
            task.test.as_deref().map(load_dataset).transpose()?.unwrap_or_default(),
        ),
        (None, Some(s)) => {
            let mut r = root.fork("synthetic");
            (
                synthetic_examples(s.train, &mut r),
                synthetic_examples(s.dev, &mut r),
                synthetic_examples(s.test, &mut r),
            )
        }
        _ => return Err(Error::config("give exactly one of train or synthetic")),
    };
    if train_raw.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }

    let vocab = match (vocab_override, &task.vocab) {
        (Some(tokens), _) => Vocab::from_tokens(tokens)?,
        (None, Some(path)) => Vocab::load(path)?,
        (None, None) => {
            let mut required = template.literal_words();
            required.extend(words.all_words());
            let corpus: Vec<&str> = train_raw
                .iter()
                .chain(&dev_raw)
                .chain(&test_raw)
                .flat_map(|r| std::iter::once(r.text1.as_str()).chain(r.text2.as_deref()))
                .collect();
            Vocab::build(corpus, &required, task.vocab_size)?
        }
    };
    if vocab.len() > task.vocab_size {
        return Err(Error::config(format!(
            "vocabulary has {} tokens but vocab_size is {}",
            vocab.len(),
            task.vocab_size
        )));
    }
    let map = words.resolve(&vocab)?;
    let classes = map.classes();
    let tokenize = |rows: &[RawExample]| -> Result<Vec<Example>> {
        rows.iter()
            .map(|r| {
                if r.label >= classes {
                    return Err(Error::Data(format!("label {} but only {classes} classes", r.label)));
                }
                template.tokenize(&r.text1, r.text2.as_deref(), &vocab, r.label)
            })
            .collect()
    };
    let train = tokenize(&train_raw)?;
    let dev = tokenize(&dev_raw)?;
    let test = tokenize(&test_raw)?;

    let model = MockMaskedLM::new(MockLmConfig {
        vocab_size: task.vocab_size,
        width: task.width,
        layers: task.layers,
        prompt_len: task.prompt_len,
        seed: cfg.seed,
        weight_scale: task.weight_scale,
        embed_scale: task.embed_scale,
    })?;
    let projections = build_projections(task.layers, &cfg.optimizer, task.prompt_len, task.width, &root)?;
    Ok(MockLmSetup {
        vocab,
        words,
        map,
        template,
        model,
        train,
        dev,
        test,
        raw_test: test_raw,
        projections,
    })
}

pub fn choose_p0(task: &MockLmTask, setup: &MockLmSetup) -> Result<Vec<u32>> {
    match &task.p0 {
        P0Source::Select => select_p0(
            &setup.model,
            &setup.train,
            &P0SelectionConfig {
                prompt_len: task.prompt_len,
                pool_multiplier: task.p0_pool_multiplier,
                missing_prob: task.p0_missing_prob,
            },
        ),
        P0Source::Pad => Ok(vec![PAD_ID; task.prompt_len]),
        P0Source::Tokens(tokens) => tokens
            .iter()
            .map(|t| {
                setup
                    .vocab
                    .lookup(&t.to_lowercase())
                    .ok_or_else(|| Error::config(format!("p0 token {t:?} not in vocabulary")))
            })
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Running

/// Options that are not part of the reproducible config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub resume: Option<RunState>,
}

pub fn run_experiment(cfg: &RunConfig, opts: &RunOptions) -> Result<ExperimentResult> {
    cfg.validate()?;
    let started = Instant::now();
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut result = match &cfg.task {
        TaskConfig::Separable(task) => run_separable(cfg, task, opts)?,
        TaskConfig::MockLm(task) => run_mock_lm(cfg, task, opts)?,
    };
    result.wall_seconds = started.elapsed().as_secs_f64();
    if let Some(dir) = &opts.out_dir {
        write_json(&dir.join("result.json"), &result)?;
        write_trace(&dir.join("trace.csv"), &result.trace)?;
        write_json(
            &dir.join("timing.json"),
            &serde_json::json!({ "wall_seconds": result.wall_seconds }),
        )?;
    }
    Ok(result)
}

fn new_or_resumed_scheduler(cfg: &RunConfig, opts: &RunOptions) -> Result<Scheduler> {
    match &opts.resume {
        Some(state) => {
            if state.config.task != cfg.task || state.config.seed != cfg.seed {
                return Err(Error::config("resume state was produced by a different task or seed"));
            }
            Ok(state.scheduler.clone())
        }
        None => Scheduler::new(cfg.scheduler_config()?, &RngStream::new(cfg.seed, "run")),
    }
}

fn run_separable(cfg: &RunConfig, task: &SeparableTask, opts: &RunOptions) -> Result<ExperimentResult> {
    let setup = build_separable(task, &cfg.optimizer, cfg.seed)?;
    let mut sched = new_or_resumed_scheduler(cfg, opts)?;
    let blackbox = BlackBox::new(setup.objective.clone());
    let objective = ProjectedObjective {
        projections: &setup.projections,
        initial: &setup.initial,
        blackbox: &blackbox,
    };
    let prior_calls = sched.budget().consumed as u64;
    let run = sched.run(&objective, cfg.budget)?;
    let state = RunState {
        config: cfg.clone(),
        scheduler: sched.clone(),
        head: None,
        registry: None,
        p0_tokens: setup.initial.source_tokens().to_vec(),
        vocab: None,
        curriculum_calls: 0,
        head_bouts: Vec::new(),
        offered: Vec::new(),
        first_iteration_best: run.trace.first().map(|t| t.iteration_best),
    };
    if let Some(dir) = &opts.out_dir {
        state.save(&dir.join("run_state.json"))?;
    }
    Ok(ExperimentResult {
        config: cfg.clone(),
        seed: cfg.seed,
        strategy: run.strategy,
        best_error: run.best_error,
        first_iteration_best: state.first_iteration_best.unwrap_or(f64::NAN),
        trace: run.trace,
        tell_counts: run.tell_counts,
        calls: prior_calls + blackbox.calls(),
        consumed: run.consumed,
        iterations: run.iterations,
        curriculum_calls: 0,
        head_bouts: Vec::new(),
        metrics: None,
        wall_seconds: 0.0,
        registry: None,
    })
}

/// Class distribution helpers over a prompt set.
fn verbalizer_predictions(setup: &MockLmSetup, prompts: &PromptSet, examples: &[Example]) -> Result<Vec<usize>> {
    Ok(example_outputs(&setup.model, prompts, examples, &setup.map)?
        .iter()
        .map(|o| argmax(&o.label_scores))
        .collect())
}

fn head_predictions(setup: &MockLmSetup, prompts: &PromptSet, head: &MlpHead, examples: &[Example]) -> Result<Vec<usize>> {
    example_outputs(&setup.model, prompts, examples, &setup.map)?
        .iter()
        .map(|o| head.forward(&o.last4_hidden).map(|s| argmax(&s)))
        .collect()
}

fn golds(examples: &[Example]) -> Vec<usize> {
    examples.iter().map(|e| e.label).collect()
}

fn run_mock_lm(cfg: &RunConfig, task: &MockLmTask, opts: &RunOptions) -> Result<ExperimentResult> {
    let resume = opts.resume.as_ref();
    let setup = build_mock_lm(cfg, resume.and_then(|s| s.vocab.clone()))?;
    let p0_tokens = match resume {
        Some(s) => s.p0_tokens.clone(),
        None => choose_p0(task, &setup)?,
    };
    let initial = setup.model.initial_prompts(&p0_tokens)?;
    let mut sched = new_or_resumed_scheduler(cfg, opts)?;

    let mtl_enabled = cfg.mtl.is_some();
    let mtl = match &cfg.mtl {
        Some(m) => m.to_config(),
        None => MultiTaskLossConfig {
            lambda2: 0.0,
            update_period: None,
            ..MultiTaskLossConfig::default()
        },
    };
    let input_width = 4 * task.width;
    let mut head = match resume.and_then(|s| s.head.clone()) {
        Some(h) => h,
        None => MlpHead::new(setup.map.classes(), input_width, mtl.sigmoid)?,
    };
    let mut registry = match resume.and_then(|s| s.registry.clone()) {
        Some(r) => r,
        None => Registry::new(cfg.ensemble.capacity)?,
    };
    let mut offered: Vec<(usize, u64)> = resume.map(|s| s.offered.clone()).unwrap_or_default();
    let mut head_bouts = resume.map(|s| s.head_bouts.clone()).unwrap_or_default();
    let mut curriculum_calls = resume.map(|s| s.curriculum_calls).unwrap_or(0);
    let loss = cfg.loss.loss_config();
    let m = cfg.optimizer.population;

    // Warm-up on pseudo-labelled text.
    if let (Some(cur), None) = (&cfg.curriculum, resume) {
        let mut r = RngStream::new(cfg.seed, "curriculum");
        let lines = match &cur.corpus {
            Some(path) => std::fs::read_to_string(path)
                .map_err(|e| Error::io(path, e))?
                .lines()
                .map(str::to_string)
                .collect(),
            None => synthetic_corpus(cur.synthetic_lines, &setup.words, &mut r),
        };
        let pseudo = make_pseudo_labeled(&lines, &setup.words, cur.n_fake, &mut r);
        let masked = Template::parse("masked_text")?;
        let examples = pseudo
            .iter()
            .map(|p| masked.tokenize(&p.text1, None, &setup.vocab, p.label))
            .collect::<Result<Vec<_>>>()?;
        let phase_budget = cur.b_fake.saturating_mul(m).min(cfg.budget);
        if !examples.is_empty() && phase_budget >= m {
            let ctx = TaskContext {
                model: &setup.model,
                examples: &examples,
                map: &setup.map,
                loss,
                projections: &setup.projections,
                initial: &initial,
            };
            let warm = MultiTaskLossConfig {
                lambda2: 0.0,
                update_period: None,
                lambda1: 1.0,
                ..mtl.clone()
            };
            sched.set_budget(phase_budget)?;
            let report = alternate_schedule(&mut sched, &mut head, &ctx, &warm, |_, _| Ok(()))?;
            curriculum_calls = report.calls;
        }
    }

    let ctx = TaskContext {
        model: &setup.model,
        examples: &setup.train,
        map: &setup.map,
        loss,
        projections: &setup.projections,
        initial: &initial,
    };
    let dev_examples: &[Example] = if setup.dev.is_empty() { &setup.train } else { &setup.dev };
    let dev_golds = golds(dev_examples);
    let classes = setup.map.classes();
    let dev_metric = cfg.ensemble.dev_metric;
    let interval = cfg.ensemble.dev_interval;
    let out_dir = opts.out_dir.clone();
    let vocab_tokens = setup.vocab.tokens().to_vec();
    let mut first_best = resume.and_then(|s| s.first_iteration_best);

    sched.set_budget(cfg.budget)?;
    let total_budget = cfg.budget;
    let mut checkpoint = |sched: &Scheduler, head: &MlpHead| -> Result<()> {
        if first_best.is_none() {
            first_best = sched.trace().last().map(|t| t.iteration_best);
        }
        let last = sched.budget().consumed + m > total_budget;
        if sched.iteration() % interval != 0 && !last {
            return Ok(());
        }
        let Some((group, _)) = sched.best() else { return Ok(()) };
        // key: the iteration that produced the current best group
        let best_origin = sched
            .trace()
            .iter()
            .rev()
            .find(|t| t.iteration_best == t.best_so_far)
            .map(|t| t.iteration)
            .unwrap_or(0);
        let prompts = compose_from_slices(group, &setup.projections, &initial)?;
        if !offered.contains(&(best_origin, u64::MAX)) {
            offered.push((best_origin, u64::MAX));
            let preds = verbalizer_predictions(&setup, &prompts, dev_examples)?;
            let score = dev_metric.score(&preds, &dev_golds, classes);
            registry.offer(Checkpoint::verbalizer(prompts.clone(), score, sched.iteration())?);
        }
        if mtl_enabled && head.version() > 0 && !offered.contains(&(best_origin, head.version())) {
            offered.push((best_origin, head.version()));
            let preds = head_predictions(&setup, &prompts, head, dev_examples)?;
            let score = dev_metric.score(&preds, &dev_golds, classes);
            registry.offer(Checkpoint::head(prompts, head.clone(), score, sched.iteration())?);
        }
        if let Some(dir) = &out_dir {
            RunState {
                config: cfg.clone(),
                scheduler: sched.clone(),
                head: Some(head.clone()),
                registry: Some(registry.clone()),
                p0_tokens: p0_tokens.clone(),
                vocab: Some(vocab_tokens.clone()),
                curriculum_calls,
                head_bouts: head_bouts.clone(),
                offered: offered.clone(),
                first_iteration_best: first_best,
            }
            .save(&dir.join("run_state.json"))?;
        }
        Ok(())
    };
    let report = alternate_schedule(&mut sched, &mut head, &ctx, &mtl, |s, h| checkpoint(s, h))?;
    drop(checkpoint);
    head_bouts.extend(report.bouts.iter().copied());

    let run = sched.result();
    let (best_group, _) = sched.best().ok_or_else(|| Error::contract("no iterations were run"))?;
    let best_prompts = compose_from_slices(best_group, &setup.projections, &initial)?;
    let train_golds = golds(&setup.train);
    let best_prompt_train_accuracy = accuracy(&verbalizer_predictions(&setup, &best_prompts, &setup.train)?, &train_golds);

    let mut member_train_accuracy = Vec::new();
    for c in registry.members() {
        let preds = setup
            .train
            .iter()
            .map(|ex| c.probabilities(&setup.model, &setup.map, ex).map(|p| argmax(&p)))
            .collect::<Result<Vec<_>>>()?;
        member_train_accuracy.push(accuracy(&preds, &train_golds));
    }
    let fused = |examples: &[Example]| -> Result<Vec<usize>> {
        examples
            .iter()
            .map(|ex| fuse_predict_detailed(&registry, ex, &setup.model, &setup.map).map(|p| p.label))
            .collect()
    };
    let ensemble_train_accuracy = accuracy(&fused(&setup.train)?, &train_golds);
    let dev_score = if setup.dev.is_empty() {
        None
    } else {
        Some(dev_metric.score(&fused(&setup.dev)?, &golds(&setup.dev), classes))
    };
    let test_score = if setup.test.is_empty() {
        None
    } else {
        Some(dev_metric.score(&fused(&setup.test)?, &golds(&setup.test), classes))
    };

    let first = first_best.unwrap_or(f64::NAN);
    let metrics = TaskMetrics {
        train_loss_first: first,
        train_loss_final: run.best_error,
        ensemble_train_accuracy,
        member_train_accuracy,
        best_prompt_train_accuracy,
        dev_metric: dev_score,
        test_metric: test_score,
    };

    let state = RunState {
        config: cfg.clone(),
        scheduler: sched.clone(),
        head: Some(head.clone()),
        registry: Some(registry.clone()),
        p0_tokens: p0_tokens.clone(),
        vocab: Some(setup.vocab.tokens().to_vec()),
        curriculum_calls,
        head_bouts: head_bouts.clone(),
        offered,
        first_iteration_best: first_best,
    };
    if let Some(dir) = &opts.out_dir {
        state.save(&dir.join("run_state.json"))?;
        setup.vocab.save(&dir.join("vocab.txt"))?;
    }
    Ok(ExperimentResult {
        config: cfg.clone(),
        seed: cfg.seed,
        strategy: run.strategy,
        best_error: run.best_error,
        first_iteration_best: first,
        trace: run.trace,
        tell_counts: run.tell_counts,
        calls: run.consumed as u64,
        consumed: run.consumed,
        iterations: run.iterations,
        curriculum_calls,
        head_bouts,
        metrics: Some(metrics),
        wall_seconds: 0.0,
        registry: Some(registry),
    })
}

// ---------------------------------------------------------------------------
// Prediction

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub id: usize,
    pub label: usize,
    pub members: Vec<Vec<f64>>,
}

/// Fused predictions of a finished run's registry over a dataset file.
pub fn predict(state: &RunState, test_rows: &[RawExample]) -> Result<Vec<PredictionRow>> {
    let registry = state
        .registry
        .as_ref()
        .ok_or_else(|| Error::config("run state has no checkpoint registry (separable task?)"))?;
    let setup = build_mock_lm(&state.config, state.vocab.clone())?;
    test_rows
        .iter()
        .enumerate()
        .map(|(id, row)| {
            let ex = setup
                .template
                .tokenize(&row.text1, row.text2.as_deref(), &setup.vocab, row.label.min(setup.map.classes() - 1))?;
            let p = fuse_predict_detailed(registry, &ex, &setup.model, &setup.map)?;
            Ok(PredictionRow {
                id,
                label: p.label,
                members: p.members,
            })
        })
        .collect()
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    let members = rows.first().map(|r| r.members.len()).unwrap_or(0);
    let mut header = vec!["id".to_string(), "fused_label".to_string()];
    header.extend((0..members).map(|i| format!("member_{i}")));
    w.write_record(&header).map_err(|e| Error::Serde(e.to_string()))?;
    for r in rows {
        let mut rec = vec![r.id.to_string(), r.label.to_string()];
        rec.extend(r.members.iter().map(|p| {
            p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("|")
        }));
        w.write_record(&rec).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Strategy comparison

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: String,
    /// Seed, or `median` for the per-strategy summary row.
    pub seed: String,
    pub best_error: f64,
    pub total_tells: f64,
    pub mean_tells_per_slot: f64,
    pub calls: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// `(strategy, seed, wall seconds)`.
    pub timings: Vec<(StrategyKind, u64, f64)>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Runs each strategy on the same task, budget and seeds. Rows are
/// `strategies x seeds` followed by one median row per strategy.
pub fn compare_strategies(cfg: &RunConfig, strategies: &[StrategyKind], seeds: &[u64]) -> Result<Comparison> {
    if strategies.len() < 2 {
        return Err(Error::config("comparison needs at least two strategies"));
    }
    if seeds.is_empty() {
        return Err(Error::config("comparison needs at least one seed"));
    }
    let mut rows = Vec::new();
    let mut medians = Vec::new();
    let mut timings = Vec::new();
    let mut calls_seen: Option<u64> = None;
    for &kind in strategies {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            c.strategy.name = kind;
            if kind != StrategyKind::Rolling {
                c.strategy.n_unstable = None;
                c.strategy.n_testing = None;
                c.strategy.n_stable = None;
            }
            let r = run_experiment(&c, &RunOptions::default())?;
            let calls = r.calls + r.curriculum_calls;
            match calls_seen {
                None => calls_seen = Some(calls),
                Some(prev) if prev != calls => {
                    return Err(Error::Invariant(format!(
                        "call counts differ across strategies: {prev} vs {calls} ({kind})"
                    )))
                }
                _ => {}
            }
            let total: usize = r.tell_counts.iter().sum();
            timings.push((kind, seed, r.wall_seconds));
            per_seed.push(ComparisonRow {
                strategy: kind.name().into(),
                seed: seed.to_string(),
                best_error: r.best_error,
                total_tells: total as f64,
                mean_tells_per_slot: total as f64 / r.tell_counts.len() as f64,
                calls: calls as f64,
            });
        }
        let col = |f: fn(&ComparisonRow) -> f64| median(&mut per_seed.iter().map(f).collect::<Vec<_>>());
        medians.push(ComparisonRow {
            strategy: kind.name().into(),
            seed: "median".into(),
            best_error: col(|r| r.best_error),
            total_tells: col(|r| r.total_tells),
            mean_tells_per_slot: col(|r| r.mean_tells_per_slot),
            calls: col(|r| r.calls),
        });
        rows.extend(per_seed);
    }
    rows.extend(medians);
    Ok(Comparison { rows, timings })
}

pub fn write_comparison(dir: &Path, cmp: &Comparison) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Serde(e.to_string()))?;
    for r in &cmp.rows {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let tpath = dir.join("comparison_timing.csv");
    let mut t = csv::Writer::from_path(&tpath).map_err(|e| Error::Serde(e.to_string()))?;
    t.write_record(["strategy", "seed", "wall_seconds"]).map_err(|e| Error::Serde(e.to_string()))?;
    for (k, s, secs) in &cmp.timings {
        t.write_record([k.name().to_string(), s.to_string(), secs.to_string()])
            .map_err(|e| Error::Serde(e.to_string()))?;
    }
    t.flush().map_err(|e| Error::io(&tpath, e))
}

/// Writes a pseudo-labelled dataset file (`label<TAB>masked text`).
pub fn write_pseudo(path: &Path, rows: &[RawExample]) -> Result<()> {
    std::fs::write(path, format_dataset(rows)).map_err(|e| Error::io(path, e))
}
