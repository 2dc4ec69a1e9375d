//! Multi-task loss: a one-layer sigmoid classifier over the concatenated
//! last-four-layer mask states, trained with Adam between derivative-free
//! prompt iterations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackbox::{BlackBox, Example, MockMaskedLM, ProjectedObjective, PromptObjective};
use crate::error::{check_len, Error, Result};
use crate::prompt::{compose_from_slices, InitialPromptSet, ProjectionMatrix, PromptSet};
use crate::scheduler::Scheduler;
use crate::verbalizer::{batch_loss, cross_entropy, label_scores_from_state, softmax, LabelMap, LossConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskLossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Prompt iterations between head bouts; `None` disables bouts.
    pub update_period: Option<usize>,
    pub head_epochs: usize,
    pub adam: AdamConfig,
    pub sigmoid: bool,
}

impl Default for MultiTaskLossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            update_period: Some(100),
            head_epochs: 200,
            adam: AdamConfig::default(),
            sigmoid: true,
        }
    }
}

impl MultiTaskLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda1 + self.lambda2 > 0.0) {
            return Err(Error::config("loss weights must be non-negative with a positive sum"));
        }
        if self.update_period == Some(0) {
            return Err(Error::config("head update period must be positive"));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::config("invalid Adam hyperparameters"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpHead {
    classes: usize,
    input_width: usize,
    /// Row-major `C x input_width`.
    weight: Vec<f64>,
    bias: Vec<f64>,
    sigmoid: bool,
    m_weight: Vec<f64>,
    v_weight: Vec<f64>,
    m_bias: Vec<f64>,
    v_bias: Vec<f64>,
    step: u64,
    /// Number of completed training bouts.
    version: u64,
}

impl MlpHead {
    /// Zero-initialized head.
    pub fn new(classes: usize, input_width: usize, sigmoid: bool) -> Result<Self> {
        if classes == 0 || input_width == 0 {
            return Err(Error::config("head needs at least one class and one input"));
        }
        let n = classes * input_width;
        Ok(Self {
            classes,
            input_width,
            weight: vec![0.0; n],
            bias: vec![0.0; classes],
            sigmoid,
            m_weight: vec![0.0; n],
            v_weight: vec![0.0; n],
            m_bias: vec![0.0; classes],
            v_bias: vec![0.0; classes],
            step: 0,
            version: 0,
        })
    }

    pub fn with_params(mut self, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        check_len("head weight", self.classes * self.input_width, weight.len())?;
        check_len("head bias", self.classes, bias.len())?;
        self.weight = weight;
        self.bias = bias;
        Ok(self)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.input_width)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Class scores `sigmoid(W x + b)` (or `W x + b` with the sigmoid off).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("head input", self.input_width, x.len())?;
        let a = self.pre_activation(x);
        Ok(if self.sigmoid { a.into_iter().map(sigmoid).collect() } else { a })
    }

    /// Mean softmax cross-entropy of the class scores.
    pub fn loss(&self, data: &[(Vec<f64>, usize)]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Data("head loss over an empty dataset".into()));
        }
        let mut total = 0.0;
        for (x, y) in data {
            total += cross_entropy(&self.forward(x)?, *y)?;
        }
        Ok(total / data.len() as f64)
    }

    /// Analytic gradient of [`MlpHead::loss`] with respect to `(W, b)`.
    pub fn gradient(&self, data: &[(Vec<f64>, usize)]) -> Result<(Vec<f64>, Vec<f64>)> {
        if data.is_empty() {
            return Err(Error::Data("head gradient over an empty dataset".into()));
        }
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.classes];
        let n = data.len() as f64;
        for (x, y) in data {
            check_len("head input", self.input_width, x.len())?;
            if *y >= self.classes {
                return Err(Error::contract(format!("label {y} >= {} classes", self.classes)));
            }
            let a = self.pre_activation(x);
            let s: Vec<f64> = if self.sigmoid { a.iter().map(|v| sigmoid(*v)).collect() } else { a };
            let p = softmax(&s);
            for c in 0..self.classes {
                let d_score = p[c] - if c == *y { 1.0 } else { 0.0 };
                let d_pre = if self.sigmoid { d_score * s[c] * (1.0 - s[c]) } else { d_score };
                gb[c] += d_pre / n;
                let row = &mut gw[c * self.input_width..(c + 1) * self.input_width];
                for (g, v) in row.iter_mut().zip(x) {
                    *g += d_pre * v / n;
                }
            }
        }
        Ok((gw, gb))
    }

    fn adam_step(&mut self, gw: &[f64], gb: &[f64], cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        };
        update(&mut self.weight, &mut self.m_weight, &mut self.v_weight, gw);
        update(&mut self.bias, &mut self.m_bias, &mut self.v_bias, gb);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoutReport {
    pub start_loss: f64,
    pub end_loss: f64,
    pub epochs: usize,
    pub aborted: bool,
}

/// One training bout of full-batch Adam. Keeps the lowest-loss parameters
/// seen, so the returned loss never exceeds the starting loss. A non-finite
/// gradient aborts the bout and restores the pre-bout head.
pub fn train_head(head: &mut MlpHead, data: &[(Vec<f64>, usize)], cfg: &MultiTaskLossConfig) -> Result<BoutReport> {
    if data.is_empty() {
        return Err(Error::Data("head training needs at least one example".into()));
    }
    let original = head.clone();
    let start_loss = head.loss(data)?;
    let mut best = (start_loss, head.weight.clone(), head.bias.clone());
    for _ in 0..cfg.head_epochs {
        let (gw, gb) = head.gradient(data)?;
        if gw.iter().chain(&gb).any(|g| !g.is_finite()) {
            *head = original;
            return Ok(BoutReport {
                start_loss,
                end_loss: start_loss,
                epochs: 0,
                aborted: true,
            });
        }
        head.adam_step(&gw, &gb, &cfg.adam);
        let loss = head.loss(data)?;
        if loss < best.0 {
            best = (loss, head.weight.clone(), head.bias.clone());
        }
    }
    head.weight = best.1;
    head.bias = best.2;
    head.version += 1;
    Ok(BoutReport {
        start_loss,
        end_loss: best.0,
        epochs: cfg.head_epochs,
        aborted: false,
    })
}

/// Model outputs needed by the losses for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleOutput {
    pub label_scores: Vec<f64>,
    pub last4_hidden: Vec<f64>,
}

/// `lambda1 * verbalizer loss + lambda2 * mean head cross-entropy`. With no
/// head or `lambda2 == 0` the second term is skipped entirely.
pub fn total_loss(
    outputs: &[ExampleOutput],
    golds: &[usize],
    head: Option<&MlpHead>,
    verbalizer_loss: &LossConfig,
    cfg: &MultiTaskLossConfig,
) -> Result<f64> {
    let scores: Vec<Vec<f64>> = outputs.iter().map(|o| o.label_scores.clone()).collect();
    let mut total = 0.0;
    if cfg.lambda1 != 0.0 {
        total += cfg.lambda1 * batch_loss(&scores, golds, verbalizer_loss)?;
    }
    if let Some(h) = head.filter(|_| cfg.lambda2 != 0.0) {
        let mut ce = 0.0;
        for (o, &g) in outputs.iter().zip(golds) {
            ce += cross_entropy(&h.forward(&o.last4_hidden)?, g)?;
        }
        total += cfg.lambda2 * ce / outputs.len() as f64;
    }
    Ok(total)
}

/// Mock-LM task objective: the batch loss of one prompt set, with the head
/// frozen.
pub struct TaskObjective<'a> {
    pub model: &'a MockMaskedLM,
    pub examples: &'a [Example],
    pub map: &'a LabelMap,
    pub loss: LossConfig,
    pub head: Option<&'a MlpHead>,
    pub mtl: &'a MultiTaskLossConfig,
}

impl TaskObjective<'_> {
    pub fn outputs(&self, prompts: &PromptSet) -> Result<Vec<ExampleOutput>> {
        example_outputs(self.model, prompts, self.examples, self.map)
    }
}

impl PromptObjective for TaskObjective<'_> {
    fn fitness(&self, prompts: &PromptSet) -> Result<f64> {
        if self.examples.is_empty() {
            return Err(Error::Data("empty training batch".into()));
        }
        let outputs = self.outputs(prompts)?;
        let golds: Vec<usize> = self.examples.iter().map(|e| e.label).collect();
        total_loss(&outputs, &golds, self.head, &self.loss, self.mtl)
    }
}

pub fn example_outputs(
    model: &MockMaskedLM,
    prompts: &PromptSet,
    examples: &[Example],
    map: &LabelMap,
) -> Result<Vec<ExampleOutput>> {
    examples
        .iter()
        .map(|ex| {
            let st = model.mask_states(prompts, ex)?;
            Ok(ExampleOutput {
                label_scores: label_scores_from_state(model, &st.top, map),
                last4_hidden: st.last4_hidden,
            })
        })
        .collect()
}

/// Everything the alternating loop needs to turn groups into prompts and
/// prompts into losses.
pub struct TaskContext<'a> {
    pub model: &'a MockMaskedLM,
    pub examples: &'a [Example],
    pub map: &'a LabelMap,
    pub loss: LossConfig,
    pub projections: &'a [ProjectionMatrix],
    pub initial: &'a InitialPromptSet,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlternationReport {
    pub iterations: usize,
    pub calls: u64,
    pub bouts: Vec<BoutReport>,
}

/// Runs prompt iterations with the head frozen; every `update_period`
/// iterations (counted on the scheduler) the best prompts so far are frozen,
/// their mask states are computed outside the budget, and the head trains one
/// bout. `after_iteration` runs once per completed iteration (after any
/// bout), for checkpointing.
pub fn alternate_schedule<F>(
    sched: &mut Scheduler,
    head: &mut MlpHead,
    ctx: &TaskContext<'_>,
    cfg: &MultiTaskLossConfig,
    mut after_iteration: F,
) -> Result<AlternationReport>
where
    F: FnMut(&Scheduler, &MlpHead) -> Result<()>,
{
    cfg.validate()?;
    let mut report = AlternationReport::default();
    while sched.can_continue() {
        let objective = TaskObjective {
            model: ctx.model,
            examples: ctx.examples,
            map: ctx.map,
            loss: ctx.loss,
            head: Some(&*head),
            mtl: cfg,
        };
        let blackbox = BlackBox::new(objective);
        let projected = ProjectedObjective {
            projections: ctx.projections,
            initial: ctx.initial,
            blackbox: &blackbox,
        };
        sched.step(&projected)?;
        report.calls += blackbox.calls();
        report.iterations += 1;

        if let Some(period) = cfg.update_period {
            if sched.iteration() % period == 0 {
                let data = head_dataset(sched, ctx)?;
                report.bouts.push(train_head(head, &data, cfg)?);
            }
        }
        after_iteration(sched, head)?;
    }
    Ok(report)
}

/// `(last4_hidden, label)` pairs under the scheduler's best prompts. Does not
/// touch any call counter.
pub fn head_dataset(sched: &Scheduler, ctx: &TaskContext<'_>) -> Result<Vec<(Vec<f64>, usize)>> {
    let (group, _) = sched
        .best()
        .ok_or_else(|| Error::contract("no evaluated prompts yet"))?;
    let prompts = compose_from_slices(group, ctx.projections, ctx.initial)?;
    ctx.examples
        .par_iter()
        .map(|ex| {
            ctx.model
                .mask_states(&prompts, ex)
                .map(|st| (st.last4_hidden, ex.label))
        })
        .collect()
}
