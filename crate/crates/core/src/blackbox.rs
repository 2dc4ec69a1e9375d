//! Black-box objectives.
//!
//! Two deterministic stand-ins for an inference-only model: a separable
//! benchmark with planted per-layer optima, and a small masked LM that takes
//! one prompt block per layer. Every group evaluation goes through
//! [`BlackBox`], which counts calls; that count is the budget unit.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::prompt::{
    compose_from_slices, InitialPromptSet, ProjectionMatrix, PromptBlock, PromptSet,
};
use crate::rng::RngStream;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const MASK_TOKEN: &str = "<mask>";
const PROMPT_SLOT: &str = "<prompt>";

/// Anything that scores a full prompt set. Lower is better.
pub trait PromptObjective: Sync {
    fn fitness(&self, prompts: &PromptSet) -> Result<f64>;
}

/// Call-counting wrapper; one `evaluate_group` is one black-box call no matter
/// how many examples the objective scores internally.
#[derive(Debug)]
pub struct BlackBox<O> {
    inner: O,
    calls: AtomicU64,
}

impl<O: PromptObjective> BlackBox<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn evaluate_group(&self, prompts: &PromptSet) -> Result<f64> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.fitness(prompts)
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }

    pub fn into_inner(self) -> O {
        self.inner
    }
}

/// Maps a group of intrinsic vectors (one per layer, layer order) to prompts
/// and evaluates them through a [`BlackBox`].
pub struct ProjectedObjective<'a, O> {
    pub projections: &'a [ProjectionMatrix],
    pub initial: &'a InitialPromptSet,
    pub blackbox: &'a BlackBox<O>,
}

impl<O: PromptObjective> ProjectedObjective<'_, O> {
    pub fn prompts_for(&self, group: &[Vec<f64>]) -> Result<PromptSet> {
        compose_from_slices(group, self.projections, self.initial)
    }
}

impl<O: PromptObjective> crate::scheduler::GroupObjective for ProjectedObjective<'_, O> {
    fn evaluate(&self, group: &[Vec<f64>]) -> Result<f64> {
        let prompts = self.prompts_for(group)?;
        self.blackbox.evaluate_group(&prompts)
    }
}

// ---------------------------------------------------------------------------
// Separable benchmark

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerFunction {
    Sphere,
    Rosenbrock,
}

impl LayerFunction {
    /// Value at offset `x = p - p*`; zero at `x = 0` for both kinds.
    pub fn value(self, x: &[f64]) -> f64 {
        match self {
            LayerFunction::Sphere => x.iter().map(|v| v * v).sum(),
            LayerFunction::Rosenbrock => x
                .windows(2)
                .map(|w| {
                    let (a, b) = (w[0] + 1.0, w[1] + 1.0);
                    100.0 * (b - a * a).powi(2) + (1.0 - a).powi(2)
                })
                .sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparableObjective {
    optima: Vec<PromptBlock>,
    functions: Vec<LayerFunction>,
}

impl SeparableObjective {
    pub fn new(optima: Vec<PromptBlock>, functions: Vec<LayerFunction>) -> Result<Self> {
        check_len("separable layer functions", optima.len(), functions.len())?;
        PromptSet::new(optima.clone())?;
        Ok(Self { optima, functions })
    }

    pub fn optima(&self) -> &[PromptBlock] {
        &self.optima
    }
}

impl PromptObjective for SeparableObjective {
    fn fitness(&self, prompts: &PromptSet) -> Result<f64> {
        check_len("separable layers", self.optima.len(), prompts.layers())?;
        let mut total = 0.0;
        for ((block, target), f) in prompts.blocks().iter().zip(&self.optima).zip(&self.functions) {
            check_len("separable block", target.values().len(), block.values().len())?;
            let diff: Vec<f64> = block
                .values()
                .iter()
                .zip(target.values())
                .map(|(p, q)| p - q)
                .collect();
            total += f.value(&diff);
        }
        Ok(total)
    }
}

// ---------------------------------------------------------------------------
// Vocabulary, templates, examples

/// Lower-cases and splits on whitespace, detaching trailing punctuation.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        if lower == MASK_TOKEN || lower == PROMPT_SLOT || lower.starts_with('{') {
            out.push(lower);
            continue;
        }
        let trimmed = lower.trim_end_matches(['.', ',', '!', '?', ';', ':']);
        if !trimmed.is_empty() {
            out.push(trimmed.to_string());
        }
        for ch in lower[trimmed.len()..].chars() {
            out.push(ch.to_string());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3
            || tokens[PAD_ID as usize] != PAD_TOKEN
            || tokens[UNK_ID as usize] != UNK_TOKEN
            || tokens[MASK_ID as usize] != MASK_TOKEN
        {
            return Err(Error::Data(format!(
                "vocab must start with {PAD_TOKEN}, {UNK_TOKEN}, {MASK_TOKEN}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reserved ids first, then `required` words in first-seen order, then
    /// corpus words by descending frequency (ties alphabetical), up to
    /// `capacity` entries.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        required: &[String],
        capacity: usize,
    ) -> Result<Self> {
        let mut tokens = vec![
            PAD_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
            MASK_TOKEN.to_string(),
        ];
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for w in required {
            if seen.insert(w.clone()) {
                tokens.push(w.clone());
            }
        }
        if tokens.len() > capacity {
            return Err(Error::config(format!(
                "vocab capacity {capacity} cannot hold {} required tokens",
                tokens.len()
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for w in split_words(line) {
                if !seen.contains(&w) && w != PROMPT_SLOT && !w.starts_with('{') {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (w, _) in ranked.into_iter().take(capacity - tokens.len()) {
            tokens.push(w);
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn lookup(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub token_ids: Vec<u32>,
    pub mask_position: usize,
    pub label: usize,
}

impl Example {
    pub fn new(token_ids: Vec<u32>, mask_position: usize, label: usize) -> Result<Self> {
        if mask_position >= token_ids.len() {
            return Err(Error::Template("mask position out of range".into()));
        }
        let masks = token_ids.iter().filter(|&&t| t == MASK_ID).count();
        if masks != 1 || token_ids[mask_position] != MASK_ID {
            return Err(Error::Template(format!(
                "example must contain exactly one mask, found {masks}"
            )));
        }
        Ok(Self {
            token_ids,
            mask_position,
            label,
        })
    }
}

/// Input template such as `<prompt> . {text1} . It was <mask> .`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    source: String,
    parts: Vec<String>,
}

impl Template {
    pub const SINGLE: &'static str = "<prompt> . {text1} . It was <mask> .";
    pub const PAIR: &'static str = "<prompt> . {text1} <mask> , {text2}";
    /// For pseudo-labelled text that already carries its own mask.
    pub const MASKED_TEXT: &'static str = "<prompt> {text1}";

    pub fn parse(source: &str) -> Result<Self> {
        let resolved = match source {
            "single" => Self::SINGLE,
            "pair" => Self::PAIR,
            "masked_text" => Self::MASKED_TEXT,
            other => other,
        };
        let parts = split_words(resolved);
        for p in &parts {
            if p.starts_with('{') && p != "{text1}" && p != "{text2}" {
                return Err(Error::Template(format!("unknown placeholder {p}")));
            }
        }
        let masks = parts.iter().filter(|p| *p == MASK_TOKEN).count();
        let carries_text_mask = resolved == Self::MASKED_TEXT;
        if masks > 1 || (masks == 0 && !carries_text_mask) {
            return Err(Error::Template(format!(
                "template must contain exactly one {MASK_TOKEN}, found {masks}"
            )));
        }
        Ok(Self {
            source: resolved.to_string(),
            parts,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Literal words the vocabulary must contain.
    pub fn literal_words(&self) -> Vec<String> {
        self.parts
            .iter()
            .filter(|p| !p.starts_with('{') && *p != PROMPT_SLOT && *p != MASK_TOKEN)
            .cloned()
            .collect()
    }

    pub fn uses_text2(&self) -> bool {
        self.parts.iter().any(|p| p == "{text2}")
    }

    /// Token ids for one example. The prompt slot emits nothing; prompts are
    /// injected at the hidden-state level.
    pub fn tokenize(
        &self,
        text1: &str,
        text2: Option<&str>,
        vocab: &Vocab,
        label: usize,
    ) -> Result<Example> {
        let mut ids = Vec::new();
        for part in &self.parts {
            match part.as_str() {
                PROMPT_SLOT => {}
                "{text1}" => ids.extend(split_words(text1).iter().map(|w| vocab.id(w))),
                "{text2}" => {
                    let t = text2.ok_or_else(|| {
                        Error::Template("template needs {text2} but example has none".into())
                    })?;
                    ids.extend(split_words(t).iter().map(|w| vocab.id(w)));
                }
                w => ids.push(vocab.id(w)),
            }
        }
        let masks: Vec<usize> = ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == MASK_ID)
            .map(|(i, _)| i)
            .collect();
        if masks.len() != 1 {
            return Err(Error::Template(format!(
                "tokenized example has {} mask tokens",
                masks.len()
            )));
        }
        Example::new(ids, masks[0], label)
    }
}

/// One line of a dataset file: `label<TAB>text1[<TAB>text2]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub label: usize,
    pub text1: String,
    pub text2: Option<String>,
}

pub fn parse_dataset(text: &str) -> Result<Vec<RawExample>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::Data(format!(
                "line {}: expected 2 or 3 tab-separated fields, got {}",
                n + 1,
                fields.len()
            )));
        }
        let label = fields[0].trim().parse::<usize>().map_err(|e| {
            Error::Data(format!("line {}: bad label {:?}: {e}", n + 1, fields[0]))
        })?;
        out.push(RawExample {
            label,
            text1: fields[1].to_string(),
            text2: fields.get(2).map(|s| s.to_string()),
        });
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<RawExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub fn format_dataset(rows: &[RawExample]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&r.label.to_string());
        out.push('\t');
        out.push_str(&r.text1);
        if let Some(t2) = &r.text2 {
            out.push('\t');
            out.push_str(t2);
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Mock masked LM

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockLmConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub prompt_len: usize,
    pub seed: u64,
    /// Recurrent weights are drawn with std `weight_scale / sqrt(D)`.
    pub weight_scale: f64,
    /// Embedding entries are drawn with std `embed_scale`.
    pub embed_scale: f64,
}

impl Default for MockLmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 500,
            width: 32,
            layers: 6,
            prompt_len: 5,
            seed: 0,
            weight_scale: 1.0,
            embed_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    /// Token transition, row-major `D x D`.
    pub token: Vec<f64>,
    /// Prompt injection, row-major `D x D`.
    pub prompt: Vec<f64>,
    /// Context mixing over the mean hidden state, row-major `D x D`.
    pub context: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub mask_logits: Vec<f64>,
    /// Mask-position hidden states of the last four layers, concatenated.
    pub last4_hidden: Vec<f64>,
}

/// Mask-position states, enough for any loss without materializing all
/// `V` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStates {
    pub top: Vec<f64>,
    pub last4_hidden: Vec<f64>,
}

/// Layered stand-in for a pretrained masked LM.
///
/// For each layer `i` with prompt block `P_i`:
///
/// ```text
/// g_i    = mean over prompt rows of P_i
/// c_i    = mean over positions of h^{i-1}
/// h^i_t  = tanh(W_i h^{i-1}_t + U_i g_i + Q_i c_i + b_i)
/// ```
///
/// with `h^0_t = E[token_t]`. Logits are `E h^L_mask` (tied embedding). The
/// `Q_i c_i` term is a uniform-attention stand-in so the mask position can
/// see the text.
#[derive(Debug, Clone, PartialEq)]
pub struct MockMaskedLM {
    config: MockLmConfig,
    layers: Vec<LayerWeights>,
    embedding: Vec<f64>,
}

impl MockMaskedLM {
    pub fn new(config: MockLmConfig) -> Result<Self> {
        let MockLmConfig {
            vocab_size: v,
            width: d,
            layers: l,
            prompt_len,
            ..
        } = config;
        if v < 3 || d == 0 || l == 0 || prompt_len == 0 {
            return Err(Error::config(format!(
                "mock LM needs V >= 3 and positive D, L, n_p (got V={v}, D={d}, L={l}, n_p={prompt_len})"
            )));
        }
        let root = RngStream::new(config.seed, "mock-lm");
        let w_std = config.weight_scale / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(l);
        for i in 0..l {
            let mut r = root.fork(&format!("layer-{i}"));
            let mut draw = |n: usize, std: f64| -> Vec<f64> { (0..n).map(|_| std * r.normal()).collect() };
            layers.push(LayerWeights {
                token: draw(d * d, w_std),
                prompt: draw(d * d, w_std),
                context: draw(d * d, w_std),
                bias: draw(d, 0.1),
            });
        }
        let mut er = root.fork("embedding");
        let embedding = (0..v * d).map(|_| config.embed_scale * er.normal()).collect();
        Ok(Self {
            config,
            layers,
            embedding,
        })
    }

    /// Builds a model from explicit weights (used by hand-sized checks).
    pub fn from_weights(
        config: MockLmConfig,
        layers: Vec<LayerWeights>,
        embedding: Vec<f64>,
    ) -> Result<Self> {
        let d = config.width;
        check_len("mock LM layers", config.layers, layers.len())?;
        check_len("embedding", config.vocab_size * d, embedding.len())?;
        for w in &layers {
            check_len("token weights", d * d, w.token.len())?;
            check_len("prompt weights", d * d, w.prompt.len())?;
            check_len("context weights", d * d, w.context.len())?;
            check_len("bias", d, w.bias.len())?;
        }
        Ok(Self {
            config,
            layers,
            embedding,
        })
    }

    pub fn config(&self) -> &MockLmConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    pub fn prompt_len(&self) -> usize {
        self.config.prompt_len
    }

    pub fn layer_weights(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn embedding_row(&self, id: u32) -> &[f64] {
        let d = self.config.width;
        &self.embedding[id as usize * d..(id as usize + 1) * d]
    }

    fn check_prompts(&self, prompts: &PromptSet) -> Result<()> {
        check_len("prompt layers", self.config.layers, prompts.layers())?;
        check_len("prompt width", self.config.width, prompts.width())?;
        check_len("prompt length", self.config.prompt_len, prompts.prompt_len())?;
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::contract("empty token sequence"));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::contract(format!(
                "token id {t} outside vocab of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs the recurrence and returns every layer's hidden states
    /// (`L + 1` entries, each `T x D` row-major). `None` prompts mean no
    /// injection.
    fn run_layers(&self, prompts: Option<&PromptSet>, tokens: &[u32]) -> Vec<Vec<f64>> {
        let d = self.config.width;
        let t_len = tokens.len();
        let mut h: Vec<f64> = tokens
            .iter()
            .flat_map(|&t| self.embedding_row(t).iter().copied())
            .collect();
        let mut all = Vec::with_capacity(self.layers.len() + 1);
        for (i, w) in self.layers.iter().enumerate() {
            let mut shared = w.bias.clone();
            if let Some(p) = prompts {
                let g = p.blocks()[i].mean_row();
                add_matvec(&mut shared, &w.prompt, &g, d);
            }
            let mut ctx = vec![0.0; d];
            for row in h.chunks_exact(d) {
                for (c, v) in ctx.iter_mut().zip(row) {
                    *c += v;
                }
            }
            ctx.iter_mut().for_each(|c| *c /= t_len as f64);
            add_matvec(&mut shared, &w.context, &ctx, d);

            let mut next = vec![0.0; t_len * d];
            for (out, inp) in next.chunks_exact_mut(d).zip(h.chunks_exact(d)) {
                out.copy_from_slice(&shared);
                add_matvec(out, &w.token, inp, d);
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            all.push(std::mem::replace(&mut h, next));
        }
        all.push(h);
        all
    }

    pub fn mask_states(&self, prompts: &PromptSet, example: &Example) -> Result<MaskStates> {
        self.check_prompts(prompts)?;
        self.check_tokens(&example.token_ids)?;
        if example.mask_position >= example.token_ids.len() {
            return Err(Error::contract("mask position out of range"));
        }
        let d = self.config.width;
        let hidden = self.run_layers(Some(prompts), &example.token_ids);
        let at = |layer: usize| &hidden[layer][example.mask_position * d..(example.mask_position + 1) * d];
        let top_layer = self.layers.len();
        let mut last4 = Vec::with_capacity(4 * d);
        for back in (0..4).rev() {
            match top_layer.checked_sub(back) {
                Some(layer) => last4.extend_from_slice(at(layer)),
                None => last4.extend(std::iter::repeat_n(0.0, d)),
            }
        }
        Ok(MaskStates {
            top: at(top_layer).to_vec(),
            last4_hidden: last4,
        })
    }

    pub fn logit(&self, top: &[f64], id: u32) -> f64 {
        self.embedding_row(id).iter().zip(top).map(|(a, b)| a * b).sum()
    }

    pub fn forward(&self, prompts: &PromptSet, example: &Example) -> Result<ModelOutput> {
        let states = self.mask_states(prompts, example)?;
        let mask_logits = (0..self.config.vocab_size as u32)
            .map(|id| self.logit(&states.top, id))
            .collect();
        Ok(ModelOutput {
            mask_logits,
            last4_hidden: states.last4_hidden,
        })
    }

    /// Initial prompts from a token sequence: run it alone with no injection
    /// and take the `n_p` input rows of layer `i` as block `i`.
    pub fn initial_prompts(&self, tokens: &[u32]) -> Result<InitialPromptSet> {
        check_len("initial prompt tokens", self.config.prompt_len, tokens.len())?;
        self.check_tokens(tokens)?;
        let hidden = self.run_layers(None, tokens);
        let blocks = (0..self.layers.len())
            .map(|i| PromptBlock::new(i, self.config.prompt_len, self.config.width, hidden[i].clone()))
            .collect::<Result<Vec<_>>>()?;
        InitialPromptSet::new(blocks, tokens.to_vec())
    }
}

fn add_matvec(out: &mut [f64], matrix: &[f64], v: &[f64], d: usize) {
    for (o, row) in out.iter_mut().zip(matrix.chunks_exact(d)) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}
