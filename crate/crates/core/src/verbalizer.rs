//! Label words, losses over mask logits, and initial prompt token selection.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blackbox::{Example, MockMaskedLM, Vocab, PAD_ID, UNK_ID};
use crate::error::{Error, Result};

/// Label words before vocabulary resolution, one list per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelWords {
    pub words: Vec<Vec<String>>,
}

impl LabelWords {
    /// Parses lines like `1: great/good`. Labels must cover `0..C` exactly.
    pub fn parse(text: &str) -> Result<Self> {
        let mut by_label: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (label, rest) = line
                .split_once(':')
                .ok_or_else(|| Error::Data(format!("label map line {}: missing ':'", n + 1)))?;
            let label: usize = label
                .trim()
                .parse()
                .map_err(|e| Error::Data(format!("label map line {}: {e}", n + 1)))?;
            let words: Vec<String> = rest
                .split('/')
                .map(|w| w.trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect();
            if words.is_empty() {
                return Err(Error::config(format!("label {label} has no candidate words")));
            }
            if by_label.insert(label, words).is_some() {
                return Err(Error::Data(format!("label {label} listed twice")));
            }
        }
        if by_label.is_empty() {
            return Err(Error::Data("empty label map".into()));
        }
        for (expected, label) in by_label.keys().enumerate() {
            if *label != expected {
                return Err(Error::Data(format!("label map skips label {expected}")));
            }
        }
        Ok(Self {
            words: by_label.into_values().collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn format(&self) -> String {
        self.words
            .iter()
            .enumerate()
            .map(|(i, ws)| format!("{i}: {}\n", ws.join("/")))
            .collect()
    }

    pub fn classes(&self) -> usize {
        self.words.len()
    }

    pub fn all_words(&self) -> Vec<String> {
        self.words.iter().flatten().cloned().collect()
    }

    /// Class owning `word`, if any.
    pub fn class_of(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|ws| ws.iter().any(|w| w == word))
    }

    pub fn resolve(&self, vocab: &Vocab) -> Result<LabelMap> {
        let candidates = self
            .words
            .iter()
            .map(|ws| {
                ws.iter()
                    .map(|w| {
                        vocab
                            .lookup(w)
                            .filter(|&id| id != UNK_ID)
                            .ok_or_else(|| Error::config(format!("label word {w:?} not in vocabulary")))
                    })
                    .collect::<Result<Vec<u32>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        LabelMap::new(candidates, vocab.len())
    }
}

/// Candidate token ids per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    candidates: Vec<Vec<u32>>,
}

impl LabelMap {
    pub fn new(candidates: Vec<Vec<u32>>, vocab_size: usize) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::config("label map needs at least one class"));
        }
        let mut seen = BTreeSet::new();
        for (c, ids) in candidates.iter().enumerate() {
            if ids.is_empty() {
                return Err(Error::config(format!("label {c} has an empty candidate list")));
            }
            for &id in ids {
                if id as usize >= vocab_size {
                    return Err(Error::config(format!("label {c}: token {id} >= V = {vocab_size}")));
                }
                if !seen.insert(id) {
                    return Err(Error::config(format!("token {id} is a candidate for more than one label")));
                }
            }
        }
        Ok(Self { candidates })
    }

    pub fn classes(&self) -> usize {
        self.candidates.len()
    }

    pub fn candidates(&self) -> &[Vec<u32>] {
        &self.candidates
    }
}

/// Per-class score: the largest logit among the class's candidate words.
pub fn label_logits(mask_logits: &[f64], map: &LabelMap) -> Result<Vec<f64>> {
    map.candidates
        .iter()
        .map(|ids| {
            ids.iter()
                .map(|&id| {
                    mask_logits
                        .get(id as usize)
                        .copied()
                        .ok_or_else(|| Error::contract(format!("token {id} outside logits")))
                })
                .try_fold(f64::NEG_INFINITY, |acc, v| v.map(|v| acc.max(v)))
        })
        .collect()
}

/// Same as [`label_logits`] but computes only the candidate logits from the
/// top-layer mask state.
pub fn label_scores_from_state(model: &MockMaskedLM, top: &[f64], map: &LabelMap) -> Vec<f64> {
    map.candidates
        .iter()
        .map(|ids| {
            ids.iter()
                .map(|&id| model.logit(top, id))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMetric {
    #[default]
    CrossEntropy,
    Hinge,
    NegAccuracy,
}

impl std::str::FromStr for LossMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" => Ok(LossMetric::CrossEntropy),
            "hinge" => Ok(LossMetric::Hinge),
            "neg_accuracy" => Ok(LossMetric::NegAccuracy),
            other => Err(Error::config(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub metric: LossMetric,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            metric: LossMetric::CrossEntropy,
            margin: 1.0,
        }
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check_gold(scores: &[f64], gold: usize) -> Result<()> {
    if gold >= scores.len() {
        Err(Error::contract(format!(
            "gold label {gold} out of range for {} classes",
            scores.len()
        )))
    } else {
        Ok(())
    }
}

/// `-log softmax(scores)[gold]`, computed through log-sum-exp.
pub fn cross_entropy(scores: &[f64], gold: usize) -> Result<f64> {
    check_gold(scores, gold)?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(lse - scores[gold])
}

pub fn hinge(scores: &[f64], gold: usize, margin: f64) -> Result<f64> {
    check_gold(scores, gold)?;
    let other = scores
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != gold)
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    if other == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    Ok((margin - (scores[gold] - other)).max(0.0))
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Batch loss: mean per-example loss, or `1 - accuracy` for `NegAccuracy`.
pub fn batch_loss(scores: &[Vec<f64>], golds: &[usize], cfg: &LossConfig) -> Result<f64> {
    if scores.is_empty() || scores.len() != golds.len() {
        return Err(Error::contract("batch loss needs matching, non-empty scores and labels"));
    }
    let n = scores.len() as f64;
    match cfg.metric {
        LossMetric::CrossEntropy => {
            let mut total = 0.0;
            for (s, &g) in scores.iter().zip(golds) {
                total += cross_entropy(s, g)?;
            }
            Ok(total / n)
        }
        LossMetric::Hinge => {
            let mut total = 0.0;
            for (s, &g) in scores.iter().zip(golds) {
                total += hinge(s, g, cfg.margin)?;
            }
            Ok(total / n)
        }
        LossMetric::NegAccuracy => {
            let mut correct = 0usize;
            for (s, &g) in scores.iter().zip(golds) {
                check_gold(s, g)?;
                if argmax(s) == g {
                    correct += 1;
                }
            }
            Ok(1.0 - correct as f64 / n)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P0SelectionConfig {
    pub prompt_len: usize,
    /// Per-example pool size is `pool_multiplier * prompt_len`, capped at V.
    pub pool_multiplier: usize,
    /// Probability substituted when a token is outside an example's pool.
    pub missing_prob: f64,
}

impl P0SelectionConfig {
    pub fn new(prompt_len: usize) -> Self {
        Self {
            prompt_len,
            pool_multiplier: 100,
            missing_prob: 1.0,
        }
    }
}

/// Coverage and minimum probability of one token across examples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenStats {
    pub token: u32,
    pub coverage: f64,
    pub p_min: f64,
}

/// Ids of the `k` most probable tokens, ties to the lower id.
pub fn top_k(probs: &[f64], k: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..probs.len() as u32).collect();
    ids.sort_by(|&a, &b| probs[b as usize].total_cmp(&probs[a as usize]).then(a.cmp(&b)));
    ids.truncate(k.min(probs.len()));
    ids
}

/// Ranks the union of per-example top-`k` pools by coverage, then `p_min`,
/// then token id, and returns the ranked statistics.
pub fn rank_tokens(distributions: &[Vec<f64>], k: usize, missing_prob: f64) -> Vec<TokenStats> {
    let pools: Vec<BTreeSet<u32>> = distributions
        .iter()
        .map(|p| top_k(p, k).into_iter().collect())
        .collect();
    let union: BTreeSet<u32> = pools.iter().flatten().copied().collect();
    let n = distributions.len() as f64;
    let mut stats: Vec<TokenStats> = union
        .into_iter()
        .map(|token| {
            let mut covered = 0usize;
            let mut p_min = f64::INFINITY;
            for (p, pool) in distributions.iter().zip(&pools) {
                let prob = if pool.contains(&token) {
                    covered += 1;
                    p[token as usize]
                } else {
                    missing_prob
                };
                p_min = p_min.min(prob);
            }
            TokenStats {
                token,
                coverage: covered as f64 / n,
                p_min,
            }
        })
        .collect();
    stats.sort_by(|a, b| {
        b.coverage
            .total_cmp(&a.coverage)
            .then(b.p_min.total_cmp(&a.p_min))
            .then(a.token.cmp(&b.token))
    });
    stats
}

/// Initial prompt tokens: score every training example with PAD-derived
/// prompts, pool each example's most probable mask tokens, and keep the
/// tokens with the widest coverage and highest minimum probability.
pub fn select_p0(model: &MockMaskedLM, examples: &[Example], cfg: &P0SelectionConfig) -> Result<Vec<u32>> {
    if examples.is_empty() {
        return Err(Error::Data("P0 selection needs at least one training example".into()));
    }
    if cfg.prompt_len == 0 || cfg.prompt_len > model.vocab_size() {
        return Err(Error::config(format!(
            "cannot select {} prompt tokens from V = {}",
            cfg.prompt_len,
            model.vocab_size()
        )));
    }
    let pad = model.initial_prompts(&vec![PAD_ID; model.prompt_len()])?;
    let prompts = pad.as_prompt_set();
    let distributions = examples
        .iter()
        .map(|ex| model.forward(prompts, ex).map(|o| softmax(&o.mask_logits)))
        .collect::<Result<Vec<_>>>()?;
    let k = (cfg.pool_multiplier * cfg.prompt_len).min(model.vocab_size());
    let ranked = rank_tokens(&distributions, k, cfg.missing_prob);
    Ok(ranked.iter().take(cfg.prompt_len).map(|s| s.token).collect())
}
