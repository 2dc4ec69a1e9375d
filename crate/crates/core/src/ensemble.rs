//! Checkpoint registry and top-K prediction fusion.
//!
//! Each retained checkpoint yields a class distribution (softmax over
//! verbalizer scores, or over head scores); the fused prediction is the
//! argmax of their uniform average.

use serde::{Deserialize, Serialize};

use crate::blackbox::{Example, MockMaskedLM};
use crate::error::{Error, Result};
use crate::mtl::MlpHead;
use crate::prompt::PromptSet;
use crate::verbalizer::{argmax, label_scores_from_state, softmax, LabelMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Verbalizer,
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub prompt_set: PromptSet,
    pub head: Option<MlpHead>,
    pub dev_metric: f64,
    pub origin: usize,
    pub kind: PredictorKind,
}

impl Checkpoint {
    pub fn verbalizer(prompt_set: PromptSet, dev_metric: f64, origin: usize) -> Result<Self> {
        Self::validated(prompt_set, None, dev_metric, origin, PredictorKind::Verbalizer)
    }

    pub fn head(prompt_set: PromptSet, head: MlpHead, dev_metric: f64, origin: usize) -> Result<Self> {
        Self::validated(prompt_set, Some(head), dev_metric, origin, PredictorKind::Head)
    }

    fn validated(
        prompt_set: PromptSet,
        head: Option<MlpHead>,
        dev_metric: f64,
        origin: usize,
        kind: PredictorKind,
    ) -> Result<Self> {
        if !dev_metric.is_finite() {
            return Err(Error::NonFinite("checkpoint dev metric"));
        }
        if kind == PredictorKind::Head && head.is_none() {
            return Err(Error::contract("head checkpoint without a head"));
        }
        Ok(Self {
            prompt_set,
            head,
            dev_metric,
            origin,
            kind,
        })
    }

    /// Class distribution this checkpoint assigns to `example`.
    pub fn probabilities(&self, model: &MockMaskedLM, map: &LabelMap, example: &Example) -> Result<Vec<f64>> {
        let states = model.mask_states(&self.prompt_set, example)?;
        let scores = match (&self.kind, &self.head) {
            (PredictorKind::Verbalizer, _) => label_scores_from_state(model, &states.top, map),
            (PredictorKind::Head, Some(h)) => h.forward(&states.last4_hidden)?,
            (PredictorKind::Head, None) => return Err(Error::contract("head checkpoint without a head")),
        };
        Ok(softmax(&scores))
    }
}

/// Best-first checkpoints per predictor kind; higher dev metric is better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    capacity: usize,
    verbalizer: Vec<Checkpoint>,
    head: Vec<Checkpoint>,
}

impl Registry {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("registry capacity must be >= 1"));
        }
        Ok(Self {
            capacity,
            verbalizer: Vec::new(),
            head: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn of_kind(&self, kind: PredictorKind) -> &[Checkpoint] {
        match kind {
            PredictorKind::Verbalizer => &self.verbalizer,
            PredictorKind::Head => &self.head,
        }
    }

    pub fn members(&self) -> impl Iterator<Item = &Checkpoint> {
        self.verbalizer.iter().chain(&self.head)
    }

    pub fn len(&self) -> usize {
        self.verbalizer.len() + self.head.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts when there is room or the checkpoint beats the worst retained
    /// one of its kind. Equal metrics keep the earlier entry first.
    pub fn offer(&mut self, checkpoint: Checkpoint) -> bool {
        let capacity = self.capacity;
        let list = match checkpoint.kind {
            PredictorKind::Verbalizer => &mut self.verbalizer,
            PredictorKind::Head => &mut self.head,
        };
        if list.len() >= capacity
            && list
                .last()
                .is_some_and(|worst| checkpoint.dev_metric <= worst.dev_metric)
        {
            return false;
        }
        let pos = list
            .iter()
            .position(|c| checkpoint.dev_metric > c.dev_metric)
            .unwrap_or(list.len());
        list.insert(pos, checkpoint);
        list.truncate(capacity);
        true
    }
}

/// Uniform average of member distributions and its argmax (lowest index on
/// ties).
pub fn fuse_probabilities(members: &[Vec<f64>]) -> Result<(Vec<f64>, usize)> {
    let first = members
        .first()
        .ok_or_else(|| Error::contract("cannot fuse an empty set of predictions"))?;
    let mut avg = vec![0.0; first.len()];
    for p in members {
        if p.len() != avg.len() {
            return Err(Error::contract("member predictions disagree on class count"));
        }
        for (a, v) in avg.iter_mut().zip(p) {
            *a += v;
        }
    }
    let k = members.len() as f64;
    avg.iter_mut().for_each(|a| *a /= k);
    let label = argmax(&avg);
    Ok((avg, label))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrediction {
    pub label: usize,
    pub average: Vec<f64>,
    pub members: Vec<Vec<f64>>,
}

pub fn fuse_predict_detailed(
    registry: &Registry,
    example: &Example,
    model: &MockMaskedLM,
    map: &LabelMap,
) -> Result<FusedPrediction> {
    if registry.is_empty() {
        return Err(Error::contract("cannot predict with an empty registry"));
    }
    let members = registry
        .members()
        .map(|c| c.probabilities(model, map, example))
        .collect::<Result<Vec<_>>>()?;
    let (average, label) = fuse_probabilities(&members)?;
    Ok(FusedPrediction {
        label,
        average,
        members,
    })
}

pub fn fuse_predict(registry: &Registry, example: &Example, model: &MockMaskedLM, map: &LabelMap) -> Result<usize> {
    fuse_predict_detailed(registry, example, model, map).map(|p| p.label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DevMetric {
    #[default]
    MacroF1,
    Accuracy,
}

impl DevMetric {
    pub fn score(self, predictions: &[usize], golds: &[usize], classes: usize) -> f64 {
        match self {
            DevMetric::MacroF1 => macro_f1(predictions, golds, classes),
            DevMetric::Accuracy => accuracy(predictions, golds),
        }
    }
}

pub fn accuracy(predictions: &[usize], golds: &[usize]) -> f64 {
    if golds.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    hits as f64 / golds.len() as f64
}

/// Unweighted mean of per-class F1; a class with no predictions and no gold
/// examples is skipped.
pub fn macro_f1(predictions: &[usize], golds: &[usize], classes: usize) -> f64 {
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..classes {
        let tp = predictions.iter().zip(golds).filter(|(p, g)| **p == c && **g == c).count() as f64;
        let fp = predictions.iter().zip(golds).filter(|(p, g)| **p == c && **g != c).count() as f64;
        let fneg = predictions.iter().zip(golds).filter(|(p, g)| **p != c && **g == c).count() as f64;
        if tp + fp + fneg == 0.0 {
            continue;
        }
        counted += 1;
        total += 2.0 * tp / (2.0 * tp + fp + fneg);
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::PromptBlock;

    fn ckpt(metric: f64) -> Checkpoint {
        let ps = PromptSet::new(vec![PromptBlock::zeros(0, 1, 2)]).unwrap();
        Checkpoint::verbalizer(ps, metric, 0).unwrap()
    }

    #[test]
    fn empty_registry_accepts() {
        let mut r = Registry::new(3).unwrap();
        assert!(r.offer(ckpt(0.1)));
    }

    #[test]
    fn fourth_best_rejected() {
        let mut r = Registry::new(3).unwrap();
        for m in [0.9, 0.8, 0.7] {
            assert!(r.offer(ckpt(m)));
        }
        let before = r.clone();
        assert!(!r.offer(ckpt(0.6)));
        assert_eq!(r, before);
    }

    #[test]
    fn better_offer_evicts_worst() {
        let mut r = Registry::new(3).unwrap();
        for m in [0.9, 0.8, 0.7] {
            r.offer(ckpt(m));
        }
        assert!(r.offer(ckpt(0.85)));
        let metrics: Vec<f64> = r.of_kind(PredictorKind::Verbalizer).iter().map(|c| c.dev_metric).collect();
        assert_eq!(metrics, vec![0.9, 0.85, 0.8]);
    }

    #[test]
    fn head_kind_requires_head() {
        let ps = PromptSet::new(vec![PromptBlock::zeros(0, 1, 2)]).unwrap();
        assert!(Checkpoint::validated(ps.clone(), None, 0.5, 0, PredictorKind::Head).is_err());
        assert!(Checkpoint::verbalizer(ps, f64::NAN, 0).is_err());
    }

    #[test]
    fn two_member_hand_example() {
        let (avg, label) = fuse_probabilities(&[vec![0.6, 0.4], vec![0.2, 0.8]]).unwrap();
        assert!((avg[0] - 0.4).abs() < 1e-15 && (avg[1] - 0.6).abs() < 1e-15);
        assert_eq!(label, 1);
    }

    #[test]
    fn ties_go_to_lowest_class() {
        assert_eq!(fuse_probabilities(&[vec![0.5, 0.5]]).unwrap().1, 0);
    }

    #[test]
    fn empty_fusion_is_error() {
        assert!(fuse_probabilities(&[]).is_err());
    }

    #[test]
    fn metrics() {
        assert_eq!(accuracy(&[0, 1, 1], &[0, 1, 0]), 2.0 / 3.0);
        // class 0: tp1 fp0 fn1 -> 2/3; class 1: tp1 fp1 fn0 -> 2/3
        assert!((macro_f1(&[0, 1, 1], &[0, 1, 0], 2) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(macro_f1(&[0, 0], &[0, 0], 3), 1.0);
    }
}
