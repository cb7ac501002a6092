//! Micro-averaged F1 and Ign F1 over predicted relation facts, plus
//! validation-based threshold selection.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::datamodel::Document;
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredFact {
    pub head: usize,
    pub tail: usize,
    pub relation: String,
    pub score: f64,
}

/// Scored facts per document, without duplicate `(head, tail, relation)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    docs: BTreeMap<String, Vec<ScoredFact>>,
}

type FactKey = (String, usize, usize, String);

impl PredictionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, doc_id: &str, fact: ScoredFact) -> Result<()> {
        if !(0.0..=1.0).contains(&fact.score) {
            return Err(Error::Invalid(format!("score {} outside [0, 1]", fact.score)));
        }
        let list = self.docs.entry(doc_id.into()).or_default();
        if list.iter().any(|f| f.head == fact.head && f.tail == fact.tail && f.relation == fact.relation) {
            return Err(Error::Invalid(format!("duplicate fact ({}, {}, {}) in {doc_id}", fact.head, fact.tail, fact.relation)));
        }
        list.push(fact);
        Ok(())
    }

    pub fn docs(&self) -> &BTreeMap<String, Vec<ScoredFact>> {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn keyed(&self) -> Vec<(FactKey, f64)> {
        self.docs
            .iter()
            .flat_map(|(d, fs)| fs.iter().map(move |f| ((d.clone(), f.head, f.tail, f.relation.clone()), f.score)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let precision = if predicted == 0 { 0.0 } else { correct as f64 / predicted as f64 };
        let recall = if gold == 0 { 0.0 } else { correct as f64 / gold as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, f1 }
    }
}

fn gold_keys(gold: &[Document]) -> BTreeSet<FactKey> {
    gold.iter()
        .flat_map(|d| d.facts.iter().map(move |f| (d.doc_id.clone(), f.head, f.tail, f.relation.clone())))
        .collect()
}

fn score(pred: &[(FactKey, f64)], gold: &BTreeSet<FactKey>, theta: f64) -> Prf {
    let positive: Vec<&FactKey> = pred.iter().filter(|(_, s)| *s >= theta).map(|(k, _)| k).collect();
    let correct = positive.iter().filter(|k| gold.contains(**k)).count();
    Prf::from_counts(correct, positive.len(), gold.len())
}

/// Micro precision, recall and F1; facts scoring at least `theta` count as
/// predicted.
pub fn f1(predictions: &PredictionSet, gold: &[Document], theta: f64) -> Prf {
    score(&predictions.keyed(), &gold_keys(gold), theta)
}

/// As [`f1`], restricted to relations accepted by `keep`.
pub fn f1_for_relations(predictions: &PredictionSet, gold: &[Document], theta: f64, keep: impl Fn(&str) -> bool) -> Prf {
    let pred: Vec<_> = predictions.keyed().into_iter().filter(|(k, _)| keep(&k.3)).collect();
    let gold: BTreeSet<_> = gold_keys(gold).into_iter().filter(|k| keep(&k.3)).collect();
    score(&pred, &gold, theta)
}

/// NFC-normalized, lowercased surface.
pub fn canonical_surface(s: &str) -> String {
    s.nfc().collect::<String>().to_lowercase()
}

fn entity_surface(doc: &Document, e: usize) -> Option<String> {
    doc.entities.get(e)?.mentions.first().map(|m| canonical_surface(&m.surface))
}

/// `(head surface, tail surface, relation)` of every training fact.
pub fn train_fact_surfaces(train: &[Document]) -> BTreeSet<(String, String, String)> {
    let mut out = BTreeSet::new();
    for d in train {
        for f in &d.facts {
            if let (Some(h), Some(t)) = (entity_surface(d, f.head), entity_surface(d, f.tail)) {
                out.insert((h, t, f.relation.clone()));
            }
        }
    }
    out
}

/// F1 after removing predicted and gold facts whose surface triple occurs
/// among the training facts.
pub fn ign_f1(predictions: &PredictionSet, gold: &[Document], theta: f64, train: &[Document]) -> Prf {
    ign_f1_with(predictions, gold, theta, &train_fact_surfaces(train))
}

pub fn ign_f1_with(predictions: &PredictionSet, gold: &[Document], theta: f64, seen: &BTreeSet<(String, String, String)>) -> Prf {
    let docs: BTreeMap<&str, &Document> = gold.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let in_train = |k: &FactKey| -> bool {
        let Some(d) = docs.get(k.0.as_str()) else { return false };
        match (entity_surface(d, k.1), entity_surface(d, k.2)) {
            (Some(h), Some(t)) => seen.contains(&(h, t, k.3.clone())),
            _ => false,
        }
    };
    let pred: Vec<_> = predictions.keyed().into_iter().filter(|(k, _)| !in_train(k)).collect();
    let gold: BTreeSet<_> = gold_keys(gold).into_iter().filter(|k| !in_train(k)).collect();
    score(&pred, &gold, theta)
}

/// Threshold among the distinct prediction scores that maximizes F1; ties
/// go to the larger threshold. Returns [`DEFAULT_THRESHOLD`] without
/// predictions.
pub fn select_threshold(predictions: &PredictionSet, gold: &[Document]) -> f64 {
    select_threshold_keyed(predictions.keyed(), &gold_keys(gold))
}

/// As [`select_threshold`], counting only relations accepted by `keep`.
pub fn select_threshold_for_relations(predictions: &PredictionSet, gold: &[Document], keep: impl Fn(&str) -> bool) -> f64 {
    let pred: Vec<_> = predictions.keyed().into_iter().filter(|(k, _)| keep(&k.3)).collect();
    let gold: BTreeSet<_> = gold_keys(gold).into_iter().filter(|k| keep(&k.3)).collect();
    select_threshold_keyed(pred, &gold)
}

fn select_threshold_keyed(mut pred: Vec<(FactKey, f64)>, gold: &BTreeSet<FactKey>) -> f64 {
    if pred.is_empty() {
        return DEFAULT_THRESHOLD;
    }
    pred.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut best = (f64::NEG_INFINITY, DEFAULT_THRESHOLD);
    let (mut correct, mut predicted) = (0usize, 0usize);
    let mut i = 0;
    while i < pred.len() {
        let s = pred[i].1;
        while i < pred.len() && pred[i].1 == s {
            predicted += 1;
            correct += usize::from(gold.contains(&pred[i].0));
            i += 1;
        }
        let f = Prf::from_counts(correct, predicted, gold.len()).f1;
        if f > best.0 {
            best = (f, s);
        }
    }
    best.1
}

/// Metric report written by the evaluation command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub theta: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ign_f1: f64,
    pub per_relation: BTreeMap<String, Prf>,
}

pub fn metric_report(split: &str, predictions: &PredictionSet, gold: &[Document], theta: f64, train: &[Document]) -> MetricReport {
    let overall = f1(predictions, gold, theta);
    let ign = ign_f1(predictions, gold, theta, train);
    let mut relations: BTreeSet<String> = gold.iter().flat_map(|d| d.facts.iter().map(|f| f.relation.clone())).collect();
    relations.extend(predictions.docs.values().flatten().filter(|f| f.score >= theta).map(|f| f.relation.clone()));
    let per_relation = relations.into_iter().map(|r| {
        let prf = f1_for_relations(predictions, gold, theta, |x| x == r);
        (r, prf)
    }).collect();
    MetricReport { split: split.into(), theta, precision: overall.precision, recall: overall.recall, f1: overall.f1, ign_f1: ign.f1, per_relation }
}
