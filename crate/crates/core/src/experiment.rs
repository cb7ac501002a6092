//! End-to-end runs on the synthetic corpus: KIRE against the no-injection
//! baseline with identical encoder, schedule and seed.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Config, Document};
use crate::embeddings::Lexicon;
use crate::encoders::collect_entity_types;
use crate::error::Result;
use crate::evaluation::{f1, DEFAULT_THRESHOLD, f1_for_relations, select_threshold, select_threshold_for_relations, PredictionSet};
use crate::ingestion::{synth_corpus, SynthCorpus, SynthSpec};
use crate::kg::pretrain_autoencoder;
use crate::model::{prepare_documents, KireModel, KnowledgeContext, PreparedDocument};
use crate::training::{train, train_baseline, TrainOutcome};

/// Everything needed to train on one corpus.
#[derive(Clone, Debug)]
pub struct PreparedCorpus {
    pub corpus: SynthCorpus,
    pub lexicon: Lexicon,
    pub context: KnowledgeContext,
    pub entity_types: Vec<String>,
    pub train: Vec<PreparedDocument>,
    pub validation: Vec<PreparedDocument>,
    pub test: Vec<PreparedDocument>,
    pub ae_curve: Vec<f64>,
}

pub fn prepare_synthetic(spec: &SynthSpec, config: &Config) -> Result<PreparedCorpus> {
    let corpus = synth_corpus(&SynthSpec { embedding_dim: config.d_word, ..spec.clone() })?;
    let lexicon = Lexicon::new(corpus.words.clone(), corpus.chars.clone())?;
    let (ae, curve) = pretrain_autoencoder(&corpus.kg, &lexicon, config, config.ae_epochs, config.seed)?;
    let context = KnowledgeContext::build(&corpus.kg, &ae, &lexicon, config);
    let entity_types = collect_entity_types(&corpus.train.documents);
    let prep = |docs: &[Document]| prepare_documents(docs, &corpus.corefs, &context, &lexicon, &entity_types, config);
    let (train, validation, test) = (prep(&corpus.train.documents), prep(&corpus.validation.documents), prep(&corpus.test.documents));
    Ok(PreparedCorpus { corpus, lexicon, context, entity_types, train, validation, test, ae_curve: curve.0 })
}

impl PreparedCorpus {
    pub fn model(&self, config: &Config) -> Result<KireModel> {
        KireModel::new(config, self.entity_types.clone(), self.corpus.relations.clone(), self.context.relation_types())
    }
}

/// Scores of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub train_f1: f64,
    pub test_f1: f64,
    /// Test F1 restricted to the KG-decidable labels, at the threshold
    /// selected on validation for those labels.
    pub test_kg_f1: f64,
    pub validation_f1: f64,
    /// Training F1 of the parameters after the final epoch, at the default
    /// threshold.
    pub last_epoch_train_f1: f64,
}

fn docs(p: &[PreparedDocument]) -> Vec<Document> {
    p.iter().map(|d| d.doc.clone()).collect()
}

pub fn score(outcome: &TrainOutcome, data: &PreparedCorpus) -> Result<RunScores> {
    let m = &outcome.model;
    let predict = |p: &[PreparedDocument]| -> Result<PredictionSet> { m.predict(p, &data.context, outcome.mode) };
    let (train_pred, val_pred, test_pred) = (predict(&data.train)?, predict(&data.validation)?, predict(&data.test)?);
    let (train_gold, val_gold, test_gold) = (docs(&data.train), docs(&data.validation), docs(&data.test));
    let theta = select_threshold(&val_pred, &val_gold);
    let kg_only = |r: &str| data.corpus.kg_only_relations.iter().any(|k| k == r);
    let kg_theta = select_threshold_for_relations(&val_pred, &val_gold, kg_only);
    Ok(RunScores {
        train_f1: f1(&train_pred, &train_gold, theta).f1,
        test_f1: f1(&test_pred, &test_gold, theta).f1,
        test_kg_f1: f1_for_relations(&test_pred, &test_gold, kg_theta, kg_only).f1,
        validation_f1: f1(&val_pred, &val_gold, theta).f1,
        last_epoch_train_f1: {
            let last = KireModel { store: outcome.last_epoch.clone(), ..m.clone() };
            f1(&last.predict(&data.train, &data.context, outcome.mode)?, &train_gold, DEFAULT_THRESHOLD).f1
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub kire: RunScores,
    pub baseline: RunScores,
}

/// Trains KIRE and the baseline from the same initialization.
pub fn compare_on_synthetic(spec: &SynthSpec, config: &Config) -> Result<Comparison> {
    let data = prepare_synthetic(spec, config)?;
    let kire = train(data.model(config)?, &data.train, &data.validation, &data.context)?;
    let base = train_baseline(data.model(config)?, &data.train, &data.validation, &data.context)?;
    Ok(Comparison { seed: config.seed, kire: score(&kire, &data)?, baseline: score(&base, &data)? })
}

/// KIRE against the baseline over several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalSummary {
    pub runs: Vec<Comparison>,
    pub kire_mean_kg_f1: f64,
    pub baseline_mean_kg_f1: f64,
    /// Lowest training F1 reached by the KIRE stage's final parameters.
    pub min_kire_train_f1: f64,
}

impl DirectionalSummary {
    pub fn margin(&self) -> f64 {
        self.kire_mean_kg_f1 - self.baseline_mean_kg_f1
    }
}

pub fn directional_experiment(spec: &SynthSpec, config: &Config, seeds: &[u64]) -> Result<DirectionalSummary> {
    let runs = seeds
        .iter()
        .map(|&seed| compare_on_synthetic(spec, &Config { seed, ..config.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let mean = |f: fn(&Comparison) -> f64| runs.iter().map(f).sum::<f64>() / runs.len().max(1) as f64;
    Ok(DirectionalSummary {
        kire_mean_kg_f1: mean(|c| c.kire.test_kg_f1),
        baseline_mean_kg_f1: mean(|c| c.baseline.test_kg_f1),
        min_kire_train_f1: runs.iter().map(|c| c.kire.last_epoch_train_f1).fold(f64::INFINITY, f64::min),
        runs,
    })
}
