//! The commands behind the CLI, as library functions. Each one reads the
//! work directory, writes its outputs through a [`Transaction`] and
//! returns a summary of what it wrote.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use kire_core::datamodel::{validate_document, Config, CorefSet, Document, RelationVocab};
use kire_core::embeddings::{EmbeddingKind, Lexicon};
use kire_core::encoders::collect_entity_types;
use kire_core::evaluation::{f1_for_relations, metric_report, select_threshold, select_threshold_for_relations, MetricReport, Prf, ScoredFact};
use kire_core::ingestion::{derive_alias_corefs, filter_test_leakage, synth_corpus, SplitName, SynthSpec};
use kire_core::kg::{pretrain_autoencoder, AttrAutoEncoder};
use kire_core::model::{prepare_documents, InjectionMode, KireModel, KnowledgeContext, PreparedDocument};
use kire_core::training::{count_parameters, train, EpochRecord, ParameterReport};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_autoencoder, load_model, save_autoencoder, save_model, MANIFEST};
use crate::error::{Error, Result};
use crate::io::{load_coref_predictions, load_docred, load_embeddings, load_entity_links, load_kg_subset, load_relation_vocab, write_bytes, write_json};
use crate::run_config::{Preset, RunConfig};
use crate::workdir::{DataMeta, PreparedData, Transaction, WorkDir};

/// Which saved parameters of a run to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointChoice {
    /// Selected by validation F1.
    #[default]
    Best,
    /// After the final epoch.
    Last,
}

impl CheckpointChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Best => "best",
            Self::Last => "last",
        }
    }
}

/// Sizes of the prepared data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSummary {
    pub documents: BTreeMap<String, usize>,
    pub facts: BTreeMap<String, usize>,
    pub relations: usize,
    pub kg_entities: usize,
    pub kg_relation_triples: usize,
    pub kg_attribute_triples: usize,
    pub coreference_triples: usize,
    pub leakage_removed: usize,
}

impl DataSummary {
    pub fn of(data: &PreparedData) -> Self {
        let names = ["train", "validation", "test"];
        let split = |n: &str| data.split(n).unwrap_or(&[]);
        Self {
            documents: names.iter().map(|n| (n.to_string(), split(n).len())).collect(),
            facts: names.iter().map(|n| (n.to_string(), split(n).iter().map(|d| d.facts.len()).sum())).collect(),
            relations: data.relations.len(),
            kg_entities: data.kg.entities().len(),
            kg_relation_triples: data.kg.relation_triples().len(),
            kg_attribute_triples: data.kg.attribute_triples().len(),
            coreference_triples: data.corefs.values().map(Vec::len).sum(),
            leakage_removed: data.meta.leakage_removed,
        }
    }
}

fn save_data(work: &WorkDir, data: &PreparedData, tx: &mut Transaction) -> Result<DataSummary> {
    let dir = tx.stage(&work.data())?;
    data.save(&dir)?;
    let summary = DataSummary::of(data);
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthArgs {
    pub seed: u64,
    pub n_docs: usize,
    pub vocab_size: usize,
    pub n_relations: usize,
    pub kg_size: usize,
    /// Preset recorded in the work directory config; its `d_word` sets the
    /// embedding width.
    pub preset: Preset,
}

impl SynthArgs {
    pub fn new(seed: u64, n_docs: usize) -> Self {
        let d = SynthSpec::new(seed, n_docs);
        Self { seed, n_docs, vocab_size: d.vocab_size, n_relations: d.n_relations, kg_size: d.kg_size, preset: Preset::Desk }
    }
}

/// Writes a synthetic corpus as prepared data plus a work-directory config
/// selecting `args.preset`.
pub fn synth(work: &WorkDir, args: &SynthArgs) -> Result<DataSummary> {
    let spec = SynthSpec {
        seed: args.seed,
        n_docs: args.n_docs,
        vocab_size: args.vocab_size,
        n_relations: args.n_relations,
        kg_size: args.kg_size,
        embedding_dim: args.preset.config().d_word,
    };
    let corpus = synth_corpus(&spec)?;
    let data = PreparedData {
        train: corpus.train.documents,
        validation: corpus.validation.documents,
        test: corpus.test.documents,
        kg: corpus.kg,
        corefs: corpus.corefs,
        words: corpus.words,
        chars: corpus.chars,
        relations: corpus.relations,
        meta: DataMeta { origin: "synthetic".into(), kg_only_relations: corpus.kg_only_relations, leakage_removed: 0 },
    };
    let mut tx = Transaction::new();
    let summary = save_data(work, &data, &mut tx)?;
    let conf = tx.stage(&work.config_file())?;
    write_bytes(&conf, format!("# written by synth --seed {} --n-docs {}\npreset = {}\n", args.seed, args.n_docs, args.preset.as_str()).as_bytes())?;
    tx.commit()?;
    Ok(summary)
}

fn required(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| Error::config(format!("prepare needs `{key}`")))
}

fn check_documents(docs: &[Document]) -> Result<()> {
    for d in docs {
        if let Some(v) = validate_document(d).first() {
            return Err(Error::Core(kire_core::error::Error::Data(format!("document {}: {}: {}", d.doc_id, v.field, v.rule))));
        }
    }
    Ok(())
}

/// Loads, links and validates the configured inputs, derives alias
/// coreference triples, filters test leakage from the KG and writes the
/// result to `data/`.
pub fn prepare(work: &WorkDir, config: &RunConfig) -> Result<DataSummary> {
    let p = &config.inputs;
    let vocab = load_relation_vocab(&required(&p.relation_vocab, "relation_vocab")?)?;
    let mut splits = vec![
        load_docred(&required(&p.train_path, "train_path")?, &vocab, SplitName::Train)?,
        load_docred(&required(&p.validation_path, "validation_path")?, &vocab, SplitName::Validation)?,
    ];
    if let Some(test) = &p.test_path {
        splits.push(load_docred(test, &vocab, SplitName::Test)?);
    }
    let sizes: Vec<usize> = splits.iter().map(|s| s.documents.len()).collect();
    let mut docs: Vec<Document> = splits.into_iter().flat_map(|s| s.documents).collect();
    let ids: BTreeSet<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
    if ids.len() != docs.len() {
        return Err(Error::Core(kire_core::error::Error::Data("doc ids repeat across splits".into())));
    }
    if let Some(links) = &p.entity_links {
        let n = load_entity_links(links, &mut docs)?;
        log::info!("applied {n} entity links");
    }
    let mut corefs = match &p.corefs {
        Some(path) => load_coref_predictions(path, &mut docs)?,
        None => CorefSet::new(),
    };
    check_documents(&docs)?;

    let mut kg = load_kg_subset(
        &required(&p.kg_relations, "kg_relations")?,
        &required(&p.kg_attributes, "kg_attributes")?,
        &required(&p.kg_aliases, "kg_aliases")?,
    )?;
    let test = &docs[sizes[0] + sizes[1]..];
    let leakage_removed = if config.leakage_filter && !test.is_empty() { filter_test_leakage(&mut kg, test) } else { 0 };
    if leakage_removed > 0 {
        log::info!("removed {leakage_removed} KG relation triples labeled in the test split");
    }
    for d in &docs {
        let alias = derive_alias_corefs(d, &kg);
        if !alias.is_empty() {
            let entry = corefs.entry(d.doc_id.clone()).or_default();
            let resolver = std::mem::take(entry);
            *entry = alias.into_iter().chain(resolver).collect();
        }
    }

    let words = load_embeddings(&required(&p.word_embeddings, "word_embeddings")?, EmbeddingKind::Word)?;
    let chars = load_embeddings(&required(&p.char_embeddings, "char_embeddings")?, EmbeddingKind::Char)?;
    let lexicon = Lexicon::new(words.clone(), chars.clone())?;
    check_width(&lexicon, &config.model)?;

    let mut rest = docs.into_iter();
    let mut take = |n: usize| rest.by_ref().take(n).collect::<Vec<_>>();
    let (train, validation) = (take(sizes[0]), take(sizes[1]));
    let test = take(sizes.get(2).copied().unwrap_or(0));
    let data = PreparedData {
        train,
        validation,
        test,
        kg,
        corefs,
        words,
        chars,
        relations: vocab,
        meta: DataMeta { origin: "prepared".into(), kg_only_relations: Vec::new(), leakage_removed },
    };
    let mut tx = Transaction::new();
    let summary = save_data(work, &data, &mut tx)?;
    tx.commit()?;
    Ok(summary)
}

fn check_width(lexicon: &Lexicon, config: &Config) -> Result<()> {
    if lexicon.dim() != config.d_word {
        return Err(Error::config(format!("embeddings have width {}, configuration has d_word = {}", lexicon.dim(), config.d_word)));
    }
    Ok(())
}

/// Prepared data and resolved settings of one run.
pub struct Session {
    pub work: WorkDir,
    pub config: RunConfig,
    pub data: PreparedData,
    pub lexicon: Lexicon,
    pub run_id: String,
}

impl Session {
    pub fn open(work: &WorkDir, config: &RunConfig) -> Result<Self> {
        let data = PreparedData::load(&work.data())?;
        let lexicon = data.lexicon()?;
        check_width(&lexicon, &config.model)?;
        Ok(Self { work: work.clone(), config: config.clone(), data, lexicon, run_id: config.run_id() })
    }

    fn model_config(&self) -> &Config {
        &self.config.model
    }

    pub fn checkpoint_dir(&self, name: &str) -> PathBuf {
        self.work.checkpoints(&self.run_id).join(name)
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.work.reports(&self.run_id).join(name)
    }

    /// Trains the attribute autoencoder, or returns an untrained one when
    /// the KG has no attribute triples.
    pub fn pretrain(&self) -> Result<(AttrAutoEncoder, Vec<f64>)> {
        let c = self.model_config();
        if self.data.kg.attribute_triples().is_empty() {
            log::warn!("the KG has no attribute triples; the autoencoder stays untrained");
            return Ok((AttrAutoEncoder::seeded(c, c.seed), Vec::new()));
        }
        let (ae, curve) = pretrain_autoencoder(&self.data.kg, &self.lexicon, c, c.ae_epochs, c.seed)?;
        Ok((ae, curve.0))
    }

    fn saved_autoencoder(&self) -> Result<Option<AttrAutoEncoder>> {
        let dir = self.checkpoint_dir("autoencoder");
        if !dir.join(MANIFEST).is_file() {
            return Ok(None);
        }
        Ok(Some(load_autoencoder(&dir)?.0))
    }

    pub fn context(&self, ae: &AttrAutoEncoder) -> KnowledgeContext {
        KnowledgeContext::build(&self.data.kg, ae, &self.lexicon, self.model_config())
    }

    pub fn prepared(&self, docs: &[Document], ctx: &KnowledgeContext, entity_types: &[String]) -> Vec<PreparedDocument> {
        prepare_documents(docs, &self.data.corefs, ctx, &self.lexicon, entity_types, self.model_config())
    }
}

/// Autoencoder pretraining curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub run_id: String,
    pub epochs: usize,
    /// Mean reconstruction loss before training, then after each epoch.
    pub curve: Vec<f64>,
}

fn write_autoencoder(session: &Session, ae: &AttrAutoEncoder, curve: &[f64], tx: &mut Transaction) -> Result<PretrainReport> {
    let dir = tx.stage(&session.checkpoint_dir("autoencoder"))?;
    save_autoencoder(&dir, ae, session.model_config())?;
    let report = PretrainReport { run_id: session.run_id.clone(), epochs: session.model_config().ae_epochs, curve: curve.to_vec() };
    let path = tx.stage(&session.report_path("autoencoder.json"))?;
    write_json(&path, &report)?;
    Ok(report)
}

pub fn pretrain_ae(work: &WorkDir, config: &RunConfig) -> Result<PretrainReport> {
    let session = Session::open(work, config)?;
    let (ae, curve) = session.pretrain()?;
    let mut tx = Transaction::new();
    let report = write_autoencoder(&session, &ae, &curve, &mut tx)?;
    tx.commit()?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub run_id: String,
    pub best_validation_f1: f64,
    pub history: Vec<EpochRecord>,
}

/// Two-stage training. Reuses the run's autoencoder checkpoint when one
/// exists and pretrains otherwise. Writes the `best` and `last` model
/// checkpoints and the epoch history.
pub fn train_run(work: &WorkDir, config: &RunConfig) -> Result<TrainReport> {
    let session = Session::open(work, config)?;
    let mut tx = Transaction::new();
    let ae = match session.saved_autoencoder()? {
        Some(ae) => ae,
        None => {
            let (ae, curve) = session.pretrain()?;
            write_autoencoder(&session, &ae, &curve, &mut tx)?;
            ae
        }
    };
    let ctx = session.context(&ae);
    let entity_types = collect_entity_types(&session.data.train);
    let train_docs = session.prepared(&session.data.train, &ctx, &entity_types);
    let val_docs = session.prepared(&session.data.validation, &ctx, &entity_types);
    let model = KireModel::new(session.model_config(), entity_types, session.data.relations.clone(), ctx.relation_types())?;
    let outcome = train(model, &train_docs, &val_docs, &ctx)?;

    let best = tx.stage(&session.checkpoint_dir(CheckpointChoice::Best.as_str()))?;
    save_model(&best, &outcome.model, ctx.relation_types(), Some(&outcome.state), false)?;
    let last_model = KireModel { store: outcome.last_epoch.clone(), ..outcome.model.clone() };
    let last = tx.stage(&session.checkpoint_dir(CheckpointChoice::Last.as_str()))?;
    save_model(&last, &last_model, ctx.relation_types(), Some(&outcome.state), true)?;

    let report = TrainReport { run_id: session.run_id.clone(), best_validation_f1: outcome.best_validation_f1, history: outcome.state.history.clone() };
    let path = tx.stage(&session.report_path("train.json"))?;
    write_json(&path, &report)?;
    let conf = tx.stage(&session.report_path("config.conf"))?;
    write_bytes(&conf, config.to_flat().as_bytes())?;
    tx.commit()?;
    Ok(report)
}

/// Scores on the labels that only the KG decides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub relations: Vec<String>,
    pub theta: f64,
    pub validation: Prf,
    pub test: Prf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub run_id: String,
    pub checkpoint: CheckpointChoice,
    /// Threshold selected on validation and applied to every split.
    pub theta: f64,
    pub splits: Vec<MetricReport>,
    pub kg_only: Option<SubsetReport>,
}

impl EvaluationReport {
    pub fn split(&self, name: &str) -> Option<&MetricReport> {
        self.splits.iter().find(|m| m.split == name)
    }
}

/// A trained model with everything needed to score documents.
pub struct LoadedRun {
    pub session: Session,
    pub model: KireModel,
    pub context: KnowledgeContext,
}

impl LoadedRun {
    pub fn open(work: &WorkDir, config: &RunConfig, choice: CheckpointChoice) -> Result<Self> {
        let session = Session::open(work, config)?;
        let ae = session
            .saved_autoencoder()?
            .ok_or_else(|| Error::config(format!("run {} has no autoencoder checkpoint; run `train` first", session.run_id)))?;
        let dir = session.checkpoint_dir(choice.as_str());
        if !dir.join(MANIFEST).is_file() {
            return Err(Error::config(format!("run {} has no {} checkpoint; run `train` first", session.run_id, choice.as_str())));
        }
        let model = load_model(&dir)?.model;
        let context = session.context(&ae);
        Ok(Self { session, model, context })
    }

    pub fn predict(&self, docs: &[Document]) -> Result<kire_core::evaluation::PredictionSet> {
        let prepared = self.session.prepared(docs, &self.context, &self.model.entity_types);
        Ok(self.model.predict(&prepared, &self.context, InjectionMode::Full)?)
    }

    pub fn validation_theta(&self) -> Result<f64> {
        let val = &self.session.data.validation;
        Ok(select_threshold(&self.predict(val)?, val))
    }
}

pub fn evaluate(work: &WorkDir, config: &RunConfig, choice: CheckpointChoice) -> Result<EvaluationReport> {
    let run = LoadedRun::open(work, config, choice)?;
    let data = &run.session.data;
    let names = ["train", "validation", "test"];
    let predictions = names.iter().map(|n| run.predict(data.split(n).unwrap_or(&[]))).collect::<Result<Vec<_>>>()?;
    let theta = select_threshold(&predictions[1], &data.validation);
    let splits = names
        .iter()
        .zip(&predictions)
        .map(|(n, p)| metric_report(n, p, data.split(n).unwrap_or(&[]), theta, &data.train))
        .collect();
    let kg_only = (!data.meta.kg_only_relations.is_empty()).then(|| {
        let keep = |r: &str| data.meta.kg_only_relations.iter().any(|k| k == r);
        let theta = select_threshold_for_relations(&predictions[1], &data.validation, keep);
        SubsetReport {
            relations: data.meta.kg_only_relations.clone(),
            theta,
            validation: f1_for_relations(&predictions[1], &data.validation, theta, keep),
            test: f1_for_relations(&predictions[2], &data.test, theta, keep),
        }
    });
    let report = EvaluationReport { run_id: run.session.run_id.clone(), checkpoint: choice, theta, splits, kg_only };
    let mut tx = Transaction::new();
    let path = tx.stage(&run.session.report_path(&format!("metrics_{}.json", choice.as_str())))?;
    write_json(&path, &report)?;
    tx.commit()?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocumentPredictions {
    pub doc_id: String,
    pub facts: Vec<ScoredFact>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub run_id: String,
    pub checkpoint: CheckpointChoice,
    pub split: String,
    pub theta: f64,
    pub documents: Vec<DocumentPredictions>,
}

/// Facts scoring at least `threshold` (or the validation-selected
/// threshold) for every document of `split`.
pub fn predict(work: &WorkDir, config: &RunConfig, split: &str, choice: CheckpointChoice, threshold: Option<f64>) -> Result<PredictionReport> {
    let run = LoadedRun::open(work, config, choice)?;
    let docs = run.session.data.split(split).ok_or_else(|| Error::config(format!("unknown split {split:?}")))?;
    let theta = match threshold {
        Some(t) if t > 0.0 && t < 1.0 => t,
        Some(t) => return Err(Error::config(format!("threshold must lie in (0, 1), got {t}"))),
        None => run.validation_theta()?,
    };
    let predictions = run.predict(docs)?;
    let documents = docs
        .iter()
        .map(|d| DocumentPredictions {
            doc_id: d.doc_id.clone(),
            facts: predictions.docs().get(&d.doc_id).map_or_else(Vec::new, |f| f.iter().filter(|f| f.score >= theta).cloned().collect()),
        })
        .collect();
    let report = PredictionReport { run_id: run.session.run_id.clone(), checkpoint: choice, split: split.to_string(), theta, documents };
    let mut tx = Transaction::new();
    let path = tx.stage(&run.session.report_path(&format!("predictions_{split}_{}.json", choice.as_str())))?;
    write_json(&path, &report)?;
    tx.commit()?;
    Ok(report)
}

/// Entity types and relation labels used when no data has been prepared.
const PLACEHOLDER_TYPES: [&str; 6] = ["PER", "ORG", "LOC", "TIME", "NUM", "MISC"];
const PLACEHOLDER_RELATIONS: usize = 96;

/// Tokens inside entity mentions.
fn aligned_tokens(doc: &Document) -> usize {
    let covered: BTreeSet<usize> = doc.entities.iter().flat_map(|e| e.mentions.iter().flat_map(|m| m.span.start..m.span.end)).collect();
    covered.len()
}

/// Parameter counts against the closed-form formulas. `n_token`/`n_align`
/// default to the largest training document of the prepared data, or 0.
pub fn param_count(work: Option<&WorkDir>, config: &RunConfig, n_token: Option<usize>, n_align: Option<usize>) -> Result<ParameterReport> {
    let data = match work.map(|w| w.data()).filter(|d| d.join("meta.json").is_file()) {
        Some(dir) => Some(PreparedData::load(&dir)?),
        None => None,
    };
    let (types, relations, kg_types) = match &data {
        Some(d) => (collect_entity_types(&d.train), d.relations.clone(), d.kg.relations().len()),
        None => (
            PLACEHOLDER_TYPES.iter().map(|s| s.to_string()).collect(),
            RelationVocab::new((0..PLACEHOLDER_RELATIONS).map(|i| format!("r{i}")))?,
            1,
        ),
    };
    let largest = |f: fn(&Document) -> usize| data.as_ref().and_then(|d| d.train.iter().map(f).max()).unwrap_or(0);
    let n_token = n_token.unwrap_or_else(|| largest(Document::num_tokens));
    let n_align = n_align.unwrap_or_else(|| largest(aligned_tokens));
    let model = KireModel::new(&config.model, types, relations, kg_types.max(1))?;
    let report = count_parameters(&model, n_token, n_align);
    if let Some(w) = work {
        let mut tx = Transaction::new();
        let path = tx.stage(&w.reports(&config.run_id()).join("param_count.json"))?;
        write_json(&path, &report)?;
        tx.commit()?;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n.max(1.0);
        let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub run_id: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub runs: Vec<SeedRun>,
    pub summary: BTreeMap<String, MeanStd>,
}

fn flatten(report: &EvaluationReport) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for m in &report.splits {
        for (k, v) in [("precision", m.precision), ("recall", m.recall), ("f1", m.f1), ("ign_f1", m.ign_f1)] {
            out.insert(format!("{}.{k}", m.split), v);
        }
    }
    if let Some(kg) = &report.kg_only {
        out.insert("kg_only.test.f1".into(), kg.test.f1);
    }
    out
}

fn seed_run(work: &WorkDir, config: &RunConfig) -> Result<SeedRun> {
    train_run(work, config)?;
    let report = evaluate(work, config, CheckpointChoice::Best)?;
    Ok(SeedRun { seed: config.model.seed, run_id: config.run_id(), metrics: flatten(&report) })
}

/// Trains and evaluates seeds `seed, seed + 1, …, seed + k - 1` and reports
/// the mean and standard deviation of every metric.
pub fn multi_seed(work: &WorkDir, config: &RunConfig, k: usize, parallel: bool) -> Result<MultiSeedReport> {
    if k == 0 {
        return Err(Error::config("multi-seed needs k >= 1"));
    }
    let configs: Vec<RunConfig> = (0..k as u64)
        .map(|i| {
            let mut c = config.clone();
            c.model.seed = config.model.seed + i;
            c
        })
        .collect();
    let results: Vec<Result<SeedRun>> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || seed_run(work, c))).collect();
            handles.into_iter().map(|h| h.join().expect("seed run panicked")).collect()
        })
    } else {
        configs.iter().map(|c| seed_run(work, c)).collect()
    };
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let keys: BTreeSet<&String> = runs.iter().flat_map(|r| r.metrics.keys()).collect();
    let summary = keys
        .into_iter()
        .map(|key| {
            let values: Vec<f64> = runs.iter().filter_map(|r| r.metrics.get(key).copied()).collect();
            (key.clone(), MeanStd::of(&values))
        })
        .collect();
    let report = MultiSeedReport { runs, summary };
    let mut tx = Transaction::new();
    let path = tx.stage(&work.reports(&config.run_id()).join(format!("multi_seed_k{k}.json")))?;
    write_json(&path, &report)?;
    tx.commit()?;
    Ok(report)
}
