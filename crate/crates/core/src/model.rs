//! The full pipeline: base encoder, coreference injection, KG encoding,
//! reconciliation and the relation predictor.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::coref::{coref_inject, coref_loss, CorefStudent};
use crate::datamodel::{Config, CorefSet, CoreferenceTriple, Document, KgSubset, RelationVocab};
use crate::embeddings::Lexicon;
use crate::encoders::{gold_matrix, pair_reps, re_loss, BaseEncoder, EncoderInputFeatures, RelationPredictor};
use crate::error::Result;
use crate::evaluation::{PredictionSet, ScoredFact};
use crate::kg::{attribute_codes, AttrAutoEncoder, KgEncoder, KgGraph};
use crate::params::ParamStore;
use crate::reconcile::Reconciler;
use crate::tensor::Matrix;

/// How the injection layer participates in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InjectionMode {
    /// `H' = H`; auxiliary losses are not computed.
    Identity,
    /// Coreference injection, KG encoding and reconciliation.
    Full,
    /// Auxiliary losses are computed on `H` but `H' = H`.
    Bypassed,
}

/// KG-side constants shared by every document: the augmented graph and the
/// pretrained attribute codes of every KG entity.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeContext {
    pub graph: KgGraph,
    pub codes: Vec<Vec<Vec<f64>>>,
    pub entity_index: BTreeMap<String, usize>,
}

impl KnowledgeContext {
    pub fn build(kg: &KgSubset, autoencoder: &AttrAutoEncoder, lexicon: &Lexicon, config: &Config) -> Self {
        let entity_index = kg.entities().iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
        Self { graph: KgGraph::from_subset(kg), codes: attribute_codes(kg, autoencoder, lexicon, config.n_max), entity_index }
    }

    pub fn relation_types(&self) -> usize {
        self.graph.relation_types
    }
}

/// A document with its constant model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDocument {
    pub doc: Document,
    pub features: EncoderInputFeatures,
    pub triples: Vec<CoreferenceTriple>,
    /// KG node of each candidate row, one row per document entity.
    pub candidates: Vec<Option<usize>>,
    /// Candidate row of each token, if it lies in an entity mention.
    pub alignment: Vec<Option<usize>>,
}

impl PreparedDocument {
    pub fn new(doc: &Document, triples: Vec<CoreferenceTriple>, ctx: &KnowledgeContext, lexicon: &Lexicon, entity_types: &[String], config: &Config) -> Self {
        let features = EncoderInputFeatures::build(doc, lexicon, entity_types, config.max_clusters);
        let mut candidates = Vec::new();
        let mut alignment = vec![None; doc.num_tokens()];
        for ent in &doc.entities {
            let row = candidates.len();
            candidates.push(ent.kg_link.as_deref().and_then(|id| ctx.entity_index.get(id)).copied());
            for m in &ent.mentions {
                for slot in &mut alignment[m.span.start..m.span.end] {
                    slot.get_or_insert(row);
                }
            }
        }
        Self { doc: doc.clone(), features, triples, candidates, alignment }
    }
}

pub fn prepare_documents(docs: &[Document], corefs: &CorefSet, ctx: &KnowledgeContext, lexicon: &Lexicon, entity_types: &[String], config: &Config) -> Vec<PreparedDocument> {
    docs.iter()
        .map(|d| PreparedDocument::new(d, corefs.get(&d.doc_id).cloned().unwrap_or_default(), ctx, lexicon, entity_types, config))
        .collect()
}

/// Per-document forward result. Losses are `1 × 1`.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Option<Var>,
    pub pairs: Vec<(usize, usize)>,
    pub loss_re: Var,
    pub loss_cr: Var,
    pub loss_kg: Var,
}

/// Every trainable module in one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct KireModel {
    pub config: Config,
    pub store: ParamStore,
    pub encoder: BaseEncoder,
    pub student: CorefStudent,
    pub kg_encoder: KgEncoder,
    pub reconciler: Reconciler,
    pub predictor: RelationPredictor,
    pub entity_types: Vec<String>,
    pub relations: RelationVocab,
}

impl KireModel {
    /// Deterministic initialization from `config.seed`.
    pub fn new(config: &Config, entity_types: Vec<String>, relations: RelationVocab, kg_relation_types: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = BaseEncoder::new(&mut store, config, entity_types.len(), &mut rng);
        let student = CorefStudent::new(&mut store, config, &mut rng);
        let kg_encoder = KgEncoder::new(&mut store, config, kg_relation_types, &mut rng);
        let reconciler = Reconciler::new(&mut store, config, &mut rng);
        let predictor = RelationPredictor::new(&mut store, config.d_token, relations.len(), &mut rng);
        Ok(Self { config: config.clone(), store, encoder, student, kg_encoder, reconciler, predictor, entity_types, relations })
    }

    /// Names of the parameters trained in the base stage.
    pub fn is_base_parameter(name: &str) -> bool {
        name.starts_with("encoder.") || name.starts_with("predictor.")
    }

    pub fn forward(&self, tape: &mut Tape<'_>, prep: &PreparedDocument, ctx: &KnowledgeContext, mode: InjectionMode) -> Result<ForwardPass> {
        let doc = &prep.doc;
        let h = self.encoder.encode(tape, &prep.features)?;
        let zero = |tape: &mut Tape<'_>| tape.constant(Matrix::zeros(1, 1));
        let (h_final, loss_cr, loss_kg) = match mode {
            InjectionMode::Identity => (h, zero(tape), zero(tape)),
            InjectionMode::Bypassed => {
                let l_cr = coref_loss(tape, h, doc, &prep.triples, &self.student)?;
                let ents = self.candidate_reps(tape, prep, ctx)?;
                let l_kg = self.reconciler.alignment_loss(tape, h, ents, &prep.alignment)?;
                (h, l_cr, l_kg)
            }
            InjectionMode::Full => {
                let co = coref_inject(tape, h, doc, &prep.triples, &self.student)?;
                let ents = self.candidate_reps(tape, prep, ctx)?;
                let rec = self.reconciler.aggregate(tape, co.hidden, ents, &prep.alignment)?;
                let l_kg = self.reconciler.alignment_loss(tape, rec.tokens, ents, &prep.alignment)?;
                (rec.tokens, co.loss, l_kg)
            }
        };
        let Some((heads, tails, pairs)) = pair_reps(tape, h_final, doc) else {
            let loss_re = zero(tape);
            return Ok(ForwardPass { logits: None, pairs: Vec::new(), loss_re, loss_cr, loss_kg });
        };
        let logits = self.predictor.logits(tape, heads, tails);
        let gold = gold_matrix(doc, &pairs, |r| self.relations.index_of(r), self.relations.len());
        let loss_re = re_loss(tape, logits, gold);
        Ok(ForwardPass { logits: Some(logits), pairs, loss_re, loss_cr, loss_kg })
    }

    fn candidate_reps(&self, tape: &mut Tape<'_>, prep: &PreparedDocument, ctx: &KnowledgeContext) -> Result<Option<Var>> {
        if prep.candidates.is_empty() {
            return Ok(None);
        }
        self.kg_encoder.encode_candidates(tape, &ctx.graph, &ctx.codes, &prep.candidates).map(Some)
    }

    /// Probability of every relation for every ordered entity pair.
    pub fn predict_document(&self, prep: &PreparedDocument, ctx: &KnowledgeContext, mode: InjectionMode) -> Result<Vec<ScoredFact>> {
        let mut tape = Tape::new(&self.store);
        let pass = self.forward(&mut tape, prep, ctx, mode)?;
        let Some(logits) = pass.logits else { return Ok(Vec::new()) };
        let z = tape.value(logits);
        let mut out = Vec::with_capacity(pass.pairs.len() * self.relations.len());
        for (row, &(head, tail)) in pass.pairs.iter().enumerate() {
            for r in 0..self.relations.len() {
                let score = crate::autograd::sigmoid(z.get(row, r));
                out.push(ScoredFact { head, tail, relation: self.relations.label(r).into(), score });
            }
        }
        Ok(out)
    }

    pub fn predict(&self, docs: &[PreparedDocument], ctx: &KnowledgeContext, mode: InjectionMode) -> Result<PredictionSet> {
        let mut set = PredictionSet::new();
        for prep in docs {
            for fact in self.predict_document(prep, ctx, mode)? {
                set.insert(&prep.doc.doc_id, fact)?;
            }
        }
        Ok(set)
    }
}
