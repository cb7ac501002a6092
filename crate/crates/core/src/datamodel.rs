//! Documents, knowledge-graph subsets, coreference triples and the model
//! configuration.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Half-open token range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains_span(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub sent_idx: usize,
    /// Document-level token offsets.
    pub span: Span,
    pub surface: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub entity_type: String,
    pub mentions: Vec<Mention>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kg_link: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationFact {
    pub head: usize,
    pub tail: usize,
    pub relation: String,
}

/// A pre-tokenized document. Entity ids are their indices in `entities`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub sentence_bounds: Vec<Span>,
    pub entities: Vec<Entity>,
    #[serde(default)]
    pub facts: Vec<RelationFact>,
    /// Resolver spans that are not entity mentions (pronouns, noun phrases).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub free_mentions: Vec<Mention>,
}

/// Reference to a mention inside one document.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MentionRef {
    Entity { entity: usize, mention: usize },
    Free(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorefSource {
    Alias,
    Resolver,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreferenceTriple {
    pub m_s: MentionRef,
    pub m_t: MentionRef,
    pub p_cr: f64,
    pub source: CorefSource,
}

impl CoreferenceTriple {
    pub fn new(m_s: MentionRef, m_t: MentionRef, p_cr: f64, source: CorefSource) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_cr) {
            return Err(Error::Invalid(format!("coreference probability {p_cr} outside [0, 1]")));
        }
        if m_s == m_t {
            return Err(Error::Invalid("coreference triple links a mention to itself".to_string()));
        }
        Ok(Self { m_s, m_t, p_cr, source })
    }
}

/// Coreference triples grouped by document id.
pub type CorefSet = BTreeMap<String, Vec<CoreferenceTriple>>;

impl Document {
    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn mention(&self, r: MentionRef) -> Option<&Mention> {
        match r {
            MentionRef::Entity { entity, mention } => self.entities.get(entity)?.mentions.get(mention),
            MentionRef::Free(i) => self.free_mentions.get(i),
        }
    }

    /// Every mention in deterministic order: entity mentions first, then free mentions.
    pub fn mention_refs(&self) -> Vec<MentionRef> {
        let mut out = Vec::new();
        for (e, ent) in self.entities.iter().enumerate() {
            for m in 0..ent.mentions.len() {
                out.push(MentionRef::Entity { entity: e, mention: m });
            }
        }
        out.extend((0..self.free_mentions.len()).map(MentionRef::Free));
        out
    }

    /// Joined surface of a token span.
    pub fn span_text(&self, span: Span) -> String {
        self.tokens[span.start.min(self.tokens.len())..span.end.min(self.tokens.len())].join(" ")
    }

    /// The sentence containing token `t`.
    pub fn sentence_of(&self, t: usize) -> Option<usize> {
        self.sentence_bounds.iter().position(|s| s.start <= t && t < s.end)
    }
}

/// A broken invariant found by [`validate_document`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

fn violation(field: String, rule: &str) -> Violation {
    Violation { field, rule: rule.to_string() }
}

fn check_mention(doc: &Document, m: &Mention, field: String, out: &mut Vec<Violation>) {
    if m.span.is_empty() {
        out.push(violation(field, "empty span"));
        return;
    }
    if m.span.end > doc.tokens.len() {
        out.push(violation(field, "span out of range"));
        return;
    }
    match doc.sentence_bounds.get(m.sent_idx) {
        Some(s) if s.contains_span(&m.span) => {}
        _ => out.push(violation(format!("{field}.span"), "span outside its sentence")),
    }
    if doc.span_text(m.span) != m.surface {
        out.push(violation(format!("{field}.surface"), "surface differs from span tokens"));
    }
}

/// Checks every document, entity and mention invariant. An empty result
/// means the document is well formed.
pub fn validate_document(doc: &Document) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut expected_start = 0;
    for (i, s) in doc.sentence_bounds.iter().enumerate() {
        if s.start != expected_start || s.end < s.start {
            out.push(violation(format!("sentence_bounds[{i}]"), "sentences must be ordered, disjoint and contiguous"));
        }
        expected_start = s.end;
    }
    if expected_start != doc.tokens.len() {
        out.push(violation("sentence_bounds".to_string(), "sentences must cover every token"));
    }

    for (e, ent) in doc.entities.iter().enumerate() {
        if ent.mentions.is_empty() {
            out.push(violation(format!("entities[{e}].mentions"), "entity without mentions"));
        }
        for (k, m) in ent.mentions.iter().enumerate() {
            check_mention(doc, m, format!("entities[{e}].mentions[{k}]"), &mut out);
        }
    }
    for (k, m) in doc.free_mentions.iter().enumerate() {
        check_mention(doc, m, format!("free_mentions[{k}]"), &mut out);
    }

    let n = doc.entities.len();
    for (i, f) in doc.facts.iter().enumerate() {
        if f.head >= n || f.tail >= n {
            out.push(violation(format!("facts[{i}]"), "entity index out of range"));
        } else if f.head == f.tail {
            out.push(violation(format!("facts[{i}]"), "self-relation"));
        }
    }
    out
}

/// All ordered pairs of distinct entity indices, row-major.
pub fn entity_pairs(doc: &Document) -> Vec<(usize, usize)> {
    let n = doc.entities.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for h in 0..n {
        for t in 0..n {
            if h != t {
                out.push((h, t));
            }
        }
    }
    out
}

/// Relation labels with dense indices in file order. N/A is never a member.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationVocab {
    labels: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl RelationVocab {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::default();
        for l in labels {
            let l = l.into();
            if vocab.index.contains_key(&l) {
                return Err(Error::Vocabulary(format!("duplicate relation label {l}")));
            }
            vocab.index.insert(l.clone(), vocab.labels.len());
            vocab.labels.push(l);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct KgRelationTriple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct KgAttributeTriple {
    pub entity: usize,
    pub attribute: usize,
    pub value: String,
}

/// Knowledge-graph subset: entities `U`, relation vocabulary `R`, attribute
/// vocabulary `A`, relation triples `X`, attribute triples `Y` and aliases.
///
/// Identifiers are interned in first-seen order; triples refer to them by
/// index, so every endpoint is in `U` by construction. Duplicate triples
/// are dropped on insertion.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KgSubset {
    entities: Vec<String>,
    entity_index: BTreeMap<String, usize>,
    relations: Vec<String>,
    relation_index: BTreeMap<String, usize>,
    attributes: Vec<String>,
    attribute_index: BTreeMap<String, usize>,
    relation_triples: Vec<KgRelationTriple>,
    relation_seen: BTreeMap<KgRelationTriple, ()>,
    attribute_triples: Vec<KgAttributeTriple>,
    attribute_seen: BTreeMap<KgAttributeTriple, ()>,
    aliases: BTreeMap<usize, Vec<String>>,
}

fn intern(list: &mut Vec<String>, index: &mut BTreeMap<String, usize>, id: &str) -> usize {
    if let Some(&i) = index.get(id) {
        return i;
    }
    index.insert(id.to_string(), list.len());
    list.push(id.to_string());
    list.len() - 1
}

impl KgSubset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_entity(&mut self, id: &str) -> usize {
        intern(&mut self.entities, &mut self.entity_index, id)
    }

    /// Returns false when the triple was already present.
    pub fn add_relation_triple(&mut self, head: &str, relation: &str, tail: &str) -> bool {
        let head = self.add_entity(head);
        let tail = self.add_entity(tail);
        let relation = intern(&mut self.relations, &mut self.relation_index, relation);
        let t = KgRelationTriple { head, relation, tail };
        if self.relation_seen.insert(t.clone(), ()).is_some() {
            return false;
        }
        self.relation_triples.push(t);
        true
    }

    pub fn add_attribute_triple(&mut self, entity: &str, attribute: &str, value: &str) -> bool {
        let entity = self.add_entity(entity);
        let attribute = intern(&mut self.attributes, &mut self.attribute_index, attribute);
        let t = KgAttributeTriple { entity, attribute, value: value.to_string() };
        if self.attribute_seen.insert(t.clone(), ()).is_some() {
            return false;
        }
        self.attribute_triples.push(t);
        true
    }

    pub fn add_aliases<I, S>(&mut self, entity: &str, aliases: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let e = self.add_entity(entity);
        let list = self.aliases.entry(e).or_default();
        for a in aliases {
            let a = a.into();
            if !list.contains(&a) {
                list.push(a);
            }
        }
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn entity_index(&self, id: &str) -> Option<usize> {
        self.entity_index.get(id).copied()
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn relation_triples(&self) -> &[KgRelationTriple] {
        &self.relation_triples
    }

    pub fn attribute_triples(&self) -> &[KgAttributeTriple] {
        &self.attribute_triples
    }

    pub fn aliases(&self, entity: usize) -> &[String] {
        self.aliases.get(&entity).map_or(&[], Vec::as_slice)
    }

    pub fn alias_map(&self) -> &BTreeMap<usize, Vec<String>> {
        &self.aliases
    }

    /// Attribute triples of one entity in insertion order.
    pub fn attributes_of(&self, entity: usize) -> impl Iterator<Item = &KgAttributeTriple> {
        self.attribute_triples.iter().filter(move |t| t.entity == entity)
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Drops relation triples matching `keep == false`, preserving order.
    pub fn retain_relation_triples(&mut self, mut keep: impl FnMut(&KgRelationTriple) -> bool) -> usize {
        let before = self.relation_triples.len();
        self.relation_triples.retain(|t| keep(t));
        self.relation_seen = self.relation_triples.iter().cloned().map(|t| (t, ())).collect();
        before - self.relation_triples.len()
    }
}

/// Per-token representations `H` (`J × d_token`).
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates(Matrix);

impl HiddenStates {
    pub fn new(m: Matrix, doc: &Document) -> Result<Self> {
        if m.rows() != doc.num_tokens() {
            return Err(Error::Shape(format!("{} rows for a {}-token document", m.rows(), doc.num_tokens())));
        }
        if !m.is_finite() {
            return Err(Error::Numerical("non-finite hidden state".to_string()));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    Cnn,
    Lstm,
    Bilstm,
    ContextAware,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    Kire,
    RepAvg,
    RepConcat,
    Mlp,
}

/// Activation used inside the reconciliation aggregators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconcileActivation {
    Gelu,
    /// Test configuration: keeps aggregator algebra exact.
    Identity,
}

/// Every dimension and hyperparameter of the model and trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub d_token: usize,
    pub d_mlp: usize,
    pub d_dist: usize,
    pub beta: usize,
    pub d_word: usize,
    pub d_char: usize,
    pub d_auto: usize,
    pub n_max: usize,
    pub n_kernel: usize,
    pub d_kernel: usize,
    pub n_layer: usize,
    pub n_head: usize,
    pub d_rgat: usize,
    pub d_ent: usize,
    pub d_rel: usize,
    pub n_agg: usize,
    pub d_out: usize,
    pub d_type: usize,
    pub d_cluster: usize,
    pub max_clusters: usize,
    pub cnn_layers: usize,
    pub cnn_kernel: usize,
    pub ae_hidden: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub learning_rate: f64,
    pub ae_learning_rate: f64,
    pub batch_size: usize,
    pub base_epochs: usize,
    pub kire_epochs: usize,
    pub ae_epochs: usize,
    pub grad_clip: f64,
    pub freeze_base: bool,
    pub seed: u64,
    pub encoder: EncoderVariant,
    pub fusion_strategy: FusionStrategy,
    pub reconcile_activation: ReconcileActivation,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            d_token: 100,
            d_mlp: 256,
            d_dist: 20,
            beta: 8,
            d_word: 100,
            d_char: 100,
            d_auto: 50,
            n_max: 10,
            n_kernel: 100,
            d_kernel: 3,
            n_layer: 3,
            n_head: 2,
            d_rgat: 100,
            d_ent: 100,
            d_rel: 20,
            n_agg: 2,
            d_out: 100,
            d_type: 20,
            d_cluster: 20,
            max_clusters: 64,
            cnn_layers: 2,
            cnn_kernel: 3,
            ae_hidden: 50,
            alpha1: 1.0,
            alpha2: 0.01,
            alpha3: 0.01,
            learning_rate: 0.0005,
            ae_learning_rate: 0.01,
            batch_size: 4,
            base_epochs: 30,
            kire_epochs: 30,
            ae_epochs: 30,
            grad_clip: 1.0,
            freeze_base: false,
            seed: 0,
            encoder: EncoderVariant::Bilstm,
            fusion_strategy: FusionStrategy::Kire,
            reconcile_activation: ReconcileActivation::Gelu,
        }
    }
}

impl Config {
    /// A narrow configuration for desk-scale experiments and tests. Widths
    /// shrink and the learning rate rises to suit a few hundred optimizer
    /// steps; loss weights and layer counts keep their defaults.
    pub fn desk() -> Self {
        Self {
            d_token: 32,
            d_mlp: 32,
            d_dist: 8,
            beta: 4,
            d_word: 16,
            d_char: 16,
            d_auto: 16,
            n_max: 4,
            n_kernel: 16,
            d_kernel: 1,
            d_rgat: 16,
            d_ent: 16,
            d_rel: 8,
            d_out: 32,
            d_type: 8,
            d_cluster: 8,
            max_clusters: 16,
            ae_hidden: 16,
            learning_rate: 0.002,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_token", self.d_token),
            ("d_mlp", self.d_mlp),
            ("d_dist", self.d_dist),
            ("d_word", self.d_word),
            ("d_char", self.d_char),
            ("d_auto", self.d_auto),
            ("n_max", self.n_max),
            ("n_kernel", self.n_kernel),
            ("d_kernel", self.d_kernel),
            ("n_layer", self.n_layer),
            ("n_head", self.n_head),
            ("d_rgat", self.d_rgat),
            ("d_ent", self.d_ent),
            ("d_rel", self.d_rel),
            ("n_agg", self.n_agg),
            ("d_out", self.d_out),
            ("d_type", self.d_type),
            ("d_cluster", self.d_cluster),
            ("max_clusters", self.max_clusters),
            ("cnn_layers", self.cnn_layers),
            ("cnn_kernel", self.cnn_kernel),
            ("ae_hidden", self.ae_hidden),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be a positive integer")));
            }
        }
        for (name, a) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("alpha3", self.alpha3)] {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative")));
            }
        }
        if !(self.learning_rate > 0.0 && self.ae_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".to_string()));
        }
        if self.d_word != self.d_char {
            return Err(Error::Config("d_word must equal d_char".to_string()));
        }
        if self.n_kernel != self.d_ent {
            return Err(Error::Config("n_kernel must equal d_ent (attribute pooling width)".to_string()));
        }
        if self.d_rgat != self.d_ent {
            return Err(Error::Config("d_rgat must equal d_ent (graph output feeds the aggregators)".to_string()));
        }
        if self.d_token % self.n_head != 0 || self.d_ent % self.n_head != 0 {
            return Err(Error::Config("n_head must divide d_token and d_ent".to_string()));
        }
        if self.cnn_kernel % 2 == 0 {
            return Err(Error::Config("cnn_kernel must be odd for same padding".to_string()));
        }
        if self.d_kernel > self.n_max {
            return Err(Error::Config("d_kernel must not exceed n_max".to_string()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    pub(crate) fn two_sentence_doc() -> Document {
        let tokens: Vec<String> =
            ["Alice", "met", "Bob", ".", "She", "likes", "Bob", "Smith", "."].iter().map(|s| s.to_string()).collect();
        let m = |sent_idx, start, end, surface: &str| Mention { sent_idx, span: Span::new(start, end), surface: surface.into() };
        Document {
            doc_id: "d0".into(),
            tokens,
            sentence_bounds: vec![Span::new(0, 4), Span::new(4, 9)],
            entities: vec![
                Entity { entity_type: "PER".into(), mentions: vec![m(0, 0, 1, "Alice")], kg_link: None },
                Entity {
                    entity_type: "PER".into(),
                    mentions: vec![m(0, 2, 3, "Bob"), m(1, 6, 8, "Bob Smith")],
                    kg_link: Some("Q1".into()),
                },
            ],
            facts: vec![RelationFact { head: 0, tail: 1, relation: "knows".into() }],
            free_mentions: vec![m(1, 4, 5, "She")],
        }
    }

    #[test]
    fn well_formed_document_has_no_violations() {
        assert!(validate_document(&two_sentence_doc()).is_empty());
    }

    #[test]
    fn empty_span_is_reported_once() {
        let mut doc = two_sentence_doc();
        doc.entities[0].mentions[0] = Mention { sent_idx: 1, span: Span::new(5, 5), surface: String::new() };
        let v = validate_document(&doc);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].rule, "empty span");
    }

    #[test]
    fn self_relation_is_reported() {
        let mut doc = two_sentence_doc();
        doc.facts[0].tail = 0;
        let v = validate_document(&doc);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "self-relation");
    }

    #[test]
    fn mention_crossing_sentence_is_reported() {
        let mut doc = two_sentence_doc();
        doc.entities[0].mentions[0] = Mention { sent_idx: 0, span: Span::new(3, 5), surface: ". She".into() };
        let v = validate_document(&doc);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "span outside its sentence");
    }

    #[test]
    fn entity_pairs_small_cases() {
        let mut doc = two_sentence_doc();
        assert_eq!(entity_pairs(&doc), vec![(0, 1), (1, 0)]);
        doc.entities.truncate(1);
        assert!(entity_pairs(&doc).is_empty());
        let e = doc.entities[0].clone();
        doc.entities = vec![e; 4];
        assert_eq!(entity_pairs(&doc).len(), 12);
    }

    #[test]
    fn kg_subset_deduplicates() {
        let mut kg = KgSubset::new();
        assert!(kg.add_relation_triple("Q1", "P1", "Q2"));
        assert!(!kg.add_relation_triple("Q1", "P1", "Q2"));
        assert!(kg.add_relation_triple("Q2", "P2", "Q3"));
        assert_eq!(kg.entities().len(), 3);
        assert_eq!(kg.relation_triples().len(), 2);
        assert_eq!(kg.relations(), ["P1", "P2"]);
    }

    #[test]
    fn default_config_is_valid_and_desk_too() {
        Config::default().validate().unwrap();
        Config::desk().validate().unwrap();
        let c = Config::default();
        assert_eq!((c.d_mlp, c.d_word, c.d_char, c.d_auto, c.n_layer, c.n_agg), (256, 100, 100, 50, 3, 2));
        assert_eq!((c.alpha1, c.alpha2, c.alpha3, c.learning_rate, c.batch_size), (1.0, 0.01, 0.01, 0.0005, 4));
    }

    #[test]
    fn coref_triple_rejects_bad_probability() {
        let a = MentionRef::Free(0);
        let b = MentionRef::Free(1);
        assert!(CoreferenceTriple::new(a, b, 1.5, CorefSource::Resolver).is_err());
        assert!(CoreferenceTriple::new(a, a, 0.5, CorefSource::Resolver).is_err());
    }

    proptest! {
        #[test]
        fn entity_pairs_count_is_n_times_n_minus_one(n in 0usize..12) {
            let mut doc = two_sentence_doc();
            let e = doc.entities[0].clone();
            doc.entities = vec![e; n];
            let pairs = entity_pairs(&doc);
            prop_assert_eq!(pairs.len(), n * n.saturating_sub(1));
            prop_assert!(pairs.iter().all(|(h, t)| h != t));
        }
    }
}
