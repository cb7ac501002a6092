//! Conversion of external records (DocRED-format documents, KG triples,
//! resolver output, entity links) into the data model, alias coreference
//! derivation, KG leakage filtering, and the synthetic corpus generator.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    CorefSet, CorefSource, CoreferenceTriple, Document, Entity, KgSubset, Mention, MentionRef, RelationFact, RelationVocab, Span,
};
use crate::embeddings::{EmbeddingKind, EmbeddingTable};
use crate::error::{Error, Result};
use crate::evaluation::canonical_surface;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Validation => "validation",
            Self::Test => "test",
        }
    }
}

/// Documents of one split; doc ids are unique.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub documents: Vec<Document>,
}

impl DatasetSplit {
    pub fn new(name: SplitName, documents: Vec<Document>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for d in &documents {
            if !seen.insert(d.doc_id.as_str()) {
                return Err(Error::Data(format!("duplicate doc_id {} in {} split", d.doc_id, name.as_str())));
            }
        }
        Ok(Self { name, documents })
    }

    pub fn fact_count(&self) -> usize {
        self.documents.iter().map(|d| d.facts.len()).sum()
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocredMention {
    pub name: String,
    pub sent_id: usize,
    pub pos: Vec<usize>,
    #[serde(rename = "type")]
    pub entity_type: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocredLabel {
    pub h: usize,
    pub t: usize,
    pub r: String,
}

/// One element of a DocRED-format JSON array. Unknown fields (evidence,
/// etc.) are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocredRecord {
    pub title: String,
    pub sents: Vec<Vec<String>>,
    #[serde(rename = "vertexSet")]
    pub vertex_set: Vec<Vec<DocredMention>>,
    #[serde(default)]
    pub labels: Vec<DocredLabel>,
}

/// Converts one record. Sentence-local positions become document offsets;
/// mention surfaces are the joined span tokens.
pub fn docred_to_document(index: usize, record: &DocredRecord, vocab: &RelationVocab) -> Result<Document> {
    let mut bounds = Vec::with_capacity(record.sents.len());
    let mut tokens = Vec::new();
    for s in &record.sents {
        let start = tokens.len();
        tokens.extend(s.iter().cloned());
        bounds.push(Span::new(start, tokens.len()));
    }
    let mut entities = Vec::with_capacity(record.vertex_set.len());
    for (e, cluster) in record.vertex_set.iter().enumerate() {
        if cluster.is_empty() {
            return Err(Error::Data(format!("element {index}: entity {e} has no mentions")));
        }
        let mut mentions = Vec::with_capacity(cluster.len());
        for (k, m) in cluster.iter().enumerate() {
            let sent = bounds
                .get(m.sent_id)
                .ok_or_else(|| Error::Span(format!("element {index}: entity {e} mention {k} sentence {} out of range", m.sent_id)))?;
            let [a, b] = m.pos[..] else {
                return Err(Error::Span(format!("element {index}: entity {e} mention {k} pos must have two offsets")));
            };
            if a >= b || sent.start + b > sent.end {
                return Err(Error::Span(format!("element {index}: entity {e} mention {k} pos [{a}, {b}) outside sentence {}", m.sent_id)));
            }
            let span = Span::new(sent.start + a, sent.start + b);
            mentions.push(Mention { sent_idx: m.sent_id, span, surface: tokens[span.start..span.end].join(" ") });
        }
        entities.push(Entity { entity_type: cluster[0].entity_type.clone(), mentions, kg_link: None });
    }
    let mut facts = BTreeSet::new();
    for l in &record.labels {
        if vocab.index_of(&l.r).is_none() {
            return Err(Error::Vocabulary(format!("element {index}: unknown relation {}", l.r)));
        }
        if l.h >= entities.len() || l.t >= entities.len() {
            return Err(Error::Reference(format!("element {index}: label ({}, {}) refers to a missing entity", l.h, l.t)));
        }
        facts.insert(RelationFact { head: l.h, tail: l.t, relation: l.r.clone() });
    }
    Ok(Document { doc_id: record.title.clone(), tokens, sentence_bounds: bounds, entities, facts: facts.into_iter().collect(), free_mentions: Vec::new() })
}

/// Converts every record; repeated titles get a `#index` suffix so ids stay
/// unique.
pub fn docred_split(name: SplitName, records: &[DocredRecord], vocab: &RelationVocab) -> Result<DatasetSplit> {
    let mut seen = BTreeSet::new();
    let mut docs = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let mut d = docred_to_document(i, r, vocab)?;
        if !seen.insert(d.doc_id.clone()) {
            d.doc_id = format!("{}#{i}", d.doc_id);
            seen.insert(d.doc_id.clone());
        }
        docs.push(d);
    }
    DatasetSplit::new(name, docs)
}

/// Serializes a document back to a DocRED-format record.
pub fn document_to_docred(doc: &Document) -> DocredRecord {
    let sents = doc.sentence_bounds.iter().map(|s| doc.tokens[s.start..s.end].to_vec()).collect();
    let vertex_set = doc
        .entities
        .iter()
        .map(|e| {
            e.mentions
                .iter()
                .map(|m| {
                    let base = doc.sentence_bounds[m.sent_idx].start;
                    DocredMention { name: m.surface.clone(), sent_id: m.sent_idx, pos: vec![m.span.start - base, m.span.end - base], entity_type: e.entity_type.clone() }
                })
                .collect()
        })
        .collect();
    let labels = doc.facts.iter().map(|f| DocredLabel { h: f.head, t: f.tail, r: f.relation.clone() }).collect();
    DocredRecord { title: doc.doc_id.clone(), sents, vertex_set, labels }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KgRelationRecord {
    pub h: String,
    pub r: String,
    pub t: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KgAttributeRecord {
    pub e: String,
    pub a: String,
    pub v: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KgAliasRecord {
    pub e: String,
    pub aliases: Vec<String>,
}

/// `[sent_idx, start, end)` with sentence-local offsets.
pub type LocalSpan = [usize; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorefRecord {
    pub doc_id: String,
    pub s: LocalSpan,
    pub t: LocalSpan,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityLinkRecord {
    pub doc_id: String,
    pub entity: usize,
    pub kg_id: String,
}

fn local_to_span(doc: &Document, s: LocalSpan) -> Result<(usize, Span)> {
    let [sent, a, b] = s;
    let bounds = doc
        .sentence_bounds
        .get(sent)
        .ok_or_else(|| Error::Span(format!("{}: sentence {sent} out of range", doc.doc_id)))?;
    if a >= b || bounds.start + b > bounds.end {
        return Err(Error::Span(format!("{}: span [{a}, {b}) outside sentence {sent}", doc.doc_id)));
    }
    Ok((sent, Span::new(bounds.start + a, bounds.start + b)))
}

/// Finds an entity or free mention with exactly this span, or appends a new
/// free mention.
pub fn resolve_or_add_mention(doc: &mut Document, sent: usize, span: Span) -> MentionRef {
    for (e, ent) in doc.entities.iter().enumerate() {
        if let Some(m) = ent.mentions.iter().position(|m| m.span == span) {
            return MentionRef::Entity { entity: e, mention: m };
        }
    }
    if let Some(i) = doc.free_mentions.iter().position(|m| m.span == span) {
        return MentionRef::Free(i);
    }
    let surface = doc.span_text(span);
    doc.free_mentions.push(Mention { sent_idx: sent, span, surface });
    MentionRef::Free(doc.free_mentions.len() - 1)
}

/// Resolver triple for `record`. The second value is the original
/// probability when it had to be clamped into `[0, 1]`.
pub fn attach_coref_record(doc: &mut Document, record: &CorefRecord) -> Result<(CoreferenceTriple, Option<f64>)> {
    let (ss, s) = local_to_span(doc, record.s)?;
    let (ts, t) = local_to_span(doc, record.t)?;
    if !record.p.is_finite() {
        return Err(Error::Data(format!("{}: coreference probability is not finite", doc.doc_id)));
    }
    let p = record.p.clamp(0.0, 1.0);
    let m_s = resolve_or_add_mention(doc, ss, s);
    let m_t = resolve_or_add_mention(doc, ts, t);
    let triple = CoreferenceTriple::new(m_s, m_t, p, CorefSource::Resolver)?;
    Ok((triple, (p != record.p).then_some(record.p)))
}

/// Every unordered pair of a linked entity's mentions whose normalized
/// surfaces are distinct aliases of its KG entity, with `p_cr = 1`.
pub fn derive_alias_corefs(doc: &Document, kg: &KgSubset) -> Vec<CoreferenceTriple> {
    let mut out = Vec::new();
    for (e, ent) in doc.entities.iter().enumerate() {
        let Some(kg_e) = ent.kg_link.as_deref().and_then(|id| kg.entity_index(id)) else { continue };
        let aliases: BTreeSet<String> = kg.aliases(kg_e).iter().map(|a| canonical_surface(a)).collect();
        let matching: Vec<(usize, String)> = ent
            .mentions
            .iter()
            .enumerate()
            .map(|(k, m)| (k, canonical_surface(&m.surface)))
            .filter(|(_, s)| aliases.contains(s))
            .collect();
        for (i, (a, sa)) in matching.iter().enumerate() {
            for (b, sb) in &matching[i + 1..] {
                if sa != sb {
                    let m_s = MentionRef::Entity { entity: e, mention: *a };
                    let m_t = MentionRef::Entity { entity: e, mention: *b };
                    out.push(CoreferenceTriple { m_s, m_t, p_cr: 1.0, source: CorefSource::Alias });
                }
            }
        }
    }
    out
}

/// Drops KG relation triples between entity pairs that are labeled in any
/// of `test` documents (in either direction). Returns the number removed.
pub fn filter_test_leakage(kg: &mut KgSubset, test: &[Document]) -> usize {
    let mut pairs = BTreeSet::new();
    for d in test {
        for f in &d.facts {
            let link = |e: usize| d.entities.get(e).and_then(|x| x.kg_link.as_deref()).and_then(|id| kg.entity_index(id));
            if let (Some(h), Some(t)) = (link(f.head), link(f.tail)) {
                pairs.insert((h.min(t), h.max(t)));
            }
        }
    }
    kg.retain_relation_triples(|t| !pairs.contains(&(t.head.min(t.tail), t.head.max(t.tail))))
}

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_docs: usize,
    /// Number of distinct filler words.
    pub vocab_size: usize,
    /// Total relation labels; the first is decidable from the KG only.
    pub n_relations: usize,
    /// KG entities; 80% are reserved for training documents.
    pub kg_size: usize,
    pub embedding_dim: usize,
}

impl SynthSpec {
    pub fn new(seed: u64, n_docs: usize) -> Self {
        Self { seed, n_docs, vocab_size: 40, n_relations: 4, kg_size: 100, embedding_dim: 100 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: DatasetSplit,
    pub validation: DatasetSplit,
    pub test: DatasetSplit,
    pub kg: KgSubset,
    pub corefs: CorefSet,
    pub words: EmbeddingTable,
    pub chars: EmbeddingTable,
    pub relations: RelationVocab,
    /// Labels that the text alone cannot decide.
    pub kg_only_relations: Vec<String>,
}

pub const CATEGORY_ATTRIBUTE: &str = "cat";
pub const CATEGORIES: usize = 3;
const PRONOUNS: [&str; 3] = ["it", "they", "she"];
const TYPES: [&str; 3] = ["PER", "ORG", "LOC"];
const KG_RELATIONS: usize = 3;

pub fn relation_label(r: usize) -> String {
    format!("R{r}")
}

fn trigger(r: usize) -> String {
    format!("trig{r}")
}

fn filler(rng: &mut ChaCha8Rng, vocab: usize) -> String {
    format!("w{}", rng.random_range(0..vocab))
}

fn alias(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(5..9);
    (0..len).map(|_| char::from(b'a' + rng.random_range(0..26u8))).collect()
}

enum Slot {
    Word(String),
    Named { entity: usize, alt: bool },
    Pronoun { entity: usize },
}

/// Category of every KG entity; drawn from its own stream so the text never
/// depends on it.
pub fn synth_categories(seed: u64, kg_size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..kg_size).map(|_| rng.random_range(0..CATEGORIES)).collect()
}

/// Generates a corpus where `R0` holds for an ordered pair exactly when both
/// entities share the KG `cat` attribute, and every other label `Rr` holds
/// for the pair joined by the trigger word `trigr` inside one sentence.
pub fn synth_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    synth_corpus_with_categories(spec, &synth_categories(spec.seed, spec.kg_size))
}

/// As [`synth_corpus`] with explicit categories. Text, aliases, coreference
/// triples and all labels other than `R0` do not depend on `categories`.
pub fn synth_corpus_with_categories(spec: &SynthSpec, categories: &[usize]) -> Result<SynthCorpus> {
    if spec.n_docs == 0 || spec.vocab_size == 0 || spec.n_relations == 0 || spec.embedding_dim == 0 {
        return Err(Error::Config("synthetic corpus parameters must be positive".to_string()));
    }
    if spec.kg_size < 20 {
        return Err(Error::Config("synthetic corpus needs at least 20 KG entities".to_string()));
    }
    if categories.len() != spec.kg_size {
        return Err(Error::Config("one category per KG entity is required".to_string()));
    }
    let mut text = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut graph = ChaCha8Rng::seed_from_u64(spec.seed);
    graph.set_stream(2);
    let mut vectors = ChaCha8Rng::seed_from_u64(spec.seed);
    vectors.set_stream(3);

    let ids: Vec<String> = (0..spec.kg_size).map(|i| format!("Q{i}")).collect();
    let mut used = BTreeSet::new();
    let mut aliases = Vec::with_capacity(spec.kg_size);
    for _ in 0..spec.kg_size {
        let mut pair = [String::new(), String::new()];
        for a in &mut pair {
            loop {
                let cand = alias(&mut text);
                if used.insert(cand.clone()) {
                    *a = cand;
                    break;
                }
            }
        }
        aliases.push(pair);
    }

    let n_train_pool = spec.kg_size * 8 / 10;
    let pools = [(0..n_train_pool).collect::<Vec<_>>(), (n_train_pool..spec.kg_size).collect::<Vec<_>>()];

    let mut kg = KgSubset::new();
    for (i, id) in ids.iter().enumerate() {
        kg.add_attribute_triple(id, CATEGORY_ATTRIBUTE, &format!("c{}", categories[i]));
        kg.add_aliases(id, aliases[i].iter().cloned());
    }
    for pool in &pools {
        for &i in pool {
            let peers: Vec<usize> = pool.iter().copied().filter(|&j| j != i && categories[j] == categories[i]).collect();
            if let Some(&j) = peers.get(graph.random_range(0..peers.len().max(1))) {
                kg.add_relation_triple(&ids[i], &format!("kr{}", graph.random_range(0..KG_RELATIONS)), &ids[j]);
            }
        }
    }

    let n_train = spec.n_docs * 8 / 10;
    let n_val = spec.n_docs / 10;
    let mut splits: [Vec<Document>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut corefs = CorefSet::new();
    for d in 0..spec.n_docs {
        let split = if d < n_train { 0 } else if d < n_train + n_val { 1 } else { 2 };
        let pool = &pools[usize::from(split > 0)];
        let (doc, resolver) = synth_document(&mut text, spec, d, pool, &ids, &aliases, categories);
        let mut triples = derive_alias_corefs(&doc, &kg);
        triples.extend(resolver);
        corefs.insert(doc.doc_id.clone(), triples);
        splits[split].push(doc);
    }

    let mut words = EmbeddingTable::new(EmbeddingKind::Word);
    let mut vocab: Vec<String> = (0..spec.vocab_size).map(|i| format!("w{i}")).collect();
    vocab.extend((1..spec.n_relations).map(trigger));
    vocab.extend(PRONOUNS.iter().map(|p| p.to_string()));
    vocab.extend([".".to_string(), CATEGORY_ATTRIBUTE.to_string()]);
    vocab.extend((0..CATEGORIES).map(|c| format!("c{c}")));
    for w in vocab {
        let v = (0..spec.embedding_dim).map(|_| vectors.random_range(-1.0..1.0)).collect();
        words.insert(w, v)?;
    }
    let mut chars = EmbeddingTable::new(EmbeddingKind::Char);
    for c in b'a'..=b'z' {
        let v = (0..spec.embedding_dim).map(|_| vectors.random_range(-1.0..1.0)).collect();
        chars.insert(char::from(c).to_string(), v)?;
    }

    let [train, validation, test] = splits;
    Ok(SynthCorpus {
        train: DatasetSplit::new(SplitName::Train, train)?,
        validation: DatasetSplit::new(SplitName::Validation, validation)?,
        test: DatasetSplit::new(SplitName::Test, test)?,
        kg,
        corefs,
        words,
        chars,
        relations: RelationVocab::new((0..spec.n_relations).map(relation_label))?,
        kg_only_relations: vec![relation_label(0)],
    })
}

fn synth_document(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    index: usize,
    pool: &[usize],
    ids: &[String],
    aliases: &[[String; 2]],
    categories: &[usize],
) -> (Document, Vec<CoreferenceTriple>) {
    let n_ent = rng.random_range(2..=6usize).min(pool.len());
    let mut chosen = pool.to_vec();
    chosen.shuffle(rng);
    chosen.truncate(n_ent);
    let types: Vec<&str> = (0..n_ent).map(|_| TYPES[rng.random_range(0..TYPES.len())]).collect();
    let planned: Vec<usize> = (0..n_ent).map(|_| rng.random_range(1..=3usize)).collect();
    let pronoun: Vec<bool> = (0..n_ent).map(|_| rng.random_bool(0.5)).collect();
    let mut named = vec![0usize; n_ent];
    let mut sentences: Vec<Vec<Slot>> = Vec::new();
    let v = spec.vocab_size;

    for e in 0..n_ent {
        sentences.push(vec![
            Slot::Word(filler(rng, v)),
            Slot::Word(filler(rng, v)),
            Slot::Named { entity: e, alt: false },
            Slot::Word(filler(rng, v)),
            Slot::Word(filler(rng, v)),
            Slot::Word(".".into()),
        ]);
        named[e] = 1;
    }
    let mut facts = BTreeSet::new();
    for r in 1..spec.n_relations {
        if !rng.random_bool(0.5) {
            continue;
        }
        let h = rng.random_range(0..n_ent);
        let t = (h + rng.random_range(1..n_ent)) % n_ent;
        let (alt_h, alt_t) = (rng.random_bool(0.5), rng.random_bool(0.5));
        if named[h] >= 3 || named[t] >= 3 {
            continue;
        }
        named[h] += 1;
        named[t] += 1;
        sentences.push(vec![
            Slot::Named { entity: h, alt: alt_h },
            Slot::Word(filler(rng, v)),
            Slot::Word(trigger(r)),
            Slot::Word(filler(rng, v)),
            Slot::Named { entity: t, alt: alt_t },
            Slot::Word(".".into()),
        ]);
        facts.insert(RelationFact { head: h, tail: t, relation: relation_label(r) });
    }
    for e in 0..n_ent {
        while named[e] < planned[e] {
            let alt = rng.random_bool(0.5);
            sentences.push(vec![Slot::Word(filler(rng, v)), Slot::Named { entity: e, alt }, Slot::Word(filler(rng, v)), Slot::Word(".".into())]);
            named[e] += 1;
        }
    }
    for e in 0..n_ent {
        if pronoun[e] {
            sentences.push(vec![Slot::Pronoun { entity: e }, Slot::Word(filler(rng, v)), Slot::Word(filler(rng, v)), Slot::Word(".".into())]);
        }
    }

    let mut tokens = Vec::new();
    let mut bounds = Vec::new();
    let mut entities: Vec<Entity> =
        (0..n_ent).map(|e| Entity { entity_type: types[e].to_string(), mentions: Vec::new(), kg_link: Some(ids[chosen[e]].clone()) }).collect();
    let mut free = Vec::new();
    let mut pronoun_owner = Vec::new();
    for (s, sent) in sentences.into_iter().enumerate() {
        let start = tokens.len();
        for slot in sent {
            let t = tokens.len();
            match slot {
                Slot::Word(w) => tokens.push(w),
                Slot::Named { entity, alt } => {
                    let surface = aliases[chosen[entity]][usize::from(alt)].clone();
                    tokens.push(surface.clone());
                    entities[entity].mentions.push(Mention { sent_idx: s, span: Span::new(t, t + 1), surface });
                }
                Slot::Pronoun { entity } => {
                    let p = PRONOUNS[rng.random_range(0..PRONOUNS.len())].to_string();
                    tokens.push(p.clone());
                    free.push(Mention { sent_idx: s, span: Span::new(t, t + 1), surface: p });
                    pronoun_owner.push(entity);
                }
            }
        }
        bounds.push(Span::new(start, tokens.len()));
    }

    let mut resolver = Vec::new();
    for (k, &owner) in pronoun_owner.iter().enumerate() {
        let last = entities[owner].mentions.len() - 1;
        let p = rng.random_range(0.7..1.0);
        let target = MentionRef::Entity { entity: owner, mention: last };
        resolver.push(CoreferenceTriple { m_s: MentionRef::Free(k), m_t: target, p_cr: p, source: CorefSource::Resolver });
        let other = (owner + rng.random_range(1..n_ent)) % n_ent;
        let p = rng.random_range(0.0..0.3);
        let target = MentionRef::Entity { entity: other, mention: entities[other].mentions.len() - 1 };
        resolver.push(CoreferenceTriple { m_s: MentionRef::Free(k), m_t: target, p_cr: p, source: CorefSource::Resolver });
    }

    for h in 0..n_ent {
        for t in 0..n_ent {
            if h != t && categories[chosen[h]] == categories[chosen[t]] {
                facts.insert(RelationFact { head: h, tail: t, relation: relation_label(0) });
            }
        }
    }
    let doc = Document {
        doc_id: format!("synth-{index}"),
        tokens,
        sentence_bounds: bounds,
        entities,
        facts: facts.into_iter().collect(),
        free_mentions: free,
    };
    (doc, resolver)
}

/// Facts per relation label across documents.
pub fn relation_counts(docs: &[Document]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for d in docs {
        for f in &d.facts {
            *out.entry(f.relation.clone()).or_insert(0) += 1;
        }
    }
    out
}
