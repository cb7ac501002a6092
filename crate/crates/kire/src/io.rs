//! Loaders and writers for the on-disk formats: DocRED-style JSON, the
//! line-delimited KG, coreference and entity-link files, plain-text
//! embedding tables and relation vocabularies.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use kire_core::datamodel::{CorefSet, Document, KgSubset, RelationVocab};
use kire_core::embeddings::{parse_embeddings, EmbeddingKind, EmbeddingTable};
use kire_core::error::Error as CoreError;
use kire_core::ingestion::{
    attach_coref_record, docred_split, document_to_docred, CorefRecord, DatasetSplit, DocredRecord, EntityLinkRecord, KgAliasRecord,
    KgAttributeRecord, KgRelationRecord, SplitName,
};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))
}

/// One record per non-blank line; errors carry the 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push((i + 1, record));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut bytes = Vec::new();
    for r in records {
        serde_json::to_writer(&mut bytes, r).map_err(|e| Error::format(path, e.to_string()))?;
        bytes.push(b'\n');
    }
    write_bytes(path, &bytes)
}

/// Reads a relation vocabulary. Accepts a JSON object mapping labels to
/// integer ids (ordered by id, with the `Na`/`NA` no-relation entry
/// dropped), a JSON object mapping labels to names (ordered by label), a
/// JSON array of labels, or one label per line.
pub fn load_relation_vocab(path: &Path) -> Result<RelationVocab> {
    let text = read_text(path)?;
    let trimmed = text.trim_start();
    let labels: Vec<String> = if trimmed.starts_with('{') {
        let map: BTreeMap<String, serde_json::Value> = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let map: BTreeMap<String, serde_json::Value> = map.into_iter().filter(|(k, _)| k != "Na" && k != "NA").collect();
        if map.values().all(serde_json::Value::is_string) {
            map.into_keys().collect()
        } else {
            let mut pairs = Vec::with_capacity(map.len());
            for (label, id) in map {
                let id = id.as_i64().ok_or_else(|| Error::format(path, format!("relation {label}: id must be an integer or every value a name")))?;
                pairs.push((id, label));
            }
            pairs.sort();
            pairs.into_iter().map(|(_, k)| k).collect()
        }
    } else if trimmed.starts_with('[') {
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?
    } else {
        text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
    };
    Ok(RelationVocab::new(labels)?)
}

/// Reads a DocRED-format JSON array into one split.
pub fn load_docred(path: &Path, vocab: &RelationVocab, name: SplitName) -> Result<DatasetSplit> {
    let text = read_text(path)?;
    let elements: Vec<serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| Error::format(path, format!("expected a JSON array of documents: {e}")))?;
    let records = elements
        .into_iter()
        .enumerate()
        .map(|(i, v)| serde_json::from_value::<DocredRecord>(v).map_err(|e| Error::format(path, format!("element {i}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(docred_split(name, &records, vocab)?)
}

pub fn save_docred(path: &Path, documents: &[Document]) -> Result<()> {
    let records: Vec<DocredRecord> = documents.iter().map(document_to_docred).collect();
    write_json(path, &records)
}

/// Reads the three line-delimited KG files. Entities, relations and
/// attributes are numbered in first-seen order across the files.
pub fn load_kg_subset(relations: &Path, attributes: &Path, aliases: &Path) -> Result<KgSubset> {
    let mut kg = KgSubset::new();
    for (_, r) in read_jsonl::<KgRelationRecord>(relations)? {
        kg.add_relation_triple(&r.h, &r.r, &r.t);
    }
    for (_, a) in read_jsonl::<KgAttributeRecord>(attributes)? {
        kg.add_attribute_triple(&a.e, &a.a, &a.v);
    }
    for (_, a) in read_jsonl::<KgAliasRecord>(aliases)? {
        kg.add_aliases(&a.e, a.aliases);
    }
    Ok(kg)
}

pub fn save_kg_subset(kg: &KgSubset, relations: &Path, attributes: &Path, aliases: &Path) -> Result<()> {
    let ent = kg.entities();
    let rels: Vec<KgRelationRecord> = kg
        .relation_triples()
        .iter()
        .map(|t| KgRelationRecord { h: ent[t.head].clone(), r: kg.relations()[t.relation].clone(), t: ent[t.tail].clone() })
        .collect();
    let attrs: Vec<KgAttributeRecord> = kg
        .attribute_triples()
        .iter()
        .map(|t| KgAttributeRecord { e: ent[t.entity].clone(), a: kg.attributes()[t.attribute].clone(), v: t.value.clone() })
        .collect();
    let alias: Vec<KgAliasRecord> = kg.alias_map().iter().map(|(&e, a)| KgAliasRecord { e: ent[e].clone(), aliases: a.clone() }).collect();
    write_jsonl(relations, &rels)?;
    write_jsonl(attributes, &attrs)?;
    write_jsonl(aliases, &alias)
}

fn doc_positions(docs: &[Document]) -> BTreeMap<String, usize> {
    docs.iter().enumerate().map(|(i, d)| (d.doc_id.clone(), i)).collect()
}

/// Attaches resolver output to `docs`, adding free mentions for spans that
/// match no entity mention. Probabilities outside `[0, 1]` are clamped with
/// a warning.
pub fn load_coref_predictions(path: &Path, docs: &mut [Document]) -> Result<CorefSet> {
    let index = doc_positions(docs);
    let mut out = CorefSet::new();
    for (line, rec) in read_jsonl::<CorefRecord>(path)? {
        let &d = index
            .get(&rec.doc_id)
            .ok_or_else(|| CoreError::Reference(format!("{} line {line}: unknown doc_id {}", path.display(), rec.doc_id)))?;
        let (triple, clamped) = attach_coref_record(&mut docs[d], &rec)?;
        if let Some(p) = clamped {
            log::warn!("{} line {line}: coreference probability {p} clamped to {}", path.display(), triple.p_cr);
        }
        out.entry(rec.doc_id).or_default().push(triple);
    }
    Ok(out)
}

/// Sets `kg_link` on the referenced document entities. Returns the number
/// of links applied.
pub fn load_entity_links(path: &Path, docs: &mut [Document]) -> Result<usize> {
    let index = doc_positions(docs);
    let records = read_jsonl::<EntityLinkRecord>(path)?;
    for (line, rec) in &records {
        let entity = index
            .get(&rec.doc_id)
            .and_then(|&d| docs[d].entities.get_mut(rec.entity))
            .ok_or_else(|| CoreError::Reference(format!("{} line {line}: no entity {} in document {}", path.display(), rec.entity, rec.doc_id)))?;
        entity.kg_link = Some(rec.kg_id.clone());
    }
    Ok(records.len())
}

/// Reads a `token v1 … vd` table. Duplicate tokens keep the last vector.
pub fn load_embeddings(path: &Path, kind: EmbeddingKind) -> Result<EmbeddingTable> {
    let parsed = parse_embeddings(&read_text(path)?, kind).map_err(|e| match e {
        CoreError::Data(m) => Error::format(path, m),
        other => other.into(),
    })?;
    for token in &parsed.duplicates {
        log::warn!("{}: duplicate token {token:?}, keeping the last vector", path.display());
    }
    Ok(parsed.table)
}

pub fn save_embeddings(path: &Path, table: &EmbeddingTable) -> Result<()> {
    write_bytes(path, table.to_text().as_bytes())
}
