//! Loader counts on the bundled fixtures.

use std::fs;
use std::path::{Path, PathBuf};

use kire::io::{load_docred, load_kg_subset, load_relation_vocab};
use kire_core::ingestion::SplitName;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn three_document_fixture() {
    let vocab = load_relation_vocab(&fixture("rel_info.json")).unwrap();
    assert_eq!(vocab.labels(), ["P17", "P19", "P551"]);
    let split = load_docred(&fixture("docred_3doc.json"), &vocab, SplitName::Train).unwrap();
    assert_eq!(split.documents.len(), 3);
    assert_eq!(split.documents.iter().map(|d| d.facts.len()).sum::<usize>(), 5);
    let first = &split.documents[0];
    assert_eq!(first.doc_id, "Lovelace");
    assert_eq!(first.num_tokens(), 16);
    // "his" sits at position 4 of the second sentence, which starts at 9.
    assert_eq!((first.entities[1].mentions[1].span.start, first.entities[1].mentions[1].span.end), (13, 14));
}

#[test]
fn empty_array_is_an_empty_split() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.json");
    fs::write(&path, "[]").unwrap();
    let vocab = load_relation_vocab(&fixture("rel_info.json")).unwrap();
    assert!(load_docred(&path, &vocab, SplitName::Test).unwrap().documents.is_empty());
}

#[test]
fn two_line_kg_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let kg = load_kg_subset(&fixture("kg_relations_2line.jsonl"), &empty, &empty).unwrap();
    assert_eq!(kg.entities().len(), 3);
    assert_eq!(kg.relation_triples().len(), 2);
    assert_eq!(kg.relations().len(), 1);
}

#[test]
fn autoencoder_fixture_has_twenty_triples() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let kg = load_kg_subset(&empty, &fixture("ae_toy_attributes.jsonl"), &empty).unwrap();
    assert_eq!(kg.attribute_triples().len(), 20);
    assert_eq!(kg.attributes().len(), 3);
}
