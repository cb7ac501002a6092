//! Work-directory layout (`data/`, `checkpoints/`, `reports/`), the
//! prepared-data bundle stored under `data/`, and staged writes that leave
//! nothing behind when a command fails.

use std::fs;
use std::path::{Path, PathBuf};

use kire_core::datamodel::{CorefSet, Document, KgSubset, RelationVocab};
use kire_core::embeddings::{EmbeddingKind, EmbeddingTable, Lexicon};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_embeddings, load_kg_subset, read_json, save_embeddings, save_kg_subset, write_json};

/// Config file picked up from the work directory root, if present.
pub const WORK_CONFIG: &str = "kire.conf";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkDir {
    root: PathBuf,
}

impl WorkDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn config_file(&self) -> PathBuf {
        self.root.join(WORK_CONFIG)
    }

    pub fn checkpoints(&self, run_id: &str) -> PathBuf {
        self.root.join("checkpoints").join(run_id)
    }

    pub fn reports(&self, run_id: &str) -> PathBuf {
        self.root.join("reports").join(run_id)
    }
}

/// Facts about the prepared data that the loaders cannot recover.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataMeta {
    /// `synthetic` or `prepared`.
    pub origin: String,
    /// Relation labels decidable only through the KG, when known.
    pub kg_only_relations: Vec<String>,
    /// KG relation triples removed because their pair is labeled in test.
    pub leakage_removed: usize,
}

/// Validated splits, KG, coreference triples and embeddings of one corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub train: Vec<Document>,
    pub validation: Vec<Document>,
    pub test: Vec<Document>,
    pub kg: KgSubset,
    pub corefs: CorefSet,
    pub words: EmbeddingTable,
    pub chars: EmbeddingTable,
    pub relations: RelationVocab,
    pub meta: DataMeta,
}

const SPLITS: [&str; 3] = ["train", "validation", "test"];

impl PreparedData {
    pub fn split(&self, name: &str) -> Option<&[Document]> {
        match name {
            "train" => Some(&self.train),
            "validation" => Some(&self.validation),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn lexicon(&self) -> Result<Lexicon> {
        Ok(Lexicon::new(self.words.clone(), self.chars.clone())?)
    }

    fn kg_paths(dir: &Path) -> [PathBuf; 3] {
        [dir.join("kg_relations.jsonl"), dir.join("kg_attributes.jsonl"), dir.join("kg_aliases.jsonl")]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (name, docs) in SPLITS.iter().zip([&self.train, &self.validation, &self.test]) {
            write_json(&dir.join(format!("{name}.json")), docs)?;
        }
        let [r, a, al] = Self::kg_paths(dir);
        save_kg_subset(&self.kg, &r, &a, &al)?;
        write_json(&dir.join("corefs.json"), &self.corefs)?;
        save_embeddings(&dir.join("words.txt"), &self.words)?;
        save_embeddings(&dir.join("chars.txt"), &self.chars)?;
        write_json(&dir.join("relations.json"), self.relations.labels())?;
        write_json(&dir.join("meta.json"), &self.meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.join("meta.json").is_file() {
            return Err(Error::format(dir, "no prepared data here; run `prepare` or `synth` first"));
        }
        let split = |name: &str| read_json::<Vec<Document>>(&dir.join(format!("{name}.json")));
        let [r, a, al] = Self::kg_paths(dir);
        let labels: Vec<String> = read_json(&dir.join("relations.json"))?;
        Ok(Self {
            train: split("train")?,
            validation: split("validation")?,
            test: split("test")?,
            kg: load_kg_subset(&r, &a, &al)?,
            corefs: read_json(&dir.join("corefs.json"))?,
            words: load_embeddings(&dir.join("words.txt"), EmbeddingKind::Word)?,
            chars: load_embeddings(&dir.join("chars.txt"), EmbeddingKind::Char)?,
            relations: RelationVocab::new(labels)?,
            meta: read_json(&dir.join("meta.json"))?,
        })
    }
}

struct Staged {
    temp: PathBuf,
    dest: PathBuf,
    /// Directories created to hold `dest`, innermost first.
    created: Vec<PathBuf>,
}

/// Outputs written to temporary siblings and moved into place by
/// [`Transaction::commit`]. Dropping an uncommitted transaction deletes
/// every temporary path.
#[derive(Default)]
pub struct Transaction {
    staged: Vec<Staged>,
}

fn remove_path(p: &Path) -> std::io::Result<()> {
    if p.is_dir() {
        fs::remove_dir_all(p)
    } else if p.exists() {
        fs::remove_file(p)
    } else {
        Ok(())
    }
}

impl Transaction {
    pub fn new() -> Self {
        Self::default()
    }

    /// Temporary path standing in for `dest`. Nothing is created; the
    /// caller writes a file or a directory there.
    pub fn stage(&mut self, dest: &Path) -> Result<PathBuf> {
        let parent = dest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let created: Vec<PathBuf> = parent.ancestors().take_while(|a| !a.as_os_str().is_empty() && !a.exists()).map(Path::to_path_buf).collect();
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let name = dest.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let temp = parent.join(format!(".{name}.partial"));
        remove_path(&temp).map_err(|e| Error::io(&temp, e))?;
        self.staged.push(Staged { temp: temp.clone(), dest: dest.to_path_buf(), created });
        Ok(temp)
    }

    /// Replaces every destination with its staged output.
    pub fn commit(mut self) -> Result<()> {
        for s in std::mem::take(&mut self.staged) {
            remove_path(&s.dest).map_err(|e| Error::io(&s.dest, e))?;
            fs::rename(&s.temp, &s.dest).map_err(|e| Error::io(&s.dest, e))?;
        }
        Ok(())
    }
}

impl Drop for Transaction {
    fn drop(&mut self) {
        for s in self.staged.iter().rev() {
            let _ = remove_path(&s.temp);
            for d in &s.created {
                // Only empty directories go; another staged output may share them.
                let _ = fs::remove_dir(d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let w = WorkDir::new("/w");
        assert_eq!(w.data(), Path::new("/w/data"));
        assert_eq!(w.checkpoints("ab"), Path::new("/w/checkpoints/ab"));
        assert_eq!(w.reports("ab"), Path::new("/w/reports/ab"));
    }

    #[test]
    fn commit_moves_outputs_into_place() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("out/report.json");
        fs::create_dir_all(dir.path().join("out")).unwrap();
        fs::write(&dest, "old").unwrap();
        let mut tx = Transaction::new();
        let tmp = tx.stage(&dest).unwrap();
        fs::write(&tmp, "new").unwrap();
        tx.commit().unwrap();
        assert_eq!(fs::read_to_string(&dest).unwrap(), "new");
        assert!(!tmp.exists());
    }

    #[test]
    fn dropped_transaction_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("checkpoints/run/ckpt");
        {
            let mut tx = Transaction::new();
            let tmp = tx.stage(&dest).unwrap();
            fs::create_dir_all(tmp.join("inner")).unwrap();
            fs::write(tmp.join("inner/x"), "partial").unwrap();
        }
        let left: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert!(left.is_empty());
        assert!(!dest.exists());
    }
}
