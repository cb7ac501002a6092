//! Flat `key = value` run configuration: every model and trainer setting,
//! the input file paths, and a preset that picks the starting values.
//! Later sources override earlier ones; unknown keys are rejected.

use std::path::{Path, PathBuf};

use kire_core::datamodel::Config;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::read_text;

/// Starting values before any key is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-size widths, learning rate 0.0005, batch size 4.
    #[default]
    Full,
    /// Narrow widths for CPU-scale runs.
    Desk,
}

impl Preset {
    pub fn config(self) -> Config {
        match self {
            Self::Full => Config::default(),
            Self::Desk => Config::desk(),
        }
    }

    pub fn parse(value: &str) -> Result<Self> {
        match value {
            "full" => Ok(Self::Full),
            "desk" => Ok(Self::Desk),
            other => Err(Error::config(format!("preset must be full or desk, got {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Desk => "desk",
        }
    }
}

/// Input files read by `prepare`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputPaths {
    pub train_path: Option<PathBuf>,
    pub validation_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub relation_vocab: Option<PathBuf>,
    pub kg_relations: Option<PathBuf>,
    pub kg_attributes: Option<PathBuf>,
    pub kg_aliases: Option<PathBuf>,
    pub corefs: Option<PathBuf>,
    pub entity_links: Option<PathBuf>,
    pub word_embeddings: Option<PathBuf>,
    pub char_embeddings: Option<PathBuf>,
}

const PATH_KEYS: [(&str, &str); 11] = [
    ("train_path", "DocRED-format training split"),
    ("validation_path", "DocRED-format validation split"),
    ("test_path", "DocRED-format test split (optional)"),
    ("relation_vocab", "relation labels: rel2id JSON object, JSON array or one per line"),
    ("kg_relations", "KG relation triples, one {\"h\",\"r\",\"t\"} per line"),
    ("kg_attributes", "KG attribute triples, one {\"e\",\"a\",\"v\"} per line"),
    ("kg_aliases", "KG aliases, one {\"e\",\"aliases\"} per line"),
    ("corefs", "resolver output, one {\"doc_id\",\"s\",\"t\",\"p\"} per line (optional)"),
    ("entity_links", "entity links, one {\"doc_id\",\"entity\",\"kg_id\"} per line (optional)"),
    ("word_embeddings", "word vectors, `token v1 .. vd` per line"),
    ("char_embeddings", "character vectors, `char v1 .. vd` per line"),
];

const MODEL_KEYS: [(&str, &str); 38] = [
    ("d_token", "token representation width"),
    ("d_mlp", "coreference student hidden width"),
    ("d_dist", "distance embedding width"),
    ("beta", "number of distance bins"),
    ("d_word", "word and character embedding width"),
    ("d_char", "character embedding width (must equal d_word)"),
    ("d_auto", "attribute code width"),
    ("n_max", "attributes kept per entity"),
    ("n_kernel", "attribute convolution kernels"),
    ("d_kernel", "attribute convolution kernel size"),
    ("n_layer", "graph attention layers"),
    ("n_head", "attention heads"),
    ("d_rgat", "graph attention width"),
    ("d_ent", "KG entity representation width"),
    ("d_rel", "relation type embedding width"),
    ("n_agg", "stacked reconciliation aggregators"),
    ("d_out", "aggregator fusion width"),
    ("d_type", "entity type embedding width"),
    ("d_cluster", "coreference cluster embedding width"),
    ("max_clusters", "cluster ids before wrap-around"),
    ("cnn_layers", "convolutional encoder layers"),
    ("cnn_kernel", "convolutional encoder kernel size"),
    ("ae_hidden", "attribute autoencoder hidden width"),
    ("alpha1", "relation loss weight"),
    ("alpha2", "coreference loss weight"),
    ("alpha3", "alignment loss weight"),
    ("learning_rate", "Adam learning rate"),
    ("ae_learning_rate", "autoencoder learning rate"),
    ("batch_size", "documents per optimizer step"),
    ("base_epochs", "epochs of the base stage"),
    ("kire_epochs", "epochs of the injection stage"),
    ("ae_epochs", "autoencoder pretraining epochs"),
    ("grad_clip", "global gradient norm bound"),
    ("freeze_base", "freeze encoder and predictor in the injection stage"),
    ("seed", "random seed"),
    ("encoder", "cnn, lstm, bilstm or context_aware"),
    ("fusion_strategy", "kire, rep_avg, rep_concat or mlp"),
    ("reconcile_activation", "gelu or identity"),
];

/// Every accepted key with a one-line description.
pub fn documented_keys() -> Vec<(&'static str, &'static str)> {
    let mut keys = vec![("preset", "starting values: full (default) or desk")];
    keys.extend(MODEL_KEYS);
    keys.extend(PATH_KEYS);
    keys.push(("leakage_filter", "drop KG relation triples between entity pairs labeled in the test split (default true)"));
    keys
}

/// One `key = value` assignment and where it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub key: String,
    pub value: String,
    pub origin: String,
}

/// Parses a flat config file: `key = value` lines, `#` comments, blank
/// lines ignored.
pub fn parse_flat(text: &str, origin: &str) -> Result<Vec<Assignment>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("{origin} line {}: expected `key = value`", i + 1)))?;
        out.push(Assignment { key: key.trim().to_string(), value: value.trim().to_string(), origin: format!("{origin} line {}", i + 1) });
    }
    Ok(out)
}

pub fn read_flat(path: &Path) -> Result<Vec<Assignment>> {
    parse_flat(&read_text(path)?, &path.display().to_string())
}

/// Resolved settings of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: Config,
    pub inputs: InputPaths,
    pub leakage_filter: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { preset: Preset::Full, model: Config::default(), inputs: InputPaths::default(), leakage_filter: true }
    }
}

fn set_typed(map: &mut Map<String, Value>, a: &Assignment) -> Result<()> {
    let bad = |what: &str| Error::config(format!("{}: {} expects {what}, got {:?}", a.origin, a.key, a.value));
    let slot = map.get_mut(&a.key).expect("caller checked the key");
    *slot = match slot {
        Value::Bool(_) => Value::Bool(a.value.parse().map_err(|_| bad("true or false"))?),
        Value::Number(n) if n.is_f64() => {
            let x: f64 = a.value.parse().map_err(|_| bad("a number"))?;
            Value::from(x)
        }
        Value::Number(_) => Value::from(a.value.parse::<u64>().map_err(|_| bad("a non-negative integer"))?),
        _ => Value::String(a.value.clone()),
    };
    Ok(())
}

impl RunConfig {
    /// Applies `assignments` in order on top of the preset they select (the
    /// last `preset` assignment wins), then validates the model settings.
    pub fn resolve(assignments: &[Assignment]) -> Result<Self> {
        let preset = match assignments.iter().rev().find(|a| a.key == "preset") {
            Some(a) => Preset::parse(&a.value)?,
            None => Preset::Full,
        };
        let Value::Object(mut model) = serde_json::to_value(preset.config()).expect("config serializes") else {
            unreachable!("config is a struct")
        };
        let mut inputs = InputPaths::default();
        let mut leakage_filter = true;
        for a in assignments {
            match a.key.as_str() {
                "preset" => {}
                "leakage_filter" => {
                    leakage_filter = a.value.parse().map_err(|_| Error::config(format!("{}: leakage_filter expects true or false", a.origin)))?
                }
                k if model.contains_key(k) => set_typed(&mut model, a)?,
                k => {
                    let slot = match k {
                        "train_path" => &mut inputs.train_path,
                        "validation_path" => &mut inputs.validation_path,
                        "test_path" => &mut inputs.test_path,
                        "relation_vocab" => &mut inputs.relation_vocab,
                        "kg_relations" => &mut inputs.kg_relations,
                        "kg_attributes" => &mut inputs.kg_attributes,
                        "kg_aliases" => &mut inputs.kg_aliases,
                        "corefs" => &mut inputs.corefs,
                        "entity_links" => &mut inputs.entity_links,
                        "word_embeddings" => &mut inputs.word_embeddings,
                        "char_embeddings" => &mut inputs.char_embeddings,
                        _ => return Err(Error::config(format!("{}: unknown config key {k:?}", a.origin))),
                    };
                    *slot = Some(PathBuf::from(&a.value));
                }
            }
        }
        let model: Config = serde_json::from_value(Value::Object(model)).map_err(|e| Error::config(e.to_string()))?;
        model.validate()?;
        Ok(Self { preset, model, inputs, leakage_filter })
    }

    /// Identifier of the run: a hash of the resolved model and trainer
    /// settings, seed included.
    pub fn run_id(&self) -> String {
        run_id(&self.model)
    }

    /// The resolved settings as a flat file that [`parse_flat`] reads back.
    pub fn to_flat(&self) -> String {
        let mut out = format!("preset = {}\n", self.preset.as_str());
        let Value::Object(model) = serde_json::to_value(&self.model).expect("config serializes") else { unreachable!() };
        for (key, _) in MODEL_KEYS {
            let v = &model[key];
            match v {
                Value::String(s) => out.push_str(&format!("{key} = {s}\n")),
                other => out.push_str(&format!("{key} = {other}\n")),
            }
        }
        let Value::Object(paths) = serde_json::to_value(&self.inputs).expect("paths serialize") else { unreachable!() };
        for (key, _) in PATH_KEYS {
            if let Some(p) = paths[key].as_str() {
                out.push_str(&format!("{key} = {p}\n"));
            }
        }
        out.push_str(&format!("leakage_filter = {}\n", self.leakage_filter));
        out
    }
}

pub fn run_id(config: &Config) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kv(pairs: &[(&str, &str)]) -> Vec<Assignment> {
        pairs.iter().map(|(k, v)| Assignment { key: k.to_string(), value: v.to_string(), origin: "test".into() }).collect()
    }

    #[test]
    fn keys_cover_every_config_field() {
        let Value::Object(m) = serde_json::to_value(Config::default()).unwrap() else { panic!() };
        let documented: Vec<&str> = MODEL_KEYS.iter().map(|k| k.0).collect();
        let mut fields: Vec<&str> = m.keys().map(String::as_str).collect();
        fields.sort_unstable();
        let mut sorted = documented.clone();
        sorted.sort_unstable();
        assert_eq!(fields, sorted);
    }

    #[test]
    fn later_assignments_win_and_preset_applies_first() {
        let c = RunConfig::resolve(&kv(&[("d_token", "8"), ("preset", "desk"), ("d_token", "12"), ("learning_rate", "0.01")])).unwrap();
        assert_eq!(c.preset, Preset::Desk);
        assert_eq!(c.model.d_token, 12);
        assert_eq!(c.model.learning_rate, 0.01);
        assert_eq!(c.model.d_word, Config::desk().d_word);
    }

    #[test]
    fn unknown_and_malformed_keys_are_config_errors() {
        for bad in [kv(&[("d_tokn", "8")]), kv(&[("d_token", "-1")]), kv(&[("encoder", "transformer")]), kv(&[("preset", "huge")]), kv(&[("d_char", "7")])] {
            let e = RunConfig::resolve(&bad).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{e}");
        }
    }

    #[test]
    fn flat_file_parsing() {
        let a = parse_flat("# comment\npreset = desk\n\nseed = 3 # trailing\n", "f").unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!((a[1].key.as_str(), a[1].value.as_str()), ("seed", "3"));
        assert!(parse_flat("seed 3\n", "f").unwrap_err().to_string().contains("line 1"));
    }

    #[test]
    fn paths_and_flags() {
        let c = RunConfig::resolve(&kv(&[("train_path", "a.json"), ("leakage_filter", "false")])).unwrap();
        assert_eq!(c.inputs.train_path.as_deref(), Some(Path::new("a.json")));
        assert!(!c.leakage_filter);
    }

    #[test]
    fn run_id_depends_on_seed_only_through_the_config() {
        let a = RunConfig::resolve(&kv(&[("seed", "1")])).unwrap();
        let b = RunConfig::resolve(&kv(&[("seed", "2")])).unwrap();
        assert_ne!(a.run_id(), b.run_id());
        assert_eq!(a.run_id(), RunConfig::resolve(&kv(&[("seed", "1")])).unwrap().run_id());
        assert_eq!(a.run_id().len(), 16);
    }

    proptest! {
        #[test]
        fn flat_round_trip(seed in 0u64..1000, lr in 1e-5f64..1.0, desk in any::<bool>(), d in 1usize..64) {
            let mut pairs = vec![("seed", seed.to_string()), ("learning_rate", lr.to_string()), ("d_out", d.to_string())];
            if desk {
                pairs.push(("preset", "desk".to_string()));
            }
            let pairs: Vec<(&str, &str)> = pairs.iter().map(|(k, v)| (*k, v.as_str())).collect();
            let c = RunConfig::resolve(&kv(&pairs)).unwrap();
            let back = RunConfig::resolve(&parse_flat(&c.to_flat(), "flat").unwrap()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
