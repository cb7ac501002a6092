//! Checkpoint directories: `manifest.json` plus one file of little-endian
//! `f32` values per parameter group. Parameters live in memory as `f64`;
//! they are rounded to `f32` on save, so a load followed by a save writes
//! identical bytes.

use std::fs;
use std::path::Path;

use kire_core::datamodel::{Config, RelationVocab};
use kire_core::kg::AttrAutoEncoder;
use kire_core::model::KireModel;
use kire_core::optim::Adam;
use kire_core::params::{ParamKind, ParamStore};
use kire_core::tensor::Matrix;
use kire_core::training::{EpochRecord, RunningLosses, Stage, TrainState};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_bytes, write_json};

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub kind: ParamKind,
    pub shape: [usize; 2],
    /// Byte offset inside the group file.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMeta {
    pub name: String,
    pub file: String,
    pub params: Vec<ParamMeta>,
}

/// What the checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Model,
    Autoencoder,
}

/// Trainer bookkeeping stored alongside the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateMeta {
    pub stage: Stage,
    pub epoch: usize,
    pub seed: u64,
    pub optimizer_step: u64,
    pub losses: RunningLosses,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config: Config,
    #[serde(default)]
    pub entity_types: Vec<String>,
    #[serde(default)]
    pub relations: Vec<String>,
    #[serde(default)]
    pub kg_relation_types: usize,
    pub state: Option<StateMeta>,
    pub groups: Vec<GroupMeta>,
}

/// Group of a parameter: its name up to the first dot.
fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

fn push_f32(bytes: &mut Vec<u8>, m: &Matrix) {
    for &x in m.data() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

/// Writes `store` (and optional Adam moments, as group `optimizer`) under
/// `dir`; returns the group table.
fn write_groups(dir: &Path, store: &ParamStore, optimizer: Option<&Adam>) -> Result<Vec<GroupMeta>> {
    let mut groups: Vec<(GroupMeta, Vec<u8>)> = Vec::new();
    let mut add = |group: &str, name: &str, kind: ParamKind, trainable: bool, m: &Matrix| {
        let pos = match groups.iter().position(|(g, _)| g.name == group) {
            Some(p) => p,
            None => {
                let meta = GroupMeta { name: group.to_string(), file: format!("{group}.f32"), params: Vec::new() };
                groups.push((meta, Vec::new()));
                groups.len() - 1
            }
        };
        let (meta, bytes) = &mut groups[pos];
        let (rows, cols) = m.shape();
        meta.params.push(ParamMeta { name: name.to_string(), kind, shape: [rows, cols], offset: bytes.len(), trainable });
        push_f32(bytes, m);
    };
    for e in store.entries() {
        add(group_of(&e.name), &e.name, e.kind, e.trainable, &e.value);
    }
    if let Some(opt) = optimizer {
        let (first, second) = opt.moments();
        for (prefix, moments) in [("m", first), ("v", second)] {
            for (e, m) in store.entries().iter().zip(moments) {
                if let Some(m) = m {
                    add("optimizer", &format!("{prefix}/{}", e.name), e.kind, false, m);
                }
            }
        }
    }
    for (meta, bytes) in &groups {
        write_bytes(&dir.join(&meta.file), bytes)?;
    }
    Ok(groups.into_iter().map(|(g, _)| g).collect())
}

fn read_group(dir: &Path, group: &GroupMeta) -> Result<Vec<(ParamMeta, Matrix)>> {
    let path = dir.join(&group.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    group
        .params
        .iter()
        .map(|p| {
            let n = p.shape[0] * p.shape[1];
            let slice = bytes
                .get(p.offset..p.offset + 4 * n)
                .ok_or_else(|| Error::format(&path, format!("parameter {} runs past the end of the file", p.name)))?;
            let data = slice.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
            Ok((p.clone(), Matrix::from_vec(p.shape[0], p.shape[1], data)))
        })
        .collect()
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = read_json(&dir.join(MANIFEST))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::format(&dir.join(MANIFEST), format!("unsupported checkpoint format {}", m.format_version)));
    }
    Ok(m)
}

/// Copies checkpoint values into `store`, which must hold exactly the same
/// names and shapes. Returns the optimizer moments found, by parameter
/// index.
fn fill_store(dir: &Path, manifest: &Manifest, store: &mut ParamStore) -> Result<(Vec<Option<Matrix>>, Vec<Option<Matrix>>)> {
    let n = store.len();
    let (mut first, mut second) = (vec![None; n], vec![None; n]);
    let mut seen = 0;
    for group in &manifest.groups {
        for (meta, value) in read_group(dir, group)? {
            let (slot, name) = match meta.name.split_once('/') {
                Some(("m", rest)) if group.name == "optimizer" => (Some(&mut first), rest),
                Some(("v", rest)) if group.name == "optimizer" => (Some(&mut second), rest),
                _ => (None, meta.name.as_str()),
            };
            let id = store.find(name).ok_or_else(|| Error::config(format!("checkpoint parameter {name} is not part of the model")))?;
            if store.get(id).shape() != value.shape() {
                return Err(Error::config(format!("checkpoint parameter {name} has shape {:?}, model expects {:?}", value.shape(), store.get(id).shape())));
            }
            match slot {
                Some(moments) => moments[id.0] = Some(value),
                None => {
                    *store.get_mut(id) = value;
                    store.set_trainable(id, meta.trainable);
                    seen += 1;
                }
            }
        }
    }
    if seen != n {
        return Err(Error::config(format!("checkpoint holds {seen} parameters, model has {n}")));
    }
    Ok((first, second))
}

fn state_meta(state: &TrainState) -> StateMeta {
    StateMeta {
        stage: state.stage,
        epoch: state.epoch,
        seed: state.seed,
        optimizer_step: state.optimizer.step,
        losses: state.losses,
        history: state.history.clone(),
    }
}

/// Saves model parameters; `with_optimizer` adds the Adam moments of `state`.
pub fn save_model(dir: &Path, model: &KireModel, kg_relation_types: usize, state: Option<&TrainState>, with_optimizer: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let groups = write_groups(dir, &model.store, state.filter(|_| with_optimizer).map(|s| &s.optimizer))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::Model,
        config: model.config.clone(),
        entity_types: model.entity_types.clone(),
        relations: model.relations.labels().to_vec(),
        kg_relation_types,
        state: state.map(state_meta),
        groups,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

/// A loaded model checkpoint.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub model: KireModel,
    pub manifest: Manifest,
    /// Adam state, when the checkpoint carried moments.
    pub optimizer: Option<Adam>,
}

pub fn load_model(dir: &Path) -> Result<LoadedModel> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != CheckpointKind::Model {
        return Err(Error::config(format!("{} is not a model checkpoint", dir.display())));
    }
    let relations = RelationVocab::new(manifest.relations.clone())?;
    let mut model = KireModel::new(&manifest.config, manifest.entity_types.clone(), relations, manifest.kg_relation_types)?;
    let (first, second) = fill_store(dir, &manifest, &mut model.store)?;
    let optimizer = (first.iter().any(Option::is_some)).then(|| {
        let mut adam = Adam::new(manifest.config.learning_rate);
        adam.step = manifest.state.as_ref().map_or(0, |s| s.optimizer_step);
        adam.set_moments(first, second);
        adam
    });
    Ok(LoadedModel { model, manifest, optimizer })
}

pub fn save_autoencoder(dir: &Path, ae: &AttrAutoEncoder, config: &Config) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let groups = write_groups(dir, &ae.store, None)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::Autoencoder,
        config: config.clone(),
        entity_types: Vec::new(),
        relations: Vec::new(),
        kg_relation_types: 0,
        state: None,
        groups,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load_autoencoder(dir: &Path) -> Result<(AttrAutoEncoder, Manifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != CheckpointKind::Autoencoder {
        return Err(Error::config(format!("{} is not an autoencoder checkpoint", dir.display())));
    }
    let mut store = ParamStore::new();
    for group in &manifest.groups {
        for (meta, value) in read_group(dir, group)? {
            let id = store.add(meta.name, meta.kind, value);
            store.set_trainable(id, meta.trainable);
        }
    }
    Ok((AttrAutoEncoder::with_store(&manifest.config, store)?, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use kire_core::training::RunningLosses;

    fn small() -> Config {
        Config { d_token: 4, d_out: 4, d_mlp: 4, d_ent: 4, d_rgat: 4, n_kernel: 4, d_rel: 2, n_head: 2, ..Config::desk() }
    }

    fn model() -> KireModel {
        KireModel::new(&small(), vec!["PER".into(), "ORG".into()], RelationVocab::new(["met", "owns"]).unwrap(), 2).unwrap()
    }

    fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        out.sort();
        out
    }

    fn state(model: &KireModel) -> TrainState {
        let mut adam = Adam::new(0.01);
        adam.step = 7;
        let moments = |scale: f64| model.store.entries().iter().map(|e| Some(e.value.scale(scale))).collect::<Vec<_>>();
        adam.set_moments(moments(0.5), moments(0.25));
        TrainState {
            stage: Stage::Kire,
            epoch: 3,
            seed: 11,
            optimizer: adam,
            losses: RunningLosses { re: 0.5, cr: 0.25, kg: 0.125, total: 0.875 },
            history: Vec::new(),
        }
    }

    #[test]
    fn model_round_trip_is_byte_identical() {
        let m = model();
        let st = state(&m);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_model(a.path(), &m, 2, Some(&st), true).unwrap();
        let loaded = load_model(a.path()).unwrap();
        let mut st2 = st.clone();
        st2.optimizer = loaded.optimizer.clone().unwrap();
        save_model(b.path(), &loaded.model, loaded.manifest.kg_relation_types, Some(&st2), true).unwrap();
        assert_eq!(files(a.path()), files(b.path()));
        assert_eq!(loaded.optimizer.unwrap().step, 7);
        assert_eq!(loaded.manifest.state.unwrap().epoch, 3);
    }

    #[test]
    fn loaded_values_are_f32_rounded_originals() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &m, 2, None, false).unwrap();
        let loaded = load_model(dir.path()).unwrap();
        assert!(loaded.optimizer.is_none());
        for (orig, back) in m.store.entries().iter().zip(loaded.model.store.entries()) {
            assert_eq!(orig.name, back.name);
            assert_eq!(orig.trainable, back.trainable);
            for (x, y) in orig.value.data().iter().zip(back.value.data()) {
                assert_eq!(f64::from(*x as f32), *y);
            }
        }
    }

    #[test]
    fn autoencoder_round_trip() {
        let c = small();
        let ae = AttrAutoEncoder::seeded(&c, 3);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_autoencoder(a.path(), &ae, &c).unwrap();
        let (back, manifest) = load_autoencoder(a.path()).unwrap();
        assert_eq!(manifest.kind, CheckpointKind::Autoencoder);
        save_autoencoder(b.path(), &back, &manifest.config).unwrap();
        assert_eq!(files(a.path()), files(b.path()));
        assert!(load_model(a.path()).is_err());
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &model(), 2, None, false).unwrap();
        let path = dir.path().join(MANIFEST);
        let mut manifest: Manifest = read_json(&path).unwrap();
        manifest.kg_relation_types = 5;
        write_json(&path, &manifest).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        assert!(err.to_string().contains("shape") || err.to_string().contains("parameters"), "{err}");
    }
}
