//! On-disk model and training state.
//!
//! A model checkpoint directory holds `index.json`, one `NXT1` file per
//! parameter under `params/`, and an exact `NXTD` copy under `exact/`.
//! Loading prefers the exact copy so a reloaded model is bit-identical.
//! Training state (optimizer moments, pseudo labels, epoch log) lives in
//! `train_state.json` with its tensors under `adam/` and `pseudo/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::PseudoLabelMap;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numkernel::io::{read_nxt1, read_nxtd, write_nxt1, write_nxtd};
use crate::numkernel::{Adam, AdamState, Parameterized, Tensor};
use crate::trainer::{EpochLog, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub file: String,
    pub frozen: bool,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub model: ModelConfig,
    pub backbone_checksum: String,
    pub params: BTreeMap<String, ParamEntry>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn save_model(dir: impl AsRef<Path>, model: &Model) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("params"))?;
    fs::create_dir_all(dir.join("exact"))?;
    let mut params = BTreeMap::new();
    let mut result = Ok(());
    model.visit_params("", &mut |name, p| {
        if result.is_err() {
            return;
        }
        let file = format!("params/{name}.nxt1");
        result = write_nxt1(dir.join(&file), &p.value)
            .and_then(|_| write_nxtd(dir.join(format!("exact/{name}.nxtd")), &p.value));
        params.insert(
            name.to_string(),
            ParamEntry {
                file,
                frozen: p.frozen,
                dims: p.value.dims().to_vec(),
            },
        );
    });
    result?;
    write_json(
        &dir.join("index.json"),
        &CheckpointIndex {
            model: model.config.clone(),
            backbone_checksum: model.backbones.checksum(),
            params,
        },
    )
}

pub fn read_index(dir: impl AsRef<Path>) -> Result<CheckpointIndex> {
    read_json(&dir.as_ref().join("index.json"))
}

/// Rebuilds the model from its stored config and overwrites every
/// parameter from disk.
pub fn load_model(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let index = read_index(dir)?;
    let mut model = Model::new(&index.model)?;
    let mut seen = 0usize;
    let mut result = Ok(());
    model.visit_params_mut("", &mut |name, p| {
        if result.is_err() {
            return;
        }
        let Some(entry) = index.params.get(name) else {
            result = Err(Error::Data(format!("checkpoint lacks parameter {name}")));
            return;
        };
        seen += 1;
        let exact = dir.join(format!("exact/{name}.nxtd"));
        let loaded = if exact.exists() {
            read_nxtd(&exact)
        } else {
            read_nxt1(dir.join(&entry.file))
        };
        result = loaded.and_then(|t| {
            if t.dims() != p.value.dims() || entry.dims != p.value.dims() || entry.frozen != p.frozen {
                return Err(Error::Data(format!(
                    "parameter {name}: stored dims {:?} frozen {} vs model {:?} frozen {}",
                    t.dims(),
                    entry.frozen,
                    p.value.dims(),
                    p.frozen
                )));
            }
            p.value = t;
            Ok(())
        });
    });
    result?;
    if seen != index.params.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} parameters, model uses {seen}",
            index.params.len()
        )));
    }
    if model.backbones.checksum() != index.backbone_checksum {
        return Err(Error::Data("backbone checksum mismatch".into()));
    }
    Ok(model)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AdamEntry {
    name: String,
    step_count: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PseudoEntry {
    class_id: usize,
    index: usize,
    h: usize,
    w: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StateFile {
    epoch: usize,
    last_valid_frac: Option<f64>,
    log: Vec<EpochLog>,
    adam: Vec<AdamEntry>,
    pseudo: Vec<PseudoEntry>,
}

pub fn save_train_state(dir: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("adam"))?;
    fs::create_dir_all(dir.join("pseudo"))?;
    let mut adam = Vec::new();
    for (name, s) in &state.adam.states {
        write_nxtd(dir.join(format!("adam/{name}.m.nxtd")), &s.m)?;
        write_nxtd(dir.join(format!("adam/{name}.v.nxtd")), &s.v)?;
        adam.push(AdamEntry {
            name: name.clone(),
            step_count: s.step_count,
            lr: s.lr,
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
        });
    }
    let mut pseudo = Vec::new();
    for (&(class_id, index), map) in &state.pseudo {
        let data: Vec<f64> = map
            .labels
            .iter()
            .map(|&l| l as f64)
            .chain(map.confidence.iter().copied())
            .collect();
        write_nxtd(
            dir.join(format!("pseudo/c{class_id}_{index}.nxtd")),
            &Tensor::new(&[2, map.h, map.w], data)?,
        )?;
        pseudo.push(PseudoEntry {
            class_id,
            index,
            h: map.h,
            w: map.w,
        });
    }
    write_json(
        &dir.join("train_state.json"),
        &StateFile {
            epoch: state.epoch,
            last_valid_frac: state.last_valid_frac,
            log: state.log.clone(),
            adam,
            pseudo,
        },
    )
}

pub fn load_train_state(dir: impl AsRef<Path>) -> Result<TrainState> {
    let dir = dir.as_ref();
    let file: StateFile = read_json(&dir.join("train_state.json"))?;
    let mut adam = Adam::default();
    for e in file.adam {
        let m = read_nxtd(dir.join(format!("adam/{}.m.nxtd", e.name)))?;
        let v = read_nxtd(dir.join(format!("adam/{}.v.nxtd", e.name)))?;
        adam.states.insert(
            e.name,
            AdamState {
                m,
                v,
                step_count: e.step_count,
                lr: e.lr,
                beta1: e.beta1,
                beta2: e.beta2,
                eps: e.eps,
            },
        );
    }
    let mut pseudo = BTreeMap::new();
    for e in file.pseudo {
        let t = read_nxtd(dir.join(format!("pseudo/c{}_{}.nxtd", e.class_id, e.index)))?;
        if t.dims() != [2, e.h, e.w] {
            return Err(Error::Data(format!(
                "pseudo labels for image {} have dims {:?}",
                e.index,
                t.dims()
            )));
        }
        let plane = e.h * e.w;
        pseudo.insert(
            (e.class_id, e.index),
            PseudoLabelMap {
                labels: t.data()[..plane].iter().map(|&v| v as u8).collect(),
                confidence: t.data()[plane..].to_vec(),
                h: e.h,
                w: e.w,
            },
        );
    }
    Ok(TrainState {
        epoch: file.epoch,
        adam,
        pseudo,
        last_valid_frac: file.last_valid_frac,
        log: file.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::IGNORE;
    use crate::trainer::tiny_model_config;

    #[test]
    fn model_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::new(&tiny_model_config(5)).unwrap();
        model.visit_params_mut("", &mut |_, p| {
            if !p.frozen {
                p.value.data_mut().iter_mut().for_each(|v| *v += 1e-9 / 3.0);
            }
        });
        save_model(dir.path(), &model).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back, model);
        let index = read_index(dir.path()).unwrap();
        let e = &index.params["fusion.adapter.0.w_down"];
        assert!(!e.frozen);
        assert_eq!(e.dims, vec![4, 1]);
        assert!(index.params["backbone.hiera.0.down.kernel"].frozen);
        let approx = read_nxt1(dir.path().join(&e.file)).unwrap();
        assert_eq!(approx.dims(), [4, 1]);
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(&tiny_model_config(5)).unwrap();
        save_model(dir.path(), &model).unwrap();
        let mut index = read_index(dir.path()).unwrap();
        index.model.decoder.stage_channels = [8, 4, 4];
        write_json(&dir.path().join("index.json"), &index).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn train_state_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = TrainState {
            epoch: 7,
            last_valid_frac: Some(0.1 + 0.2),
            ..TrainState::default()
        };
        let mut s = AdamState::new(&[2], 1e-4 / 3.0);
        s.m = Tensor::new(&[2], vec![0.1, -1.0 / 3.0]).unwrap();
        s.step_count = 12;
        state.adam.states.insert("heads.x".into(), s);
        state.pseudo.insert(
            (3, 9),
            PseudoLabelMap {
                labels: vec![0, 1, IGNORE, 0],
                confidence: vec![0.9, 0.8, 0.55, 0.71],
                h: 2,
                w: 2,
            },
        );
        save_train_state(dir.path(), &state).unwrap();
        assert_eq!(load_train_state(dir.path()).unwrap(), state);
    }
}
