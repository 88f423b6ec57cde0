//! Checkpoint directories.
//!
//! Layout:
//! - `manifest.json`: ordered list of `{name, shape, dtype}` tensor entries
//! - `params.bin`: the tensors concatenated as little-endian `float64`
//! - `rng.json`: the training RNG state
//! - `trainer.json`: iteration, optimizer step, momenta, config and its hash
//!
//! Tensor names are prefixed by owner: `student/`, `teacher/`, `adam.m/`,
//! `adam.v/`; the teacher center is stored as `teacher/center`.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamW, TrainState};
use crate::config::RunConfig;
use crate::distill::TeacherState;
use crate::error::{FsrError, Result};
use crate::params::ParamStore;
use crate::tensor::Matrix;

const DTYPE: &str = "float64";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
}

#[derive(Serialize, Deserialize)]
struct TrainerMeta {
    iteration: usize,
    optimizer_step: u64,
    encoder_momentum: f64,
    proj_momentum: f64,
    center_momentum: f64,
    config_hash: String,
    config: RunConfig,
}

fn bad(path: &Path, reason: impl Into<String>) -> FsrError {
    FsrError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn push_store(prefix: &str, store: &ParamStore, out: &mut Vec<(String, Matrix)>) {
    for (name, v) in store.iter() {
        out.push((format!("{prefix}/{name}"), v.clone()));
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FsrError::io(dir, e))?;
    let s = &ckpt.state;
    let mut tensors = Vec::new();
    push_store("student", &s.student, &mut tensors);
    push_store("teacher", &s.teacher.params, &mut tensors);
    tensors.push((
        "teacher/center".to_string(),
        Matrix::row_vector(s.teacher.center.clone()),
    ));
    push_store("adam.m", &s.optimizer.m, &mut tensors);
    push_store("adam.v", &s.optimizer.v, &mut tensors);

    let mut manifest = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    for (name, m) in &tensors {
        manifest.push(TensorEntry {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
            dtype: DTYPE.into(),
        });
        for x in m.as_slice() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    write_json(dir, "manifest.json", &manifest)?;
    let p = dir.join("params.bin");
    fs::write(&p, blob).map_err(|e| FsrError::io(&p, e))?;
    write_json(dir, "rng.json", &s.rng)?;
    write_json(
        dir,
        "trainer.json",
        &TrainerMeta {
            iteration: s.iteration,
            optimizer_step: s.optimizer.step,
            encoder_momentum: s.teacher.encoder_momentum,
            proj_momentum: s.teacher.proj_momentum,
            center_momentum: s.teacher.center_momentum,
            config_hash: ckpt.config.hash(),
            config: ckpt.config.clone(),
        },
    )?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, file: &str, value: &T) -> Result<()> {
    let p = dir.join(file);
    let text = serde_json::to_string_pretty(value).expect("checkpoint metadata serializes");
    fs::write(&p, text).map_err(|e| FsrError::io(&p, e))
}

fn read_json<T: serde::de::DeserializeOwned>(dir: &Path, file: &str) -> Result<T> {
    let p = dir.join(file);
    let text = fs::read_to_string(&p).map_err(|e| FsrError::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| FsrError::json(&p, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    if !dir.is_dir() {
        return Err(bad(dir, "not a checkpoint directory"));
    }
    let manifest: Vec<TensorEntry> = read_json(dir, "manifest.json")?;
    let meta: TrainerMeta = read_json(dir, "trainer.json")?;
    let rng: ChaCha8Rng = read_json(dir, "rng.json")?;
    if meta.config.hash() != meta.config_hash {
        return Err(bad(
            dir,
            format!(
                "config hash {} does not match stored config",
                meta.config_hash
            ),
        ));
    }
    meta.config.validate()?;

    let p = dir.join("params.bin");
    let blob = fs::read(&p).map_err(|e| FsrError::io(&p, e))?;
    let expected: usize = manifest.iter().map(|e| e.shape[0] * e.shape[1] * 8).sum();
    if blob.len() != expected {
        return Err(bad(
            &p,
            format!("{} bytes, manifest describes {expected}", blob.len()),
        ));
    }
    let (mut student, mut teacher, mut m, mut v) = (
        ParamStore::new(),
        ParamStore::new(),
        ParamStore::new(),
        ParamStore::new(),
    );
    let mut center = None;
    let mut offset = 0;
    for e in &manifest {
        if e.dtype != DTYPE {
            return Err(bad(
                dir,
                format!("tensor {} has unsupported dtype {}", e.name, e.dtype),
            ));
        }
        let n = e.shape[0] * e.shape[1];
        let data = blob[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        offset += n * 8;
        let value = Matrix::from_vec(e.shape[0], e.shape[1], data)?;
        let (owner, name) = e
            .name
            .split_once('/')
            .ok_or_else(|| bad(dir, format!("tensor name {} has no owner", e.name)))?;
        match (owner, name) {
            ("teacher", "center") => center = Some(value.into_vec()),
            ("student", _) => student.insert(name, value),
            ("teacher", _) => teacher.insert(name, value),
            ("adam.m", _) => m.insert(name, value),
            ("adam.v", _) => v.insert(name, value),
            _ => return Err(bad(dir, format!("unknown tensor owner in {}", e.name))),
        }
    }
    let center = center.ok_or_else(|| bad(dir, "missing teacher/center"))?;
    let tc = &meta.config.train;
    let optimizer = AdamW {
        beta1: tc.beta1,
        beta2: tc.beta2,
        eps: tc.adam_eps,
        weight_decay: tc.weight_decay,
        step: meta.optimizer_step,
        m,
        v,
    };
    let teacher = TeacherState {
        params: teacher,
        center,
        encoder_momentum: meta.encoder_momentum,
        proj_momentum: meta.proj_momentum,
        center_momentum: meta.center_momentum,
    };
    Ok(Checkpoint {
        config: meta.config,
        state: TrainState {
            iteration: meta.iteration,
            student,
            teacher,
            optimizer,
            rng,
        },
    })
}
