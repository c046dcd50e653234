//! Per-epoch checkpoints: a JSON manifest plus one RTEN file per tensor.

use std::path::{Path, PathBuf};

use relcorr_core::model::Model;
use relcorr_tensor::{rten, ParamSet};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

const MANIFEST: &str = "checkpoint.json";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    epoch: usize,
    classes: usize,
    config: String,
    config_base: PathBuf,
    params: Vec<Entry>,
    buffers: Vec<Entry>,
    velocity: Vec<Entry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Completed epochs.
    pub epoch: usize,
    pub classes: usize,
    pub config: RunConfig,
    pub params: ParamSet<f32>,
    pub buffers: ParamSet<f32>,
    pub velocity: ParamSet<f32>,
}

pub fn epoch_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("epoch_{epoch:03}"))
}

/// `dir` itself when it holds a checkpoint, else its latest `epoch_*` child.
pub fn resolve(dir: &Path) -> Result<PathBuf> {
    if dir.join(MANIFEST).is_file() {
        return Ok(dir.to_path_buf());
    }
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries.flatten() {
        let name = entry.file_name();
        let Some(n) = name.to_str().and_then(|s| s.strip_prefix("epoch_")).and_then(|s| s.parse::<usize>().ok()) else {
            continue;
        };
        if entry.path().join(MANIFEST).is_file() && best.as_ref().map_or(true, |(b, _)| n > *b) {
            best = Some((n, entry.path()));
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| CliError::Checkpoint(format!("no checkpoint under {}", dir.display())))
}

fn write_set(dir: &Path, group: &str, set: &ParamSet<f32>) -> Result<Vec<Entry>> {
    let sub = dir.join(group);
    std::fs::create_dir_all(&sub).map_err(|e| CliError::io(&sub, e))?;
    set.iter()
        .enumerate()
        .map(|(i, (name, t))| {
            let file = format!("{group}/{i:04}.rten");
            let path = dir.join(&file);
            rten::write(&path, t).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
            Ok(Entry { name: name.to_string(), shape: t.shape().to_vec(), file })
        })
        .collect()
}

fn read_set(dir: &Path, entries: &[Entry]) -> Result<ParamSet<f32>> {
    let mut set = ParamSet::new();
    for e in entries {
        let path = dir.join(&e.file);
        let t = rten::read(&path).map_err(|err| CliError::Checkpoint(format!("{}: {err}", path.display())))?;
        if t.shape() != e.shape.as_slice() {
            return Err(CliError::Checkpoint(format!("{}: shape {:?}, manifest says {:?}", path.display(), t.shape(), e.shape)));
        }
        set.insert(e.name.clone(), t);
    }
    Ok(set)
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let base = std::fs::canonicalize(self.config.base()).unwrap_or_else(|_| self.config.base().to_path_buf());
        let manifest = Manifest {
            epoch: self.epoch,
            classes: self.classes,
            config: self.config.serialize(),
            config_base: base,
            params: write_set(dir, "params", &self.params)?,
            buffers: write_set(dir, "buffers", &self.buffers)?,
            velocity: write_set(dir, "velocity", &self.velocity)?,
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("checkpoint manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    /// Loads from a checkpoint directory or a run directory holding `epoch_*` children.
    pub fn load(dir: &Path) -> Result<Self> {
        let dir = resolve(dir)?;
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
        let config = RunConfig::parse(&m.config)?.with_base(m.config_base);
        Ok(Checkpoint {
            epoch: m.epoch,
            classes: m.classes,
            config,
            params: read_set(&dir, &m.params)?,
            buffers: read_set(&dir, &m.buffers)?,
            velocity: read_set(&dir, &m.velocity)?,
        })
    }

    /// Copies the stored tensors into `model` after checking names and shapes.
    pub fn apply(&self, model: &mut Model<f32>) -> Result<()> {
        if self.classes != model.classes {
            return Err(CliError::Checkpoint(format!("{} classes stored, model has {}", self.classes, model.classes)));
        }
        copy_into(&self.params, &mut model.params, "parameter")?;
        copy_into(&self.buffers, &mut model.buffers, "buffer")
    }
}

fn copy_into(src: &ParamSet<f32>, dst: &mut ParamSet<f32>, what: &str) -> Result<()> {
    if src.len() != dst.len() {
        return Err(CliError::Checkpoint(format!("{} {what}s stored, model has {}", src.len(), dst.len())));
    }
    for (name, t) in src.iter() {
        let slot = dst.get_mut(name).ok_or_else(|| CliError::Checkpoint(format!("model has no {what} `{name}`")))?;
        if slot.shape() != t.shape() {
            return Err(CliError::Checkpoint(format!("{what} `{name}`: stored {:?}, model {:?}", t.shape(), slot.shape())));
        }
        *slot = t.clone();
    }
    Ok(())
}
