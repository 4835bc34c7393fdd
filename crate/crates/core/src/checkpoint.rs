//! Checkpoint directory: `manifest.json` plus one little-endian f32 blob per
//! parameter tensor.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob::{read_f32, read_i32, read_json, write_f32, write_i32, write_json};
use crate::encoders::Parameters;
use crate::error::{Error, Result};
use crate::training::{TrainConfig, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: TrainConfig,
    pub visual_dim: usize,
    pub neural_dim: usize,
    pub num_classes: usize,
    pub step: u64,
    pub epoch: u64,
    pub tensors: Vec<TensorEntry>,
    pub bank_seen: String,
}

fn groups(state: &TrainState) -> [(&'static str, &dyn Parameters); 4] {
    [
        ("net", &state.net),
        ("q_v", &state.q_v),
        ("q_b", &state.q_b),
        ("probe", &state.probe),
    ]
}

pub fn save(state: &TrainState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (prefix, params) in groups(state) {
        for t in params.tensors() {
            let name = format!("{prefix}.{}", t.name);
            let file = format!("{name}.f32");
            write_f32(&dir.join(&file), t.data.iter().map(|&x| x as f32))?;
            tensors.push(TensorEntry { name, shape: t.shape, file });
        }
    }
    let bank = &state.bank;
    let file = "bank.centers.f32".to_string();
    write_f32(&dir.join(&file), bank.centers.iter().map(|&x| x as f32))?;
    tensors.push(TensorEntry {
        name: "bank.centers".into(),
        shape: [bank.num_classes(), bank.dim()],
        file,
    });
    let bank_seen = "bank.seen.i32".to_string();
    write_i32(&dir.join(&bank_seen), bank.seen.iter().map(|&s| s as i32))?;

    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        config: state.config.clone(),
        visual_dim: state.visual_dim,
        neural_dim: state.neural_dim,
        num_classes: bank.num_classes(),
        step: state.step,
        epoch: state.epoch,
        tensors,
        bank_seen,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn fill(
    prefix: &str,
    params: &mut dyn Parameters,
    entries: &BTreeMap<&str, &TensorEntry>,
    dir: &Path,
) -> Result<()> {
    let expected: Vec<_> = params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
    for ((name, shape), slot) in expected.into_iter().zip(params.tensors_mut()) {
        let full = format!("{prefix}.{name}");
        let entry = entries
            .get(full.as_str())
            .ok_or_else(|| Error::format(&full, "tensor missing from checkpoint manifest"))?;
        if entry.shape != shape {
            return Err(Error::format(
                &full,
                format!("shape {:?} does not match model shape {:?}", entry.shape, shape),
            ));
        }
        let data = read_f32(&dir.join(&entry.file), slot.len(), &full)?;
        for (dst, src) in slot.iter_mut().zip(data) {
            *dst = f64::from(src);
        }
    }
    Ok(())
}

/// Restores parameters, prototypes and counters. Optimizer moments start
/// fresh.
pub fn load(dir: &Path) -> Result<TrainState> {
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"), "manifest")?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::format("version", format!("unsupported checkpoint version {}", manifest.version)));
    }
    let mut state = TrainState::new(
        &manifest.config,
        manifest.visual_dim,
        manifest.neural_dim,
        manifest.num_classes,
    )?;
    let entries: BTreeMap<&str, &TensorEntry> = manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    fill("net", &mut state.net, &entries, dir)?;
    fill("q_v", &mut state.q_v, &entries, dir)?;
    fill("q_b", &mut state.q_b, &entries, dir)?;
    fill("probe", &mut state.probe, &entries, dir)?;

    let centers = entries
        .get("bank.centers")
        .ok_or_else(|| Error::format("bank.centers", "missing"))?;
    let shape = [state.bank.num_classes(), state.bank.dim()];
    if centers.shape != shape {
        return Err(Error::format("bank.centers", format!("shape {:?}, expected {shape:?}", centers.shape)));
    }
    let data = read_f32(&dir.join(&centers.file), shape[0] * shape[1], "bank.centers")?;
    for (dst, src) in state.bank.centers.iter_mut().zip(data) {
        *dst = f64::from(src);
    }
    let seen = read_i32(&dir.join(&manifest.bank_seen), shape[0], "bank.seen")?;
    state.bank.seen = seen.into_iter().map(|s| s != 0).collect();
    state.step = manifest.step;
    state.epoch = manifest.epoch;
    Ok(state)
}
