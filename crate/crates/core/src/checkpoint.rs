//! Checkpoint format: a JSON manifest describing every tensor plus a
//! binary blob of little-endian 32-bit floats in manifest order.
//!
//! The manifest carries the supernet configuration, training
//! configuration, completed-epoch count, and the optimizer step; BN
//! running statistics and AdamW moment buffers are stored as ordinary
//! tensor entries so a resumed run is bit-identical to an uninterrupted
//! one.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Supernet, SupernetConfig};
use crate::rng::Rng;
use crate::space::{FixedBackbone, SearchSpace, SpaceKind};
use crate::train::{AdamW, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the weights blob.
    pub offset: u64,
    /// Element count.
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub space: SpaceKind,
    pub backbone: Option<FixedBackbone>,
    pub supernet: SupernetConfig,
    pub train: TrainConfig,
    /// Completed training epochs.
    pub epoch: usize,
    pub seed: u64,
    pub optimizer_step: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Derive "x.bn.running_mean" from the registered "x.bn.gamma" name.
fn running_names(gamma_name: &str) -> (String, String) {
    let base = gamma_name.strip_suffix(".gamma").unwrap_or(gamma_name);
    (format!("{base}.running_mean"), format!("{base}.running_var"))
}

fn push(
    tensors: &mut Vec<TensorEntry>,
    blob: &mut Vec<u8>,
    name: String,
    shape: Vec<usize>,
    data: &[f32],
) {
    let offset = blob.len() as u64;
    for x in data {
        blob.extend_from_slice(&x.to_le_bytes());
    }
    tensors.push(TensorEntry { name, shape, dtype: "f32".into(), offset, len: data.len() as u64 });
}

pub fn save_checkpoint(
    dir: &Path,
    net: &Supernet,
    opt: Option<&AdamW>,
    train: &TrainConfig,
    space: SpaceKind,
    backbone: Option<&FixedBackbone>,
    epoch: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for id in net.params.ids() {
        let t = net.params.get(id);
        push(&mut tensors, &mut blob, net.params.name(id).to_string(), t.shape().to_vec(), t.data());
    }
    for bn in &net.bns {
        let (mname, vname) = running_names(net.params.name(bn.gamma));
        let w = bn.running_mean.len();
        push(&mut tensors, &mut blob, mname, vec![w], &bn.running_mean);
        push(&mut tensors, &mut blob, vname, vec![w], &bn.running_var);
    }
    let mut optimizer_step = 0;
    if let Some(opt) = opt {
        let (step, m, v) = opt.state();
        optimizer_step = step;
        for (i, id) in net.params.ids().enumerate() {
            let shape = net.params.get(id).shape().to_vec();
            push(&mut tensors, &mut blob, format!("optim.m.{}", net.params.name(id)), shape.clone(), &m[i]);
            push(&mut tensors, &mut blob, format!("optim.v.{}", net.params.name(id)), shape, &v[i]);
        }
    }
    let manifest = Manifest {
        version: 1,
        space,
        backbone: backbone.copied(),
        supernet: net.config.clone(),
        train: train.clone(),
        epoch,
        seed: train.seed,
        optimizer_step,
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("serializing manifest: {e}")))?;
    // Write-then-rename so a crash never leaves a torn checkpoint.
    let tmp_manifest = dir.join(format!("{MANIFEST_FILE}.tmp"));
    let tmp_weights = dir.join(format!("{WEIGHTS_FILE}.tmp"));
    std::fs::File::create(&tmp_manifest)?.write_all(json.as_bytes())?;
    std::fs::File::create(&tmp_weights)?.write_all(&blob)?;
    std::fs::rename(&tmp_manifest, dir.join(MANIFEST_FILE))?;
    std::fs::rename(&tmp_weights, dir.join(WEIGHTS_FILE))?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub manifest: Manifest,
    pub net: Supernet,
    /// Present when the checkpoint was saved mid-training.
    pub optimizer: Option<AdamW>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("parsing {}: {e}", path.display())))
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let manifest = read_manifest(dir)?;
    if manifest.version != 1 {
        return Err(Error::Data(format!("unsupported checkpoint version {}", manifest.version)));
    }
    let mut blob = Vec::new();
    std::fs::File::open(dir.join(WEIGHTS_FILE))
        .map_err(|e| Error::Data(format!("opening weights blob: {e}")))?
        .read_to_end(&mut blob)?;
    let floats = |entry: &TensorEntry| -> Result<Vec<f32>> {
        if entry.dtype != "f32" {
            return Err(Error::Data(format!("tensor {}: unsupported dtype {}", entry.name, entry.dtype)));
        }
        let start = entry.offset as usize;
        let end = start + 4 * entry.len as usize;
        if end > blob.len() {
            return Err(Error::Data(format!(
                "tensor {} extends past the weights blob ({} > {})",
                entry.name,
                end,
                blob.len()
            )));
        }
        if entry.shape.iter().product::<usize>() != entry.len as usize {
            return Err(Error::Data(format!(
                "tensor {}: shape {:?} does not match {} elements",
                entry.name, entry.shape, entry.len
            )));
        }
        Ok(blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    };
    let find = |name: &str| -> Result<&TensorEntry> {
        manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {name}")))
    };

    let mut net = Supernet::new(manifest.supernet.clone(), &mut Rng::new(0))?;
    for id in net.params.ids().collect::<Vec<_>>() {
        let name = net.params.name(id).to_string();
        let entry = find(&name)?;
        let expect = net.params.get(id).shape();
        if entry.shape != expect {
            return Err(Error::Data(format!(
                "tensor {name}: checkpoint shape {:?} does not match declared {:?}",
                entry.shape, expect
            )));
        }
        let data = floats(entry)?;
        net.params.get_mut(id).data_mut().copy_from_slice(&data);
    }
    for i in 0..net.bns.len() {
        let (mname, vname) = running_names(net.params.name(net.bns[i].gamma));
        let m = floats(find(&mname)?)?;
        let v = floats(find(&vname)?)?;
        if m.len() != net.bns[i].running_mean.len() || v.len() != net.bns[i].running_var.len() {
            return Err(Error::Data(format!("BN statistics width mismatch for {mname}")));
        }
        net.bns[i].running_mean = m;
        net.bns[i].running_var = v;
    }
    let has_optim = manifest.tensors.iter().any(|e| e.name.starts_with("optim.m."));
    let optimizer = if has_optim {
        let mut ms = Vec::new();
        let mut vs = Vec::new();
        for id in net.params.ids() {
            let name = net.params.name(id);
            ms.push(floats(find(&format!("optim.m.{name}"))?)?);
            vs.push(floats(find(&format!("optim.v.{name}"))?)?);
        }
        Some(AdamW::from_state(
            manifest.train.learning_rate,
            manifest.train.weight_decay,
            manifest.optimizer_step,
            ms,
            vs,
        ))
    } else {
        None
    };
    Ok(LoadedCheckpoint { manifest, net, optimizer })
}

/// A checkpoint may only be used with the search space it was trained
/// for: the supernet dimensions derived from the space must match.
pub fn check_space(
    manifest: &Manifest,
    space: &SearchSpace,
    backbone: Option<&FixedBackbone>,
) -> Result<()> {
    if manifest.space != space.kind {
        return Err(Error::Config(format!(
            "checkpoint was trained for space {}, not {}",
            manifest.space, space.kind
        )));
    }
    let expect = match backbone {
        Some(b) => SupernetConfig::for_backbone(
            b,
            manifest.supernet.in_channels,
            manifest.supernet.num_classes,
            manifest.supernet.input_hw,
        )?,
        None => SupernetConfig::for_space(
            space,
            manifest.supernet.in_channels,
            manifest.supernet.num_classes,
            manifest.supernet.input_hw,
        )?,
    };
    if manifest.supernet != expect {
        return Err(Error::Config(format!(
            "checkpoint supernet dimensions {:?} do not match the declared space ({:?})",
            manifest.supernet, expect
        )));
    }
    if manifest.backbone != backbone.copied() {
        return Err(Error::Config("checkpoint backbone does not match the requested one".into()));
    }
    Ok(())
}
