//! `GMP1` checkpoints: magic, u32 version, u64 manifest length, a JSON
//! manifest (config, modality dims, tensor names and shapes), then every
//! tensor as little-endian f32 in manifest order.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{ModelParams, ModelShape};
use super::{CompletionModel, TrainConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GMP1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: TrainConfig,
    modality_dims: Vec<usize>,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(model: &CompletionModel, w: &mut impl Write) -> Result<()> {
    let tensors = model.params.tensors();
    let manifest = Manifest {
        config: model.config.clone(),
        modality_dims: model.params.shape().modality_dims,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: [t.nrows(), t.ncols()],
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in &tensors {
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &v in t.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<CompletionModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a GMP1 checkpoint".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| Error::Format("manifest too large".into()))?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    manifest.config.validate()?;

    let shape = ModelShape::new(&manifest.config, &manifest.modality_dims);
    let mut params = ModelParams::init(&shape, &mut ChaCha8Rng::seed_from_u64(0));
    let mut slots = params.tensors_mut();
    if slots.len() != manifest.tensors.len() {
        return Err(Error::Format(format!(
            "manifest lists {} tensors, model has {}",
            manifest.tensors.len(),
            slots.len()
        )));
    }
    for ((name, t), entry) in slots.iter_mut().zip(&manifest.tensors) {
        if *name != entry.name || [t.nrows(), t.ncols()] != entry.shape {
            return Err(Error::Format(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                entry.name,
                entry.shape,
                name,
                [t.nrows(), t.ncols()]
            )));
        }
        let mut buf = vec![0u8; t.len() * 4];
        r.read_exact(&mut buf)?;
        for (v, b) in t.iter_mut().zip(buf.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        }
    }
    drop(slots);
    if !params.all_finite() {
        return Err(Error::Format("checkpoint holds non-finite values".into()));
    }
    Ok(CompletionModel {
        config: manifest.config,
        params,
    })
}
