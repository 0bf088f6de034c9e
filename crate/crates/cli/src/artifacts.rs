//! Loading inputs and upstream artifacts, and writing run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use modfill::eval::generate_synthetic;
use modfill::graph::{project_item_graph, read_interactions_tsv, InteractionLog, ItemGraph, ProjectionOptions};
use modfill::modality::{FeatureMatrix, ModalityMask, ModalityStore};
use modfill::model::{read_checkpoint, CompletionModel};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const GRAPH_FILE: &str = "graph.ggr";
pub const MASK_FILE: &str = "mask.csv";
pub const MODEL_FILE: &str = "model.gmp";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hashes of the inputs a command consumed, keyed by role.
#[derive(Debug, Default)]
pub struct InputHashes(BTreeMap<String, String>);

impl InputHashes {
    pub fn add_file(&mut self, role: &str, path: &Path) -> Result<()> {
        self.0.insert(role.to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn add_value(&mut self, role: &str, digest: String) {
        self.0.insert(role.to_string(), digest);
    }
}

/// A file that an earlier command must have produced.
pub fn upstream(dir: &Path, name: &str, producer: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if !path.is_file() {
        bail!("missing upstream artifact {} (run `modfill {producer}` first)", path.display());
    }
    Ok(path)
}

pub fn load_store(cfg: &RunConfig, hashes: &mut InputHashes) -> Result<ModalityStore> {
    let specs = cfg.feature_specs()?;
    if specs.is_empty() {
        bail!("at least one --features name=path is required (or --synthetic)");
    }
    let mut named = Vec::new();
    for (name, path) in specs {
        if !path.is_file() {
            bail!("feature file {} does not exist", path.display());
        }
        let matrix = FeatureMatrix::load(&path).with_context(|| format!("loading features {}", path.display()))?;
        hashes.add_file(&format!("features:{name}"), &path)?;
        named.push((name, matrix));
    }
    Ok(ModalityStore::new(named)?)
}

/// Graph and features for commands that need both: the synthetic dataset,
/// or the run directory's graph cache plus the feature files.
pub fn load_graph_and_store(cfg: &RunConfig, hashes: &mut InputHashes) -> Result<(ItemGraph, ModalityStore)> {
    if cfg.synthetic {
        let data = generate_synthetic(&cfg.eval.synthetic)?;
        hashes.add_value("synthetic", sha256_bytes(serde_json::to_string(&cfg.eval.synthetic)?.as_bytes()));
        return Ok((data.graph, data.store));
    }
    let dir = cfg.out_dir()?;
    let graph_path = upstream(dir, GRAPH_FILE, "build-graph")?;
    let graph = ItemGraph::load(&graph_path).with_context(|| format!("loading {}", graph_path.display()))?;
    hashes.add_file("graph", &graph_path)?;
    let store = load_store(cfg, hashes)?;
    if graph.n() != store.n_items() {
        bail!(
            "graph has {} items but feature files have {} rows",
            graph.n(),
            store.n_items()
        );
    }
    Ok((graph, store))
}

/// Item and modality counts without loading a graph.
pub fn load_shape_source(cfg: &RunConfig, hashes: &mut InputHashes) -> Result<ModalityStore> {
    if cfg.synthetic {
        let data = generate_synthetic(&cfg.eval.synthetic)?;
        hashes.add_value("synthetic", sha256_bytes(serde_json::to_string(&cfg.eval.synthetic)?.as_bytes()));
        Ok(data.store)
    } else {
        load_store(cfg, hashes)
    }
}

pub fn load_mask(cfg: &RunConfig, store: &ModalityStore, hashes: &mut InputHashes) -> Result<ModalityMask> {
    let path = match &cfg.mask {
        Some(p) => {
            if !p.is_file() {
                bail!("mask file {} does not exist", p.display());
            }
            p.clone()
        }
        None => upstream(cfg.out_dir()?, MASK_FILE, "mask")?,
    };
    let mask = ModalityMask::load_csv(&path).with_context(|| format!("loading mask {}", path.display()))?;
    use modfill::modality::Observation;
    if mask.n_items() != store.n_items() || mask.n_modalities() != store.n_modalities() {
        bail!(
            "mask covers {} items x {} modalities, features have {} x {}",
            mask.n_items(),
            mask.n_modalities(),
            store.n_items(),
            store.n_modalities()
        );
    }
    hashes.add_file("mask", &path)?;
    Ok(mask)
}

pub fn load_model(cfg: &RunConfig, store: &ModalityStore, hashes: &mut InputHashes) -> Result<CompletionModel> {
    let path = upstream(cfg.out_dir()?, MODEL_FILE, "train")?;
    let mut reader = std::io::BufReader::new(fs::File::open(&path)?);
    let model = read_checkpoint(&mut reader).with_context(|| format!("loading {}", path.display()))?;
    if model.params.shape().modality_dims != store.dims() {
        bail!("checkpoint modality dims do not match the feature files");
    }
    hashes.add_file("model", &path)?;
    Ok(model)
}

pub fn project_interactions(path: &Path, min_degree: usize) -> Result<(ItemGraph, Vec<u64>)> {
    let raw = read_interactions_tsv(path)?;
    let (log, ids) = InteractionLog::from_external(&raw)?;
    let opts = ProjectionOptions {
        min_degree,
        ..ProjectionOptions::default()
    };
    Ok((project_item_graph(&log, opts)?, ids.items))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Adds this command's entry to `<out>/manifest.json`, keeping other commands' entries.
/// `extra` carries digests computed by the caller, e.g. of a report with its
/// wall-clock section removed.
pub fn record_manifest(
    cfg: &RunConfig,
    command: &str,
    hashes: InputHashes,
    outputs: &[&str],
    extra: &[(&str, String)],
) -> Result<()> {
    let dir = cfg.out_dir()?;
    let path = dir.join(MANIFEST_FILE);
    let mut doc: BTreeMap<String, Value> = if path.is_file() {
        serde_json::from_str(&fs::read_to_string(&path)?).unwrap_or_default()
    } else {
        BTreeMap::new()
    };
    let mut produced = BTreeMap::new();
    for name in outputs {
        produced.insert(name.to_string(), sha256_file(&dir.join(name))?);
    }
    for (name, digest) in extra {
        produced.insert(name.to_string(), digest.clone());
    }
    doc.insert(
        command.to_string(),
        json!({
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.seed,
            "inputs": hashes.0,
            "outputs": produced,
            "config": cfg,
        }),
    );
    let file = BufWriter::new(fs::File::create(&path)?);
    serde_json::to_writer_pretty(file, &doc)?;
    Ok(())
}
