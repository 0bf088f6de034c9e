//! Run configuration: a JSON file overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use modfill::eval::EvalConfig;
use modfill::model::TrainConfig;
use modfill::retrieval::RetrievalConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub rate: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { rate: 0.4 }
    }
}

/// Everything a run needs. Paths are echoed into manifests except `out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub interactions: Option<PathBuf>,
    /// `name=path`, in modality order.
    pub features: Vec<String>,
    pub mask: Option<PathBuf>,
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub min_degree: usize,
    pub masking: MaskConfig,
    pub retrieval: RetrievalConfig,
    pub model: TrainConfig,
    pub eval: EvalConfig,
    pub synthetic: bool,
    pub sample: Option<usize>,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            interactions: None,
            features: Vec::new(),
            mask: None,
            out: None,
            seed: 0,
            min_degree: 0,
            masking: MaskConfig::default(),
            retrieval: RetrievalConfig::default(),
            model: TrainConfig::default(),
            eval: EvalConfig::default(),
            synthetic: false,
            sample: None,
            threads: 1,
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON config file; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// User-item interactions, `user_id<TAB>item_id` per line.
    #[arg(long)]
    pub interactions: Option<PathBuf>,
    /// Feature matrix for one modality as `name=path`; repeat in modality order.
    #[arg(long = "features", value_name = "MODALITY=PATH")]
    pub features: Vec<String>,
    /// Mask CSV (defaults to `<out>/mask.csv`).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Run directory for outputs and upstream artifacts.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Missing rate for `mask`.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Anchors per query.
    #[arg(long)]
    pub k: Option<usize>,
    /// MAGE iteration cap.
    #[arg(long)]
    pub t: Option<usize>,
    /// Neighborhood radius of the relevance baseline.
    #[arg(long)]
    pub kn: Option<usize>,
    /// Take anchors from this modality index only.
    #[arg(long = "anchor-modality")]
    pub anchor_modality: Option<usize>,
    /// Drop users with fewer interactions than this before projecting.
    #[arg(long = "min-degree")]
    pub min_degree: Option<usize>,
    /// Worker threads; 1 keeps every stage sequential and bit-reproducible.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Use the built-in planted-cluster dataset instead of input files.
    #[arg(long)]
    pub synthetic: bool,
    /// Process a seeded subset of this many queries.
    #[arg(long)]
    pub sample: Option<usize>,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(p) = &self.interactions {
            cfg.interactions = Some(p.clone());
        }
        if !self.features.is_empty() {
            cfg.features = self.features.clone();
        }
        if let Some(p) = &self.mask {
            cfg.mask = Some(p.clone());
        }
        if let Some(p) = &self.out {
            cfg.out = Some(p.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.rate {
            cfg.masking.rate = r;
        }
        if let Some(k) = self.k {
            cfg.retrieval.k = k;
        }
        if let Some(t) = self.t {
            cfg.retrieval.t = t;
        }
        if let Some(kn) = self.kn {
            cfg.retrieval.kn = kn;
        }
        if let Some(m) = self.anchor_modality {
            cfg.retrieval.anchor_modality = Some(m);
        }
        if let Some(d) = self.min_degree {
            cfg.min_degree = d;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if self.synthetic {
            cfg.synthetic = true;
        }
        if let Some(s) = self.sample {
            cfg.sample = Some(s);
        }
        if cfg.threads == 0 {
            bail!("--threads must be at least 1");
        }
        // one master seed drives model and evaluation streams
        cfg.model.seed = cfg.seed;
        cfg.eval.seed = cfg.seed;
        cfg.eval.retrieval = cfg.retrieval;
        cfg.eval.mask_rate = cfg.masking.rate;
        cfg.eval.sample = cfg.sample;
        cfg.eval.train.seed = cfg.seed;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().context("--out <dir> is required")
    }

    /// Parsed `name=path` feature specs.
    pub fn feature_specs(&self) -> Result<Vec<(String, PathBuf)>> {
        self.features
            .iter()
            .map(|spec| {
                let (name, path) = spec
                    .split_once('=')
                    .with_context(|| format!("--features expects name=path, got {spec:?}"))?;
                if name.is_empty() || path.is_empty() {
                    bail!("--features expects name=path, got {spec:?}");
                }
                Ok((name.to_string(), PathBuf::from(path)))
            })
            .collect()
    }

    /// Model settings: the desk-scale synthetic config for `--synthetic`
    /// runs, the `model` section otherwise. Seeded from the master seed.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = if self.synthetic {
            self.eval.train.clone()
        } else {
            self.model.clone()
        };
        t.seed = self.seed;
        t
    }

    pub fn parallel(&self) -> bool {
        self.threads > 1
    }
}
