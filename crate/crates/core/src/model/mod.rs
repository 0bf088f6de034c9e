//! Neural completion model: token embedding, transformer encoder, attention
//! pooling, sparse codebook routing, per-modality decoders, losses and training.

mod checkpoint;
mod layers;
pub mod loss;
pub mod network;
pub mod params;
pub mod sample;
pub mod train;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use loss::{batch_gradients, batch_loss, loss_load, loss_usage, BatchLoss};
pub use network::{
    attention_pool, backward, decode, forward, route_codebook, token_mlp, transformer_forward, ForwardNoise,
    ForwardPass, RoutingParams, RoutingState,
};
pub use params::{ModelParams, ModelShape};
pub use sample::{embed_tokens, prepare_sample, token_inputs, Sample};
pub use train::{evaluate_recon, train, EpochLog, TrainOutcome, TrainingData};

use crate::error::{Error, Result};
use crate::graph::ItemGraph;
use crate::modality::{ModalityMask, ModalityStore, Observation};
use crate::retrieval::RetrievalConfig;

/// Model and optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub d: usize,
    /// Laplacian encoding width.
    pub pe_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Codebook size C.
    pub codebook: usize,
    pub top_p: usize,
    pub tau: f64,
    /// Multiplier on the Gumbel draw during training.
    pub noise_scale: f64,
    pub lambda_usage: f64,
    pub lambda_load: f64,
    pub learning_rate: f64,
    pub l2: f64,
    pub batch: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 128,
            pe_dim: 20,
            layers: 2,
            heads: 4,
            codebook: 50,
            top_p: 4,
            tau: 0.5,
            noise_scale: 1.0,
            lambda_usage: 1.0,
            lambda_load: 1.0,
            learning_rate: 1e-3,
            l2: 0.0,
            batch: 512,
            dropout: 0.5,
            epochs: 100,
            patience: 10,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail("d must be a positive multiple of heads");
        }
        if self.codebook == 0 || self.top_p == 0 || self.top_p > self.codebook {
            return fail("top_p must be in [1, codebook]");
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return fail("tau must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        if self.batch == 0 {
            return fail("batch must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail("val_fraction must be in [0, 1)");
        }
        Ok(())
    }

    pub fn routing(&self) -> RoutingParams {
        RoutingParams {
            tau: self.tau,
            top_p: self.top_p,
            noise_scale: self.noise_scale,
        }
    }
}

/// Trained parameters together with the configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionModel {
    pub config: TrainConfig,
    pub params: ModelParams,
}

/// Reconstructed vectors for every missing modality of one item.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub item: usize,
    pub vectors: Vec<(usize, Array1<f64>)>,
}

/// Retrieval, encoding and deterministic decoding for each missing modality of `item`.
pub fn complete(
    item: usize,
    mask: &ModalityMask,
    store: &ModalityStore,
    graph: &ItemGraph,
    model: &CompletionModel,
    retrieval: &RetrievalConfig,
) -> Result<CompletionResult> {
    complete_with(item, mask, store, graph, model, retrieval)
}

/// [`complete`] over any observation view.
pub fn complete_with(
    item: usize,
    obs: &(impl Observation + ?Sized),
    store: &ModalityStore,
    graph: &ItemGraph,
    model: &CompletionModel,
    retrieval: &RetrievalConfig,
) -> Result<CompletionResult> {
    if item >= store.n_items() {
        return Err(Error::NodeOutOfRange {
            node: item,
            n: store.n_items(),
        });
    }
    let missing: Vec<usize> = (0..store.n_modalities()).filter(|&m| !obs.is_observed(item, m)).collect();
    if missing.len() == store.n_modalities() {
        return Err(Error::NoObservedModality(item));
    }
    if missing.is_empty() {
        return Err(Error::NothingToComplete(item));
    }
    let sample = prepare_sample(graph, store, obs, item, retrieval, model.config.pe_dim)?;
    let noise = ForwardNoise::deterministic(model.config.codebook);
    let pass = forward(
        &sample.inputs,
        &missing,
        &model.params,
        model.config.heads,
        model.config.routing(),
        &noise,
    )?;
    Ok(CompletionResult {
        item,
        vectors: pass.outputs,
    })
}
