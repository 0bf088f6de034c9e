//! Turning a retrieved subgraph into model inputs.

use ndarray::{Array1, Array2};

use super::network::token_mlp;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::graph::ItemGraph;
use crate::modality::{ModalityStore, Observation};
use crate::retrieval::{retrieve, RetrievalConfig};
use crate::spectral::{laplacian_pe, LaplacianPE};

/// One encoder input: the query token first, then its retrieved context.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub query: usize,
    pub tokens: Vec<usize>,
    /// tokens x (sum of modality dims + pe_dim).
    pub inputs: Array2<f64>,
    /// Ground truth for slots hidden from the inputs.
    pub targets: Vec<(usize, Array1<f64>)>,
}

/// Rows of concatenated modality features (zeros where unobserved) followed
/// by the positional encoding.
pub fn token_inputs(
    store: &ModalityStore,
    obs: &(impl Observation + ?Sized),
    tokens: &[usize],
    pe: &LaplacianPE,
) -> Result<Array2<f64>> {
    if pe.vectors.nrows() != tokens.len() {
        return Err(Error::DimMismatch {
            left: pe.vectors.nrows(),
            right: tokens.len(),
        });
    }
    let feat: usize = store.dims().iter().sum();
    let mut out = Array2::zeros((tokens.len(), feat + pe.k));
    for (r, &v) in tokens.iter().enumerate() {
        let mut offset = 0;
        for m in 0..store.n_modalities() {
            let dim = store.dim(m);
            if obs.is_observed(v, m) {
                for (c, &x) in store.row(m, v).iter().enumerate() {
                    out[[r, offset + c]] = x as f64;
                }
            }
            offset += dim;
        }
        for c in 0..pe.k {
            out[[r, feat + c]] = pe.vectors[[r, c]];
        }
    }
    Ok(out)
}

/// Token embeddings `h^(0)` for `tokens`.
pub fn embed_tokens(
    store: &ModalityStore,
    obs: &(impl Observation + ?Sized),
    tokens: &[usize],
    pe: &LaplacianPE,
    params: &ModelParams,
) -> Result<Array2<f64>> {
    let inputs = token_inputs(store, obs, tokens, pe)?;
    if inputs.ncols() != params.token_mlp.w1.nrows() {
        return Err(Error::DimMismatch {
            left: inputs.ncols(),
            right: params.token_mlp.w1.nrows(),
        });
    }
    Ok(token_mlp(&inputs, params))
}

/// Retrieves context for `query` under `obs` and builds its input matrix.
pub fn prepare_sample(
    graph: &ItemGraph,
    store: &ModalityStore,
    obs: &(impl Observation + ?Sized),
    query: usize,
    retrieval: &RetrievalConfig,
    pe_dim: usize,
) -> Result<Sample> {
    let found = retrieve(graph, store, obs, query, retrieval)?;
    let tokens = found.tokens();
    let adj = graph.induced_adjacency(&tokens)?;
    let pe = laplacian_pe(&adj, pe_dim)?;
    let inputs = token_inputs(store, obs, &tokens, &pe)?;
    Ok(Sample {
        query,
        tokens,
        inputs,
        targets: Vec::new(),
    })
}
