//! Self-supervised training by re-masking observed slots.
//!
//! Every item with at least two observed modalities contributes one sample
//! per observed modality: that modality is hidden, context is retrieved from
//! what remains, and the hidden features are the reconstruction target.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{batch_gradients, BatchLoss};
use super::network::{forward, gumbel_noise, ForwardNoise};
use super::params::{ModelParams, ModelShape};
use super::sample::{prepare_sample, Sample};
use super::{CompletionModel, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::ItemGraph;
use crate::modality::{ModalityMask, ModalityStore, Observation};
use crate::retrieval::RetrievalConfig;
use crate::seed::{derive_indexed, stage_rng, Stage};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Precomputed training and validation samples.
#[derive(Debug, Clone)]
pub struct TrainingData {
    samples: Vec<Sample>,
    train: Vec<usize>,
    val: Vec<usize>,
    modality_dims: Vec<usize>,
}

impl TrainingData {
    /// Retrieves every (item, hidden modality) sample once. The validation
    /// split is by item so both samples of an item land on the same side.
    pub fn build(
        graph: &ItemGraph,
        store: &ModalityStore,
        mask: &ModalityMask,
        retrieval: &RetrievalConfig,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if mask.n_items() != store.n_items() || mask.n_modalities() != store.n_modalities() {
            return Err(Error::DimMismatch {
                left: mask.n_items() * mask.n_modalities(),
                right: store.n_items() * store.n_modalities(),
            });
        }
        let pool: Vec<usize> = (0..store.n_items())
            .filter(|&i| mask.observed_modalities(i).len() >= 2)
            .collect();
        if pool.is_empty() {
            return Err(Error::EmptyTrainingPool);
        }

        let mut items = pool.clone();
        items.shuffle(&mut stage_rng(cfg.seed, Stage::Split));
        let n_val = if pool.len() >= 2 {
            ((cfg.val_fraction * pool.len() as f64).round() as usize).min(pool.len() - 1)
        } else {
            0
        };
        let mut is_val = vec![false; store.n_items()];
        for &i in &items[..n_val] {
            is_val[i] = true;
        }

        let mut samples = Vec::new();
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for &i in &pool {
            for h in mask.observed_modalities(i) {
                let hidden = mask.hiding(i, h);
                let mut sample = prepare_sample(graph, store, &hidden, i, retrieval, cfg.pe_dim)?;
                let target = Array1::from_iter(store.row(h, i).iter().map(|&x| x as f64));
                sample.targets.push((h, target));
                if is_val[i] {
                    val.push(samples.len());
                } else {
                    train.push(samples.len());
                }
                samples.push(sample);
            }
        }
        Ok(Self {
            samples,
            train,
            val,
            modality_dims: store.dims(),
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val
    }

    pub fn modality_dims(&self) -> &[usize] {
        &self.modality_dims
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean squared error per training sample.
    pub recon: f64,
    pub usage: f64,
    pub load: f64,
    pub total: f64,
    /// Mean squared error per validation sample under deterministic routing.
    pub val_recon: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (or the last epoch without a validation split).
    pub model: CompletionModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    /// The training log as CSV.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,recon,usage,load,total,val_recon\n");
        for e in &self.log {
            let val = e.val_recon.map_or(String::new(), |v| v.to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.recon, e.usage, e.load, e.total, val
            ));
        }
        out
    }
}

struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, l2: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g + l2 * *p;
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            });
        }
    }
}

/// Mean per-sample squared error with deterministic routing and no dropout.
pub fn evaluate_recon(params: &ModelParams, samples: &[&Sample], cfg: &TrainConfig) -> Result<f64> {
    let noise = ForwardNoise::deterministic(cfg.codebook);
    let mut total = 0.0;
    for s in samples {
        let mods: Vec<usize> = s.targets.iter().map(|t| t.0).collect();
        let pass = forward(&s.inputs, &mods, params, cfg.heads, cfg.routing(), &noise)?;
        for ((_, out), (_, target)) in pass.outputs.iter().zip(&s.targets) {
            total += (out - target).mapv(|e| e * e).sum();
        }
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Trains from a fresh initialization. With `parallel` set, per-sample
/// passes run on the rayon pool; noise is still drawn sequentially and
/// gradients are reduced in a fixed order.
pub fn train(data: &TrainingData, cfg: &TrainConfig, parallel: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyTrainingPool);
    }
    let shape = ModelShape::new(cfg, &data.modality_dims);
    let mut params = ModelParams::init(&shape, &mut stage_rng(cfg.seed, Stage::Init));
    let mut adam = Adam::new(&params);
    let mut gumbel = stage_rng(cfg.seed, Stage::Gumbel);
    let mut dropout_rng = stage_rng(cfg.seed, Stage::Dropout);
    let val: Vec<&Sample> = data.val.iter().map(|&i| &data.samples[i]).collect();

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut order = data.train.clone();

    for epoch in 1..=cfg.epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(derive_indexed(cfg.seed, Stage::Shuffle, epoch as u64));
        order.shuffle(&mut shuffle);
        let mut sums = BatchLoss {
            recon: 0.0,
            usage: 0.0,
            load: 0.0,
            total: 0.0,
            slots: 0,
        };
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let noises: Vec<ForwardNoise> = batch
                .iter()
                .map(|_| ForwardNoise {
                    epsilon: gumbel_noise(&mut gumbel, cfg.codebook),
                    dropout: cfg.dropout,
                    dropout_seed: dropout_rng.random(),
                    fixed_top: None,
                })
                .collect();
            let (loss, grads) = batch_gradients(&params, &batch, &noises, cfg, parallel)?;
            adam.step(&mut params, &grads, cfg.learning_rate, cfg.l2);
            sums.recon += loss.recon;
            sums.usage += loss.usage;
            sums.load += loss.load;
            sums.slots += loss.slots;
            batches += 1;
        }
        let recon = sums.recon / order.len() as f64;
        let usage = sums.usage / batches as f64;
        let load = sums.load / batches as f64;
        let val_recon = if val.is_empty() {
            None
        } else {
            Some(evaluate_recon(&params, &val, cfg)?)
        };
        log.push(EpochLog {
            epoch,
            recon,
            usage,
            load,
            total: recon + cfg.lambda_usage * usage + cfg.lambda_load * load,
            val_recon,
        });
        if !params.all_finite() {
            return Err(Error::InvalidValue(format!("non-finite parameters after epoch {epoch}")));
        }

        let score = val_recon.unwrap_or(recon);
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, epoch, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if val_recon.is_some() && since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, final_params) = match (val.is_empty(), best) {
        (false, Some((_, e, p))) => (e, p),
        _ => (log.len(), params),
    };
    Ok(TrainOutcome {
        model: CompletionModel {
            config: cfg.clone(),
            params: final_params,
        },
        log,
        best_epoch,
        stopped_early,
    })
}
