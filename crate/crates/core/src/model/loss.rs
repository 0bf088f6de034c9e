//! Reconstruction and codebook regularizers, and batch gradients.

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{backward, forward, ForwardNoise, ForwardPass};
use super::params::ModelParams;
use super::sample::Sample;
use super::TrainConfig;
use crate::error::{Error, Result};

/// KL divergence of the mean routing distribution from uniform.
pub fn loss_usage(g_batch: &[Vec<f64>]) -> f64 {
    let mean = mean_rows(g_batch);
    let c = mean.len() as f64;
    mean.iter()
        .filter(|&&g| g > 0.0)
        .map(|&g| g * (g * c).ln())
        .sum()
}

/// `C * sum_e load_e^2` over binary top-P rows; every row must select `expected` entries.
pub fn loss_load(hard_batch: &[Vec<f64>], expected: usize) -> Result<f64> {
    for (row, r) in hard_batch.iter().enumerate() {
        let found = r.iter().filter(|&&v| v != 0.0).count();
        if found != expected || r.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::BadRowWeight { row, found, expected });
        }
    }
    let load = mean_rows(hard_batch);
    Ok(load.len() as f64 * load.iter().map(|l| l * l).sum::<f64>())
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let c = rows.first().map_or(0, |r| r.len());
    let mut mean = vec![0.0; c];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    let b = rows.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= b);
    mean
}

/// Gradient of [`loss_usage`] w.r.t. one row of the batch.
fn usage_row_gradient(g_batch: &[Vec<f64>]) -> Vec<f64> {
    let mean = mean_rows(g_batch);
    let c = mean.len() as f64;
    let b = g_batch.len() as f64;
    mean.iter()
        .map(|&g| ((g.max(f64::MIN_POSITIVE) * c).ln() + 1.0) / b)
        .collect()
}

/// Objective terms for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    /// Sum of squared errors over every hidden slot in the batch.
    pub recon: f64,
    pub usage: f64,
    pub load: f64,
    pub total: f64,
    pub slots: usize,
}

fn forward_all(
    params: &ModelParams,
    samples: &[&Sample],
    noises: &[ForwardNoise],
    cfg: &TrainConfig,
    parallel: bool,
) -> Result<Vec<ForwardPass>> {
    let run = |(s, n): (&&Sample, &ForwardNoise)| {
        let mods: Vec<usize> = s.targets.iter().map(|t| t.0).collect();
        forward(&s.inputs, &mods, params, cfg.heads, cfg.routing(), n)
    };
    if parallel {
        samples.par_iter().zip(noises.par_iter()).map(run).collect()
    } else {
        samples.iter().zip(noises.iter()).map(run).collect()
    }
}

fn assemble(passes: &[ForwardPass], samples: &[&Sample], cfg: &TrainConfig) -> Result<BatchLoss> {
    let mut recon = 0.0;
    let mut slots = 0;
    for (p, s) in passes.iter().zip(samples) {
        for ((_, out), (_, target)) in p.outputs.iter().zip(&s.targets) {
            recon += (out - target).mapv(|e| e * e).sum();
            slots += 1;
        }
    }
    if slots == 0 {
        return Err(Error::NoReconstructionTarget);
    }
    let soft: Vec<Vec<f64>> = passes.iter().map(|p| p.routing.g.clone()).collect();
    let hard: Vec<Vec<f64>> = passes.iter().map(|p| p.routing.hard_assignment()).collect();
    let usage = loss_usage(&soft);
    let load = loss_load(&hard, cfg.top_p.min(cfg.codebook))?;
    Ok(BatchLoss {
        recon,
        usage,
        load,
        total: recon + cfg.lambda_usage * usage + cfg.lambda_load * load,
        slots,
    })
}

/// Objective of a batch without gradients.
pub fn batch_loss(params: &ModelParams, samples: &[&Sample], noises: &[ForwardNoise], cfg: &TrainConfig) -> Result<BatchLoss> {
    let passes = forward_all(params, samples, noises, cfg, false)?;
    assemble(&passes, samples, cfg)
}

/// Objective and exact gradients of a batch. Top-P selections and Gumbel
/// draws are constants of the pass; the load term is piecewise constant and
/// contributes no gradient.
pub fn batch_gradients(
    params: &ModelParams,
    samples: &[&Sample],
    noises: &[ForwardNoise],
    cfg: &TrainConfig,
    parallel: bool,
) -> Result<(BatchLoss, ModelParams)> {
    let passes = forward_all(params, samples, noises, cfg, parallel)?;
    let loss = assemble(&passes, samples, cfg)?;
    let soft: Vec<Vec<f64>> = passes.iter().map(|p| p.routing.g.clone()).collect();
    let d_g: Vec<f64> = usage_row_gradient(&soft)
        .into_iter()
        .map(|v| v * cfg.lambda_usage)
        .collect();

    let accumulate = |range: std::ops::Range<usize>| {
        let mut grads = params.zeros_like();
        for i in range {
            let (p, s) = (&passes[i], samples[i]);
            let d_out: Vec<Array1<f64>> = p
                .outputs
                .iter()
                .zip(&s.targets)
                .map(|((_, out), (_, target))| (out - target) * 2.0)
                .collect();
            backward(params, &s.inputs, p, &d_out, &d_g, cfg.heads, cfg.routing(), &mut grads);
        }
        grads
    };

    let n = passes.len();
    let grads = if parallel && n > 1 {
        let chunk = n.div_ceil(rayon::current_num_threads().max(1));
        let ranges: Vec<_> = (0..n).step_by(chunk).map(|a| a..(a + chunk).min(n)).collect();
        let partials: Vec<ModelParams> = ranges.into_par_iter().map(accumulate).collect();
        let mut total = params.zeros_like();
        for part in &partials {
            total.zip_mut(part, |a, b| *a += b);
        }
        total
    } else {
        accumulate(0..n)
    };
    Ok((loss, grads))
}
