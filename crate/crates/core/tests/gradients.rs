//! Analytic gradients against central finite differences.

use modfill::model::{batch_gradients, batch_loss, forward, ForwardNoise, ModelParams, ModelShape, Sample, TrainConfig};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> TrainConfig {
    TrainConfig {
        d: 8,
        pe_dim: 3,
        layers: 2,
        heads: 2,
        codebook: 6,
        top_p: 2,
        tau: 0.7,
        lambda_usage: 0.8,
        lambda_load: 1.3,
        dropout: 0.0,
        ..TrainConfig::default()
    }
}

fn random_samples(rng: &mut ChaCha8Rng, dims: &[usize], pe_dim: usize) -> Vec<Sample> {
    let width = dims.iter().sum::<usize>() + pe_dim;
    (0..3)
        .map(|s| {
            let tokens = 2 + s * 2; // 2, 4, 6 tokens
            let inputs = Array2::from_shape_simple_fn((tokens, width), || rng.random_range(-1.0..1.0));
            let m = s % dims.len();
            let target = Array1::from_shape_simple_fn(dims[m], || rng.random_range(-1.0..1.0));
            let mut targets = vec![(m, target)];
            if s == 2 {
                let other = Array1::from_shape_simple_fn(dims[1 - m], || rng.random_range(-1.0..1.0));
                targets.push((1 - m, other));
            }
            Sample {
                query: s,
                tokens: (0..tokens).collect(),
                inputs,
                targets,
            }
        })
        .collect()
}

/// Frozen Gumbel draws with the top-P selection pinned to what the
/// unperturbed parameters choose.
fn frozen_noise(params: &ModelParams, samples: &[Sample], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<ForwardNoise> {
    samples
        .iter()
        .map(|s| {
            let epsilon: Vec<f64> = (0..cfg.codebook)
                .map(|_| {
                    let u: f64 = rng.random_range(1e-12..1.0);
                    -(-u.ln()).ln()
                })
                .collect();
            let mut noise = ForwardNoise {
                epsilon,
                dropout: 0.0,
                dropout_seed: 0,
                fixed_top: None,
            };
            let mods: Vec<usize> = s.targets.iter().map(|t| t.0).collect();
            let pass = forward(&s.inputs, &mods, params, cfg.heads, cfg.routing(), &noise).unwrap();
            noise.fixed_top = Some(pass.routing.top.clone());
            noise
        })
        .collect()
}

#[test]
fn every_parameter_matches_central_differences() {
    let cfg = small_config();
    let dims = [4, 3];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let params = ModelParams::init(&ModelShape::new(&cfg, &dims), &mut rng);
    let samples = random_samples(&mut rng, &dims, cfg.pe_dim);
    let refs: Vec<&Sample> = samples.iter().collect();
    let noises = frozen_noise(&params, &samples, &cfg, &mut rng);

    let (_, grads) = batch_gradients(&params, &refs, &noises, &cfg, false).unwrap();
    let h = 1e-5;
    let mut probe = params.clone();
    let mut checked = 0;
    let mut worst = 0.0f64;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Array2<f64>> = grads.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    for (t, name) in names.iter().enumerate() {
        let len = analytic[t].len();
        for k in 0..len {
            let (r, c) = (k / analytic[t].ncols(), k % analytic[t].ncols());
            let orig = params.tensors()[t].1[[r, c]];
            probe.tensors_mut()[t].1[[r, c]] = orig + h;
            let plus = batch_loss(&probe, &refs, &noises, &cfg).unwrap().total;
            probe.tensors_mut()[t].1[[r, c]] = orig - h;
            let minus = batch_loss(&probe, &refs, &noises, &cfg).unwrap().total;
            probe.tensors_mut()[t].1[[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[t][[r, c]];
            let err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            assert!(
                err <= 1e-8f64.max(1e-4 * scale),
                "{name}[{r},{c}]: analytic {a:e} vs numeric {numeric:e}"
            );
            if scale > 1e-8 {
                worst = worst.max(err / scale);
            }
            checked += 1;
        }
    }
    assert_eq!(checked, params.num_scalars());
    assert!(worst < 1e-4);
}

#[test]
fn perfect_reconstruction_has_zero_recon_gradient() {
    let cfg = TrainConfig {
        lambda_usage: 0.0,
        lambda_load: 0.0,
        ..small_config()
    };
    let dims = [4, 3];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = ModelParams::init(&ModelShape::new(&cfg, &dims), &mut rng);
    let mut samples = random_samples(&mut rng, &dims, cfg.pe_dim);
    let noises: Vec<ForwardNoise> = samples.iter().map(|_| ForwardNoise::deterministic(cfg.codebook)).collect();
    for (s, n) in samples.iter_mut().zip(&noises) {
        let mods: Vec<usize> = s.targets.iter().map(|t| t.0).collect();
        let pass = forward(&s.inputs, &mods, &params, cfg.heads, cfg.routing(), n).unwrap();
        s.targets = pass.outputs;
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let (loss, grads) = batch_gradients(&params, &refs, &noises, &cfg, false).unwrap();
    assert_eq!(loss.recon, 0.0);
    assert!(grads.tensors().iter().all(|(_, t)| t.iter().all(|&v| v == 0.0)));
}

#[test]
fn parallel_gradients_match_sequential() {
    let cfg = small_config();
    let dims = [4, 3];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let params = ModelParams::init(&ModelShape::new(&cfg, &dims), &mut rng);
    let samples = random_samples(&mut rng, &dims, cfg.pe_dim);
    let refs: Vec<&Sample> = samples.iter().collect();
    let noises = frozen_noise(&params, &samples, &cfg, &mut rng);
    let (a, ga) = batch_gradients(&params, &refs, &noises, &cfg, false).unwrap();
    let (b, gb) = batch_gradients(&params, &refs, &noises, &cfg, true).unwrap();
    assert!((a.total - b.total).abs() < 1e-12);
    for ((_, x), (_, y)) in ga.tensors().into_iter().zip(gb.tensors()) {
        assert!(x.iter().zip(y.iter()).all(|(p, q)| (p - q).abs() <= 1e-10 * (1.0 + p.abs())));
    }
}
