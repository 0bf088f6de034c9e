//! Forward and backward passes of the completion network.
//!
//! Token inputs go through a two-layer MLP, then `L` pre-norm transformer
//! blocks with full self-attention, single-head attention pooling on the query
//! row, Gumbel-softmax routing over the codebook, and a per-modality decoder.

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward, linear_backward_params,
    softmax, softmax_backward, softmax_rows, softmax_rows_backward, LayerNormCache,
};
use super::params::{BlockParams, MlpParams, ModelParams};
use crate::error::{Error, Result};

/// Routing of one pooled query embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState {
    /// `z W`, before noise and temperature.
    pub logits: Vec<f64>,
    /// Softmax weights on the simplex.
    pub g: Vec<f64>,
    /// Selected entries by descending weight, ties by lower index.
    pub top: Vec<usize>,
    /// `sum over top of g_e * c_e`, without renormalizing the selected weights.
    pub q_mix: Vec<f64>,
    /// Gumbel draw used; zeros at inference.
    pub epsilon: Vec<f64>,
}

impl RoutingState {
    /// Binary top-P indicator row.
    pub fn hard_assignment(&self) -> Vec<f64> {
        let mut row = vec![0.0; self.g.len()];
        for &e in &self.top {
            row[e] = 1.0;
        }
        row
    }
}

/// Routing knobs that are not learnable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingParams {
    pub tau: f64,
    pub top_p: usize,
    pub noise_scale: f64,
}

/// Standard Gumbel draws `-ln(-ln u)`.
pub fn gumbel_noise(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // open interval keeps both logs finite
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

fn top_indices(g: &[f64], p: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..g.len()).collect();
    idx.sort_by(|&a, &b| g[b].total_cmp(&g[a]).then(a.cmp(&b)));
    idx.truncate(p.min(g.len()));
    idx
}

/// Routes `z` over the codebook. `epsilon` is the Gumbel draw (all zeros for
/// deterministic routing); `fixed_top` pins the selected entries.
pub fn route_codebook(
    z: &[f64],
    params: &ModelParams,
    knobs: RoutingParams,
    epsilon: &[f64],
    fixed_top: Option<&[usize]>,
) -> RoutingState {
    let c = params.codebook.nrows();
    let logits = Array1::from(z.to_vec()).dot(&params.router_w).to_vec();
    let scaled: Vec<f64> = logits
        .iter()
        .zip(epsilon)
        .map(|(l, e)| (l + knobs.noise_scale * e) / knobs.tau)
        .collect();
    let g = softmax(&scaled);
    let top = match fixed_top {
        Some(t) => t.to_vec(),
        None => top_indices(&g, knobs.top_p.min(c)),
    };
    let mut q_mix = vec![0.0; params.codebook.ncols()];
    for &e in &top {
        for (q, cv) in q_mix.iter_mut().zip(params.codebook.row(e)) {
            *q += g[e] * cv;
        }
    }
    RoutingState {
        logits,
        g,
        top,
        q_mix,
        epsilon: epsilon.to_vec(),
    }
}

#[derive(Debug, Clone)]
struct MlpCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

fn mlp_forward(p: &MlpParams, x: Array2<f64>) -> (Array2<f64>, MlpCache) {
    let pre = linear(&x.view(), &p.w1, &p.b1);
    let hidden = pre.mapv(gelu);
    let out = linear(&hidden.view(), &p.w2, &p.b2);
    (out, MlpCache { input: x, pre, hidden })
}

fn mlp_backward(p: &MlpParams, cache: &MlpCache, dy: &Array2<f64>, g: &mut MlpParams, need_dx: bool) -> Option<Array2<f64>> {
    let dh = linear_backward(&cache.hidden.view(), &p.w2, dy, &mut g.w2, &mut g.b2);
    let dpre = gelu_backward(&cache.pre, &dh);
    if need_dx {
        Some(linear_backward(&cache.input.view(), &p.w1, &dpre, &mut g.w1, &mut g.b1))
    } else {
        linear_backward_params(&cache.input.view(), &dpre, &mut g.w1, &mut g.b1);
        None
    }
}

/// Inverted-dropout mask scaled by `1 / (1 - rate)`.
fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rate: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn((rows, cols), || if rng.random::<f64>() < rate { 0.0 } else { keep })
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LayerNormCache,
    y1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn_masks: Vec<Option<Array2<f64>>>,
    o: Array2<f64>,
    ln2: LayerNormCache,
    y2: Array2<f64>,
    f1: Array2<f64>,
    act: Array2<f64>,
    ffn_mask: Option<Array2<f64>>,
}

fn block_forward(
    p: &BlockParams,
    x: &Array2<f64>,
    heads: usize,
    dropout: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Array2<f64>, BlockCache) {
    let (n, d) = x.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (y1, ln1) = layer_norm(x, &p.ln1_g, &p.ln1_b);
    let q = linear(&y1.view(), &p.wq, &p.bq);
    let k = linear(&y1.view(), &p.wk, &p.bk);
    let v = linear(&y1.view(), &p.wv, &p.bv);
    let mut o = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(heads);
    let mut attn_masks = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let pr = softmax_rows(&scores);
        let mask = match rng.as_deref_mut() {
            Some(r) if dropout > 0.0 => Some(dropout_mask(r, n, n, dropout)),
            _ => None,
        };
        let used = match &mask {
            Some(m) => &pr * m,
            None => pr.clone(),
        };
        o.slice_mut(cols).assign(&used.dot(&v.slice(cols)));
        probs.push(pr);
        attn_masks.push(mask);
    }
    let x_mid = x + &linear(&o.view(), &p.wo, &p.bo);

    let (y2, ln2) = layer_norm(&x_mid, &p.ln2_g, &p.ln2_b);
    let f1 = linear(&y2.view(), &p.ff_w1, &p.ff_b1);
    let act = f1.mapv(gelu);
    let mut f2 = linear(&act.view(), &p.ff_w2, &p.ff_b2);
    let ffn_mask = match rng {
        Some(r) if dropout > 0.0 => Some(dropout_mask(r, n, d, dropout)),
        _ => None,
    };
    if let Some(m) = &ffn_mask {
        f2 *= m;
    }
    let out = &x_mid + &f2;
    let cache = BlockCache {
        ln1,
        y1,
        q,
        k,
        v,
        probs,
        attn_masks,
        o,
        ln2,
        y2,
        f1,
        act,
        ffn_mask,
    };
    (out, cache)
}

fn block_backward(p: &BlockParams, c: &BlockCache, dy: &Array2<f64>, heads: usize, g: &mut BlockParams) -> Array2<f64> {
    let (n, d) = dy.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // feed-forward branch
    let mut df2 = dy.clone();
    if let Some(m) = &c.ffn_mask {
        df2 *= m;
    }
    let dact = linear_backward(&c.act.view(), &p.ff_w2, &df2, &mut g.ff_w2, &mut g.ff_b2);
    let df1 = gelu_backward(&c.f1, &dact);
    let dy2 = linear_backward(&c.y2.view(), &p.ff_w1, &df1, &mut g.ff_w1, &mut g.ff_b1);
    let dx_mid = dy + &layer_norm_backward(&c.ln2, &p.ln2_g, &dy2, &mut g.ln2_g, &mut g.ln2_b);

    // attention branch
    let do_ = linear_backward(&c.o.view(), &p.wo, &dx_mid, &mut g.wo, &mut g.bo);
    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let used = match &c.attn_masks[h] {
            Some(m) => &c.probs[h] * m,
            None => c.probs[h].clone(),
        };
        let do_h = do_.slice(cols);
        dv.slice_mut(cols).assign(&used.t().dot(&do_h));
        let mut dp = do_h.dot(&c.v.slice(cols).t());
        if let Some(m) = &c.attn_masks[h] {
            dp *= m;
        }
        let ds = softmax_rows_backward(&c.probs[h], &dp) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    let mut dy1 = linear_backward(&c.y1.view(), &p.wq, &dq, &mut g.wq, &mut g.bq);
    dy1 += &linear_backward(&c.y1.view(), &p.wk, &dk, &mut g.wk, &mut g.bk);
    dy1 += &linear_backward(&c.y1.view(), &p.wv, &dv, &mut g.wv, &mut g.bv);
    dx_mid.clone() + layer_norm_backward(&c.ln1, &p.ln1_g, &dy1, &mut g.ln1_g, &mut g.ln1_b)
}

/// Stacked transformer blocks without dropout.
pub fn transformer_forward(tokens: &Array2<f64>, params: &ModelParams, heads: usize) -> Array2<f64> {
    let mut h = tokens.clone();
    for b in &params.blocks {
        h = block_forward(b, &h, heads, 0.0, None).0;
    }
    h
}

/// Attention pooling onto `query_row`. Returns the pooled vector and the weights.
pub fn attention_pool(h: &Array2<f64>, query_row: usize, params: &ModelParams) -> (Array1<f64>, Vec<f64>) {
    let (z, cache) = pool_forward(h, query_row, params);
    (z.row(0).to_owned(), cache.alpha)
}

#[derive(Debug, Clone)]
struct PoolCache {
    h: Array2<f64>,
    query_row: usize,
    qv: Array2<f64>,
    kp: Array2<f64>,
    alpha: Vec<f64>,
}

fn pool_forward(h: &Array2<f64>, query_row: usize, params: &ModelParams) -> (Array2<f64>, PoolCache) {
    let dk = params.pool_wq.ncols() as f64;
    let hq = h.slice(s![query_row..query_row + 1, ..]);
    let qv = linear(&hq, &params.pool_wq, &params.pool_bq);
    let kp = linear(&h.view(), &params.pool_wk, &params.pool_bk);
    let logits: Vec<f64> = kp.dot(&qv.row(0)).iter().map(|v| v / dk.sqrt()).collect();
    let alpha = softmax(&logits);
    let z = Array1::from(alpha.clone()).dot(h).insert_axis(Axis(0));
    let cache = PoolCache {
        h: h.clone(),
        query_row,
        qv,
        kp,
        alpha,
    };
    (z, cache)
}

fn pool_backward(params: &ModelParams, c: &PoolCache, dz: &Array2<f64>, g: &mut ModelParams) -> Array2<f64> {
    let dk = params.pool_wq.ncols() as f64;
    let n = c.h.nrows();
    let alpha = Array1::from(c.alpha.clone());
    // z = alpha^T H
    let mut dh = alpha.clone().insert_axis(Axis(1)).dot(dz);
    let dalpha: Vec<f64> = c.h.dot(&dz.row(0)).to_vec();
    let dlogits = Array1::from(softmax_backward(&c.alpha, &dalpha)) / dk.sqrt();
    // logits_j = kp_j . qv
    let dkp = dlogits.clone().insert_axis(Axis(1)).dot(&c.qv);
    let dqv = dlogits.insert_axis(Axis(0)).dot(&c.kp);
    dh += &linear_backward(&c.h.view(), &params.pool_wk, &dkp, &mut g.pool_wk, &mut g.pool_bk);
    let hq = c.h.slice(s![c.query_row..c.query_row + 1, ..]);
    let dhq = linear_backward(&hq, &params.pool_wq, &dqv, &mut g.pool_wq, &mut g.pool_bq);
    let mut row = dh.row_mut(c.query_row);
    row += &dhq.row(0);
    debug_assert_eq!(dh.nrows(), n);
    dh
}

/// Decoder for modality `m`.
pub fn decode(q_mix: &[f64], m: usize, params: &ModelParams) -> Result<Array1<f64>> {
    let dec = params.decoders.get(m).ok_or(Error::UnknownModality(m))?;
    let x = Array1::from(q_mix.to_vec()).insert_axis(Axis(0));
    Ok(mlp_forward(dec, x).0.row(0).to_owned())
}

/// Token MLP over prepared inputs.
pub fn token_mlp(inputs: &Array2<f64>, params: &ModelParams) -> Array2<f64> {
    mlp_forward(&params.token_mlp, inputs.clone()).0
}

/// Per-sample stochastic choices.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardNoise {
    /// Gumbel draw, length C (zeros for deterministic routing).
    pub epsilon: Vec<f64>,
    pub dropout: f64,
    pub dropout_seed: u64,
    pub fixed_top: Option<Vec<usize>>,
}

impl ForwardNoise {
    pub fn deterministic(codebook: usize) -> Self {
        Self {
            epsilon: vec![0.0; codebook],
            dropout: 0.0,
            dropout_seed: 0,
            fixed_top: None,
        }
    }
}

/// Everything the backward pass needs for one sample.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    token: MlpCache,
    blocks: Vec<BlockCache>,
    pool: PoolCache,
    pub z: Array1<f64>,
    pub routing: RoutingState,
    decoders: Vec<(usize, MlpCache)>,
    /// Reconstructions, one per requested modality.
    pub outputs: Vec<(usize, Array1<f64>)>,
}

/// Full forward pass; the query token is row 0 of `inputs`.
pub fn forward(
    inputs: &Array2<f64>,
    modalities: &[usize],
    params: &ModelParams,
    heads: usize,
    knobs: RoutingParams,
    noise: &ForwardNoise,
) -> Result<ForwardPass> {
    if inputs.ncols() != params.token_mlp.w1.nrows() {
        return Err(Error::DimMismatch {
            left: inputs.ncols(),
            right: params.token_mlp.w1.nrows(),
        });
    }
    // the token MLP input stays with the caller; backward receives it again
    let tp = &params.token_mlp;
    let pre = linear(&inputs.view(), &tp.w1, &tp.b1);
    let hidden = pre.mapv(gelu);
    let mut h = linear(&hidden.view(), &tp.w2, &tp.b2);
    let token = MlpCache {
        input: Array2::zeros((0, 0)),
        pre,
        hidden,
    };
    let mut rng = (noise.dropout > 0.0).then(|| ChaCha8Rng::seed_from_u64(noise.dropout_seed));
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (out, cache) = block_forward(b, &h, heads, noise.dropout, rng.as_mut());
        h = out;
        blocks.push(cache);
    }
    let (z, pool) = pool_forward(&h, 0, params);
    let z = z.row(0).to_owned();
    let routing = route_codebook(
        z.as_slice().expect("contiguous"),
        params,
        knobs,
        &noise.epsilon,
        noise.fixed_top.as_deref(),
    );
    let q = Array1::from(routing.q_mix.clone()).insert_axis(Axis(0));
    let mut decoders = Vec::new();
    let mut outputs = Vec::new();
    for &m in modalities {
        let dec = params.decoders.get(m).ok_or(Error::UnknownModality(m))?;
        let (out, cache) = mlp_forward(dec, q.clone());
        outputs.push((m, out.row(0).to_owned()));
        decoders.push((m, cache));
    }
    Ok(ForwardPass {
        token,
        blocks,
        pool,
        z,
        routing,
        decoders,
        outputs,
    })
}

/// Accumulates parameter gradients into `grads` given the gradient of the
/// loss w.r.t. each output and w.r.t. the routing weights `g` (the latter
/// carries batch-level regularizer terms). `inputs` must be the matrix the
/// pass was computed from.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    params: &ModelParams,
    inputs: &Array2<f64>,
    pass: &ForwardPass,
    d_outputs: &[Array1<f64>],
    d_g_extra: &[f64],
    heads: usize,
    knobs: RoutingParams,
    grads: &mut ModelParams,
) {
    let d = params.codebook.ncols();
    let mut dq = Array2::<f64>::zeros((1, d));
    for ((m, cache), dout) in pass.decoders.iter().zip(d_outputs) {
        let dy = dout.clone().insert_axis(Axis(0));
        let dx = mlp_backward(&params.decoders[*m], cache, &dy, &mut grads.decoders[*m], true)
            .expect("input gradient requested");
        dq += &dx;
    }

    // q = sum over top of g_e c_e
    let r = &pass.routing;
    let mut dg = d_g_extra.to_vec();
    for &e in &r.top {
        let ce = params.codebook.row(e);
        dg[e] += ce.dot(&dq.row(0));
        let mut gc = grads.codebook.row_mut(e);
        gc.scaled_add(r.g[e], &dq.row(0));
    }
    let dlogits: Vec<f64> = softmax_backward(&r.g, &dg).into_iter().map(|v| v / knobs.tau).collect();
    let dlogits = Array1::from(dlogits).insert_axis(Axis(0));
    let z = pass.z.clone().insert_axis(Axis(0));
    grads.router_w += &z.t().dot(&dlogits);
    let dz = dlogits.dot(&params.router_w.t());

    let mut dh = pool_backward(params, &pass.pool, &dz, grads);
    for (l, cache) in pass.blocks.iter().enumerate().rev() {
        dh = block_backward(&params.blocks[l], cache, &dh, heads, &mut grads.blocks[l]);
    }
    let tp = &params.token_mlp;
    let tg = &mut grads.token_mlp;
    let dhidden = linear_backward(&pass.token.hidden.view(), &tp.w2, &dh, &mut tg.w2, &mut tg.b2);
    let dpre = gelu_backward(&pass.token.pre, &dhidden);
    linear_backward_params(&inputs.view(), &dpre, &mut tg.w1, &mut tg.b1);
}
