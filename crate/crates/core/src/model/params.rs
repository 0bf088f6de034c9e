//! Learnable tensors and their initialization.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::TrainConfig;

/// Weights of one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
    pub ff_w1: Array2<f64>,
    pub ff_b1: Array2<f64>,
    pub ff_w2: Array2<f64>,
    pub ff_b2: Array2<f64>,
}

/// Two-layer MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

/// Every learnable tensor. Biases and norm gains are 1 x n rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub token_mlp: MlpParams,
    pub blocks: Vec<BlockParams>,
    pub pool_wq: Array2<f64>,
    pub pool_bq: Array2<f64>,
    pub pool_wk: Array2<f64>,
    pub pool_bk: Array2<f64>,
    /// d x C; routing logits are `z W`.
    pub router_w: Array2<f64>,
    /// C x d.
    pub codebook: Array2<f64>,
    pub decoders: Vec<MlpParams>,
}

/// Model shape: hidden sizes plus the per-modality feature dims.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelShape {
    pub d: usize,
    pub pe_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub codebook: usize,
    pub modality_dims: Vec<usize>,
}

impl ModelShape {
    pub fn new(cfg: &TrainConfig, modality_dims: &[usize]) -> Self {
        Self {
            d: cfg.d,
            pe_dim: cfg.pe_dim,
            layers: cfg.layers,
            heads: cfg.heads,
            codebook: cfg.codebook,
            modality_dims: modality_dims.to_vec(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.modality_dims.iter().sum::<usize>() + self.pe_dim
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Key/query width of the pooling projections.
    pub fn pool_dim(&self) -> usize {
        self.d / self.heads
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

fn zeros(n: usize) -> Array2<f64> {
    Array2::zeros((1, n))
}

fn ones(n: usize) -> Array2<f64> {
    Array2::ones((1, n))
}

impl MlpParams {
    fn init(rng: &mut ChaCha8Rng, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: uniform(rng, input, hidden),
            b1: zeros(hidden),
            w2: uniform(rng, hidden, output),
            b2: zeros(output),
        }
    }
}

impl ModelParams {
    /// Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit gains, N(0,1)/sqrt(d) codes.
    pub fn init(shape: &ModelShape, rng: &mut ChaCha8Rng) -> Self {
        let d = shape.d;
        let token_mlp = MlpParams::init(rng, shape.input_dim(), d, d);
        let blocks = (0..shape.layers)
            .map(|_| BlockParams {
                ln1_g: ones(d),
                ln1_b: zeros(d),
                wq: uniform(rng, d, d),
                bq: zeros(d),
                wk: uniform(rng, d, d),
                bk: zeros(d),
                wv: uniform(rng, d, d),
                bv: zeros(d),
                wo: uniform(rng, d, d),
                bo: zeros(d),
                ln2_g: ones(d),
                ln2_b: zeros(d),
                ff_w1: uniform(rng, d, 4 * d),
                ff_b1: zeros(4 * d),
                ff_w2: uniform(rng, 4 * d, d),
                ff_b2: zeros(d),
            })
            .collect();
        let dk = shape.pool_dim();
        let pool_wq = uniform(rng, d, dk);
        let pool_wk = uniform(rng, d, dk);
        let router_w = uniform(rng, d, shape.codebook);
        let scale = 1.0 / (d as f64).sqrt();
        let codebook = Array2::from_shape_simple_fn((shape.codebook, d), || {
            let v: f64 = StandardNormal.sample(rng);
            v * scale
        });
        let decoders = shape
            .modality_dims
            .iter()
            .map(|&dim| MlpParams::init(rng, d, d, dim))
            .collect();
        Self {
            token_mlp,
            blocks,
            pool_wq,
            pool_bq: zeros(dk),
            pool_wk,
            pool_bk: zeros(dk),
            router_w,
            codebook,
            decoders,
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            d: self.codebook.ncols(),
            pe_dim: self.token_mlp.w1.nrows()
                - self.decoders.iter().map(|m| m.w2.ncols()).sum::<usize>(),
            layers: self.blocks.len(),
            heads: self.codebook.ncols() / self.pool_wq.ncols(),
            codebook: self.codebook.nrows(),
            modality_dims: self.decoders.iter().map(|m| m.w2.ncols()).collect(),
        }
    }

    /// Every tensor with its name, in manifest order.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        mlp_refs(&self.token_mlp, "token", &mut out);
        for (l, b) in self.blocks.iter().enumerate() {
            let fields = [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("wq", &b.wq),
                ("bq", &b.bq),
                ("wk", &b.wk),
                ("bk", &b.bk),
                ("wv", &b.wv),
                ("bv", &b.bv),
                ("wo", &b.wo),
                ("bo", &b.bo),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("ff_w1", &b.ff_w1),
                ("ff_b1", &b.ff_b1),
                ("ff_w2", &b.ff_w2),
                ("ff_b2", &b.ff_b2),
            ];
            out.extend(fields.into_iter().map(|(n, t)| (format!("block{l}.{n}"), t)));
        }
        out.push(("pool.wq".into(), &self.pool_wq));
        out.push(("pool.bq".into(), &self.pool_bq));
        out.push(("pool.wk".into(), &self.pool_wk));
        out.push(("pool.bk".into(), &self.pool_bk));
        out.push(("router.w".into(), &self.router_w));
        out.push(("codebook".into(), &self.codebook));
        for (m, dec) in self.decoders.iter().enumerate() {
            mlp_refs(dec, &format!("decoder{m}"), &mut out);
        }
        out
    }

    /// Mutable twin of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::new();
        mlp_refs_mut(&mut self.token_mlp, "token", &mut out);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let fields = [
                ("ln1_g", &mut b.ln1_g),
                ("ln1_b", &mut b.ln1_b),
                ("wq", &mut b.wq),
                ("bq", &mut b.bq),
                ("wk", &mut b.wk),
                ("bk", &mut b.bk),
                ("wv", &mut b.wv),
                ("bv", &mut b.bv),
                ("wo", &mut b.wo),
                ("bo", &mut b.bo),
                ("ln2_g", &mut b.ln2_g),
                ("ln2_b", &mut b.ln2_b),
                ("ff_w1", &mut b.ff_w1),
                ("ff_b1", &mut b.ff_b1),
                ("ff_w2", &mut b.ff_w2),
                ("ff_b2", &mut b.ff_b2),
            ];
            out.extend(fields.into_iter().map(|(n, t)| (format!("block{l}.{n}"), t)));
        }
        out.push(("pool.wq".into(), &mut self.pool_wq));
        out.push(("pool.bq".into(), &mut self.pool_bq));
        out.push(("pool.wk".into(), &mut self.pool_wk));
        out.push(("pool.bk".into(), &mut self.pool_bk));
        out.push(("router.w".into(), &mut self.router_w));
        out.push(("codebook".into(), &mut self.codebook));
        for (m, dec) in self.decoders.iter_mut().enumerate() {
            mlp_refs_mut(dec, &format!("decoder{m}"), &mut out);
        }
        out
    }

    /// Applies `f` to each tensor of `self` paired with the same tensor of `other`.
    pub fn zip_mut(&mut self, other: &ModelParams, mut f: impl FnMut(&mut Array2<f64>, &Array2<f64>)) {
        for ((_, mine), (_, theirs)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            f(mine, theirs);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

fn mlp_refs<'a>(m: &'a MlpParams, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
    out.push((format!("{prefix}.w1"), &m.w1));
    out.push((format!("{prefix}.b1"), &m.b1));
    out.push((format!("{prefix}.w2"), &m.w2));
    out.push((format!("{prefix}.b2"), &m.b2));
}

fn mlp_refs_mut<'a>(m: &'a mut MlpParams, prefix: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
    out.push((format!("{prefix}.w1"), &mut m.w1));
    out.push((format!("{prefix}.b1"), &mut m.b1));
    out.push((format!("{prefix}.w2"), &mut m.w2));
    out.push((format!("{prefix}.b2"), &mut m.b2));
}
