//! Evaluation harness: a planted-cluster synthetic generator, the
//! neighborhood-versus-retrieved relevance comparison, completion metrics
//! against simple baselines, and per-stage timings.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ItemGraph;
use crate::modality::{apply_masking, cosine, FeatureMatrix, ModalityMask, ModalityStore, Observation};
use crate::model::{complete_with, train, CompletionModel, TrainConfig, TrainOutcome, TrainingData};
use crate::retrieval::{retrieve, RetrievalConfig};
use crate::seed::{derive_seed, stage_rng, Stage};

/// Planted-cluster generator settings.
///
/// Modality 1 is `sqrt(rho) * centroid + sqrt(1 - rho) * noise` per item;
/// modality 0 is a fixed random linear map of modality 1 plus Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_clusters: usize,
    pub items_per_cluster: usize,
    /// Feature width of modality 0 and modality 1.
    pub dims: [usize; 2],
    /// Share of modality-1 variance explained by the cluster centroid.
    pub correlation: f64,
    /// Standard deviation of the noise added after the cross-modal map.
    pub map_noise: f64,
    pub p_intra: f64,
    pub p_inter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_clusters: 10,
            items_per_cluster: 100,
            dims: [16, 16],
            correlation: 0.6,
            map_noise: 0.1,
            p_intra: 0.05,
            p_inter: 0.004,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 || self.items_per_cluster == 0 {
            return Err(Error::Config("synthetic spec needs at least one cluster and one item".into()));
        }
        if self.dims.contains(&0) {
            return Err(Error::Config("synthetic feature dims must be positive".into()));
        }
        for (name, p) in [("p_intra", self.p_intra), ("p_inter", self.p_inter), ("correlation", self.correlation)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        if self.map_noise.is_nan() || self.map_noise < 0.0 {
            return Err(Error::Config("map_noise must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn n_items(&self) -> usize {
        self.n_clusters * self.items_per_cluster
    }

    /// 10,000 items in 100 clusters with about the default per-node degree.
    pub fn bench() -> Self {
        Self {
            n_clusters: 100,
            items_per_cluster: 100,
            p_intra: 0.05,
            p_inter: 0.0004,
            ..Self::default()
        }
    }
}

/// Generated graph and complete features; the store doubles as ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub graph: ItemGraph,
    pub store: ModalityStore,
    pub clusters: Vec<usize>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = stage_rng(spec.seed, Stage::Synth);
    let n = spec.n_items();
    let [d0, d1] = spec.dims;
    let clusters: Vec<usize> = (0..n).map(|i| i / spec.items_per_cluster).collect();

    let mut gauss = |rows: usize, cols: usize| -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    };
    let centroids = gauss(spec.n_clusters, d1);
    let map = gauss(d1, d0) / (d1 as f64).sqrt();
    let own = gauss(n, d1);
    let noise = gauss(n, d0);

    let (a, b) = (spec.correlation.sqrt(), (1.0 - spec.correlation).sqrt());
    let mut x1 = Array2::<f64>::zeros((n, d1));
    for (i, &c) in clusters.iter().enumerate() {
        let row = &centroids.row(c) * a + &own.row(i) * b;
        x1.row_mut(i).assign(&row);
    }
    let x0 = x1.dot(&map) + noise * spec.map_noise;

    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if clusters[i] == clusters[j] { spec.p_intra } else { spec.p_inter };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let graph = ItemGraph::from_edges(n, edges)?;
    let to_f32 = |x: &Array2<f64>| FeatureMatrix::new(x.nrows(), x.ncols(), x.iter().map(|&v| v as f32).collect());
    let store = ModalityStore::new(vec![("m0".into(), to_f32(&x0)?), ("m1".into(), to_f32(&x1)?)])?;
    Ok(SyntheticData { graph, store, clusters })
}

/// Per-query relevance of the neighborhood and of the retrieved subgraph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceRow {
    pub query: usize,
    pub modality: usize,
    /// Absent when no neighborhood node observes the modality.
    pub neighbor_mean: Option<f64>,
    pub retrieved_mean: Option<f64>,
    pub neighbor_count: usize,
    pub retrieved_count: usize,
}

fn feature(store: &ModalityStore, m: usize, v: usize) -> Vec<f64> {
    store.row(m, v).iter().map(|&x| x as f64).collect()
}

fn mean_cosine_to(
    store: &ModalityStore,
    obs: &(impl Observation + ?Sized),
    truth: &[f64],
    m: usize,
    nodes: impl Iterator<Item = usize>,
) -> Result<(Option<f64>, usize)> {
    let mut sum = 0.0;
    let mut count = 0;
    for v in nodes.filter(|&v| obs.is_observed(v, m)) {
        sum += cosine(&feature(store, m, v), truth)?;
        count += 1;
    }
    Ok(((count > 0).then(|| sum / count as f64), count))
}

/// For each `(query, modality)` with the modality hidden by `mask`: mean
/// cosine between the query's held-out features and those of (a) its
/// `kn`-hop neighbors and (b) the retrieved subgraph, skipping nodes that
/// do not observe the modality. The query itself never counts.
pub fn relevance_comparison(
    graph: &ItemGraph,
    store: &ModalityStore,
    mask: &ModalityMask,
    queries: &[(usize, usize)],
    retrieval: &RetrievalConfig,
    parallel: bool,
) -> Result<Vec<RelevanceRow>> {
    let row = |&(i, m): &(usize, usize)| -> Result<RelevanceRow> {
        if m >= store.n_modalities() {
            return Err(Error::UnknownModality(m));
        }
        if mask.is_observed(i, m) {
            return Err(Error::InvalidValue(format!(
                "modality {m} of item {i} is observed; no held-out ground truth"
            )));
        }
        let truth = feature(store, m, i);
        let hood = graph.k_hop_neighborhood(i, retrieval.kn)?;
        let (neighbor_mean, neighbor_count) = mean_cosine_to(store, mask, &truth, m, hood.into_iter())?;
        let found = retrieve(graph, store, mask, i, retrieval)?;
        let nodes = found.subgraph().nodes.iter().copied().filter(|&v| v != i);
        let (retrieved_mean, retrieved_count) = mean_cosine_to(store, mask, &truth, m, nodes)?;
        Ok(RelevanceRow {
            query: i,
            modality: m,
            neighbor_mean,
            retrieved_mean,
            neighbor_count,
            retrieved_count,
        })
    };
    if parallel {
        queries.par_iter().map(row).collect()
    } else {
        queries.iter().map(row).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionMetrics {
    /// Squared error averaged over every element of every completed slot.
    pub mse: f64,
    /// Cosine between prediction and truth, averaged over slots.
    pub mean_cosine: f64,
    pub slots: usize,
}

pub fn completion_metrics(pred: &[Array1<f64>], truth: &[Array1<f64>]) -> Result<CompletionMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::DimMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptySet);
    }
    let (mut sq, mut elems, mut cos) = (0.0, 0usize, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::DimMismatch {
                left: p.len(),
                right: t.len(),
            });
        }
        sq += (p - t).mapv(|e| e * e).sum();
        elems += p.len();
        cos += cosine(p.as_slice().expect("contiguous"), t.as_slice().expect("contiguous"))?;
    }
    Ok(CompletionMetrics {
        mse: sq / elems.max(1) as f64,
        mean_cosine: cos / pred.len() as f64,
        slots: pred.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    ZeroFill,
    NeighborMean,
}

/// Completes modality `m` of item `i` without the model.
pub fn baseline(
    mode: Baseline,
    graph: &ItemGraph,
    store: &ModalityStore,
    obs: &(impl Observation + ?Sized),
    i: usize,
    m: usize,
    kn: usize,
) -> Result<Array1<f64>> {
    if m >= store.n_modalities() {
        return Err(Error::UnknownModality(m));
    }
    let mut out = Array1::zeros(store.dim(m));
    if mode == Baseline::ZeroFill {
        return Ok(out);
    }
    let mut count = 0usize;
    for v in graph.k_hop_neighborhood(i, kn)? {
        if obs.is_observed(v, m) {
            out.iter_mut().zip(store.row(m, v)).for_each(|(o, &x)| *o += x as f64);
            count += 1;
        }
    }
    if count > 0 {
        out /= count as f64;
    }
    Ok(out)
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub training: f64,
    pub retrieval: f64,
    pub completion: f64,
    pub evaluation: f64,
    pub total: f64,
}

impl StageTimings {
    pub fn finish(mut self) -> Self {
        self.total = self.training + self.retrieval + self.completion + self.evaluation;
        self
    }
}

/// Runs `f` and adds its duration to `slot`.
pub fn timed<T>(slot: &mut f64, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *slot += start.elapsed().as_secs_f64();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceSummary {
    pub queries: usize,
    /// Queries where both means are defined; the averages below use these only.
    pub paired: usize,
    pub neighbor_mean: f64,
    pub retrieved_mean: f64,
    pub definition: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionSummary {
    pub methods: BTreeMap<String, CompletionMetrics>,
    pub definition: String,
}

/// Evaluation report; `timings` is the only non-reproducible section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub relevance: RelevanceSummary,
    pub completion: CompletionSummary,
    pub timings: StageTimings,
    pub config_echo: serde_json::Value,
    #[serde(skip)]
    pub rows: Vec<RelevanceRow>,
}

impl EvalReport {
    /// Per-query relevance detail as CSV.
    pub fn relevance_csv(&self) -> String {
        let mut out = String::from("query_id,modality,neighbor_mean,retrieved_mean,neighbor_count,retrieved_count\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.query,
                r.modality,
                opt(r.neighbor_mean),
                opt(r.retrieved_mean),
                r.neighbor_count,
                r.retrieved_count
            ));
        }
        out
    }
}

/// Hidden slots of `mask`, or a seeded subset of `sample` of them, ascending.
pub fn eval_queries(mask: &ModalityMask, sample: Option<usize>, seed: u64) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = (0..mask.n_items())
        .flat_map(|i| (0..mask.n_modalities()).map(move |m| (i, m)))
        .filter(|&(i, m)| !mask.is_observed(i, m))
        .collect();
    match sample {
        Some(k) if k < all.len() => {
            let mut picked = sample_indices(&mut stage_rng(seed, Stage::Sample), all.len(), k).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|j| all[j]).collect()
        }
        _ => all,
    }
}

/// Evaluates a trained model on the hidden slots of `mask`, using the
/// store's values at those slots as ground truth.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    graph: &ItemGraph,
    store: &ModalityStore,
    mask: &ModalityMask,
    model: &CompletionModel,
    retrieval: &RetrievalConfig,
    queries: &[(usize, usize)],
    config_echo: serde_json::Value,
    parallel: bool,
) -> Result<EvalReport> {
    let mut timings = StageTimings::default();
    let rows = timed(&mut timings.retrieval, || {
        relevance_comparison(graph, store, mask, queries, retrieval, parallel)
    })?;

    let complete_one = |&(i, m): &(usize, usize)| -> Result<Array1<f64>> {
        let res = complete_with(i, mask, store, graph, model, retrieval)?;
        res.vectors
            .into_iter()
            .find(|(mm, _)| *mm == m)
            .map(|(_, v)| v)
            .ok_or(Error::UnknownModality(m))
    };
    let predicted: Vec<Array1<f64>> = timed(&mut timings.completion, || {
        if parallel {
            queries.par_iter().map(complete_one).collect::<Result<Vec<_>>>()
        } else {
            queries.iter().map(complete_one).collect::<Result<Vec<_>>>()
        }
    })?;

    let (relevance, completion) = timed(&mut timings.evaluation, || -> Result<_> {
        let truth: Vec<Array1<f64>> = queries.iter().map(|&(i, m)| Array1::from(feature(store, m, i))).collect();
        let mut methods = BTreeMap::new();
        if !queries.is_empty() {
            methods.insert("model".to_string(), completion_metrics(&predicted, &truth)?);
            for (name, mode) in [("neighbor_mean", Baseline::NeighborMean), ("zero_fill", Baseline::ZeroFill)] {
                let preds = queries
                    .iter()
                    .map(|&(i, m)| baseline(mode, graph, store, mask, i, m, retrieval.kn))
                    .collect::<Result<Vec<_>>>()?;
                methods.insert(name.to_string(), completion_metrics(&preds, &truth)?);
            }
        }
        let paired: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| Some((r.neighbor_mean?, r.retrieved_mean?)))
            .collect();
        let avg = |f: fn(&(f64, f64)) -> f64| {
            if paired.is_empty() {
                0.0
            } else {
                paired.iter().map(f).sum::<f64>() / paired.len() as f64
            }
        };
        let relevance = RelevanceSummary {
            queries: rows.len(),
            paired: paired.len(),
            neighbor_mean: avg(|p| p.0),
            retrieved_mean: avg(|p| p.1),
            definition: "mean over queries of the mean cosine between each node's features in the \
                         query's hidden modality and the query's held-out features; nodes not \
                         observing that modality are skipped"
                .into(),
        };
        let completion = CompletionSummary {
            methods,
            definition: "mse: squared error averaged over all elements of all completed slots; \
                         mean_cosine: cosine(prediction, truth) averaged over slots, zero for a zero vector"
                .into(),
        };
        Ok((relevance, completion))
    })?;

    Ok(EvalReport {
        relevance,
        completion,
        timings: timings.finish(),
        config_echo,
        rows,
    })
}

/// End-to-end synthetic evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub synthetic: SyntheticSpec,
    pub mask_rate: f64,
    pub seed: u64,
    pub retrieval: RetrievalConfig,
    pub train: TrainConfig,
    /// Evaluate a seeded subset of this many hidden slots.
    pub sample: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            mask_rate: 0.4,
            seed: 0,
            retrieval: RetrievalConfig::default(),
            train: synthetic_train_config(),
            sample: None,
        }
    }
}

/// Desk-scale model used by the synthetic run.
pub fn synthetic_train_config() -> TrainConfig {
    TrainConfig {
        d: 32,
        pe_dim: 8,
        layers: 2,
        heads: 4,
        codebook: 32,
        top_p: 8,
        tau: 1.0,
        noise_scale: 0.1,
        lambda_usage: 20.0,
        learning_rate: 1e-3,
        batch: 32,
        dropout: 0.0,
        epochs: 60,
        ..TrainConfig::default()
    }
}

/// Artifacts of a synthetic run.
#[derive(Debug, Clone)]
pub struct SyntheticRun {
    pub data: SyntheticData,
    pub mask: ModalityMask,
    pub training: TrainOutcome,
    pub report: EvalReport,
}

/// Generate, mask, train and evaluate.
pub fn run_synthetic(cfg: &EvalConfig, parallel: bool) -> Result<SyntheticRun> {
    let data = generate_synthetic(&cfg.synthetic)?;
    let mask = apply_masking(
        data.store.n_items(),
        data.store.n_modalities(),
        cfg.mask_rate,
        derive_seed(cfg.seed, Stage::Mask),
    )?;
    let mut training_secs = 0.0;
    let training = timed(&mut training_secs, || -> Result<TrainOutcome> {
        let samples = TrainingData::build(&data.graph, &data.store, &mask, &cfg.retrieval, &cfg.train)?;
        train(&samples, &cfg.train, parallel)
    })?;
    let queries = eval_queries(&mask, cfg.sample, cfg.seed);
    let mut report = evaluate_model(
        &data.graph,
        &data.store,
        &mask,
        &training.model,
        &cfg.retrieval,
        &queries,
        serde_json::to_value(cfg)?,
        parallel,
    )?;
    report.timings.training = training_secs;
    report.timings = report.timings.finish();
    Ok(SyntheticRun {
        data,
        mask,
        training,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_clusters_is_rejected() {
        let spec = SyntheticSpec {
            n_clusters: 0,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn zero_edge_probability_gives_no_edges() {
        let spec = SyntheticSpec {
            n_clusters: 3,
            items_per_cluster: 10,
            p_intra: 0.0,
            p_inter: 0.0,
            ..SyntheticSpec::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap().graph.edge_count(), 0);
    }

    #[test]
    fn metric_examples() {
        let t = vec![Array1::from(vec![1.0, -2.0, 0.5])];
        let same = completion_metrics(&t, &t).unwrap();
        assert_eq!(same.mse, 0.0);
        assert!((same.mean_cosine - 1.0).abs() < 1e-12);
        let zero = completion_metrics(&[Array1::zeros(3)], &t).unwrap();
        assert_eq!(zero.mean_cosine, 0.0);
        let neg = completion_metrics(&[-&t[0]], &t).unwrap();
        assert!((neg.mean_cosine + 1.0).abs() < 1e-12);
        assert!(completion_metrics(&[Array1::zeros(2)], &t).is_err());
    }

    #[test]
    fn baselines_follow_their_definitions() {
        let g = ItemGraph::from_edges(3, [(0, 1)]).unwrap();
        let f = FeatureMatrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let store = ModalityStore::new(vec![("a".into(), f.clone()), ("b".into(), f)]).unwrap();
        let mask = ModalityMask::from_rows(&[vec![false, true], vec![true, true], vec![false, true]]).unwrap();
        let zero = baseline(Baseline::ZeroFill, &g, &store, &mask, 0, 0, 2).unwrap();
        assert_eq!(zero, Array1::<f64>::zeros(2));
        let nm = baseline(Baseline::NeighborMean, &g, &store, &mask, 0, 0, 2).unwrap();
        assert_eq!(nm, Array1::from(vec![3.0, 4.0]));
        let none = baseline(Baseline::NeighborMean, &g, &store, &mask, 2, 0, 2).unwrap();
        assert_eq!(none, Array1::<f64>::zeros(2));
    }
}
