//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Run with `cargo test -p modfill-cli --test acceptance`. Criterion 7 trains
//! the default synthetic model single-threaded and takes about a minute in
//! an optimised build.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use modfill::eval::{eval_queries, generate_synthetic, run_synthetic, synthetic_train_config, EvalConfig, SyntheticSpec};
use modfill::graph::ItemGraph;
use modfill::modality::{apply_masking, mean_relevance, FeatureMatrix, ModalityMask, ModalityStore, Observation};
use modfill::model::{
    batch_gradients, batch_loss, forward, loss_load, loss_usage, ForwardNoise, ModelParams, ModelShape, Sample,
    TrainConfig,
};
use modfill::retrieval::{acs, mage, retrieve, RetrievalConfig};
use modfill::seed::{derive_seed, Stage};
use modfill::spectral::{eigen_decompose_symmetric, normalized_laplacian};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pinned thresholds for criterion 7. The reference run of the default
/// generator (seed 42, mask seed from master seed 0) measured a recon ratio
/// of 0.307 at epoch 50, model cosine 0.737 against 0.559 for the
/// neighbor-mean baseline, and retrieved relevance 0.385 against 0.203 for
/// the 2-hop neighborhood over 800 paired queries.
const RECON_RATIO_MAX: f64 = 0.5;
const COSINE_MARGIN: f64 = 0.05;
const MIN_RELEVANCE_QUERIES: usize = 100;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<f64, String> {
    let secs = start.elapsed().as_secs_f64();
    ensure(start.elapsed() < limit, || format!("took {secs:.2}s, limit {}s", limit.as_secs_f64()))?;
    Ok(secs)
}

/// Random connected graph: a random labelled tree, plus extra edges unless `tree`.
fn random_connected(rng: &mut ChaCha8Rng, n: usize, tree: bool) -> ItemGraph {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut edges = Vec::new();
    for k in 1..n {
        let parent = order[rng.random_range(0..k)];
        edges.push((order[k], parent));
    }
    if !tree {
        let p = rng.random_range(0.05..0.4);
        for a in 0..n {
            for b in (a + 1)..n {
                if rng.random_bool(p) {
                    edges.push((a, b));
                }
            }
        }
    }
    ItemGraph::from_edges(n, edges).unwrap()
}

fn bfs_path(g: &ItemGraph, from: usize, to: usize) -> Vec<usize> {
    let mut prev = vec![usize::MAX; g.n()];
    prev[from] = from;
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        for &w in g.neighbors(u) {
            let w = w as usize;
            if prev[w] == usize::MAX {
                prev[w] = u;
                queue.push_back(w);
            }
        }
    }
    let mut path = vec![to];
    let mut x = to;
    while x != from {
        x = prev[x];
        path.push(x);
    }
    path
}

fn random_anchors(rng: &mut ChaCha8Rng, n: usize, avoid: Option<usize>) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).filter(|&v| Some(v) != avoid).collect();
    pool.shuffle(rng);
    let k = rng.random_range(1..=3usize.min(pool.len()));
    pool.truncate(k);
    pool
}

fn masking_audit() -> Check {
    let start = Instant::now();
    for seed in [0u64, 1, 7, 42, 123_456_789] {
        let mask = apply_masking(7050, 2, 0.4, seed).map_err(|e| e.to_string())?;
        let mut full = 0;
        let mut one_missing = 0;
        let mut per_modality = [0usize; 2];
        for i in 0..7050 {
            let missing: Vec<usize> = (0..2).filter(|&m| !mask.is_observed(i, m)).collect();
            match missing.len() {
                0 => full += 1,
                1 => {
                    one_missing += 1;
                    per_modality[missing[0]] += 1;
                }
                k => return Err(format!("seed {seed}: item {i} misses {k} modalities")),
            }
        }
        ensure(full == 1410 && one_missing == 5640, || {
            format!("seed {seed}: full={full} one_missing={one_missing}")
        })?;
        for (m, &c) in per_modality.iter().enumerate() {
            ensure((c as f64 - 2820.0).abs() <= 0.05 * 2820.0, || {
                format!("seed {seed}: modality {m} missing on {c} items")
            })?;
        }
    }
    let secs = within(start, Duration::from_secs(5))?;
    ensure(secs / 5.0 < 1.0, || format!("{:.2}s per mask", secs / 5.0))?;
    Ok(format!("5 seeds, 1410 full / 5640 one-missing each, {:.3}s per mask", secs / 5.0))
}

fn acs_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut trees = 0;
    for case in 0..500 {
        let n = rng.random_range(1..=12);
        let tree = case % 2 == 0;
        let g = random_connected(&mut rng, n, tree);
        let anchors = random_anchors(&mut rng, n, None);
        let out = acs(&g, &anchors).map_err(|e| format!("case {case}: {e}"))?;
        ensure(g.is_connected_subset(&out.nodes).unwrap_or(false), || {
            format!("case {case}: output {:?} is not connected", out.nodes)
        })?;
        ensure(anchors.iter().all(|a| out.nodes.contains(a)), || {
            format!("case {case}: anchors {anchors:?} not all in {:?}", out.nodes)
        })?;
        if tree {
            trees += 1;
            let mut expected = BTreeSet::new();
            for &a in &anchors {
                for &b in &anchors {
                    expected.extend(bfs_path(&g, a, b));
                }
            }
            let got: BTreeSet<usize> = out.nodes.iter().copied().collect();
            ensure(got == expected, || format!("case {case}: tree ACS {got:?}, path union {expected:?}"))?;
        }
    }
    let secs = within(start, Duration::from_secs(10))?;
    Ok(format!("500 graphs ({trees} trees exact), {secs:.3}s"))
}

fn random_store(rng: &mut ChaCha8Rng, n: usize) -> (ModalityStore, ModalityMask) {
    let named = (0..2)
        .map(|m| {
            let data: Vec<f32> = (0..n * 3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            (format!("m{m}"), FeatureMatrix::new(n, 3, data).unwrap())
        })
        .collect();
    let rows: Vec<Vec<bool>> = (0..n)
        .map(|_| match rng.random_range(0..4) {
            0 => vec![true, false],
            1 => vec![false, true],
            _ => vec![true, true],
        })
        .collect();
    (ModalityStore::new(named).unwrap(), ModalityMask::from_rows(&rows).unwrap())
}

fn mage_properties() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut moves = 0;
    for case in 0..500 {
        let n = rng.random_range(2..=10);
        let g = random_connected(&mut rng, n, case % 3 == 0);
        let (store, mask) = random_store(&mut rng, n);
        let query = rng.random_range(0..n);
        let anchors = random_anchors(&mut rng, n, Some(query));
        let out = mage(&g, &store, &mask, query, &anchors, 10).map_err(|e| format!("case {case}: {e}"))?;
        let initial = out.initial.phi.ok_or("initial phi missing")?;
        let fin = out.subgraph.phi.ok_or("final phi missing")?;
        ensure(out.moves.len() <= 10, || format!("case {case}: {} moves", out.moves.len()))?;
        let mut last = initial;
        for mv in &out.moves {
            ensure(mv.phi() > last, || format!("case {case}: phi {last} -> {} not increasing", mv.phi()))?;
            last = mv.phi();
        }
        moves += out.moves.len();
        ensure(fin >= initial, || format!("case {case}: final {fin} < initial {initial}"))?;
        let recomputed = mean_relevance(&store, &mask, query, &out.subgraph.nodes).map_err(|e| e.to_string())?;
        ensure((recomputed - fin).abs() <= 1e-9 * (1.0 + fin.abs()), || {
            format!("case {case}: reported phi {fin}, recomputed {recomputed}")
        })?;
        ensure(g.is_connected_subset(&out.subgraph.nodes).unwrap_or(false), || {
            format!("case {case}: output disconnected")
        })?;
        ensure(anchors.iter().all(|a| out.subgraph.nodes.contains(a)), || {
            format!("case {case}: lost an anchor")
        })?;
        // exhaustive optimum over connected anchor-containing subsets
        let mut best = f64::NEG_INFINITY;
        for bits in 1u32..(1 << n) {
            let nodes: Vec<usize> = (0..n).filter(|&v| bits >> v & 1 == 1).collect();
            if !anchors.iter().all(|&a| bits >> a & 1 == 1) || !g.is_connected_subset(&nodes).unwrap() {
                continue;
            }
            best = best.max(mean_relevance(&store, &mask, query, &nodes).unwrap());
        }
        ensure(fin <= best + 1e-9 * (1.0 + best.abs()), || {
            format!("case {case}: MAGE phi {fin} exceeds exhaustive optimum {best}")
        })?;
    }
    let secs = within(start, Duration::from_secs(60))?;
    Ok(format!("500 instances, {moves} accepted moves, {secs:.3}s"))
}

fn eigenvalues_of(edges: &[(usize, usize)], n: usize) -> Result<Vec<f64>, String> {
    let mut adj = Array2::zeros((n, n));
    for &(a, b) in edges {
        adj[[a, b]] = 1.0;
        adj[[b, a]] = 1.0;
    }
    let lap = normalized_laplacian(&adj).map_err(|e| e.to_string())?;
    Ok(eigen_decompose_symmetric(&lap, 1e-12).map_err(|e| e.to_string())?.values)
}

fn spectral_checks() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst_residual = 0.0f64;
    let mut worst_orth = 0.0f64;
    for case in 0..200 {
        let n = rng.random_range(1..=30);
        let p = rng.random_range(0.0..0.6);
        let mut adj = Array2::zeros((n, n));
        for a in 0..n {
            for b in (a + 1)..n {
                if rng.random_bool(p) {
                    adj[[a, b]] = 1.0;
                    adj[[b, a]] = 1.0;
                }
            }
        }
        let lap = normalized_laplacian(&adj).map_err(|e| e.to_string())?;
        let eig = eigen_decompose_symmetric(&lap, 1e-12).map_err(|e| format!("case {case}: {e}"))?;
        let u = &eig.vectors;
        for j in 0..n {
            let col = u.column(j);
            let lu = lap.dot(&col);
            let r = lu
                .iter()
                .zip(col.iter())
                .map(|(a, b)| (a - eig.values[j] * b).abs())
                .fold(0.0, f64::max);
            worst_residual = worst_residual.max(r);
            for k in 0..n {
                let target = if j == k { 1.0 } else { 0.0 };
                worst_orth = worst_orth.max((col.dot(&u.column(k)) - target).abs());
            }
        }
    }
    ensure(worst_residual < 1e-8, || format!("residual {worst_residual:e}"))?;
    ensure(worst_orth < 1e-8, || format!("orthogonality error {worst_orth:e}"))?;
    // path a-b-c: spectrum of I - D^-1/2 A D^-1/2 is 1 - cos(pi k / 2)
    let p3 = eigenvalues_of(&[(0, 1), (1, 2)], 3)?;
    // complete graph K_n: 0 once, n/(n-1) with multiplicity n-1
    let k3 = eigenvalues_of(&[(0, 1), (1, 2), (0, 2)], 3)?;
    for (got, want) in [(p3, [0.0, 1.0, 2.0]), (k3, [0.0, 1.5, 1.5])] {
        ensure(got.iter().zip(want).all(|(g, w)| (g - w).abs() < 1e-8), || {
            format!("spectrum {got:?}, expected {want:?}")
        })?;
    }
    let secs = within(start, Duration::from_secs(10))?;
    Ok(format!(
        "200 graphs, residual {worst_residual:.1e}, orthogonality {worst_orth:.1e}, P3/K3 exact, {secs:.3}s"
    ))
}

fn gradient_check() -> Check {
    let start = Instant::now();
    let cfg = TrainConfig {
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
    };
    let dims = [4usize, 3];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let params = ModelParams::init(&ModelShape::new(&cfg, &dims), &mut rng);
    let width = dims.iter().sum::<usize>() + cfg.pe_dim;
    let samples: Vec<Sample> = [2usize, 4, 6]
        .iter()
        .enumerate()
        .map(|(s, &tokens)| {
            let m = s % 2;
            Sample {
                query: s,
                tokens: (0..tokens).collect(),
                inputs: Array2::from_shape_simple_fn((tokens, width), || rng.random_range(-1.0..1.0)),
                targets: vec![(m, Array1::from_shape_simple_fn(dims[m], || rng.random_range(-1.0..1.0)))],
            }
        })
        .collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut noises = Vec::new();
    for s in &samples {
        let epsilon = (0..cfg.codebook)
            .map(|_| -(-rng.random_range(1e-12f64..1.0).ln()).ln())
            .collect();
        let mut noise = ForwardNoise {
            epsilon,
            dropout: 0.0,
            dropout_seed: 0,
            fixed_top: None,
        };
        let mods: Vec<usize> = s.targets.iter().map(|t| t.0).collect();
        let pass = forward(&s.inputs, &mods, &params, cfg.heads, cfg.routing(), &noise).map_err(|e| e.to_string())?;
        noise.fixed_top = Some(pass.routing.top.clone());
        noises.push(noise);
    }
    let (_, grads) = batch_gradients(&params, &refs, &noises, &cfg, false).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let analytic: Vec<(String, Array2<f64>)> = grads.tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
    for (t, (name, a)) in analytic.iter().enumerate() {
        for r in 0..a.nrows() {
            for c in 0..a.ncols() {
                let orig = params.tensors()[t].1[[r, c]];
                probe.tensors_mut()[t].1[[r, c]] = orig + h;
                let plus = batch_loss(&probe, &refs, &noises, &cfg).map_err(|e| e.to_string())?.total;
                probe.tensors_mut()[t].1[[r, c]] = orig - h;
                let minus = batch_loss(&probe, &refs, &noises, &cfg).map_err(|e| e.to_string())?.total;
                probe.tensors_mut()[t].1[[r, c]] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let err = (a[[r, c]] - numeric).abs();
                let scale = a[[r, c]].abs().max(numeric.abs());
                ensure(err <= 1e-8f64.max(1e-4 * scale), || {
                    format!("{name}[{r},{c}]: analytic {:e}, numeric {numeric:e}", a[[r, c]])
                })?;
                if scale > 1e-8 {
                    worst = worst.max(err / scale);
                }
                checked += 1;
            }
        }
    }
    let secs = within(start, Duration::from_secs(120))?;
    Ok(format!("{checked} scalars, worst relative error {worst:.1e}, {secs:.3}s"))
}

fn closed_form_losses() -> Check {
    let uniform = loss_usage(&[vec![0.25; 4], vec![0.25; 4]]);
    ensure(uniform.abs() < 1e-12, || format!("uniform usage {uniform:e}"))?;
    let one_hot = loss_usage(&vec![vec![1.0, 0.0, 0.0, 0.0]; 3]);
    ensure((one_hot - 4f64.ln()).abs() < 1e-9, || format!("one-hot usage {one_hot}"))?;
    // C=4, P=2: rows {0,1} and {2,3} load each code once per batch of 2
    let balanced = vec![vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 1.0]];
    let bl = loss_load(&balanced, 2).map_err(|e| e.to_string())?;
    ensure((bl - 4.0).abs() < 1e-9, || format!("balanced load {bl}"))?;
    let single = vec![vec![1.0, 1.0, 0.0, 0.0]; 5];
    let sl = loss_load(&single, 2).map_err(|e| e.to_string())?;
    ensure((sl - 8.0).abs() < 1e-9, || format!("single-set load {sl}"))?;
    Ok(format!("usage {uniform:.1e} / {one_hot:.9}, load {bl} / {sl}"))
}

fn synthetic_end_to_end() -> Check {
    let start = Instant::now();
    let run = run_synthetic(&EvalConfig::default(), false).map_err(|e| e.to_string())?;
    let log = &run.training.log;
    ensure(log.len() >= 50, || format!("training stopped after {} epochs", log.len()))?;
    let ratio = log[49].recon / log[0].recon;
    ensure(ratio <= RECON_RATIO_MAX, || format!("recon ratio {ratio:.3}"))?;
    let methods = &run.report.completion.methods;
    let cos = |name: &str| methods.get(name).map(|m| m.mean_cosine).ok_or(format!("no {name} metrics"));
    let (model, neighbor, zero) = (cos("model")?, cos("neighbor_mean")?, cos("zero_fill")?);
    ensure(model >= neighbor + COSINE_MARGIN && model > zero, || {
        format!("cosine model {model:.4}, neighbor {neighbor:.4}, zero {zero:.4}")
    })?;
    let rel = &run.report.relevance;
    ensure(rel.paired >= MIN_RELEVANCE_QUERIES, || format!("{} paired queries", rel.paired))?;
    ensure(rel.retrieved_mean > rel.neighbor_mean, || {
        format!("retrieved {:.4} <= neighborhood {:.4}", rel.retrieved_mean, rel.neighbor_mean)
    })?;
    let secs = within(start, Duration::from_secs(600))?;
    Ok(format!(
        "recon ratio {ratio:.3}, cosine {model:.3} vs {neighbor:.3} vs {zero:.3}, relevance {:.3} vs {:.3} over {} queries, {secs:.1}s",
        rel.retrieved_mean, rel.neighbor_mean, rel.paired
    ))
}

fn small_run_config(dir: &Path) -> std::path::PathBuf {
    let eval = EvalConfig {
        synthetic: SyntheticSpec {
            n_clusters: 4,
            items_per_cluster: 30,
            p_intra: 0.15,
            p_inter: 0.01,
            ..SyntheticSpec::default()
        },
        train: TrainConfig {
            epochs: 3,
            ..synthetic_train_config()
        },
        ..EvalConfig::default()
    };
    let path = dir.join("config.json");
    let doc = serde_json::json!({ "seed": 9, "eval": eval });
    std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path
}

fn run_pipeline(config: &Path, out: &Path) -> Result<(), String> {
    for cmd in ["mask", "retrieve", "train", "complete", "evaluate"] {
        let status = Command::new(env!("CARGO_BIN_EXE_modfill"))
            .args([cmd, "--synthetic", "--threads", "1", "--config"])
            .arg(config)
            .arg("--out")
            .arg(out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || {
            format!("`{cmd}` failed: {}", String::from_utf8_lossy(&status.stderr))
        })?;
    }
    Ok(())
}

fn without_timings(text: &str) -> Result<serde_json::Value, String> {
    let mut v: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    v.as_object_mut().ok_or("report is not an object")?.remove("timings");
    Ok(v)
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = small_run_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_pipeline(&config, &a)?;
    run_pipeline(&config, &b)?;
    let files = [
        "mask.csv",
        "retrieval.csv",
        "model.gmp",
        "train_log.csv",
        "completions.csv",
        "eval_relevance.csv",
    ];
    for name in files {
        let x = std::fs::read(a.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let y = std::fs::read(b.join(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure(x == y, || format!("{name} differs between runs"))?;
    }
    let read = |d: &Path| std::fs::read_to_string(d.join("eval_report.json")).map_err(|e| e.to_string());
    ensure(without_timings(&read(&a)?)? == without_timings(&read(&b)?)?, || {
        "eval_report.json differs outside timings".into()
    })?;
    Ok(format!("{} artifacts byte-identical, eval report identical without timings", files.len()))
}

fn scalability() -> Check {
    let data = generate_synthetic(&SyntheticSpec::bench()).map_err(|e| e.to_string())?;
    let mask = apply_masking(data.graph.n(), 2, 0.4, derive_seed(0, Stage::Mask)).map_err(|e| e.to_string())?;
    let queries = eval_queries(&mask, Some(1000), 0);
    ensure(queries.len() == 1000, || format!("{} queries", queries.len()))?;
    let cfg = RetrievalConfig {
        k: 10,
        t: 10,
        ..RetrievalConfig::default()
    };
    let start = Instant::now();
    let mut nodes = 0;
    for &(i, _) in &queries {
        nodes += retrieve(&data.graph, &data.store, &mask, i, &cfg)
            .map_err(|e| e.to_string())?
            .subgraph()
            .nodes
            .len();
    }
    let secs = within(start, Duration::from_secs(60))?;
    Ok(format!(
        "{} nodes, {} edges, 1000 queries in {secs:.2}s (mean subgraph {:.1})",
        data.graph.n(),
        data.graph.edge_count(),
        nodes as f64 / 1000.0
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("masking audit", masking_audit),
        ("ACS oracle", acs_oracle),
        ("MAGE properties", mage_properties),
        ("spectral checks", spectral_checks),
        ("gradient check", gradient_check),
        ("closed-form losses", closed_form_losses),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("determinism", determinism),
        ("scalability", scalability),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", k + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {why}", k + 1);
            }
        }
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
