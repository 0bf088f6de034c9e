//! `modfill`: build the item graph, mask features, retrieve subgraphs, train
//! the completion model, complete missing modalities and evaluate.

mod artifacts;
mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use modfill::eval::{eval_queries, evaluate_model, generate_synthetic, run_synthetic, SyntheticSpec};
use modfill::modality::{apply_masking, ModalityMask, ModalityStore, Observation};
use modfill::model::{complete, train, write_checkpoint, TrainOutcome, TrainingData};
use modfill::retrieval::{retrieve, Retrieval};
use modfill::seed::{derive_seed, Stage};
use rayon::prelude::*;
use serde_json::json;

use artifacts::{
    load_graph_and_store, load_mask, load_model, load_shape_source, project_interactions, record_manifest,
    sha256_bytes, write_text, InputHashes, GRAPH_FILE, MASK_FILE, MODEL_FILE,
};
use config::{CommonArgs, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "modfill", version, about = "Graph-retrieval modality completion pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Project interactions onto the item graph and write the graph cache.
    BuildGraph(CommonArgs),
    /// Hide feature slots at the configured missing rate.
    Mask(CommonArgs),
    /// Retrieve anchors and refined subgraphs for hidden slots.
    Retrieve(CommonArgs),
    /// Train the completion model on re-masked observed slots.
    Train(CommonArgs),
    /// Reconstruct every missing modality with a trained model.
    Complete(CommonArgs),
    /// Relevance comparison and completion metrics; `--synthetic` runs end to end.
    Evaluate(CommonArgs),
    /// Time retrieval on a 10,000-item synthetic graph.
    Bench(CommonArgs),
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::BuildGraph(a) => ("build-graph", a),
        Command::Mask(a) => ("mask", a),
        Command::Retrieve(a) => ("retrieve", a),
        Command::Train(a) => ("train", a),
        Command::Complete(a) => ("complete", a),
        Command::Evaluate(a) => ("evaluate", a),
        Command::Bench(a) => ("bench", a),
    };
    let cfg = args.resolve()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .context("starting worker pool")?;
    let dir = cfg.out_dir()?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    match name {
        "build-graph" => cmd_build_graph(&cfg),
        "mask" => cmd_mask(&cfg),
        "retrieve" => cmd_retrieve(&cfg),
        "train" => cmd_train(&cfg),
        "complete" => cmd_complete(&cfg),
        "evaluate" => cmd_evaluate(&cfg),
        _ => cmd_bench(&cfg),
    }
}

fn cmd_build_graph(cfg: &RunConfig) -> Result<()> {
    let Some(path) = &cfg.interactions else {
        bail!("--interactions <tsv> is required");
    };
    if !path.is_file() {
        bail!("interactions file {} does not exist", path.display());
    }
    let (graph, item_ids) = project_interactions(path, cfg.min_degree)?;
    let dir = cfg.out_dir()?;
    graph.save(&dir.join(GRAPH_FILE))?;
    let mut ids = String::from("index,item_id\n");
    for (i, id) in item_ids.iter().enumerate() {
        writeln!(ids, "{i},{id}")?;
    }
    write_text(&dir.join("item_ids.csv"), &ids)?;
    let mut hashes = InputHashes::default();
    hashes.add_file("interactions", path)?;
    record_manifest(cfg, "build-graph", hashes, &[GRAPH_FILE, "item_ids.csv"], &[])?;
    println!("N={} E={}", graph.n(), graph.edge_count());
    Ok(())
}

fn cmd_mask(cfg: &RunConfig) -> Result<()> {
    let mut hashes = InputHashes::default();
    let store = load_shape_source(cfg, &mut hashes)?;
    let mask = apply_masking(
        store.n_items(),
        store.n_modalities(),
        cfg.masking.rate,
        derive_seed(cfg.seed, Stage::Mask),
    )?;
    mask.save_csv(&cfg.out_dir()?.join(MASK_FILE))?;
    record_manifest(cfg, "mask", hashes, &[MASK_FILE], &[])?;
    println!("{}", mask_summary(&mask, &store));
    Ok(())
}

fn mask_summary(mask: &ModalityMask, store: &ModalityStore) -> String {
    let full = mask.full_items().len();
    let mut out = format!(
        "items={} full={} partial={} masked_slots={}",
        mask.n_items(),
        full,
        mask.n_items() - full,
        mask.masked_slots()
    );
    for m in 0..store.n_modalities() {
        let missing = (0..mask.n_items()).filter(|&i| !mask.is_observed(i, m)).count();
        let _ = write!(out, " missing[{}]={}", store.name(m), missing);
    }
    out
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

fn cmd_retrieve(cfg: &RunConfig) -> Result<()> {
    let mut hashes = InputHashes::default();
    let (graph, store) = load_graph_and_store(cfg, &mut hashes)?;
    let mask = load_mask(cfg, &store, &mut hashes)?;
    let queries = eval_queries(&mask, cfg.sample, cfg.seed);
    let run = |&(i, _): &(usize, usize)| retrieve(&graph, &store, &mask, i, &cfg.retrieval);
    let found: Vec<Retrieval> = if cfg.parallel() {
        queries.par_iter().map(run).collect::<modfill::Result<_>>()?
    } else {
        queries.iter().map(run).collect::<modfill::Result<_>>()?
    };
    let mut csv = String::from("query_id,modality,anchor_ids,subgraph_ids,phi\n");
    for (&(i, m), r) in queries.iter().zip(&found) {
        let phi = r.subgraph().phi.map_or(String::new(), |p| p.to_string());
        writeln!(
            csv,
            "{i},{m},{},{},{phi}",
            join_ids(&r.anchors.anchors),
            join_ids(&r.subgraph().nodes)
        )?;
    }
    write_text(&cfg.out_dir()?.join("retrieval.csv"), &csv)?;
    record_manifest(cfg, "retrieve", hashes, &["retrieval.csv"], &[])?;
    println!("queries={}", queries.len());
    Ok(())
}

fn write_model(cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    let dir = cfg.out_dir()?;
    let mut w = BufWriter::new(fs::File::create(dir.join(MODEL_FILE))?);
    write_checkpoint(&outcome.model, &mut w)?;
    drop(w);
    write_text(&dir.join("train_log.csv"), &outcome.log_csv())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let mut hashes = InputHashes::default();
    let (graph, store) = load_graph_and_store(cfg, &mut hashes)?;
    let mask = load_mask(cfg, &store, &mut hashes)?;
    let tc = cfg.train_config();
    let data = TrainingData::build(&graph, &store, &mask, &cfg.retrieval, &tc)?;
    let outcome = train(&data, &tc, cfg.parallel())?;
    write_model(cfg, &outcome)?;
    record_manifest(cfg, "train", hashes, &[MODEL_FILE, "train_log.csv"], &[])?;
    let first = outcome.log.first().map_or(f64::NAN, |e| e.recon);
    let last = outcome.log.last().map_or(f64::NAN, |e| e.recon);
    println!(
        "samples={} epochs={} best_epoch={} recon_first={first:.4} recon_last={last:.4}",
        data.samples().len(),
        outcome.log.len(),
        outcome.best_epoch
    );
    Ok(())
}

fn cmd_complete(cfg: &RunConfig) -> Result<()> {
    let mut hashes = InputHashes::default();
    let (graph, store) = load_graph_and_store(cfg, &mut hashes)?;
    let mask = load_mask(cfg, &store, &mut hashes)?;
    let model = load_model(cfg, &store, &mut hashes)?;
    let mut items: Vec<usize> = eval_queries(&mask, cfg.sample, cfg.seed).into_iter().map(|q| q.0).collect();
    items.dedup();
    let run = |&i: &usize| complete(i, &mask, &store, &graph, &model, &cfg.retrieval);
    let results = if cfg.parallel() {
        items.par_iter().map(run).collect::<modfill::Result<Vec<_>>>()?
    } else {
        items.iter().map(run).collect::<modfill::Result<Vec<_>>>()?
    };
    let mut csv = String::from("item_id,modality,values\n");
    let mut slots = 0;
    for r in &results {
        for (m, v) in &r.vectors {
            let values: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(csv, "{},{},{}", r.item, store.name(*m), values.join(";"))?;
            slots += 1;
        }
    }
    write_text(&cfg.out_dir()?.join("completions.csv"), &csv)?;
    record_manifest(cfg, "complete", hashes, &["completions.csv"], &[])?;
    println!("items={} slots={}", results.len(), slots);
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.out_dir()?;
    let mut hashes = InputHashes::default();
    let report = if cfg.synthetic {
        let mut eval_cfg = cfg.eval.clone();
        eval_cfg.train = cfg.train_config();
        hashes.add_value("synthetic", sha256_bytes(serde_json::to_string(&eval_cfg.synthetic)?.as_bytes()));
        let run = run_synthetic(&eval_cfg, cfg.parallel())?;
        write_model(cfg, &run.training)?;
        run.report
    } else {
        let (graph, store) = load_graph_and_store(cfg, &mut hashes)?;
        let mask = load_mask(cfg, &store, &mut hashes)?;
        let model = load_model(cfg, &store, &mut hashes)?;
        let queries = eval_queries(&mask, cfg.sample, cfg.seed);
        evaluate_model(
            &graph,
            &store,
            &mask,
            &model,
            &cfg.retrieval,
            &queries,
            serde_json::to_value(cfg)?,
            cfg.parallel(),
        )?
    };
    let mut doc = serde_json::to_value(&report)?;
    let text = serde_json::to_string_pretty(&doc)?;
    write_text(&dir.join("eval_report.json"), &text)?;
    write_text(&dir.join("eval_relevance.csv"), &report.relevance_csv())?;
    doc.as_object_mut().expect("report is an object").remove("timings");
    let stable = sha256_bytes(serde_json::to_string_pretty(&doc)?.as_bytes());
    let mut outputs = vec!["eval_relevance.csv"];
    if cfg.synthetic {
        outputs.extend([MODEL_FILE, "train_log.csv"]);
    }
    record_manifest(cfg, "evaluate", hashes, &outputs, &[("eval_report.json#without-timings", stable)])?;

    let rel = &report.relevance;
    println!(
        "relevance: queries={} neighbor_mean={:.4} retrieved_mean={:.4}",
        rel.queries, rel.neighbor_mean, rel.retrieved_mean
    );
    for (name, m) in &report.completion.methods {
        println!("completion[{name}]: mse={:.4} mean_cosine={:.4} slots={}", m.mse, m.mean_cosine, m.slots);
    }
    Ok(())
}

fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let spec = SyntheticSpec {
        seed: cfg.eval.synthetic.seed,
        ..SyntheticSpec::bench()
    };
    let start = Instant::now();
    let data = generate_synthetic(&spec)?;
    let generate_secs = start.elapsed().as_secs_f64();
    let mask = apply_masking(
        data.store.n_items(),
        data.store.n_modalities(),
        cfg.masking.rate,
        derive_seed(cfg.seed, Stage::Mask),
    )?;
    let queries = eval_queries(&mask, Some(cfg.sample.unwrap_or(1000)), cfg.seed);
    let start = Instant::now();
    let mut nodes = 0usize;
    for &(i, _) in &queries {
        nodes += retrieve(&data.graph, &data.store, &mask, i, &cfg.retrieval)?.subgraph().nodes.len();
    }
    let retrieval_secs = start.elapsed().as_secs_f64();
    let report = json!({
        "n_items": data.graph.n(),
        "edges": data.graph.edge_count(),
        "queries": queries.len(),
        "k": cfg.retrieval.k,
        "t": cfg.retrieval.t,
        "mean_subgraph_size": nodes as f64 / queries.len().max(1) as f64,
        "generate_seconds": generate_secs,
        "retrieval_seconds": retrieval_secs,
    });
    write_text(&cfg.out_dir()?.join("bench.json"), &serde_json::to_string_pretty(&report)?)?;
    record_manifest(cfg, "bench", InputHashes::default(), &[], &[])?;
    println!(
        "items={} edges={} queries={} retrieval_seconds={retrieval_secs:.3}",
        data.graph.n(),
        data.graph.edge_count(),
        queries.len()
    );
    Ok(())
}
