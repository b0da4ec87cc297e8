use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nbc_core::data::{generate_synthetic_corpus, Corpus, CrossLabelMap, DataError, SynthConfig};
use nbc_core::harness::{
    evaluate_checkpoint, run, run_sweep, write_outputs, Checkpoint, HarnessError, RunConfig, SweepAxis,
};
use nbc_core::metapath::{
    generate_walks, train_skipgram, write_embeddings, HeteroGraph, MetaPath, MetapathError, SkipgramConfig,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "nbc", version, about = "Author embedding training and retrieval evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-market corpus with its sybil map.
    GenSynth(GenSynth),
    /// Train from a key=value config and write metrics, curve and checkpoint.
    Train(Train),
    /// Re-evaluate a checkpoint on its corpora.
    Eval(Eval),
    /// Train once per value of one config axis.
    Sweep(Sweep),
    /// Learn node embeddings with meta-path walks and skip-gram.
    GraphEmbed(GraphEmbed),
}

#[derive(Args)]
struct GenSynth {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    authors: usize,
    #[arg(long, default_value_t = 2)]
    markets: usize,
    #[arg(long, default_value_t = 40)]
    posts: usize,
    #[arg(long, default_value_t = 0.2)]
    migration: f64,
    #[arg(long, default_value_t = 0.1)]
    late: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else {
                bail!(HarnessError::Config(format!("override {kv:?} is not KEY=VALUE")));
            };
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        cfg.check_paths()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpora to evaluate on; defaults to the checkpoint's data paths.
    #[arg(long, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    cross_map: Option<PathBuf>,
}

#[derive(Args)]
struct Sweep {
    #[command(flatten)]
    config: ConfigArgs,
    /// tau, batch_size or episode_length.
    #[arg(long)]
    axis: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// CSV destination; defaults to `<output_dir>/sweep_<axis>.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GraphEmbed {
    /// Corpus in JSON lines; the graph is built from its posts.
    #[arg(long, conflicts_with = "edges", required_unless_present = "edges")]
    data: Option<PathBuf>,
    /// Edge list file.
    #[arg(long)]
    edges: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 10)]
    walks: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn read_corpora(paths: &[PathBuf]) -> Result<Vec<Corpus>> {
    if paths.is_empty() {
        bail!(HarnessError::Config("no data paths given".into()));
    }
    paths
        .iter()
        .map(|p| Corpus::read_jsonl(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn read_cross(path: Option<&Path>) -> Result<Option<CrossLabelMap>> {
    path.map(|p| CrossLabelMap::read(p).with_context(|| format!("reading {}", p.display())))
        .transpose()
}

fn gen_synth(a: &GenSynth) -> Result<serde_json::Value> {
    let cfg = SynthConfig {
        num_authors: a.authors,
        num_markets: a.markets,
        posts_per_author: a.posts,
        migration_fraction: a.migration,
        late_fraction: a.late,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let data = generate_synthetic_corpus(&cfg)?;
    fs::create_dir_all(&a.out)?;
    let mut files = Vec::new();
    for corpus in &data.markets {
        let name = corpus.market().unwrap_or("market");
        let path = a.out.join(format!("{name}.jsonl"));
        corpus.write_jsonl(&path)?;
        files.push(path.display().to_string());
    }
    let cross = a.out.join("cross.txt");
    data.cross.write(&cross)?;
    Ok(json!({ "markets": files, "cross_map": cross.display().to_string(), "linked_accounts": data.cross.len() }))
}

fn train(a: &Train) -> Result<serde_json::Value> {
    let cfg = a.config.load()?;
    let markets = read_corpora(&cfg.data)?;
    let cross = read_cross(cfg.cross_map.as_deref())?;
    let outcome = match run(&cfg, &markets, cross.as_ref()) {
        Err(HarnessError::Diverged { epoch, last_good }) => {
            fs::create_dir_all(&cfg.output_dir)?;
            last_good.save(&cfg.output_dir.join("last_good_checkpoint.json"))?;
            return Err(HarnessError::Diverged { epoch, last_good }.into());
        }
        r => r?,
    };
    write_outputs(&cfg.output_dir, &outcome)?;
    fs::write(cfg.output_dir.join("config.txt"), cfg.to_kv())?;
    Ok(json!({
        "output_dir": cfg.output_dir.display().to_string(),
        "config_hash": cfg.hash(),
        "metrics": outcome.reports(),
    }))
}

fn eval(a: &Eval) -> Result<serde_json::Value> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let paths = if a.data.is_empty() { ck.config.data.clone() } else { a.data.clone() };
    let markets = read_corpora(&paths)?;
    let cross_path = a.cross_map.clone().or_else(|| ck.config.cross_map.clone());
    let cross = read_cross(cross_path.as_deref())?;
    let evaluations = evaluate_checkpoint(&ck, &markets, cross.as_ref())?;
    let metrics: serde_json::Map<String, serde_json::Value> = evaluations
        .iter()
        .map(|(k, e)| Ok((k.clone(), serde_json::to_value(&e.report)?)))
        .collect::<Result<_>>()?;
    Ok(json!({ "config_hash": ck.config_hash, "epoch": ck.epoch, "metrics": metrics }))
}

fn sweep(a: &Sweep) -> Result<serde_json::Value> {
    let cfg = a.config.load()?;
    let axis: SweepAxis = a.axis.parse().map_err(HarnessError::Config)?;
    let markets = read_corpora(&cfg.data)?;
    let cross = read_cross(cfg.cross_map.as_deref())?;
    let result = run_sweep(&cfg, axis, &a.values, &markets, cross.as_ref())?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(format!("sweep_{}.csv", axis.key())));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&out, result.to_csv())?;
    let cells: Vec<_> = result
        .cells
        .iter()
        .map(|c| json!({ "value": c.value, "mean_mrr": c.mean_mrr(), "error": c.error }))
        .collect();
    Ok(json!({ "csv": out.display().to_string(), "axis": axis.key(), "cells": cells }))
}

fn graph_embed(a: &GraphEmbed) -> Result<serde_json::Value> {
    let graph = match (&a.data, &a.edges) {
        (Some(d), _) => HeteroGraph::from_corpus(&Corpus::read_jsonl(d)?)?,
        (None, Some(e)) => HeteroGraph::read_edge_list(e)?,
        (None, None) => bail!(HarnessError::Config("pass --data or --edges".into())),
    };
    let walks = generate_walks(&graph, &MetaPath::defaults(), a.walks, a.seed)?;
    let model = train_skipgram(
        &walks,
        &SkipgramConfig {
            dim: a.dim,
            epochs: a.epochs,
            seed: a.seed,
            ..SkipgramConfig::default()
        },
    )?;
    write_embeddings(&a.out, &graph, &model)?;
    Ok(json!({
        "out": a.out.display().to_string(),
        "nodes": graph.node_count(),
        "edges": graph.edge_count(),
        "walks": walks.walks.len(),
        "epoch_losses": model.epoch_losses,
    }))
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(h) = cause.downcast_ref::<HarnessError>() {
            return match h {
                HarnessError::Config(_) => "config",
                HarnessError::Diverged { .. } => "diverged",
                HarnessError::Io(_) => "io",
                _ => "data",
            };
        }
        if cause.downcast_ref::<DataError>().is_some() {
            return "data";
        }
        if cause.downcast_ref::<MetapathError>().is_some() {
            return "graph";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "internal"
}

fn emit_error(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            emit_error("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::GraphEmbed(a) => graph_embed(a),
    };
    match result {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            emit_error(error_kind(&e), &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
