use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dropnas::checkpoint::Checkpoint;
use dropnas::config::ExperimentConfig;
use dropnas::data::{DatasetKind, Split};
use dropnas::diagnostics::{
    ablate, alpha_accuracy_correlation, cluster_edge_features, compare_with_random,
    group_rate_grid, sweep_drop_rate,
};
use dropnas::experiment::{genotype_from_search, search_and_derive};
use dropnas::genotype::{random_genotype, Genotype};
use dropnas::rng::{stream, Purpose};
use dropnas::standalone::evaluate_genotype;
use dropnas::supernet::{EdgeRef, Supernet};
use dropnas::train::{run_search, EpochSummary};
use dropnas::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "dropnas",
    version,
    about = "Differentiable architecture search with grouped operation dropout"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file; missing sections take the preset's values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset when no config file is given.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Dotted-path override, e.g. `drop.r=3e-5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Root directory for run directories [env: DROPNAS_OUT, default: runs].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Records per CIFAR file, or samples per split for synthetic data.
    #[arg(long)]
    subset: Option<usize>,
    /// Worker threads for sweeps, grids, ablations and comparisons.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Search, then derive the genotype.
    Search(Common),
    /// Derive a genotype from a saved supernet checkpoint.
    Derive {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train a genotype stand-alone.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "random")]
        genotype: Option<PathBuf>,
        /// Evaluate a uniformly random genotype instead.
        #[arg(long, conflicts_with = "genotype")]
        random: bool,
        /// Also train random genotypes and compare.
        #[arg(long)]
        compare: bool,
    },
    /// Drop-rate sweep over `diagnostics.sweep`.
    Sweep(Common),
    /// Per-group rate grid over `diagnostics.grid`.
    Grid(Common),
    /// Cluster the op outputs on one supernet edge.
    Cluster {
        #[command(flatten)]
        common: Common,
        /// Trained supernet; searched from scratch when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Correlate one edge's alphas with stand-alone accuracy.
    Correlate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Full method against each component removed.
    Ablate(Common),
}

fn resolve(common: &Common, base: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
    let mut cfg = match (base, &common.config) {
        (_, Some(path)) => ExperimentConfig::load(path)?,
        (Some(cfg), None) => cfg,
        (None, None) => ExperimentConfig::preset(&common.preset)?,
    };
    let mut sets = common.sets.clone();
    if let Some(seed) = common.seed {
        sets.push(format!("seed={seed}"));
    }
    if let Some(n) = common.subset {
        match cfg.data.kind {
            DatasetKind::Cifar10Binary => sets.push(format!("data.subset={n}")),
            _ => {
                sets.push(format!(
                    "data.train_samples={}",
                    cfg.data.train_samples.min(n)
                ));
                sets.push(format!(
                    "data.test_samples={}",
                    cfg.data.test_samples.min(n)
                ));
            }
        }
    }
    cfg = cfg.with_overrides(&sets)?;
    if let Some(out) = &common.out {
        cfg.output = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output
        .clone()
        .or_else(|| std::env::var_os("DROPNAS_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Creates `<root>/<command>-<timestamp>-<hash>`, adding a numeric suffix
/// rather than reusing an existing directory, and writes `config.json`.
fn run_dir(cfg: &ExperimentConfig, command: &str) -> Result<PathBuf> {
    let root = output_root(cfg);
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    let base = format!("{command}-{stamp}-{}", &cfg.hash_hex()[..12]);
    let mut n = 0;
    let dir = loop {
        let name = if n == 0 {
            base.clone()
        } else {
            format!("{base}-{n}")
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => break dir,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    };
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()?).map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let body = serde_json::to_string_pretty(value)?;
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn progress(quiet: bool) -> impl FnMut(&EpochSummary) {
    move |s: &EpochSummary| {
        if !quiet {
            eprintln!(
                "epoch {:>3}/{}  loss {:.4}  acc {:.3}  lr {:.5}  entropy {:.4}",
                s.epoch, s.epochs, s.loss, s.accuracy, s.lr_w, s.mean_entropy
            );
        }
    }
}

fn load_split(cfg: &ExperimentConfig) -> Result<Split> {
    cfg.data.load(cfg.seed)
}

/// Rebuilds the supernet a checkpoint was taken from. The config defaults to
/// the `config.json` beside the checkpoint and must hash to the value stored
/// in it.
fn supernet_from_checkpoint(common: &Common, path: &Path) -> Result<(ExperimentConfig, Supernet)> {
    let ckpt = Checkpoint::load(path)?;
    let beside = path.parent().map(|p| p.join("config.json"));
    let base = match (&common.config, beside) {
        (None, Some(p)) if p.exists() => Some(ExperimentConfig::load(&p)?),
        _ => None,
    };
    let cfg = resolve(common, base)?;
    if cfg.hash() != ckpt.config_hash {
        return Err(Error::Config(format!(
            "checkpoint {} was written under a different config",
            path.display()
        )));
    }
    let space = cfg.search_space()?;
    let mut net = Supernet::new(
        &cfg.net,
        &space,
        cfg.data.channels,
        cfg.data.classes,
        cfg.seed,
    )?;
    ckpt.restore(net.params_mut())?;
    Ok((cfg, net))
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Search(common) => {
            let cfg = resolve(&common, None)?;
            let dir = run_dir(&cfg, "search")?;
            let split = load_split(&cfg)?;
            let (outcome, genotype) =
                search_and_derive(&cfg, &split, Some(&dir), &mut progress(common.quiet))?;
            let last = outcome.history.last();
            Ok(json!({
                "run_dir": dir,
                "config_hash": cfg.hash_hex(),
                "steps": outcome.history.len(),
                "final_loss": last.map(|h| h.loss),
                "genotype": genotype,
            }))
        }
        Command::Derive { common, checkpoint } => {
            let (cfg, net) = supernet_from_checkpoint(&common, &checkpoint)?;
            let dir = run_dir(&cfg, "derive")?;
            let genotype = genotype_from_search(&cfg, &net.alpha_table())?;
            genotype.save(&dir.join("genotype.json"))?;
            Ok(json!({ "run_dir": dir, "genotype": genotype }))
        }
        Command::Eval {
            common,
            genotype,
            random,
            compare,
        } => {
            let cfg = resolve(&common, None)?;
            let space = cfg.search_space()?;
            let genotype = match genotype {
                Some(path) => Genotype::load(&path)?,
                None => {
                    debug_assert!(random);
                    let kinds = Supernet::new(
                        &cfg.net,
                        &space,
                        cfg.data.channels,
                        cfg.data.classes,
                        cfg.seed,
                    )?
                    .kinds();
                    random_genotype(
                        &space,
                        cfg.net.nodes,
                        &kinds,
                        &mut stream(cfg.seed, Purpose::Genotype, 0, 0),
                    )
                }
            };
            let kinds: Vec<_> = [
                dropnas::space::CellKind::Normal,
                dropnas::space::CellKind::Reduction,
            ]
            .into_iter()
            .filter(|&k| !genotype.cell(k).is_empty())
            .collect();
            genotype.validate(&space, &kinds)?;
            let dir = run_dir(&cfg, "eval")?;
            genotype.save(&dir.join("genotype.json"))?;
            let split = load_split(&cfg)?;
            if compare {
                let report = compare_with_random(&cfg, &split, &genotype, &space, common.workers)?;
                write_json(&dir.join("compare.json"), &report)?;
                Ok(json!({
                    "run_dir": dir,
                    "derived_mean": report.derived_mean,
                    "random_mean": report.random_mean,
                    "derived": report.derived,
                    "random": report.random,
                    "derived_not_worse": report.derived_not_worse,
                }))
            } else {
                let report = evaluate_genotype(&genotype, &space, &split, &cfg.eval, cfg.seed)?;
                write_json(&dir.join("eval.json"), &report)?;
                Ok(json!({
                    "run_dir": dir,
                    "final_acc": report.final_acc,
                    "best_acc": report.best_acc,
                    "params": report.params,
                }))
            }
        }
        Command::Sweep(common) => {
            let cfg = resolve(&common, None)?;
            let dir = run_dir(&cfg, "sweep")?;
            let s = &cfg.diagnostics.sweep;
            let report = sweep_drop_rate(&cfg, &s.rates, &s.seeds, Some(&dir), common.workers)?;
            Ok(json!({ "run_dir": dir, "rows": report.rows }))
        }
        Command::Grid(common) => {
            let cfg = resolve(&common, None)?;
            let dir = run_dir(&cfg, "grid")?;
            let g = &cfg.diagnostics.grid;
            let report = group_rate_grid(
                &cfg,
                &g.rates_p,
                &g.rates_np,
                &g.seeds,
                Some(&dir),
                common.workers,
            )?;
            Ok(json!({ "run_dir": dir, "cells": report.cells }))
        }
        Command::Cluster { common, checkpoint } => {
            let (cfg, net, dir) = match &checkpoint {
                Some(path) => {
                    let (cfg, net) = supernet_from_checkpoint(&common, path)?;
                    let dir = run_dir(&cfg, "cluster")?;
                    (cfg, net, dir)
                }
                None => {
                    let cfg = resolve(&common, None)?;
                    let dir = run_dir(&cfg, "cluster")?;
                    let split = load_split(&cfg)?;
                    let net =
                        run_search(&cfg, &split.train, Some(&dir), &mut progress(common.quiet))?
                            .net;
                    (cfg, net, dir)
                }
            };
            let split = load_split(&cfg)?;
            let c = &cfg.diagnostics.cluster;
            let at = EdgeRef {
                cell: c.cell,
                edge: c.edge,
            };
            let report =
                cluster_edge_features(&net, at, &split.train, c, cfg.train.batch_size, cfg.seed)?;
            write_json(&dir.join("cluster.json"), &report)?;
            Ok(json!({
                "run_dir": dir,
                "ops": report.ops,
                "assignment": report.assignment,
                "inertia": report.inertia,
                "warnings": report.warnings,
            }))
        }
        Command::Correlate { common, checkpoint } => {
            let (cfg, dir, alpha, genotype, split) = match &checkpoint {
                Some(path) => {
                    let (cfg, net) = supernet_from_checkpoint(&common, path)?;
                    let dir = run_dir(&cfg, "correlate")?;
                    let alpha = net.alpha_table();
                    let genotype = genotype_from_search(&cfg, &alpha)?;
                    let split = load_split(&cfg)?;
                    (cfg, dir, alpha, genotype, split)
                }
                None => {
                    let cfg = resolve(&common, None)?;
                    let dir = run_dir(&cfg, "correlate")?;
                    let split = load_split(&cfg)?;
                    let (outcome, genotype) =
                        search_and_derive(&cfg, &split, Some(&dir), &mut progress(common.quiet))?;
                    (cfg, dir, outcome.net.alpha_table(), genotype, split)
                }
            };
            let report =
                alpha_accuracy_correlation(&cfg, &split, &genotype, &alpha, common.workers)?;
            report.write(&dir)?;
            write_json(&dir.join("correlation.json"), &report)?;
            Ok(json!({
                "run_dir": dir,
                "coefficient": report.coefficient,
                "error": report.error,
            }))
        }
        Command::Ablate(common) => {
            let cfg = resolve(&common, None)?;
            let dir = run_dir(&cfg, "ablate")?;
            let report = ablate(&cfg, Some(&dir), common.workers)?;
            write_json(&dir.join("ablation.json"), &report)?;
            let runs: Vec<_> = report
                .runs
                .iter()
                .map(|r| {
                    json!({
                        "variant": r.variant,
                        "test_acc": r.run.test_acc,
                        "max_p_drift": r.run.max_p_drift,
                        "p_preserved": r.p_preserved,
                        "error": r.run.error,
                    })
                })
                .collect();
            Ok(json!({ "run_dir": dir, "runs": runs }))
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Shape { .. } => "shape",
        Error::NonFinite { .. } => "non_finite",
        Error::Contract(_) => "contract",
        Error::Format { .. } => "format",
        Error::Io { .. } => "io",
        Error::Serde(_) => "serialization",
        Error::Csv(_) => "csv",
        Error::Undefined(_) => "undefined",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = if e.is_config() { 2 } else { 1 };
            let body =
                json!({ "error": error_kind(&e), "message": e.to_string(), "exit_code": code });
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}
