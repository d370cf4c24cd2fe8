//! Search, derive, evaluate: the unit of work behind the CLI and the sweep
//! harnesses.

use std::fs;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::genotype::{derive_genotype, Genotype, GenotypeMeta};
use crate::standalone::{evaluate_genotype, EvalReport};
use crate::supernet::AlphaTable;
use crate::train::{run_search, EpochSummary, SearchOutcome};

/// Derived genotype with metadata pointing back at the search.
pub fn genotype_from_search(cfg: &ExperimentConfig, alpha: &AlphaTable) -> Result<Genotype> {
    let mut g = derive_genotype(alpha, &cfg.search_space()?)?;
    g.meta = Some(GenotypeMeta {
        source_seed: cfg.seed,
        r: cfg.drop.r,
        config_hash: cfg.hash_hex(),
    });
    Ok(g)
}

/// Runs the search and derives the genotype; with `out`, also writes
/// `config.json` and `genotype.json` beside the search outputs.
pub fn search_and_derive(
    cfg: &ExperimentConfig,
    split: &Split,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&EpochSummary),
) -> Result<(SearchOutcome, Genotype)> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        fs::write(&path, cfg.to_json()?).map_err(|e| Error::io(&path, e))?;
    }
    let outcome = run_search(cfg, &split.train, out, progress)?;
    let genotype = genotype_from_search(cfg, &outcome.net.alpha_table())?;
    if let Some(dir) = out {
        genotype.save(&dir.join("genotype.json"))?;
    }
    Ok((outcome, genotype))
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub genotype: Genotype,
    pub alpha: AlphaTable,
    /// Mean loss and accuracy over the last search epoch.
    pub search_loss: f64,
    pub search_acc: f64,
    /// Largest single-step change of a dropped op's probability.
    pub max_p_drift: f64,
    pub eval: EvalReport,
}

/// Loads the data for `cfg.seed`, searches, derives, and trains the derived
/// network once.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunSummary> {
    cfg.validate()?;
    let split = cfg.data.load(cfg.seed)?;
    let (outcome, genotype) = search_and_derive(cfg, &split, out, &mut |_| {})?;
    let space = cfg.search_space()?;
    let eval = evaluate_genotype(&genotype, &space, &split, &cfg.eval, cfg.seed)?;
    if let Some(dir) = out {
        let path = dir.join("eval.json");
        fs::write(&path, serde_json::to_string_pretty(&eval)?).map_err(|e| Error::io(&path, e))?;
    }
    let last_epoch = outcome.history.last().map_or(0, |h| h.epoch);
    let tail: Vec<_> = outcome
        .history
        .iter()
        .filter(|h| h.epoch == last_epoch)
        .collect();
    let n = tail.len().max(1) as f64;
    Ok(RunSummary {
        alpha: outcome.net.alpha_table(),
        search_loss: tail.iter().map(|h| h.loss).sum::<f64>() / n,
        search_acc: tail.iter().map(|h| h.acc).sum::<f64>() / n,
        max_p_drift: outcome
            .history
            .iter()
            .map(|h| h.p_drift)
            .fold(0.0, f64::max),
        genotype,
        eval,
    })
}
