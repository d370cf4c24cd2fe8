//! Analysis harnesses: op-feature clustering, drop-rate sweeps, per-group
//! rate grids, alpha/accuracy correlation, component ablation, and the
//! derived-vs-random genotype comparison.

mod cluster;
mod harness;
mod kmeans;
mod pca;

use serde::{Deserialize, Serialize};

pub use cluster::{cluster_edge_features, pooled_features, ClusterReport};
pub use harness::{
    ablate, alpha_accuracy_correlation, compare_with_random, group_rate_grid, summarize,
    sweep_drop_rate, AblationReport, AblationRun, CompareReport, CorrelationReport, CorrelationRow,
    GridCell, GridReport, RunRecord, SweepReport, SweepRow, ABLATION_VARIANTS, P_PRESERVED_TOL,
};
pub use kmeans::{kmeans, KMeans};
pub use pca::{pca, symmetric_eigen, Pca};

use crate::error::{Error, Result};
use crate::space::CellKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            // The last two reproduce per-op drop probabilities 0.75 and 0.875
            // for groups of four.
            rates: vec![0.0, 1e-5, 3e-5, 1e-4, 0.75f64.powi(4), 0.875f64.powi(4)],
            seeds: vec![0, 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub rates_p: Vec<f64>,
    pub rates_np: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            rates_p: vec![1e-5, 3e-5, 1e-4],
            rates_np: vec![1e-5, 3e-5, 1e-4],
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub cell: usize,
    pub edge: usize,
    pub samples: usize,
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            cell: 0,
            edge: 0,
            samples: 1000,
            k: 3,
            restarts: 10,
            max_iter: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelateConfig {
    pub kind: CellKind,
    /// Index into the base genotype's genes of `kind`.
    pub gene: usize,
    /// Evaluation seeds averaged per variant.
    pub seeds: Vec<u64>,
}

impl Default for CorrelateConfig {
    fn default() -> Self {
        Self {
            kind: CellKind::Normal,
            gene: 0,
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    /// Evaluation seeds for the derived genotype.
    pub seeds: Vec<u64>,
    /// Number of random genotypes evaluated alongside.
    pub random: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            random: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub sweep: SweepConfig,
    pub grid: GridConfig,
    pub cluster: ClusterConfig,
    pub correlate: CorrelateConfig,
    pub compare: CompareConfig,
}

impl DiagnosticsConfig {
    pub fn smoke() -> Self {
        Self {
            sweep: SweepConfig {
                rates: vec![0.0, 3e-5],
                seeds: vec![0, 1],
            },
            grid: GridConfig {
                rates_p: vec![3e-5],
                rates_np: vec![3e-5],
                seeds: vec![0],
            },
            cluster: ClusterConfig {
                samples: 16,
                ..ClusterConfig::default()
            },
            correlate: CorrelateConfig::default(),
            compare: CompareConfig {
                seeds: vec![0, 1],
                random: 2,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates_ok = |r: &[f64]| r.iter().all(|&r| (0.0..1.0).contains(&r));
        if self.sweep.rates.is_empty() || self.sweep.seeds.is_empty() {
            return Err(Error::Config(
                "diagnostics.sweep needs at least one rate and one seed".into(),
            ));
        }
        if self.grid.rates_p.is_empty()
            || self.grid.rates_np.is_empty()
            || self.grid.seeds.is_empty()
        {
            return Err(Error::Config(
                "diagnostics.grid needs non-empty rate lists and seeds".into(),
            ));
        }
        if !rates_ok(&self.sweep.rates)
            || !rates_ok(&self.grid.rates_p)
            || !rates_ok(&self.grid.rates_np)
        {
            return Err(Error::Config("diagnostics rates must lie in [0, 1)".into()));
        }
        let c = &self.cluster;
        if c.samples == 0 || c.k == 0 || c.restarts == 0 || c.max_iter == 0 {
            return Err(Error::Config(
                "diagnostics.cluster values must be positive".into(),
            ));
        }
        if self.correlate.seeds.is_empty() || self.compare.seeds.is_empty() {
            return Err(Error::Config(
                "diagnostics.correlate/compare need seeds".into(),
            ));
        }
        Ok(())
    }
}

/// Mean and, for two or more values, sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    if values.is_empty() {
        return (f64::NAN, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2)
        .then(|| (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

/// Pearson correlation; undefined for fewer than three pairs or zero
/// variance on either side.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(
            "pearson",
            format!("{} vs {} values", x.len(), y.len()),
        ));
    }
    if x.len() < 3 {
        return Err(Error::Undefined(format!(
            "correlation needs at least 3 pairs, got {}",
            x.len()
        )));
    }
    let (mx, _) = mean_std(x);
    let (my, _) = mean_std(y);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined(
            "correlation undefined: zero variance".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
