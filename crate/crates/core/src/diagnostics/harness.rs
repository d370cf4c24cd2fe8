use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::{mean_std, pearson};
use crate::autodiff::softmax;
use crate::config::ExperimentConfig;
use crate::data::Split;
use crate::drop::{drop_groups, regime_of, DropConfig};
use crate::error::{Error, Result};
use crate::experiment::{run_experiment, RunSummary};
use crate::genotype::{random_genotype, Genotype};
use crate::report::CsvSink;
use crate::rng::{stream, Purpose};
use crate::space::{OpGroup, SearchSpace};
use crate::standalone::evaluate_genotype;
use crate::supernet::AlphaTable;
use crate::train::Ablation;

/// Runs `f` over `items` on `workers` threads, keeping input order.
fn par_map<T: Sync, R: Send>(
    workers: usize,
    items: &[T],
    f: impl Fn(&T) -> R + Sync,
) -> Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(&f).collect()))
}

fn fmt_rate(r: f64) -> String {
    format!("{r:e}")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

/// One search + derive + eval run inside a harness.
#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub label: String,
    pub r: f64,
    pub r_p: Option<f64>,
    pub r_np: Option<f64>,
    pub seed: u64,
    pub p_d_p: f64,
    pub p_d_np: f64,
    pub regime: String,
    pub search_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub best_acc: Option<f64>,
    pub max_p_drift: Option<f64>,
    pub genotype: Option<String>,
    pub error: Option<String>,
}

fn group_probs(cfg: &ExperimentConfig) -> Result<(f64, f64)> {
    let space = cfg.search_space()?;
    let groups = drop_groups(&space, &cfg.drop, cfg.train.ablation.grouping)?;
    if groups.len() == 1 {
        return Ok((groups[0].p_d, groups[0].p_d));
    }
    let p = space.group_indices(OpGroup::Parameterized);
    let find = |first: usize| {
        groups
            .iter()
            .find(|g| g.ops.first() == Some(&first))
            .map_or(0.0, |g| g.p_d)
    };
    let np_first = space.group_indices(OpGroup::NonParameterized)[0];
    Ok((find(p[0]), find(np_first)))
}

fn record(label: String, cfg: &ExperimentConfig, result: Result<RunSummary>) -> RunRecord {
    let (p_d_p, p_d_np) = group_probs(cfg).unwrap_or((f64::NAN, f64::NAN));
    let mut rec = RunRecord {
        label,
        r: cfg.drop.r,
        r_p: cfg.drop.r_p,
        r_np: cfg.drop.r_np,
        seed: cfg.seed,
        p_d_p,
        p_d_np,
        regime: regime_of(p_d_p).to_string(),
        search_acc: None,
        test_acc: None,
        best_acc: None,
        max_p_drift: None,
        genotype: None,
        error: None,
    };
    match result {
        Ok(s) => {
            rec.search_acc = Some(s.search_acc);
            rec.test_acc = Some(s.eval.final_acc);
            rec.best_acc = Some(s.eval.best_acc);
            rec.max_p_drift = Some(s.max_p_drift);
            rec.genotype = serde_json::to_string(&s.genotype).ok();
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

fn run_jobs(
    jobs: Vec<(String, ExperimentConfig)>,
    out: Option<&Path>,
    workers: usize,
) -> Result<Vec<RunRecord>> {
    let out: Option<PathBuf> = out.map(|p| p.join("runs"));
    par_map(workers, &jobs, |(label, cfg)| {
        let dir = out.as_ref().map(|o| o.join(label));
        record(label.clone(), cfg, run_experiment(cfg, dir.as_deref()))
    })
}

const RUN_HEADER: [&str; 14] = [
    "label",
    "r",
    "r_p",
    "r_np",
    "seed",
    "p_d_p",
    "p_d_np",
    "regime",
    "search_acc",
    "test_acc",
    "best_acc",
    "max_p_drift",
    "genotype",
    "error",
];

fn write_runs(path: &Path, runs: &[RunRecord]) -> Result<()> {
    let mut sink = CsvSink::open(path, "dropnas-runs/1", &RUN_HEADER)?;
    for r in runs {
        sink.row([
            r.label.clone(),
            fmt_rate(r.r),
            r.r_p.map(fmt_rate).unwrap_or_default(),
            r.r_np.map(fmt_rate).unwrap_or_default(),
            r.seed.to_string(),
            format!("{:.6}", r.p_d_p),
            format!("{:.6}", r.p_d_np),
            r.regime.clone(),
            opt(r.search_acc),
            opt(r.test_acc),
            opt(r.best_acc),
            r.max_p_drift
                .map(|v| format!("{v:.3e}"))
                .unwrap_or_default(),
            r.genotype.clone().unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    sink.flush()
}

/// Mean and spread of the successful runs' final test accuracy.
pub fn summarize(runs: &[&RunRecord]) -> (f64, Option<f64>, usize, usize) {
    let accs: Vec<f64> = runs.iter().filter_map(|r| r.test_acc).collect();
    let (mean, std) = mean_std(&accs);
    (mean, std, accs.len(), runs.len() - accs.len())
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub r: f64,
    pub p_d: f64,
    pub regime: String,
    pub mean_acc: f64,
    pub std_acc: Option<f64>,
    pub seeds_used: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub runs: Vec<RunRecord>,
}

impl SweepReport {
    /// `sweep.csv` (one row per rate) and `sweep_runs.csv` (one per run).
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut sink = CsvSink::open(
            &dir.join("sweep.csv"),
            "dropnas-sweep/1",
            &[
                "r",
                "p_d",
                "regime",
                "mean_acc",
                "std_acc",
                "seeds_used",
                "failures",
            ],
        )?;
        for row in &self.rows {
            sink.row([
                fmt_rate(row.r),
                format!("{:.6}", row.p_d),
                row.regime.clone(),
                format!("{:.6}", row.mean_acc),
                opt(row.std_acc),
                row.seeds_used.to_string(),
                row.failures.to_string(),
            ])?;
        }
        sink.flush()?;
        write_runs(&dir.join("sweep_runs.csv"), &self.runs)
    }
}

/// Full search + derive + eval for every (rate, seed). Failed runs are
/// recorded and the sweep carries on.
pub fn sweep_drop_rate(
    cfg: &ExperimentConfig,
    rates: &[f64],
    seeds: &[u64],
    out: Option<&Path>,
    workers: usize,
) -> Result<SweepReport> {
    if rates.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one rate and one seed".into(),
        ));
    }
    let mut jobs = Vec::new();
    for &r in rates {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.drop = DropConfig {
                r,
                r_p: None,
                r_np: None,
                ..cfg.drop.clone()
            };
            c.seed = seed;
            c.drop.validate()?;
            jobs.push((format!("r{}-s{seed}", fmt_rate(r)), c));
        }
    }
    let runs = run_jobs(jobs, out, workers)?;
    let rows = rates
        .iter()
        .map(|&r| {
            let group: Vec<&RunRecord> = runs.iter().filter(|x| x.r == r).collect();
            let (mean_acc, std_acc, seeds_used, failures) = summarize(&group);
            SweepRow {
                r,
                p_d: group[0].p_d_p,
                regime: group[0].regime.clone(),
                mean_acc,
                std_acc,
                seeds_used,
                failures,
            }
        })
        .collect();
    let report = SweepReport { rows, runs };
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct GridCell {
    pub r_p: f64,
    pub r_np: f64,
    /// Both groups share the same rate.
    pub diagonal: bool,
    pub mean_acc: f64,
    pub std_acc: Option<f64>,
    pub seeds_used: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GridReport {
    pub rates_p: Vec<f64>,
    pub rates_np: Vec<f64>,
    pub cells: Vec<GridCell>,
    pub runs: Vec<RunRecord>,
}

impl GridReport {
    /// `grid.csv` (long form), `grid_matrix.csv` (rows r_p, columns r_np,
    /// mean accuracy; diagonal cells marked with `*`), `grid_runs.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut sink = CsvSink::open(
            &dir.join("grid.csv"),
            "dropnas-grid/1",
            &[
                "r_p",
                "r_np",
                "diagonal",
                "mean_acc",
                "std_acc",
                "seeds_used",
                "failures",
            ],
        )?;
        for c in &self.cells {
            sink.row([
                fmt_rate(c.r_p),
                fmt_rate(c.r_np),
                c.diagonal.to_string(),
                format!("{:.6}", c.mean_acc),
                opt(c.std_acc),
                c.seeds_used.to_string(),
                c.failures.to_string(),
            ])?;
        }
        sink.flush()?;
        let mut header = vec!["r_p \\ r_np".to_string()];
        header.extend(self.rates_np.iter().map(|&r| fmt_rate(r)));
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut matrix = CsvSink::open(
            &dir.join("grid_matrix.csv"),
            "dropnas-grid-matrix/1",
            &header_refs,
        )?;
        for &rp in &self.rates_p {
            let mut row = vec![fmt_rate(rp)];
            for &rnp in &self.rates_np {
                let cell = self
                    .cells
                    .iter()
                    .find(|c| c.r_p == rp && c.r_np == rnp)
                    .expect("cell per pair");
                let mark = if cell.diagonal { "*" } else { "" };
                row.push(format!("{:.4}{mark}", cell.mean_acc));
            }
            matrix.row(row)?;
        }
        matrix.flush()?;
        write_runs(&dir.join("grid_runs.csv"), &self.runs)
    }
}

/// Full search + derive + eval for every (r_p, r_np, seed) combination.
pub fn group_rate_grid(
    cfg: &ExperimentConfig,
    rates_p: &[f64],
    rates_np: &[f64],
    seeds: &[u64],
    out: Option<&Path>,
    workers: usize,
) -> Result<GridReport> {
    if rates_p.is_empty() || rates_np.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "grid needs non-empty rate lists and seeds".into(),
        ));
    }
    let mut jobs = Vec::new();
    for &rp in rates_p {
        for &rnp in rates_np {
            for &seed in seeds {
                let mut c = cfg.clone();
                c.drop.r_p = Some(rp);
                c.drop.r_np = Some(rnp);
                c.seed = seed;
                c.drop.validate()?;
                jobs.push((
                    format!("rp{}-rnp{}-s{seed}", fmt_rate(rp), fmt_rate(rnp)),
                    c,
                ));
            }
        }
    }
    let runs = run_jobs(jobs, out, workers)?;
    let mut cells = Vec::new();
    for &rp in rates_p {
        for &rnp in rates_np {
            let group: Vec<&RunRecord> = runs
                .iter()
                .filter(|x| x.r_p == Some(rp) && x.r_np == Some(rnp))
                .collect();
            let (mean_acc, std_acc, seeds_used, failures) = summarize(&group);
            cells.push(GridCell {
                r_p: rp,
                r_np: rnp,
                diagonal: rp == rnp,
                mean_acc,
                std_acc,
                seeds_used,
                failures,
            });
        }
    }
    let report = GridReport {
        rates_p: rates_p.to_vec(),
        rates_np: rates_np.to_vec(),
        cells,
        runs,
    };
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}

pub const ABLATION_VARIANTS: [(&str, Ablation); 4] = [
    (
        "full",
        Ablation {
            alpha_adjust: true,
            partial_decay: true,
            grouping: true,
        },
    ),
    (
        "no_alpha_adjust",
        Ablation {
            alpha_adjust: false,
            partial_decay: true,
            grouping: true,
        },
    ),
    (
        "no_partial_decay",
        Ablation {
            alpha_adjust: true,
            partial_decay: false,
            grouping: true,
        },
    ),
    (
        "no_grouping",
        Ablation {
            alpha_adjust: true,
            partial_decay: true,
            grouping: false,
        },
    ),
];

/// Dropped-op probabilities count as preserved when no step moved one by
/// more than this.
pub const P_PRESERVED_TOL: f64 = 1e-12;

#[derive(Clone, Debug, Serialize)]
pub struct AblationRun {
    pub variant: String,
    pub ablation: Ablation,
    pub run: RunRecord,
    /// Whether every dropped op kept its probability through every step.
    pub p_preserved: Option<bool>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut sink = CsvSink::open(
            &dir.join("ablation.csv"),
            "dropnas-ablation/1",
            &[
                "variant",
                "alpha_adjust",
                "partial_decay",
                "grouping",
                "test_acc",
                "best_acc",
                "max_p_drift",
                "p_preserved",
                "error",
            ],
        )?;
        for a in &self.runs {
            sink.row([
                a.variant.clone(),
                a.ablation.alpha_adjust.to_string(),
                a.ablation.partial_decay.to_string(),
                a.ablation.grouping.to_string(),
                opt(a.run.test_acc),
                opt(a.run.best_acc),
                a.run
                    .max_p_drift
                    .map(|v| format!("{v:.3e}"))
                    .unwrap_or_default(),
                a.p_preserved.map(|b| b.to_string()).unwrap_or_default(),
                a.run.error.clone().unwrap_or_default(),
            ])?;
        }
        sink.flush()
    }
}

/// The four component toggles (full method, then each component removed),
/// each as a full search + derive + eval run.
pub fn ablate(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    workers: usize,
) -> Result<AblationReport> {
    let jobs: Vec<(String, ExperimentConfig)> = ABLATION_VARIANTS
        .iter()
        .map(|(name, ab)| {
            let mut c = cfg.clone();
            c.train.ablation = *ab;
            (name.to_string(), c)
        })
        .collect();
    let runs = run_jobs(jobs, out, workers)?;
    let report = AblationReport {
        runs: runs
            .into_iter()
            .zip(ABLATION_VARIANTS)
            .map(|(run, (name, ablation))| AblationRun {
                variant: name.to_string(),
                ablation,
                p_preserved: run.max_p_drift.map(|d| d <= P_PRESERVED_TOL),
                run,
            })
            .collect(),
    };
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct CorrelationRow {
    pub op: String,
    pub alpha: f64,
    pub p: f64,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CorrelationReport {
    pub kind: String,
    pub node: usize,
    pub pred: usize,
    pub rows: Vec<CorrelationRow>,
    pub coefficient: Option<f64>,
    pub error: Option<String>,
}

impl CorrelationReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut sink = CsvSink::open(
            &dir.join("correlation.csv"),
            "dropnas-correlation/1",
            &[
                "kind", "node", "pred", "op", "alpha", "p", "accuracy", "error",
            ],
        )?;
        for r in &self.rows {
            sink.row([
                self.kind.clone(),
                self.node.to_string(),
                self.pred.to_string(),
                r.op.clone(),
                format!("{:.17e}", r.alpha),
                format!("{:.17e}", r.p),
                opt(r.accuracy),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        sink.flush()
    }
}

/// Replaces the op of one gene of `base` by every non-zero op in turn,
/// trains each variant, and correlates the alpha of the substituted op on
/// that edge with the variant's accuracy (mean over `cfg.diagnostics.correlate.seeds`).
///
/// `coefficient` is `None` (with `error` set) when fewer than three variants
/// trained or the values have no spread.
pub fn alpha_accuracy_correlation(
    cfg: &ExperimentConfig,
    split: &Split,
    base: &Genotype,
    alpha: &AlphaTable,
    workers: usize,
) -> Result<CorrelationReport> {
    let cc = &cfg.diagnostics.correlate;
    let space = cfg.search_space()?;
    let gene = base
        .cell(cc.kind)
        .get(cc.gene)
        .ok_or_else(|| Error::Config(format!("base genotype has no {} gene {}", cc.kind, cc.gene)))?
        .clone();
    let edges = alpha
        .edges
        .get(&cc.kind)
        .ok_or_else(|| Error::Config(format!("alpha table has no {} cells", cc.kind)))?;
    let e = edges
        .iter()
        .position(|x| x.from == gene.pred && x.to == gene.node)
        .ok_or_else(|| Error::Config("gene edge missing from alpha table".into()))?;
    let row = &alpha.alpha[&cc.kind][e];
    let probs = softmax(row);
    let ops = space.non_zero_indices();
    let jobs: Vec<(usize, Genotype)> = ops
        .iter()
        .map(|&o| {
            let mut g = base.clone();
            let slot = g
                .cell(cc.kind)
                .iter()
                .position(|x| x.node == gene.node && x.pred == gene.pred)
                .expect("gene exists");
            match cc.kind {
                crate::space::CellKind::Normal => g.normal[slot].op = space.op(o).name.clone(),
                crate::space::CellKind::Reduction => g.reduce[slot].op = space.op(o).name.clone(),
            }
            (o, g)
        })
        .collect();
    let results = par_map(workers, &jobs, |(_, g)| -> Result<f64> {
        let accs = cc
            .seeds
            .iter()
            .map(|&s| evaluate_genotype(g, &space, split, &cfg.eval, s).map(|r| r.final_acc))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean_std(&accs).0)
    })?;
    let rows: Vec<CorrelationRow> = jobs
        .iter()
        .zip(results)
        .map(|((o, _), res)| CorrelationRow {
            op: space.op(*o).name.clone(),
            alpha: row[*o],
            p: probs[*o],
            accuracy: res.as_ref().ok().copied(),
            error: res.err().map(|e| e.to_string()),
        })
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter_map(|r| r.accuracy.map(|a| (r.alpha, a)))
        .unzip();
    let (coefficient, error) = match pearson(&xs, &ys) {
        Ok(c) => (Some(c), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(CorrelationReport {
        kind: cc.kind.label().to_string(),
        node: gene.node,
        pred: gene.pred,
        rows,
        coefficient,
        error,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareReport {
    pub derived: Vec<f64>,
    pub derived_mean: f64,
    pub random: Vec<f64>,
    pub random_mean: f64,
    pub random_genotypes: Vec<Genotype>,
    /// Soft check: derived mean at least the random mean.
    pub derived_not_worse: bool,
}

/// Trains the derived genotype once per compare seed and as many uniformly
/// random genotypes, each with its own seed.
pub fn compare_with_random(
    cfg: &ExperimentConfig,
    split: &Split,
    genotype: &Genotype,
    space: &SearchSpace,
    workers: usize,
) -> Result<CompareReport> {
    let cc = &cfg.diagnostics.compare;
    let kinds: Vec<_> = [
        crate::space::CellKind::Normal,
        crate::space::CellKind::Reduction,
    ]
    .into_iter()
    .filter(|&k| !genotype.cell(k).is_empty())
    .collect();
    let randoms: Vec<Genotype> = (0..cc.random)
        .map(|i| {
            random_genotype(
                space,
                genotype.nodes(),
                &kinds,
                &mut stream(cfg.seed, Purpose::Genotype, i as u64, 0),
            )
        })
        .collect();
    let mut jobs: Vec<(Genotype, u64)> = cc.seeds.iter().map(|&s| (genotype.clone(), s)).collect();
    jobs.extend(
        randoms
            .iter()
            .zip(cc.seeds.iter().cycle())
            .map(|(g, &s)| (g.clone(), s)),
    );
    let accs = par_map(workers, &jobs, |(g, s)| {
        evaluate_genotype(g, space, split, &cfg.eval, *s).map(|r| r.final_acc)
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let (derived, random) = accs.split_at(cc.seeds.len());
    let derived_mean = mean_std(derived).0;
    let random_mean = if random.is_empty() {
        f64::NAN
    } else {
        mean_std(random).0
    };
    Ok(CompareReport {
        derived: derived.to_vec(),
        derived_mean,
        random: random.to_vec(),
        random_mean,
        random_genotypes: randoms,
        derived_not_worse: random.is_empty() || derived_mean >= random_mean,
    })
}
