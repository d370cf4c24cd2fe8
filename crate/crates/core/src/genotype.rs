//! Discrete architectures derived from alpha.
//!
//! JSON layout (schema version 1):
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "normal": [[2, 0, "sep_conv_3x3"], [2, 1, "skip_connect"], ...],
//!   "reduce": [[2, 0, "max_pool_3x3"], ...],
//!   "meta": {"source_seed": 0, "r": 3e-5, "config_hash": "..."}
//! }
//! ```
//!
//! Each entry is `[node, predecessor, op]` with node ids counted from the
//! two cell inputs (0 and 1); every intermediate node has exactly two entries.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::softmax;
use crate::error::{Error, Result};
use crate::space::{enumerate_edges, CellGraph, CellKind, SearchSpace, CELL_INPUTS};
use crate::supernet::AlphaTable;

pub const GENOTYPE_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, String)", into = "(usize, usize, String)")]
pub struct Gene {
    pub node: usize,
    pub pred: usize,
    pub op: String,
}

impl From<(usize, usize, String)> for Gene {
    fn from((node, pred, op): (usize, usize, String)) -> Self {
        Self { node, pred, op }
    }
}

impl From<Gene> for (usize, usize, String) {
    fn from(g: Gene) -> Self {
        (g.node, g.pred, g.op)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenotypeMeta {
    pub source_seed: u64,
    pub r: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub normal: Vec<Gene>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reduce: Vec<Gene>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<GenotypeMeta>,
}

impl Genotype {
    pub fn cell(&self, kind: CellKind) -> &[Gene] {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduction => &self.reduce,
        }
    }

    fn cell_mut(&mut self, kind: CellKind) -> &mut Vec<Gene> {
        match kind {
            CellKind::Normal => &mut self.normal,
            CellKind::Reduction => &mut self.reduce,
        }
    }

    /// Intermediate nodes per cell, inferred from the genes.
    pub fn nodes(&self) -> usize {
        self.normal
            .iter()
            .chain(&self.reduce)
            .map(|g| g.node + 1 - CELL_INPUTS)
            .max()
            .unwrap_or(0)
    }

    /// Checks two genes per node, distinct earlier predecessors, and known
    /// non-zero ops, for every listed cell kind.
    pub fn validate(&self, space: &SearchSpace, kinds: &[CellKind]) -> Result<()> {
        if self.schema_version != GENOTYPE_SCHEMA {
            return Err(Error::Config(format!(
                "genotype schema {} (expected {GENOTYPE_SCHEMA})",
                self.schema_version
            )));
        }
        let nodes = self.nodes();
        if nodes == 0 {
            return Err(Error::Config("genotype has no nodes".into()));
        }
        for &kind in kinds {
            let genes = self.cell(kind);
            for node in CELL_INPUTS..CELL_INPUTS + nodes {
                let preds: Vec<&Gene> = genes.iter().filter(|g| g.node == node).collect();
                if preds.len() != 2 {
                    return Err(Error::Config(format!(
                        "{kind} node {node} has {} inputs, expected 2",
                        preds.len()
                    )));
                }
                if preds[0].pred == preds[1].pred {
                    return Err(Error::Config(format!(
                        "{kind} node {node} repeats predecessor {}",
                        preds[0].pred
                    )));
                }
                for g in preds {
                    if g.pred >= node {
                        return Err(Error::Config(format!(
                            "{kind} node {node} reads from later node {}",
                            g.pred
                        )));
                    }
                    let op = space.index_of(&g.op).ok_or_else(|| {
                        Error::Config(format!("unknown op {:?} in genotype", g.op))
                    })?;
                    if space.op(op).is_zero() {
                        return Err(Error::Config(format!(
                            "{kind} node {node} uses the zero op"
                        )));
                    }
                }
            }
            if genes.len() != 2 * nodes {
                return Err(Error::Config(format!(
                    "{kind} cell lists {} genes for {nodes} nodes",
                    genes.len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Best non-zero op on an edge and its probability; ties go to the lower
/// op index.
pub fn edge_winner(alpha: &[f64], space: &SearchSpace) -> Option<(usize, f64)> {
    let p = softmax(alpha);
    let mut best: Option<(usize, f64)> = None;
    for o in space.non_zero_indices() {
        if best.is_none_or(|(_, bp)| p[o] > bp) {
            best = Some((o, p[o]));
        }
    }
    best
}

/// Per edge pick the strongest non-zero op, then per node keep the two
/// incoming edges with the largest winner probability (ties to the lower
/// predecessor).
pub fn derive_genotype(alpha: &AlphaTable, space: &SearchSpace) -> Result<Genotype> {
    if !alpha.is_finite() {
        return Err(Error::Config("alpha table has non-finite entries".into()));
    }
    if alpha.ops.len() != space.len()
        || alpha.ops.iter().zip(space.ops()).any(|(a, o)| *a != o.name)
    {
        return Err(Error::Config(
            "alpha table ops differ from the search space".into(),
        ));
    }
    if space.non_zero_indices().is_empty() {
        return Err(Error::Config("search space has no non-zero op".into()));
    }
    let mut g = Genotype {
        schema_version: GENOTYPE_SCHEMA,
        normal: Vec::new(),
        reduce: Vec::new(),
        meta: None,
    };
    for (&kind, edges) in &alpha.edges {
        let rows = &alpha.alpha[&kind];
        let graph = CellGraph::new(alpha.nodes(), kind)?;
        if enumerate_edges(&graph) != *edges || rows.len() != edges.len() {
            return Err(Error::Config(format!(
                "{kind} alpha rows do not match the cell edges"
            )));
        }
        let mut genes = Vec::new();
        for node in CELL_INPUTS..CELL_INPUTS + graph.nodes {
            let mut cands: Vec<(usize, usize, f64)> = graph
                .incoming(node)
                .map(|e| {
                    let (op, p) = edge_winner(&rows[e], space).expect("space has non-zero ops");
                    (edges[e].from, op, p)
                })
                .collect();
            cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            let mut chosen: Vec<_> = cands.into_iter().take(2).collect();
            chosen.sort_by_key(|c| c.0);
            genes.extend(chosen.into_iter().map(|(pred, op, _)| Gene {
                node,
                pred,
                op: space.op(op).name.clone(),
            }));
        }
        *g.cell_mut(kind) = genes;
    }
    Ok(g)
}

/// Uniformly random valid genotype: two distinct predecessors per node and
/// uniformly drawn non-zero ops.
pub fn random_genotype<R: Rng + ?Sized>(
    space: &SearchSpace,
    nodes: usize,
    kinds: &[CellKind],
    rng: &mut R,
) -> Genotype {
    let ops = space.non_zero_indices();
    let mut g = Genotype {
        schema_version: GENOTYPE_SCHEMA,
        normal: Vec::new(),
        reduce: Vec::new(),
        meta: None,
    };
    for &kind in kinds {
        let mut genes = Vec::new();
        for node in CELL_INPUTS..CELL_INPUTS + nodes {
            let mut preds = sample(rng, node, 2).into_vec();
            preds.sort_unstable();
            for pred in preds {
                let op = ops[rng.gen_range(0..ops.len())];
                genes.push(Gene {
                    node,
                    pred,
                    op: space.op(op).name.clone(),
                });
            }
        }
        *g.cell_mut(kind) = genes;
    }
    g
}
