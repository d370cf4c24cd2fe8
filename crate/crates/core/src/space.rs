//! Candidate operations, their parameterized / non-parameterized grouping,
//! and the cell DAG.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpGroup {
    Parameterized,
    NonParameterized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    /// ReLU, depthwise kxk, pointwise, BN; repeated twice.
    SepConv {
        kernel: usize,
    },
    /// ReLU, depthwise kxk with dilation 2, pointwise, BN.
    DilConv {
        kernel: usize,
    },
    MaxPool,
    AvgPool,
    /// Identity; on stride-2 edges a ReLU, 1x1 stride-2 conv and BN.
    Skip,
    Zero,
}

impl Primitive {
    pub fn group(self) -> OpGroup {
        match self {
            Primitive::SepConv { .. } | Primitive::DilConv { .. } => OpGroup::Parameterized,
            _ => OpGroup::NonParameterized,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct OpKind {
    pub name: String,
    pub primitive: Primitive,
}

impl OpKind {
    /// Looks up a catalog name. Extra identity copies may be named
    /// `skip_connect_<n>`.
    pub fn from_name(name: &str) -> Result<Self> {
        let primitive = match name {
            "sep_conv_3x3" => Primitive::SepConv { kernel: 3 },
            "sep_conv_5x5" => Primitive::SepConv { kernel: 5 },
            "dil_conv_3x3" => Primitive::DilConv { kernel: 3 },
            "dil_conv_5x5" => Primitive::DilConv { kernel: 5 },
            "max_pool_3x3" => Primitive::MaxPool,
            "avg_pool_3x3" => Primitive::AvgPool,
            "skip_connect" => Primitive::Skip,
            "none" => Primitive::Zero,
            other => match other.strip_prefix("skip_connect_") {
                Some(n) if n.parse::<u32>().is_ok() => Primitive::Skip,
                _ => return Err(Error::Config(format!("unknown operation {other:?}"))),
            },
        };
        Ok(Self {
            name: name.to_string(),
            primitive,
        })
    }

    pub fn group(&self) -> OpGroup {
        self.primitive.group()
    }

    pub fn is_zero(&self) -> bool {
        self.primitive == Primitive::Zero
    }
}

pub const DARTS_OPS: [&str; 8] = [
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "max_pool_3x3",
    "avg_pool_3x3",
    "skip_connect",
    "none",
];

/// Which op list to search over. `ops`, when set, replaces the preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceConfig {
    pub name: String,
    #[serde(default)]
    pub ops: Option<Vec<String>>,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            name: "darts".into(),
            ops: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    name: String,
    ops: Vec<OpKind>,
}

impl SearchSpace {
    pub fn new(name: impl Into<String>, names: &[&str]) -> Result<Self> {
        let ops = names
            .iter()
            .map(|n| OpKind::from_name(n))
            .collect::<Result<Vec<_>>>()?;
        let mut seen = HashSet::new();
        for op in &ops {
            if !seen.insert(op.name.as_str()) {
                return Err(Error::Config(format!("duplicate operation {:?}", op.name)));
            }
        }
        if ops.iter().filter(|o| o.is_zero()).count() > 1 {
            return Err(Error::Config(
                "at most one zero operation is allowed".into(),
            ));
        }
        let space = Self {
            name: name.into(),
            ops,
        };
        for group in [OpGroup::Parameterized, OpGroup::NonParameterized] {
            if space.group_indices(group).is_empty() {
                return Err(Error::Config(format!("operation group {group:?} is empty")));
            }
        }
        Ok(space)
    }

    pub fn darts() -> Self {
        Self::new("darts", &DARTS_OPS).expect("default space is valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn ops(&self) -> &[OpKind] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn op(&self, i: usize) -> &OpKind {
        &self.ops[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.ops.iter().position(|o| o.name == name)
    }

    pub fn zero_index(&self) -> Option<usize> {
        self.ops.iter().position(OpKind::is_zero)
    }

    pub fn group_indices(&self, group: OpGroup) -> Vec<usize> {
        (0..self.ops.len())
            .filter(|&i| self.ops[i].group() == group)
            .collect()
    }

    pub fn non_zero_indices(&self) -> Vec<usize> {
        (0..self.ops.len())
            .filter(|&i| !self.ops[i].is_zero())
            .collect()
    }
}

/// Resolves a space from config: `darts`, `1-skip` (pools removed),
/// `3-skip` (pools replaced by extra identities), or an explicit op list.
pub fn build_space(cfg: &SpaceConfig) -> Result<SearchSpace> {
    if let Some(ops) = &cfg.ops {
        let names: Vec<&str> = ops.iter().map(String::as_str).collect();
        return SearchSpace::new(cfg.name.clone(), &names);
    }
    let names: Vec<&str> = match cfg.name.as_str() {
        "darts" => DARTS_OPS.to_vec(),
        "1-skip" => DARTS_OPS
            .iter()
            .copied()
            .filter(|n| !n.ends_with("pool_3x3"))
            .collect(),
        "3-skip" => DARTS_OPS
            .iter()
            .map(|&n| match n {
                "max_pool_3x3" => "skip_connect_2",
                "avg_pool_3x3" => "skip_connect_3",
                other => other,
            })
            .collect(),
        other => return Err(Error::Config(format!("unknown search space {other:?}"))),
    };
    SearchSpace::new(cfg.name.clone(), &names)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CellKind {
    #[serde(rename = "normal")]
    Normal,
    #[serde(rename = "reduce")]
    Reduction,
}

impl CellKind {
    pub fn label(self) -> &'static str {
        match self {
            CellKind::Normal => "normal",
            CellKind::Reduction => "reduce",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(CellKind::Normal),
            "reduce" | "reduction" => Ok(CellKind::Reduction),
            other => Err(Error::Config(format!("unknown cell kind {other:?}"))),
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Edge `from -> to` in node numbering where 0 and 1 are the cell inputs
/// and `2..2 + nodes` are the intermediate nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.from, self.to)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellGraph {
    pub nodes: usize,
    pub kind: CellKind,
}

pub const CELL_INPUTS: usize = 2;

impl CellGraph {
    pub fn new(nodes: usize, kind: CellKind) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::Config(
                "a cell needs at least one intermediate node".into(),
            ));
        }
        Ok(Self { nodes, kind })
    }

    pub fn edge_count(&self) -> usize {
        (0..self.nodes).map(|j| j + CELL_INPUTS).sum()
    }

    /// Stride of an edge: reduction cells downsample edges leaving the inputs.
    pub fn stride(&self, edge: Edge) -> usize {
        if self.kind == CellKind::Reduction && edge.from < CELL_INPUTS {
            2
        } else {
            1
        }
    }

    /// Position of `edge` in [`enumerate_edges`] order.
    pub fn edge_index(&self, edge: Edge) -> Option<usize> {
        if edge.to < CELL_INPUTS || edge.to >= CELL_INPUTS + self.nodes || edge.from >= edge.to {
            return None;
        }
        let before: usize = (CELL_INPUTS..edge.to).sum();
        Some(before + edge.from)
    }

    /// Indices of the edges entering intermediate node `to`.
    pub fn incoming(&self, to: usize) -> std::ops::Range<usize> {
        let start: usize = (CELL_INPUTS..to).sum();
        start..start + to
    }
}

/// All edges ordered by target node, then source node.
pub fn enumerate_edges(graph: &CellGraph) -> Vec<Edge> {
    (CELL_INPUTS..CELL_INPUTS + graph.nodes)
        .flat_map(|to| (0..to).map(move |from| Edge { from, to }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(name: &str) -> SpaceConfig {
        SpaceConfig {
            name: name.into(),
            ops: None,
        }
    }

    #[test]
    fn darts_space_has_two_groups_of_four() {
        let space = build_space(&cfg("darts")).unwrap();
        assert_eq!(space.len(), 8);
        assert_eq!(space.group_indices(OpGroup::Parameterized).len(), 4);
        assert_eq!(space.group_indices(OpGroup::NonParameterized).len(), 4);
        assert_eq!(space.ops().iter().filter(|o| o.is_zero()).count(), 1);
        let zero = space.zero_index().unwrap();
        assert_eq!(space.op(zero).group(), OpGroup::NonParameterized);
    }

    #[test]
    fn one_skip_keeps_identity_and_zero() {
        let space = build_space(&cfg("1-skip")).unwrap();
        let np: Vec<&str> = space
            .group_indices(OpGroup::NonParameterized)
            .into_iter()
            .map(|i| space.op(i).name.as_str())
            .collect();
        assert_eq!(np, ["skip_connect", "none"]);
    }

    #[test]
    fn three_skip_replaces_pools() {
        let space = build_space(&cfg("3-skip")).unwrap();
        assert_eq!(space.len(), 8);
        let skips = space
            .ops()
            .iter()
            .filter(|o| o.primitive == Primitive::Skip)
            .count();
        assert_eq!(skips, 3);
        assert!(space.index_of("max_pool_3x3").is_none());
    }

    #[test]
    fn duplicate_and_unknown_ops_rejected() {
        let dup = SpaceConfig {
            name: "custom".into(),
            ops: Some(vec![
                "sep_conv_3x3".into(),
                "sep_conv_3x3".into(),
                "none".into(),
            ]),
        };
        assert!(matches!(build_space(&dup), Err(Error::Config(_))));
        let unknown = SpaceConfig {
            name: "custom".into(),
            ops: Some(vec!["conv_7x7".into(), "none".into()]),
        };
        assert!(build_space(&unknown).is_err());
        assert!(build_space(&cfg("nope")).is_err());
    }

    #[test]
    fn empty_group_rejected() {
        let only_np = SpaceConfig {
            name: "custom".into(),
            ops: Some(vec!["skip_connect".into(), "none".into()]),
        };
        assert!(build_space(&only_np).is_err());
    }

    #[test]
    fn edge_counts() {
        let g4 = CellGraph::new(4, CellKind::Normal).unwrap();
        assert_eq!(enumerate_edges(&g4).len(), 14);
        assert_eq!(g4.edge_count(), 14);
        let g1 = CellGraph::new(1, CellKind::Normal).unwrap();
        assert_eq!(enumerate_edges(&g1).len(), 2);
    }

    #[test]
    fn edge_order_is_by_target_then_source() {
        let g = CellGraph::new(4, CellKind::Normal).unwrap();
        let edges = enumerate_edges(&g);
        assert_eq!(edges[0], Edge { from: 0, to: 2 });
        assert_eq!(edges[1], Edge { from: 1, to: 2 });
        assert_eq!(edges[2], Edge { from: 0, to: 3 });
        for w in edges.windows(2) {
            assert!((w[0].to, w[0].from) < (w[1].to, w[1].from));
        }
        for (i, e) in edges.iter().enumerate() {
            assert_eq!(g.edge_index(*e), Some(i));
        }
        for to in 2..6 {
            for i in g.incoming(to) {
                assert_eq!(edges[i].to, to);
            }
        }
    }

    #[test]
    fn reduction_strides_input_edges() {
        let g = CellGraph::new(2, CellKind::Reduction).unwrap();
        let strides: Vec<usize> = enumerate_edges(&g).iter().map(|&e| g.stride(e)).collect();
        assert_eq!(strides, [2, 2, 2, 2, 1]);
    }
}
