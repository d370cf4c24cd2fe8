//! Weight-sharing supernet.
//!
//! Every edge carries all candidate ops and mixes them with
//! `p = softmax(alpha_edge)`. The architecture parameters of an edge are
//! shared by every cell of the same kind. Dropped ops contribute nothing to
//! the mixture but stay in the softmax denominator, and no gradient reaches
//! their weights or their alpha entries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Tape, Var};
use crate::drop::DropMask;
use crate::error::{Error, Result};
use crate::nn::{plan_cells, CellInputs, CellPlan, Head, NetConfig, OpModule, Stem};
use crate::params::{OpSlot, ParamId, ParamRole, ParamStore};
use crate::space::{enumerate_edges, CellGraph, CellKind, Edge, SearchSpace};
use crate::tensor::Tensor;

/// All candidate ops of one edge.
#[derive(Clone, Debug)]
pub struct MixedEdge {
    pub edge: Edge,
    pub stride: usize,
    ops: Vec<OpModule>,
}

impl MixedEdge {
    pub fn ops(&self) -> &[OpModule] {
        &self.ops
    }
}

#[derive(Clone, Debug)]
struct SuperCell {
    plan: CellPlan,
    graph: CellGraph,
    inputs: CellInputs,
    edges: Vec<MixedEdge>,
}

/// Addresses one edge of one cell in the stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeRef {
    pub cell: usize,
    pub edge: usize,
}

/// One drop mask per edge for every cell kind.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    masks: BTreeMap<CellKind, Vec<DropMask>>,
}

impl MaskSet {
    pub fn new(masks: BTreeMap<CellKind, Vec<DropMask>>) -> Self {
        Self { masks }
    }

    pub fn get(&self, kind: CellKind, edge: usize) -> Option<&DropMask> {
        self.masks.get(&kind).and_then(|m| m.get(edge))
    }

    pub fn kind(&self, kind: CellKind) -> Option<&[DropMask]> {
        self.masks.get(&kind).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (CellKind, usize, &DropMask)> {
        self.masks
            .iter()
            .flat_map(|(&k, v)| v.iter().enumerate().map(move |(e, m)| (k, e, m)))
    }

    pub fn is_kept(&self, slot: OpSlot) -> bool {
        self.get(slot.kind, slot.edge)
            .is_none_or(|m| m.is_kept(slot.op))
    }

    /// Stable 64-bit digest of every mask bit.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (kind, edge, mask) in self.iter() {
            for word in [kind as u64, edge as u64, mask.bits()] {
                for b in word.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Snapshot of the architecture parameters, `alpha[kind][edge][op]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaTable {
    pub ops: Vec<String>,
    pub edges: BTreeMap<CellKind, Vec<Edge>>,
    pub alpha: BTreeMap<CellKind, Vec<Vec<f64>>>,
}

impl AlphaTable {
    /// All-zero (uniform) table for the given space and node count.
    pub fn uniform(space: &SearchSpace, nodes: usize, kinds: &[CellKind]) -> Result<Self> {
        let mut edges = BTreeMap::new();
        let mut alpha = BTreeMap::new();
        for &kind in kinds {
            let e = enumerate_edges(&CellGraph::new(nodes, kind)?);
            alpha.insert(kind, vec![vec![0.0; space.len()]; e.len()]);
            edges.insert(kind, e);
        }
        Ok(Self {
            ops: space.ops().iter().map(|o| o.name.clone()).collect(),
            edges,
            alpha,
        })
    }

    pub fn kinds(&self) -> impl Iterator<Item = CellKind> + '_ {
        self.alpha.keys().copied()
    }

    pub fn probs(&self, kind: CellKind, edge: usize) -> Vec<f64> {
        softmax(&self.alpha[&kind][edge])
    }

    /// Shannon entropy (nats) of `softmax(alpha)` on one edge.
    pub fn entropy(&self, kind: CellKind, edge: usize) -> f64 {
        -self
            .probs(kind, edge)
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.alpha
            .values()
            .flatten()
            .flatten()
            .all(|v| v.is_finite())
    }

    /// Number of intermediate nodes implied by the edge count.
    pub fn nodes(&self) -> usize {
        let edges = self.edges.values().next().map_or(0, Vec::len);
        let mut nodes = 0;
        while (CellGraph {
            nodes,
            kind: CellKind::Normal,
        })
        .edge_count()
            < edges
        {
            nodes += 1;
        }
        nodes
    }
}

#[derive(Clone, Debug)]
pub struct Supernet {
    cfg: NetConfig,
    space: SearchSpace,
    in_channels: usize,
    classes: usize,
    params: ParamStore,
    stem: Stem,
    cells: Vec<SuperCell>,
    head: Head,
    alphas: BTreeMap<CellKind, ParamId>,
}

impl Supernet {
    pub fn new(
        cfg: &NetConfig,
        space: &SearchSpace,
        in_channels: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(seed);
        let affine = cfg.bn_affine;
        let (plans, out_c) = plan_cells(cfg);
        let stem = Stem::new(
            &mut params,
            in_channels,
            cfg.stem_multiplier * cfg.channels,
            affine,
        )?;
        let mut cells = Vec::with_capacity(plans.len());
        for (ci, plan) in plans.into_iter().enumerate() {
            let graph = CellGraph::new(cfg.nodes, plan.kind)?;
            let prefix = format!("cell{ci}");
            let inputs = CellInputs::new(&mut params, &prefix, &plan, affine)?;
            let mut edges = Vec::with_capacity(graph.edge_count());
            for (ei, edge) in enumerate_edges(&graph).into_iter().enumerate() {
                let stride = graph.stride(edge);
                let edge_prefix = format!("{prefix}.e{edge}");
                let ops = space
                    .ops()
                    .iter()
                    .enumerate()
                    .map(|(oi, op)| {
                        let role = ParamRole::Weight {
                            op: Some(OpSlot {
                                kind: plan.kind,
                                edge: ei,
                                op: oi,
                            }),
                        };
                        OpModule::build(&mut params, &edge_prefix, op, plan.c, stride, affine, role)
                    })
                    .collect::<Result<Vec<_>>>()?;
                edges.push(MixedEdge { edge, stride, ops });
            }
            cells.push(SuperCell {
                plan,
                graph,
                inputs,
                edges,
            });
        }
        let head = Head::new(&mut params, "head", out_c, classes)?;
        let mut alphas = BTreeMap::new();
        for kind in [CellKind::Normal, CellKind::Reduction] {
            if cells.iter().any(|c| c.plan.kind == kind) {
                let e = CellGraph::new(cfg.nodes, kind)?.edge_count();
                let id = params.add(
                    format!("alpha.{}", kind.label()),
                    Tensor::zeros(&[e, space.len()]),
                    ParamRole::Alpha(kind),
                )?;
                alphas.insert(kind, id);
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            space: space.clone(),
            in_channels,
            classes,
            params,
            stem,
            cells,
            head,
            alphas,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn cell_kind(&self, cell: usize) -> CellKind {
        self.cells[cell].plan.kind
    }

    pub fn kinds(&self) -> Vec<CellKind> {
        self.alphas.keys().copied().collect()
    }

    pub fn alpha_id(&self, kind: CellKind) -> Option<ParamId> {
        self.alphas.get(&kind).copied()
    }

    pub fn edges(&self, kind: CellKind) -> Vec<Edge> {
        enumerate_edges(&CellGraph {
            nodes: self.cfg.nodes,
            kind,
        })
    }

    pub fn mixed_edge(&self, at: EdgeRef) -> Option<&MixedEdge> {
        self.cells.get(at.cell).and_then(|c| c.edges.get(at.edge))
    }

    pub fn alpha_table(&self) -> AlphaTable {
        let mut edges = BTreeMap::new();
        let mut alpha = BTreeMap::new();
        for (&kind, &id) in &self.alphas {
            let t = &self.params.get(id).value;
            let cols = self.space.len();
            alpha.insert(
                kind,
                t.data().chunks_exact(cols).map(<[f64]>::to_vec).collect(),
            );
            edges.insert(kind, self.edges(kind));
        }
        AlphaTable {
            ops: self.space.ops().iter().map(|o| o.name.clone()).collect(),
            edges,
            alpha,
        }
    }

    /// Overwrites the architecture parameters from a table of the same layout.
    pub fn set_alpha_table(&mut self, table: &AlphaTable) -> Result<()> {
        for (&kind, &id) in &self.alphas {
            let rows = table
                .alpha
                .get(&kind)
                .ok_or_else(|| Error::Config(format!("alpha table lacks {kind} cells")))?;
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let p = &mut self.params.get_mut(id).value;
            if flat.len() != p.numel() {
                return Err(Error::shape(
                    "set_alpha_table",
                    format!("{} values for {:?}", flat.len(), p.shape()),
                ));
            }
            p.data_mut().copy_from_slice(&flat);
        }
        Ok(())
    }

    pub fn all_kept_masks(&self) -> MaskSet {
        let masks = self
            .alphas
            .keys()
            .map(|&k| {
                (
                    k,
                    vec![DropMask::all_kept(self.space.len()); self.edges(k).len()],
                )
            })
            .collect();
        MaskSet::new(masks)
    }

    /// Mixture of the kept ops on one edge, weighted by the full-softmax `p`.
    #[allow(clippy::too_many_arguments)]
    pub fn mixed_forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        edge: &MixedEdge,
        alpha: Var,
        row: usize,
        mask: &DropMask,
    ) -> Result<Var> {
        if mask.len() != edge.ops.len() {
            return Err(Error::Contract(format!(
                "mask has {} entries for {} ops",
                mask.len(),
                edge.ops.len()
            )));
        }
        if !mask.any_kept() {
            return Err(Error::Contract("every op on the edge is dropped".into()));
        }
        let p = tape.softmax_row(alpha, row, mask.keep())?;
        let mut terms = Vec::new();
        for (o, op) in edge.ops.iter().enumerate() {
            if !mask.is_kept(o) {
                continue;
            }
            if let Some(out) = op.forward(tape, vars, x)? {
                terms.push((o, out));
            }
        }
        if terms.is_empty() {
            let (n, c, h, w) = tape
                .value(x)
                .dims4()
                .ok_or_else(|| Error::shape("mixed_forward", "expected 4-D input"))?;
            let s = edge.stride;
            return tape.constant(Tensor::zeros(&[n, c, h.div_ceil(s), w.div_ceil(s)]));
        }
        tape.weighted_sum(p, &terms)
    }

    /// Intermediate node `node` (>= 2) of cell `cell`: the sum over every
    /// incoming edge of its mixed output.
    #[allow(clippy::too_many_arguments)]
    pub fn node_forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        cell: usize,
        states: &[Var],
        node: usize,
        masks: &MaskSet,
    ) -> Result<Var> {
        let sc = &self.cells[cell];
        let kind = sc.plan.kind;
        let alpha = vars[self.alphas[&kind].0];
        let mut mappings = Vec::new();
        for ei in sc.graph.incoming(node) {
            let edge = &sc.edges[ei];
            let mask = masks
                .get(kind, ei)
                .ok_or_else(|| Error::Contract(format!("no mask for {kind} edge {ei}")))?;
            mappings.push(self.mixed_forward(
                tape,
                vars,
                states[edge.edge.from],
                edge,
                alpha,
                ei,
                mask,
            )?);
        }
        sum_mappings(tape, &mappings)
    }

    /// Preprocessed inputs followed by each intermediate node, up to and
    /// including node `upto` (all nodes when `None`).
    #[allow(clippy::too_many_arguments)]
    fn cell_states(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        cell: usize,
        s0: Var,
        s1: Var,
        masks: &MaskSet,
        upto: Option<usize>,
    ) -> Result<Vec<Var>> {
        let sc = &self.cells[cell];
        let (p0, p1) = sc.inputs.forward(tape, vars, s0, s1)?;
        let mut states = vec![p0, p1];
        let last = upto.unwrap_or(sc.graph.nodes + 1);
        for node in 2..=last {
            let x = self.node_forward(tape, vars, cell, &states, node, masks)?;
            states.push(x);
        }
        Ok(states)
    }

    /// Logits for a batch already on the tape; `vars` comes from registering
    /// this supernet's parameters on the same tape.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, masks: &MaskSet) -> Result<Var> {
        let stem = self.stem.forward(tape, vars, x)?;
        let (mut s0, mut s1) = (stem, stem);
        for cell in 0..self.cells.len() {
            let states = self.cell_states(tape, vars, cell, s0, s1, masks, None)?;
            let out = tape.concat_channels(&states[2..])?;
            s0 = s1;
            s1 = out;
        }
        self.head.forward(tape, vars, s1)
    }

    /// Convenience forward on a fresh tape.
    pub fn logits(&self, images: &Tensor, masks: &MaskSet) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape)?;
        let x = tape.constant(images.clone())?;
        let logits = self.forward(&mut tape, &vars, x, masks)?;
        Ok(tape.value(logits).clone())
    }

    /// Runs the stack with every op kept up to the input node of `at`.
    fn edge_input_var(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        at: EdgeRef,
        images: &Tensor,
    ) -> Result<(Var, &MixedEdge)> {
        let edge = self
            .mixed_edge(at)
            .ok_or_else(|| Error::Config(format!("no edge {} in cell {}", at.edge, at.cell)))?;
        let masks = self.all_kept_masks();
        let x = tape.constant(images.clone())?;
        let stem = self.stem.forward(tape, vars, x)?;
        let (mut s0, mut s1) = (stem, stem);
        for cell in 0..at.cell {
            let states = self.cell_states(tape, vars, cell, s0, s1, &masks, None)?;
            let out = tape.concat_channels(&states[2..])?;
            s0 = s1;
            s1 = out;
        }
        let from = edge.edge.from;
        let states = self.cell_states(tape, vars, at.cell, s0, s1, &masks, Some(from.max(1)))?;
        Ok((states[from], edge))
    }

    /// Output of every non-zero op on one edge, computed with every op kept.
    pub fn extract_edge_features(
        &self,
        at: EdgeRef,
        images: &Tensor,
    ) -> Result<Vec<(String, Tensor)>> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape)?;
        let (input, edge) = self.edge_input_var(&mut tape, &vars, at, images)?;
        let mut features = Vec::new();
        for (o, op) in edge.ops.iter().enumerate() {
            if let Some(out) = op.forward(&mut tape, &vars, input)? {
                features.push((self.space.op(o).name.clone(), tape.value(out).clone()));
            }
        }
        Ok(features)
    }

    /// Value of the node feeding edge `at`.
    pub fn edge_input(&self, at: EdgeRef, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape)?;
        let (input, _) = self.edge_input_var(&mut tape, &vars, at, images)?;
        Ok(tape.value(input).clone())
    }
}

/// `x_j = sum_i mapping_i`; every mapping must have the same shape.
pub fn sum_mappings(tape: &mut Tape, mappings: &[Var]) -> Result<Var> {
    let (&first, rest) = mappings
        .split_first()
        .ok_or_else(|| Error::Contract("node has no incoming mappings".into()))?;
    let mut acc = first;
    for &m in rest {
        acc = tape.add(acc, m)?;
    }
    Ok(acc)
}
